#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace cellcnn {

// Error hierarchy mapped to CLI exit codes: ConfigError -> 2, DataError -> 3,
// NumericError -> 4. `code()` is a short stable identifier ("InvalidClass",
// "EmptyNucleus", ...) that callers and tests can match on.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kNumCellClasses = 7;

enum class Category : int { normal = 0, abnormal = 1 };

// Classes 1-3 are normal cell types, 4-7 the dysplastic/carcinoma ones.
inline Category category_of(int class_label) {
  if (class_label < 1 || class_label > kNumCellClasses)
    throw DataError("InvalidClass",
                    "class label " + std::to_string(class_label) + " outside 1..7");
  return class_label <= 3 ? Category::normal : Category::abnormal;
}

inline const char* category_name(Category c) {
  return c == Category::normal ? "normal" : "abnormal";
}

}  // namespace cellcnn
