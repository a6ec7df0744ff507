#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "retr/tensor.hpp"

namespace retr {

// Named-array container. Layout:
//
//   # key = value            optional metadata lines
//   name dtype ndim dims...  one line per array, dtype is f32 or f64
//   <blank line>
//   raw little-endian values, arrays in header order
//
// Reading then writing an archive reproduces the file byte for byte.

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

struct NamedArray {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const { return values.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;
  template <typename T>
  std::vector<T> as() const;
};

struct Archive {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedArray> arrays;

  const NamedArray* find(std::string_view name) const;
  std::optional<std::string> meta(std::string_view key) const;
};

void write_archive(std::ostream& out, const Archive& archive);
Archive read_archive(std::istream& in);
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace retr
