#include "retr/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace retr {
namespace {

template <typename T>
void write_le(std::ostream& out, const std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    char buf[sizeof(T)];
    for (T v : values) {
      std::memcpy(buf, &v, sizeof(T));
      std::reverse(buf, buf + sizeof(T));
      out.write(buf, sizeof(T));
    }
  }
}

template <typename T>
std::vector<T> read_le(std::istream& in, std::size_t n, const std::string& name) {
  std::vector<T> values(n);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(T)) {
    throw ArchiveError("archive truncated while reading '" + name + "'");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) {
      char buf[sizeof(T)];
      std::memcpy(buf, &v, sizeof(T));
      std::reverse(buf, buf + sizeof(T));
      std::memcpy(&v, buf, sizeof(T));
    }
  }
  return values;
}

bool has_space(std::string_view s) {
  return s.empty() || s.find_first_of(" \t\r\n") != std::string_view::npos;
}

}  // namespace

std::size_t NamedArray::size() const {
  return std::visit([](const auto& v) { return v.size(); }, values);
}

template <typename T>
std::vector<T> NamedArray::as() const {
  return std::visit([](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, values);
}
template std::vector<float> NamedArray::as<float>() const;
template std::vector<double> NamedArray::as<double>() const;

const NamedArray* Archive::find(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::optional<std::string> Archive::meta(std::string_view key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void write_archive(std::ostream& out, const Archive& archive) {
  for (const auto& [k, v] : archive.metadata) {
    if (has_space(k) || v.find('\n') != std::string::npos) {
      throw ArchiveError("invalid metadata entry '" + k + "'");
    }
    out << "# " << k << " = " << v << '\n';
  }
  for (const auto& a : archive.arrays) {
    if (has_space(a.name) || a.name[0] == '#') throw ArchiveError("invalid array name '" + a.name + "'");
    if (shape_numel(a.shape) != a.size()) {
      throw ArchiveError("array '" + a.name + "' has shape " + shape_to_string(a.shape) + " but " +
                         std::to_string(a.size()) + " values");
    }
    out << a.name << ' ' << (a.dtype() == DType::f32 ? "f32" : "f64") << ' ' << a.shape.size();
    for (auto s : a.shape) out << ' ' << s;
    out << '\n';
  }
  out << '\n';
  for (const auto& a : archive.arrays) {
    std::visit([&](const auto& v) { write_le(out, v); }, a.values);
  }
  if (!out) throw ArchiveError("write failed");
}

Archive read_archive(std::istream& in) {
  Archive archive;
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::string line;
  std::size_t lineno = 0;
  bool terminated = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      terminated = true;
      break;
    }
    if (line[0] == '#') {
      auto eq = line.find(" = ");
      if (line.size() < 3 || line[1] != ' ' || eq == std::string::npos) {
        throw ArchiveError("bad metadata line " + std::to_string(lineno));
      }
      archive.metadata.emplace_back(line.substr(2, eq - 2), line.substr(eq + 3));
      continue;
    }
    std::istringstream ls(line);
    Entry e;
    std::string dtype;
    std::size_t ndim = 0;
    if (!(ls >> e.name >> dtype >> ndim)) {
      throw ArchiveError("bad header line " + std::to_string(lineno) + ": " + line);
    }
    if (dtype == "f32") {
      e.dtype = DType::f32;
    } else if (dtype == "f64") {
      e.dtype = DType::f64;
    } else {
      throw ArchiveError("unknown dtype '" + dtype + "' on line " + std::to_string(lineno));
    }
    e.shape.resize(ndim);
    for (auto& s : e.shape) {
      if (!(ls >> s)) throw ArchiveError("missing dimension on line " + std::to_string(lineno));
    }
    std::string extra;
    if (ls >> extra) throw ArchiveError("trailing data on line " + std::to_string(lineno));
    entries.push_back(std::move(e));
  }
  if (!terminated) throw ArchiveError("archive header is not terminated by a blank line");
  for (auto& e : entries) {
    NamedArray a;
    a.name = e.name;
    a.shape = e.shape;
    const std::size_t n = shape_numel(e.shape);
    if (e.dtype == DType::f32) {
      a.values = read_le<float>(in, n, e.name);
    } else {
      a.values = read_le<double>(in, n, e.name);
    }
    archive.arrays.push_back(std::move(a));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ArchiveError("unexpected trailing bytes after the last array");
  }
  return archive;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError("cannot open '" + path.string() + "' for writing");
  write_archive(out, archive);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open '" + path.string() + "'");
  return read_archive(in);
}

}  // namespace retr
