// Shared error types and small utilities used across the library.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitmix {

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension violations.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Invalid model or run configuration (bad embed dim, geometry mismatch on load, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Image/patch geometry violations (non-divisible sizes, inconsistent patch counts).
class GeometryError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Batch mixing violations (batch too small to pick a donor, bad plan).
class MixingError : public Error {
public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// FNV-1a 64-bit, used for checkpoint checksums and cheap content fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

// Flat "key value" text config, one pair per line, '#' comments.
// Used for corpus manifests and run-provenance files.
class KvConfig {
public:
  KvConfig() = default;

  static KvConfig parse(std::istream& in) {
    KvConfig kv;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      auto sp = line.find_first_of(" \t", first);
      if (sp == std::string::npos) {
        kv.set(line.substr(first), "");
        continue;
      }
      auto vstart = line.find_first_not_of(" \t", sp);
      kv.set(line.substr(first, sp - first),
             vstart == std::string::npos ? "" : line.substr(vstart));
    }
    return kv;
  }

  static KvConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path.string());
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }
  void set_i64(const std::string& key, std::int64_t v) { set(key, std::to_string(v)); }
  void set_f64(const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(key, os.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }
  std::string get_or(const std::string& key, const std::string& dflt) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }
  std::int64_t get_i64(const std::string& key) const { return std::stoll(get(key)); }
  std::int64_t get_i64_or(const std::string& key, std::int64_t dflt) const {
    return has(key) ? get_i64(key) : dflt;
  }
  double get_f64(const std::string& key) const { return std::stod(get(key)); }
  double get_f64_or(const std::string& key, double dflt) const {
    return has(key) ? get_f64(key) : dflt;
  }

  std::string to_string() const {
    std::string out;
    for (const auto& k : order_) {
      out += k;
      out += " ";
      out += values_.at(k);
      out += "\n";
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write config file: " + path.string());
    out << to_string();
  }

  const std::vector<std::string>& keys() const { return order_; }

private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

// Minimal CSV writer; fields are written verbatim (callers only emit
// numbers, plain identifiers and the "inf" sentinel, so no quoting).
class CsvWriter {
public:
  CsvWriter(const std::filesystem::path& path, const std::string& header, bool append = false)
      : out_(path, append ? std::ios::app | std::ios::binary : std::ios::binary) {
    if (!out_) throw IoError("cannot open csv for writing: " + path.string());
    if (!append || std::filesystem::file_size(path) == 0) out_ << header << "\n";
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ",";
      out_ << fields[i];
    }
    out_ << "\n";
    out_.flush();
  }

private:
  std::ofstream out_;
};

inline std::string fmt_f64(double v, int prec = 9) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

} // namespace vitmix
