#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fpps/core.hpp"

namespace fpps {

/// A configuration field is missing, malformed or out of range.
class ValidationError : public ConfigurationError {
 public:
  ValidationError(const std::string& field, const std::string& message)
      : ConfigurationError(field + ": " + message), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Flat key-value configuration with TOML-style sections.
///
/// Keys inside `[section]` are stored as `section.key`. Values are scalars,
/// quoted strings or bracketed comma-separated lists. Every lookup records
/// the resolved value (defaults included) so the full configuration can be
/// echoed; lookups of keys that were never read are reported by unused().
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::string& path);

  /// Applies a `key=value` override.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return raw_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::string get_choice(const std::string& key, const std::string& fallback,
                         const std::vector<std::string>& allowed);
  double get_double(const std::string& key, double fallback);
  std::optional<double> get_optional_double(const std::string& key);
  long get_long(const std::string& key, long fallback);
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::optional<std::vector<double>> get_doubles(const std::string& key);

  /// Keys present in the input that no lookup consumed.
  std::vector<std::string> unused() const;
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  std::map<std::string, std::string> raw_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace fpps
