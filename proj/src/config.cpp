#include "fpps/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace fpps {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(key, "expected a number, got '" + text + "'");
}

long parse_long(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  long v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size())
    throw ValidationError(key, "expected an integer, got '" + text + "'");
  return v;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ValidationError("line " + std::to_string(lineno), "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("line " + std::to_string(lineno), "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError("line " + std::to_string(lineno), "empty key");
    cfg.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

ConfigMap ConfigMap::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void ConfigMap::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty())
    throw ValidationError("--set", "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void ConfigMap::set(const std::string& key, const std::string& value) { raw_[key] = unquote(trim(value)); }

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) {
  const auto it = raw_.find(key);
  const std::string v = it == raw_.end() ? fallback : it->second;
  resolved_[key] = v;
  return v;
}

std::string ConfigMap::get_choice(const std::string& key, const std::string& fallback,
                                  const std::vector<std::string>& allowed) {
  const std::string v = get_string(key, fallback);
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
    std::string options;
    for (const auto& a : allowed) options += (options.empty() ? "" : "|") + a;
    throw ValidationError(key, "expected one of {" + options + "}, got '" + v + "'");
  }
  return v;
}

double ConfigMap::get_double(const std::string& key, double fallback) {
  const auto it = raw_.find(key);
  const double v = it == raw_.end() ? fallback : parse_double(key, it->second);
  resolved_[key] = format_double(v);
  return v;
}

std::optional<double> ConfigMap::get_optional_double(const std::string& key) {
  const auto it = raw_.find(key);
  if (it == raw_.end() || it->second.empty() || it->second == "none") {
    resolved_[key] = "none";
    return std::nullopt;
  }
  return get_double(key, 0.0);
}

long ConfigMap::get_long(const std::string& key, long fallback) {
  const auto it = raw_.find(key);
  const long v = it == raw_.end() ? fallback : parse_long(key, it->second);
  resolved_[key] = std::to_string(v);
  return v;
}

std::uint64_t ConfigMap::get_uint64(const std::string& key, std::uint64_t fallback) {
  const auto it = raw_.find(key);
  std::uint64_t v = fallback;
  if (it != raw_.end()) {
    const std::string t = trim(it->second);
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size())
      throw ValidationError(key, "expected a non-negative 64-bit integer, got '" + it->second + "'");
  }
  resolved_[key] = std::to_string(v);
  return v;
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) {
  const auto it = raw_.find(key);
  bool v = fallback;
  if (it != raw_.end()) {
    if (it->second == "true" || it->second == "1")
      v = true;
    else if (it->second == "false" || it->second == "0")
      v = false;
    else
      throw ValidationError(key, "expected true or false, got '" + it->second + "'");
  }
  resolved_[key] = v ? "true" : "false";
  return v;
}

std::optional<std::vector<double>> ConfigMap::get_doubles(const std::string& key) {
  const auto it = raw_.find(key);
  if (it == raw_.end()) return std::nullopt;
  std::string body = trim(it->second);
  if (!body.empty() && body.front() == '[') {
    if (body.back() != ']') throw ValidationError(key, "unterminated list");
    body = body.substr(1, body.size() - 2);
  }
  std::vector<double> values;
  std::istringstream in(body);
  std::string item;
  while (std::getline(in, item, ','))
    if (!trim(item).empty()) values.push_back(parse_double(key, item));
  std::string echo = "[";
  for (std::size_t i = 0; i < values.size(); ++i) echo += (i ? "," : "") + format_double(values[i]);
  resolved_[key] = echo + "]";
  return values;
}

std::vector<std::string> ConfigMap::unused() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : raw_)
    if (!resolved_.count(k)) out.push_back(k);
  return out;
}

}  // namespace fpps
