#include "smope/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace smope {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
    ++b;
  }
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
    --e;
  }
  return s.substr(b, e - b);
}

}  // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config: cannot open '" + path + "'");
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  cfg.origin_ = origin;
  cfg.raw_text_ = text;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') {
      continue;
    }
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      cfg.sections_[section];
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    auto& sec = cfg.sections_[section];
    if (sec.count(key) != 0) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    sec.emplace(key, Entry{value, lineno, false});
  }
  return cfg;
}

const ConfigFile::Entry* ConfigFile::find(const std::string& section,
                                          const std::string& key) const {
  auto sit = sections_.find(section);
  if (sit == sections_.end()) {
    return nullptr;
  }
  auto kit = sit->second.find(key);
  if (kit == sit->second.end()) {
    return nullptr;
  }
  kit->second.consumed = true;
  return &kit->second;
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

void ConfigFile::fail(const std::string& section, const std::string& key,
                      const std::string& why) const {
  const Entry* e = nullptr;
  auto sit = sections_.find(section);
  if (sit != sections_.end()) {
    auto kit = sit->second.find(key);
    if (kit != sit->second.end()) {
      e = &kit->second;
    }
  }
  const std::string at = e != nullptr ? origin_ + ":" + std::to_string(e->line) : origin_;
  throw ConfigError(at + ": [" + section + "] " + key + ": " + why);
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
  const Entry* e = find(section, key);
  return e != nullptr ? e->value : fallback;
}

int ConfigFile::get_int(const std::string& section, const std::string& key, int fallback) const {
  const Entry* e = find(section, key);
  if (e == nullptr) {
    return fallback;
  }
  try {
    std::size_t pos = 0;
    const int v = std::stoi(e->value, &pos);
    if (pos != e->value.size()) {
      fail(section, key, "not an integer: '" + e->value + "'");
    }
    return v;
  } catch (const std::logic_error&) {
    fail(section, key, "not an integer: '" + e->value + "'");
  }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
  const Entry* e = find(section, key);
  if (e == nullptr) {
    return fallback;
  }
  try {
    std::size_t pos = 0;
    const double v = std::stod(e->value, &pos);
    if (pos != e->value.size()) {
      fail(section, key, "not a number: '" + e->value + "'");
    }
    return v;
  } catch (const std::logic_error&) {
    fail(section, key, "not a number: '" + e->value + "'");
  }
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
  const Entry* e = find(section, key);
  if (e == nullptr) {
    return fallback;
  }
  std::string v = e->value;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no" || v == "off") {
    return false;
  }
  fail(section, key, "not a boolean: '" + e->value + "'");
}

namespace {

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string current;
  for (char c : value) {
    if (c == ',') {
      parts.push_back(trim(current));
      current.clear();
    } else {
      current += c;
    }
  }
  const std::string last = trim(current);
  if (!last.empty()) {
    parts.push_back(last);
  }
  return parts;
}

}  // namespace

std::vector<int> ConfigFile::get_int_list(const std::string& section, const std::string& key,
                                          const std::vector<int>& fallback) const {
  const Entry* e = find(section, key);
  if (e == nullptr) {
    return fallback;
  }
  std::vector<int> out;
  for (const std::string& part : split_list(e->value)) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::logic_error&) {
      fail(section, key, "not an integer list: '" + e->value + "'");
    }
  }
  if (out.empty()) {
    fail(section, key, "empty list");
  }
  return out;
}

std::vector<double> ConfigFile::get_double_list(const std::string& section, const std::string& key,
                                                const std::vector<double>& fallback) const {
  const Entry* e = find(section, key);
  if (e == nullptr) {
    return fallback;
  }
  std::vector<double> out;
  for (const std::string& part : split_list(e->value)) {
    try {
      out.push_back(std::stod(part));
    } catch (const std::logic_error&) {
      fail(section, key, "not a number list: '" + e->value + "'");
    }
  }
  if (out.empty()) {
    fail(section, key, "empty list");
  }
  return out;
}

void ConfigFile::reject_unconsumed() const {
  for (const auto& [section, entries] : sections_) {
    for (const auto& [key, entry] : entries) {
      if (!entry.consumed) {
        throw ConfigError(origin_ + ":" + std::to_string(entry.line) + ": unknown key '" + key +
                          "' in section [" + section + "]");
      }
    }
  }
}

}  // namespace smope
