#pragma once

#include <map>
#include <string>
#include <vector>

#include "smope/types.hpp"

namespace smope {

// Flat "key = value" configuration with [section] headers, '#' or ';'
// comments, and line-anchored errors. Unknown sections or keys are rejected
// against a declared schema.
class ConfigFile {
 public:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool consumed = false;
  };

  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                const std::vector<int>& fallback) const;
  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      const std::vector<double>& fallback) const;

  // Throws ConfigError naming the first entry never read by a getter.
  void reject_unconsumed() const;

  const std::string& text() const { return raw_text_; }

 private:
  [[noreturn]] void fail(const std::string& section, const std::string& key,
                         const std::string& why) const;
  const Entry* find(const std::string& section, const std::string& key) const;

  std::map<std::string, std::map<std::string, Entry>> sections_;
  std::string origin_;
  std::string raw_text_;
};

}  // namespace smope
