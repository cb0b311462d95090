#pragma once

#include <map>
#include <string>
#include <vector>

#include "phrit/errors.hpp"

namespace phrit::cfg {

// Flat key = value configuration document; '#' starts a comment. Keys are
// checked against the documented set on use, not on load, so ablation runs
// are plain config diffs.
class Config {
 public:
  Config() = default;
  static Config load(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  long long get_int64(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;

  // Apply "key=value" override strings (CLI --set flags).
  void apply_override(const std::string& assignment);

  const std::map<std::string, std::string>& entries() const { return kv_; }
  std::string dump() const;  // canonical text form (sorted keys)

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace phrit::cfg
