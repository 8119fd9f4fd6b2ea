#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace haformer {

// Flat `key = value` text with '#' comments and blank lines. Duplicate keys
// are errors; consumers reject unknown keys via ConfigView.
std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& origin);
std::map<std::string, std::string> parse_config_file(const std::string& path);

// Typed, consumption-tracked access. finish() throws on keys nobody read.
class ConfigView {
 public:
  explicit ConfigView(std::map<std::string, std::string> kv, std::string origin)
      : kv_(std::move(kv)), origin_(std::move(origin)) {}

  int get_int(const std::string& key, int fallback);
  double get_double(const std::string& key, double fallback);
  std::string get_string(const std::string& key, const std::string& fallback);
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);

  void finish() const;  // rejects unconsumed (unknown) keys

 private:
  const std::string* find(const std::string& key);

  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
  std::string origin_;
};

}  // namespace haformer
