#include "haformer/config_file.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace haformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    if (kv.count(key))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                               "'");
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

const std::string* ConfigView::find(const std::string& key) {
  auto it = kv_.find(key);
  if (it == kv_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

int ConfigView::get_int(const std::string& key, int fallback) {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    size_t pos = 0;
    const int parsed = std::stoi(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw std::runtime_error(origin_ + ": key '" + key + "' is not an integer: '" + *v + "'");
  }
}

double ConfigView::get_double(const std::string& key, double fallback) {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    size_t pos = 0;
    const double parsed = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw std::runtime_error(origin_ + ": key '" + key + "' is not a number: '" + *v + "'");
  }
}

std::string ConfigView::get_string(const std::string& key, const std::string& fallback) {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

std::vector<int> ConfigView::get_int_list(const std::string& key, std::vector<int> fallback) {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<int> out;
  std::string item;
  std::istringstream is(*v);
  while (std::getline(is, item, ',')) {
    try {
      size_t pos = 0;
      const int parsed = std::stoi(item, &pos);
      while (pos < item.size() && std::isspace(static_cast<unsigned char>(item[pos]))) ++pos;
      if (pos != item.size()) throw std::invalid_argument("trailing characters");
      out.push_back(parsed);
    } catch (const std::exception&) {
      throw std::runtime_error(origin_ + ": key '" + key + "' is not a comma-separated int list: '" +
                               *v + "'");
    }
  }
  if (out.empty())
    throw std::runtime_error(origin_ + ": key '" + key + "' must hold at least one integer");
  return out;
}

void ConfigView::finish() const {
  for (const auto& [key, value] : kv_)
    if (!used_.count(key))
      throw std::runtime_error(origin_ + ": unknown key '" + key + "'");
}

}  // namespace haformer
