#include "vicregl/config.hpp"

#include <fstream>
#include <sstream>

#include "vicregl/checkpoint.hpp"
#include "vicregl/common.hpp"

namespace vicregl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  VRL_CHECK(is.good(), "cannot open config file: ", path);
  std::stringstream buf;
  buf << is.rdbuf();
  load_string(buf.str(), path);
}

void RunConfig::load_string(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line.resize(comment);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    VRL_CHECK(eq != std::string::npos, origin, ":", lineno,
              ": expected 'key = value', got '", t, "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    VRL_CHECK(!key.empty(), origin, ":", lineno, ": empty key");
    kv_[key] = value;
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  kv_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string RunConfig::get_str(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

double RunConfig::get_double(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    VRL_CHECK(used == it->second.size(), "");
    return v;
  } catch (...) {
    throw std::runtime_error("config key '" + key + "': '" + it->second +
                             "' is not a number");
  }
}

std::size_t RunConfig::get_size(const std::string& key, std::size_t dflt) const {
  return std::size_t(get_u64(key, dflt));
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(it->second, &used);
    VRL_CHECK(used == it->second.size(), "");
    return v;
  } catch (...) {
    throw std::runtime_error("config key '" + key + "': '" + it->second +
                             "' is not an unsigned integer");
  }
}

bool RunConfig::get_bool(const std::string& key, bool dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<std::size_t> RunConfig::get_size_list(const std::string& key,
                                                  std::vector<std::size_t> dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  std::vector<std::size_t> out;
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (...) {
      throw std::runtime_error("config key '" + key + "': bad list element '" + item +
                               "'");
    }
  }
  VRL_CHECK(!out.empty(), "config key '", key, "': empty list");
  return out;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
  return os.str();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(resolved_text()); }

}  // namespace vicregl
