#include "smat/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace smat {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigMap parse_config(const std::string& text) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key=value, got '" + line + "'");
    auto key = trim(line.substr(0, eq));
    auto val = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": empty key");
    cfg[key] = val;
  }
  return cfg;
}

ConfigMap load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::string& path, const ConfigMap& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_config: cannot open " + path);
  for (const auto& [k, v] : cfg) out << k << " = " << v << "\n";
  if (!out) throw std::runtime_error("save_config: write failed for " + path);
}

std::string config_get(const ConfigMap& cfg, const std::string& key,
                       const std::string& fallback) {
  auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

double config_get_num(const ConfigMap& cfg, const std::string& key,
                      double fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    std::size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': '" + it->second +
                             "' is not a number");
  }
}

long long config_get_int(const ConfigMap& cfg, const std::string& key,
                         long long fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    std::size_t used = 0;
    long long v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': '" + it->second +
                             "' is not an integer");
  }
}

}  // namespace smat
