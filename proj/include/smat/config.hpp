#pragma once

// Plain key=value config files: '#' comments, blank lines ignored,
// whitespace trimmed around keys and values.

#include <map>
#include <string>

namespace smat {

using ConfigMap = std::map<std::string, std::string>;

ConfigMap load_config(const std::string& path);
ConfigMap parse_config(const std::string& text);  // throws with line numbers
void save_config(const std::string& path, const ConfigMap& cfg);

std::string config_get(const ConfigMap& cfg, const std::string& key,
                       const std::string& fallback);
double config_get_num(const ConfigMap& cfg, const std::string& key,
                      double fallback);
long long config_get_int(const ConfigMap& cfg, const std::string& key,
                         long long fallback);

}  // namespace smat
