// Line-oriented `key = value` files, used for dataset manifests and configs.
// Repeated keys are allowed (file rosters); '#' starts a comment line.

#pragma once

#include <string>
#include <utility>
#include <vector>

namespace obf {

struct KvFile {
    std::vector<std::pair<std::string, std::string>> entries;

    bool has(const std::string& key) const;
    /// First value for key; throws DataError if absent.
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    std::vector<std::string> get_all(const std::string& key) const;

    double get_double(const std::string& key) const;
    long get_long(const std::string& key) const;
};

KvFile read_kv_file(const std::string& path);
KvFile parse_kv_text(const std::string& text, const std::string& origin);
void write_kv_file(const std::string& path, const KvFile& kv);

std::string trim(const std::string& s);
std::vector<std::string> split(const std::string& s, char sep);

/// Typed scalar parses that throw DataError naming the key on failure.
double parse_double_field(const std::string& key, const std::string& value);
long parse_long_field(const std::string& key, const std::string& value);
bool parse_bool_field(const std::string& key, const std::string& value);

}  // namespace obf
