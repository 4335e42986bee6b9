#include "obf/kv.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "obf/csvio.hpp"
#include "obf/errors.hpp"

namespace obf {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

bool KvFile::has(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return true;
    return false;
}

const std::string& KvFile::get(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    throw DataError("missing key '" + key + "'");
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    return fallback;
}

std::vector<std::string> KvFile::get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries)
        if (k == key) out.push_back(v);
    return out;
}

double KvFile::get_double(const std::string& key) const { return parse_double_field(key, get(key)); }
long KvFile::get_long(const std::string& key) const { return parse_long_field(key, get(key)); }

double parse_double_field(const std::string& key, const std::string& value) {
    const char* begin = value.c_str();
    char* end = nullptr;
    errno = 0;
    double v = std::strtod(begin, &end);
    if (end == begin || trim(end).size() != 0 || errno == ERANGE)
        throw DataError("key '" + key + "': expected a number, got '" + value + "'");
    return v;
}

long parse_long_field(const std::string& key, const std::string& value) {
    const char* begin = value.c_str();
    char* end = nullptr;
    errno = 0;
    long v = std::strtol(begin, &end, 10);
    if (end == begin || trim(end).size() != 0 || errno == ERANGE)
        throw DataError("key '" + key + "': expected an integer, got '" + value + "'");
    return v;
}

bool parse_bool_field(const std::string& key, const std::string& value) {
    std::string v = trim(value);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw DataError("key '" + key + "': expected true/false, got '" + value + "'");
}

KvFile parse_kv_text(const std::string& text, const std::string& origin) {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw DataError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw DataError(origin + ":" + std::to_string(lineno) + ": empty key");
        kv.entries.emplace_back(std::move(key), std::move(value));
    }
    return kv;
}

KvFile read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_kv_text(ss.str(), path);
}

void write_kv_file(const std::string& path, const KvFile& kv) {
    AtomicFileWriter w(path);
    for (const auto& [k, v] : kv.entries) w.write(k + " = " + v + "\n");
    w.commit();
}

}  // namespace obf
