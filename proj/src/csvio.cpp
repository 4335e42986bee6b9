#include "obf/csvio.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "obf/errors.hpp"
#include "obf/kv.hpp"

namespace obf {

int CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first) {
            for (auto& c : split(line, ',')) t.header.push_back(trim(c));
            first = false;
            continue;
        }
        if (trim(line).empty()) continue;
        std::vector<std::string> cells;
        for (auto& c : split(line, ',')) cells.push_back(trim(c));
        t.rows.push_back(std::move(cells));
    }
    if (first) throw DataError("'" + path + "' is empty (no header)");
    return t;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

AtomicFileWriter::AtomicFileWriter(std::string path)
    : path_(std::move(path)), tmp_path_(path_ + ".tmp") {
    FILE* f = std::fopen(tmp_path_.c_str(), "wb");
    if (!f) throw DataError("cannot write '" + tmp_path_ + "'");
    file_ = f;
}

AtomicFileWriter::~AtomicFileWriter() {
    if (file_) std::fclose(static_cast<FILE*>(file_));
    if (!committed_) {
        std::error_code ec;
        std::filesystem::remove(tmp_path_, ec);
    }
}

void AtomicFileWriter::write(const std::string& chunk) {
    if (!file_) throw DataError("writer for '" + path_ + "' already committed");
    if (std::fwrite(chunk.data(), 1, chunk.size(), static_cast<FILE*>(file_)) != chunk.size())
        throw DataError("write failed for '" + tmp_path_ + "'");
}

void AtomicFileWriter::commit() {
    if (!file_) return;
    if (std::fclose(static_cast<FILE*>(file_)) != 0) {
        file_ = nullptr;
        throw DataError("close failed for '" + tmp_path_ + "'");
    }
    file_ = nullptr;
    std::error_code ec;
    std::filesystem::rename(tmp_path_, path_, ec);
    if (ec) throw DataError("rename failed for '" + path_ + "': " + ec.message());
    committed_ = true;
}

}  // namespace obf
