#pragma once

#include <optional>
#include <string>
#include <vector>

namespace obf {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const;  // -1 if absent
};

CsvTable read_csv(const std::string& path);

std::string format_double(double v);  // %.12g, locale-independent

/// Writes to `path + ".tmp"` then renames, so failures never leave a
/// partial artifact at the destination.
class AtomicFileWriter {
public:
    explicit AtomicFileWriter(std::string path);
    ~AtomicFileWriter();

    void write(const std::string& chunk);
    void commit();

private:
    std::string path_;
    std::string tmp_path_;
    void* file_ = nullptr;  // FILE*
    bool committed_ = false;
};

}  // namespace obf
