#include "hoplab/common.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace hoplab {

static void write_then_rename(const std::string& path, const char* data, size_t len) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp);
        f.write(data, static_cast<std::streamsize>(len));
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

void atomic_write_text(const std::string& path, const std::string& content) {
    write_then_rename(path, content.data(), content.size());
}

void atomic_write_bytes(const std::string& path, const std::vector<char>& bytes) {
    write_then_rename(path, bytes.data(), bytes.size());
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("file not found: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace hoplab
