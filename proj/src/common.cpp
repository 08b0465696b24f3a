#include "hashmoe/common.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace hashmoe {

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

uint64_t from_hex(const std::string& s) {
    uint64_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= uint64_t(c - '0');
        else if (c >= 'a' && c <= 'f') v |= uint64_t(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') v |= uint64_t(c - 'A' + 10);
        else throw std::invalid_argument("bad hex digit in '" + s + "'");
    }
    return v;
}

int max_threads() {
    static int cached = [] {
        if (const char* env = std::getenv("HASHMOE_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return static_cast<int>(hw == 0 ? 1 : (hw > 8 ? 8 : hw));
    }();
    return cached;
}

void init_threads() {
    Eigen::setNbThreads(max_threads());
    omp_set_num_threads(max_threads());
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
}

}  // namespace hashmoe
