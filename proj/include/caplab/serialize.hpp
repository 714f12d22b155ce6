#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "caplab/tensor.hpp"

namespace caplab {

// Versioned little-endian binary records. Doubles are written as raw IEEE-754
// bits, so save/load round-trips are bit-exact.
enum class FileKind : std::uint32_t {
    Backbone = 1,
    Prompt = 2,
    Head = 3,
    FeatureStore = 4,
    Stream = 5,
};

inline constexpr std::uint32_t kFormatVersion = 1;

class BinWriter {
public:
    explicit BinWriter(const std::string& path);
    void put_u32(std::uint32_t v);
    void put_u64(std::uint64_t v);
    void put_i64(std::int64_t v);
    void put_f64(double v);
    void put_string(const std::string& s);
    void put_tensor(const Tensor& t);
    void header(FileKind kind);
    void finish(); // flush + error check; throws IoError on failure

private:
    std::ofstream out_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path);
    std::uint32_t get_u32();
    std::uint64_t get_u64();
    std::int64_t get_i64();
    double get_f64();
    std::string get_string();
    Tensor get_tensor();
    void expect_header(FileKind kind);

private:
    void fill(void* dst, std::size_t n);
    std::ifstream in_;
    std::string path_;
};

} // namespace caplab
