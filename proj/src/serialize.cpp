#include "caplab/serialize.hpp"

#include <bit>
#include <cstring>

#include "caplab/errors.hpp"

namespace caplab {

namespace {
constexpr std::uint32_t kMagic = 0x43504C42; // "CPLB"

void put_le64(std::ofstream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_le64(std::ifstream& in, const std::string& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw IoError("truncated read in " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
} // namespace

BinWriter::BinWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("cannot open for writing: " + path);
}

void BinWriter::put_u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out_.write(reinterpret_cast<const char*>(b), 4);
}

void BinWriter::put_u64(std::uint64_t v) { put_le64(out_, v); }
void BinWriter::put_i64(std::int64_t v) { put_le64(out_, static_cast<std::uint64_t>(v)); }

void BinWriter::put_f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le64(out_, bits);
}

void BinWriter::put_string(const std::string& s) {
    put_u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinWriter::put_tensor(const Tensor& t) {
    put_u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(d);
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(t[i]);
}

void BinWriter::header(FileKind kind) {
    put_u32(kMagic);
    put_u32(kFormatVersion);
    put_u32(static_cast<std::uint32_t>(kind));
}

void BinWriter::finish() {
    out_.flush();
    if (!out_) throw IoError("write failure on " + path_);
}

BinReader::BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open for reading: " + path);
}

void BinReader::fill(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated read in " + path_);
}

std::uint32_t BinReader::get_u32() {
    unsigned char b[4];
    fill(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t BinReader::get_u64() { return read_le64(in_, path_); }
std::int64_t BinReader::get_i64() { return static_cast<std::int64_t>(read_le64(in_, path_)); }

double BinReader::get_f64() {
    const std::uint64_t bits = read_le64(in_, path_);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string BinReader::get_string() {
    const std::uint64_t n = get_u64();
    std::string s(n, '\0');
    if (n) fill(s.data(), n);
    return s;
}

Tensor BinReader::get_tensor() {
    const std::uint32_t rank = get_u32();
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::size_t>(get_u64());
        total *= shape[i];
    }
    std::vector<double> data(total);
    for (std::size_t i = 0; i < total; ++i) data[i] = get_f64();
    return Tensor(std::move(shape), std::move(data));
}

void BinReader::expect_header(FileKind kind) {
    if (get_u32() != kMagic) throw IoError("bad magic in " + path_);
    const std::uint32_t version = get_u32();
    if (version != kFormatVersion)
        throw IoError("unsupported format version " + std::to_string(version) + " in " + path_);
    const std::uint32_t k = get_u32();
    if (k != static_cast<std::uint32_t>(kind))
        throw IoError("unexpected record kind " + std::to_string(k) + " in " + path_);
}

} // namespace caplab
