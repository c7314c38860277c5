#ifndef CSTY_TENSOR_IO_HPP
#define CSTY_TENSOR_IO_HPP

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "csty/errors.hpp"
#include "csty/rng.hpp"
#include "csty/tensor.hpp"

namespace csty {

// Binary tensor container: magic "CSTY", u32 version, u32 rank, rank u64
// dims, then row-major float32 payload. All fields little-endian.
inline constexpr uint32_t kTensorFormatVersion = 1;
inline constexpr char kTensorMagic[4] = {'C', 'S', 'T', 'Y'};

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    std::string path;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw artifact_error(path + ": truncated " + what, pos);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
};

} // namespace detail

inline std::string encode_tensor(std::span<const uint64_t> dims, std::span<const float> payload) {
    std::string buf;
    buf.append(kTensorMagic, 4);
    detail::put_u32(buf, kTensorFormatVersion);
    detail::put_u32(buf, static_cast<uint32_t>(dims.size()));
    uint64_t count = 1;
    for (uint64_t d : dims) {
        detail::put_u64(buf, d);
        count *= d;
    }
    if (count != payload.size()) throw std::invalid_argument("encode_tensor: dims do not match payload size");
    static_assert(sizeof(float) == 4);
    const size_t off = buf.size();
    buf.resize(off + payload.size() * 4);
    std::memcpy(buf.data() + off, payload.data(), payload.size() * 4);
    return buf;
}

struct DecodedTensor {
    std::vector<uint64_t> dims;
    std::vector<float> payload;
};

inline DecodedTensor decode_tensor(const std::string& buf, const std::string& path) {
    detail::ByteReader r{buf, 0, path};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kTensorMagic, 4) != 0)
        throw artifact_error(path + ": bad magic", 0);
    r.pos = 4;
    const uint32_t version = r.u32("version");
    if (version != kTensorFormatVersion)
        throw artifact_error(path + ": unsupported version " + std::to_string(version), 4);
    const uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8)
        throw artifact_error(path + ": bad rank " + std::to_string(rank), 8);
    DecodedTensor t;
    uint64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const size_t at = r.pos;
        const uint64_t d = r.u64("dims");
        if (d == 0 || count > (1ull << 32) / std::max<uint64_t>(d, 1))
            throw artifact_error(path + ": bad dimension " + std::to_string(d), at);
        count *= d;
    }
    const size_t payload_at = r.pos;
    r.need(count * 4, "payload");
    if (buf.size() != payload_at + count * 4)
        throw artifact_error(path + ": trailing bytes after payload", payload_at + count * 4);
    // dims were validated in the first pass; re-read them for the result
    detail::ByteReader r2{buf, 12, path};
    for (uint32_t i = 0; i < rank; ++i) t.dims.push_back(r2.u64("dims"));
    t.payload.resize(count);
    std::memcpy(t.payload.data(), buf.data() + payload_at, count * 4);
    return t;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot open " + path.string(), 0);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& buf) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("short write to " + path.string());
}

inline void save_tensor(const std::filesystem::path& path, std::span<const uint64_t> dims,
                        std::span<const float> payload) {
    write_file(path, encode_tensor(dims, payload));
}

inline DecodedTensor load_tensor(const std::filesystem::path& path) {
    return decode_tensor(read_file(path), path.string());
}

inline void save_mat(const std::filesystem::path& path, const Mat& m) {
    const uint64_t dims[2] = {static_cast<uint64_t>(m.rows), static_cast<uint64_t>(m.cols)};
    save_tensor(path, dims, m.data);
}

inline Mat load_mat(const std::filesystem::path& path) {
    const DecodedTensor t = load_tensor(path);
    if (t.dims.size() != 2)
        throw artifact_error(path.string() + ": expected rank 2, got " + std::to_string(t.dims.size()), 8);
    Mat m(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
    m.data = t.payload;
    return m;
}

inline uint64_t file_digest(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    return fnv1a64_bytes(buf.data(), buf.size());
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
    return s;
}

// Grayscale binary PGM (P5, maxval 255). Values are min-max normalized per
// image so the extremes map to 0 and 255; a constant image maps to all zeros.
inline void write_pgm(const std::filesystem::path& path, const Mat& img) {
    float lo = img.data.empty() ? 0.0f : img.data[0];
    float hi = lo;
    for (float v : img.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float range = hi - lo;
    std::string buf = "P5\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n255\n";
    for (float v : img.data) {
        const float t = range > 0.0f ? (v - lo) / range : 0.0f;
        const int g = std::clamp(static_cast<int>(t * 255.0f + 0.5f), 0, 255);
        buf.push_back(static_cast<char>(g));
    }
    write_file(path, buf);
}

} // namespace csty

#endif // CSTY_TENSOR_IO_HPP
