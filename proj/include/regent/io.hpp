#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "regent/error.hpp"

namespace regent {

// Little-endian byte writer/reader shared by every binary container
// (.demoset, .ctxset, checkpoints). Reals are stored as raw IEEE-754
// binary64 bit patterns so round-trips are exact, NaNs included.

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }

    void f64_span(const std::vector<double>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (double x : v) f64(x);
    }

    void raw(const ByteWriter& w) { buf_.insert(buf_.end(), w.buf_.begin(), w.buf_.end()); }

    // Length-prefixed section: u64 byte count, then the payload.
    void section(const ByteWriter& w) {
        u64(w.buf_.size());
        raw(w);
    }

    const std::vector<std::uint8_t>& bytes() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<std::uint8_t>& b) : ByteReader(b.data(), b.size()) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::vector<double> f64_span() {
        const std::uint32_t n = u32();
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }

    // Enter a length-prefixed section; returns a reader confined to it.
    ByteReader section() {
        const std::uint64_t n = u64();
        need(n);
        ByteReader r(data_ + pos_, static_cast<std::size_t>(n));
        pos_ += static_cast<std::size_t>(n);
        return r;
    }

    bool exhausted() const { return pos_ == size_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    void need(std::size_t n) const {
        if (size_ - pos_ < n) throw FormatError("truncated payload");
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline void expect_magic(ByteReader& r, const char (&magic)[9], const char* what) {
    for (int i = 0; i < 8; ++i) {
        if (r.u8() != static_cast<std::uint8_t>(magic[i]))
            throw FormatError(std::string("bad magic bytes: not a ") + what + " payload");
    }
}

inline void write_magic(ByteWriter& w, const char (&magic)[9]) {
    for (int i = 0; i < 8; ++i) w.u8(static_cast<std::uint8_t>(magic[i]));
}

inline void expect_version(ByteReader& r, std::uint32_t expected, const char* what) {
    const std::uint32_t got = r.u32();
    if (got != expected) {
        throw FormatError(std::string(what) + " version mismatch: file has version " +
                          std::to_string(got) + ", this build reads version " +
                          std::to_string(expected));
    }
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file for reading: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return buf;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

// FNV-1a 64-bit, used for manifest hashes and config fingerprints.
inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& b) { return fnv1a(b.data(), b.size()); }

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace regent
