// Copyright Contributors to the lito project
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary readers/writers shared by every on-disk format.
#pragma once

#include "lito/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace lito {

static_assert(std::endian::native == std::endian::little, "lito file formats assume a little-endian host");

class FormatError : public Error {
public:
    enum class Reason { bad_magic, bad_version, truncated, malformed };

    FormatError(Reason reason, const std::string& what) : Error(ErrorKind::format, what), reason_(reason) {}
    Reason reason() const noexcept { return reason_; }

private:
    Reason reason_;
};

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw io_error("cannot open " + path + " for writing");
    }

    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void f32s(const std::vector<float>& v) { bytes(v.data(), v.size() * sizeof(float)); }
    void string(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw io_error("write failed on " + path_);
    }

    void close() {
        out_.close();
        if (!out_) throw io_error("closing " + path_ + " failed");
    }

private:
    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw io_error("cannot open " + path);
    }

    void expect_magic(std::string_view m) {
        std::string got(m.size(), '\0');
        bytes(got.data(), got.size());
        if (got != m) {
            throw FormatError(FormatError::Reason::bad_magic,
                              path_ + ": bad magic, expected \"" + std::string(m) + "\"");
        }
    }
    void expect_version(std::uint32_t expected) {
        const std::uint32_t v = u32();
        if (v != expected) {
            throw FormatError(FormatError::Reason::bad_version,
                              path_ + ": unsupported version " + std::to_string(v));
        }
    }

    std::uint32_t u32() { return value<std::uint32_t>(); }
    std::uint64_t u64() { return value<std::uint64_t>(); }
    float f32() { return value<float>(); }
    double f64() { return value<double>(); }
    std::vector<float> f32s(std::size_t n) {
        std::vector<float> v(n);
        bytes(v.data(), n * sizeof(float));
        return v;
    }
    std::string string(std::size_t max_len = 1u << 24) {
        const std::uint32_t n = u32();
        if (n > max_len) throw FormatError(FormatError::Reason::malformed, path_ + ": string length out of range");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError(FormatError::Reason::truncated, path_ + ": truncated file");
        }
    }

    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
    const std::string& path() const { return path_; }

private:
    template <class T>
    T value() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }

    std::string path_;
    std::ifstream in_;
};

} // namespace lito
