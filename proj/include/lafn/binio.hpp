#pragma once

// Little-endian byte helpers shared by the model and cache containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "lafn/error.hpp"

namespace lafn {

class ByteWriter {
public:
    void raw(std::string_view s) { buf_.append(s); }

    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }

    void f32(float f) { uint(std::bit_cast<std::uint32_t>(f)); }

    const std::string& bytes() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

// Bounds-checked reader; every overrun is a format error naming `what_`.
class ByteReader {
public:
    ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    std::string_view raw(std::size_t n, const char* field) {
        need(n, field);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <typename U>
    U uint(const char* field) {
        need(sizeof(U), field);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    float f32(const char* field) { return std::bit_cast<float>(uint<std::uint32_t>(field)); }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n, const char* field) const {
        if (n > data_.size() - pos_) {
            fail(ErrorKind::format, what_ + ": truncated while reading " + field + " at byte " + std::to_string(pos_) +
                                        " (need " + std::to_string(n) + ", have " + std::to_string(data_.size() - pos_) + ")");
        }
    }

    std::string_view data_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace lafn
