#pragma once

// Little-endian encoding helpers shared by every on-disk format.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "millilabel/error.hpp"

namespace millilabel::io {

template <class T>
concept Scalar = std::is_arithmetic_v<T> && (sizeof(T) == 1 || sizeof(T) == 4 || sizeof(T) == 8);

template <Scalar T>
void put(std::vector<std::uint8_t>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
    U bits;
    std::memcpy(&bits, &value, sizeof(T));
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

template <Scalar T>
void put_array(std::vector<std::uint8_t>& out, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
        const auto* raw = reinterpret_cast<const std::uint8_t*>(values.data());
        out.insert(out.end(), raw, raw + values.size_bytes());
    } else {
        for (T v : values) put(out, v);
    }
}

inline void put_magic(std::vector<std::uint8_t>& out, std::string_view magic) {
    out.insert(out.end(), magic.begin(), magic.end());
}

// Bounds-checked cursor over a byte buffer; any overrun is MALFORMED_FILE.
class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::string source)
        : bytes_(bytes), source_(std::move(source)) {}

    void expect_magic(std::string_view magic) {
        need(magic.size());
        if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0)
            fail(ErrorCode::MalformedFile, source_ + ": bad magic, expected " + std::string(magic));
        pos_ += magic.size();
    }

    template <Scalar T>
    T get() {
        need(sizeof(T));
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(bytes_[pos_ + b]) << (8 * b);
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, &bits, sizeof(T));
        return value;
    }

    template <Scalar T>
    std::vector<T> get_array(std::uint64_t count) {
        if (count > (bytes_.size() - pos_) / sizeof(T))
            fail(ErrorCode::MalformedFile, source_ + ": truncated array");
        std::vector<T> values(static_cast<std::size_t>(count));
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(values.data(), bytes_.data() + pos_, values.size() * sizeof(T));
            pos_ += values.size() * sizeof(T);
        } else {
            for (auto& v : values) v = get<T>();
        }
        return values;
    }

    void expect_end() const {
        if (pos_ != bytes_.size()) fail(ErrorCode::MalformedFile, source_ + ": trailing bytes");
    }

    const std::string& source() const { return source_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) fail(ErrorCode::MalformedFile, source_ + ": truncated");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string source_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
        fail(ErrorCode::IoFailure, "cannot read " + path.string());
    return bytes;
}

// Writes to a sibling temp file and renames over the target so readers never
// observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::IoFailure, "cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) fail(ErrorCode::IoFailure, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorCode::IoFailure, "rename to " + path.string() + " failed: " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace millilabel::io
