#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwa/parameter.hpp"

namespace mwa {

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() { return 0; }
template <>
constexpr std::uint8_t dtype_code<double>() { return 1; }

inline void ck_put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void ck_put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class CkReader {
public:
    CkReader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

    const char* take(size_t n, const char* what) {
        if (pos_ + n > buf_.size())
            throw std::runtime_error(path_ + ": truncated while reading " + std::string(what) +
                                     " at byte " + std::to_string(pos_));
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::uint16_t u16(const char* what) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(2, what));
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }

    std::uint32_t u32(const char* what) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4, what));
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }

    std::uint8_t u8(const char* what) {
        return static_cast<std::uint8_t>(*reinterpret_cast<const unsigned char*>(take(1, what)));
    }

    bool at_end() const { return pos_ == buf_.size(); }
    size_t offset() const { return pos_; }
    const std::string& path() const { return path_; }

private:
    std::vector<char> buf_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

/// Write every parameter (values, shape, frozen flag) to a binary checkpoint.
/// Little-endian payload; the layout round-trips bitwise.
template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path) {
    std::string out;
    out.append("MWCK", 4);
    detail::ck_put_u32(out, kCheckpointVersion);
    detail::ck_put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const Parameter<T>& p = store.at(i);
        if (p.name.size() > 0xFFFF)
            throw std::runtime_error("parameter name too long for checkpoint: " + p.name);
        detail::ck_put_u16(out, static_cast<std::uint16_t>(p.name.size()));
        out += p.name;
        out.push_back(static_cast<char>(p.frozen ? 1 : 0));
        out.push_back(static_cast<char>(detail::dtype_code<T>()));
        out.push_back(static_cast<char>(p.tensor.ndim()));
        for (int dd = 0; dd < p.tensor.ndim(); ++dd)
            detail::ck_put_u32(out, static_cast<std::uint32_t>(p.tensor.dim(dd)));
        const size_t bytes = sizeof(T) * static_cast<size_t>(p.tensor.numel());
        const size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, p.tensor.data(), bytes);  // little-endian host layout
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) throw std::runtime_error("write to " + path + " failed");
}

/// Restore parameter values and frozen flags in place. The checkpoint must
/// describe exactly the parameters of the given store (same names, shapes,
/// and precision).
template <typename T>
void load_checkpoint(ParameterStore<T>& store, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for reading");
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::CkReader r(std::move(buf), path);

    if (std::memcmp(r.take(4, "magic"), "MWCK", 4) != 0)
        throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": checkpoint version " + std::to_string(version) +
                                 " is not supported (this reader handles version " +
                                 std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t count = r.u32("tensor count");
    if (count != store.size())
        throw std::runtime_error(path + ": checkpoint holds " + std::to_string(count) +
                                 " tensors but the model has " + std::to_string(store.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        std::string name(r.take(name_len, "name"), name_len);
        const std::uint8_t frozen = r.u8("frozen flag");
        const std::uint8_t dtype = r.u8("dtype");
        if (dtype != detail::dtype_code<T>())
            throw std::runtime_error(path + ": tensor '" + name + "' has dtype code " +
                                     std::to_string(dtype) + " but the model expects " +
                                     std::to_string(detail::dtype_code<T>()));
        const std::uint8_t ndim = r.u8("rank");
        Shape shape(ndim);
        for (std::uint8_t dd = 0; dd < ndim; ++dd)
            shape[dd] = static_cast<int>(r.u32("dimension"));
        Parameter<T>* p = store.find(name);
        if (p == nullptr)
            throw std::runtime_error(path + ": tensor '" + name + "' does not exist in the model");
        if (p->tensor.shape() != shape)
            throw std::runtime_error(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                                     " but the model expects " + shape_str(p->tensor.shape()));
        const size_t bytes = sizeof(T) * static_cast<size_t>(p->tensor.numel());
        std::memcpy(p->tensor.data(), r.take(bytes, "tensor payload"), bytes);
        p->set_frozen(frozen != 0);
    }
    if (!r.at_end())
        throw std::runtime_error(path + ": trailing data at byte " + std::to_string(r.offset()));
}

}  // namespace mwa
