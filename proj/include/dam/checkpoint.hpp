#pragma once

// Checkpoint container:
//   "DAMCKPT1" | u32 version | u64 n + n bytes of key = value text | u64 tensor count |
//   per tensor: u32 name length, name, u8 dtype (1 = float32), u32 rank, u64 dims[rank],
//   little-endian payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dam/config.hpp"
#include "dam/tensor.hpp"

namespace dam {

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raw container contents: the text block plus named float tensors in file order.
struct CheckpointFile {
    KeyValueConfig config;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw CheckpointError("checkpoint has no tensor '" + name + "'");
    }
    bool has_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

namespace detail {

template <typename U>
void write_le(std::ostream& out, U value) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(U)];
        std::memcpy(b, &value, sizeof(U));
        std::reverse(b, b + sizeof(U));
        out.write(reinterpret_cast<const char*>(b), sizeof(U));
    } else {
        out.write(reinterpret_cast<const char*>(&value), sizeof(U));
    }
}

template <typename U>
U read_le(std::istream& in) {
    unsigned char b[sizeof(U)];
    in.read(reinterpret_cast<char*>(b), sizeof(U));
    if (!in) throw CheckpointError("truncated checkpoint");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
}

}  // namespace detail

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string text = file.config.to_text();
    detail::write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::write_le<std::uint64_t>(out, file.tensors.size());
    for (const auto& [name, t] : file.tensors) {
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint8_t>(out, kDtypeFloat32);
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(out, d);
        if constexpr (std::endian::native == std::endian::little) {
            out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        } else {
            for (float v : t.data()) detail::write_le(out, v);
        }
    }
    if (!out) throw CheckpointError("failed while writing checkpoint " + path.string());
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw CheckpointError(path.string() + " is not a DAM checkpoint");
    const auto version = detail::read_le<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    CheckpointFile file;
    const auto text_len = detail::read_le<std::uint64_t>(in);
    std::string text(text_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(text_len));
    if (!in) throw CheckpointError("truncated checkpoint config block");
    file.config = KeyValueConfig::parse(text);
    const auto count = detail::read_le<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (detail::read_le<std::uint8_t>(in) != kDtypeFloat32)
            throw CheckpointError("tensor '" + name + "' has an unsupported dtype");
        const auto rank = detail::read_le<std::uint32_t>(in);
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_le<std::uint64_t>(in);
        Tensor<float> t(shape);
        if constexpr (std::endian::native == std::endian::little) {
            in.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(float)));
            if (!in) throw CheckpointError("truncated payload for tensor '" + name + "'");
        } else {
            for (auto& v : t.data()) v = detail::read_le<float>(in);
        }
        file.tensors.emplace_back(std::move(name), std::move(t));
    }
    return file;
}

}  // namespace dam
