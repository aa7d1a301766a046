#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dam/tensor.hpp"

namespace dam {

namespace detail {

inline std::string pnm_token(std::istream& in) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

}  // namespace detail

/// Loads an 8-bit P5/P6 file into [H,W,C] floats scaled to [0,1].
inline Tensor<float> read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image " + path.string());
    const std::string magic = detail::pnm_token(in);
    std::size_t channels = 0;
    if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw std::runtime_error("unsupported image format in " + path.string() + " (need binary PGM/PPM)");
    const std::size_t width = std::stoul(detail::pnm_token(in));
    const std::size_t height = std::stoul(detail::pnm_token(in));
    const unsigned long maxval = std::stoul(detail::pnm_token(in));
    if (maxval == 0 || maxval > 255) throw std::runtime_error("only 8-bit images are supported: " + path.string());
    std::vector<unsigned char> bytes(width * height * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error("truncated image " + path.string());
    Tensor<float> out({height, width, channels});
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval);
    return out;
}

/// Writes an [H,W,1] or [H,W,3] image with values in [0,1] (clamped) as P5/P6.
inline void write_pnm(const std::filesystem::path& path, const Tensor<float>& image) {
    if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3))
        throw ShapeError("write_pnm expects [H,W,1] or [H,W,3], got " + to_string(image.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image " + path.string());
    out << (image.dim(2) == 1 ? "P5" : "P6") << '\n' << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float v = std::clamp(image[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace dam
