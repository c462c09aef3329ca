#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "agrigen/tensor.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Lossless 8-bit RGB storage as binary PPM (P6). The header comment carries
// the producing config hash and tool version.
// ----------------------------------------------------------------------------

inline void write_ppm(const std::filesystem::path& path, const Tensor& image,
                      const std::string& config_hash = "none") {
    if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects 3 x H x W");
    const int H = image.dim(1), W = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image for writing: " + path.string());
    f << "P6\n# agrigen config=" << config_hash << " version=" << kToolVersion << "\n"
      << W << " " << H << "\n255\n";
    std::string row(static_cast<size_t>(W) * 3, '\0');
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = image.at3(c, y, x);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] =
                    static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
        f.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IoError("image write failed: " + path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image: " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("not a binary PPM: " + path.string());
    auto next_token = [&f, &path]() {
        std::string tok;
        while (f >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return tok;
        }
        throw IoError("truncated PPM header: " + path.string());
    };
    const int W = std::stoi(next_token());
    const int H = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 255) throw IoError("unsupported PPM maxval in " + path.string());
    f.get();  // single whitespace after maxval
    Tensor img({3, H, W});
    std::string row(static_cast<size_t>(W) * 3, '\0');
    for (int y = 0; y < H; ++y) {
        f.read(row.data(), static_cast<std::streamsize>(row.size()));
        if (!f) throw IoError("truncated PPM data: " + path.string());
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                img.at3(c, y, x) =
                    static_cast<double>(static_cast<unsigned char>(row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)])) /
                    255.0;
    }
    return img;
}

} // namespace agrigen
