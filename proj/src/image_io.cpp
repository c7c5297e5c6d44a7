#include "xtransct/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "xtransct/errors.hpp"

namespace xtransct {

void write_pgm16(const std::string& path, std::size_t width, std::size_t height,
                 const std::vector<double>& pixels01) {
    if (pixels01.size() != width * height)
        throw ContractError("write_pgm16: " + std::to_string(pixels01.size()) +
                            " pixels for " + std::to_string(width) + "x" +
                            std::to_string(height));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << width << " " << height << "\n65535\n";
    std::vector<unsigned char> row(width * 2);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double v = std::clamp(pixels01[y * width + x], 0.0, 1.0);
            const std::uint16_t q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            row[2 * x] = static_cast<unsigned char>(q >> 8);  // PGM is big-endian
            row[2 * x + 1] = static_cast<unsigned char>(q & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("short write to " + path);
}

namespace {

int pgm_token(std::istream& in) {
    // Skips whitespace and '#' comments, returns next integer.
    while (in) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = -1;
    in >> value;
    return value;
}

}  // namespace

std::vector<double> read_pgm(const std::string& path, std::size_t& width,
                             std::size_t& height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw IoError(path + ": not a binary PGM (magic '" + magic + "')");
    const int w = pgm_token(in);
    const int h = pgm_token(in);
    const int maxval = pgm_token(in);
    if (w <= 0 || h <= 0 || (maxval != 255 && maxval != 65535))
        throw IoError(path + ": unsupported PGM header (" + std::to_string(w) + "x" +
                      std::to_string(h) + ", maxval " + std::to_string(maxval) + ")");
    in.get();  // single whitespace after maxval
    width = static_cast<std::size_t>(w);
    height = static_cast<std::size_t>(h);
    const std::size_t n = width * height;
    std::vector<double> pixels(n);
    if (maxval == 255) {
        std::vector<unsigned char> raw(n);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
        if (!in) throw IoError(path + ": truncated pixel data");
        for (std::size_t i = 0; i < n; ++i) pixels[i] = raw[i] / 255.0;
    } else {
        std::vector<unsigned char> raw(n * 2);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
        if (!in) throw IoError(path + ": truncated pixel data");
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint16_t q =
                static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
            pixels[i] = q / 65535.0;
        }
    }
    return pixels;
}

namespace {

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void png_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<unsigned char> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    const std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, body.data(), static_cast<uInt>(body.size())));
    put_u32_be(out, crc);
}

}  // namespace

void write_png_gray8(const std::string& path, std::size_t width,
                     std::size_t height, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height)
        throw ContractError("write_png_gray8: " + std::to_string(pixels.size()) +
                            " pixels for " + std::to_string(width) + "x" +
                            std::to_string(height));

    // Raw scanlines with filter byte 0.
    std::vector<unsigned char> raw;
    raw.reserve((width + 1) * height);
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * width),
                   pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * width));
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(comp_len);
    if (compress2(compressed.data(), &comp_len, raw.data(),
                  static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: zlib compression failed for " + path);
    compressed.resize(comp_len);

    std::vector<unsigned char> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    png_chunk(file, "IHDR", ihdr);
    png_chunk(file, "IDAT", compressed);
    png_chunk(file, "IEND", {});

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(file.data()),
              static_cast<std::streamsize>(file.size()));
    if (!out) throw IoError("short write to " + path);
}

}  // namespace xtransct
