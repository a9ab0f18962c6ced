#include "usersod/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include <openssl/evp.h>

namespace usersod {
namespace {

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct ReadCursor {
    const std::vector<uint8_t>* bytes;
    size_t offset;
};

void png_read_from_vector(png_structp png, png_bytep out, png_size_t length) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->offset + length > cur->bytes->size()) png_error(png, "truncated PNG stream");
    std::memcpy(out, cur->bytes->data() + cur->offset, length);
    cur->offset += length;
}

void png_warn(png_structp, png_const_charp) {}

std::vector<uint8_t> encode_raw(int width, int height, int color_type, int channels, const std::vector<uint8_t>& pixels) {
    std::vector<uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
    if (!png) throw IoError("png: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: encode failed");
    }
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;
};

RawImage decode_raw(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("png: bad signature");
    RawImage raw;
    ReadCursor cursor{&bytes, 0};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
    if (!png) throw IoError("png: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png: decode failed");
    }
    png_set_read_fn(png, &cursor, png_read_from_vector);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_strip_alpha(png);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    raw.channels = png_get_channels(png, info);
    raw.pixels.resize(static_cast<size_t>(raw.width) * raw.height * raw.channels);
    for (int y = 0; y < raw.height; ++y) {
        png_read_row(png, raw.pixels.data() + static_cast<size_t>(y) * raw.width * raw.channels, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return raw;
}

uint8_t to_byte(float v) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(clamped * 255.0));
}

} // namespace

std::vector<uint8_t> encode_png(const ImageTensor& img) {
    std::vector<uint8_t> px(img.plane() * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) px[(static_cast<size_t>(y) * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
    return encode_raw(img.width, img.height, PNG_COLOR_TYPE_RGB, 3, px);
}

std::vector<uint8_t> encode_png(const BinaryMask& mask) {
    std::vector<uint8_t> px(mask.data.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = mask.data[i] ? 255 : 0;
    return encode_raw(mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, px);
}

ImageTensor decode_png_image(const std::vector<uint8_t>& bytes) {
    RawImage raw = decode_raw(bytes);
    ImageTensor img(raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src = raw.channels >= 3 ? c : 0;
                const uint8_t v = raw.pixels[(static_cast<size_t>(y) * raw.width + x) * raw.channels + src];
                img.at(c, y, x) = static_cast<float>(v) / 255.0f;
            }
    return img;
}

BinaryMask decode_png_mask(const std::vector<uint8_t>& bytes) {
    RawImage raw = decode_raw(bytes);
    BinaryMask mask(raw.height, raw.width);
    for (size_t i = 0; i < mask.data.size(); ++i) {
        const uint8_t v = raw.pixels[i * raw.channels];
        if (v != 0 && v != 255) throw InvariantError("mask PNG is not binary (found value " + std::to_string(v) + ")");
        mask.data[i] = v ? 1 : 0;
    }
    return mask;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) { write_file_bytes(path, encode_png(img)); }
void write_png(const std::filesystem::path& path, const BinaryMask& mask) { write_file_bytes(path, encode_png(mask)); }

ImageTensor read_png_image(const std::filesystem::path& path) {
    try {
        return decode_png_image(read_file_bytes(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

BinaryMask read_png_mask(const std::filesystem::path& path) {
    try {
        return decode_png_mask(read_file_bytes(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<size_t>(n));
    return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    if (clean.size() % 4 != 0) throw IoError("base64: length not a multiple of 4");
    std::vector<uint8_t> out(3 * clean.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
    if (n < 0) throw IoError("base64: invalid input");
    size_t pad = 0;
    if (!clean.empty() && clean.back() == '=') ++pad;
    if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
    out.resize(static_cast<size_t>(n) - pad);
    return out;
}

} // namespace usersod
