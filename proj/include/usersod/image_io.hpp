#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "usersod/core.hpp"

namespace usersod {

std::vector<uint8_t> encode_png(const ImageTensor& img);
/// 8-bit grayscale, foreground stored as 255.
std::vector<uint8_t> encode_png(const BinaryMask& mask);

ImageTensor decode_png_image(const std::vector<uint8_t>& bytes);
/// Accepts only {0,255} gray PNGs; anything else throws InvariantError.
BinaryMask decode_png_mask(const std::vector<uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const ImageTensor& img);
void write_png(const std::filesystem::path& path, const BinaryMask& mask);
ImageTensor read_png_image(const std::filesystem::path& path);
BinaryMask read_png_mask(const std::filesystem::path& path);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(std::string_view text);

} // namespace usersod
