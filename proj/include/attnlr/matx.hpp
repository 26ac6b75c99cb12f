#pragma once

#include <filesystem>
#include <vector>

#include "attnlr/numerics.hpp"

namespace attnlr::io {

// "MATX" matrix dump: magic, u32 version, u64 rows, u64 cols, then
// row-major IEEE-754 binary64, all little-endian.
inline constexpr std::uint32_t kMatxVersion = 1;

std::vector<char> encode_matx(const Matrix& m);
Matrix decode_matx(std::vector<char> bytes, const std::string& source = {});

void save_matx(const std::filesystem::path& path, const Matrix& m);
Matrix load_matx(const std::filesystem::path& path);
SymMatrix load_sym_matx(const std::filesystem::path& path);

}  // namespace attnlr::io
