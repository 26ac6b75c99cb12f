#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace attnlr::io {

// Little-endian encoder into an in-memory buffer. All on-disk formats are
// assembled in memory first and then committed with write_file_atomic.
class LeWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  const std::vector<char>& buffer() const { return buf_; }
  std::vector<char>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::vector<char> buf_;
};

// Little-endian decoder over a byte buffer; throws Format errors on truncation.
class LeReader {
 public:
  explicit LeReader(std::vector<char> data, std::string source = {})
      : data_(std::move(data)), source_(std::move(source)) {}

  std::string bytes(std::size_t n);
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(take(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  std::uint64_t u64() { return take(8); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(take(4))); }
  double f64() { return std::bit_cast<double>(take(8)); }

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_magic(std::string_view magic);

 private:
  std::uint64_t take(int n);
  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string source_;
};

std::vector<char> read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target, so a crash never
// leaves a partial file under the final name.
void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// 64-bit FNV-1a, used for manifest content hashes.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);
std::string file_hash(const std::filesystem::path& path);

}  // namespace attnlr::io
