#include "attnlr/binary_io.hpp"

#include <cstdio>
#include <sstream>
#include <unistd.h>

#include "attnlr/error.hpp"

namespace attnlr::io {

std::string LeReader::bytes(std::size_t n) {
  if (remaining() < n) {
    fail(ErrorCategory::Format, "truncated input" + (source_.empty() ? "" : " in " + source_));
  }
  std::string out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return out;
}

void LeReader::expect_magic(std::string_view magic) {
  const std::string got = bytes(magic.size());
  if (got != magic) {
    fail(ErrorCategory::Format, "bad magic: expected " + std::string(magic) +
                                    (source_.empty() ? "" : " in " + source_));
  }
}

std::uint64_t LeReader::take(int n) {
  if (remaining() < static_cast<std::size_t>(n)) {
    fail(ErrorCategory::Format, "truncated input" + (source_.empty() ? "" : " in " + source_));
  }
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  }
  pos_ += static_cast<std::size_t>(n);
  return v;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> data(size);
  if (size > 0 && !in.read(data.data(), static_cast<std::streamsize>(size))) {
    fail(ErrorCategory::Io, "read failed for " + path.string());
  }
  return data;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCategory::Io, "cannot create " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorCategory::Io, "write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCategory::Io, "rename failed for " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) {
  const auto data = read_file(path);
  return hex64(fnv1a64(std::string_view(data.data(), data.size())));
}

}  // namespace attnlr::io
