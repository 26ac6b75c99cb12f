#include "attnlr/matx.hpp"

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"

namespace attnlr::io {

std::vector<char> encode_matx(const Matrix& m) {
  LeWriter w;
  w.bytes("MATX");
  w.u32(kMatxVersion);
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  w.buffer().reserve(w.buffer().size() + static_cast<std::size_t>(m.size()) * 8);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
  }
  return std::move(w.buffer());
}

Matrix decode_matx(std::vector<char> bytes, const std::string& source) {
  LeReader r(std::move(bytes), source);
  r.expect_magic("MATX");
  const auto version = r.u32();
  if (version != kMatxVersion) fail(ErrorCategory::Format, "unsupported MATX version");
  const auto rows = r.u64();
  const auto cols = r.u64();
  if (cols != 0 && rows > r.remaining() / 8 / cols) fail(ErrorCategory::Format, "MATX payload truncated");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  }
  if (r.remaining() != 0) fail(ErrorCategory::Format, "trailing bytes after MATX payload");
  return m;
}

void save_matx(const std::filesystem::path& path, const Matrix& m) {
  write_file_atomic(path, encode_matx(m));
}

Matrix load_matx(const std::filesystem::path& path) {
  return decode_matx(read_file(path), path.string());
}

SymMatrix load_sym_matx(const std::filesystem::path& path) {
  return SymMatrix::from_dense(load_matx(path));
}

}  // namespace attnlr::io
