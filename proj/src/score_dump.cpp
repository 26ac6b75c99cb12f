#include "attnlr/score_dump.hpp"

#include <bit>
#include <cmath>
#include <unistd.h>

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"

namespace attnlr {

namespace {

std::uint64_t read_le(std::ifstream& in, int n, const std::filesystem::path& path) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), n)) fail(ErrorCategory::Format, "truncated ATNS file " + path.string());
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

AtnsWriter::AtnsWriter(std::filesystem::path path, AtnsHeader header)
    : path_(std::move(path)), header_(header) {
  if (header_.n == 0) fail(ErrorCategory::Domain, "ATNS: n must be positive");
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  tmp_ = path_;
  tmp_ += ".tmp." + std::to_string(::getpid());
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) fail(ErrorCategory::Io, "cannot create " + tmp_.string());
  io::LeWriter w;
  w.bytes("ATNS");
  w.u32(kAtnsVersion);
  w.u32(header_.layers);
  w.u32(header_.heads);
  w.u32(header_.n);
  w.u64(header_.count);
  out_.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
}

AtnsWriter::~AtnsWriter() {
  if (!closed_) {
    out_.close();
    std::error_code ec;
    std::filesystem::remove(tmp_, ec);
  }
}

void AtnsWriter::accept(const ScoreSample& sample) {
  if (written_ >= header_.count) fail(ErrorCategory::Domain, "ATNS: more samples than declared");
  const std::uint64_t per_example = std::uint64_t{header_.layers} * header_.heads;
  const std::uint64_t ex = written_ / per_example;
  const std::uint64_t rem = written_ % per_example;
  if (sample.example != ex || sample.layer != rem / header_.heads || sample.head != rem % header_.heads) {
    fail(ErrorCategory::Domain, "ATNS: samples must arrive in (example, layer, head) order");
  }
  if (sample.n != header_.n || sample.scores.size() != std::size_t{header_.n} * header_.n) {
    fail(ErrorCategory::DimMismatch, "ATNS: sample dimension differs from header");
  }
  io::LeWriter w;
  w.buffer().reserve(sample.scores.size() * 4);
  for (float v : sample.scores) {
    if (!std::isfinite(v)) fail(ErrorCategory::InvalidInput, "ATNS: non-finite score");
    w.f32(v);
  }
  out_.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  ++written_;
}

void AtnsWriter::close() {
  if (closed_) return;
  if (written_ != header_.count) fail(ErrorCategory::Domain, "ATNS: fewer samples than declared");
  out_.flush();
  if (!out_) fail(ErrorCategory::Io, "write failed for " + tmp_.string());
  out_.close();
  std::error_code ec;
  std::filesystem::rename(tmp_, path_, ec);
  if (ec) fail(ErrorCategory::Io, "rename failed for " + path_.string());
  closed_ = true;
}

AtnsReader::AtnsReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) fail(ErrorCategory::Io, "cannot open " + path.string());
  char magic[4];
  if (!in_.read(magic, 4) || std::string_view(magic, 4) != "ATNS") {
    fail(ErrorCategory::Format, "bad magic: expected ATNS in " + path.string());
  }
  if (read_le(in_, 4, path) != kAtnsVersion) fail(ErrorCategory::Format, "unsupported ATNS version");
  header_.layers = static_cast<std::uint32_t>(read_le(in_, 4, path));
  header_.heads = static_cast<std::uint32_t>(read_le(in_, 4, path));
  header_.n = static_cast<std::uint32_t>(read_le(in_, 4, path));
  header_.count = read_le(in_, 8, path);
  const auto size = std::filesystem::file_size(path);
  const std::uint64_t expected = kAtnsHeaderBytes + header_.count * header_.n * header_.n * 4;
  if (size != expected) fail(ErrorCategory::Format, "ATNS payload size does not match header in " + path.string());
  if (header_.layers == 0 || header_.heads == 0 || header_.count % (std::uint64_t{header_.layers} * header_.heads) != 0) {
    fail(ErrorCategory::Format, "ATNS sample count is not a whole number of examples");
  }
}

std::optional<ScoreSample> AtnsReader::next() {
  if (read_ >= header_.count) return std::nullopt;
  const std::uint64_t per_example = std::uint64_t{header_.layers} * header_.heads;
  ScoreSample s;
  s.example = read_ / per_example;
  s.layer = static_cast<std::uint32_t>((read_ % per_example) / header_.heads);
  s.head = static_cast<std::uint32_t>(read_ % header_.heads);
  s.n = header_.n;
  const std::size_t count = std::size_t{header_.n} * header_.n;
  std::vector<char> raw(count * 4);
  if (!in_.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
    fail(ErrorCategory::Format, "truncated ATNS file " + path_.string());
  }
  s.scores.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + b])) << (8 * b);
    s.scores[i] = std::bit_cast<float>(v);
  }
  ++read_;
  return s;
}

void replay(const std::filesystem::path& path, ScoreSink& sink) {
  AtnsReader reader(path);
  while (auto s = reader.next()) sink.accept(*s);
}

}  // namespace attnlr
