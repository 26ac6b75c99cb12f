#include "attnlr/checkpoint.hpp"

#include <limits>

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"

namespace attnlr::io {
namespace {

constexpr const char* kMeta = "meta.config";

nn::Tensor config_tensor(const nn::ModelConfig& c) {
  return nn::Tensor({9}, {double(c.layers), double(c.heads), double(c.hidden), double(c.head_dim), double(c.seq_len),
                          double(c.vocab), double(c.mlp_hidden), c.ln_eps, c.init_std});
}

nn::ModelConfig config_from(const nn::Tensor& t, const std::string& source) {
  if (t.numel() != 9) fail(ErrorCategory::Format, source + ": malformed meta.config");
  nn::ModelConfig c;
  auto dim = [&](std::size_t i) {
    const double v = t[i];
    if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v)))
      fail(ErrorCategory::Format, source + ": meta.config holds a non-integer dimension");
    return static_cast<std::size_t>(v);
  };
  c.layers = dim(0);
  c.heads = dim(1);
  c.hidden = dim(2);
  c.head_dim = dim(3);
  c.seq_len = dim(4);
  c.vocab = dim(5);
  c.mlp_hidden = dim(6);
  c.ln_eps = t[7];
  c.init_std = t[8];
  return c;
}

}  // namespace

std::vector<char> encode_prms(const nn::ParamMap& tensors) {
  LeWriter w;
  w.bytes("PRMS");
  w.u32(kPrmsVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max())
      fail(ErrorCategory::Format, "PRMS: tensor name length out of range");
    if (t.rank() == 0 || t.rank() > 255) fail(ErrorCategory::Format, "PRMS: tensor rank out of range for " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
  }
  return std::move(w.buffer());
}

nn::ParamMap decode_prms(std::vector<char> bytes, const std::string& source) {
  LeReader r(std::move(bytes), source);
  r.expect_magic("PRMS");
  const std::uint32_t version = r.u32();
  if (version != kPrmsVersion) fail(ErrorCategory::Format, source + ": unsupported PRMS version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  nn::ParamMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    std::string name = r.bytes(len);
    const std::uint8_t rank = r.u8();
    if (rank == 0) fail(ErrorCategory::Format, source + ": zero-rank tensor " + name);
    std::vector<std::size_t> shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0) fail(ErrorCategory::Format, source + ": zero dimension in " + name);
      numel *= d;
    }
    if (numel > r.remaining() / 8) fail(ErrorCategory::Format, source + ": truncated data for " + name);
    std::vector<double> data(numel);
    for (double& v : data) v = r.f64();
    if (out.count(name)) fail(ErrorCategory::Format, source + ": duplicate tensor " + name);
    out.emplace(std::move(name), nn::Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) fail(ErrorCategory::Format, source + ": trailing bytes after PRMS tensors");
  return out;
}

void save_prms(const std::filesystem::path& path, const nn::ParamMap& tensors) {
  write_file_atomic(path, encode_prms(tensors));
}

nn::ParamMap load_prms(const std::filesystem::path& path) { return decode_prms(read_file(path), path.string()); }

void save_checkpoint(const std::filesystem::path& path, const nn::ModelConfig& config, const nn::ParamMap& params) {
  if (params.count(kMeta)) fail(ErrorCategory::InvalidInput, "checkpoint: meta.config is a reserved name");
  nn::ParamMap all = params;
  all.emplace(kMeta, config_tensor(config));
  save_prms(path, all);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nn::ParamMap all = load_prms(path);
  auto it = all.find(kMeta);
  if (it == all.end()) fail(ErrorCategory::Format, path.string() + ": checkpoint has no meta.config");
  Checkpoint c{config_from(it->second, path.string()), {}};
  all.erase(it);
  c.params = std::move(all);
  c.config.validate();
  nn::check_params(c.config, c.params);
  return c;
}

}  // namespace attnlr::io
