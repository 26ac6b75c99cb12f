#pragma once

#include <filesystem>
#include <vector>

#include "attnlr/model.hpp"

namespace attnlr::io {

inline constexpr std::uint32_t kPrmsVersion = 1;

std::vector<char> encode_prms(const nn::ParamMap& tensors);
nn::ParamMap decode_prms(std::vector<char> bytes, const std::string& source = {});
void save_prms(const std::filesystem::path& path, const nn::ParamMap& tensors);
nn::ParamMap load_prms(const std::filesystem::path& path);

// A checkpoint is a PRMS file whose reserved "meta.config" tensor holds the
// model dimensions; all other tensors are parameters.
struct Checkpoint {
  nn::ModelConfig config;
  nn::ParamMap params;
};

void save_checkpoint(const std::filesystem::path& path, const nn::ModelConfig& config, const nn::ParamMap& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace attnlr::io
