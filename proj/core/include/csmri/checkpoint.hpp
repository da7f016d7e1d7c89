#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csmri/optim.hpp"

namespace csmri {

// Directory layout:
//   manifest.json            kind, element type, architecture, tensor index,
//                            rng states, extra trainer state
//   params/<name>.bin        raw little-endian values, row-major
//   params/<name>.m.bin/.v.bin  Adam moments (trainable tensors)
//   buffers/<name>.bin       non-trainable state (batch-norm running stats)
struct CheckpointManifest {
  std::string kind;          // recon | refine | joint | segment | extractor | state
  std::string element_type;  // float32 | float64
  nlohmann::ordered_json architecture = nlohmann::ordered_json::object();
  std::map<std::string, std::string> rng_states;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
  std::string params_hash;  // content id over parameter values
};

template <typename T>
using NamedBuffers = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, CheckpointManifest manifest,
                     const ParamRefs<T>& params, const NamedBuffers<T>& buffers = {});

CheckpointManifest load_manifest(const std::filesystem::path& dir);

// Fills existing parameters/buffers by name; shapes must match the manifest
// and every file must hold exactly the advertised bytes.
template <typename T>
void load_checkpoint_values(const std::filesystem::path& dir, const ParamRefs<T>& params,
                            const NamedBuffers<T>& buffers = {});

template <typename T>
constexpr const char* element_type_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

extern template void save_checkpoint<float>(const std::filesystem::path&, CheckpointManifest,
                                            const ParamRefs<float>&, const NamedBuffers<float>&);
extern template void save_checkpoint<double>(const std::filesystem::path&, CheckpointManifest,
                                             const ParamRefs<double>&,
                                             const NamedBuffers<double>&);
extern template void load_checkpoint_values<float>(const std::filesystem::path&,
                                                   const ParamRefs<float>&,
                                                   const NamedBuffers<float>&);
extern template void load_checkpoint_values<double>(const std::filesystem::path&,
                                                    const ParamRefs<double>&,
                                                    const NamedBuffers<double>&);

}  // namespace csmri
