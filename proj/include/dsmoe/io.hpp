#pragma once

#include <cstdint>
#include <string>
#include <variant>

#include "dsmoe/moe.hpp"

namespace dsmoe {

// Container layout: 8-byte magic "DSMOE1\0\0", u64 LE manifest length, JSON
// manifest, zero padding, then raw little-endian tensor payloads, each
// 64-byte aligned, at the absolute offsets declared in the manifest.
inline constexpr unsigned char kContainerMagic[8] = {'D', 'S', 'M', 'O', 'E', '1', '\0', '\0'};
inline constexpr int kTensorAlignment = 64;

using ModelVariant = std::variant<MoeModel<float>, MoeModel<double>>;

template <std::floating_point T>
void save_model(const MoeModel<T>& model, const std::string& path);

// Loads at the precision recorded in the container; no silent conversion.
ModelVariant load_model(const std::string& path);

inline int variant_width(const ModelVariant& v) {
  return std::holds_alternative<MoeModel<float>>(v) ? 4 : 8;
}

// Token file: 16-byte header (rows, cols as u64 LE) followed by row-major
// float32 LE payload. Doubles widen exactly on load.
template <std::floating_point T>
void save_tokens(const Matrix<T>& tokens, const std::string& path);

template <std::floating_point T>
Matrix<T> load_tokens(const std::string& path);

// Seeded synthetic weights: xoshiro256++ seeded through SplitMix64, Gaussian
// via an Irwin-Hall sum of 12 uniforms, standard deviation scale/sqrt(d_model).
// Identical bits for identical seeds on any platform.
template <std::floating_point T>
MoeLayer<T> generate_synthetic(const MoeConfig& config, uint64_t seed, double scale);

// Layer l uses the l-th output of SplitMix64(seed) as its layer seed.
template <std::floating_point T>
MoeModel<T> generate_model(const MoeConfig& config, int num_layers, uint64_t seed, double scale);

template <std::floating_point T>
Matrix<T> generate_tokens(long rows, int cols, uint64_t seed, double scale = 1.0);

}  // namespace dsmoe
