#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "phoenix/graph.hpp"
#include "phoenix/io.hpp"
#include "phoenix/tensor.hpp"

namespace phoenix {

struct DenoiserConfig {
    std::size_t image_channels = 1;
    std::size_t image_side = 8;
    std::size_t base_channels = 16;
    std::size_t depth = 2;
    std::size_t blocks_per_stage = 1;
    std::size_t time_embed_dim = 32;
    std::size_t norm_groups = 4;

    // Throws ArgumentError when the config cannot describe a U-Net.
    void validate() const;

    // 1x8x8, base 16, depth 2, one block per stage, 32-d time embedding.
    static DenoiserConfig desk();
    // 3x32x32 with four down/up stages.
    static DenoiserConfig paper();

    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct ModelParameter {
    std::string name;
    Tensor value;
    bool personal = false;
};

/// Noise-prediction U-Net.
///
/// Layout (channels c_s = base_channels * 2^s for stage s):
///   time:  sinusoidal(t) -> linear -> SiLU, shared by every block
///   in_conv 3x3: image_channels -> c_0
///   down{s}.block{b}: residual blocks at c_s, skip saved, then 2x average pool
///   mid.block0: residual block at c_{depth-1}
///   up{s}.block{b}: 2x upsample, concat skip s, residual blocks down to c_s
///   out_norm + SiLU + out_conv 3x3: c_0 -> image_channels
///
/// Residual block (cin -> cout): h = conv1(SiLU(norm1(x))) + time projection,
/// out = skip(x) + conv2(SiLU(norm2(h))), skip is identity when cin == cout
/// and a 1x1 convolution otherwise.
///
/// Parameter count, with E = time_embed_dim, C = image_channels, B = base:
///   E^2 + E + (9CB + B) + sum over blocks of
///     2cin + (9 cin cout + cout) + (E cout + cout) + 2cout + (9 cout^2 + cout)
///     + [cin != cout](cin cout + cout)
///   + 2B + (9BC + C).
/// The desk config has 83617 parameters.
///
/// The final residual block of the outermost decoder stage is the
/// personalization unit: its parameters are flagged personal, everything
/// else (including out_norm / out_conv) is base.
class DenoiserModel {
   public:
    DenoiserModel(DenoiserConfig config, std::vector<ModelParameter> params);

    const DenoiserConfig& config() const { return config_; }
    const std::vector<ModelParameter>& parameters() const { return params_; }

    TensorMap params() const;
    const Tensor& param(const std::string& name) const;
    // Overwrites the named parameters. Every name must exist with a matching shape.
    void set_params(const TensorMap& values);

    std::set<std::string> personal_names() const;
    std::set<std::string> base_names() const;
    std::size_t scalar_count() const;

    std::vector<CheckpointEntry> to_checkpoint() const;
    // Validates names, flags and shapes against the architecture implied by `config`.
    static DenoiserModel from_checkpoint(const DenoiserConfig& config, const std::vector<CheckpointEntry>& entries);

   private:
    DenoiserConfig config_;
    std::vector<ModelParameter> params_;
};

struct ParameterSpec {
    std::string name;
    Shape shape;
    std::size_t fan_in = 0;  // 0 for biases and normalization parameters
    bool personal = false;
    bool is_gamma = false;
};

// Every parameter of the architecture in construction order.
std::vector<ParameterSpec> unet_parameter_specs(const DenoiserConfig& config);

// Weights ~ N(0, 1/fan_in), biases and shifts zero, normalization scales one.
DenoiserModel build_unet(const DenoiserConfig& config, std::uint64_t seed);

// Adds the U-Net to `graph`. `x` is [N,C,H,W]; `t` holds N step indices.
// Parameter leaves are named as in unet_parameter_specs().
template <typename T>
NodeId build_unet_graph(BasicGraph<T>& graph, const DenoiserConfig& config, NodeId x, NodeId t);

// Forward pass without gradient bookkeeping beyond the graph itself.
Tensor predict_noise(const DenoiserModel& model, const Tensor& x_t, std::span<const int> t);

// Interleaved (sin, cos) pairs of t at frequencies 1 ... 1e-4.
std::vector<float> time_embedding(double t, std::size_t dim);

std::pair<TensorMap, TensorMap> split_parameters(const DenoiserModel& model);
// Inverse of split_parameters; the two maps must partition the model's names.
DenoiserModel merge_parameters(const DenoiserModel& like, const TensorMap& base, const TensorMap& personal);

}  // namespace phoenix
