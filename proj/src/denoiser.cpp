#include "phoenix/denoiser.hpp"

#include <cmath>
#include <map>

#include "phoenix/rng.hpp"

namespace phoenix {

void DenoiserConfig::validate() const {
    if (image_channels < 1) throw ArgumentError("image_channels must be >= 1");
    if (base_channels < 1) throw ArgumentError("base_channels must be >= 1");
    if (depth < 1) throw ArgumentError("depth must be >= 1");
    if (blocks_per_stage < 1) throw ArgumentError("blocks_per_stage must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ArgumentError("time_embed_dim must be even and >= 2");
    if (norm_groups < 1) throw ArgumentError("norm_groups must be >= 1");
    if (depth >= 16 || image_side % (std::size_t{1} << depth) != 0) {
        throw ArgumentError("image_side " + std::to_string(image_side) + " is not divisible by 2^" +
                            std::to_string(depth));
    }
}

DenoiserConfig DenoiserConfig::desk() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::paper() {
    return DenoiserConfig{.image_channels = 3,
                          .image_side = 32,
                          .base_channels = 64,
                          .depth = 4,
                          .blocks_per_stage = 1,
                          .time_embed_dim = 128,
                          .norm_groups = 4};
}

namespace {

struct BlockLayout {
    std::string prefix;
    std::size_t cin = 0;
    std::size_t cout = 0;
};

struct UNetLayout {
    std::vector<BlockLayout> down;  // depth * blocks_per_stage, stage-major
    BlockLayout mid;
    std::vector<BlockLayout> up;  // stages depth-1 .. 0, block-major within a stage
};

std::size_t stage_channels(const DenoiserConfig& c, std::size_t stage) { return c.base_channels << stage; }

UNetLayout make_layout(const DenoiserConfig& c) {
    UNetLayout layout;
    std::size_t ch = c.base_channels;
    for (std::size_t s = 0; s < c.depth; ++s) {
        for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
            layout.down.push_back({"down" + std::to_string(s) + ".block" + std::to_string(b), ch, stage_channels(c, s)});
            ch = stage_channels(c, s);
        }
    }
    layout.mid = {"mid.block0", ch, ch};
    for (std::size_t s = c.depth; s-- > 0;) {
        for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
            const std::size_t cin = b == 0 ? ch + stage_channels(c, s) : stage_channels(c, s);
            layout.up.push_back({"up" + std::to_string(s) + ".block" + std::to_string(b), cin, stage_channels(c, s)});
            ch = stage_channels(c, s);
        }
    }
    return layout;
}

std::string personal_prefix(const DenoiserConfig& c) {
    return "up0.block" + std::to_string(c.blocks_per_stage - 1) + ".";
}

// Largest group count <= requested that divides the channel count.
std::size_t groups_for(std::size_t channels, std::size_t requested) {
    std::size_t g = std::min(requested, channels);
    while (channels % g != 0) --g;
    return g;
}

void add_block_specs(std::vector<ParameterSpec>& specs, const BlockLayout& b, std::size_t embed) {
    const auto& p = b.prefix;
    specs.push_back({p + ".norm1.gamma", {b.cin}, 0, false, true});
    specs.push_back({p + ".norm1.beta", {b.cin}});
    specs.push_back({p + ".conv1.weight", {b.cout, b.cin, 3, 3}, 9 * b.cin});
    specs.push_back({p + ".conv1.bias", {b.cout}});
    specs.push_back({p + ".time.weight", {embed, b.cout}, embed});
    specs.push_back({p + ".time.bias", {b.cout}});
    specs.push_back({p + ".norm2.gamma", {b.cout}, 0, false, true});
    specs.push_back({p + ".norm2.beta", {b.cout}});
    specs.push_back({p + ".conv2.weight", {b.cout, b.cout, 3, 3}, 9 * b.cout});
    specs.push_back({p + ".conv2.bias", {b.cout}});
    if (b.cin != b.cout) {
        specs.push_back({p + ".skip.weight", {b.cout, b.cin, 1, 1}, b.cin});
        specs.push_back({p + ".skip.bias", {b.cout}});
    }
}

template <typename T>
NodeId residual_block(BasicGraph<T>& g, const DenoiserConfig& c, const BlockLayout& b, NodeId x, NodeId emb) {
    auto P = [&](const std::string& suffix) { return g.parameter(b.prefix + suffix); };
    NodeId h = g.group_norm(x, P(".norm1.gamma"), P(".norm1.beta"), groups_for(b.cin, c.norm_groups));
    h = g.conv2d(g.silu(h), P(".conv1.weight"), P(".conv1.bias"));
    NodeId proj = g.add_bias(g.matmul(emb, P(".time.weight")), P(".time.bias"));
    h = g.add_channelwise(h, proj);
    h = g.group_norm(h, P(".norm2.gamma"), P(".norm2.beta"), groups_for(b.cout, c.norm_groups));
    h = g.conv2d(g.silu(h), P(".conv2.weight"), P(".conv2.bias"));
    NodeId skip = x;
    if (b.cin != b.cout) skip = g.conv2d(x, P(".skip.weight"), P(".skip.bias"));
    return g.add(skip, h);
}

}  // namespace

std::vector<ParameterSpec> unet_parameter_specs(const DenoiserConfig& config) {
    config.validate();
    const UNetLayout layout = make_layout(config);
    const std::size_t E = config.time_embed_dim, C = config.image_channels, B = config.base_channels;
    std::vector<ParameterSpec> specs;
    specs.push_back({"time_mlp.weight", {E, E}, E});
    specs.push_back({"time_mlp.bias", {E}});
    specs.push_back({"in_conv.weight", {B, C, 3, 3}, 9 * C});
    specs.push_back({"in_conv.bias", {B}});
    for (const auto& b : layout.down) add_block_specs(specs, b, E);
    add_block_specs(specs, layout.mid, E);
    for (const auto& b : layout.up) add_block_specs(specs, b, E);
    specs.push_back({"out_norm.gamma", {B}, 0, false, true});
    specs.push_back({"out_norm.beta", {B}});
    specs.push_back({"out_conv.weight", {C, B, 3, 3}, 9 * B});
    specs.push_back({"out_conv.bias", {C}});
    const std::string personal = personal_prefix(config);
    for (auto& s : specs) s.personal = s.name.starts_with(personal);
    return specs;
}

DenoiserModel build_unet(const DenoiserConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {kInitStream}));
    std::vector<ModelParameter> params;
    for (const auto& spec : unet_parameter_specs(config)) {
        Tensor t(spec.shape, spec.is_gamma ? 1.0f : 0.0f);
        if (spec.fan_in > 0) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
            for (float& v : t.data()) v = static_cast<float>(rng.normal() * scale);
        }
        params.push_back({spec.name, std::move(t), spec.personal});
    }
    return DenoiserModel(config, std::move(params));
}

template <typename T>
NodeId build_unet_graph(BasicGraph<T>& g, const DenoiserConfig& c, NodeId x, NodeId t) {
    c.validate();
    const UNetLayout layout = make_layout(c);
    NodeId emb = g.sinusoidal_embedding(t, c.time_embed_dim);
    emb = g.silu(g.add_bias(g.matmul(emb, g.parameter("time_mlp.weight")), g.parameter("time_mlp.bias")));

    NodeId h = g.conv2d(x, g.parameter("in_conv.weight"), g.parameter("in_conv.bias"));
    std::vector<NodeId> skips;
    std::size_t i = 0;
    for (std::size_t s = 0; s < c.depth; ++s) {
        for (std::size_t b = 0; b < c.blocks_per_stage; ++b) h = residual_block(g, c, layout.down[i++], h, emb);
        skips.push_back(h);
        h = g.avg_pool2x(h);
    }
    h = residual_block(g, c, layout.mid, h, emb);
    i = 0;
    for (std::size_t s = c.depth; s-- > 0;) {
        h = g.concat_channels(g.upsample2x(h), skips[s]);
        for (std::size_t b = 0; b < c.blocks_per_stage; ++b) h = residual_block(g, c, layout.up[i++], h, emb);
    }
    h = g.group_norm(h, g.parameter("out_norm.gamma"), g.parameter("out_norm.beta"),
                     groups_for(c.base_channels, c.norm_groups));
    return g.conv2d(g.silu(h), g.parameter("out_conv.weight"), g.parameter("out_conv.bias"));
}

template NodeId build_unet_graph<float>(BasicGraph<float>&, const DenoiserConfig&, NodeId, NodeId);
template NodeId build_unet_graph<double>(BasicGraph<double>&, const DenoiserConfig&, NodeId, NodeId);

DenoiserModel::DenoiserModel(DenoiserConfig config, std::vector<ModelParameter> params)
    : config_(config), params_(std::move(params)) {
    std::set<std::string> seen;
    for (const auto& p : params_) {
        if (!seen.insert(p.name).second) throw ArgumentError("duplicate parameter name '" + p.name + "'");
    }
}

TensorMap DenoiserModel::params() const {
    TensorMap out;
    for (const auto& p : params_) out.emplace(p.name, p.value);
    return out;
}

const Tensor& DenoiserModel::param(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw ArgumentError("unknown parameter '" + name + "'");
}

void DenoiserModel::set_params(const TensorMap& values) {
    std::map<std::string, ModelParameter*> index;
    for (auto& p : params_) index.emplace(p.name, &p);
    for (const auto& [name, t] : values) {
        auto it = index.find(name);
        if (it == index.end()) throw ArgumentError("unknown parameter '" + name + "'");
        if (it->second->value.shape() != t.shape()) {
            throw ShapeError("parameter '" + name + "' expects shape " + shape_string(it->second->value.shape()) +
                             ", got " + shape_string(t.shape()));
        }
    }
    for (const auto& [name, t] : values) index.at(name)->value = t;
}

std::set<std::string> DenoiserModel::personal_names() const {
    std::set<std::string> out;
    for (const auto& p : params_) {
        if (p.personal) out.insert(p.name);
    }
    return out;
}

std::set<std::string> DenoiserModel::base_names() const {
    std::set<std::string> out;
    for (const auto& p : params_) {
        if (!p.personal) out.insert(p.name);
    }
    return out;
}

std::size_t DenoiserModel::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::vector<CheckpointEntry> DenoiserModel::to_checkpoint() const {
    std::vector<CheckpointEntry> out;
    for (const auto& p : params_) out.push_back({p.name, p.value, p.personal});
    return out;
}

DenoiserModel DenoiserModel::from_checkpoint(const DenoiserConfig& config, const std::vector<CheckpointEntry>& entries) {
    const auto specs = unet_parameter_specs(config);
    if (entries.size() != specs.size()) {
        throw FormatError("checkpoint holds " + std::to_string(entries.size()) + " records, architecture expects " +
                          std::to_string(specs.size()));
    }
    std::vector<ModelParameter> params;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& e = entries[i];
        const auto& s = specs[i];
        const std::string label = "checkpoint record " + std::to_string(i) + " '" + e.name + "'";
        if (e.name != s.name) throw FormatError(label + ": expected parameter '" + s.name + "'");
        if (e.tensor.shape() != s.shape) {
            throw FormatError(label + ": shape " + shape_string(e.tensor.shape()) + ", expected " + shape_string(s.shape));
        }
        if (e.personal != s.personal) throw FormatError(label + ": personal flag mismatch");
        params.push_back({e.name, e.tensor, e.personal});
    }
    return DenoiserModel(config, std::move(params));
}

Tensor predict_noise(const DenoiserModel& model, const Tensor& x_t, std::span<const int> t) {
    const auto& c = model.config();
    const Shape expected{x_t.shape().empty() ? 0 : x_t.dim(0), c.image_channels, c.image_side, c.image_side};
    if (x_t.shape() != expected) {
        throw ShapeError("predict_noise input " + shape_string(x_t.shape()) + " does not match model image shape");
    }
    if (t.size() != x_t.dim(0)) throw ShapeError("predict_noise needs one step index per sample");
    std::vector<float> tv(t.begin(), t.end());
    Graph g;
    NodeId x = g.constant(x_t, "x_t");
    NodeId tn = g.constant(Tensor({t.size()}, std::move(tv)), "t");
    g.set_output(build_unet_graph(g, c, x, tn));
    return g.forward(model.params());
}

std::vector<float> time_embedding(double t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw ArgumentError("time embedding dimension must be even");
    std::vector<float> out(dim);
    const std::size_t pairs = dim / 2;
    for (std::size_t j = 0; j < pairs; ++j) {
        const double arg = t * sinusoidal_frequency(j, pairs);
        out[2 * j] = static_cast<float>(std::sin(arg));
        out[2 * j + 1] = static_cast<float>(std::cos(arg));
    }
    return out;
}

std::pair<TensorMap, TensorMap> split_parameters(const DenoiserModel& model) {
    TensorMap base, personal;
    for (const auto& p : model.parameters()) (p.personal ? personal : base).emplace(p.name, p.value);
    return {std::move(base), std::move(personal)};
}

DenoiserModel merge_parameters(const DenoiserModel& like, const TensorMap& base, const TensorMap& personal) {
    std::vector<ModelParameter> params;
    for (const auto& p : like.parameters()) {
        const TensorMap& src = p.personal ? personal : base;
        auto it = src.find(p.name);
        if (it == src.end()) {
            throw ArgumentError("merge is missing " + std::string(p.personal ? "personal" : "base") + " parameter '" +
                                p.name + "'");
        }
        if (it->second.shape() != p.value.shape()) throw ShapeError("merge shape mismatch for '" + p.name + "'");
        params.push_back({p.name, it->second, p.personal});
    }
    if (base.size() + personal.size() != params.size()) {
        throw ArgumentError("merge received parameters the model does not have");
    }
    return DenoiserModel(like.config(), std::move(params));
}

}  // namespace phoenix
