#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "phoenix/tensor.hpp"

namespace phoenix {

struct NodeId {
    std::size_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

enum class Op {
    Input,
    Parameter,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Conv2d,
    Upsample2x,
    AvgPool2x,
    SiLU,
    GroupNorm,
    ConcatChannels,
    MeanSquaredError,
    SinusoidalEmbedding,
    AddBias,
    AddChannelwise,
    Reshape,
    SoftmaxCrossEntropy,
    Argmax,
};

const char* op_name(Op op);

enum class Padding { Same, Valid };

// Static computation graph built once, evaluated with named leaf bindings,
// then differentiated in reverse. Nodes are appended in construction order,
// which is also the execution order; a node may only reference earlier nodes,
// so the graph is acyclic by construction.
//
// Reductions use a fixed summation order so forward and backward results are
// bitwise reproducible.
template <typename T>
class BasicGraph {
   public:
    using TensorT = BasicTensor<T>;
    using TensorMapT = BasicTensorMap<T>;

    // Leaf bound by name at evaluation time; receives no gradient.
    NodeId input(std::string name);
    // Leaf bound by name at evaluation time; backward() returns its gradient.
    NodeId parameter(std::string name);
    NodeId constant(TensorT value, std::string name = {});

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    // [m,k] x [k,n] -> [m,n]
    NodeId matmul(NodeId a, NodeId b);
    // x [N,Cin,H,W], weight [Cout,Cin,K,K], optional bias [Cout]; stride 1.
    // Same padding keeps H,W (K must be odd); valid padding yields H-K+1, W-K+1.
    NodeId conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Padding padding = Padding::Same);
    // [N,C,H,W] -> [N,C,2H,2W]
    NodeId upsample2x(NodeId x);
    // [N,C,H,W] -> [N,C,H/2,W/2]; H and W must be even.
    NodeId avg_pool2x(NodeId x);
    NodeId silu(NodeId x);
    // x [N,C,...]; gamma, beta [C]. `groups` must divide C.
    NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, double eps = 1e-5);
    // [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]
    NodeId concat_channels(NodeId a, NodeId b);
    // mean((a-b)^2) -> [1]
    NodeId mse(NodeId prediction, NodeId target);
    // t [N] -> [N,dim] interleaved (sin, cos) pairs; see sinusoidal_frequency().
    NodeId sinusoidal_embedding(NodeId t, std::size_t dim);
    // x [N,C,...] + b [C] broadcast over every axis except 1.
    NodeId add_bias(NodeId x, NodeId bias);
    // x [N,C,H,W] + v [N,C] broadcast over the spatial axes.
    NodeId add_channelwise(NodeId x, NodeId v);
    NodeId reshape(NodeId x, Shape shape);
    // logits [N,C], integer labels -> mean negative log-likelihood [1]
    NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);
    // [N,C] -> [N] class indices. Not differentiable.
    NodeId argmax(NodeId logits);

    void set_output(NodeId node);
    NodeId output() const;
    std::size_t size() const { return nodes_.size(); }
    Op op(NodeId node) const { return nodes_.at(node.index).op; }

    // Evaluates every node in order. Throws ShapeError / NumericError naming
    // the failing node.
    const TensorT& forward(const TensorMapT& bindings);
    // Requires a completed forward() and a scalar output. Returns one gradient
    // per parameter leaf, shape-congruent with its bound value.
    TensorMapT backward();

    const TensorT& value(NodeId node) const;
    // Gradient of the output w.r.t. any node reached by the last backward().
    const TensorT& gradient(NodeId node) const;

   private:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        std::string name;
        double scalar = 0.0;
        std::size_t count = 0;
        Padding padding = Padding::Same;
        Shape shape;
        std::vector<int> labels;
        TensorT value;
        TensorT grad;
        std::vector<double> aux;
        std::vector<T> cache;
        bool requires_grad = false;
        bool has_grad = false;
    };

    NodeId push(Node node);
    std::string describe(std::size_t index) const;
    void eval_node(std::size_t index, const TensorMapT& bindings);
    void backprop_node(std::size_t index);
    TensorT& grad_slot(NodeId id);

    std::vector<Node> nodes_;
    std::optional<NodeId> output_;
    bool evaluated_ = false;
    bool differentiated_ = false;
};

using Graph = BasicGraph<float>;
using GraphD = BasicGraph<double>;

extern template class BasicGraph<float>;
extern template class BasicGraph<double>;

// Frequency of (sin, cos) pair j out of `pairs`: geometric from 1 down to 1e-4.
double sinusoidal_frequency(std::size_t j, std::size_t pairs);

}  // namespace phoenix
