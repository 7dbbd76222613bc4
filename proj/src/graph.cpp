#include "phoenix/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace phoenix {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Parameter: return "parameter";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::MatMul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::Upsample2x: return "upsample2x";
        case Op::AvgPool2x: return "avg_pool2x";
        case Op::SiLU: return "silu";
        case Op::GroupNorm: return "group_norm";
        case Op::ConcatChannels: return "concat_channels";
        case Op::MeanSquaredError: return "mse";
        case Op::SinusoidalEmbedding: return "sinusoidal_embedding";
        case Op::AddBias: return "add_bias";
        case Op::AddChannelwise: return "add_channelwise";
        case Op::Reshape: return "reshape";
        case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
        case Op::Argmax: return "argmax";
    }
    return "unknown";
}

double sinusoidal_frequency(std::size_t j, std::size_t pairs) {
    if (pairs <= 1) return 1.0;
    return std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(pairs - 1));
}

namespace {

using std::ptrdiff_t;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct ConvDims {
    ptrdiff_t N, Cin, H, W, Cout, K, pad, OH, OW;
};

template <typename T, typename Fail>
ConvDims conv_dims(const BasicTensor<T>& x, const BasicTensor<T>& w, Padding padding, Fail&& fail) {
    ConvDims d{};
    d.N = x.dim(0), d.Cin = x.dim(1), d.H = x.dim(2), d.W = x.dim(3);
    d.Cout = w.dim(0), d.K = w.dim(2);
    if (static_cast<ptrdiff_t>(w.dim(1)) != d.Cin || static_cast<ptrdiff_t>(w.dim(3)) != d.K) {
        fail("weight " + shape_string(w.shape()) + " incompatible with input " + shape_string(x.shape()));
    }
    const bool same = padding == Padding::Same;
    if (same && d.K % 2 == 0) fail("same padding requires an odd kernel size");
    if (!same && (d.K > d.H || d.K > d.W)) fail("kernel larger than input under valid padding");
    d.pad = same ? (d.K - 1) / 2 : 0;
    d.OH = same ? d.H : d.H - d.K + 1;
    d.OW = same ? d.W : d.W - d.K + 1;
    return d;
}

// col[(ci*K + kh)*K + kw][n*OH*OW + oh*OW + ow] = x[n][ci][oh+kh-pad][ow+kw-pad] (zero outside).
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
    const ptrdiff_t cols = d.N * d.OH * d.OW, plane = d.OH * d.OW;
    for (ptrdiff_t ci = 0; ci < d.Cin; ++ci) {
        for (ptrdiff_t kh = 0; kh < d.K; ++kh) {
            for (ptrdiff_t kw = 0; kw < d.K; ++kw) {
                T* row = col + ((ci * d.K + kh) * d.K + kw) * cols;
                const ptrdiff_t oh0 = std::max<ptrdiff_t>(0, d.pad - kh), oh1 = std::min<ptrdiff_t>(d.OH, d.H + d.pad - kh);
                const ptrdiff_t ow0 = std::max<ptrdiff_t>(0, d.pad - kw), ow1 = std::min<ptrdiff_t>(d.OW, d.W + d.pad - kw);
                for (ptrdiff_t n = 0; n < d.N; ++n) {
                    const T* src = x + (n * d.Cin + ci) * d.H * d.W;
                    T* dst = row + n * plane;
                    for (ptrdiff_t oh = oh0; oh < oh1; ++oh) {
                        const T* irow = src + (oh + kh - d.pad) * d.W + (kw - d.pad);
                        T* orow = dst + oh * d.OW;
                        for (ptrdiff_t ow = ow0; ow < ow1; ++ow) orow[ow] = irow[ow];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds column gradients into dx.
template <typename T>
void col2im(const T* col, const ConvDims& d, T* dx) {
    const ptrdiff_t cols = d.N * d.OH * d.OW, plane = d.OH * d.OW;
    for (ptrdiff_t ci = 0; ci < d.Cin; ++ci) {
        for (ptrdiff_t kh = 0; kh < d.K; ++kh) {
            for (ptrdiff_t kw = 0; kw < d.K; ++kw) {
                const T* row = col + ((ci * d.K + kh) * d.K + kw) * cols;
                const ptrdiff_t oh0 = std::max<ptrdiff_t>(0, d.pad - kh), oh1 = std::min<ptrdiff_t>(d.OH, d.H + d.pad - kh);
                const ptrdiff_t ow0 = std::max<ptrdiff_t>(0, d.pad - kw), ow1 = std::min<ptrdiff_t>(d.OW, d.W + d.pad - kw);
                for (ptrdiff_t n = 0; n < d.N; ++n) {
                    T* dst = dx + (n * d.Cin + ci) * d.H * d.W;
                    const T* src = row + n * plane;
                    for (ptrdiff_t oh = oh0; oh < oh1; ++oh) {
                        T* drow = dst + (oh + kh - d.pad) * d.W + (kw - d.pad);
                        const T* grow = src + oh * d.OW;
                        for (ptrdiff_t ow = ow0; ow < ow1; ++ow) drow[ow] += grow[ow];
                    }
                }
            }
        }
    }
}

// C[M,N] += sum_k A(i,k) * B[k,N] with A(i,k) = A[i*rs + k*ks]. Columns of B
// are packed into contiguous K x NR panels and multiplied by MR-row register
// blocks. Each C entry is accumulated over k in increasing order regardless of
// which path computes it.
template <typename T>
void gemm_strided(ptrdiff_t M, ptrdiff_t N, ptrdiff_t K, const T* A, ptrdiff_t rs, ptrdiff_t ks, const T* B, T* C) {
    constexpr ptrdiff_t MR = 8, NR = 16;
    std::vector<T> panel(static_cast<std::size_t>(K * NR));
    ptrdiff_t j0 = 0;
    for (; j0 + NR <= N; j0 += NR) {
        for (ptrdiff_t k = 0; k < K; ++k) std::copy_n(B + k * N + j0, NR, panel.data() + k * NR);
        ptrdiff_t i0 = 0;
        for (; i0 + MR <= M; i0 += MR) {
            T acc[MR][NR] = {};
            const T* b = panel.data();
            for (ptrdiff_t k = 0; k < K; ++k, b += NR) {
                for (ptrdiff_t r = 0; r < MR; ++r) {
                    const T a = A[(i0 + r) * rs + k * ks];
                    for (ptrdiff_t c = 0; c < NR; ++c) acc[r][c] += a * b[c];
                }
            }
            for (ptrdiff_t r = 0; r < MR; ++r) {
                for (ptrdiff_t c = 0; c < NR; ++c) C[(i0 + r) * N + j0 + c] += acc[r][c];
            }
        }
        for (; i0 < M; ++i0) {
            T acc[NR] = {};
            const T* b = panel.data();
            for (ptrdiff_t k = 0; k < K; ++k, b += NR) {
                const T a = A[i0 * rs + k * ks];
                for (ptrdiff_t c = 0; c < NR; ++c) acc[c] += a * b[c];
            }
            for (ptrdiff_t c = 0; c < NR; ++c) C[i0 * N + j0 + c] += acc[c];
        }
    }
    for (; j0 < N; ++j0) {
        for (ptrdiff_t i = 0; i < M; ++i) {
            T acc = 0;
            for (ptrdiff_t k = 0; k < K; ++k) acc += A[i * rs + k * ks] * B[k * N + j0];
            C[i * N + j0] += acc;
        }
    }
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(ptrdiff_t M, ptrdiff_t N, ptrdiff_t K, const T* A, const T* B, T* C) {
    gemm_strided(M, N, K, A, K, 1, B, C);
}

// C[P,N] += A[M,P]^T * B[M,N]
template <typename T>
void gemm_tn(ptrdiff_t P, ptrdiff_t N, ptrdiff_t M, const T* A, const T* B, T* C) {
    gemm_strided(P, N, M, A, 1, P, B, C);
}

// C[M,P] += A[M,N] * B[P,N]^T. Dot products use eight interleaved partial
// sums combined in a fixed order.
template <typename T>
void gemm_nt(ptrdiff_t M, ptrdiff_t P, ptrdiff_t N, const T* A, const T* B, T* C) {
    constexpr ptrdiff_t L = 8;
    for (ptrdiff_t i = 0; i < M; ++i) {
        const T* arow = A + i * N;
        for (ptrdiff_t p = 0; p < P; ++p) {
            const T* brow = B + p * N;
            T part[L] = {};
            ptrdiff_t j = 0;
            for (; j + L <= N; j += L) {
                for (ptrdiff_t l = 0; l < L; ++l) part[l] += arow[j + l] * brow[j + l];
            }
            T acc = ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
            for (; j < N; ++j) acc += arow[j] * brow[j];
            C[i * P + p] += acc;
        }
    }
}

}  // namespace

template <typename T>
NodeId BasicGraph<T>::push(Node node) {
    for (NodeId in : node.inputs) {
        if (in.index >= nodes_.size()) {
            throw UsageError("node input refers to a node that does not exist yet");
        }
        node.requires_grad = node.requires_grad || nodes_[in.index].requires_grad;
    }
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    differentiated_ = false;
    return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId BasicGraph<T>::input(std::string name) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::Input && nodes_[i].name == name) return NodeId{i};
    }
    Node node{.op = Op::Input};
    node.name = std::move(name);
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::parameter(std::string name) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::Parameter && nodes_[i].name == name) return NodeId{i};
    }
    Node node{.op = Op::Parameter};
    node.name = std::move(name);
    node.requires_grad = true;
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::constant(TensorT value, std::string name) {
    Node node{.op = Op::Constant};
    node.name = std::move(name);
    node.value = std::move(value);
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::add(NodeId a, NodeId b) {
    return push(Node{.op = Op::Add, .inputs = {a, b}});
}

template <typename T>
NodeId BasicGraph<T>::sub(NodeId a, NodeId b) {
    return push(Node{.op = Op::Sub, .inputs = {a, b}});
}

template <typename T>
NodeId BasicGraph<T>::mul(NodeId a, NodeId b) {
    return push(Node{.op = Op::Mul, .inputs = {a, b}});
}

template <typename T>
NodeId BasicGraph<T>::scale(NodeId a, double factor) {
    return push(Node{.op = Op::Scale, .inputs = {a}, .scalar = factor});
}

template <typename T>
NodeId BasicGraph<T>::matmul(NodeId a, NodeId b) {
    return push(Node{.op = Op::MatMul, .inputs = {a, b}});
}

template <typename T>
NodeId BasicGraph<T>::conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, Padding padding) {
    Node node{.op = Op::Conv2d, .inputs = {x, weight}};
    if (bias) node.inputs.push_back(*bias);
    node.padding = padding;
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::upsample2x(NodeId x) {
    return push(Node{.op = Op::Upsample2x, .inputs = {x}});
}

template <typename T>
NodeId BasicGraph<T>::avg_pool2x(NodeId x) {
    return push(Node{.op = Op::AvgPool2x, .inputs = {x}});
}

template <typename T>
NodeId BasicGraph<T>::silu(NodeId x) {
    return push(Node{.op = Op::SiLU, .inputs = {x}});
}

template <typename T>
NodeId BasicGraph<T>::group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, double eps) {
    if (groups == 0) throw ArgumentError("group_norm needs at least one group");
    return push(Node{.op = Op::GroupNorm, .inputs = {x, gamma, beta}, .scalar = eps, .count = groups});
}

template <typename T>
NodeId BasicGraph<T>::concat_channels(NodeId a, NodeId b) {
    return push(Node{.op = Op::ConcatChannels, .inputs = {a, b}});
}

template <typename T>
NodeId BasicGraph<T>::mse(NodeId prediction, NodeId target) {
    return push(Node{.op = Op::MeanSquaredError, .inputs = {prediction, target}});
}

template <typename T>
NodeId BasicGraph<T>::sinusoidal_embedding(NodeId t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) {
        throw ArgumentError("sinusoidal embedding dimension must be even and positive, got " +
                            std::to_string(dim));
    }
    return push(Node{.op = Op::SinusoidalEmbedding, .inputs = {t}, .count = dim});
}

template <typename T>
NodeId BasicGraph<T>::add_bias(NodeId x, NodeId bias) {
    return push(Node{.op = Op::AddBias, .inputs = {x, bias}});
}

template <typename T>
NodeId BasicGraph<T>::add_channelwise(NodeId x, NodeId v) {
    return push(Node{.op = Op::AddChannelwise, .inputs = {x, v}});
}

template <typename T>
NodeId BasicGraph<T>::reshape(NodeId x, Shape shape) {
    Node node{.op = Op::Reshape, .inputs = {x}};
    node.shape = std::move(shape);
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
    Node node{.op = Op::SoftmaxCrossEntropy, .inputs = {logits}};
    node.labels = std::move(labels);
    return push(std::move(node));
}

template <typename T>
NodeId BasicGraph<T>::argmax(NodeId logits) {
    return push(Node{.op = Op::Argmax, .inputs = {logits}});
}

template <typename T>
void BasicGraph<T>::set_output(NodeId node) {
    if (node.index >= nodes_.size()) throw UsageError("output node does not exist");
    output_ = node;
}

template <typename T>
NodeId BasicGraph<T>::output() const {
    if (!output_) throw UsageError("graph has no output node");
    return *output_;
}

template <typename T>
std::string BasicGraph<T>::describe(std::size_t index) const {
    const Node& n = nodes_[index];
    std::string s = "node " + std::to_string(index) + " (" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
}

template <typename T>
const typename BasicGraph<T>::TensorT& BasicGraph<T>::forward(const TensorMapT& bindings) {
    if (!output_) throw UsageError("graph has no output node");
    evaluated_ = false;
    differentiated_ = false;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        eval_node(i, bindings);
        if (!nodes_[i].value.all_finite()) {
            throw NumericError("non-finite value produced by " + describe(i));
        }
    }
    evaluated_ = true;
    return nodes_[output_->index].value;
}

template <typename T>
const typename BasicGraph<T>::TensorT& BasicGraph<T>::value(NodeId node) const {
    if (!evaluated_) throw UsageError("value() requested before forward()");
    return nodes_.at(node.index).value;
}

template <typename T>
const typename BasicGraph<T>::TensorT& BasicGraph<T>::gradient(NodeId node) const {
    if (!differentiated_) throw UsageError("gradient() requested before backward()");
    const Node& n = nodes_.at(node.index);
    if (!n.has_grad) throw UsageError("no gradient reached " + describe(node.index));
    return n.grad;
}

template <typename T>
typename BasicGraph<T>::TensorT& BasicGraph<T>::grad_slot(NodeId id) {
    Node& n = nodes_[id.index];
    if (!n.has_grad) {
        n.grad = TensorT(n.value.shape(), T{0});
        n.has_grad = true;
    }
    return n.grad;
}

template <typename T>
void BasicGraph<T>::eval_node(std::size_t index, const TensorMapT& bindings) {
    Node& node = nodes_[index];
    auto in = [&](std::size_t k) -> const TensorT& { return nodes_[node.inputs[k].index].value; };
    auto fail = [&](const std::string& what) { throw ShapeError(describe(index) + ": " + what); };
    auto require_same = [&](const TensorT& a, const TensorT& b) {
        if (a.shape() != b.shape()) {
            fail("operand shapes differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
        }
    };
    auto require_rank = [&](const TensorT& a, std::size_t rank, const char* what) {
        if (a.rank() != rank) {
            fail(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                 shape_string(a.shape()));
        }
    };

    switch (node.op) {
        case Op::Input:
        case Op::Parameter: {
            auto it = bindings.find(node.name);
            if (it == bindings.end()) throw UsageError(describe(index) + ": leaf is not bound");
            node.value = it->second;
            return;
        }
        case Op::Constant:
            return;
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            const TensorT& a = in(0);
            const TensorT& b = in(1);
            require_same(a, b);
            TensorT out(a.shape());
            auto o = out.data();
            auto av = a.data();
            auto bv = b.data();
            if (node.op == Op::Add) {
                for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
            } else if (node.op == Op::Sub) {
                for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
            } else {
                for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
            }
            node.value = std::move(out);
            return;
        }
        case Op::Scale: {
            TensorT out = in(0);
            const T f = static_cast<T>(node.scalar);
            for (T& v : out.data()) v *= f;
            node.value = std::move(out);
            return;
        }
        case Op::MatMul: {
            const TensorT& a = in(0);
            const TensorT& b = in(1);
            require_rank(a, 2, "matmul lhs");
            require_rank(b, 2, "matmul rhs");
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            if (b.dim(0) != k) {
                fail("inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
            }
            TensorT out({m, n});
            for (std::size_t i = 0; i < m; ++i) {
                T* orow = &out[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = a[i * k + p];
                    const T* brow = &b[p * n];
                    for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::Conv2d: {
            const TensorT& x = in(0);
            const TensorT& w = in(1);
            require_rank(x, 4, "conv2d input");
            require_rank(w, 4, "conv2d weight");
            const ConvDims d = conv_dims(x, w, node.padding, fail);
            const TensorT* bias = nullptr;
            if (node.inputs.size() == 3) {
                bias = &in(2);
                if (bias->rank() != 1 || static_cast<ptrdiff_t>(bias->dim(0)) != d.Cout) {
                    fail("bias shape " + shape_string(bias->shape()) + " does not match output channels");
                }
            }
            // Columns: [Cin*K*K, N*OH*OW]; product with the weight matrix gives
            // [Cout, N*OH*OW], scattered back to NCHW.
            const ptrdiff_t rows = d.Cin * d.K * d.K, cols = d.N * d.OH * d.OW, plane = d.OH * d.OW;
            node.cache.assign(static_cast<std::size_t>(rows * cols), T{0});
            im2col(x.data().data(), d, node.cache.data());
            std::vector<T> prod(static_cast<std::size_t>(d.Cout * cols), T{0});
            gemm_nn(d.Cout, cols, rows, w.data().data(), node.cache.data(), prod.data());
            TensorT out({static_cast<std::size_t>(d.N), static_cast<std::size_t>(d.Cout), static_cast<std::size_t>(d.OH),
                         static_cast<std::size_t>(d.OW)});
            for (ptrdiff_t n = 0; n < d.N; ++n) {
                for (ptrdiff_t co = 0; co < d.Cout; ++co) {
                    const T* src = &prod[co * cols + n * plane];
                    T* dst = &out[(n * d.Cout + co) * plane];
                    const T b = bias ? (*bias)[co] : T{0};
                    for (ptrdiff_t i = 0; i < plane; ++i) dst[i] = src[i] + b;
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::Upsample2x: {
            const TensorT& x = in(0);
            require_rank(x, 4, "upsample input");
            const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
            TensorT out({x.dim(0), x.dim(1), 2 * H, 2 * W});
            for (std::size_t p = 0; p < NC; ++p) {
                const T* src = &x[p * H * W];
                T* dst = &out[p * 4 * H * W];
                for (std::size_t oh = 0; oh < 2 * H; ++oh) {
                    for (std::size_t ow = 0; ow < 2 * W; ++ow) {
                        dst[oh * 2 * W + ow] = src[(oh / 2) * W + ow / 2];
                    }
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::AvgPool2x: {
            const TensorT& x = in(0);
            require_rank(x, 4, "avg_pool input");
            const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
            if (H % 2 != 0 || W % 2 != 0) fail("avg_pool2x needs even spatial size, got " + shape_string(x.shape()));
            const std::size_t OH = H / 2, OW = W / 2;
            TensorT out({x.dim(0), x.dim(1), OH, OW});
            for (std::size_t p = 0; p < NC; ++p) {
                const T* src = &x[p * H * W];
                T* dst = &out[p * OH * OW];
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const T* s = src + 2 * oh * W + 2 * ow;
                        dst[oh * OW + ow] = (s[0] + s[1] + s[W] + s[W + 1]) * T(0.25);
                    }
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::SiLU: {
            TensorT out = in(0);
            for (T& v : out.data()) v = static_cast<T>(v * sigmoid(v));
            node.value = std::move(out);
            return;
        }
        case Op::GroupNorm: {
            const TensorT& x = in(0);
            const TensorT& gamma = in(1);
            const TensorT& beta = in(2);
            if (x.rank() < 2) fail("group_norm input must have rank >= 2");
            const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C), G = node.count;
            if (C % G != 0) fail(std::to_string(G) + " groups do not divide " + std::to_string(C) + " channels");
            if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) fail("gamma/beta must have shape [C]");
            const std::size_t Cg = C / G, M = Cg * S;
            TensorT out(x.shape());
            node.aux.assign(2 * N * G, 0.0);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t g = 0; g < G; ++g) {
                    const std::size_t base = (n * C + g * Cg) * S;
                    double sum = 0.0;
                    for (std::size_t i = 0; i < M; ++i) sum += x[base + i];
                    const double mean = sum / static_cast<double>(M);
                    double sq = 0.0;
                    for (std::size_t i = 0; i < M; ++i) {
                        const double d = x[base + i] - mean;
                        sq += d * d;
                    }
                    const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(M) + node.scalar);
                    node.aux[2 * (n * G + g)] = mean;
                    node.aux[2 * (n * G + g) + 1] = rstd;
                    for (std::size_t c = 0; c < Cg; ++c) {
                        const std::size_t ch = g * Cg + c;
                        const double gm = gamma[ch], bt = beta[ch];
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t i = base + c * S + s;
                            out[i] = static_cast<T>((x[i] - mean) * rstd * gm + bt);
                        }
                    }
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::ConcatChannels: {
            const TensorT& a = in(0);
            const TensorT& b = in(1);
            require_rank(a, 4, "concat lhs");
            require_rank(b, 4, "concat rhs");
            if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
                fail("cannot concatenate " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
            }
            const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), S = a.dim(2) * a.dim(3);
            TensorT out({N, Ca + Cb, a.dim(2), a.dim(3)});
            for (std::size_t n = 0; n < N; ++n) {
                std::copy_n(&a[n * Ca * S], Ca * S, &out[n * (Ca + Cb) * S]);
                std::copy_n(&b[n * Cb * S], Cb * S, &out[(n * (Ca + Cb) + Ca) * S]);
            }
            node.value = std::move(out);
            return;
        }
        case Op::MeanSquaredError: {
            const TensorT& a = in(0);
            const TensorT& b = in(1);
            require_same(a, b);
            double sum = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
                sum += d * d;
            }
            node.value = TensorT::scalar(static_cast<T>(sum / static_cast<double>(a.size())));
            return;
        }
        case Op::SinusoidalEmbedding: {
            const TensorT& t = in(0);
            const std::size_t N = t.size(), D = node.count, P = D / 2;
            TensorT out({N, D});
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t j = 0; j < P; ++j) {
                    const double arg = static_cast<double>(t[n]) * sinusoidal_frequency(j, P);
                    out[n * D + 2 * j] = static_cast<T>(std::sin(arg));
                    out[n * D + 2 * j + 1] = static_cast<T>(std::cos(arg));
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::AddBias: {
            const TensorT& x = in(0);
            const TensorT& b = in(1);
            if (x.rank() < 2 || b.shape() != Shape{x.dim(1)}) {
                fail("bias " + shape_string(b.shape()) + " does not broadcast over " + shape_string(x.shape()));
            }
            const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
            TensorT out = x;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    T* o = &out[(n * C + c) * S];
                    for (std::size_t s = 0; s < S; ++s) o[s] += b[c];
                }
            }
            node.value = std::move(out);
            return;
        }
        case Op::AddChannelwise: {
            const TensorT& x = in(0);
            const TensorT& v = in(1);
            require_rank(x, 4, "add_channelwise input");
            if (v.shape() != Shape{x.dim(0), x.dim(1)}) {
                fail("channel vector " + shape_string(v.shape()) + " does not match " + shape_string(x.shape()));
            }
            const std::size_t NC = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
            TensorT out = x;
            for (std::size_t p = 0; p < NC; ++p) {
                T* o = &out[p * S];
                for (std::size_t s = 0; s < S; ++s) o[s] += v[p];
            }
            node.value = std::move(out);
            return;
        }
        case Op::Reshape: {
            const TensorT& x = in(0);
            if (shape_size(node.shape) != x.size()) {
                fail("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(node.shape));
            }
            node.value = x.reshaped(node.shape);
            return;
        }
        case Op::SoftmaxCrossEntropy: {
            const TensorT& z = in(0);
            require_rank(z, 2, "softmax_cross_entropy logits");
            const std::size_t N = z.dim(0), C = z.dim(1);
            if (node.labels.size() != N) fail("label count does not match batch size");
            node.aux.assign(N * C, 0.0);
            double total = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const int label = node.labels[n];
                if (label < 0 || static_cast<std::size_t>(label) >= C) fail("label out of range");
                double mx = z[n * C];
                for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, z[n * C + c]);
                double denom = 0.0;
                for (std::size_t c = 0; c < C; ++c) denom += std::exp(z[n * C + c] - mx);
                const double lse = mx + std::log(denom);
                for (std::size_t c = 0; c < C; ++c) node.aux[n * C + c] = std::exp(z[n * C + c] - lse);
                total += lse - z[n * C + static_cast<std::size_t>(label)];
            }
            node.value = TensorT::scalar(static_cast<T>(total / static_cast<double>(N)));
            return;
        }
        case Op::Argmax: {
            const TensorT& z = in(0);
            require_rank(z, 2, "argmax input");
            const std::size_t N = z.dim(0), C = z.dim(1);
            TensorT out({N});
            for (std::size_t n = 0; n < N; ++n) {
                const T* row = &z[n * C];
                out[n] = static_cast<T>(std::max_element(row, row + C) - row);
            }
            node.value = std::move(out);
            return;
        }
    }
}

template <typename T>
typename BasicGraph<T>::TensorMapT BasicGraph<T>::backward() {
    if (!evaluated_) throw UsageError("backward() called before forward()");
    const NodeId out = output();
    if (nodes_[out.index].value.size() != 1) {
        throw UsageError("backward() needs a scalar output, got shape " +
                         shape_string(nodes_[out.index].value.shape()));
    }
    for (Node& n : nodes_) {
        n.has_grad = false;
        n.grad = TensorT();
    }
    if (nodes_[out.index].requires_grad) grad_slot(out)[0] = T{1};

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.requires_grad || n.inputs.empty()) continue;
        if (n.op == Op::Argmax) {
            throw UnsupportedOpError(describe(i) + " is not differentiable but lies on a gradient path");
        }
        backprop_node(i);
    }
    differentiated_ = true;

    TensorMapT grads;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.op != Op::Parameter) continue;
        grads.emplace(n.name, n.has_grad ? n.grad : TensorT(n.value.shape(), T{0}));
    }
    return grads;
}

template <typename T>
void BasicGraph<T>::backprop_node(std::size_t index) {
    // Reference into nodes_ stays valid: no nodes are added during backward.
    Node& node = nodes_[index];
    const TensorT& g = node.grad;
    auto needs = [&](std::size_t k) { return nodes_[node.inputs[k].index].requires_grad; };
    auto val = [&](std::size_t k) -> const TensorT& { return nodes_[node.inputs[k].index].value; };
    auto slot = [&](std::size_t k) -> TensorT& { return grad_slot(node.inputs[k]); };

    switch (node.op) {
        case Op::Add:
        case Op::Sub: {
            if (needs(0)) {
                auto d = slot(0).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                auto d = slot(1).data();
                if (node.op == Op::Add) {
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                } else {
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                }
            }
            return;
        }
        case Op::Mul: {
            if (needs(0)) {
                auto d = slot(0).data();
                const TensorT& b = val(1);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b[i];
            }
            if (needs(1)) {
                auto d = slot(1).data();
                const TensorT& a = val(0);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a[i];
            }
            return;
        }
        case Op::Scale: {
            auto d = slot(0).data();
            const T f = static_cast<T>(node.scalar);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * f;
            return;
        }
        case Op::MatMul: {
            const TensorT& a = val(0);
            const TensorT& b = val(1);
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            if (needs(0)) {
                TensorT& da = slot(0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = 0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b[p * n + j];
                        da[i * k + p] += acc;
                    }
                }
            }
            if (needs(1)) {
                TensorT& db = slot(1);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = a[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            return;
        }
        case Op::Conv2d: {
            const TensorT& x = val(0);
            const TensorT& w = val(1);
            const ConvDims d = conv_dims(x, w, node.padding, [](const std::string&) {});
            const ptrdiff_t rows = d.Cin * d.K * d.K, cols = d.N * d.OH * d.OW, plane = d.OH * d.OW;
            // Output gradient as [Cout, N*OH*OW].
            std::vector<T> gmat(static_cast<std::size_t>(d.Cout * cols));
            for (ptrdiff_t n = 0; n < d.N; ++n) {
                for (ptrdiff_t co = 0; co < d.Cout; ++co) {
                    std::copy_n(&g[(n * d.Cout + co) * plane], plane, &gmat[co * cols + n * plane]);
                }
            }
            if (node.inputs.size() == 3 && needs(2)) {
                TensorT& db = slot(2);
                for (ptrdiff_t co = 0; co < d.Cout; ++co) {
                    T acc = 0;
                    for (ptrdiff_t j = 0; j < cols; ++j) acc += gmat[co * cols + j];
                    db[co] += acc;
                }
            }
            if (needs(1)) gemm_nt(d.Cout, rows, cols, gmat.data(), node.cache.data(), slot(1).data().data());
            if (needs(0)) {
                std::vector<T> dcol(static_cast<std::size_t>(rows * cols), T{0});
                gemm_tn(rows, cols, d.Cout, w.data().data(), gmat.data(), dcol.data());
                col2im(dcol.data(), d, slot(0).data().data());
            }
            return;
        }
        case Op::Upsample2x: {
            TensorT& dx = slot(0);
            const std::size_t NC = dx.dim(0) * dx.dim(1), H = dx.dim(2), W = dx.dim(3);
            for (std::size_t p = 0; p < NC; ++p) {
                const T* go = &g[p * 4 * H * W];
                T* d = &dx[p * H * W];
                for (std::size_t oh = 0; oh < 2 * H; ++oh) {
                    for (std::size_t ow = 0; ow < 2 * W; ++ow) d[(oh / 2) * W + ow / 2] += go[oh * 2 * W + ow];
                }
            }
            return;
        }
        case Op::AvgPool2x: {
            TensorT& dx = slot(0);
            const std::size_t NC = dx.dim(0) * dx.dim(1), H = dx.dim(2), W = dx.dim(3);
            const std::size_t OH = H / 2, OW = W / 2;
            for (std::size_t p = 0; p < NC; ++p) {
                const T* go = &g[p * OH * OW];
                T* d = &dx[p * H * W];
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const T q = go[oh * OW + ow] * T(0.25);
                        T* s = d + 2 * oh * W + 2 * ow;
                        s[0] += q;
                        s[1] += q;
                        s[W] += q;
                        s[W + 1] += q;
                    }
                }
            }
            return;
        }
        case Op::SiLU: {
            const TensorT& x = val(0);
            auto d = slot(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double s = sigmoid(x[i]);
                d[i] += static_cast<T>(g[i] * s * (1.0 + x[i] * (1.0 - s)));
            }
            return;
        }
        case Op::GroupNorm: {
            const TensorT& x = val(0);
            const TensorT& gamma = val(1);
            const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C), G = node.count;
            const std::size_t Cg = C / G, M = Cg * S;
            TensorT* dx = needs(0) ? &slot(0) : nullptr;
            TensorT* dgamma = needs(1) ? &slot(1) : nullptr;
            TensorT* dbeta = needs(2) ? &slot(2) : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t g_ = 0; g_ < G; ++g_) {
                    const std::size_t base = (n * C + g_ * Cg) * S;
                    const double mean = node.aux[2 * (n * G + g_)];
                    const double rstd = node.aux[2 * (n * G + g_) + 1];
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < Cg; ++c) {
                        const std::size_t ch = g_ * Cg + c;
                        double dgam = 0.0, dbet = 0.0;
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t i = base + c * S + s;
                            const double xhat = (x[i] - mean) * rstd;
                            const double dxhat = g[i] * static_cast<double>(gamma[ch]);
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dgam += g[i] * xhat;
                            dbet += g[i];
                        }
                        if (dgamma) (*dgamma)[ch] += static_cast<T>(dgam);
                        if (dbeta) (*dbeta)[ch] += static_cast<T>(dbet);
                    }
                    if (!dx) continue;
                    const double m1 = s1 / static_cast<double>(M), m2 = s2 / static_cast<double>(M);
                    for (std::size_t c = 0; c < Cg; ++c) {
                        const std::size_t ch = g_ * Cg + c;
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t i = base + c * S + s;
                            const double xhat = (x[i] - mean) * rstd;
                            const double dxhat = g[i] * static_cast<double>(gamma[ch]);
                            (*dx)[i] += static_cast<T>(rstd * (dxhat - m1 - xhat * m2));
                        }
                    }
                }
            }
            return;
        }
        case Op::ConcatChannels: {
            const std::size_t N = g.dim(0), Ca = val(0).dim(1), Cb = val(1).dim(1), S = g.dim(2) * g.dim(3);
            for (std::size_t n = 0; n < N; ++n) {
                if (needs(0)) {
                    T* d = &slot(0)[n * Ca * S];
                    const T* src = &g[n * (Ca + Cb) * S];
                    for (std::size_t i = 0; i < Ca * S; ++i) d[i] += src[i];
                }
                if (needs(1)) {
                    T* d = &slot(1)[n * Cb * S];
                    const T* src = &g[(n * (Ca + Cb) + Ca) * S];
                    for (std::size_t i = 0; i < Cb * S; ++i) d[i] += src[i];
                }
            }
            return;
        }
        case Op::MeanSquaredError: {
            const TensorT& a = val(0);
            const TensorT& b = val(1);
            const double f = 2.0 * static_cast<double>(g[0]) / static_cast<double>(a.size());
            if (needs(0)) {
                auto d = slot(0).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(f * (static_cast<double>(a[i]) - b[i]));
            }
            if (needs(1)) {
                auto d = slot(1).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] -= static_cast<T>(f * (static_cast<double>(a[i]) - b[i]));
            }
            return;
        }
        case Op::SinusoidalEmbedding: {
            const TensorT& t = val(0);
            auto d = slot(0).data();
            const std::size_t N = t.size(), D = node.count, P = D / 2;
            for (std::size_t n = 0; n < N; ++n) {
                double acc = 0.0;
                for (std::size_t j = 0; j < P; ++j) {
                    const double f = sinusoidal_frequency(j, P);
                    const double arg = static_cast<double>(t[n]) * f;
                    acc += g[n * D + 2 * j] * f * std::cos(arg) - g[n * D + 2 * j + 1] * f * std::sin(arg);
                }
                d[n] += static_cast<T>(acc);
            }
            return;
        }
        case Op::AddBias: {
            const std::size_t N = g.dim(0), C = g.dim(1), S = g.size() / (N * C);
            if (needs(0)) {
                auto d = slot(0).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                TensorT& db = slot(1);
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* src = &g[(n * C + c) * S];
                        T acc = 0;
                        for (std::size_t s = 0; s < S; ++s) acc += src[s];
                        db[c] += acc;
                    }
                }
            }
            return;
        }
        case Op::AddChannelwise: {
            const std::size_t NC = g.dim(0) * g.dim(1), S = g.dim(2) * g.dim(3);
            if (needs(0)) {
                auto d = slot(0).data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                TensorT& dv = slot(1);
                for (std::size_t p = 0; p < NC; ++p) {
                    const T* src = &g[p * S];
                    T acc = 0;
                    for (std::size_t s = 0; s < S; ++s) acc += src[s];
                    dv[p] += acc;
                }
            }
            return;
        }
        case Op::Reshape: {
            auto d = slot(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
            return;
        }
        case Op::SoftmaxCrossEntropy: {
            const TensorT& z = val(0);
            const std::size_t N = z.dim(0), C = z.dim(1);
            auto d = slot(0).data();
            const double f = static_cast<double>(g[0]) / static_cast<double>(N);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const double onehot = static_cast<int>(c) == node.labels[n] ? 1.0 : 0.0;
                    d[n * C + c] += static_cast<T>(f * (node.aux[n * C + c] - onehot));
                }
            }
            return;
        }
        case Op::Input:
        case Op::Parameter:
        case Op::Constant:
        case Op::Argmax:
            return;
    }
}

template class BasicGraph<float>;
template class BasicGraph<double>;

}  // namespace phoenix
