#include "phoenix/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "phoenix/graph.hpp"
#include "phoenix/optim.hpp"
#include "phoenix/parallel.hpp"
#include "phoenix/rng.hpp"

namespace phoenix {

namespace {

constexpr std::size_t kEvalChunk = 256;

struct Heads {
    NodeId features;
    NodeId logits;
};

Heads build_classifier_graph(Graph& g, const ClassifierConfig& c, NodeId x, std::size_t n) {
    NodeId h = g.conv2d(x, g.parameter("conv1.weight"), g.parameter("conv1.bias"));
    h = g.avg_pool2x(g.silu(h));
    h = g.conv2d(h, g.parameter("conv2.weight"), g.parameter("conv2.bias"));
    h = g.avg_pool2x(g.silu(h));
    const std::size_t q = c.image_side / 4;
    h = g.reshape(h, {n, 2 * c.width * q * q});
    NodeId f = g.silu(g.add_bias(g.matmul(h, g.parameter("fc.weight")), g.parameter("fc.bias")));
    NodeId logits = g.add_bias(g.matmul(f, g.parameter("head.weight")), g.parameter("head.bias"));
    return {f, logits};
}

struct Spec {
    const char* name;
    Shape shape;
    std::size_t fan_in;
};

std::vector<Spec> classifier_specs(const ClassifierConfig& c) {
    const std::size_t q = c.image_side / 4;
    const std::size_t flat = 2 * c.width * q * q;
    return {
        {"conv1.weight", {c.width, c.image_channels, 3, 3}, c.image_channels * 9},
        {"conv1.bias", {c.width}, 0},
        {"conv2.weight", {2 * c.width, c.width, 3, 3}, c.width * 9},
        {"conv2.bias", {2 * c.width}, 0},
        {"fc.weight", {flat, c.feature_dim}, flat},
        {"fc.bias", {c.feature_dim}, 0},
        {"head.weight", {c.feature_dim, c.num_classes}, c.feature_dim},
        {"head.bias", {c.num_classes}, 0},
    };
}

}  // namespace

void ClassifierConfig::validate() const {
    if (image_channels < 1 || width < 1 || feature_dim < 1) throw ArgumentError("classifier dims must be positive");
    if (image_side < 4 || image_side % 4 != 0) throw ArgumentError("classifier image side must be a multiple of 4");
    if (num_classes < 2) throw ArgumentError("classifier needs at least 2 classes");
}

EvalClassifier::EvalClassifier(ClassifierConfig config, TensorMap params, bool trained)
    : config_(config), params_(std::move(params)), trained_(trained) {
    config_.validate();
    for (const auto& s : classifier_specs(config_)) {
        auto it = params_.find(s.name);
        if (it == params_.end()) throw ArgumentError(std::string("classifier parameter '") + s.name + "' missing");
        if (it->second.shape() != s.shape) {
            throw ShapeError(std::string("classifier parameter '") + s.name + "' has shape " +
                             shape_string(it->second.shape()) + ", expected " + shape_string(s.shape));
        }
    }
    if (params_.size() != classifier_specs(config_).size()) throw ArgumentError("classifier has unexpected parameters");
}

void EvalClassifier::require_trained() const {
    if (!trained_) throw UsageError("eval classifier has not been trained");
}

Matrix EvalClassifier::run(const Tensor& images, bool want_features, std::size_t workers) const {
    require_trained();
    const Shape expected{images.shape().empty() ? 0 : images.dim(0), config_.image_channels, config_.image_side,
                         config_.image_side};
    if (images.shape() != expected) {
        throw ShapeError("classifier input " + shape_string(images.shape()) + " does not match " +
                         shape_string(expected));
    }
    const std::size_t n = images.dim(0);
    const std::size_t per = images.size() / n;
    const std::size_t width = want_features ? config_.feature_dim : config_.num_classes;
    Matrix out(n, width);
    const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
    parallel_for(chunks, workers, [&](std::size_t chunk) {
        const std::size_t first = chunk * kEvalChunk;
        const std::size_t m = std::min(kEvalChunk, n - first);
        Tensor x({m, config_.image_channels, config_.image_side, config_.image_side});
        std::copy_n(images.storage().begin() + static_cast<std::ptrdiff_t>(first * per), m * per, x.storage().begin());
        Graph g;
        NodeId xn = g.input("__x");
        const Heads heads = build_classifier_graph(g, config_, xn, m);
        g.set_output(want_features ? heads.features : heads.logits);
        TensorMap bindings = params_;
        bindings.emplace("__x", std::move(x));
        const Tensor& y = g.forward(bindings);
        for (std::size_t i = 0; i < m * width; ++i) out.data[first * width + i] = y[i];
    });
    return out;
}

Matrix EvalClassifier::logits(const Tensor& images, std::size_t workers) const { return run(images, false, workers); }

Matrix EvalClassifier::features(const Tensor& images, std::size_t workers) const { return run(images, true, workers); }

Matrix EvalClassifier::probabilities(const Tensor& images, std::size_t workers) const {
    Matrix p = logits(images, workers);
    for (std::size_t i = 0; i < p.rows; ++i) {
        double mx = p(i, 0);
        for (std::size_t j = 1; j < p.cols; ++j) mx = std::max(mx, p(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < p.cols; ++j) s += (p(i, j) = std::exp(p(i, j) - mx));
        for (std::size_t j = 0; j < p.cols; ++j) p(i, j) /= s;
    }
    return p;
}

std::vector<int> EvalClassifier::predict(const Tensor& images, std::size_t workers) const {
    const Matrix l = logits(images, workers);
    std::vector<int> out(l.rows);
    for (std::size_t i = 0; i < l.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < l.cols; ++j) {
            if (l(i, j) > l(i, best)) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<CheckpointEntry> EvalClassifier::to_checkpoint() const {
    std::vector<CheckpointEntry> out;
    for (const auto& s : classifier_specs(config_)) out.push_back({s.name, params_.at(s.name), false});
    return out;
}

EvalClassifier EvalClassifier::from_checkpoint(const std::vector<CheckpointEntry>& entries) {
    TensorMap params;
    for (const auto& e : entries) {
        if (!params.emplace(e.name, e.tensor).second) throw FormatError("duplicate classifier record '" + e.name + "'");
    }
    auto shape_of = [&](const char* name) -> const Shape& {
        auto it = params.find(name);
        if (it == params.end()) throw FormatError(std::string("classifier checkpoint lacks '") + name + "'");
        return it->second.shape();
    };
    const Shape& c1 = shape_of("conv1.weight");
    const Shape& fc = shape_of("fc.weight");
    const Shape& head = shape_of("head.weight");
    if (c1.size() != 4 || fc.size() != 2 || head.size() != 2) throw FormatError("classifier checkpoint has bad ranks");
    ClassifierConfig c;
    c.width = c1[0];
    c.image_channels = c1[1];
    c.feature_dim = fc[1];
    c.num_classes = head[1];
    const std::size_t cells = fc[0] / (2 * c.width);
    const auto q = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cells))));
    if (q * q * 2 * c.width != fc[0]) throw FormatError("classifier checkpoint has inconsistent fc.weight");
    c.image_side = 4 * q;
    try {
        return EvalClassifier(c, std::move(params), true);
    } catch (const Error& e) {
        throw FormatError(std::string("classifier checkpoint: ") + e.what());
    }
}

EvalClassifier init_eval_classifier(const ClassifierConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, {kClassifierStream, 0}));
    TensorMap params;
    for (const auto& s : classifier_specs(config)) {
        Tensor t(s.shape);
        if (s.fan_in > 0) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
            for (float& v : t.data()) v = static_cast<float>(scale * rng.normal());
        }
        params.emplace(s.name, std::move(t));
    }
    return EvalClassifier(config, std::move(params), false);
}

EvalClassifier train_eval_classifier(const Dataset& train, const ClassifierTraining& options, std::uint64_t seed) {
    if (train.size() == 0) throw ArgumentError("classifier training set is empty");
    const std::set<int> present(train.labels.begin(), train.labels.end());
    if (present.size() < 2) throw ArgumentError("classifier training set holds a single class");
    if (options.batch_size < 1) throw ArgumentError("batch size must be positive");
    const Shape sample = train.sample_shape();
    ClassifierConfig config;
    config.image_channels = sample.at(0);
    config.image_side = sample.at(1);
    config.num_classes = static_cast<std::size_t>(train.num_classes);
    EvalClassifier init = init_eval_classifier(config, seed);
    TensorMap params = init.params();
    AdamState adam;
    adam.learning_rate = options.learning_rate;
    Rng rng(derive_seed(seed, {kClassifierStream, 1}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t first = 0; first < order.size(); first += options.batch_size) {
            const std::size_t m = std::min(options.batch_size, order.size() - first);
            const std::span<const std::size_t> idx(order.data() + first, m);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(train.labels[i]);
            Graph g;
            NodeId x = g.constant(train.images_at(idx), "x");
            const Heads heads = build_classifier_graph(g, config, x, m);
            g.set_output(g.softmax_cross_entropy(heads.logits, std::move(labels)));
            g.forward(params);
            adam_step(params, g.backward(), adam);
        }
    }
    return EvalClassifier(config, std::move(params), true);
}

double classifier_accuracy(const EvalClassifier& classifier, const Dataset& data, std::size_t workers) {
    const auto pred = classifier.predict(data.images, workers);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

MetricsReport evaluate_samples(const EvalClassifier& classifier, const Tensor& samples, const Dataset& reference,
                               const EvaluationOptions& options) {
    if (samples.rank() != 4 || reference.images.rank() != 4 ||
        !std::equal(samples.shape().begin() + 1, samples.shape().end(), reference.images.shape().begin() + 1)) {
        throw ShapeError("sample shape " + shape_string(samples.shape()) + " does not match reference shape " +
                         shape_string(reference.images.shape()));
    }
    MetricsReport r;
    r.n_generated = samples.dim(0);
    r.n_reference = reference.size();
    Matrix real_f, gen_f;
    if (options.feature_space == FeatureSpace::classifier) {
        r.feature_space = "classifier";
        real_f = classifier.features(reference.images, options.workers);
        gen_f = classifier.features(samples, options.workers);
    } else {
        r.feature_space = "pixels";
        real_f = Matrix::from_tensor(reference.images);
        gen_f = Matrix::from_tensor(samples);
    }
    r.fid = frechet_distance(gaussian_stats(real_f), gaussian_stats(gen_f));
    const PrecisionRecall pr = knn_precision_recall(real_f, gen_f, options.k, options.workers);
    r.precision = pr.precision;
    r.recall = pr.recall;
    const ScoreSummary is =
        inception_style_score(classifier.probabilities(samples, options.workers),
                              std::min<std::size_t>(options.is_splits, samples.dim(0)));
    r.is_mean = is.mean;
    r.is_std = is.std;
    const ClassDistribution cd =
        class_distribution(classifier.predict(samples, options.workers), class_counts(reference.labels, reference.num_classes));
    r.class_histogram = cd.histogram;
    r.sorted_histogram = cd.sorted_histogram;
    r.tv_distance = cd.tv_distance;
    return r;
}

}  // namespace phoenix
