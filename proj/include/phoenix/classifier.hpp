#pragma once

#include <cstdint>
#include <vector>

#include "phoenix/data.hpp"
#include "phoenix/io.hpp"
#include "phoenix/metrics.hpp"
#include "phoenix/tensor.hpp"

namespace phoenix {

struct ClassifierConfig {
    std::size_t image_channels = 1;
    std::size_t image_side = 8;  // divisible by 4
    std::size_t width = 16;      // first conv width; the second is 2 * width
    std::size_t feature_dim = 64;
    std::size_t num_classes = 4;

    void validate() const;
    friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

struct ClassifierTraining {
    std::size_t epochs = 8;
    std::size_t batch_size = 32;
    double learning_rate = 2e-3;
};

// Stand-in feature network for the sample-quality metrics:
//   conv3x3 -> SiLU -> pool, conv3x3 -> SiLU -> pool, flatten,
//   linear -> SiLU (features), linear (logits).
class EvalClassifier {
   public:
    EvalClassifier() = default;
    EvalClassifier(ClassifierConfig config, TensorMap params, bool trained);

    const ClassifierConfig& config() const { return config_; }
    const TensorMap& params() const { return params_; }
    bool trained() const { return trained_; }

    Matrix logits(const Tensor& images, std::size_t workers = 1) const;
    Matrix probabilities(const Tensor& images, std::size_t workers = 1) const;
    // Penultimate activations, N x feature_dim.
    Matrix features(const Tensor& images, std::size_t workers = 1) const;
    std::vector<int> predict(const Tensor& images, std::size_t workers = 1) const;

    std::vector<CheckpointEntry> to_checkpoint() const;
    // The architecture is recovered from the stored shapes.
    static EvalClassifier from_checkpoint(const std::vector<CheckpointEntry>& entries);

   private:
    Matrix run(const Tensor& images, bool want_features, std::size_t workers) const;
    void require_trained() const;

    ClassifierConfig config_;
    TensorMap params_;
    bool trained_ = false;
};

EvalClassifier init_eval_classifier(const ClassifierConfig& config, std::uint64_t seed);

// Cross-entropy training with Adam over seeded shuffled mini-batches.
EvalClassifier train_eval_classifier(const Dataset& train, const ClassifierTraining& options, std::uint64_t seed);

double classifier_accuracy(const EvalClassifier& classifier, const Dataset& data, std::size_t workers = 1);

enum class FeatureSpace { classifier, pixels };

struct EvaluationOptions {
    FeatureSpace feature_space = FeatureSpace::classifier;
    std::size_t k = 3;
    std::size_t is_splits = 10;
    std::size_t workers = 1;
};

// Full report of `samples` against the reference images and labels.
MetricsReport evaluate_samples(const EvalClassifier& classifier, const Tensor& samples, const Dataset& reference,
                               const EvaluationOptions& options = {});

}  // namespace phoenix
