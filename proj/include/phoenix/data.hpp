#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "phoenix/tensor.hpp"

namespace phoenix {

// Labelled images in [-1, 1], shape [N, C, H, W].
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    // Throws ArgumentError if the fields disagree or values are out of range.
    void validate() const;
    // Rows at `indices`, in that order.
    Dataset subset(std::span<const std::size_t> indices) const;
    Tensor images_at(std::span<const std::size_t> indices) const;
};

std::vector<std::size_t> class_counts(std::span<const int> labels, int num_classes);

// One CIFAR-10 binary batch: records of 1 label byte + 3072 channel-major
// pixel bytes. Pixels map to v / 127.5 - 1.
Dataset read_cifar10_batch(const std::filesystem::path& path);

// Reads data_batch_1..5.bin (train) or test_batch.bin (test) from `directory`.
// Each file must hold exactly 10000 records.
Dataset load_cifar10(const std::filesystem::path& directory, bool train);

inline constexpr int kToyTemplateCount = 8;

// Clean template for class `cls` on a side x side grid, values in {-1, 1}.
// Classes in order: filled square, cross, diagonal stripe, ring, horizontal
// bars, vertical bars, checkerboard, lower triangle.
Tensor toy_template(int cls, std::size_t side);

// per_class jittered copies of each template (shift of up to one pixel per
// axis, additive N(0, 0.1^2) noise, clamped), grouped by class.
Dataset make_toy_dataset(int classes, std::size_t per_class, std::size_t side, std::uint64_t seed);

enum class PartitionMode { iid, label_skew };

const char* mode_name(PartitionMode mode);

struct PartitionPlan {
    PartitionMode mode = PartitionMode::iid;
    // Sample indices per client, ascending.
    std::vector<std::vector<std::size_t>> assignments;
    // Set when the per-client label bound could not apply (a single client).
    bool label_bound_waived = false;

    std::size_t client_count() const { return assignments.size(); }
};

// Seeded shuffle of [0, n) cut into client_count contiguous slices; the first
// n % client_count clients receive one extra sample.
PartitionPlan partition_iid(std::size_t n, std::size_t client_count, std::uint64_t seed);
PartitionPlan partition_iid(const Dataset& dataset, std::size_t client_count, std::uint64_t seed);

// Indices sorted by label are cut into client_count * classes_per_client
// shards (sizes differ by at most one, larger first). Shards are dealt to
// clients in a seeded order, redrawn until no client spans more than
// classes_per_client labels.
PartitionPlan partition_label_skew(std::span<const int> labels, int num_classes, std::size_t client_count,
                                   std::size_t classes_per_client, std::uint64_t seed);
PartitionPlan partition_label_skew(const Dataset& dataset, std::size_t client_count, std::size_t classes_per_client,
                                   std::uint64_t seed);

struct SharingPlan {
    // Client pool C (80%) and server pool S (20%), label-stratified.
    std::vector<std::size_t> client_pool;
    std::vector<std::size_t> server_pool;
    // Label-skew partition of C.
    std::vector<std::vector<std::size_t>> client_part;
    // G, drawn from S; also the warmup set.
    std::vector<std::size_t> shared_pool;
    // The alpha-fraction of G merged into every client.
    std::vector<std::size_t> merged_subset;
    std::vector<std::vector<std::size_t>> merged_clients;
    double beta_pct = 0.0;
    double alpha_pct = 0.0;
    std::uint64_t seed = 0;

    const std::vector<std::size_t>& warmup_indices() const { return shared_pool; }
    std::size_t client_count() const { return client_part.size(); }
};

// |G| = round(beta_pct / 100 * |C|), merged subset = round(alpha_pct / 100 * |G|).
SharingPlan data_sharing_split(std::span<const int> labels, int num_classes, std::size_t client_count,
                               double beta_pct, double alpha_pct, std::size_t classes_per_client, std::uint64_t seed);
SharingPlan data_sharing_split(const Dataset& dataset, std::size_t client_count, double beta_pct, double alpha_pct,
                               std::size_t classes_per_client, std::uint64_t seed);

// Plan file contents as persisted by the CLI. `clients` holds the lists each
// client trains on (merged lists for data sharing).
struct PlanFile {
    std::string mode;
    std::vector<std::vector<std::size_t>> clients;
    std::vector<std::size_t> shared_pool;
    double beta_pct = 0.0;
    double alpha_pct = 0.0;
    std::uint64_t seed = 0;
};

PlanFile to_plan_file(const PartitionPlan& plan, std::uint64_t seed);
PlanFile to_plan_file(const SharingPlan& plan);

std::string plan_to_json(const PlanFile& plan);
// Throws FormatError on malformed documents.
PlanFile plan_from_json(const std::string& text);

}  // namespace phoenix
