#include "phoenix/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "phoenix/rng.hpp"

namespace phoenix {

namespace {

constexpr std::size_t kCifarRecord = 3073;
constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarPerFile = 10000;
constexpr int kCifarClasses = 10;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

// Sizes of `parts` near-equal pieces of n, larger pieces first.
std::vector<std::size_t> slice_sizes(std::size_t n, std::size_t parts) {
    std::vector<std::size_t> sizes(parts, n / parts);
    for (std::size_t i = 0; i < n % parts; ++i) ++sizes[i];
    return sizes;
}

void check_labels(std::span<const int> labels, int num_classes) {
    if (num_classes < 1) throw ArgumentError("num_classes must be positive");
    for (int l : labels) {
        if (l < 0 || l >= num_classes) throw ArgumentError("label " + std::to_string(l) + " out of range");
    }
}

}  // namespace

void Dataset::validate() const {
    if (images.rank() != 4) throw ArgumentError("dataset images must be [N,C,H,W]");
    if (images.dim(0) != labels.size()) throw ArgumentError("dataset image and label counts differ");
    check_labels(labels, num_classes);
    for (float v : images.data()) {
        if (!(v >= -1.0f && v <= 1.0f)) throw ArgumentError("dataset pixel outside [-1, 1]");
    }
}

Tensor Dataset::images_at(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ArgumentError("empty index list");
    Shape shape = images.shape();
    const std::size_t per = images.size() / shape[0];
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw ArgumentError("sample index " + std::to_string(indices[i]) + " out of range");
        std::copy_n(images.storage().begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                    out.storage().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.images = images_at(indices);
    out.num_classes = num_classes;
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels[i]);
    return out;
}

std::vector<std::size_t> class_counts(std::span<const int> labels, int num_classes) {
    check_labels(labels, num_classes);
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    return counts;
}

Dataset read_cifar10_batch(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
        throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                          " is not a whole number of 3073-byte records; truncated record at byte offset " +
                          std::to_string(bytes.size() / kCifarRecord * kCifarRecord));
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    Dataset d;
    d.num_classes = kCifarClasses;
    d.images = Tensor({n, 3, 32, 32});
    d.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * kCifarRecord;
        if (bytes[off] >= kCifarClasses) {
            throw FormatError(path.string() + ": label byte " + std::to_string(bytes[off]) + " at byte offset " +
                              std::to_string(off));
        }
        d.labels[r] = bytes[off];
        for (std::size_t p = 0; p < kCifarPixels; ++p) {
            d.images[r * kCifarPixels + p] = static_cast<float>(bytes[off + 1 + p] / 127.5 - 1.0);
        }
    }
    return d;
}

Dataset load_cifar10(const std::filesystem::path& directory, bool train) {
    std::vector<std::string> files;
    if (train) {
        for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
        files.push_back("test_batch.bin");
    }
    std::vector<Dataset> parts;
    for (const auto& f : files) {
        const auto path = directory / f;
        if (!std::filesystem::exists(path)) throw ConfigError("missing CIFAR-10 file " + path.string());
        const auto size = std::filesystem::file_size(path);
        if (size != kCifarPerFile * kCifarRecord) {
            throw FormatError(path.string() + ": expected " + std::to_string(kCifarPerFile * kCifarRecord) +
                              " bytes, found " + std::to_string(size) + "; mismatch at byte offset " +
                              std::to_string(std::min<std::uintmax_t>(size, kCifarPerFile * kCifarRecord)));
        }
        parts.push_back(read_cifar10_batch(path));
    }
    Dataset out;
    out.num_classes = kCifarClasses;
    out.images = Tensor({parts.size() * kCifarPerFile, 3, 32, 32});
    std::size_t at = 0;
    for (const auto& p : parts) {
        std::copy(p.images.storage().begin(), p.images.storage().end(), out.images.storage().begin() + at);
        at += p.images.size();
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

Tensor toy_template(int cls, std::size_t side) {
    if (cls < 0 || cls >= kToyTemplateCount) throw ArgumentError("toy class " + std::to_string(cls) + " has no template");
    if (side < 4) throw ArgumentError("toy images need side >= 4");
    const double s = static_cast<double>(side);
    const std::size_t q = std::max<std::size_t>(side / 4, 1);
    Tensor img({1, side, side}, -1.0f);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double cx = x + 0.5 - s / 2, cy = y + 0.5 - s / 2;
            bool on = false;
            switch (cls) {
                case 0: on = x >= q && x < side - q && y >= q && y < side - q; break;
                case 1: on = std::abs(cx) < s / 8 + 0.5 || std::abs(cy) < s / 8 + 0.5; break;
                case 2: on = std::abs(static_cast<double>(x) - static_cast<double>(y)) <= s / 8; break;
                case 3: {
                    const double r = std::hypot(cx, cy);
                    on = r >= 0.25 * s && r <= 0.45 * s;
                    break;
                }
                case 4: on = (y / q) % 2 == 0; break;
                case 5: on = (x / q) % 2 == 0; break;
                case 6: on = (x / q + y / q) % 2 == 0; break;
                case 7: on = y > x; break;
            }
            if (on) img[y * side + x] = 1.0f;
        }
    }
    return img;
}

Dataset make_toy_dataset(int classes, std::size_t per_class, std::size_t side, std::uint64_t seed) {
    if (classes < 2) throw ArgumentError("toy dataset needs at least 2 classes");
    if (classes > kToyTemplateCount) {
        throw ArgumentError("toy dataset has " + std::to_string(kToyTemplateCount) + " templates, asked for " +
                            std::to_string(classes));
    }
    if (per_class < 1) throw ArgumentError("toy dataset needs per_class >= 1");
    std::vector<Tensor> templates;
    for (int c = 0; c < classes; ++c) templates.push_back(toy_template(c, side));

    const std::size_t n = static_cast<std::size_t>(classes) * per_class;
    const std::size_t per = side * side;
    Dataset d;
    d.num_classes = classes;
    d.images = Tensor({n, 1, side, side});
    d.labels.resize(n);
    Rng rng(derive_seed(seed, {kDataStream}));
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i / per_class);
        d.labels[i] = c;
        const auto dx = static_cast<std::ptrdiff_t>(rng.below(3)) - 1;
        const auto dy = static_cast<std::ptrdiff_t>(rng.below(3)) - 1;
        const Tensor& tpl = templates[static_cast<std::size_t>(c)];
        const auto sd = static_cast<std::ptrdiff_t>(side);
        for (std::ptrdiff_t y = 0; y < sd; ++y) {
            for (std::ptrdiff_t x = 0; x < sd; ++x) {
                const std::ptrdiff_t sx = x - dx, sy = y - dy;
                const float base = (sx >= 0 && sx < sd && sy >= 0 && sy < sd)
                                       ? tpl[static_cast<std::size_t>(sy * sd + sx)]
                                       : -1.0f;
                const double v = base + 0.1 * rng.normal();
                d.images[i * per + static_cast<std::size_t>(y * sd + x)] =
                    static_cast<float>(std::clamp(v, -1.0, 1.0));
            }
        }
    }
    return d;
}

const char* mode_name(PartitionMode mode) { return mode == PartitionMode::iid ? "iid" : "label_skew"; }

PartitionPlan partition_iid(std::size_t n, std::size_t client_count, std::uint64_t seed) {
    if (client_count < 1) throw ArgumentError("need at least one client");
    if (client_count > n) {
        throw ArgumentError("client count " + std::to_string(client_count) + " exceeds sample count " +
                            std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {kPartitionStream, 0}));
    rng.shuffle(order);
    PartitionPlan plan;
    plan.mode = PartitionMode::iid;
    std::size_t at = 0;
    for (std::size_t size : slice_sizes(n, client_count)) {
        std::vector<std::size_t> part(order.begin() + static_cast<std::ptrdiff_t>(at),
                                      order.begin() + static_cast<std::ptrdiff_t>(at + size));
        std::sort(part.begin(), part.end());
        plan.assignments.push_back(std::move(part));
        at += size;
    }
    return plan;
}

PartitionPlan partition_iid(const Dataset& dataset, std::size_t client_count, std::uint64_t seed) {
    return partition_iid(dataset.size(), client_count, seed);
}

PartitionPlan partition_label_skew(std::span<const int> labels, int num_classes, std::size_t client_count,
                                   std::size_t classes_per_client, std::uint64_t seed) {
    check_labels(labels, num_classes);
    if (client_count < 1 || classes_per_client < 1) throw ArgumentError("need clients and classes_per_client >= 1");
    PartitionPlan plan;
    plan.mode = PartitionMode::label_skew;
    std::vector<std::size_t> sorted(labels.size());
    std::iota(sorted.begin(), sorted.end(), std::size_t{0});
    std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });

    if (client_count == 1) {
        plan.assignments.push_back(std::vector<std::size_t>(labels.size()));
        std::iota(plan.assignments[0].begin(), plan.assignments[0].end(), std::size_t{0});
        std::set<int> present(labels.begin(), labels.end());
        plan.label_bound_waived = present.size() > classes_per_client;
        return plan;
    }
    std::set<int> present(labels.begin(), labels.end());
    if (client_count * classes_per_client < present.size()) {
        throw ArgumentError(std::to_string(client_count) + " clients x " + std::to_string(classes_per_client) +
                            " classes cannot cover " + std::to_string(present.size()) + " classes");
    }
    const std::size_t shard_count = client_count * classes_per_client;
    if (shard_count > labels.size()) throw ArgumentError("more shards than samples");

    std::vector<std::vector<std::size_t>> shards;
    std::vector<std::set<int>> shard_labels;
    std::size_t at = 0;
    for (std::size_t size : slice_sizes(labels.size(), shard_count)) {
        shards.emplace_back(sorted.begin() + static_cast<std::ptrdiff_t>(at),
                            sorted.begin() + static_cast<std::ptrdiff_t>(at + size));
        std::set<int> ls;
        for (std::size_t i : shards.back()) ls.insert(labels[i]);
        shard_labels.push_back(std::move(ls));
        at += size;
    }

    Rng rng(derive_seed(seed, {kPartitionStream, 1}));
    std::vector<std::size_t> order(shard_count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    constexpr int kAttempts = 10000;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        rng.shuffle(order);
        bool feasible = true;
        for (std::size_t c = 0; c < client_count && feasible; ++c) {
            std::set<int> ls;
            for (std::size_t s = 0; s < classes_per_client; ++s) {
                const auto& l = shard_labels[order[c * classes_per_client + s]];
                ls.insert(l.begin(), l.end());
            }
            feasible = ls.size() <= classes_per_client;
        }
        if (!feasible) continue;
        for (std::size_t c = 0; c < client_count; ++c) {
            std::vector<std::size_t> part;
            for (std::size_t s = 0; s < classes_per_client; ++s) {
                const auto& sh = shards[order[c * classes_per_client + s]];
                part.insert(part.end(), sh.begin(), sh.end());
            }
            std::sort(part.begin(), part.end());
            plan.assignments.push_back(std::move(part));
        }
        return plan;
    }
    throw ArgumentError("no shard assignment keeps every client within " + std::to_string(classes_per_client) +
                        " classes");
}

PartitionPlan partition_label_skew(const Dataset& dataset, std::size_t client_count, std::size_t classes_per_client,
                                   std::uint64_t seed) {
    return partition_label_skew(dataset.labels, dataset.num_classes, client_count, classes_per_client, seed);
}

SharingPlan data_sharing_split(std::span<const int> labels, int num_classes, std::size_t client_count,
                               double beta_pct, double alpha_pct, std::size_t classes_per_client, std::uint64_t seed) {
    check_labels(labels, num_classes);
    if (!(beta_pct > 0.0)) throw ArgumentError("beta_pct must be positive");
    if (!(alpha_pct >= 0.0 && alpha_pct <= 100.0)) throw ArgumentError("alpha_pct must lie in [0, 100]");

    SharingPlan plan;
    plan.beta_pct = beta_pct;
    plan.alpha_pct = alpha_pct;
    plan.seed = seed;

    // Stratified 80/20: one fifth of each class (rounded) goes to the server.
    Rng split_rng(derive_seed(seed, {kPartitionStream, 2}));
    for (int c = 0; c < num_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == c) members.push_back(i);
        }
        split_rng.shuffle(members);
        const std::size_t to_server = (members.size() + 2) / 5;
        plan.server_pool.insert(plan.server_pool.end(), members.begin(),
                                members.begin() + static_cast<std::ptrdiff_t>(to_server));
        plan.client_pool.insert(plan.client_pool.end(), members.begin() + static_cast<std::ptrdiff_t>(to_server),
                                members.end());
    }
    std::sort(plan.server_pool.begin(), plan.server_pool.end());
    std::sort(plan.client_pool.begin(), plan.client_pool.end());

    const auto g_size =
        static_cast<std::size_t>(std::llround(beta_pct * static_cast<double>(plan.client_pool.size()) / 100.0));
    if (g_size > plan.server_pool.size()) {
        throw ArgumentError("beta_pct " + std::to_string(beta_pct) + " needs " + std::to_string(g_size) +
                            " shared samples but the server pool holds " + std::to_string(plan.server_pool.size()));
    }
    if (g_size == 0) throw ArgumentError("beta_pct yields an empty shared pool");

    std::vector<int> pool_labels;
    pool_labels.reserve(plan.client_pool.size());
    for (std::size_t i : plan.client_pool) pool_labels.push_back(labels[i]);
    const PartitionPlan skew = partition_label_skew(pool_labels, num_classes, client_count, classes_per_client, seed);
    for (const auto& local : skew.assignments) {
        std::vector<std::size_t> part;
        part.reserve(local.size());
        for (std::size_t j : local) part.push_back(plan.client_pool[j]);
        plan.client_part.push_back(std::move(part));
    }

    Rng pool_rng(derive_seed(seed, {kPartitionStream, 3}));
    std::vector<std::size_t> s = plan.server_pool;
    pool_rng.shuffle(s);
    plan.shared_pool.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(g_size));
    std::sort(plan.shared_pool.begin(), plan.shared_pool.end());

    const auto a_size = static_cast<std::size_t>(std::llround(alpha_pct * static_cast<double>(g_size) / 100.0));
    std::vector<std::size_t> g = plan.shared_pool;
    pool_rng.shuffle(g);
    plan.merged_subset.assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(a_size));
    std::sort(plan.merged_subset.begin(), plan.merged_subset.end());

    for (const auto& part : plan.client_part) {
        std::vector<std::size_t> merged;
        std::merge(part.begin(), part.end(), plan.merged_subset.begin(), plan.merged_subset.end(),
                   std::back_inserter(merged));
        plan.merged_clients.push_back(std::move(merged));
    }
    return plan;
}

SharingPlan data_sharing_split(const Dataset& dataset, std::size_t client_count, double beta_pct, double alpha_pct,
                               std::size_t classes_per_client, std::uint64_t seed) {
    return data_sharing_split(dataset.labels, dataset.num_classes, client_count, beta_pct, alpha_pct,
                              classes_per_client, seed);
}

PlanFile to_plan_file(const PartitionPlan& plan, std::uint64_t seed) {
    return PlanFile{.mode = mode_name(plan.mode), .clients = plan.assignments, .seed = seed};
}

PlanFile to_plan_file(const SharingPlan& plan) {
    return PlanFile{.mode = "data_sharing",
                    .clients = plan.merged_clients,
                    .shared_pool = plan.shared_pool,
                    .beta_pct = plan.beta_pct,
                    .alpha_pct = plan.alpha_pct,
                    .seed = plan.seed};
}

std::string plan_to_json(const PlanFile& plan) {
    nlohmann::ordered_json j;
    j["mode"] = plan.mode;
    j["clients"] = plan.clients;
    j["shared_pool"] = plan.shared_pool;
    j["beta_pct"] = plan.beta_pct;
    j["alpha_pct"] = plan.alpha_pct;
    j["seed"] = plan.seed;
    return j.dump() + "\n";
}

PlanFile plan_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        PlanFile p;
        p.mode = j.at("mode").get<std::string>();
        p.clients = j.at("clients").get<std::vector<std::vector<std::size_t>>>();
        p.shared_pool = j.at("shared_pool").get<std::vector<std::size_t>>();
        p.beta_pct = j.at("beta_pct").get<double>();
        p.alpha_pct = j.at("alpha_pct").get<double>();
        p.seed = j.at("seed").get<std::uint64_t>();
        if (p.mode != "iid" && p.mode != "label_skew" && p.mode != "data_sharing") {
            throw FormatError("unknown plan mode '" + p.mode + "'");
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed plan JSON: ") + e.what());
    }
}

}  // namespace phoenix
