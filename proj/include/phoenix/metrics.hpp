#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "phoenix/tensor.hpp"

namespace phoenix {

// Dense row-major double matrix for metric kernels.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values);

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static Matrix identity(std::size_t n);
    // Rows are samples: [N, ...] flattened to N x (size / N).
    static Matrix from_tensor(const Tensor& t);
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double trace(const Matrix& a);
double frobenius_norm(const Matrix& a);

struct SymmetricEigen {
    std::vector<double> values;
    Matrix vectors;  // columns are eigenvectors
};

// Cyclic Jacobi rotations. Throws ArgumentError if `m` is not symmetric and
// NumericError if the off-diagonal mass does not vanish.
SymmetricEigen symmetric_eigen(const Matrix& m);

// S with S * S = M, eigenvalues below zero clamped. Throws ArgumentError when
// M is asymmetric or has an eigenvalue below -1e-7 (scaled by ||M||).
Matrix matrix_sqrt_psd(const Matrix& m);

struct FeatureStats {
    std::vector<double> mean;
    Matrix covariance;  // unbiased
    std::size_t count = 0;
};

FeatureStats gaussian_stats(const Matrix& features);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 sqrt(S_a S_b)), with the root taken as
// sqrt(A S_b A), A = sqrt(S_a), which is symmetric and has the same trace.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

struct ScoreSummary {
    double mean = 0.0;
    double std = 0.0;  // population std over splits
};

// exp(mean_x KL(p(y|x) || p(y))) per split; the last split takes the remainder.
ScoreSummary inception_style_score(const Matrix& probs, std::size_t splits = 10);

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
};

// k-th nearest neighbour ball manifolds, Euclidean distance; a point on a
// ball boundary counts as inside.
PrecisionRecall knn_precision_recall(const Matrix& real, const Matrix& generated, std::size_t k = 3,
                                     std::size_t workers = 1);

// 0.5 * sum |p_i - q_i| over histograms normalized to unit mass.
double tv_distance(const std::vector<std::size_t>& p, const std::vector<std::size_t>& q);

struct ClassDistribution {
    std::vector<std::size_t> histogram;
    std::vector<std::size_t> sorted_histogram;  // descending
    double tv_distance = 0.0;
};

// Histogram of predicted labels compared against a reference histogram.
ClassDistribution class_distribution(const std::vector<int>& predicted, const std::vector<std::size_t>& reference);

struct MetricsReport {
    double fid = 0.0;
    double is_mean = 0.0;
    double is_std = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::vector<std::size_t> class_histogram;
    std::vector<std::size_t> sorted_histogram;
    double tv_distance = 0.0;
    std::string feature_space = "classifier";
    std::size_t n_generated = 0;
    std::size_t n_reference = 0;
};

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
// rank,count rows of the descending histogram.
std::string sorted_histogram_csv(const MetricsReport& report);

}  // namespace phoenix
