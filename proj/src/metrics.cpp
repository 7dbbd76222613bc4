#include "phoenix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "phoenix/parallel.hpp"

namespace phoenix {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("matrix data length does not match " + std::to_string(r) + "x" + std::to_string(c));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_tensor(const Tensor& t) {
    const std::size_t n = t.dim(0);
    Matrix m(n, t.size() / n);
    for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = t[i];
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ShapeError("matrix product dimension mismatch");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double v = a(i, k);
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += v * b(k, j);
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    }
    return t;
}

double trace(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(a.rows, a.cols); ++i) s += a(i, i);
    return s;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

namespace {

void require_symmetric(const Matrix& m) {
    if (m.rows != m.cols) throw ArgumentError("matrix is not square");
    const double scale = std::max(1.0, frobenius_norm(m));
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = i + 1; j < m.cols; ++j) {
            if (std::abs(m(i, j) - m(j, i)) > 1e-9 * scale) {
                throw ArgumentError("matrix is not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
}

}  // namespace

SymmetricEigen symmetric_eigen(const Matrix& m) {
    require_symmetric(m);
    const std::size_t n = m.rows;
    Matrix a = m;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
    }
    Matrix v = Matrix::identity(n);
    const double total = std::max(frobenius_norm(a), 1e-300);
    constexpr int kMaxSweeps = 100;
    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        }
        if (std::sqrt(off) <= 1e-13 * total) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged) throw NumericError("Jacobi eigendecomposition did not converge");
    SymmetricEigen out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
    out.vectors = std::move(v);
    return out;
}

Matrix matrix_sqrt_psd(const Matrix& m) {
    const SymmetricEigen e = symmetric_eigen(m);
    const std::size_t n = m.rows;
    const double scale = std::max(1.0, frobenius_norm(m));
    Matrix s(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        double lambda = e.values[k];
        if (lambda < -1e-7 * scale) {
            throw ArgumentError("matrix has negative eigenvalue " + std::to_string(lambda));
        }
        const double r = std::sqrt(std::max(lambda, 0.0));
        if (r == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double vi = e.vectors(i, k) * r;
            for (std::size_t j = 0; j < n; ++j) s(i, j) += vi * e.vectors(j, k);
        }
    }
    return s;
}

FeatureStats gaussian_stats(const Matrix& features) {
    if (features.rows < 2) throw ArgumentError("gaussian_stats needs at least 2 rows");
    const std::size_t n = features.rows, d = features.cols;
    FeatureStats st;
    st.count = n;
    st.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) st.mean[j] += features(i, j);
    }
    for (double& m : st.mean) m /= static_cast<double>(n);
    st.covariance = Matrix(d, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
            const double da = features(i, a) - st.mean[a];
            for (std::size_t b = a; b < d; ++b) st.covariance(a, b) += da * (features(i, b) - st.mean[b]);
        }
    }
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            st.covariance(a, b) /= static_cast<double>(n - 1);
            st.covariance(b, a) = st.covariance(a, b);
        }
    }
    return st;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size()) {
        throw ArgumentError("feature dims differ: " + std::to_string(a.mean.size()) + " vs " +
                            std::to_string(b.mean.size()));
    }
    double mean_term = 0.0;
    for (std::size_t i = 0; i < a.mean.size(); ++i) {
        const double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    const Matrix root_a = matrix_sqrt_psd(a.covariance);
    Matrix inner = matmul(matmul(root_a, b.covariance), root_a);
    for (std::size_t i = 0; i < inner.rows; ++i) {
        for (std::size_t j = i + 1; j < inner.cols; ++j) inner(i, j) = inner(j, i) = 0.5 * (inner(i, j) + inner(j, i));
    }
    const double cross = trace(matrix_sqrt_psd(inner));
    return std::max(0.0, mean_term + trace(a.covariance) + trace(b.covariance) - 2.0 * cross);
}

ScoreSummary inception_style_score(const Matrix& probs, std::size_t splits) {
    const std::size_t n = probs.rows, c = probs.cols;
    if (splits < 1 || n < splits) throw ArgumentError("need at least one row per split");
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (!(probs(i, j) >= 0.0)) throw ArgumentError("probability row " + std::to_string(i) + " has a negative entry");
            s += probs(i, j);
        }
        if (std::abs(s - 1.0) > 1e-6) throw ArgumentError("probability row " + std::to_string(i) + " does not sum to 1");
    }
    const std::size_t base = n / splits;
    std::vector<double> scores;
    for (std::size_t s = 0; s < splits; ++s) {
        const std::size_t first = s * base;
        const std::size_t last = s + 1 == splits ? n : first + base;
        const double m = static_cast<double>(last - first);
        std::vector<double> marginal(c, 0.0);
        for (std::size_t i = first; i < last; ++i) {
            for (std::size_t j = 0; j < c; ++j) marginal[j] += probs(i, j);
        }
        for (double& v : marginal) v /= m;
        double kl = 0.0;
        for (std::size_t i = first; i < last; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                const double p = probs(i, j);
                if (p > 0.0) kl += p * std::log(p / marginal[j]);
            }
        }
        scores.push_back(std::exp(kl / m));
    }
    ScoreSummary out;
    out.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(splits);
    double var = 0.0;
    for (double v : scores) var += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(var / static_cast<double>(splits));
    return out;
}

namespace {

double squared_distance(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.cols; ++d) {
        const double v = a(i, d) - b(j, d);
        s += v * v;
    }
    return s;
}

// Squared distance from each point to its k-th nearest other point.
std::vector<double> kth_radii(const Matrix& set, std::size_t k, std::size_t workers) {
    std::vector<double> radii(set.rows);
    parallel_for(set.rows, workers, [&](std::size_t i) {
        std::vector<double> d;
        d.reserve(set.rows - 1);
        for (std::size_t j = 0; j < set.rows; ++j) {
            if (j != i) d.push_back(squared_distance(set, i, set, j));
        }
        std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
        radii[i] = d[k - 1];
    });
    return radii;
}

double coverage(const Matrix& centers, const std::vector<double>& radii, const Matrix& queries, std::size_t workers) {
    std::vector<char> inside(queries.rows, 0);
    parallel_for(queries.rows, workers, [&](std::size_t q) {
        for (std::size_t c = 0; c < centers.rows; ++c) {
            if (squared_distance(queries, q, centers, c) <= radii[c]) {
                inside[q] = 1;
                return;
            }
        }
    });
    return static_cast<double>(std::count(inside.begin(), inside.end(), 1)) / static_cast<double>(queries.rows);
}

}  // namespace

PrecisionRecall knn_precision_recall(const Matrix& real, const Matrix& generated, std::size_t k, std::size_t workers) {
    if (k < 1) throw ArgumentError("k must be at least 1");
    if (real.rows < k + 1 || generated.rows < k + 1) {
        throw ArgumentError("k-NN manifolds need at least k+1 = " + std::to_string(k + 1) + " points per set");
    }
    if (real.cols != generated.cols) throw ArgumentError("feature dims differ");
    const auto real_radii = kth_radii(real, k, workers);
    const auto gen_radii = kth_radii(generated, k, workers);
    return {.precision = coverage(real, real_radii, generated, workers),
            .recall = coverage(generated, gen_radii, real, workers)};
}

double tv_distance(const std::vector<std::size_t>& p, const std::vector<std::size_t>& q) {
    if (p.size() != q.size()) throw ArgumentError("histograms have different class counts");
    const double sp = static_cast<double>(std::accumulate(p.begin(), p.end(), std::size_t{0}));
    const double sq = static_cast<double>(std::accumulate(q.begin(), q.end(), std::size_t{0}));
    if (sp == 0.0 || sq == 0.0) throw ArgumentError("histogram has zero mass");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] / sp - q[i] / sq);
    return 0.5 * s;
}

ClassDistribution class_distribution(const std::vector<int>& predicted, const std::vector<std::size_t>& reference) {
    ClassDistribution out;
    out.histogram.assign(reference.size(), 0);
    for (int p : predicted) {
        if (p < 0 || static_cast<std::size_t>(p) >= reference.size()) throw ArgumentError("predicted class out of range");
        ++out.histogram[static_cast<std::size_t>(p)];
    }
    out.sorted_histogram = out.histogram;
    std::sort(out.sorted_histogram.begin(), out.sorted_histogram.end(), std::greater<>());
    out.tv_distance = tv_distance(out.histogram, reference);
    return out;
}

std::string report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["fid"] = r.fid;
    j["is_mean"] = r.is_mean;
    j["is_std"] = r.is_std;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["class_histogram"] = r.class_histogram;
    j["sorted_histogram"] = r.sorted_histogram;
    j["tv_distance"] = r.tv_distance;
    j["feature_space"] = r.feature_space;
    j["n_generated"] = r.n_generated;
    j["n_reference"] = r.n_reference;
    return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        MetricsReport r;
        r.fid = j.at("fid").get<double>();
        r.is_mean = j.at("is_mean").get<double>();
        r.is_std = j.at("is_std").get<double>();
        r.precision = j.at("precision").get<double>();
        r.recall = j.at("recall").get<double>();
        r.class_histogram = j.at("class_histogram").get<std::vector<std::size_t>>();
        r.sorted_histogram = j.value("sorted_histogram", std::vector<std::size_t>{});
        r.tv_distance = j.at("tv_distance").get<double>();
        r.feature_space = j.at("feature_space").get<std::string>();
        r.n_generated = j.at("n_generated").get<std::size_t>();
        r.n_reference = j.at("n_reference").get<std::size_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed metrics report: ") + e.what());
    }
}

std::string sorted_histogram_csv(const MetricsReport& report) {
    std::string out = "rank,count\n";
    for (std::size_t i = 0; i < report.sorted_histogram.size(); ++i) {
        out += std::to_string(i + 1) + "," + std::to_string(report.sorted_histogram[i]) + "\n";
    }
    return out;
}

}  // namespace phoenix
