#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "agrigen/nets.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Feature-distribution statistics: mean, unbiased covariance, sample count.
// ----------------------------------------------------------------------------

struct FeatureStats {
    std::vector<double> mu;
    Mat sigma;
    int64_t n = 0;

    int dim() const { return static_cast<int>(mu.size()); }
};

/// Gaussian moment fit of an n x d feature matrix (n >= 2, unbiased cov).
inline FeatureStats compute_feature_stats(const Tensor& features) {
    if (features.ndim() != 2) throw ShapeError("feature stats expect an n x d matrix");
    const int n = features.dim(0), d = features.dim(1);
    if (n < 2) throw RuntimeError("feature stats need at least 2 samples");
    FeatureStats st;
    st.n = n;
    st.mu.assign(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) st.mu[static_cast<size_t>(j)] += features.at2(i, j);
    for (double& v : st.mu) v /= static_cast<double>(n);
    st.sigma = Mat::Zero(d, d);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd c(d);
        for (int j = 0; j < d; ++j) c[j] = features.at2(i, j) - st.mu[static_cast<size_t>(j)];
        st.sigma += c * c.transpose();
    }
    st.sigma /= static_cast<double>(n - 1);
    return st;
}

/// Frechet distance between two Gaussian feature fits:
/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
/// The cross term is evaluated through the symmetrized product
/// S1^{1/2} S2 S1^{1/2}; eigenvalues below -1e-6 raise a numerics error and
/// small negatives are clamped to zero.
inline double fid(const FeatureStats& real, const FeatureStats& gen) {
    if (real.dim() != gen.dim()) throw ShapeError("fid: feature dimensions differ");
    const int d = real.dim();

    double mean_term = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = real.mu[static_cast<size_t>(j)] - gen.mu[static_cast<size_t>(j)];
        mean_term += diff * diff;
    }

    Mat s1 = 0.5 * (real.sigma + real.sigma.transpose());
    Mat s2 = 0.5 * (gen.sigma + gen.sigma.transpose());

    Eigen::SelfAdjointEigenSolver<Mat> es1(s1);
    if (es1.info() != Eigen::Success) throw NumericsError("fid: eigendecomposition of S1 failed");
    Eigen::VectorXd ev1 = es1.eigenvalues();
    for (int i = 0; i < d; ++i) {
        if (ev1[i] < -1e-6) throw NumericsError("fid: S1 is not positive semi-definite");
        ev1[i] = std::max(0.0, ev1[i]);
    }
    Mat sqrt_s1 = es1.eigenvectors() * ev1.cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();

    Mat inner = sqrt_s1 * s2 * sqrt_s1;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es2(inner);
    if (es2.info() != Eigen::Success) throw NumericsError("fid: eigendecomposition of the product failed");
    double tr_sqrt = 0.0;
    for (int i = 0; i < d; ++i) {
        double ev = es2.eigenvalues()[i];
        if (ev < -1e-6) throw NumericsError("fid: covariance product has a significant negative eigenvalue");
        tr_sqrt += std::sqrt(std::max(0.0, ev));
    }

    const double value = mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

// ----------------------------------------------------------------------------
// Inception Score over class probability rows.
// ----------------------------------------------------------------------------

struct ClassProbabilities {
    Tensor probs;  // n x C rows on the simplex

    void validate() const {
        if (probs.ndim() != 2) throw ShapeError("class probabilities expect an n x C matrix");
        for (int i = 0; i < probs.dim(0); ++i) {
            double s = 0.0;
            for (int c = 0; c < probs.dim(1); ++c) {
                const double p = probs.at2(i, c);
                if (p < 0.0) throw RuntimeError("class probabilities: negative entry");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9)
                throw RuntimeError("class probabilities: row does not sum to 1");
        }
    }
};

struct InceptionScore {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_split;
};

/// exp(mean KL(p(y|x) || p_bar)) per split; the last split absorbs any
/// remainder. Probabilities are floored at 1e-12 inside the logs.
inline InceptionScore inception_score(const ClassProbabilities& cp, int splits) {
    cp.validate();
    if (splits < 1) throw RuntimeError("inception_score: splits must be >= 1");
    const int n = cp.probs.dim(0), C = cp.probs.dim(1);
    if (n < 1) throw RuntimeError("inception_score: empty input");
    if (splits > n) throw RuntimeError("inception_score: more splits than samples");
    constexpr double kFloor = 1e-12;

    InceptionScore out;
    const int base = n / splits;
    int start = 0;
    for (int s = 0; s < splits; ++s) {
        const int count = (s == splits - 1) ? n - start : base;
        std::vector<double> marginal(static_cast<size_t>(C), 0.0);
        for (int i = start; i < start + count; ++i)
            for (int c = 0; c < C; ++c) marginal[static_cast<size_t>(c)] += cp.probs.at2(i, c);
        for (double& v : marginal) v /= static_cast<double>(count);

        double mean_kl = 0.0;
        for (int i = start; i < start + count; ++i) {
            double kl = 0.0;
            for (int c = 0; c < C; ++c) {
                const double p = std::max(cp.probs.at2(i, c), kFloor);
                const double q = std::max(marginal[static_cast<size_t>(c)], kFloor);
                kl += cp.probs.at2(i, c) * std::log(p / q);
            }
            mean_kl += kl;
        }
        mean_kl /= static_cast<double>(count);
        out.per_split.push_back(std::exp(mean_kl));
        start += count;
    }

    for (double v : out.per_split) out.mean += v;
    out.mean /= static_cast<double>(splits);
    double var = 0.0;
    for (double v : out.per_split) var += (v - out.mean) * (v - out.mean);
    out.stddev = splits > 1 ? std::sqrt(var / static_cast<double>(splits)) : 0.0;
    return out;
}

// ----------------------------------------------------------------------------
// Feature extraction through the trained classifier. The checkpoint metadata
// must certify at least 90% held-out accuracy before the classifier may act
// as an extractor.
// ----------------------------------------------------------------------------

struct FeatureExtractor {
    Classifier* classifier = nullptr;
    double certified_accuracy = 0.0;

    void check_certified() const {
        if (!classifier) throw RuntimeError("feature extractor: no classifier bound");
        if (certified_accuracy < 0.9)
            throw RuntimeError("feature extractor: classifier accuracy " +
                               std::to_string(certified_accuracy) +
                               " below the 0.9 certification gate");
    }
};

/// Evaluation-mode penultimate features, n x 256 for the published widths.
inline Tensor extract_features(const FeatureExtractor& ex, const Tensor& images, int batch = 32) {
    ex.check_certified();
    const int n = images.dim(0);
    Tensor out({n, ex.classifier->feature_dim()});
    const int64_t per = images.size() / n;
    for (int from = 0; from < n; from += batch) {
        const int count = std::min(batch, n - from);
        Tensor chunk({count, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data.begin() + from * per, images.data.begin() + (from + count) * per,
                  chunk.data.begin());
        Tensor f = ex.classifier->features_eval(chunk);
        std::copy(f.data.begin(), f.data.end(),
                  out.data.begin() + static_cast<int64_t>(from) * out.dim(1));
    }
    return out;
}

/// Evaluation-mode softmax class probabilities.
inline ClassProbabilities class_probabilities(const FeatureExtractor& ex, const Tensor& images,
                                              int batch = 32) {
    ex.check_certified();
    const int n = images.dim(0);
    ClassProbabilities cp;
    const int C = ex.classifier->cfg.num_classes;
    cp.probs = Tensor({n, C});
    const int64_t per = images.size() / n;
    for (int from = 0; from < n; from += batch) {
        const int count = std::min(batch, n - from);
        Tensor chunk({count, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data.begin() + from * per, images.data.begin() + (from + count) * per,
                  chunk.data.begin());
        Tensor lg = ex.classifier->logits_eval(chunk);
        for (int i = 0; i < count; ++i) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c) mx = std::max(mx, lg.at2(i, c));
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(lg.at2(i, c) - mx);
            for (int c = 0; c < C; ++c) cp.probs.at2(from + i, c) = std::exp(lg.at2(i, c) - mx) / z;
        }
    }
    return cp;
}

} // namespace agrigen
