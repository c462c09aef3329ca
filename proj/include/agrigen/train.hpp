#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "agrigen/autodiff.hpp"

namespace agrigen {

/// Rescales gradients so the global L2 norm does not exceed `threshold`.
/// Returns the pre-clip norm.
inline double clip_gradients(std::vector<Tensor*> grads, double threshold) {
    if (threshold <= 0.0) throw RuntimeError("clip threshold must be positive");
    double sq = 0.0;
    for (Tensor* g : grads) sq += g->sq_norm();
    const double norm = std::sqrt(sq);
    if (norm > threshold) {
        const double s = threshold / norm;
        for (Tensor* g : grads)
            for (double& v : g->data) v *= s;
    }
    return norm;
}

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip = 0.5;
    double ema_decay = 0.999;
};

// ----------------------------------------------------------------------------
// Training state for one parameter group: AdamW moments, EMA shadow and the
// step counter. Weight decay is decoupled (applied to parameters directly).
// ----------------------------------------------------------------------------

class TrainState {
  public:
    TrainState() = default;
    TrainState(std::vector<Parameter*> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (Parameter* p : params_) {
            m_.push_back(Tensor::zeros(p->value.shape));
            v_.push_back(Tensor::zeros(p->value.shape));
            ema_.push_back(p->value);
        }
    }

    const std::vector<Parameter*>& params() const { return params_; }
    OptimConfig& config() { return cfg_; }
    const OptimConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }

    double clip() {
        std::vector<Tensor*> gs;
        gs.reserve(params_.size());
        for (Parameter* p : params_) gs.push_back(&p->grad);
        return clip_gradients(gs, cfg_.clip);
    }

    /// Bias-corrected AdamW update. Rejects non-finite gradients.
    void step() {
        for (Parameter* p : params_)
            if (!p->grad.all_finite())
                throw DivergenceError("optimizer_step: non-finite gradient in " + p->name);
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Parameter* p = params_[i];
            if (!p->trainable) continue;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (int64_t j = 0; j < p->value.size(); ++j) {
                const double g = p->grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p->value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (cfg_.weight_decay > 0.0) p->value[j] -= cfg_.lr * cfg_.weight_decay * p->value[j];
            }
        }
    }

    /// shadow <- decay * shadow + (1 - decay) * params
    void ema_update() {
        const double d = cfg_.ema_decay;
        for (size_t i = 0; i < params_.size(); ++i) {
            const Tensor& pv = params_[i]->value;
            Tensor& s = ema_[i];
            for (int64_t j = 0; j < pv.size(); ++j) s[j] = d * s[j] + (1.0 - d) * pv[j];
        }
    }

    const std::vector<Tensor>& ema_shadow() const { return ema_; }
    std::vector<Tensor>& ema_shadow() { return ema_; }
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    void set_step_count(int64_t s) { step_ = s; }

    /// Copies the EMA shadow into the live parameters (used at sampling time);
    /// returns the previous values so callers can restore them.
    std::vector<Tensor> swap_in_ema() {
        std::vector<Tensor> backup;
        backup.reserve(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            backup.push_back(params_[i]->value);
            params_[i]->value = ema_[i];
        }
        return backup;
    }

    void restore(const std::vector<Tensor>& backup) {
        for (size_t i = 0; i < params_.size(); ++i) params_[i]->value = backup[i];
    }

  private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_, ema_;
    int64_t step_ = 0;
    OptimConfig cfg_;
};

inline uint64_t params_checksum(const std::vector<Parameter*>& ps) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const Parameter* p : ps) {
        h = fnv1a64(p->name, h);
        h = fnv1a64(p->value.data.data(), p->value.data.size() * sizeof(double), h);
    }
    return h;
}

} // namespace agrigen
