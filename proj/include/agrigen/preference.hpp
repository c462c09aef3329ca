#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "agrigen/diffusion.hpp"
#include "agrigen/nets.hpp"
#include "agrigen/stats.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Annotations: (image id, latent, expert score in [0, 10]).
// ----------------------------------------------------------------------------

struct AnnotationRecord {
    std::string image_id;
    Tensor latent;  // 4-channel VAE latent
    double score = 0.0;
};

inline void validate_score(double s) {
    if (!(s >= 0.0 && s <= 10.0))
        throw RuntimeError("annotation score " + std::to_string(s) + " outside [0, 10]");
}

/// Parses `image_id,score` CSV (optional header). Duplicate ids resolve
/// last-write-wins; a warning is emitted per duplicate.
inline std::vector<std::pair<std::string, double>> read_annotation_csv(
    const std::filesystem::path& path, std::ostream* warnings = nullptr) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open annotation file: " + path.string());
    std::vector<std::pair<std::string, double>> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        if (lineno == 1 && line.rfind("image_id", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw IoError("annotation line " + std::to_string(lineno) + ": expected image_id,score");
        std::string id = line.substr(0, comma);
        const double score = std::stod(line.substr(comma + 1));
        validate_score(score);
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == id; });
        if (it != out.end()) {
            if (warnings)
                *warnings << "warning: duplicate annotation for " << id << ", keeping the later score\n";
            it->second = score;
        } else {
            out.emplace_back(std::move(id), score);
        }
    }
    return out;
}

inline void append_annotation_csv(const std::filesystem::path& path, const std::string& image_id,
                                  double score) {
    validate_score(score);
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot open annotation file for append: " + path.string());
    if (fresh) f << "image_id,score\n";
    f << image_id << "," << score << "\n";
}

// ----------------------------------------------------------------------------
// Softmax preference weights (max-subtracted for overflow safety).
// ----------------------------------------------------------------------------

inline std::vector<double> preference_weights(const std::vector<double>& rewards, double tau) {
    if (rewards.empty()) throw RuntimeError("preference_weights: empty reward vector");
    if (!(tau > 0.0)) throw RuntimeError("preference_weights: tau must be positive");
    const double mx = *std::max_element(rewards.begin(), rewards.end());
    std::vector<double> w(rewards.size());
    double z = 0.0;
    for (size_t i = 0; i < rewards.size(); ++i) {
        w[i] = std::exp((rewards[i] - mx) / tau);
        z += w[i];
    }
    for (double& v : w) v /= z;
    return w;
}

// ----------------------------------------------------------------------------
// Candidate pools and top-k selection (ties broken by lower seed).
// ----------------------------------------------------------------------------

struct Candidate {
    Tensor latent;
    uint64_t seed = 0;
    double reward = 0.0;
};

struct CandidatePool {
    std::string prompt;
    std::vector<Candidate> candidates;
    int n = 0;
    int k = 0;
};

/// Indices of the k highest-reward entries; equal rewards prefer the lower
/// seed. Output sorted by descending reward.
inline std::vector<int> select_top_k(const std::vector<double>& rewards,
                                     const std::vector<uint64_t>& seeds, int k) {
    if (k < 1 || static_cast<size_t>(k) > rewards.size())
        throw RuntimeError("select_top_k: need 1 <= k <= pool size");
    if (rewards.size() != seeds.size()) throw RuntimeError("select_top_k: seed count mismatch");
    std::vector<int> idx(rewards.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (rewards[static_cast<size_t>(a)] != rewards[static_cast<size_t>(b)])
            return rewards[static_cast<size_t>(a)] > rewards[static_cast<size_t>(b)];
        return seeds[static_cast<size_t>(a)] < seeds[static_cast<size_t>(b)];
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

// ----------------------------------------------------------------------------
// Reward-model training: MSE to annotated scores, held-out Pearson report.
// ----------------------------------------------------------------------------

struct RewardTrainResult {
    double test_pearson = 0.0;
    double final_loss = 0.0;
    int train_count = 0;
    int test_count = 0;
};

inline RewardTrainResult train_reward(RewardModel& model, const std::vector<AnnotationRecord>& records,
                                      double train_fraction, OptimConfig opt, int epochs,
                                      int batch_size, uint64_t seed, std::ostream* log = nullptr) {
    if (records.size() < 50)
        throw RuntimeError("train_reward: need at least 50 records, got " +
                           std::to_string(records.size()));
    for (const auto& r : records) validate_score(r.score);
    double mean = 0.0;
    for (const auto& r : records) mean += r.score;
    mean /= static_cast<double>(records.size());
    double var = 0.0;
    for (const auto& r : records) var += (r.score - mean) * (r.score - mean);
    if (var == 0.0)
        throw DegenerateDataError("train_reward: all scores identical, correlation undefined");

    Rng rng(derive_seed(seed, "reward-split"));
    std::vector<int> perm = rng.permutation(static_cast<int>(records.size()));
    const int n_train = static_cast<int>(train_fraction * static_cast<double>(records.size()));
    if (n_train < 1 || n_train >= static_cast<int>(records.size()))
        throw RuntimeError("train_reward: split leaves an empty train or test set");

    const auto& ls = records[0].latent.shape;
    auto make_batch = [&](const std::vector<int>& ids, int from, int count) {
        Tensor lat({count, ls[0], ls[1], ls[2]});
        std::vector<double> scores(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            const auto& rec = records[static_cast<size_t>(ids[static_cast<size_t>(from + i)])];
            std::copy(rec.latent.data.begin(), rec.latent.data.end(),
                      lat.data.begin() + static_cast<int64_t>(i) * rec.latent.size());
            scores[static_cast<size_t>(i)] = rec.score;
        }
        return std::make_pair(lat, scores);
    };

    TrainState state(model.params(), opt);
    Rng order_rng(derive_seed(seed, "reward-order"));
    Rng drop_rng(derive_seed(seed, "reward-dropout"));
    RewardTrainResult res;
    res.train_count = n_train;
    res.test_count = static_cast<int>(records.size()) - n_train;

    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(perm.begin(), perm.begin() + n_train);
        std::vector<int> shuffle_idx = order_rng.permutation(n_train);
        std::vector<int> shuffled(static_cast<size_t>(n_train));
        for (int i = 0; i < n_train; ++i)
            shuffled[static_cast<size_t>(i)] = order[static_cast<size_t>(shuffle_idx[static_cast<size_t>(i)])];
        double epoch_loss = 0.0;
        int batches = 0;
        for (int from = 0; from < n_train; from += batch_size) {
            const int count = std::min(batch_size, n_train - from);
            if (count < 2) continue;  // batch-norm needs real batch statistics
            auto [lat, scores] = make_batch(shuffled, from, count);
            Tensor target({count, 1});
            for (int i = 0; i < count; ++i) target.at2(i, 0) = scores[static_cast<size_t>(i)];
            Tensor mask = make_dropout_mask({count, model.cfg.hidden}, model.cfg.dropout, drop_rng);
            Tape t;
            VarId pred = model.forward(t, t.constant(lat), true, &mask);
            std::vector<double> w(static_cast<size_t>(count), 1.0 / count);
            VarId loss = t.weighted_persample_mse(pred, target, w);
            state.zero_grad();
            t.backward(loss);
            state.clip();
            state.step();
            epoch_loss += t.val(loss)[0];
            ++batches;
        }
        res.final_loss = epoch_loss / std::max(1, batches);
        if (log)
            *log << nlohmann::json{{"epoch", e}, {"loss", res.final_loss}}.dump() << "\n";
    }

    // held-out Pearson
    std::vector<double> preds, truths;
    for (int i = n_train; i < static_cast<int>(records.size()); ++i) {
        const auto& rec = records[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        preds.push_back(model.predict(rec.latent));
        truths.push_back(rec.score);
    }
    res.test_pearson = pearson(preds, truths);
    return res;
}

// ----------------------------------------------------------------------------
// Reward-weighted fine-tuning step: sample N candidates, score with the frozen
// reward model, keep the top k, re-noise each at a fresh timestep and take a
// softmax-weighted denoising step.
// ----------------------------------------------------------------------------

struct PreferenceStepResult {
    double weighted_loss = 0.0;
    CandidatePool pool;
};

inline PreferenceStepResult preference_finetune_step(DiffusionModel& m, RewardModel& reward,
                                                     const std::string& prompt,
                                                     const std::vector<uint64_t>& candidate_seeds,
                                                     int k, double tau, Rng& rng,
                                                     int threads = 0) {
    const int n = static_cast<int>(candidate_seeds.size());
    if (n < k) throw RuntimeError("preference step: N < k");
    const uint64_t reward_sum_before = params_checksum(reward.params());

    // N candidates, independent seeds; generation may fan out across workers.
    std::vector<std::string> prompts(static_cast<size_t>(n), prompt);
    Tensor latents;
    if (threads > 1 && n > 1) {
        const int hs = m.latent_size();
        const int C = m.cfg.vae.latent_channels;
        latents = Tensor({n, C, hs, hs});
        std::vector<Tensor> singles(static_cast<size_t>(n));
        std::vector<Tensor> backup = m.den_state->swap_in_ema();
        parallel_for(
            n,
            [&](int i) {
                singles[static_cast<size_t>(i)] =
                    sample_latent(m, prompt, candidate_seeds[static_cast<size_t>(i)], false);
            },
            threads);
        m.den_state->restore(backup);
        const int64_t per_item = static_cast<int64_t>(C) * hs * hs;
        for (int i = 0; i < n; ++i)
            std::copy(singles[static_cast<size_t>(i)].data.begin(),
                      singles[static_cast<size_t>(i)].data.end(),
                      latents.data.begin() + static_cast<int64_t>(i) * per_item);
    } else {
        latents = sample_latents_batch(m, prompts, candidate_seeds, true);
    }

    std::vector<double> rewards = reward.predict_batch(latents);
    std::vector<int> top = select_top_k(rewards, candidate_seeds, k);

    PreferenceStepResult out;
    out.pool.prompt = prompt;
    out.pool.n = n;
    out.pool.k = k;
    const int64_t per = latents.size() / n;
    for (int i = 0; i < n; ++i) {
        Candidate c;
        c.seed = candidate_seeds[static_cast<size_t>(i)];
        c.reward = rewards[static_cast<size_t>(i)];
        c.latent = Tensor({latents.dim(1), latents.dim(2), latents.dim(3)});
        std::copy(latents.data.begin() + i * per, latents.data.begin() + (i + 1) * per,
                  c.latent.data.begin());
        out.pool.candidates.push_back(std::move(c));
    }

    // selected clean latents, re-noised at fresh timesteps with fresh noise
    std::vector<double> top_rewards;
    Tensor sel({k, latents.dim(1), latents.dim(2), latents.dim(3)});
    for (int i = 0; i < k; ++i) {
        const int idx = top[static_cast<size_t>(i)];
        top_rewards.push_back(rewards[static_cast<size_t>(idx)]);
        std::copy(latents.data.begin() + idx * per, latents.data.begin() + (idx + 1) * per,
                  sel.data.begin() + static_cast<int64_t>(i) * per);
    }
    std::vector<double> w = preference_weights(top_rewards, tau);
    NoiseDraws draws = draw_noise(rng, k, {latents.dim(1), latents.dim(2), latents.dim(3)},
                                  m.schedule.T);

    Tape t;
    VarId zt = t.constant(noised_latents(sel, draws, m.schedule));
    VarId tokens = t.constant(m.embedder.embed_batch(std::vector<std::string>(static_cast<size_t>(k), prompt)));
    VarId pred = m.denoiser.forward(t, zt, draws.ts, tokens);
    VarId loss = t.weighted_persample_mse(pred, draws.eps, w);
    out.weighted_loss = t.val(loss)[0];
    if (!std::isfinite(out.weighted_loss))
        throw DivergenceError("preference step: non-finite weighted loss");

    m.den_state->zero_grad();
    t.backward(loss);
    m.den_state->clip();
    m.den_state->step();
    m.den_state->ema_update();

    if (params_checksum(reward.params()) != reward_sum_before)
        throw RuntimeError("preference step: reward model changed during fine-tuning");
    return out;
}

/// Mean predicted reward of latents generated from held-out prompts.
/// Deterministic given the seeds.
inline double validate_mean_reward(DiffusionModel& m, RewardModel& reward,
                                   const std::vector<std::string>& prompts,
                                   const std::vector<uint64_t>& seeds) {
    if (prompts.empty() || prompts.size() != seeds.size())
        throw RuntimeError("validate_mean_reward: prompts/seeds must align and be non-empty");
    Tensor latents = sample_latents_batch(m, prompts, seeds, true);
    std::vector<double> rs = reward.predict_batch(latents);
    double s = 0.0;
    for (double r : rs) s += r;
    return s / static_cast<double>(rs.size());
}

} // namespace agrigen
