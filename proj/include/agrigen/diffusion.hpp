#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "agrigen/checkpoint.hpp"
#include "agrigen/nets.hpp"
#include "agrigen/rng.hpp"
#include "agrigen/schedule.hpp"
#include "agrigen/train.hpp"

namespace agrigen {

enum class Provenance { subject, prior, generic };

struct TrainingBatch {
    Tensor images;                       // N x 3 x H x W
    std::vector<std::string> captions;   // aligned 1:1 with images
    std::vector<Provenance> tags;

    int size() const { return images.ndim() == 4 ? images.dim(0) : 0; }

    void validate() const {
        if (static_cast<size_t>(size()) != captions.size())
            throw ShapeError("training batch: images and captions must align 1:1");
    }
};

struct GenerationRequest {
    std::string prompt;
    uint64_t seed = 0;
    int num_inference_steps = 0;  // must equal schedule T
};

struct DiffusionModelConfig {
    int image_size = 64;
    VaeConfig vae;
    DenoiserConfig den;
    int emb_dim = 64;
    int emb_len = 16;
    int T = 50;
    double beta_start = -1.0;  // < 0: rescaled 1000-step defaults
    double beta_end = -1.0;

    NoiseSchedule make_schedule() const {
        if (beta_start > 0.0 && beta_end > 0.0) return make_linear_schedule(T, beta_start, beta_end);
        return default_schedule(T);
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size},
                {"vae_base", vae.base_channels},
                {"den_base", den.base_channels},
                {"den_time", den.time_dim},
                {"den_attn", den.attn_dim},
                {"emb_dim", emb_dim},
                {"emb_len", emb_len}};
    }

    static DiffusionModelConfig from_json(const nlohmann::json& j, int T, double b0, double b1) {
        DiffusionModelConfig c;
        c.image_size = j.at("image_size").get<int>();
        c.vae.base_channels = j.at("vae_base").get<int>();
        c.den.base_channels = j.at("den_base").get<int>();
        c.den.time_dim = j.at("den_time").get<int>();
        c.den.attn_dim = j.at("den_attn").get<int>();
        c.emb_dim = j.at("emb_dim").get<int>();
        c.emb_len = j.at("emb_len").get<int>();
        c.den.token_dim = c.emb_dim;
        c.T = T;
        c.beta_start = b0;
        c.beta_end = b1;
        return c;
    }
};

// ----------------------------------------------------------------------------
// The latent-diffusion bundle: VAE + text embedder + conditional denoiser +
// schedule, plus the denoiser's optimizer/EMA state. The VAE and embedder are
// frozen outside their own training phases.
// ----------------------------------------------------------------------------

class DiffusionModel {
  public:
    DiffusionModelConfig cfg;
    Vae vae;
    TextEmbedder embedder;
    Denoiser denoiser;
    NoiseSchedule schedule;
    std::unique_ptr<TrainState> den_state;

    DiffusionModel(const DiffusionModel&) = delete;
    DiffusionModel& operator=(const DiffusionModel&) = delete;

    static std::unique_ptr<DiffusionModel> create(const DiffusionModelConfig& cfg,
                                                  const std::vector<std::string>& caption_corpus,
                                                  uint64_t seed, OptimConfig opt = {}) {
        auto m = std::unique_ptr<DiffusionModel>(new DiffusionModel());
        m->cfg = cfg;
        m->cfg.den.token_dim = cfg.emb_dim;
        m->vae = Vae(cfg.vae, seed);
        m->embedder.build(caption_corpus, cfg.emb_dim, cfg.emb_len, seed);
        m->denoiser = Denoiser(m->cfg.den, seed);
        m->schedule = cfg.make_schedule();
        m->den_state = std::make_unique<TrainState>(m->tuned_params(), opt);
        m->freeze_side_modules();
        return m;
    }

    /// The fine-tuned parameter group: denoiser weights plus the embedding
    /// table (which only moves during DreamBooth, masked to the sks row).
    std::vector<Parameter*> tuned_params() {
        std::vector<Parameter*> ps = denoiser.params();
        ps.push_back(&embedder.table);
        return ps;
    }

    int latent_size() const { return cfg.image_size / vae.downsample_factor(); }

    void freeze_side_modules() {
        for (Parameter* p : vae.params()) p->trainable = false;
        embedder.table.trainable = false;
    }

    uint64_t vae_checksum() { return params_checksum(vae.params()); }
    uint64_t embedder_checksum() { return params_checksum({&embedder.table}); }

    // ---- persistence --------------------------------------------------------

    void save(const std::filesystem::path& path, nlohmann::json extra_meta = {}) {
        Checkpoint ck;
        ck.meta["kind"] = "diffusion";
        ck.meta["tool_version"] = kToolVersion;
        ck.meta["model"] = cfg.to_json();
        ck.meta["schedule"] = {{"T", schedule.T},
                               {"beta_start", schedule.beta_start},
                               {"beta_end", schedule.beta_end},
                               {"family", schedule.family}};
        ck.meta["vocab"] = embedder.vocab;
        for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
        ck.pack_params(vae.params());
        ck.put(embedder.table.name, embedder.table.value);
        ck.pack_params(denoiser.params());
        ck.pack_state("opt", *den_state);
        ck.save(path);
    }

    static std::unique_ptr<DiffusionModel> load(const std::filesystem::path& path,
                                                OptimConfig opt = {}) {
        Checkpoint ck = Checkpoint::load(path);
        if (ck.meta.value("kind", "") != "diffusion")
            throw IoError("not a diffusion checkpoint: " + path.string());
        const auto& sj = ck.meta.at("schedule");
        DiffusionModelConfig cfg = DiffusionModelConfig::from_json(
            ck.meta.at("model"), sj.at("T").get<int>(), sj.at("beta_start").get<double>(),
            sj.at("beta_end").get<double>());

        auto m = std::unique_ptr<DiffusionModel>(new DiffusionModel());
        m->cfg = cfg;
        m->vae = Vae(cfg.vae, 0);
        m->denoiser = Denoiser(cfg.den, 0);
        m->schedule = cfg.make_schedule();

        m->embedder.dim = cfg.emb_dim;
        m->embedder.max_len = cfg.emb_len;
        m->embedder.vocab = ck.meta.at("vocab").get<std::map<std::string, int>>();
        m->embedder.table = Parameter("emb.table", ck.get("emb.table"));

        ck.unpack_params(m->vae.params());
        ck.unpack_params(m->denoiser.params());
        m->den_state = std::make_unique<TrainState>(m->tuned_params(), opt);
        ck.unpack_state("opt", *m->den_state);
        m->freeze_side_modules();
        return m;
    }

  private:
    DiffusionModel() = default;
};

// ----------------------------------------------------------------------------
// Losses. Noise draws are made explicit so training steps and gradient checks
// share one code path.
// ----------------------------------------------------------------------------

struct NoiseDraws {
    std::vector<int> ts;  // one timestep per item, in [1, T]
    Tensor eps;           // N x C x h x w
};

inline NoiseDraws draw_noise(Rng& rng, int n, const std::vector<int>& latent_shape, int T) {
    NoiseDraws d;
    d.ts.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) d.ts[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(1, T));
    std::vector<int> shape{n};
    shape.insert(shape.end(), latent_shape.begin(), latent_shape.end());
    d.eps = rng.normal_tensor(shape);
    return d;
}

inline Tensor noised_latents(const Tensor& latents, const NoiseDraws& d, const NoiseSchedule& s) {
    Tensor zt = latents;
    const int n = latents.dim(0);
    const int64_t per = latents.size() / n;
    for (int i = 0; i < n; ++i) {
        const double ab = s.alpha_bar(d.ts[static_cast<size_t>(i)]);
        const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
        for (int64_t j = 0; j < per; ++j)
            zt[i * per + j] = ca * latents[i * per + j] + cb * d.eps[i * per + j];
    }
    return zt;
}

/// Mean over the batch of the dimension-normalized squared error between the
/// injected and the predicted noise. `tokens` must be an N x L x d tape node.
inline VarId ddpm_loss(Tape& t, DiffusionModel& m, const Tensor& latents,
                       const NoiseDraws& draws, VarId tokens) {
    const int n = latents.dim(0);
    VarId zt = t.constant(noised_latents(latents, draws, m.schedule));
    VarId pred = m.denoiser.forward(t, zt, draws.ts, tokens);
    std::vector<double> w(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
    return t.weighted_persample_mse(pred, draws.eps, w);
}

/// One text-conditioned training step on the frozen-VAE latents of a batch.
/// Returns the scalar loss. Throws DivergenceError (with the step index) if
/// the loss goes non-finite.
inline double ddpm_training_step(DiffusionModel& m, const TrainingBatch& batch, Rng& rng,
                                 int64_t step_index = -1) {
    batch.validate();
    Tensor latents = m.vae.encode_mu_batch(batch.images);
    NoiseDraws draws = draw_noise(rng, batch.size(),
                                  {latents.dim(1), latents.dim(2), latents.dim(3)}, m.schedule.T);
    Tape t;
    VarId tokens = t.constant(m.embedder.embed_batch(batch.captions));
    VarId loss = ddpm_loss(t, m, latents, draws, tokens);
    const double value = t.val(loss)[0];
    if (!std::isfinite(value))
        throw DivergenceError("ddpm_training_step: non-finite loss at step " +
                              std::to_string(step_index));
    m.den_state->zero_grad();
    t.backward(loss);
    m.den_state->clip();
    m.den_state->step();
    m.den_state->ema_update();
    return value;
}

// ---- DreamBooth --------------------------------------------------------------

struct DreamboothLoss {
    VarId total;
    double subject = 0.0;
    double prior = 0.0;
};

inline bool caption_has_sks(const std::string& caption) {
    for (const auto& tok : TextEmbedder::tokenize(caption))
        if (tok == "sks") return true;
    return false;
}

/// L_subject + lambda * L_prior over pre-encoded latents. Token embeddings go
/// through the tape so the identifier row can receive gradients.
inline DreamboothLoss dreambooth_loss(Tape& t, DiffusionModel& m, const Tensor& subj_latents,
                                      const std::vector<std::string>& subj_captions,
                                      const Tensor& prior_latents,
                                      const std::vector<std::string>& prior_captions, double lambda,
                                      const NoiseDraws& subj_draws, const NoiseDraws& prior_draws) {
    for (const auto& c : subj_captions)
        if (!caption_has_sks(c))
            throw RuntimeError("dreambooth: subject caption missing the sks token: " + c);
    const int ns = subj_latents.ndim() == 4 ? subj_latents.dim(0) : 0;
    const int np = prior_latents.ndim() == 4 ? prior_latents.dim(0) : 0;
    if (ns == 0) throw RuntimeError("dreambooth: empty subject batch");
    if (np == 0 && lambda > 0.0) throw RuntimeError("dreambooth: empty prior batch with lambda > 0");

    // Concatenate subject and prior into one denoiser pass.
    std::vector<int> shape = subj_latents.shape;
    shape[0] = ns + np;
    Tensor latents(shape);
    std::copy(subj_latents.data.begin(), subj_latents.data.end(), latents.data.begin());
    if (np > 0)
        std::copy(prior_latents.data.begin(), prior_latents.data.end(),
                  latents.data.begin() + subj_latents.size());

    NoiseDraws draws;
    draws.ts = subj_draws.ts;
    draws.ts.insert(draws.ts.end(), prior_draws.ts.begin(), prior_draws.ts.end());
    draws.eps = Tensor(shape);
    std::copy(subj_draws.eps.data.begin(), subj_draws.eps.data.end(), draws.eps.data.begin());
    if (np > 0)
        std::copy(prior_draws.eps.data.begin(), prior_draws.eps.data.end(),
                  draws.eps.data.begin() + subj_draws.eps.size());

    std::vector<std::string> captions = subj_captions;
    captions.insert(captions.end(), prior_captions.begin(), prior_captions.end());

    VarId zt = t.constant(noised_latents(latents, draws, m.schedule));
    VarId tokens = m.embedder.embed_batch_on_tape(t, captions);
    VarId pred = m.denoiser.forward(t, zt, draws.ts, tokens);

    std::vector<double> ws(static_cast<size_t>(ns + np), 0.0);
    for (int i = 0; i < ns; ++i) ws[static_cast<size_t>(i)] = 1.0 / ns;
    VarId l_subj = t.weighted_persample_mse(pred, draws.eps, ws);
    DreamboothLoss out;
    out.subject = t.val(l_subj)[0];
    if (np > 0) {
        std::vector<double> wp(static_cast<size_t>(ns + np), 0.0);
        for (int i = 0; i < np; ++i) wp[static_cast<size_t>(ns + i)] = 1.0 / np;
        VarId l_prior = t.weighted_persample_mse(pred, draws.eps, wp);
        out.prior = t.val(l_prior)[0];
        out.total = t.weighted_sum_scalars({l_subj, l_prior}, {1.0, lambda});
    } else {
        out.total = l_subj;
    }
    return out;
}

/// Zeroes every gradient row of an embedding table except `row`.
inline void mask_grad_to_row(Parameter& table, int row) {
    const int d = table.value.dim(1);
    for (int r = 0; r < table.value.dim(0); ++r) {
        if (r == row) continue;
        for (int j = 0; j < d; ++j) table.grad.at2(r, j) = 0.0;
    }
}

/// One subject fine-tuning step. Only the denoiser and the sks embedding row
/// move; the VAE stays frozen and the rest of the table is grad-masked.
inline DreamboothLoss dreambooth_training_step(DiffusionModel& m, const TrainingBatch& subject,
                                               const TrainingBatch& prior, double lambda, Rng& rng) {
    subject.validate();
    prior.validate();
    Tensor subj_lat = m.vae.encode_mu_batch(subject.images);
    Tensor prior_lat = prior.size() > 0 ? m.vae.encode_mu_batch(prior.images) : Tensor();
    const std::vector<int> lshape{subj_lat.dim(1), subj_lat.dim(2), subj_lat.dim(3)};
    NoiseDraws ds = draw_noise(rng, subject.size(), lshape, m.schedule.T);
    NoiseDraws dp = prior.size() > 0 ? draw_noise(rng, prior.size(), lshape, m.schedule.T)
                                     : NoiseDraws{};

    m.embedder.table.trainable = true;
    Tape t;
    DreamboothLoss loss = dreambooth_loss(t, m, subj_lat, subject.captions, prior_lat,
                                          prior.captions, lambda, ds, dp);
    if (!std::isfinite(t.val(loss.total)[0]))
        throw DivergenceError("dreambooth_training_step: non-finite loss");
    m.den_state->zero_grad();
    t.backward(loss.total);
    mask_grad_to_row(m.embedder.table, TextEmbedder::kSks);
    m.den_state->clip();
    m.den_state->step();
    m.den_state->ema_update();
    m.embedder.table.trainable = false;
    return loss;
}

// ---- sampling ----------------------------------------------------------------

/// Ancestral sampling of clean latents for a batch of prompts. Each item's
/// noise stream is seeded independently, so results do not depend on batch
/// composition order.
inline Tensor sample_latents_batch(DiffusionModel& m, const std::vector<std::string>& prompts,
                                   const std::vector<uint64_t>& seeds, bool use_ema = true) {
    if (prompts.size() != seeds.size()) throw RuntimeError("sample: prompts/seeds size mismatch");
    const int n = static_cast<int>(prompts.size());
    const int hs = m.latent_size();
    const int C = m.cfg.vae.latent_channels;

    std::vector<Rng> rngs;
    rngs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) rngs.emplace_back(derive_seed(seeds[static_cast<size_t>(i)], "sample"));

    Tensor z({n, C, hs, hs});
    for (int i = 0; i < n; ++i) {
        Tensor init = rngs[static_cast<size_t>(i)].normal_tensor({C, hs, hs});
        std::copy(init.data.begin(), init.data.end(), z.data.begin() + static_cast<int64_t>(i) * C * hs * hs);
    }

    std::vector<Tensor> backup;
    if (use_ema) backup = m.den_state->swap_in_ema();

    Tensor tokens = m.embedder.embed_batch(prompts);
    const int64_t per = static_cast<int64_t>(C) * hs * hs;
    for (int t_step = m.schedule.T; t_step >= 1; --t_step) {
        Tape t;
        VarId pred = m.denoiser.forward(t, t.constant(z),
                                        std::vector<int>(static_cast<size_t>(n), t_step),
                                        t.constant(tokens));
        const Tensor& eps_hat = t.val(pred);
        const double beta = m.schedule.beta(t_step);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(m.schedule.alpha(t_step));
        const double coef = beta / std::sqrt(1.0 - m.schedule.alpha_bar(t_step));
        const double sigma = std::sqrt(beta);
        for (int i = 0; i < n; ++i) {
            Rng& r = rngs[static_cast<size_t>(i)];
            for (int64_t j = 0; j < per; ++j) {
                const int64_t idx = i * per + j;
                const double noise = t_step > 1 ? r.normal() : 0.0;
                z[idx] = inv_sqrt_alpha * (z[idx] - coef * eps_hat[idx]) + sigma * noise;
            }
        }
    }

    if (use_ema) m.den_state->restore(backup);
    return z;
}

inline Tensor sample_latent(DiffusionModel& m, const std::string& prompt, uint64_t seed,
                            bool use_ema = true) {
    Tensor z = sample_latents_batch(m, {prompt}, {seed}, use_ema);
    return z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
}

inline Tensor clamp01(Tensor t) {
    for (double& v : t.data) v = std::min(1.0, std::max(0.0, v));
    return t;
}

/// Full generation: sample a latent, decode with the frozen VAE, clamp to
/// [0, 1]. num_inference_steps must equal the schedule length.
inline Tensor sample(DiffusionModel& m, const GenerationRequest& req, bool use_ema = true) {
    if (req.num_inference_steps != 0 && req.num_inference_steps != m.schedule.T)
        throw RuntimeError("sample: num_inference_steps must equal T=" + std::to_string(m.schedule.T));
    Tensor z0 = sample_latent(m, req.prompt, req.seed, use_ema);
    return clamp01(m.vae.decode_one(z0));
}

// ---- image-guided translation --------------------------------------------------

struct Img2ImgResult {
    Tensor image;    // 3 x H x W in [0, 1]
    Tensor latent;   // final clean latent
    int t_star = 0;
};

/// Partial-noising translation: encode, noise to t* = round(strength * T),
/// then run the conditioned reverse chain. strength 0 is an exact VAE
/// round-trip (the latent is bitwise the encoder mean).
inline Img2ImgResult img2img(DiffusionModel& m, const Tensor& image, const std::string& prompt,
                             double strength, uint64_t seed, bool use_ema = true) {
    if (!(strength >= 0.0 && strength <= 1.0))
        throw RuntimeError("img2img: strength must lie in [0, 1]");
    Img2ImgResult out;
    Tensor z0 = m.vae.encode_mu(image);
    const int t_star = static_cast<int>(std::lround(strength * m.schedule.T));
    out.t_star = t_star;
    if (t_star == 0) {
        out.latent = z0;
        out.image = clamp01(m.vae.decode_one(z0));
        return out;
    }

    Rng rng(derive_seed(seed, "img2img"));
    Tensor eps = rng.normal_tensor(z0.shape);
    Tensor z = forward_sample(z0, t_star, eps, m.schedule);

    std::vector<Tensor> backup;
    if (use_ema) backup = m.den_state->swap_in_ema();
    PromptEmbedding cond = m.embedder.embed(prompt);
    for (int t_step = t_star; t_step >= 1; --t_step) {
        Tensor eps_hat = predict_noise(m.denoiser, z, t_step, cond);
        Tensor noise = t_step > 1 ? rng.normal_tensor(z.shape) : Tensor::zeros(z.shape);
        z = reverse_step(z, t_step, eps_hat, m.schedule, noise);
    }
    if (use_ema) m.den_state->restore(backup);

    out.latent = z;
    out.image = clamp01(m.vae.decode_one(z));
    return out;
}

// ---- VAE pretraining -----------------------------------------------------------

struct VaeTrainReport {
    double final_loss = 0.0;
    int64_t steps = 0;
};

/// Trains the VAE on a stack of images (N x 3 x H x W), then re-freezes it.
inline VaeTrainReport train_vae(DiffusionModel& m, const Tensor& images, int steps, int batch_size,
                                OptimConfig opt, double kl_weight, uint64_t seed,
                                std::ostream* log = nullptr) {
    for (Parameter* p : m.vae.params()) p->trainable = true;
    TrainState state(m.vae.params(), opt);
    Rng rng(derive_seed(seed, "vae-train"));
    const int n = images.dim(0);
    const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const int hs = H / m.vae.downsample_factor();
    VaeTrainReport rep;
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < steps; ++s) {
        const int bs = std::min(batch_size, n);
        Tensor batch({bs, C, H, W});
        for (int b = 0; b < bs; ++b) {
            const int idx = static_cast<int>(rng.uniform_int(0, n - 1));
            std::copy(images.data.begin() + static_cast<int64_t>(idx) * C * H * W,
                      images.data.begin() + static_cast<int64_t>(idx + 1) * C * H * W,
                      batch.data.begin() + static_cast<int64_t>(b) * C * H * W);
        }
        Tensor z_noise = rng.normal_tensor({bs, m.cfg.vae.latent_channels, hs, hs});
        Tape t;
        ElboLoss loss = vae_elbo_loss(t, m.vae, batch, z_noise, kl_weight);
        state.zero_grad();
        t.backward(loss.total);
        state.clip();
        state.step();
        rep.final_loss = t.val(loss.total)[0];
        if (log && (s % 25 == 0 || s == steps - 1)) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            *log << nlohmann::json{{"step", s},
                                   {"loss", rep.final_loss},
                                   {"recon", loss.recon},
                                   {"kl", loss.kl},
                                   {"wall_ms", ms}}
                        .dump()
                 << "\n";
        }
    }
    rep.steps = steps;
    m.freeze_side_modules();
    return rep;
}

} // namespace agrigen
