#pragma once

#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "agrigen/autodiff.hpp"
#include "agrigen/rng.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Layers. Each layer owns its Parameters and knows how to extend a tape.
// ----------------------------------------------------------------------------

struct Conv2dLayer {
    Parameter w, b;
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int cin, int cout, int k, int stride_, int pad_, Rng& rng,
                bool zero_init = false) {
        Tensor wt({cout, cin, k, k});
        if (!zero_init) {
            const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
            for (double& v : wt.data) v = std * rng.normal();
        }
        w = Parameter(name + ".w", std::move(wt));
        b = Parameter(name + ".b", Tensor::zeros({cout}));
        stride = stride_;
        pad = pad_;
    }

    VarId forward(Tape& t, VarId x) { return t.conv2d(x, t.leaf(w), t.leaf(b), stride, pad); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct LinearLayer {
    Parameter w, b;

    LinearLayer() = default;
    LinearLayer(const std::string& name, int in, int out, Rng& rng, bool zero_init = false) {
        Tensor wt({in, out});
        if (!zero_init) {
            const double std = std::sqrt(2.0 / static_cast<double>(in));
            for (double& v : wt.data) v = std * rng.normal();
        }
        w = Parameter(name + ".w", std::move(wt));
        b = Parameter(name + ".b", Tensor::zeros({out}));
    }

    VarId forward(Tape& t, VarId x) { return t.linear(x, t.leaf(w), t.leaf(b)); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct BatchNorm2dLayer {
    Parameter gamma, beta;
    Tensor running_mean, running_var;
    double momentum = 0.1;

    BatchNorm2dLayer() = default;
    BatchNorm2dLayer(const std::string& name, int c) {
        gamma = Parameter(name + ".gamma", Tensor::full({c}, 1.0));
        beta = Parameter(name + ".beta", Tensor::zeros({c}));
        running_mean = Tensor::zeros({c});
        running_var = Tensor::full({c}, 1.0);
    }

    VarId forward(Tape& t, VarId x, bool training, bool update_running = true) {
        return t.batchnorm2d(x, t.leaf(gamma), t.leaf(beta), &running_mean, &running_var, training,
                             momentum, update_running);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
        out.emplace_back(gamma.name.substr(0, gamma.name.size() - 6) + ".running_mean", &running_mean);
        out.emplace_back(gamma.name.substr(0, gamma.name.size() - 6) + ".running_var", &running_var);
    }
};

/// Inverted-scaling dropout mask: entries are 0 or 1/(1-p).
inline Tensor make_dropout_mask(const std::vector<int>& shape, double p, Rng& rng) {
    Tensor m(shape);
    for (double& v : m.data) v = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
    return m;
}

// ----------------------------------------------------------------------------
// VAE: three stride-2 stages each way, downsample factor 8, 4-channel latent.
// ----------------------------------------------------------------------------

struct VaeConfig {
    int image_channels = 3;
    int latent_channels = 4;
    int base_channels = 16;
};

struct Vae {
    VaeConfig cfg;
    Conv2dLayer e1, e2, e3, e_mu, e_logvar;
    Conv2dLayer d0, d1, d2, d3;

    Vae() = default;
    Vae(const VaeConfig& c, uint64_t seed) : cfg(c) {
        Rng rng(derive_seed(seed, "vae-init"));
        const int ch = c.base_channels;
        e1 = Conv2dLayer("vae.e1", c.image_channels, ch, 3, 2, 1, rng);
        e2 = Conv2dLayer("vae.e2", ch, 2 * ch, 3, 2, 1, rng);
        e3 = Conv2dLayer("vae.e3", 2 * ch, 4 * ch, 3, 2, 1, rng);
        e_mu = Conv2dLayer("vae.mu", 4 * ch, c.latent_channels, 3, 1, 1, rng);
        e_logvar = Conv2dLayer("vae.logvar", 4 * ch, c.latent_channels, 3, 1, 1, rng);
        d0 = Conv2dLayer("vae.d0", c.latent_channels, 4 * ch, 3, 1, 1, rng);
        d1 = Conv2dLayer("vae.d1", 4 * ch, 2 * ch, 3, 1, 1, rng);
        d2 = Conv2dLayer("vae.d2", 2 * ch, ch, 3, 1, 1, rng);
        d3 = Conv2dLayer("vae.d3", ch, c.image_channels, 3, 1, 1, rng);
    }

    int downsample_factor() const { return 8; }

    /// Encoder graph: returns (mu, logvar), both N x 4 x H/8 x W/8.
    std::pair<VarId, VarId> encode(Tape& t, VarId x) {
        VarId h = t.silu(e1.forward(t, x));
        h = t.silu(e2.forward(t, h));
        h = t.silu(e3.forward(t, h));
        return {e_mu.forward(t, h), e_logvar.forward(t, h)};
    }

    /// Decoder graph: latent to image in [0, 1] (sigmoid output).
    VarId decode(Tape& t, VarId z) {
        VarId h = t.silu(d0.forward(t, z));
        h = t.silu(d1.forward(t, t.upsample_nearest2(h)));
        h = t.silu(d2.forward(t, t.upsample_nearest2(h)));
        return t.sigmoid(d3.forward(t, t.upsample_nearest2(h)));
    }

    /// Posterior mean of a batch of images, no sampling. Plain inference.
    Tensor encode_mu_batch(const Tensor& images) {
        Tape t;
        VarId x = t.constant(images);
        return t.val(encode(t, x).first);
    }

    Tensor encode_mu(const Tensor& image_chw) {
        Tensor batch = image_chw.reshaped({1, image_chw.dim(0), image_chw.dim(1), image_chw.dim(2)});
        Tensor mu = encode_mu_batch(batch);
        return mu.reshaped({mu.dim(1), mu.dim(2), mu.dim(3)});
    }

    Tensor decode_batch(const Tensor& latents) {
        Tape t;
        VarId z = t.constant(latents);
        return t.val(decode(t, z));
    }

    Tensor decode_one(const Tensor& latent_chw) {
        Tensor batch = latent_chw.reshaped({1, latent_chw.dim(0), latent_chw.dim(1), latent_chw.dim(2)});
        Tensor img = decode_batch(batch);
        return img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* l : {&e1, &e2, &e3, &e_mu, &e_logvar, &d0, &d1, &d2, &d3}) l->collect(out);
        return out;
    }
};

struct ElboLoss {
    VarId total;
    double recon = 0.0;
    double kl = 0.0;
};

/// ELBO with a Gaussian-likelihood reconstruction term (pixel MSE) and the
/// closed-form KL to the standard normal prior. z = mu + exp(logvar/2) * z_noise.
inline ElboLoss vae_elbo_loss(Tape& t, Vae& vae, const Tensor& images, const Tensor& z_noise,
                              double kl_weight) {
    VarId x = t.constant(images);
    auto [mu, logvar] = vae.encode(t, x);
    check_same_shape(t.val(mu), z_noise, "vae_elbo_loss z_noise");

    // Reparameterized latent: mu + exp(logvar/2) .* noise.
    VarId std_dev = t.exp_op(t.scale(logvar, 0.5));
    VarId z = t.add(mu, t.mul(std_dev, t.constant(z_noise)));

    VarId xr = vae.decode(t, z);
    const int N = images.dim(0);
    std::vector<double> w(static_cast<size_t>(N), 1.0 / static_cast<double>(N));
    VarId recon = t.weighted_persample_mse(xr, images, w);
    VarId kl_raw = t.kl_standard_normal(mu, logvar);
    // Per-item KL so the loss scale does not depend on batch size.
    VarId kl = t.scale(kl_raw, 1.0 / static_cast<double>(N));
    VarId total = t.weighted_sum_scalars({recon, kl}, {1.0, kl_weight});
    if (!std::isfinite(t.val(total)[0])) throw DivergenceError("vae_elbo_loss: non-finite loss");
    return {total, t.val(recon)[0], t.val(kl)[0]};
}

// ----------------------------------------------------------------------------
// Text embedder. Fixed-size vocabulary with reserved pad/unk/sks ids, L x d
// output with a validity mask. The pad row stays zero so an all-padding
// prompt embeds to the zero matrix.
// ----------------------------------------------------------------------------

struct PromptEmbedding {
    Tensor emb;                  // L x d
    std::vector<uint8_t> mask;   // 1 for real tokens
    std::vector<int> ids;
    int valid_count = 0;
};

struct TextEmbedder {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kSks = 2;

    std::map<std::string, int> vocab;  // token -> id (>= 3 for corpus tokens)
    Parameter table;                   // V x d
    int max_len = 16;
    int dim = 64;

    static std::vector<std::string> tokenize(const std::string& caption) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : caption) {
            if (std::isalnum(static_cast<unsigned char>(ch))) {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            } else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    /// Builds the vocabulary from a caption corpus; "sks" always present.
    void build(const std::vector<std::string>& corpus, int d, int L, uint64_t seed) {
        dim = d;
        max_len = L;
        vocab.clear();
        vocab["sks"] = kSks;
        int next = 3;
        std::vector<std::string> all;
        for (const auto& c : corpus)
            for (auto& tok : tokenize(c)) all.push_back(tok);
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        for (const auto& tok : all)
            if (!vocab.count(tok)) vocab[tok] = next++;

        const int V = next;
        Rng rng(derive_seed(seed, "embedder-init"));
        Tensor tbl({V, dim});
        for (double& v : tbl.data) v = 0.5 * rng.normal();
        for (int j = 0; j < dim; ++j) tbl.at2(kPad, j) = 0.0;  // pad row stays zero
        table = Parameter("emb.table", std::move(tbl));
        table.trainable = false;  // only the sks row ever trains (DreamBooth)
    }

    int vocab_size() const { return table.value.dim(0); }

    int token_id(const std::string& tok) const {
        auto it = vocab.find(tok);
        return it == vocab.end() ? kUnk : it->second;
    }

    std::vector<int> prompt_ids(const std::string& caption) const {
        auto toks = tokenize(caption);
        if (toks.empty()) throw RuntimeError("embed_prompt: empty caption");
        std::vector<int> ids(static_cast<size_t>(max_len), kPad);
        for (size_t i = 0; i < toks.size() && i < static_cast<size_t>(max_len); ++i)
            ids[i] = token_id(toks[i]);
        return ids;
    }

    PromptEmbedding embed(const std::string& caption) const {
        PromptEmbedding pe;
        pe.ids = prompt_ids(caption);
        pe.emb = Tensor({max_len, dim});
        pe.mask.assign(static_cast<size_t>(max_len), 0);
        for (int i = 0; i < max_len; ++i) {
            const int id = pe.ids[static_cast<size_t>(i)];
            if (id != kPad) {
                pe.mask[static_cast<size_t>(i)] = 1;
                ++pe.valid_count;
            }
            for (int j = 0; j < dim; ++j) pe.emb.at2(i, j) = table.value.at2(id, j);
        }
        return pe;
    }

    /// Stacks embeddings for a batch of captions into N x L x d.
    Tensor embed_batch(const std::vector<std::string>& captions) const {
        Tensor out({static_cast<int>(captions.size()), max_len, dim});
        for (size_t i = 0; i < captions.size(); ++i) {
            PromptEmbedding pe = embed(captions[i]);
            std::copy(pe.emb.data.begin(), pe.emb.data.end(),
                      out.data.begin() + static_cast<int64_t>(i) * max_len * dim);
        }
        return out;
    }

    /// On-tape embedding batch; gradients reach the table (masked to the sks
    /// row by the caller's optimizer setup).
    VarId embed_batch_on_tape(Tape& t, const std::vector<std::string>& captions) {
        VarId tbl = t.leaf(table);
        std::vector<VarId> items;
        items.reserve(captions.size());
        for (const auto& c : captions) items.push_back(t.gather_rows(tbl, prompt_ids(c)));
        return t.stack_rows(items);
    }
};

inline PromptEmbedding embed_prompt(const TextEmbedder& e, const std::string& caption) {
    return e.embed(caption);
}

// ----------------------------------------------------------------------------
// Conditional denoiser: small U-Net over the 4-channel latent with sinusoidal
// timestep conditioning and one cross-attention block at the bottleneck.
// ----------------------------------------------------------------------------

struct DenoiserConfig {
    int latent_channels = 4;
    int base_channels = 24;
    int time_dim = 32;
    int token_dim = 64;
    int attn_dim = 32;
};

inline Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
            const double a = static_cast<double>(ts[i]) * freq;
            out.at2(static_cast<int>(i), j) = std::sin(a);
            out.at2(static_cast<int>(i), half + j) = std::cos(a);
        }
    }
    return out;
}

struct Denoiser {
    DenoiserConfig cfg;
    Conv2dLayer enc1a, enc1b, enc2a, enc2b, dec1a, dec1b, out_conv;
    LinearLayer tproj1, tproj2, tproj3;
    Parameter attn_wq, attn_bq, attn_wk, attn_bk, attn_wv, attn_bv, attn_wo, attn_bo;

    Denoiser() = default;
    Denoiser(const DenoiserConfig& c, uint64_t seed) : cfg(c) {
        Rng rng(derive_seed(seed, "denoiser-init"));
        const int C = c.base_channels, C2 = 2 * c.base_channels;
        enc1a = Conv2dLayer("den.enc1a", c.latent_channels, C, 3, 1, 1, rng);
        enc1b = Conv2dLayer("den.enc1b", C, C, 3, 1, 1, rng);
        enc2a = Conv2dLayer("den.enc2a", C, C2, 3, 1, 1, rng);
        enc2b = Conv2dLayer("den.enc2b", C2, C2, 3, 1, 1, rng);
        dec1a = Conv2dLayer("den.dec1a", C2 + C, C, 3, 1, 1, rng);
        dec1b = Conv2dLayer("den.dec1b", C, C, 3, 1, 1, rng);
        // Zero-initialized output conv: the untrained net predicts zero noise.
        out_conv = Conv2dLayer("den.out", C, c.latent_channels, 3, 1, 1, rng, /*zero_init=*/true);
        tproj1 = LinearLayer("den.tproj1", c.time_dim, C, rng);
        tproj2 = LinearLayer("den.tproj2", c.time_dim, C2, rng);
        tproj3 = LinearLayer("den.tproj3", c.time_dim, C, rng);

        auto pmat = [&rng](const std::string& n, int r, int cdim) {
            Tensor w({r, cdim});
            const double std = std::sqrt(1.0 / static_cast<double>(r));
            for (double& v : w.data) v = std * rng.normal();
            return Parameter(n, std::move(w));
        };
        const int dk = c.attn_dim;
        attn_wq = pmat("den.attn.wq", C2, dk);
        attn_bq = Parameter("den.attn.bq", Tensor::zeros({dk}));
        attn_wk = pmat("den.attn.wk", c.token_dim, dk);
        attn_bk = Parameter("den.attn.bk", Tensor::zeros({dk}));
        attn_wv = pmat("den.attn.wv", c.token_dim, dk);
        attn_bv = Parameter("den.attn.bv", Tensor::zeros({dk}));
        attn_wo = pmat("den.attn.wo", dk, C2);
        attn_bo = Parameter("den.attn.bo", Tensor::zeros({C2}));
    }

    /// Builds the denoiser graph. `tokens` is an N x L x d tape node (constant
    /// for frozen conditioning, gathered rows when the sks row trains).
    VarId forward(Tape& t, VarId z, const std::vector<int>& ts, VarId tokens) {
        const Tensor& Z = t.val(z);
        if (Z.ndim() != 4 || Z.dim(1) != cfg.latent_channels)
            throw ShapeError("denoiser: expected N x " + std::to_string(cfg.latent_channels) + " latent input");
        if (static_cast<int>(ts.size()) != Z.dim(0))
            throw ShapeError("denoiser: one timestep per batch item required");
        VarId temb = t.constant(sinusoidal_embedding(ts, cfg.time_dim));

        VarId h1 = t.silu(t.add_nc(enc1a.forward(t, z), tproj1.forward(t, temb)));
        h1 = t.silu(enc1b.forward(t, h1));
        VarId h2 = t.maxpool2(h1);
        h2 = t.silu(t.add_nc(enc2a.forward(t, h2), tproj2.forward(t, temb)));
        h2 = t.silu(enc2b.forward(t, h2));
        h2 = t.cross_attention(h2, tokens, t.leaf(attn_wq), t.leaf(attn_bq), t.leaf(attn_wk),
                               t.leaf(attn_bk), t.leaf(attn_wv), t.leaf(attn_bv), t.leaf(attn_wo),
                               t.leaf(attn_bo));
        VarId u = t.concat_channels(t.upsample_nearest2(h2), h1);
        u = t.silu(t.add_nc(dec1a.forward(t, u), tproj3.forward(t, temb)));
        u = t.silu(dec1b.forward(t, u));
        return out_conv.forward(t, u);
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* l : {&enc1a, &enc1b, &enc2a, &enc2b, &dec1a, &dec1b, &out_conv}) l->collect(out);
        for (auto* l : {&tproj1, &tproj2, &tproj3}) l->collect(out);
        for (auto* p : {&attn_wq, &attn_bq, &attn_wk, &attn_bk, &attn_wv, &attn_bv, &attn_wo, &attn_bo})
            out.push_back(p);
        return out;
    }
};

/// Deterministic single-latent noise prediction (evaluation mode).
inline Tensor predict_noise(Denoiser& den, const Tensor& z_chw, int t_step,
                            const PromptEmbedding& cond) {
    Tape t;
    VarId z = t.constant(z_chw.reshaped({1, z_chw.dim(0), z_chw.dim(1), z_chw.dim(2)}));
    Tensor tok = cond.emb.reshaped({1, cond.emb.dim(0), cond.emb.dim(1)});
    VarId out = den.forward(t, z, {t_step}, t.constant(tok));
    const Tensor& o = t.val(out);
    return o.reshaped({o.dim(1), o.dim(2), o.dim(3)});
}

// ----------------------------------------------------------------------------
// Downstream classifier: four conv blocks (BN + ReLU), max-pool after the
// first three, adaptive average pool, dropout 0.5, linear head. The
// penultimate feature width equals the last conv's channel count.
// ----------------------------------------------------------------------------

struct ClassifierConfig {
    int in_channels = 3;
    std::vector<int> channels = {32, 64, 128, 256};
    int num_classes = 2;
    double dropout = 0.5;
};

struct Classifier {
    ClassifierConfig cfg;
    Conv2dLayer c1, c2, c3, c4;
    BatchNorm2dLayer b1, b2, b3, b4;
    LinearLayer head;

    Classifier() = default;
    Classifier(const ClassifierConfig& c, uint64_t seed) : cfg(c) {
        Rng rng(derive_seed(seed, "classifier-init"));
        const auto& ch = c.channels;
        c1 = Conv2dLayer("cls.c1", c.in_channels, ch[0], 3, 1, 1, rng);
        c2 = Conv2dLayer("cls.c2", ch[0], ch[1], 3, 1, 1, rng);
        c3 = Conv2dLayer("cls.c3", ch[1], ch[2], 3, 1, 1, rng);
        c4 = Conv2dLayer("cls.c4", ch[2], ch[3], 3, 1, 1, rng);
        b1 = BatchNorm2dLayer("cls.b1", ch[0]);
        b2 = BatchNorm2dLayer("cls.b2", ch[1]);
        b3 = BatchNorm2dLayer("cls.b3", ch[2]);
        b4 = BatchNorm2dLayer("cls.b4", ch[3]);
        head = LinearLayer("cls.head", ch[3], c.num_classes, rng);
    }

    int feature_dim() const { return cfg.channels.back(); }

    /// Penultimate features, N x channels.back().
    VarId features(Tape& t, VarId x, bool training, bool update_running = true) {
        VarId h = t.maxpool2(t.relu(b1.forward(t, c1.forward(t, x), training, update_running)));
        h = t.maxpool2(t.relu(b2.forward(t, c2.forward(t, h), training, update_running)));
        h = t.maxpool2(t.relu(b3.forward(t, c3.forward(t, h), training, update_running)));
        h = t.relu(b4.forward(t, c4.forward(t, h), training, update_running));
        return t.global_avg_pool(h);
    }

    VarId logits(Tape& t, VarId x, bool training, const Tensor* dropout_mask = nullptr,
                 bool update_running = true) {
        VarId f = features(t, x, training, update_running);
        if (training && dropout_mask) f = t.mul(f, t.constant(*dropout_mask));
        return head.forward(t, f);
    }

    Tensor features_eval(const Tensor& images) {
        Tape t;
        return t.val(features(t, t.constant(images), false));
    }

    Tensor logits_eval(const Tensor& images) {
        Tape t;
        return t.val(logits(t, t.constant(images), false));
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* l : {&c1, &c2, &c3, &c4}) l->collect(out);
        for (auto* l : {&b1, &b2, &b3, &b4}) l->collect(out);
        head.collect(out);
        return out;
    }

    std::vector<std::pair<std::string, Tensor*>> buffers() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (auto* l : {&b1, &b2, &b3, &b4}) l->collect_buffers(out);
        return out;
    }
};

// ----------------------------------------------------------------------------
// Reward model: conv stack over the 4-channel latent ending in global average
// pooling, then a two-layer head with dropout 0.3 and a scalar output.
// ----------------------------------------------------------------------------

struct RewardModelConfig {
    int in_channels = 4;
    std::vector<int> channels = {32, 64, 128, 256};
    int hidden = 128;
    double dropout = 0.3;
};

struct RewardModel {
    RewardModelConfig cfg;
    Conv2dLayer c1, c2, c3, c4;
    BatchNorm2dLayer b1, b2, b3, b4;
    LinearLayer fc1, fc2;

    RewardModel() = default;
    RewardModel(const RewardModelConfig& c, uint64_t seed) : cfg(c) {
        Rng rng(derive_seed(seed, "reward-init"));
        const auto& ch = c.channels;
        c1 = Conv2dLayer("rew.c1", c.in_channels, ch[0], 3, 1, 1, rng);
        c2 = Conv2dLayer("rew.c2", ch[0], ch[1], 3, 1, 1, rng);
        c3 = Conv2dLayer("rew.c3", ch[1], ch[2], 3, 1, 1, rng);
        c4 = Conv2dLayer("rew.c4", ch[2], ch[3], 3, 1, 1, rng);
        b1 = BatchNorm2dLayer("rew.b1", ch[0]);
        b2 = BatchNorm2dLayer("rew.b2", ch[1]);
        b3 = BatchNorm2dLayer("rew.b3", ch[2]);
        b4 = BatchNorm2dLayer("rew.b4", ch[3]);
        fc1 = LinearLayer("rew.fc1", ch[3], c.hidden, rng);
        fc2 = LinearLayer("rew.fc2", c.hidden, 1, rng);
    }

    /// N x 1 reward predictions.
    VarId forward(Tape& t, VarId z, bool training, const Tensor* dropout_mask = nullptr,
                  bool update_running = true) {
        VarId h = t.maxpool2(t.relu(b1.forward(t, c1.forward(t, z), training, update_running)));
        h = t.maxpool2(t.relu(b2.forward(t, c2.forward(t, h), training, update_running)));
        h = t.maxpool2(t.relu(b3.forward(t, c3.forward(t, h), training, update_running)));
        h = t.relu(b4.forward(t, c4.forward(t, h), training, update_running));
        VarId f = t.global_avg_pool(h);
        f = t.relu(fc1.forward(t, f));
        if (training && dropout_mask) f = t.mul(f, t.constant(*dropout_mask));
        return fc2.forward(t, f);
    }

    /// Scalar prediction for one latent, evaluation mode.
    double predict(const Tensor& latent_chw) {
        Tape t;
        VarId z = t.constant(latent_chw.reshaped({1, latent_chw.dim(0), latent_chw.dim(1), latent_chw.dim(2)}));
        return t.val(forward(t, z, false))[0];
    }

    std::vector<double> predict_batch(const Tensor& latents_nchw) {
        Tape t;
        VarId out = forward(t, t.constant(latents_nchw), false);
        const Tensor& o = t.val(out);
        return std::vector<double>(o.data.begin(), o.data.end());
    }

    std::vector<Parameter*> params() {
        std::vector<Parameter*> out;
        for (auto* l : {&c1, &c2, &c3, &c4}) l->collect(out);
        for (auto* l : {&b1, &b2, &b3, &b4}) l->collect(out);
        fc1.collect(out);
        fc2.collect(out);
        return out;
    }

    std::vector<std::pair<std::string, Tensor*>> buffers() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (auto* l : {&b1, &b2, &b3, &b4}) l->collect_buffers(out);
        return out;
    }
};

} // namespace agrigen
