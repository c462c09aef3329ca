#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "agrigen/diffusion.hpp"
#include "support/gradcheck.hpp"

using namespace agrigen;

namespace {

DiffusionModelConfig tiny_config() {
    DiffusionModelConfig c;
    c.image_size = 32;                 // latents 4x4x4
    c.vae.base_channels = 4;
    c.den.base_channels = 8;
    c.den.time_dim = 8;
    c.den.attn_dim = 8;
    c.emb_dim = 16;
    c.emb_len = 8;
    c.T = 10;
    return c;
}

/// Flat-color images with per-image brightness; a one-mode toy distribution.
Tensor toy_images(int n, int size, uint64_t seed) {
    Rng rng(seed);
    Tensor imgs({n, 3, size, size});
    for (int i = 0; i < n; ++i) {
        const double r = rng.uniform(0.2, 0.4), g = rng.uniform(0.5, 0.7), b = rng.uniform(0.1, 0.2);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                imgs.at4(i, 0, y, x) = r + 0.05 * std::sin(0.3 * x);
                imgs.at4(i, 1, y, x) = g + 0.05 * std::cos(0.2 * y);
                imgs.at4(i, 2, y, x) = b;
            }
    }
    return imgs;
}

} // namespace

TEST_CASE("ddpm loss oracle cases", "[diffusion]") {
    auto m = DiffusionModel::create(tiny_config(), {"a toy plant"}, 77);
    Rng rng(7);
    Tensor latents = rng.normal_tensor({4, 4, 4, 4});

    SECTION("zero-noise draws with the zero-initialized denoiser give zero loss") {
        NoiseDraws d;
        d.ts = {1, 3, 5, 7};
        d.eps = Tensor::zeros({4, 4, 4, 4});
        Tape t;
        VarId tokens = t.constant(m->embedder.embed_batch(
            std::vector<std::string>(4, "a toy plant")));
        VarId loss = ddpm_loss(t, *m, latents, d, tokens);
        REQUIRE(t.val(loss)[0] == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("zero prediction against standard noise: loss near 1") {
        // E[mean eps^2] = 1; 3-sigma band for 4*64 elements
        NoiseDraws d = draw_noise(rng, 4, {4, 4, 4}, m->schedule.T);
        Tape t;
        VarId tokens = t.constant(m->embedder.embed_batch(
            std::vector<std::string>(4, "a toy plant")));
        VarId loss = ddpm_loss(t, *m, latents, d, tokens);
        const double n_el = 4.0 * 64.0;
        REQUIRE(std::abs(t.val(loss)[0] - 1.0) < 3.0 * std::sqrt(2.0 / n_el));
    }
}

TEST_CASE("ddpm training makes progress on a toy set", "[diffusion][slow]") {
    auto cfg = tiny_config();
    OptimConfig opt;
    opt.lr = 2e-3;
    opt.clip = 1.0;
    auto m = DiffusionModel::create(cfg, {"a toy plant"}, 5, opt);

    Tensor imgs = toy_images(16, cfg.image_size, 11);
    TrainingBatch batch;
    batch.captions.assign(8, "a toy plant");
    batch.tags.assign(8, Provenance::generic);

    Rng rng(13);
    std::vector<double> losses;
    for (int s = 0; s < 200; ++s) {
        Tensor bs({8, 3, cfg.image_size, cfg.image_size});
        for (int b = 0; b < 8; ++b) {
            const int idx = static_cast<int>(rng.uniform_int(0, 15));
            std::copy(imgs.data.begin() + static_cast<int64_t>(idx) * 3 * 32 * 32,
                      imgs.data.begin() + static_cast<int64_t>(idx + 1) * 3 * 32 * 32,
                      bs.data.begin() + static_cast<int64_t>(b) * 3 * 32 * 32);
        }
        batch.images = bs;
        losses.push_back(ddpm_training_step(*m, batch, rng, s));
    }
    auto avg = [&](int from, int to) {
        double s = 0.0;
        for (int i = from; i < to; ++i) s += losses[static_cast<size_t>(i)];
        return s / (to - from);
    };
    REQUIRE(avg(190, 200) < avg(0, 10));
}

TEST_CASE("dreambooth loss weighting", "[diffusion]") {
    auto m = DiffusionModel::create(tiny_config(), {"a sks plant", "a plant"}, 21);
    Rng rng(22);
    Tensor subj = rng.normal_tensor({3, 4, 4, 4});
    Tensor prior = rng.normal_tensor({3, 4, 4, 4});
    std::vector<std::string> subj_cap(3, "a sks plant");
    std::vector<std::string> prior_cap(3, "a plant");
    NoiseDraws ds = draw_noise(rng, 3, {4, 4, 4}, m->schedule.T);
    NoiseDraws dp = draw_noise(rng, 3, {4, 4, 4}, m->schedule.T);

    SECTION("lambda=0 equals the plain subject loss") {
        Tape t;
        DreamboothLoss l0 = dreambooth_loss(t, *m, subj, subj_cap, Tensor(), {}, 0.0, ds, {});
        Tape t2;
        VarId tokens = t2.constant(m->embedder.embed_batch(subj_cap));
        VarId plain = ddpm_loss(t2, *m, subj, ds, tokens);
        REQUIRE(t.val(l0.total)[0] == Catch::Approx(t2.val(plain)[0]).epsilon(1e-12));
    }
    SECTION("lambda=1 with identical batches doubles the single-batch loss") {
        Tape t;
        DreamboothLoss l = dreambooth_loss(t, *m, subj, subj_cap, subj, subj_cap, 1.0, ds, ds);
        REQUIRE(t.val(l.total)[0] == Catch::Approx(2.0 * l.subject).epsilon(1e-12));
    }
    SECTION("affine in lambda") {
        Tape ta, tb, tc;
        const double l0 = ta.val(dreambooth_loss(ta, *m, subj, subj_cap, prior, prior_cap, 0.0, ds, dp).total)[0];
        const double l1 = tb.val(dreambooth_loss(tb, *m, subj, subj_cap, prior, prior_cap, 1.0, ds, dp).total)[0];
        const double lh = tc.val(dreambooth_loss(tc, *m, subj, subj_cap, prior, prior_cap, 0.5, ds, dp).total)[0];
        REQUIRE(lh == Catch::Approx(0.5 * (l0 + l1)).epsilon(1e-12));
        Tape td;
        DreamboothLoss parts = dreambooth_loss(td, *m, subj, subj_cap, prior, prior_cap, 0.7, ds, dp);
        REQUIRE(td.val(parts.total)[0] ==
                Catch::Approx(parts.subject + 0.7 * parts.prior).epsilon(1e-12));
    }
    SECTION("subject caption without sks rejected") {
        Tape t;
        REQUIRE_THROWS_AS(
            dreambooth_loss(t, *m, subj, {"a plant", "a plant", "a plant"}, prior, prior_cap, 1.0, ds, dp),
            RuntimeError);
    }
    SECTION("empty prior with positive lambda rejected") {
        Tape t;
        REQUIRE_THROWS_AS(dreambooth_loss(t, *m, subj, subj_cap, Tensor(), {}, 1.0, ds, {}),
                          RuntimeError);
    }
}

TEST_CASE("frozen-module guarantee", "[diffusion]") {
    auto cfg = tiny_config();
    auto m = DiffusionModel::create(cfg, {"a sks plant", "a generic plant"}, 31);
    const uint64_t vae_sum = m->vae_checksum();
    const uint64_t emb_sum = m->embedder_checksum();

    Rng rng(33);
    TrainingBatch batch;
    batch.images = toy_images(4, cfg.image_size, 44);
    batch.captions.assign(4, "a generic plant");
    batch.tags.assign(4, Provenance::generic);
    for (int s = 0; s < 5; ++s) ddpm_training_step(*m, batch, rng, s);
    REQUIRE(m->vae_checksum() == vae_sum);
    REQUIRE(m->embedder_checksum() == emb_sum);

    // DreamBooth moves only the sks row of the table.
    Tensor table_before = m->embedder.table.value;
    TrainingBatch subject;
    subject.images = toy_images(2, cfg.image_size, 45);
    subject.captions.assign(2, "a sks plant");
    subject.tags.assign(2, Provenance::subject);
    TrainingBatch prior;
    prior.images = toy_images(2, cfg.image_size, 46);
    prior.captions.assign(2, "a generic plant");
    prior.tags.assign(2, Provenance::prior);
    for (int s = 0; s < 3; ++s) dreambooth_training_step(*m, subject, prior, 1.0, rng);

    REQUIRE(m->vae_checksum() == vae_sum);
    const Tensor& table_after = m->embedder.table.value;
    double sks_delta = 0.0, other_delta = 0.0;
    for (int r = 0; r < table_after.dim(0); ++r)
        for (int j = 0; j < table_after.dim(1); ++j) {
            const double d = std::abs(table_after.at2(r, j) - table_before.at2(r, j));
            if (r == TextEmbedder::kSks)
                sks_delta += d;
            else
                other_delta += d;
        }
    REQUIRE(sks_delta > 0.0);
    REQUIRE(other_delta == 0.0);
}

TEST_CASE("sampling determinism and seed diversity", "[diffusion]") {
    auto m = DiffusionModel::create(tiny_config(), {"a toy plant"}, 51);
    GenerationRequest req;
    req.prompt = "a toy plant";
    req.seed = 7;

    Tensor a = sample(*m, req);
    Tensor b = sample(*m, req);
    REQUIRE(max_abs_diff(a, b) == 0.0);

    req.seed = 8;
    Tensor c = sample(*m, req);
    REQUIRE(max_abs_diff(a, c) > 0.0);

    req.num_inference_steps = 5;  // != T
    REQUIRE_THROWS_AS(sample(*m, req), RuntimeError);
}

TEST_CASE("img2img strength handling", "[diffusion]") {
    auto cfg = tiny_config();
    auto m = DiffusionModel::create(cfg, {"a toy plant"}, 61);
    Tensor img = toy_images(1, cfg.image_size, 62).reshaped({3, cfg.image_size, cfg.image_size});

    SECTION("strength 0 is an exact VAE round-trip") {
        Img2ImgResult r = img2img(*m, img, "a toy plant", 0.0, 9);
        Tensor mu = m->vae.encode_mu(img);
        REQUIRE(max_abs_diff(r.latent, mu) == 0.0);
        Tensor direct = clamp01(m->vae.decode_one(mu));
        REQUIRE(max_abs_diff(r.image, direct) == 0.0);
    }
    SECTION("strength bounds enforced") {
        REQUIRE_THROWS_AS(img2img(*m, img, "a toy plant", -0.1, 9), RuntimeError);
        REQUIRE_THROWS_AS(img2img(*m, img, "a toy plant", 1.1, 9), RuntimeError);
    }
    SECTION("t* rounding") {
        Img2ImgResult r = img2img(*m, img, "a toy plant", 0.3, 9);
        REQUIRE(r.t_star == 3);
    }
}

TEST_CASE("checkpoint round trip", "[diffusion]") {
    namespace fs = std::filesystem;
    auto cfg = tiny_config();
    auto m = DiffusionModel::create(cfg, {"a toy plant", "a sks plant"}, 71);

    // move weights off their init values so the round trip is non-trivial
    Rng rng(72);
    TrainingBatch batch;
    batch.images = toy_images(4, cfg.image_size, 73);
    batch.captions.assign(4, "a toy plant");
    batch.tags.assign(4, Provenance::generic);
    for (int s = 0; s < 3; ++s) ddpm_training_step(*m, batch, rng, s);

    const fs::path path = fs::temp_directory_path() / "agrigen_test_ckpt.bin";
    m->save(path, {{"config_hash", "deadbeef"}});

    auto m2 = DiffusionModel::load(path);
    REQUIRE(m2->schedule.T == m->schedule.T);
    REQUIRE(m2->embedder.vocab == m->embedder.vocab);
    REQUIRE(m2->den_state->step_count() == m->den_state->step_count());

    // values reload as the float32 quantization of the saved weights
    Tensor expect = m->denoiser.out_conv.w.value;
    expect.quantize_f32();
    REQUIRE(max_abs_diff(m2->denoiser.out_conv.w.value, expect) == 0.0);

    // a reloaded checkpoint samples identically to itself
    GenerationRequest req;
    req.prompt = "a toy plant";
    req.seed = 4;
    Tensor s1 = sample(*m2, req);
    auto m3 = DiffusionModel::load(path);
    Tensor s2 = sample(*m3, req);
    REQUIRE(max_abs_diff(s1, s2) == 0.0);

    fs::remove(path);
}

TEST_CASE("miniature ddpm and dreambooth gradients", "[diffusion]") {
    DiffusionModelConfig cfg = tiny_config();
    cfg.den.base_channels = 2;
    cfg.den.time_dim = 4;
    cfg.den.attn_dim = 2;
    cfg.emb_dim = 4;
    cfg.emb_len = 4;
    auto m = DiffusionModel::create(cfg, {"a sks plant", "a plant"}, 81);
    // give the zero-initialized output conv signal so gradients flow everywhere
    Rng wr(82);
    for (double& v : m->denoiser.out_conv.w.value.data) v = 0.1 * wr.normal();

    Rng rng(83);
    Tensor latents = rng.normal_tensor({2, 4, 4, 4});
    NoiseDraws d = draw_noise(rng, 2, {4, 4, 4}, cfg.T);
    std::vector<std::string> caps{"a sks plant", "a plant"};

    auto params = m->denoiser.params();

    SECTION("ddpm loss gradcheck") {
        auto loss = [&] {
            Tape t;
            VarId tokens = t.constant(m->embedder.embed_batch(caps));
            return t.val(ddpm_loss(t, *m, latents, d, tokens))[0];
        };
        auto backward = [&] {
            for (auto* p : params) p->zero_grad();
            Tape t;
            VarId tokens = t.constant(m->embedder.embed_batch(caps));
            t.backward(ddpm_loss(t, *m, latents, d, tokens));
        };
        REQUIRE(gradcheck::check(params, loss, backward) < 1e-4);
    }

    SECTION("dreambooth loss gradcheck incl. sks row") {
        Tensor prior = rng.normal_tensor({2, 4, 4, 4});
        NoiseDraws dp = draw_noise(rng, 2, {4, 4, 4}, cfg.T);
        std::vector<std::string> scap{"a sks plant", "a sks plant"};
        std::vector<std::string> pcap{"a plant", "a plant"};
        m->embedder.table.trainable = true;
        std::vector<Parameter*> all = params;
        all.push_back(&m->embedder.table);
        auto loss = [&] {
            Tape t;
            return t.val(dreambooth_loss(t, *m, latents, scap, prior, pcap, 0.8, d, dp).total)[0];
        };
        auto backward = [&] {
            for (auto* p : all) p->zero_grad();
            Tape t;
            t.backward(dreambooth_loss(t, *m, latents, scap, prior, pcap, 0.8, d, dp).total);
        };
        REQUIRE(gradcheck::check(all, loss, backward) < 1e-4);
        m->embedder.table.trainable = false;
    }
}
