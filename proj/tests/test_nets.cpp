#include <catch2/catch_amalgamated.hpp>

#include "agrigen/nets.hpp"
#include "agrigen/train.hpp"
#include "support/gradcheck.hpp"

using namespace agrigen;

TEST_CASE("KL term closed form", "[nets]") {
    SECTION("zero mu and logvar give zero KL") {
        Tape t;
        Parameter mu("mu", Tensor::zeros({1, 4}));
        Parameter lv("lv", Tensor::zeros({1, 4}));
        VarId kl = t.kl_standard_normal(t.leaf(mu), t.leaf(lv));
        REQUIRE(t.val(kl)[0] == Catch::Approx(0.0).margin(1e-15));
    }
    SECTION("mu=1, logvar=0 single element contributes 0.5") {
        Tape t;
        Parameter mu("mu", Tensor::full({1, 1}, 1.0));
        Parameter lv("lv", Tensor::zeros({1, 1}));
        VarId kl = t.kl_standard_normal(t.leaf(mu), t.leaf(lv));
        REQUIRE(t.val(kl)[0] == Catch::Approx(0.5).epsilon(1e-12));
    }
    SECTION("random 4-element case matches a scalar loop oracle") {
        Rng rng(7);
        Tensor mu_t = rng.normal_tensor({1, 4});
        Tensor lv_t = rng.normal_tensor({1, 4}, 0.5);
        double oracle = 0.0;
        for (int i = 0; i < 4; ++i)
            oracle += 0.5 * (std::exp(lv_t[i]) + mu_t[i] * mu_t[i] - 1.0 - lv_t[i]);
        Tape t;
        Parameter mu("mu", mu_t);
        Parameter lv("lv", lv_t);
        VarId kl = t.kl_standard_normal(t.leaf(mu), t.leaf(lv));
        REQUIRE(t.val(kl)[0] == Catch::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("vae elbo components and gradient", "[nets]") {
    VaeConfig vc;
    vc.base_channels = 2;
    Vae vae(vc, 99);
    Rng rng(5);
    Tensor x = rng.uniform_tensor({2, 3, 16, 16}, 0.0, 1.0);
    Tensor zn = rng.normal_tensor({2, 4, 2, 2});

    Tape t;
    ElboLoss l = vae_elbo_loss(t, vae, x, zn, 1e-3);
    REQUIRE(std::isfinite(t.val(l.total)[0]));
    REQUIRE(t.val(l.total)[0] == Catch::Approx(l.recon + 1e-3 * l.kl).epsilon(1e-12));
    REQUIRE(l.recon > 0.0);

    // shape mismatch on the reparameterization noise
    REQUIRE_THROWS_AS(
        [&] {
            Tape t2;
            vae_elbo_loss(t2, vae, x, rng.normal_tensor({2, 4, 4, 4}), 1e-3);
        }(),
        ShapeError);
}

TEST_CASE("embed_prompt behavior", "[nets]") {
    TextEmbedder emb;
    emb.build({"a healthy canola plant", "a soybean plant in an outdoor field"}, 8, 6, 42);

    SECTION("sks row lookup") {
        PromptEmbedding pe = emb.embed("a sks canola plant");
        REQUIRE(pe.valid_count == 4);
        // second token row must be exactly the sks table row
        for (int j = 0; j < emb.dim; ++j)
            REQUIRE(pe.emb.at2(1, j) == emb.table.value.at2(TextEmbedder::kSks, j));
    }
    SECTION("empty caption rejected") {
        REQUIRE_THROWS_AS(emb.embed(""), RuntimeError);
        REQUIRE_THROWS_AS(emb.embed("  ,.  "), RuntimeError);
    }
    SECTION("unknown words differ only at the UNK position") {
        PromptEmbedding a = emb.embed("a healthy canola plant");
        PromptEmbedding b = emb.embed("a galactic canola plant");
        for (int i = 0; i < emb.max_len; ++i)
            for (int j = 0; j < emb.dim; ++j) {
                if (i == 1) continue;
                REQUIRE(a.emb.at2(i, j) == b.emb.at2(i, j));
            }
        // and the UNK row is used at position 1 of b
        for (int j = 0; j < emb.dim; ++j)
            REQUIRE(b.emb.at2(1, j) == emb.table.value.at2(TextEmbedder::kUnk, j));
    }
    SECTION("padding rows embed to zero") {
        PromptEmbedding a = emb.embed("plant");
        for (int i = 1; i < emb.max_len; ++i)
            for (int j = 0; j < emb.dim; ++j) REQUIRE(a.emb.at2(i, j) == 0.0);
    }
    SECTION("truncation at max length") {
        PromptEmbedding a = emb.embed("a a a a a a a a a a");
        REQUIRE(a.valid_count == emb.max_len);
    }
}

TEST_CASE("denoiser basics", "[nets]") {
    DenoiserConfig dc;
    dc.base_channels = 8;
    dc.token_dim = 8;
    dc.attn_dim = 4;
    Denoiser den(dc, 3);
    TextEmbedder emb;
    emb.build({"left mode", "right mode"}, 8, 6, 3);
    Rng rng(8);
    Tensor z = rng.normal_tensor({4, 8, 8});

    SECTION("zero-initialized output conv predicts zero noise") {
        Tensor out = predict_noise(den, z, 5, emb.embed("left mode"));
        REQUIRE(out.shape == z.shape);
        REQUIRE(out.norm() == 0.0);
    }
    SECTION("deterministic in evaluation mode") {
        // give the output path nonzero weights first
        Rng wr(4);
        for (double& v : den.out_conv.w.value.data) v = 0.05 * wr.normal();
        Tensor a = predict_noise(den, z, 7, emb.embed("left mode"));
        Tensor b = predict_noise(den, z, 7, emb.embed("left mode"));
        REQUIRE(max_abs_diff(a, b) == 0.0);
        // conditioning is live: different prompts change the output
        Tensor c = predict_noise(den, z, 7, emb.embed("right mode"));
        REQUIRE(max_abs_diff(a, c) > 0.0);
    }
    SECTION("shape errors") {
        Tensor bad = rng.normal_tensor({3, 8, 8});
        REQUIRE_THROWS_AS(predict_noise(den, bad, 5, emb.embed("left mode")), ShapeError);
    }
}

TEST_CASE("clip_gradients", "[nets]") {
    SECTION("below threshold unchanged") {
        Parameter p("p", Tensor::zeros({2}));
        p.grad = Tensor({2}, {0.18, 0.24});  // norm 0.3
        clip_gradients({&p.grad}, 0.5);
        REQUIRE(p.grad[0] == Catch::Approx(0.18));
        REQUIRE(p.grad[1] == Catch::Approx(0.24));
    }
    SECTION("g=(3,4) at threshold 0.5 becomes (0.3,0.4)") {
        Parameter p("p", Tensor::zeros({2}));
        p.grad = Tensor({2}, {3.0, 4.0});
        const double pre = clip_gradients({&p.grad}, 0.5);
        REQUIRE(pre == Catch::Approx(5.0));
        REQUIRE(p.grad[0] == Catch::Approx(0.3).epsilon(1e-12));
        REQUIRE(p.grad[1] == Catch::Approx(0.4).epsilon(1e-12));
    }
    SECTION("random 100-dim vector: post norm = min(norm, 0.5)") {
        Rng rng(17);
        Parameter p("p", Tensor::zeros({100}));
        p.grad = rng.normal_tensor({100});
        const double pre = p.grad.norm();
        clip_gradients({&p.grad}, 0.5);
        REQUIRE(p.grad.norm() == Catch::Approx(std::min(pre, 0.5)).margin(1e-9));
    }
    SECTION("global norm across several tensors") {
        Parameter a("a", Tensor::zeros({1})), b("b", Tensor::zeros({1}));
        a.grad = Tensor({1}, {3.0});
        b.grad = Tensor({1}, {4.0});
        clip_gradients({&a.grad, &b.grad}, 0.5);
        REQUIRE(a.grad[0] == Catch::Approx(0.3).epsilon(1e-12));
        REQUIRE(b.grad[0] == Catch::Approx(0.4).epsilon(1e-12));
    }
}

TEST_CASE("EMA update", "[nets]") {
    Parameter p("p", Tensor::full({3}, 1.0));
    OptimConfig oc;
    oc.ema_decay = 0.999;

    SECTION("shadow equal to params is a fixed point") {
        TrainState st({&p}, oc);
        st.ema_update();
        REQUIRE(max_abs_diff(st.ema_shadow()[0], p.value) == 0.0);
    }
    SECTION("one update from zero shadow") {
        TrainState st({&p}, oc);
        st.ema_shadow()[0].fill(0.0);
        st.ema_update();
        REQUIRE(st.ema_shadow()[0][0] == Catch::Approx(0.001).epsilon(1e-12));
    }
    SECTION("k updates follow the geometric series") {
        TrainState st({&p}, oc);
        st.ema_shadow()[0].fill(0.0);
        const int k = 250;
        for (int i = 0; i < k; ++i) st.ema_update();
        const double expected = 1.0 * (1.0 - std::pow(0.999, k));
        REQUIRE(st.ema_shadow()[0][0] == Catch::Approx(expected).margin(1e-9));
        // convergence bound |shadow - p| = |s0 - p| * 0.999^k
        REQUIRE(std::abs(st.ema_shadow()[0][0] - 1.0) ==
                Catch::Approx(std::pow(0.999, k)).margin(1e-9));
    }
}

TEST_CASE("AdamW optimizer", "[nets]") {
    SECTION("zero gradient, zero decay leaves parameters unchanged") {
        Parameter p("p", Tensor::full({2}, 0.7));
        OptimConfig oc;
        oc.lr = 0.1;
        TrainState st({&p}, oc);
        p.zero_grad();
        st.step();
        REQUIRE(p.value[0] == Catch::Approx(0.7));
    }
    SECTION("scalar parameter, constant gradient: two hand-stepped updates") {
        Parameter p("p", Tensor::full({1}, 0.0));
        OptimConfig oc;
        oc.lr = 0.1;
        oc.beta1 = 0.9;
        oc.beta2 = 0.999;
        oc.eps = 1e-8;
        TrainState st({&p}, oc);

        // oracle: hand-stepped bias-corrected update with g = 1
        double m = 0.0, v = 0.0, theta = 0.0;
        for (int step = 1; step <= 2; ++step) {
            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            const double mhat = m / (1.0 - std::pow(0.9, step));
            const double vhat = v / (1.0 - std::pow(0.999, step));
            theta -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);

            p.grad.fill(1.0);
            st.step();
            REQUIRE(p.value[0] == Catch::Approx(theta).epsilon(1e-12));
        }
    }
    SECTION("decoupled decay shrinks parameters by (1 - lr*wd) per step") {
        Parameter p("p", Tensor::full({1}, 2.0));
        OptimConfig oc;
        oc.lr = 0.1;
        oc.weight_decay = 0.5;
        TrainState st({&p}, oc);
        p.zero_grad();
        st.step();
        REQUIRE(p.value[0] == Catch::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
        st.step();
        REQUIRE(p.value[0] == Catch::Approx(2.0 * std::pow(1.0 - 0.05, 2)).epsilon(1e-12));
    }
    SECTION("non-finite gradients abort") {
        Parameter p("p", Tensor::full({1}, 1.0));
        TrainState st({&p}, OptimConfig{});
        p.grad.fill(std::numeric_limits<double>::quiet_NaN());
        REQUIRE_THROWS_AS(st.step(), DivergenceError);
    }
}

TEST_CASE("classifier feature width is resolution independent", "[nets]") {
    ClassifierConfig cc;
    cc.num_classes = 3;
    Classifier cls(cc, 21);
    Rng rng(22);
    for (int size : {32, 64}) {
        Tensor x = rng.uniform_tensor({2, 3, size, size}, 0.0, 1.0);
        Tensor f = cls.features_eval(x);
        REQUIRE(f.shape == std::vector<int>{2, 256});
        Tensor lg = cls.logits_eval(x);
        REQUIRE(lg.shape == std::vector<int>{2, 3});
    }
}

TEST_CASE("reward model conforms to the published layer shapes", "[nets]") {
    RewardModel rm(RewardModelConfig{}, 23);
    Rng rng(24);

    // shape trace at the reference 4x64x64 input: 32x32x32, 64x16x16,
    // 128x8x8, 256x1x1 ahead of the head
    Tensor z = rng.normal_tensor({1, 4, 64, 64});
    Tape t;
    VarId x = t.constant(z);
    VarId h1 = t.maxpool2(t.relu(rm.b1.forward(t, rm.c1.forward(t, x), false)));
    REQUIRE(t.val(h1).shape == std::vector<int>{1, 32, 32, 32});
    VarId h2 = t.maxpool2(t.relu(rm.b2.forward(t, rm.c2.forward(t, h1), false)));
    REQUIRE(t.val(h2).shape == std::vector<int>{1, 64, 16, 16});
    VarId h3 = t.maxpool2(t.relu(rm.b3.forward(t, rm.c3.forward(t, h2), false)));
    REQUIRE(t.val(h3).shape == std::vector<int>{1, 128, 8, 8});
    VarId h4 = t.global_avg_pool(t.relu(rm.b4.forward(t, rm.c4.forward(t, h3), false)));
    REQUIRE(t.val(h4).shape == std::vector<int>{1, 256});

    // single scalar out
    const double r = rm.predict(z.reshaped({4, 64, 64}));
    REQUIRE(std::isfinite(r));

    // also works on the desk-scale 4x8x8 latent
    Tensor small = rng.normal_tensor({4, 8, 8});
    REQUIRE(std::isfinite(rm.predict(small)));
}

TEST_CASE("miniature elbo gradient against finite differences", "[nets]") {
    VaeConfig vc;
    vc.base_channels = 1;
    Vae vae(vc, 31);
    Rng rng(32);
    Tensor x = rng.uniform_tensor({1, 3, 8, 8}, 0.2, 0.8);
    Tensor zn = rng.normal_tensor({1, 4, 1, 1});

    auto params = vae.params();
    auto loss = [&] {
        Tape t;
        return t.val(vae_elbo_loss(t, vae, x, zn, 1e-2).total)[0];
    };
    auto backward = [&] {
        for (auto* p : params) p->zero_grad();
        Tape t;
        t.backward(vae_elbo_loss(t, vae, x, zn, 1e-2).total);
    };
    REQUIRE(gradcheck::check(params, loss, backward) < 1e-4);
}
