#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "agrigen/config.hpp"
#include "agrigen/diffusion.hpp"
#include "agrigen/downstream.hpp"
#include "agrigen/metrics.hpp"
#include "agrigen/model_store.hpp"
#include "agrigen/preference.hpp"
#include "agrigen/synthdata.hpp"

namespace agrigen::cli {

namespace fs = std::filesystem;

// ----------------------------------------------------------------------------
// Run-directory lock: one CLI process owns an output directory at a time.
// ----------------------------------------------------------------------------

class DirLock {
  public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        std::ofstream probe(path_, std::ios::out | std::ios::app);
        if (fs::exists(path_) && fs::file_size(path_) > 0)
            throw RuntimeError("run directory is locked: " + dir.string());
        std::ofstream f(path_);
        f << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    fs::path path_;
};

// ---- small helpers -----------------------------------------------------------

struct StageLog {
    std::ofstream file;

    StageLog(const fs::path& out, const std::string& name, const std::string& config_hash) {
        fs::create_directories(out / "logs");
        file.open(out / "logs" / (name + ".jsonl"));
        file << nlohmann::json{{"config", config_hash}, {"tool_version", kToolVersion}}.dump()
             << "\n";
    }
};

inline RunConfig load_config(const std::string& path) {
    if (path.empty()) return RunConfig::parse_string("");
    return RunConfig::parse_file(path);
}

inline DiffusionModelConfig model_config_from(const RunConfig& cfg) {
    DiffusionModelConfig mc;
    mc.image_size = static_cast<int>(cfg.get_int("global", "image_size", 64));
    mc.vae.base_channels = static_cast<int>(cfg.get_int("vae", "base_channels", 16));
    mc.den.base_channels = static_cast<int>(cfg.get_int("denoiser", "base_channels", 24));
    mc.den.time_dim = static_cast<int>(cfg.get_int("denoiser", "time_dim", 32));
    mc.den.attn_dim = static_cast<int>(cfg.get_int("denoiser", "attn_dim", 32));
    mc.emb_dim = static_cast<int>(cfg.get_int("embedder", "dim", 64));
    mc.emb_len = static_cast<int>(cfg.get_int("embedder", "max_len", 16));
    mc.den.token_dim = mc.emb_dim;
    mc.T = static_cast<int>(cfg.get_int("schedule", "steps", 50));
    mc.beta_start = cfg.get_double("schedule", "beta_start", -1.0);
    mc.beta_end = cfg.get_double("schedule", "beta_end", -1.0);
    return mc;
}

inline OptimConfig optim_from(const RunConfig& cfg, const std::string& section, double lr_dflt,
                              double clip_dflt, double ema_dflt = 0.999) {
    OptimConfig o;
    o.lr = cfg.get_double(section, "lr", lr_dflt);
    o.clip = cfg.get_double(section, "clip", clip_dflt);
    o.ema_decay = cfg.get_double(section, "ema_decay", ema_dflt);
    return o;
}

/// Loads a manifest and makes every entry path absolute so entries from
/// different directories can be mixed safely.
inline DatasetManifest load_manifest_abs(const fs::path& manifest_path) {
    DatasetManifest m = DatasetManifest::load(manifest_path);
    const fs::path base = fs::absolute(manifest_path).parent_path();
    for (auto& e : m.entries) e.path = (base / e.path).string();
    return m;
}

inline std::vector<std::string> manifest_captions(const DatasetManifest& m) {
    std::vector<std::string> out;
    for (const auto& e : m.entries) out.push_back(e.caption);
    return out;
}

inline std::vector<std::string> read_prompt_lines(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open prompt file: " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(line);
    if (out.empty()) throw RuntimeError("prompt file is empty: " + path.string());
    return out;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

/// Deterministic "plantness" score in [0, 10]: rewards green-dominant pixel
/// statistics. Stand-in for interactive expert scoring in automated runs.
inline double auto_score(const Tensor& image) {
    double green_excess = 0.0;
    const int64_t n = image.size() / 3;
    for (int64_t i = 0; i < n; ++i) {
        const double r = image[i], g = image[n + i], b = image[2 * n + i];
        green_excess += g - 0.5 * (r + b);
    }
    green_excess /= static_cast<double>(n);
    const double s = 10.0 / (1.0 + std::exp(-12.0 * (green_excess - 0.05)));
    return std::clamp(s, 0.0, 10.0);
}

// ----------------------------------------------------------------------------
// gen-data
// ----------------------------------------------------------------------------

struct GenDataArgs {
    std::string domain = "indoor";
    std::string kind = "classification";
    std::string split = "train";
    int n = 8;
    int canvas = 64;
    std::string out;
    std::string config_path;
};

inline Background background_for_domain(const std::string& domain) {
    if (domain == "indoor") return Background::indoor_blue;
    if (domain == "outdoor") return Background::outdoor_soil_light;
    throw UsageError("unknown domain: " + domain + " (expected indoor|outdoor)");
}

inline Tensor hflip(const Tensor& img) {
    Tensor out = img;
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out.at3(c, y, x) = img.at3(c, y, W - 1 - x);
    return out;
}

/// Augmented views of one fixed plant, captioned with the identifier token.
inline std::vector<RenderedEntry> make_subject_set(int views, int canvas, uint64_t seed,
                                                   const std::string& split) {
    std::vector<RenderedEntry> out;
    const uint64_t plant_seed = derive_seed(seed, "subject-plant");
    for (int i = 0; i < views; ++i) {
        Rng rng(derive_seed(seed, "subject-view", static_cast<uint64_t>(i)));
        SceneSpec scene;
        scene.background = Background::indoor_blue;
        scene.canvas = canvas;
        scene.seed = derive_seed(seed, "subject-bg", static_cast<uint64_t>(i));
        PlacedPlant pp;
        pp.plant.species = Species::canola;
        pp.plant.phenotype = Phenotype::flowering;  // a visually distinctive subject
        pp.plant.growth_stage = 0.85;
        pp.plant.seed = plant_seed;
        pp.x = 0.5 + rng.uniform(-0.06, 0.06);
        pp.y = 0.85 + rng.uniform(-0.03, 0.03);
        pp.scale = 1.0 + rng.uniform(-0.08, 0.08);
        scene.plants.push_back(pp);
        RenderResult r = render_scene(scene);
        RenderedEntry e;
        e.image = (i % 2 == 1) ? hflip(r.image) : std::move(r.image);
        e.meta.id = split + "-subject-" + std::to_string(i);
        e.meta.path = e.meta.id + ".ppm";
        e.meta.caption = "a sks canola plant in an indoor lab";
        e.meta.label = "subject";
        e.meta.provenance = "real";
        e.meta.width = canvas;
        e.meta.height = canvas;
        out.push_back(std::move(e));
    }
    return out;
}

inline int cmd_gen_data(const GenDataArgs& a) {
    RunConfig cfg = load_config(a.config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(a.out);
    const Background bg = background_for_domain(a.domain);

    std::vector<RenderedEntry> entries;
    std::vector<std::string> classes;
    if (a.kind == "classification") {
        entries = make_phenotype_set(a.n, bg, a.canvas, derive_seed(seed, a.domain + "-" + a.split),
                                     a.split, "real");
        classes = phenotype_class_names();
    } else if (a.kind == "detection") {
        entries = make_detection_set(a.n, bg, a.canvas, derive_seed(seed, a.domain + "-" + a.split),
                                     a.split, "real");
        classes = detection_class_names();
    } else if (a.kind == "subject") {
        entries = make_subject_set(a.n, a.canvas, derive_seed(seed, "subject-" + a.split), a.split);
        classes = {"subject"};
    } else if (a.kind == "noise") {
        entries = make_noise_set(a.n, a.canvas, derive_seed(seed, "noise-" + a.split), a.split);
        classes = phenotype_class_names();
    } else {
        throw UsageError("unknown kind: " + a.kind);
    }
    DatasetManifest m = write_dataset(a.out, entries, classes, a.split, cfg.hash());
    std::cout << "wrote " << m.entries.size() << " images to " << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// build-ratios / export-labels
// ----------------------------------------------------------------------------

inline int cmd_build_ratios(const std::string& real_path, const std::string& pool_path,
                            const std::vector<int>& ratios, const std::string& out,
                            const std::string& config_path) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(out);
    DatasetManifest real = load_manifest_abs(real_path);
    DatasetManifest pool = load_manifest_abs(pool_path);
    auto mixed = build_ratio_datasets(real, pool, ratios, seed);
    for (size_t i = 0; i < mixed.size(); ++i) {
        for (auto& e : mixed[i].entries)
            e.path = fs::relative(e.path, fs::absolute(out)).generic_string();
        mixed[i].config_hash = cfg.hash();
        mixed[i].save(fs::path(out) / ("ratio_" + std::to_string(ratios[i]) + ".json"));
    }
    std::cout << "wrote " << mixed.size() << " ratio manifests to " << out << "\n";
    return 0;
}

inline int cmd_export_labels(const std::string& manifest_path, const std::string& out) {
    DatasetManifest m = DatasetManifest::load(manifest_path);
    export_detection_labels(m, out);
    std::cout << "exported labels for " << m.entries.size() << " images to " << out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// train-diffusion
// ----------------------------------------------------------------------------

inline int cmd_train_diffusion(const std::string& config_path, const std::string& data_path,
                               const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(out);
    StageLog log(out, "train_diffusion", cfg.hash());

    DatasetManifest data = load_manifest_abs(data_path);
    Tensor images = load_images(data, "");
    std::vector<std::string> captions = manifest_captions(data);

    DiffusionModelConfig mc = model_config_from(cfg);
    OptimConfig den_opt = optim_from(cfg, "diffusion", 1e-3, 1.0);
    auto model = DiffusionModel::create(mc, captions, seed, den_opt);

    // phase 1: VAE pretraining, then freeze
    OptimConfig vae_opt = optim_from(cfg, "vae", 1e-3, 5.0);
    const int vae_steps = static_cast<int>(cfg.get_int("vae", "steps", 400));
    const int vae_batch = static_cast<int>(cfg.get_int("vae", "batch_size", 8));
    const double kl_weight = cfg.get_double("vae", "kl_weight", 1e-3);
    train_vae(*model, images, vae_steps, vae_batch, vae_opt, kl_weight, seed, &log.file);

    // phase 2: text-conditioned denoiser training on frozen latents
    const int steps = static_cast<int>(cfg.get_int("diffusion", "steps", 600));
    const int batch = static_cast<int>(cfg.get_int("diffusion", "batch_size", 8));
    Rng rng(derive_seed(seed, "ddpm-train"));
    const int n = images.dim(0);
    const int64_t per = images.size() / n;
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < steps; ++s) {
        const int bs = std::min(batch, n);
        TrainingBatch tb;
        tb.images = Tensor({bs, images.dim(1), images.dim(2), images.dim(3)});
        for (int b = 0; b < bs; ++b) {
            const int idx = static_cast<int>(rng.uniform_int(0, n - 1));
            std::copy(images.data.begin() + idx * per, images.data.begin() + (idx + 1) * per,
                      tb.images.data.begin() + static_cast<int64_t>(b) * per);
            tb.captions.push_back(captions[static_cast<size_t>(idx)]);
            tb.tags.push_back(Provenance::generic);
        }
        const double loss = ddpm_training_step(*model, tb, rng, s);
        if (s % 25 == 0 || s == steps - 1) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            log.file << nlohmann::json{{"step", s}, {"loss", loss}, {"wall_ms", ms}}.dump() << "\n";
        }
    }

    model->save(fs::path(out) / "checkpoint.ckpt", {{"config_hash", cfg.hash()}});
    std::cout << "checkpoint written to " << (fs::path(out) / "checkpoint.ckpt").string() << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// generate
// ----------------------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::string prompt;
    uint64_t seed = 0;
    int count = 1;
    std::string label = "unknown";
    std::string out;
    std::string prefix = "gen";
    std::string manifest_name = "manifest.json";
    bool append = false;
};

inline std::string model_config_hash(const std::string& checkpoint_path) {
    Checkpoint ck = Checkpoint::load(checkpoint_path);
    return ck.meta.value("config_hash", "none");
}

inline int cmd_generate(const GenerateArgs& a) {
    auto model = DiffusionModel::load(a.checkpoint);
    const std::string config_hash = model_config_hash(a.checkpoint);
    fs::create_directories(a.out);

    DatasetManifest m;
    const fs::path mpath = fs::path(a.out) / a.manifest_name;
    if (a.append && fs::exists(mpath)) m = DatasetManifest::load(mpath);
    if (m.split.empty()) m.split = "generated";
    if (std::find(m.class_names.begin(), m.class_names.end(), a.label) == m.class_names.end())
        m.class_names.push_back(a.label);
    m.config_hash = config_hash;

    for (int i = 0; i < a.count; ++i) {
        const uint64_t s = a.seed + static_cast<uint64_t>(i);
        GenerationRequest req;
        req.prompt = a.prompt;
        req.seed = s;
        Tensor img = sample(*model, req);
        ManifestEntry e;
        e.id = a.prefix + "-" + std::to_string(s);
        e.path = e.id + ".ppm";
        e.caption = a.prompt;
        e.label = a.label;
        e.provenance = "synthetic";
        e.width = img.dim(2);
        e.height = img.dim(1);
        write_ppm(fs::path(a.out) / e.path, img, config_hash);
        m.entries.push_back(std::move(e));
    }
    m.save(mpath);
    std::cout << "generated " << a.count << " image(s) in " << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// dreambooth
// ----------------------------------------------------------------------------

inline int cmd_dreambooth(const std::string& config_path, const std::string& base_ckpt,
                          const std::string& subject_path, const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(out);
    StageLog log(out, "dreambooth", cfg.hash());

    OptimConfig opt = optim_from(cfg, "dreambooth", 5e-4, 1.0);
    auto model = DiffusionModel::load(base_ckpt, opt);

    DatasetManifest subject_m = load_manifest_abs(subject_path);
    Tensor subject_images = load_images(subject_m, "");
    TrainingBatch subject;
    subject.images = subject_images;
    subject.captions = manifest_captions(subject_m);
    subject.tags.assign(subject.captions.size(), Provenance::subject);

    // prior set: generated once by the frozen base model from the bare class prompt
    const std::string class_prompt =
        cfg.get_str("dreambooth", "class_prompt", "a healthy canola plant at mature stage in an indoor lab");
    const int prior_count = static_cast<int>(cfg.get_int("dreambooth", "prior_count", 200));
    const fs::path prior_dir = fs::path(out) / "prior";
    fs::create_directories(prior_dir);
    DatasetManifest prior_m;
    prior_m.split = "prior";
    prior_m.class_names = {"prior"};
    prior_m.config_hash = cfg.hash();
    std::vector<Tensor> prior_images;
    {
        std::vector<std::string> prompts(static_cast<size_t>(prior_count), class_prompt);
        std::vector<uint64_t> seeds;
        for (int i = 0; i < prior_count; ++i) seeds.push_back(derive_seed(seed, "prior", static_cast<uint64_t>(i)));
        Tensor latents = sample_latents_batch(*model, prompts, seeds, true);
        const int64_t per = latents.size() / prior_count;
        for (int i = 0; i < prior_count; ++i) {
            Tensor z({latents.dim(1), latents.dim(2), latents.dim(3)});
            std::copy(latents.data.begin() + i * per, latents.data.begin() + (i + 1) * per,
                      z.data.begin());
            Tensor img = clamp01(model->vae.decode_one(z));
            ManifestEntry e;
            e.id = "prior-" + std::to_string(i);
            e.path = e.id + ".ppm";
            e.caption = class_prompt;
            e.label = "prior";
            e.provenance = "synthetic";
            e.width = img.dim(2);
            e.height = img.dim(1);
            write_ppm(prior_dir / e.path, img, cfg.hash());
            prior_m.entries.push_back(e);
            prior_images.push_back(std::move(img));
        }
        prior_m.save(prior_dir / "manifest.json");
    }

    const int steps = static_cast<int>(cfg.get_int("dreambooth", "steps", 400));
    const double lambda = cfg.get_double("dreambooth", "lambda", 1.0);
    const int bs = subject.size();
    Rng rng(derive_seed(seed, "dreambooth-train"));
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < steps; ++s) {
        // prior batch matches the subject batch size, drawn round-robin
        TrainingBatch prior;
        prior.images = Tensor({bs, subject_images.dim(1), subject_images.dim(2), subject_images.dim(3)});
        for (int b = 0; b < bs; ++b) {
            const int idx = (s * bs + b) % prior_count;
            std::copy(prior_images[static_cast<size_t>(idx)].data.begin(),
                      prior_images[static_cast<size_t>(idx)].data.end(),
                      prior.images.data.begin() + static_cast<int64_t>(b) * prior_images[0].size());
            prior.captions.push_back(class_prompt);
            prior.tags.push_back(Provenance::prior);
        }
        DreamboothLoss loss = dreambooth_training_step(*model, subject, prior, lambda, rng);
        if (s % 25 == 0 || s == steps - 1) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            log.file << nlohmann::json{{"step", s},
                                       {"loss", static_cast<double>(loss.subject + lambda * loss.prior)},
                                       {"subject", loss.subject},
                                       {"prior", loss.prior},
                                       {"wall_ms", ms}}
                            .dump()
                     << "\n";
        }
    }

    model->save(fs::path(out) / "checkpoint.ckpt", {{"config_hash", cfg.hash()}});
    std::cout << "dreambooth checkpoint written to " << (fs::path(out) / "checkpoint.ckpt").string()
              << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// translate
// ----------------------------------------------------------------------------

struct TranslateArgs {
    std::string checkpoint;
    std::string input;     // single image, or
    std::string manifest;  // batch over a manifest
    std::string prompt;
    double strength = 0.3;
    uint64_t seed = 0;
    std::string out;
};

inline int cmd_translate(const TranslateArgs& a) {
    auto model = DiffusionModel::load(a.checkpoint);
    const std::string config_hash = model_config_hash(a.checkpoint);
    fs::create_directories(a.out);

    DatasetManifest out_m;
    out_m.split = "translated";
    out_m.config_hash = config_hash;

    if (!a.manifest.empty()) {
        DatasetManifest src = load_manifest_abs(a.manifest);
        out_m.class_names = src.class_names;
        for (size_t i = 0; i < src.entries.size(); ++i) {
            const auto& se = src.entries[i];
            Tensor img = read_ppm(se.path);
            Img2ImgResult r = img2img(*model, img, a.prompt.empty() ? se.caption : a.prompt,
                                      a.strength, derive_seed(a.seed, "translate", i));
            ManifestEntry e = se;
            e.id = "tr-" + se.id;
            e.path = e.id + ".ppm";
            e.caption = a.prompt.empty() ? se.caption : a.prompt;
            e.provenance = "translated";
            write_ppm(fs::path(a.out) / e.path, r.image, config_hash);
            out_m.entries.push_back(std::move(e));
        }
    } else {
        if (a.input.empty()) throw UsageError("translate: provide --input or --manifest");
        Tensor img = read_ppm(a.input);
        Img2ImgResult r = img2img(*model, img, a.prompt, a.strength, a.seed);
        ManifestEntry e;
        e.id = "tr-0";
        e.path = "tr-0.ppm";
        e.caption = a.prompt;
        e.label = "translated";
        e.provenance = "translated";
        e.width = r.image.dim(2);
        e.height = r.image.dim(1);
        out_m.class_names = {"translated"};
        write_ppm(fs::path(a.out) / e.path, r.image, config_hash);
        out_m.entries.push_back(std::move(e));
    }
    out_m.save(fs::path(a.out) / "manifest.json");
    std::cout << "translated " << out_m.entries.size() << " image(s) into " << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// score / train-reward
// ----------------------------------------------------------------------------

inline int cmd_score(const std::string& manifest_path, const std::string& annotations,
                     bool auto_mode, std::istream& in = std::cin, std::ostream& prompt_out = std::cout) {
    DatasetManifest m = load_manifest_abs(manifest_path);
    std::set<std::string> have;
    if (fs::exists(annotations))
        for (auto& [id, score] : read_annotation_csv(annotations, &std::cerr)) have.insert(id);

    int scored = 0;
    for (const auto& e : m.entries) {
        if (have.count(e.id)) continue;
        double score;
        if (auto_mode) {
            score = auto_score(read_ppm(e.path));
        } else {
            prompt_out << "score [0-10] for " << e.id << ": " << std::flush;
            std::string line;
            if (!std::getline(in, line)) break;
            score = std::stod(line);
        }
        append_annotation_csv(annotations, e.id, score);
        ++scored;
    }
    std::cout << "scored " << scored << " image(s)\n";
    return 0;
}

inline int cmd_train_reward(const std::string& config_path, const std::string& annotations,
                            const std::string& manifest_path, const std::string& ckpt,
                            const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(out);
    StageLog log(out, "train_reward", cfg.hash());

    auto model = DiffusionModel::load(ckpt);
    DatasetManifest m = load_manifest_abs(manifest_path);
    std::map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : m.entries) by_id[e.id] = &e;

    std::vector<AnnotationRecord> records;
    for (auto& [id, score] : read_annotation_csv(annotations, &std::cerr)) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw RuntimeError("annotation refers to unknown image id: " + id);
        AnnotationRecord r;
        r.image_id = id;
        r.latent = model->vae.encode_mu(read_ppm(it->second->path));
        r.score = score;
        records.push_back(std::move(r));
    }

    RewardModel rm(RewardModelConfig{}, derive_seed(seed, "reward-model"));
    OptimConfig opt = optim_from(cfg, "reward", 1e-3, 5.0);
    const int epochs = static_cast<int>(cfg.get_int("reward", "epochs", 30));
    const int batch = static_cast<int>(cfg.get_int("reward", "batch_size", 16));
    const double split = cfg.get_double("reward", "split", 0.8);
    RewardTrainResult res = train_reward(rm, records, split, opt, epochs, batch, seed, &log.file);

    save_reward_model(rm, fs::path(out) / "reward.ckpt",
                      {{"config_hash", cfg.hash()},
                       {"test_pearson", res.test_pearson},
                       {"train_count", res.train_count},
                       {"test_count", res.test_count}});
    write_json(fs::path(out) / "reward_report.json",
               {{"config", cfg.hash()},
                {"tool_version", kToolVersion},
                {"test_pearson", res.test_pearson},
                {"final_loss", res.final_loss},
                {"train_count", res.train_count},
                {"test_count", res.test_count}});
    std::cout << "reward model written; held-out Pearson=" << res.test_pearson << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// preference-tune / compare
// ----------------------------------------------------------------------------

inline int cmd_preference_tune(const std::string& config_path, const std::string& base_ckpt,
                               const std::string& reward_ckpt, const std::string& prompts_path,
                               const std::string& val_prompts_path, const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    const int threads = static_cast<int>(cfg.get_int("global", "threads", 0));
    DirLock lock(out);
    StageLog log(out, "preference_tune", cfg.hash());

    OptimConfig opt = optim_from(cfg, "preference", 1e-5, 0.5, 0.999);
    auto model = DiffusionModel::load(base_ckpt, opt);
    LoadedRewardModel reward = load_reward_model(reward_ckpt);

    const int epochs = static_cast<int>(cfg.get_int("preference", "epochs", 20));
    const int per_epoch = static_cast<int>(cfg.get_int("preference", "prompts_per_epoch", 25));
    const int n_cand = static_cast<int>(cfg.get_int("preference", "candidates", 12));
    const int top_k = static_cast<int>(cfg.get_int("preference", "top_k", 8));
    const double tau = cfg.get_double("preference", "tau", 1.0);
    const int val_m = static_cast<int>(cfg.get_int("preference", "validation_size", 50));

    std::vector<std::string> prompts = read_prompt_lines(prompts_path);
    std::vector<std::string> val_prompts_pool = read_prompt_lines(val_prompts_path);
    std::vector<std::string> val_prompts;
    std::vector<uint64_t> val_seeds;
    for (int i = 0; i < val_m; ++i) {
        val_prompts.push_back(val_prompts_pool[static_cast<size_t>(i) % val_prompts_pool.size()]);
        val_seeds.push_back(derive_seed(seed, "val", static_cast<uint64_t>(i)));
    }

    Rng rng(derive_seed(seed, "pref-train"));
    double best_reward = -1e300;
    int best_epoch = -1;
    const fs::path epoch_path = fs::path(out) / "epoch.ckpt";
    const fs::path best_path = fs::path(out) / "best.ckpt";
    nlohmann::json history = nlohmann::json::array();
    const auto t0 = std::chrono::steady_clock::now();

    int64_t step = 0;
    for (int e = 0; e < epochs; ++e) {
        double epoch_loss = 0.0;
        for (int p = 0; p < per_epoch; ++p, ++step) {
            const std::string& prompt =
                prompts[static_cast<size_t>(step) % prompts.size()];
            std::vector<uint64_t> cand_seeds;
            for (int c = 0; c < n_cand; ++c)
                cand_seeds.push_back(derive_seed(seed, "cand", static_cast<uint64_t>(step) * 1000 + static_cast<uint64_t>(c)));
            PreferenceStepResult r = preference_finetune_step(*model, reward.model, prompt,
                                                              cand_seeds, top_k, tau, rng, threads);
            epoch_loss += r.weighted_loss;
        }
        // validate on the serialized weights so the recorded score reproduces
        // bit-exactly from the saved file
        model->save(epoch_path, {{"config_hash", cfg.hash()}, {"epoch", e}});
        auto eval_model = DiffusionModel::load(epoch_path);
        const double mean_reward =
            validate_mean_reward(*eval_model, reward.model, val_prompts, val_seeds);
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        log.file << nlohmann::json{{"epoch", e},
                                   {"loss", epoch_loss / per_epoch},
                                   {"val_mean_reward", mean_reward},
                                   {"wall_ms", ms}}
                        .dump()
                 << "\n";
        history.push_back({{"epoch", e}, {"val_mean_reward", mean_reward}});
        if (mean_reward > best_reward) {
            best_reward = mean_reward;
            best_epoch = e;
            fs::copy_file(epoch_path, best_path, fs::copy_options::overwrite_existing);
        }
    }

    write_json(fs::path(out) / "history.json",
               {{"config", cfg.hash()},
                {"tool_version", kToolVersion},
                {"best_epoch", best_epoch},
                {"best_val_mean_reward", best_reward},
                {"epochs", history}});
    std::cout << "best epoch " << best_epoch << " with validation mean reward " << best_reward
              << "\n";
    return 0;
}

inline int cmd_compare(const std::string& base_ckpt, const std::string& tuned_ckpt,
                       const std::string& reward_ckpt, const std::string& prompts_path, int count,
                       uint64_t seed, const std::string& out_path) {
    auto base = DiffusionModel::load(base_ckpt);
    auto tuned = DiffusionModel::load(tuned_ckpt);
    LoadedRewardModel reward = load_reward_model(reward_ckpt);
    std::vector<std::string> pool = read_prompt_lines(prompts_path);

    std::vector<std::string> prompts;
    std::vector<uint64_t> seeds;
    for (int i = 0; i < count; ++i) {
        prompts.push_back(pool[static_cast<size_t>(i) % pool.size()]);
        seeds.push_back(derive_seed(seed, "compare", static_cast<uint64_t>(i)));
    }
    // identical prompts and seeds: a paired comparison
    Tensor lat_base = sample_latents_batch(*base, prompts, seeds, true);
    Tensor lat_tuned = sample_latents_batch(*tuned, prompts, seeds, true);
    std::vector<double> r_base = reward.model.predict_batch(lat_base);
    std::vector<double> r_tuned = reward.model.predict_batch(lat_tuned);

    double mean_base = 0.0, mean_tuned = 0.0;
    for (int i = 0; i < count; ++i) {
        mean_base += r_base[static_cast<size_t>(i)];
        mean_tuned += r_tuned[static_cast<size_t>(i)];
    }
    mean_base /= count;
    mean_tuned /= count;
    TTestResult tt = paired_t_test(r_tuned, r_base);

    nlohmann::json j{{"tool_version", kToolVersion}, {"n", count},
                     {"mean_reward_base", mean_base},  {"mean_reward_tuned", mean_tuned},
                     {"t_statistic", tt.t},            {"p_value", tt.p},
                     {"df", tt.df}};
    write_json(out_path, j);
    std::cout << "mean reward tuned=" << mean_tuned << " vs base=" << mean_base << " (t=" << tt.t
              << ", p=" << tt.p << ")\n";
    return 0;
}

// ----------------------------------------------------------------------------
// eval-fid / eval-is
// ----------------------------------------------------------------------------

inline FeatureExtractor load_extractor(LoadedClassifier& lc) {
    FeatureExtractor ex;
    ex.classifier = &lc.model;
    ex.certified_accuracy = lc.meta.value("test_accuracy", 0.0);
    return ex;
}

inline int cmd_eval_fid(const std::string& real_path, const std::string& gen_path,
                        const std::string& extractor_path, const std::string& out_path) {
    DatasetManifest real_m = load_manifest_abs(real_path);
    DatasetManifest gen_m = load_manifest_abs(gen_path);
    LoadedClassifier lc = load_classifier(extractor_path);
    FeatureExtractor ex = load_extractor(lc);

    Tensor real_imgs = load_images(real_m, "");
    Tensor gen_imgs = load_images(gen_m, "");
    FeatureStats rs = compute_feature_stats(extract_features(ex, real_imgs));
    FeatureStats gs = compute_feature_stats(extract_features(ex, gen_imgs));
    const double value = fid(rs, gs);

    write_json(out_path, {{"tool_version", kToolVersion},
                          {"fid", value},
                          {"n_real", rs.n},
                          {"n_gen", gs.n},
                          {"feature_dim", rs.dim()},
                          {"extractor_accuracy", ex.certified_accuracy},
                          {"config_real", real_m.config_hash},
                          {"config_gen", gen_m.config_hash}});
    std::cout << "FID = " << value << "\n";
    return 0;
}

inline int cmd_eval_is(const std::string& gen_path, const std::string& extractor_path, int splits,
                       const std::string& out_path) {
    DatasetManifest gen_m = load_manifest_abs(gen_path);
    LoadedClassifier lc = load_classifier(extractor_path);
    FeatureExtractor ex = load_extractor(lc);
    Tensor gen_imgs = load_images(gen_m, "");
    InceptionScore is = inception_score(class_probabilities(ex, gen_imgs), splits);
    write_json(out_path, {{"tool_version", kToolVersion},
                          {"inception_score", is.mean},
                          {"inception_score_std", is.stddev},
                          {"splits", splits},
                          {"n", gen_imgs.dim(0)},
                          {"config_gen", gen_m.config_hash}});
    std::cout << "IS = " << is.mean << " +- " << is.stddev << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// run-ratio-experiment
// ----------------------------------------------------------------------------

inline int cmd_ratio_experiment(const std::string& config_path, const std::string& real_path,
                                const std::string& pool_path, const std::string& test_path,
                                const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    DirLock lock(out);
    StageLog log(out, "ratio_experiment", cfg.hash());

    DatasetManifest real = load_manifest_abs(real_path);
    DatasetManifest pool = load_manifest_abs(pool_path);
    DatasetManifest test = load_manifest_abs(test_path);

    ClassifierTrainConfig tc;
    tc.epochs = static_cast<int>(cfg.get_int("experiment", "epochs", 12));
    tc.batch_size = static_cast<int>(cfg.get_int("experiment", "batch_size", 8));
    tc.lr = cfg.get_double("experiment", "lr", 5e-3);
    std::vector<int> ratios = cfg.get_int_list("experiment", "ratios", {0, 50, 100, 200, 300, 400});

    Classifier extractor;
    RatioReport rep = run_ratio_experiment(real, pool, test, "", ratios, tc, seed, &log.file,
                                           &extractor);
    rep.config_hash = cfg.hash();

    write_json(fs::path(out) / "report.json", rep.to_json());
    {
        std::ofstream csv(fs::path(out) / "curve.csv");
        csv << rep.to_csv();
    }
    // the lowest-ratio (pure real) classifier doubles as the feature extractor
    double acc0 = 0.0;
    for (const auto& c : rep.cells)
        if (!c.failed && c.ratio == *std::min_element(ratios.begin(), ratios.end())) acc0 = c.accuracy;
    save_classifier(extractor, fs::path(out) / "extractor.ckpt",
                    {{"config_hash", cfg.hash()}, {"test_accuracy", acc0}});
    std::cout << "ratio experiment complete: " << rep.cells.size() << " cells\n";
    return 0;
}

// ----------------------------------------------------------------------------
// pipeline: the full desk-scale sequence, every stage writing into a fixed
// relative layout under --out.
// ----------------------------------------------------------------------------

inline void write_prompt_file(const fs::path& path, const std::vector<std::string>& prompts) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    std::vector<std::string> uniq;
    for (const auto& p : prompts)
        if (std::find(uniq.begin(), uniq.end(), p) == uniq.end()) uniq.push_back(p);
    for (const auto& p : uniq) f << p << "\n";
}

inline int cmd_pipeline(const std::string& config_path, const std::string& out) {
    RunConfig cfg = load_config(config_path);
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("global", "seed", 42));
    const int canvas = static_cast<int>(cfg.get_int("global", "image_size", 64));
    DirLock lock(out);
    const fs::path root(out);

    const int train_pc = static_cast<int>(cfg.get_int("data", "train_per_class", 6));
    const int test_pc = static_cast<int>(cfg.get_int("data", "test_per_class", 4));

    // 1. procedural data
    {
        std::vector<RenderedEntry> train;
        for (auto bg : {Background::indoor_blue, Background::outdoor_soil_light}) {
            const std::string dom = bg == Background::indoor_blue ? "indoor" : "outdoor";
            auto part = make_phenotype_set(train_pc, bg, canvas, derive_seed(seed, dom + "-train"),
                                           dom + "-train", "real");
            for (auto& e : part) train.push_back(std::move(e));
        }
        write_dataset(root / "data" / "train", train, phenotype_class_names(), "train", cfg.hash());

        std::vector<RenderedEntry> test;
        for (auto bg : {Background::indoor_blue, Background::outdoor_soil_light}) {
            const std::string dom = bg == Background::indoor_blue ? "indoor" : "outdoor";
            auto part = make_phenotype_set(test_pc, bg, canvas, derive_seed(seed, dom + "-test"),
                                           dom + "-test", "real");
            for (auto& e : part) test.push_back(std::move(e));
        }
        write_dataset(root / "data" / "test", test, phenotype_class_names(), "test", cfg.hash());

        auto subject = make_subject_set(5, canvas, derive_seed(seed, "subject"), "subject");
        write_dataset(root / "data" / "subject", subject, {"subject"}, "subject", cfg.hash());

        auto detect = make_detection_set(static_cast<int>(cfg.get_int("translate", "scene_count", 6)),
                                         Background::outdoor_soil_light, canvas,
                                         derive_seed(seed, "detect"), "detect", "real");
        write_dataset(root / "data" / "detect", detect, detection_class_names(), "detect", cfg.hash());
    }

    // 2. diffusion training
    cmd_train_diffusion(config_path, (root / "data" / "train" / "manifest.json").string(),
                        (root / "ckpt" / "base").string());
    const std::string base_ckpt = (root / "ckpt" / "base" / "checkpoint.ckpt").string();

    // 3. synthetic pools: per-class pool for augmentation plus an eval set
    {
        DatasetManifest train_m = DatasetManifest::load(root / "data" / "train" / "manifest.json");
        const int max_ratio = 200;
        const int per_class_pool =
            (max_ratio * train_pc * 2 + 99) / 100 + 1;  // both domains contribute train_pc each
        uint64_t gen_seed = derive_seed(seed, "pool");
        for (const auto& cls : phenotype_class_names()) {
            GenerateArgs ga;
            ga.checkpoint = base_ckpt;
            ga.prompt = "a " + cls + " canola plant at mature stage in an outdoor field";
            ga.seed = gen_seed;
            ga.count = per_class_pool;
            ga.label = cls;
            ga.out = (root / "gen" / "pool").string();
            ga.prefix = "pool-" + cls;
            ga.append = true;
            cmd_generate(ga);
            gen_seed += static_cast<uint64_t>(per_class_pool);
        }
        GenerateArgs ge;
        ge.checkpoint = base_ckpt;
        ge.prompt = "a healthy canola plant at mature stage in an outdoor field";
        ge.seed = derive_seed(seed, "eval-gen");
        ge.count = static_cast<int>(cfg.get_int("pipeline", "generate_count", 16));
        ge.label = "healthy";
        ge.out = (root / "gen" / "eval").string();
        ge.prefix = "eval";
        cmd_generate(ge);
    }

    // 4. subject fine-tuning
    cmd_dreambooth(config_path, base_ckpt, (root / "data" / "subject" / "manifest.json").string(),
                   (root / "ckpt" / "dreambooth").string());

    // 5. image-guided translation of the composited detection scenes + labels
    {
        TranslateArgs ta;
        ta.checkpoint = base_ckpt;
        ta.manifest = (root / "data" / "detect" / "manifest.json").string();
        ta.prompt = cfg.get_str("translate", "prompt", "healthy soybean plants in rows in an outdoor field");
        ta.strength = cfg.get_double("translate", "strength", 0.3);
        ta.seed = derive_seed(seed, "translate");
        ta.out = (root / "translate").string();
        cmd_translate(ta);
        cmd_export_labels((root / "translate" / "manifest.json").string(),
                          (root / "labels").string());
    }

    // 6. augmentation-ratio experiment (also yields the feature extractor)
    cmd_ratio_experiment(config_path, (root / "data" / "train" / "manifest.json").string(),
                         (root / "gen" / "pool" / "manifest.json").string(),
                         (root / "data" / "test" / "manifest.json").string(),
                         (root / "reports" / "ratio").string());
    const std::string extractor = (root / "reports" / "ratio" / "extractor.ckpt").string();

    // 7. generative metrics
    cmd_eval_fid((root / "data" / "test" / "manifest.json").string(),
                 (root / "gen" / "eval" / "manifest.json").string(), extractor,
                 (root / "reports" / "fid.json").string());
    cmd_eval_is((root / "gen" / "eval" / "manifest.json").string(), extractor,
                static_cast<int>(cfg.get_int("metrics", "is_splits", 4)),
                (root / "reports" / "is.json").string());

    // 8. expert-preference stage: auto-scored annotations, reward model,
    //    reward-weighted fine-tuning, paired comparison
    {
        // annotations need >= 50 records; score the pool + eval sets
        cmd_score((root / "gen" / "pool" / "manifest.json").string(),
                  (root / "annotations.csv").string(), /*auto_mode=*/true);
        cmd_score((root / "gen" / "eval" / "manifest.json").string(),
                  (root / "annotations.csv").string(), /*auto_mode=*/true);
        // one combined manifest for annotation resolution, paths relative to
        // its own directory so reruns stay byte-identical
        DatasetManifest pool = DatasetManifest::load(root / "gen" / "pool" / "manifest.json");
        DatasetManifest eval_m = DatasetManifest::load(root / "gen" / "eval" / "manifest.json");
        DatasetManifest all = pool;
        for (auto& e : all.entries) e.path = "pool/" + e.path;
        for (auto e : eval_m.entries) {
            e.path = "eval/" + e.path;
            all.entries.push_back(std::move(e));
        }
        for (const auto& c : eval_m.class_names)
            if (std::find(all.class_names.begin(), all.class_names.end(), c) == all.class_names.end())
                all.class_names.push_back(c);
        all.save(root / "gen" / "scored_manifest.json");

        cmd_train_reward(config_path, (root / "annotations.csv").string(),
                         (root / "gen" / "scored_manifest.json").string(), base_ckpt,
                         (root / "ckpt" / "reward").string());

        DatasetManifest train_m = DatasetManifest::load(root / "data" / "train" / "manifest.json");
        DatasetManifest test_m = DatasetManifest::load(root / "data" / "test" / "manifest.json");
        write_prompt_file(root / "prompts" / "train.txt", manifest_captions(train_m));
        write_prompt_file(root / "prompts" / "val.txt", manifest_captions(test_m));

        cmd_preference_tune(config_path, base_ckpt,
                            (root / "ckpt" / "reward" / "reward.ckpt").string(),
                            (root / "prompts" / "train.txt").string(),
                            (root / "prompts" / "val.txt").string(),
                            (root / "ckpt" / "preference").string());

        cmd_compare(base_ckpt, (root / "ckpt" / "preference" / "best.ckpt").string(),
                    (root / "ckpt" / "reward" / "reward.ckpt").string(),
                    (root / "prompts" / "val.txt").string(),
                    static_cast<int>(cfg.get_int("pipeline", "compare_count", 16)),
                    derive_seed(seed, "compare"), (root / "reports" / "compare.json").string());
    }

    std::cout << "pipeline complete in " << out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// dispatch
// ----------------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv) {
    CLI::App app{"agrigen: latent-diffusion plant imagery pipeline"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen_data = app.add_subcommand("gen-data", "render a procedural dataset");
    gen_data->add_option("--domain", gd.domain, "indoor|outdoor")->required();
    gen_data->add_option("--n", gd.n, "images per class / scene count")->required();
    gen_data->add_option("--out", gd.out, "output directory")->required();
    gen_data->add_option("--kind", gd.kind, "classification|detection|subject|noise");
    gen_data->add_option("--split", gd.split, "split tag");
    gen_data->add_option("--canvas", gd.canvas, "canvas size in pixels");
    gen_data->add_option("--config", gd.config_path, "run configuration file");

    std::string br_real, br_pool, br_out, br_config;
    std::vector<int> br_ratios;
    auto* build_ratios = app.add_subcommand("build-ratios", "build nested ratio manifests");
    build_ratios->add_option("--real", br_real)->required();
    build_ratios->add_option("--pool", br_pool)->required();
    build_ratios->add_option("--ratios", br_ratios, "percentages")->required()->delimiter(',');
    build_ratios->add_option("--out", br_out)->required();
    build_ratios->add_option("--config", br_config);

    std::string el_manifest, el_out;
    auto* export_labels = app.add_subcommand("export-labels", "export detection label files");
    export_labels->add_option("--manifest", el_manifest)->required();
    export_labels->add_option("--out", el_out)->required();

    std::string td_config, td_data, td_out;
    auto* train_diffusion = app.add_subcommand("train-diffusion", "train VAE then denoiser");
    train_diffusion->add_option("--config", td_config);
    train_diffusion->add_option("--data", td_data)->required();
    train_diffusion->add_option("--out", td_out)->required();

    GenerateArgs ga;
    auto* generate = app.add_subcommand("generate", "sample images from a checkpoint");
    generate->add_option("--checkpoint", ga.checkpoint)->required();
    generate->add_option("--prompt", ga.prompt)->required();
    generate->add_option("--seed", ga.seed)->required();
    generate->add_option("--count", ga.count);
    generate->add_option("--label", ga.label);
    generate->add_option("--out", ga.out)->required();
    generate->add_option("--prefix", ga.prefix);
    generate->add_flag("--append", ga.append, "append to an existing manifest");

    std::string db_config, db_ckpt, db_subject, db_out;
    auto* dreambooth = app.add_subcommand("dreambooth", "subject fine-tuning with prior preservation");
    dreambooth->add_option("--config", db_config);
    dreambooth->add_option("--checkpoint", db_ckpt)->required();
    dreambooth->add_option("--subject", db_subject)->required();
    dreambooth->add_option("--out", db_out)->required();

    TranslateArgs ta;
    auto* translate = app.add_subcommand("translate", "image-guided translation by partial noising");
    translate->add_option("--checkpoint", ta.checkpoint)->required();
    translate->add_option("--input", ta.input);
    translate->add_option("--manifest", ta.manifest);
    translate->add_option("--prompt", ta.prompt);
    translate->add_option("--strength", ta.strength);
    translate->add_option("--seed", ta.seed);
    translate->add_option("--out", ta.out)->required();

    std::string tr_config, tr_ann, tr_manifest, tr_ckpt, tr_out;
    auto* train_reward_cmd = app.add_subcommand("train-reward", "fit the reward model to annotations");
    train_reward_cmd->add_option("--config", tr_config);
    train_reward_cmd->add_option("--annotations", tr_ann)->required();
    train_reward_cmd->add_option("--manifest", tr_manifest)->required();
    train_reward_cmd->add_option("--checkpoint", tr_ckpt)->required();
    train_reward_cmd->add_option("--out", tr_out)->required();

    std::string sc_manifest, sc_ann;
    bool sc_auto = false;
    auto* score = app.add_subcommand("score", "collect 0-10 scores for unscored images");
    score->add_option("--manifest", sc_manifest)->required();
    score->add_option("--annotations", sc_ann)->required();
    score->add_flag("--auto", sc_auto, "use the deterministic plantness heuristic");

    std::string pt_config, pt_ckpt, pt_reward, pt_prompts, pt_val, pt_out;
    auto* pref = app.add_subcommand("preference-tune", "reward-weighted fine-tuning");
    pref->add_option("--config", pt_config);
    pref->add_option("--checkpoint", pt_ckpt)->required();
    pref->add_option("--reward", pt_reward)->required();
    pref->add_option("--prompts", pt_prompts)->required();
    pref->add_option("--val-prompts", pt_val)->required();
    pref->add_option("--out", pt_out)->required();

    std::string cp_base, cp_tuned, cp_reward, cp_prompts, cp_out;
    int cp_count = 50;
    uint64_t cp_seed = 42;
    auto* compare = app.add_subcommand("compare", "paired reward comparison of two checkpoints");
    compare->add_option("--base", cp_base)->required();
    compare->add_option("--tuned", cp_tuned)->required();
    compare->add_option("--reward", cp_reward)->required();
    compare->add_option("--prompts", cp_prompts)->required();
    compare->add_option("--count", cp_count);
    compare->add_option("--seed", cp_seed);
    compare->add_option("--out", cp_out)->required();

    std::string ef_real, ef_gen, ef_ex, ef_out;
    auto* eval_fid = app.add_subcommand("eval-fid", "Frechet distance between two image sets");
    eval_fid->add_option("--real", ef_real)->required();
    eval_fid->add_option("--gen", ef_gen)->required();
    eval_fid->add_option("--extractor", ef_ex)->required();
    eval_fid->add_option("--out", ef_out)->required();

    std::string ei_gen, ei_ex, ei_out;
    int ei_splits = 10;
    auto* eval_is = app.add_subcommand("eval-is", "inception score of an image set");
    eval_is->add_option("--gen", ei_gen)->required();
    eval_is->add_option("--extractor", ei_ex)->required();
    eval_is->add_option("--splits", ei_splits);
    eval_is->add_option("--out", ei_out)->required();

    std::string re_config, re_real, re_pool, re_test, re_out;
    auto* ratio_exp = app.add_subcommand("run-ratio-experiment", "accuracy vs augmentation ratio");
    ratio_exp->add_option("--config", re_config);
    ratio_exp->add_option("--real", re_real)->required();
    ratio_exp->add_option("--pool", re_pool)->required();
    ratio_exp->add_option("--test", re_test)->required();
    ratio_exp->add_option("--out", re_out)->required();

    std::string pl_config, pl_out;
    auto* pipeline = app.add_subcommand("pipeline", "full desk-scale run");
    pipeline->add_option("--config", pl_config);
    pipeline->add_option("--out", pl_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen_data) return cmd_gen_data(gd);
        if (*build_ratios) return cmd_build_ratios(br_real, br_pool, br_ratios, br_out, br_config);
        if (*export_labels) return cmd_export_labels(el_manifest, el_out);
        if (*train_diffusion) return cmd_train_diffusion(td_config, td_data, td_out);
        if (*generate) return cmd_generate(ga);
        if (*dreambooth) return cmd_dreambooth(db_config, db_ckpt, db_subject, db_out);
        if (*translate) return cmd_translate(ta);
        if (*train_reward_cmd) return cmd_train_reward(tr_config, tr_ann, tr_manifest, tr_ckpt, tr_out);
        if (*score) return cmd_score(sc_manifest, sc_ann, sc_auto);
        if (*pref) return cmd_preference_tune(pt_config, pt_ckpt, pt_reward, pt_prompts, pt_val, pt_out);
        if (*compare) return cmd_compare(cp_base, cp_tuned, cp_reward, cp_prompts, cp_count, cp_seed, cp_out);
        if (*eval_fid) return cmd_eval_fid(ef_real, ef_gen, ef_ex, ef_out);
        if (*eval_is) return cmd_eval_is(ei_gen, ei_ex, ei_splits, ei_out);
        if (*ratio_exp) return cmd_ratio_experiment(re_config, re_real, re_pool, re_test, re_out);
        if (*pipeline) return cmd_pipeline(pl_config, pl_out);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace agrigen::cli
