#pragma once

#include <chrono>
#include <set>
#include <sstream>

#include <json.hpp>

#include "agrigen/model_store.hpp"
#include "agrigen/nets.hpp"
#include "agrigen/synthdata.hpp"
#include "agrigen/train.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Classifier training over manifest datasets and the augmentation-ratio
// experiment built on top of it.
// ----------------------------------------------------------------------------

struct ClassifierTrainConfig {
    int epochs = 8;
    int batch_size = 16;
    double lr = 2e-3;
    double clip = 5.0;
    uint64_t seed = 0;
    std::vector<int> channels = {32, 64, 128, 256};  // published widths by default
};

struct TrainClassifierResult {
    double test_accuracy = 0.0;
    std::vector<double> epoch_accuracy;
    double final_loss = 0.0;
};

inline std::vector<int> manifest_labels(const DatasetManifest& m) {
    std::vector<int> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries) out.push_back(m.class_id(e.label));
    return out;
}

inline double classifier_accuracy(Classifier& cls, const Tensor& images,
                                  const std::vector<int>& labels, int batch = 32) {
    const int n = images.dim(0);
    int correct = 0;
    const int64_t per = images.size() / n;
    for (int from = 0; from < n; from += batch) {
        const int count = std::min(batch, n - from);
        Tensor chunk({count, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data.begin() + from * per, images.data.begin() + (from + count) * per,
                  chunk.data.begin());
        Tensor lg = cls.logits_eval(chunk);
        for (int i = 0; i < count; ++i) {
            int best = 0;
            for (int c = 1; c < lg.dim(1); ++c)
                if (lg.at2(i, c) > lg.at2(i, best)) best = c;
            if (best == labels[static_cast<size_t>(from + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

/// Cross-entropy training; per-epoch held-out accuracy is recorded and the
/// last entry is the reported test accuracy. Rejects single-class manifests.
inline TrainClassifierResult train_classifier(Classifier& cls, const DatasetManifest& train_m,
                                              const Tensor& train_images,
                                              const DatasetManifest& test_m,
                                              const Tensor& test_images,
                                              const ClassifierTrainConfig& cfg,
                                              std::ostream* log = nullptr) {
    std::set<std::string> distinct;
    for (const auto& e : train_m.entries) distinct.insert(e.label);
    if (distinct.size() < 2)
        throw RuntimeError("train_classifier: manifest has fewer than 2 classes");

    std::vector<int> labels = manifest_labels(train_m);
    std::vector<int> test_labels = manifest_labels(test_m);
    const int n = train_images.dim(0);
    const int64_t per = train_images.size() / n;

    OptimConfig opt;
    opt.lr = cfg.lr;
    opt.clip = cfg.clip;
    TrainState state(cls.params(), opt);
    Rng order_rng(derive_seed(cfg.seed, "cls-order"));
    Rng drop_rng(derive_seed(cfg.seed, "cls-dropout"));

    TrainClassifierResult res;
    for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<int> order = order_rng.permutation(n);
        double epoch_loss = 0.0;
        int batches = 0;
        for (int from = 0; from < n; from += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, n - from);
            if (count < 2) continue;  // batch statistics need more than one item
            Tensor batch({count, train_images.dim(1), train_images.dim(2), train_images.dim(3)});
            std::vector<int> batch_labels(static_cast<size_t>(count));
            for (int i = 0; i < count; ++i) {
                const int idx = order[static_cast<size_t>(from + i)];
                std::copy(train_images.data.begin() + idx * per,
                          train_images.data.begin() + (idx + 1) * per,
                          batch.data.begin() + static_cast<int64_t>(i) * per);
                batch_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(idx)];
            }
            Tensor mask = make_dropout_mask({count, cls.feature_dim()}, cls.cfg.dropout, drop_rng);
            Tape t;
            VarId logits = cls.logits(t, t.constant(batch), true, &mask);
            VarId loss = t.cross_entropy_mean(logits, batch_labels);
            state.zero_grad();
            t.backward(loss);
            state.clip();
            state.step();
            epoch_loss += t.val(loss)[0];
            ++batches;
        }
        res.final_loss = epoch_loss / std::max(1, batches);
        const double acc = classifier_accuracy(cls, test_images, test_labels);
        res.epoch_accuracy.push_back(acc);
        if (log)
            *log << nlohmann::json{{"epoch", e}, {"loss", res.final_loss}, {"test_accuracy", acc}}.dump()
                 << "\n";
    }
    res.test_accuracy = res.epoch_accuracy.empty() ? 0.0 : res.epoch_accuracy.back();
    return res;
}

// ---- leakage guard ---------------------------------------------------------------

inline void check_no_leakage(const DatasetManifest& train, const DatasetManifest& test) {
    std::set<std::string> train_ids;
    for (const auto& e : train.entries) train_ids.insert(e.id);
    for (const auto& e : test.entries)
        if (train_ids.count(e.id))
            throw RuntimeError("leakage guard: test id also in training set: " + e.id);
}

inline void check_test_is_real(const DatasetManifest& test) {
    for (const auto& e : test.entries)
        if (e.provenance != "real")
            throw RuntimeError("test manifest must contain only real entries, found " +
                               e.provenance + " for " + e.id);
}

// ---- ratio experiment --------------------------------------------------------------

struct RatioCell {
    int ratio = 0;
    double accuracy = 0.0;
    int train_size = 0;
    double wall_ms = 0.0;
    bool failed = false;
    std::string error;
};

struct RatioReport {
    std::vector<RatioCell> cells;
    uint64_t seed = 0;
    std::string config_hash = "none";

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = config_hash;
        j["tool_version"] = kToolVersion;
        j["seed"] = seed;
        j["cells"] = nlohmann::json::array();
        for (const auto& c : cells) {
            nlohmann::json jc{{"ratio", c.ratio},     {"accuracy", c.accuracy},
                              {"train_size", c.train_size}, {"wall_ms", c.wall_ms},
                              {"failed", c.failed}};
            if (c.failed) jc["error"] = c.error;
            j["cells"].push_back(std::move(jc));
        }
        return j;
    }

    std::string to_csv() const {
        std::ostringstream ss;
        ss << "# config=" << config_hash << " version=" << kToolVersion << "\n";
        ss << "ratio,accuracy,seed,wall_ms\n";
        for (const auto& c : cells)
            ss << c.ratio << "," << c.accuracy << "," << seed << "," << c.wall_ms << "\n";
        return ss.str();
    }
};

/// Trains one fresh classifier per ratio on the nested mixed manifests and
/// reports the accuracy curve. Per-cell failures are recorded, not fatal.
inline RatioReport run_ratio_experiment(const DatasetManifest& real_train,
                                        const DatasetManifest& synthetic_pool,
                                        const DatasetManifest& test_real,
                                        const std::filesystem::path& image_base,
                                        const std::vector<int>& ratios,
                                        const ClassifierTrainConfig& cfg, uint64_t seed,
                                        std::ostream* log = nullptr,
                                        Classifier* extractor_out = nullptr) {
    check_test_is_real(test_real);
    check_no_leakage(real_train, test_real);
    check_no_leakage(synthetic_pool, test_real);

    std::vector<int> sorted = ratios;
    std::sort(sorted.begin(), sorted.end());
    Tensor test_images = load_images(test_real, image_base);

    RatioReport rep;
    rep.seed = seed;
    rep.config_hash = real_train.config_hash;
    for (size_t i = 0; i < sorted.size(); ++i) {
        RatioCell cell;
        cell.ratio = sorted[i];
        const auto t0 = std::chrono::steady_clock::now();
        try {
            // one ratio at a time so a failing cell cannot take down the run;
            // the shared seed keeps the pool ordering (and thus nesting) fixed
            DatasetManifest mixed =
                build_ratio_datasets(real_train, synthetic_pool, {sorted[i]}, seed)[0];
            check_no_leakage(mixed, test_real);
            Tensor train_images = load_images(mixed, image_base);
            ClassifierConfig cc;
            cc.num_classes = static_cast<int>(real_train.class_names.size());
            cc.channels = cfg.channels;
            ClassifierTrainConfig cell_cfg = cfg;
            cell_cfg.seed = derive_seed(seed, "cell", static_cast<uint64_t>(sorted[i]));
            // fresh init with a ratio-independent seed: ratio is the only factor
            Classifier cls(cc, derive_seed(seed, "cls-init"));
            TrainClassifierResult r =
                train_classifier(cls, mixed, train_images, test_real, test_images, cell_cfg, log);
            cell.accuracy = r.test_accuracy;
            cell.train_size = static_cast<int>(mixed.entries.size());
            if (extractor_out && sorted[i] == sorted.front()) *extractor_out = std::move(cls);
        } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
        }
        cell.wall_ms = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
        rep.cells.push_back(std::move(cell));
        if (log)
            *log << nlohmann::json{{"ratio", rep.cells.back().ratio},
                                   {"accuracy", rep.cells.back().accuracy},
                                   {"failed", rep.cells.back().failed}}
                        .dump()
                 << "\n";
    }
    return rep;
}

} // namespace agrigen
