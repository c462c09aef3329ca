#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "agrigen/downstream.hpp"

using namespace agrigen;

namespace {

// Two maximally separable procedural classes: healthy (green) vs yellowing.
struct ToySet {
    DatasetManifest train, test;
    Tensor train_images, test_images;
};

ToySet two_class_set(int per_class_train, int per_class_test, uint64_t seed) {
    ToySet out;
    auto render = [&](int per_class, const std::string& split, uint64_t s, DatasetManifest& m,
                      Tensor& images) {
        auto all = make_phenotype_set(per_class, Background::indoor_blue, 32, s, split, "real");
        std::vector<RenderedEntry> kept;
        for (auto& e : all)
            if (e.meta.label == "healthy" || e.meta.label == "yellowing") kept.push_back(std::move(e));
        m.split = split;
        m.class_names = {"healthy", "yellowing"};
        images = Tensor({static_cast<int>(kept.size()), 3, 32, 32});
        for (size_t i = 0; i < kept.size(); ++i) {
            m.entries.push_back(kept[i].meta);
            std::copy(kept[i].image.data.begin(), kept[i].image.data.end(),
                      images.data.begin() + static_cast<int64_t>(i) * kept[i].image.size());
        }
    };
    render(per_class_train, "train", seed, out.train, out.train_images);
    render(per_class_test, "test", seed + 1, out.test, out.test_images);
    return out;
}

} // namespace

TEST_CASE("classifier separates an easy two-class set", "[downstream][slow]") {
    ToySet ts = two_class_set(16, 8, 5);
    ClassifierConfig cc;
    cc.num_classes = 2;
    cc.channels = {8, 16, 16, 32};
    Classifier cls(cc, 7);
    ClassifierTrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 8;
    cfg.seed = 3;
    TrainClassifierResult r =
        train_classifier(cls, ts.train, ts.train_images, ts.test, ts.test_images, cfg);
    REQUIRE(r.test_accuracy >= 0.95);
}

TEST_CASE("label-shuffled training lands at chance", "[downstream][slow]") {
    ToySet ts = two_class_set(12, 10, 9);
    // destroy the signal: reassign labels round-robin irrespective of content
    for (size_t i = 0; i < ts.train.entries.size(); ++i)
        ts.train.entries[i].label = (i % 2) ? "healthy" : "yellowing";
    ClassifierConfig cc;
    cc.num_classes = 2;
    cc.channels = {8, 16, 16, 32};
    Classifier cls(cc, 11);
    ClassifierTrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 8;
    cfg.seed = 3;
    TrainClassifierResult r =
        train_classifier(cls, ts.train, ts.train_images, ts.test, ts.test_images, cfg);
    REQUIRE(r.test_accuracy >= 0.3);
    REQUIRE(r.test_accuracy <= 0.7);
}

TEST_CASE("deterministic rerun reproduces the accuracy", "[downstream]") {
    ToySet ts = two_class_set(6, 4, 21);
    ClassifierTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 17;
    auto run = [&] {
        ClassifierConfig cc;
        cc.num_classes = 2;
        cc.channels = {4, 8, 8, 16};
        Classifier cls(cc, 13);
        return train_classifier(cls, ts.train, ts.train_images, ts.test, ts.test_images, cfg)
            .test_accuracy;
    };
    REQUIRE(run() == run());
}

TEST_CASE("single-class manifest rejected", "[downstream]") {
    ToySet ts = two_class_set(4, 2, 31);
    for (auto& e : ts.train.entries) e.label = "healthy";
    ClassifierConfig cc;
    cc.num_classes = 2;
    cc.channels = {4, 8, 8, 16};
    Classifier cls(cc, 13);
    ClassifierTrainConfig cfg;
    REQUIRE_THROWS_AS(
        train_classifier(cls, ts.train, ts.train_images, ts.test, ts.test_images, cfg),
        RuntimeError);
}

TEST_CASE("leakage guard", "[downstream]") {
    ToySet ts = two_class_set(4, 3, 41);
    check_no_leakage(ts.train, ts.test);  // distinct splits pass
    DatasetManifest bad = ts.test;
    bad.entries.push_back(ts.train.entries[0]);
    REQUIRE_THROWS_AS(check_no_leakage(ts.train, bad), RuntimeError);

    DatasetManifest synth = ts.test;
    synth.entries[0].provenance = "synthetic";
    REQUIRE_THROWS_AS(check_test_is_real(synth), RuntimeError);
}

TEST_CASE("ratio experiment report shape and failure isolation", "[downstream][slow]") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "agrigen_ratio_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    // small real set + synthetic pool drawn from the same generator family
    auto real_entries = make_phenotype_set(3, Background::indoor_blue, 32, 51, "real", "real");
    auto pool_entries = make_phenotype_set(6, Background::indoor_blue, 32, 52, "syn", "synthetic");
    auto test_entries = make_phenotype_set(2, Background::indoor_blue, 32, 53, "test", "real");
    DatasetManifest real = write_dataset(dir, real_entries, phenotype_class_names(), "real", "h1", "real.json");
    DatasetManifest pool = write_dataset(dir, pool_entries, phenotype_class_names(), "syn", "h1", "pool.json");
    DatasetManifest test = write_dataset(dir, test_entries, phenotype_class_names(), "test", "h1", "test.json");

    ClassifierTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.channels = {4, 8, 8, 16};
    Classifier extractor;
    RatioReport rep = run_ratio_experiment(real, pool, test, dir, {0, 100}, cfg, 5, nullptr, &extractor);
    REQUIRE(rep.cells.size() == 2);
    REQUIRE(rep.cells[0].ratio == 0);
    REQUIRE(rep.cells[0].train_size == 12);
    REQUIRE(rep.cells[1].train_size == 24);
    REQUIRE(!rep.cells[0].failed);
    REQUIRE(!rep.cells[1].failed);

    // report serialization carries config hash and no timestamps
    const std::string csv = rep.to_csv();
    REQUIRE(csv.find("ratio,accuracy,seed,wall_ms") != std::string::npos);
    REQUIRE(rep.to_json()["cells"].size() == 2);

    // pool exhaustion shows up as a failed cell, not a crash
    RatioReport rep2 = run_ratio_experiment(real, pool, test, dir, {0, 400}, cfg, 5);
    REQUIRE(!rep2.cells[0].failed);
    REQUIRE(rep2.cells[1].failed);
    REQUIRE(rep2.cells[1].error.find("exhausted") != std::string::npos);

    fs::remove_all(dir);
}
