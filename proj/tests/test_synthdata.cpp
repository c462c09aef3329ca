#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "agrigen/nets.hpp"
#include "agrigen/synthdata.hpp"

using namespace agrigen;

namespace {

SceneSpec one_plant_scene(uint64_t seed, Background bg = Background::indoor_blue,
                          Phenotype ph = Phenotype::healthy, double stage = 0.6) {
    SceneSpec s;
    s.background = bg;
    s.canvas = 64;
    s.seed = derive_seed(seed, "bg");
    PlacedPlant pp;
    pp.plant.phenotype = ph;
    pp.plant.growth_stage = stage;
    pp.plant.seed = derive_seed(seed, "plant");
    pp.x = 0.5;
    pp.y = 0.85;
    s.plants.push_back(pp);
    return s;
}

} // namespace

TEST_CASE("render_scene basics", "[synthdata]") {
    SECTION("empty plant list: pure background, zero boxes") {
        SceneSpec s;
        s.canvas = 32;
        s.seed = 9;
        RenderResult r = render_scene(s);
        REQUIRE(r.boxes.empty());
        REQUIRE(r.masks.empty());
        // background is blue everywhere
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                REQUIRE(r.image.at3(2, y, x) > r.image.at3(0, y, x));
    }
    SECTION("one centered plant: exactly one box covering its mask") {
        RenderResult r = render_scene(one_plant_scene(4));
        REQUIRE(r.boxes.size() == 1);
        REQUIRE(!r.boxes[0].empty());
        const Box& b = r.boxes[0];
        int on_pixels = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (r.masks[0][static_cast<size_t>(y) * 64 + static_cast<size_t>(x)]) {
                    ++on_pixels;
                    REQUIRE(x >= b.x);
                    REQUIRE(x < b.x + b.w);
                    REQUIRE(y >= b.y);
                    REQUIRE(y < b.y + b.h);
                }
        REQUIRE(on_pixels > 20);
    }
    SECTION("bitwise determinism") {
        RenderResult a = render_scene(one_plant_scene(5));
        RenderResult b = render_scene(one_plant_scene(5));
        REQUIRE(max_abs_diff(a.image, b.image) == 0.0);
        REQUIRE(a.boxes[0].x == b.boxes[0].x);
    }
    SECTION("phenotypes alter pixel statistics") {
        auto mean_color = [](Phenotype ph, int channel) {
            double acc = 0.0;
            int count = 0;
            for (uint64_t s = 0; s < 8; ++s) {
                SceneSpec sc = one_plant_scene(100 + s, Background::indoor_blue, ph);
                RenderResult r = render_scene(sc);
                for (int y = 0; y < 64; ++y)
                    for (int x = 0; x < 64; ++x)
                        if (r.masks[0][static_cast<size_t>(y) * 64 + static_cast<size_t>(x)]) {
                            acc += r.image.at3(channel, y, x);
                            ++count;
                        }
            }
            return acc / count;
        };
        // yellowing plants are much redder than healthy ones
        REQUIRE(mean_color(Phenotype::yellowing, 0) - mean_color(Phenotype::healthy, 0) > 0.1);
    }
}

TEST_CASE("caption templates", "[synthdata]") {
    SECTION("healthy canola seedling indoors") {
        SceneSpec s = one_plant_scene(1, Background::indoor_blue, Phenotype::healthy, 0.1);
        REQUIRE(caption_for(s) == "a healthy canola plant at seedling stage in an indoor lab");
    }
    SECTION("flowering spec mentions flowering") {
        SceneSpec s = one_plant_scene(2, Background::outdoor_soil_light, Phenotype::flowering, 0.9);
        REQUIRE(caption_for(s).find("flowering") != std::string::npos);
        REQUIRE(caption_for(s).find("outdoor field") != std::string::npos);
    }
    SECTION("identifier token never emitted") {
        for (uint64_t s = 0; s < 20; ++s) {
            SceneSpec sc = one_plant_scene(s);
            REQUIRE(caption_for(sc).find("sks") == std::string::npos);
        }
    }
    SECTION("vocabulary closure over the embedder") {
        // every token the caption generator can emit appears in the vocabulary
        std::vector<std::string> corpus;
        for (auto bg : {Background::indoor_blue, Background::outdoor_soil_light}) {
            for (auto ph : {Phenotype::healthy, Phenotype::spotted, Phenotype::yellowing,
                            Phenotype::flowering})
                for (double st : {0.1, 0.5, 0.9}) {
                    SceneSpec sc = one_plant_scene(3, bg, ph, st);
                    corpus.push_back(caption_for(sc));
                    sc.plants.push_back(sc.plants[0]);
                    corpus.push_back(caption_for(sc));
                    sc.plants.clear();
                    corpus.push_back(caption_for(sc));
                }
        }
        TextEmbedder emb;
        emb.build(corpus, 8, 16, 5);
        for (const auto& c : corpus)
            for (const auto& tok : TextEmbedder::tokenize(c))
                REQUIRE(emb.vocab.count(tok) == 1);
    }
}

TEST_CASE("segmentation against renderer ground truth", "[synthdata]") {
    SECTION("mask IoU >= 0.9 across a spec sweep") {
        int checked = 0;
        for (uint64_t s = 0; s < 100; ++s) {
            SceneSpec sc = one_plant_scene(1000 + s, Background::indoor_blue,
                                           static_cast<Phenotype>(s % 4), 0.3 + 0.06 * (s % 10));
            RenderResult r = render_scene(sc);
            SegmentResult seg = segment_plant(r.image, Background::indoor_blue);
            int64_t inter = 0, uni = 0;
            for (size_t i = 0; i < seg.mask.size(); ++i) {
                const bool a = seg.mask[i] != 0, b = r.masks[0][i] != 0;
                inter += (a && b) ? 1 : 0;
                uni += (a || b) ? 1 : 0;
            }
            REQUIRE(static_cast<double>(inter) / static_cast<double>(uni) >= 0.9);
            ++checked;
        }
        REQUIRE(checked == 100);
    }
    SECTION("pure background raises empty-mask error") {
        SceneSpec s;
        s.canvas = 32;
        s.seed = 3;
        RenderResult r = render_scene(s);
        REQUIRE_THROWS_AS(segment_plant(r.image, Background::indoor_blue), RuntimeError);
    }
    SECTION("plant-free corner crop raises empty-mask error") {
        RenderResult r = render_scene(one_plant_scene(6));
        Tensor corner({3, 8, 8});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) corner.at3(c, y, x) = r.image.at3(c, y, x);
        REQUIRE_THROWS_AS(segment_plant(corner, Background::indoor_blue), RuntimeError);
    }
    SECTION("outdoor backgrounds unsupported") {
        RenderResult r = render_scene(one_plant_scene(7, Background::outdoor_soil_light));
        REQUIRE_THROWS_AS(segment_plant(r.image, Background::outdoor_soil_light), RuntimeError);
    }
}

TEST_CASE("compositing", "[synthdata]") {
    Tensor bg({3, 64, 64});
    render_background(bg, Background::outdoor_soil_light, 77);

    auto make_patch = [](int h, int w, double r, double g, double b) {
        Tensor p({4, h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                p.at3(0, y, x) = r;
                p.at3(1, y, x) = g;
                p.at3(2, y, x) = b;
                p.at3(3, y, x) = 1.0;
            }
        return p;
    };

    SECTION("zero patches: background unchanged, zero boxes") {
        CompositeResult r = composite({}, bg, 1, 5);
        REQUIRE(r.boxes.empty());
        REQUIRE(max_abs_diff(r.image, bg) == 0.0);
    }
    SECTION("n patches fully inside: one box per patch containing its pixels") {
        std::vector<Tensor> patches{make_patch(10, 8, 0.1, 0.6, 0.1),
                                    make_patch(12, 6, 0.2, 0.5, 0.1),
                                    make_patch(8, 8, 0.15, 0.55, 0.12)};
        CompositeResult r = composite(patches, bg, 1, 6);
        REQUIRE(r.boxes.size() == 3);
        for (size_t i = 0; i < 3; ++i) {
            REQUIRE(!r.boxes[i].empty());
            // box dims match the patch (no clipping for these placements)
            REQUIRE(r.boxes[i].w == patches[i].dim(2));
            REQUIRE(r.boxes[i].h == patches[i].dim(1));
        }
    }
    SECTION("overlapping patches: boxes match a placement-geometry oracle") {
        // two big patches in one row must overlap; box = full patch extent
        // regardless of paint order, clipped at the canvas
        std::vector<Tensor> patches{make_patch(30, 40, 0.1, 0.6, 0.1),
                                    make_patch(30, 40, 0.6, 0.1, 0.1)};
        CompositeResult r = composite(patches, bg, 1, 8);
        REQUIRE(r.boxes.size() == 2);
        // oracle: recompute placements with the same seeded jitter stream
        Rng rng(derive_seed(8, "composite"));
        std::vector<Box> oracle;
        for (int i = 0; i < 2; ++i) {
            const double cx = (i + 0.5) / 2.0 * 64 + rng.uniform(-0.04, 0.04) * 64;
            const double cy = 0.65 / 1.3 * 64 + rng.uniform(-0.04, 0.04) * 64;
            const int ox = static_cast<int>(std::lround(cx - 20.0));
            const int oy = static_cast<int>(std::lround(cy - 15.0));
            const int x0 = std::max(0, ox), y0 = std::max(0, oy);
            const int x1 = std::min(64, ox + 40), y1 = std::min(64, oy + 30);
            oracle.push_back({x0, y0, x1 - x0, y1 - y0});
        }
        double min_iou = 1.0;
        for (size_t i = 0; i < 2; ++i) {
            REQUIRE(r.boxes[i].x == oracle[i].x);
            REQUIRE(r.boxes[i].y == oracle[i].y);
            REQUIRE(r.boxes[i].w == oracle[i].w);
            REQUIRE(r.boxes[i].h == oracle[i].h);
            min_iou = std::min(min_iou, r.boxes[i].iou(oracle[i]));
        }
        REQUIRE(min_iou == Catch::Approx(1.0).margin(1e-6));
        // the two boxes really overlap and their mutual IoU agrees both ways
        REQUIRE(r.boxes[0].iou(r.boxes[1]) > 0.0);
        REQUIRE(r.boxes[0].iou(r.boxes[1]) ==
                Catch::Approx(oracle[0].iou(oracle[1])).margin(1e-6));
    }
    SECTION("patch larger than canvas rejected") {
        std::vector<Tensor> patches{make_patch(70, 10, 0.1, 0.6, 0.1)};
        REQUIRE_THROWS_AS(composite(patches, bg, 1, 9), RuntimeError);
    }
    SECTION("segmented patches composite cleanly") {
        RenderResult plant = render_scene(one_plant_scene(11));
        SegmentResult seg = segment_plant(plant.image, Background::indoor_blue);
        CompositeResult r = composite({seg.patch, seg.patch, seg.patch}, bg, 1, 10);
        REQUIRE(r.boxes.size() == 3);
        for (const auto& b : r.boxes) REQUIRE(!b.empty());
    }
}

TEST_CASE("ratio dataset mixing", "[synthdata]") {
    auto manifest_of = [](int n, const std::string& tag, const std::string& prov) {
        DatasetManifest m;
        m.split = "train";
        m.class_names = {"a", "b"};
        for (int i = 0; i < n; ++i) {
            ManifestEntry e;
            e.id = tag + std::to_string(i);
            e.path = e.id + ".ppm";
            e.label = i % 2 ? "a" : "b";
            e.provenance = prov;
            e.width = e.height = 32;
            m.entries.push_back(e);
        }
        return m;
    };
    DatasetManifest real = manifest_of(10, "real", "real");
    DatasetManifest pool = manifest_of(45, "syn", "synthetic");

    SECTION("ratio 0 keeps only real entries") {
        auto out = build_ratio_datasets(real, pool, {0}, 3);
        REQUIRE(out.size() == 1);
        REQUIRE(out[0].entries.size() == 10);
    }
    SECTION("ratio 100 doubles a 10-entry set") {
        auto out = build_ratio_datasets(real, pool, {100}, 3);
        REQUIRE(out[0].entries.size() == 20);
    }
    SECTION("nesting across the published ratio ladder") {
        auto out = build_ratio_datasets(real, pool, {0, 50, 100, 200, 300, 400}, 3);
        std::vector<std::set<std::string>> syn_sets;
        for (const auto& m : out) {
            std::set<std::string> ids;
            for (const auto& e : m.entries)
                if (e.provenance == "synthetic") ids.insert(e.id);
            syn_sets.push_back(std::move(ids));
        }
        REQUIRE(syn_sets[0].empty());
        for (size_t i = 1; i < syn_sets.size(); ++i) {
            REQUIRE(syn_sets[i].size() == static_cast<size_t>(std::vector<int>{0, 5, 10, 20, 30, 40}[i]));
            for (const auto& id : syn_sets[i - 1]) REQUIRE(syn_sets[i].count(id) == 1);
        }
    }
    SECTION("cardinality formula holds for odd sizes") {
        DatasetManifest real7 = manifest_of(7, "r", "real");
        auto out = build_ratio_datasets(real7, pool, {50, 150}, 9);
        REQUIRE(out[0].entries.size() == 7 + 3);   // floor(50*7/100)
        REQUIRE(out[1].entries.size() == 7 + 10);  // floor(150*7/100)
    }
    SECTION("pool exhaustion raises") {
        REQUIRE_THROWS_AS(build_ratio_datasets(real, pool, {500}, 3), RuntimeError);
    }
}

TEST_CASE("detection label export", "[synthdata]") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "agrigen_labels_test";
    fs::remove_all(dir);

    DatasetManifest m;
    m.split = "train";
    m.class_names = detection_class_names();
    m.config_hash = "cafe";

    ManifestEntry full;
    full.id = "full";
    full.path = "full.ppm";
    full.width = full.height = 64;
    full.boxes.push_back({0, {0, 0, 64, 64}});
    m.entries.push_back(full);

    ManifestEntry empty;
    empty.id = "empty";
    empty.path = "empty.ppm";
    empty.width = empty.height = 64;
    m.entries.push_back(empty);

    Rng rng(31);
    ManifestEntry random;
    random.id = "random";
    random.path = "random.ppm";
    random.width = random.height = 64;
    std::vector<Box> originals;
    for (int i = 0; i < 6; ++i) {
        const int x = static_cast<int>(rng.uniform_int(0, 40));
        const int y = static_cast<int>(rng.uniform_int(0, 40));
        const int w = static_cast<int>(rng.uniform_int(2, 20));
        const int h = static_cast<int>(rng.uniform_int(2, 20));
        originals.push_back({x, y, w, h});
        random.boxes.push_back({i % 4, {x, y, w, h}});
    }
    m.entries.push_back(random);

    export_detection_labels(m, dir);

    SECTION("full-canvas box serializes to the canonical line") {
        std::ifstream f(dir / "full.txt");
        std::string line;
        std::getline(f, line);
        REQUIRE(line == "0 0.500000 0.500000 1.000000 1.000000");
    }
    SECTION("empty box list creates an empty file") {
        REQUIRE(fs::exists(dir / "empty.txt"));
        REQUIRE(fs::file_size(dir / "empty.txt") == 0);
    }
    SECTION("round trip reproduces pixel boxes within 0.5px") {
        std::ifstream f(dir / "random.txt");
        int cid;
        double cx, cy, w, h;
        size_t i = 0;
        while (f >> cid >> cx >> cy >> w >> h) {
            const double x = cx * 64 - w * 64 / 2.0;
            const double y = cy * 64 - h * 64 / 2.0;
            REQUIRE(std::abs(x - originals[i].x) < 0.5);
            REQUIRE(std::abs(y - originals[i].y) < 0.5);
            REQUIRE(std::abs(w * 64 - originals[i].w) < 0.5);
            REQUIRE(std::abs(h * 64 - originals[i].h) < 0.5);
            ++i;
        }
        REQUIRE(i == originals.size());
    }
    SECTION("class map emitted") {
        std::ifstream f(dir / "classes.txt");
        std::string line;
        std::getline(f, line);  // comment with config hash
        REQUIRE(line.find("cafe") != std::string::npos);
        std::getline(f, line);
        REQUIRE(line == "crop");
    }
    fs::remove_all(dir);
}

TEST_CASE("dataset writer round trip", "[synthdata]") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "agrigen_ds_test";
    fs::remove_all(dir);

    auto entries = make_phenotype_set(2, Background::indoor_blue, 32, 5, "train", "real");
    REQUIRE(entries.size() == 8);
    DatasetManifest m = write_dataset(dir, entries, phenotype_class_names(), "train", "beef");
    m.validate(dir);

    DatasetManifest loaded = DatasetManifest::load(dir / "manifest.json");
    REQUIRE(loaded.entries.size() == 8);
    REQUIRE(loaded.config_hash == "beef");
    REQUIRE(loaded.class_names == phenotype_class_names());

    // label/caption consistency
    for (const auto& e : loaded.entries)
        REQUIRE(e.caption.find(e.label) != std::string::npos);

    // images survive the PPM round trip within quantization
    Tensor imgs = load_images(loaded, dir);
    REQUIRE(imgs.shape == std::vector<int>{8, 3, 32, 32});
    REQUIRE(max_abs_diff(imgs, imgs) == 0.0);
    Tensor reread = read_ppm(dir / loaded.entries[0].path);
    for (int64_t i = 0; i < reread.size(); ++i)
        REQUIRE(std::abs(reread[i] - entries[0].image[i]) <= 0.5 / 255.0 + 1e-12);

    fs::remove_all(dir);
}
