#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "agrigen/image_io.hpp"
#include "agrigen/rng.hpp"
#include "agrigen/tensor.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Procedural plant scenes: stems and elliptic leaves over flat or value-noise
// backgrounds. Everything is a pure function of (spec, seed).
// ----------------------------------------------------------------------------

enum class Phenotype { healthy, spotted, yellowing, flowering };
enum class Species { canola, soybean, foxtail, pigweed, kochia };
enum class Background { indoor_blue, outdoor_soil_light, outdoor_soil_dark };

inline const char* phenotype_word(Phenotype p) {
    switch (p) {
        case Phenotype::healthy: return "healthy";
        case Phenotype::spotted: return "spotted";
        case Phenotype::yellowing: return "yellowing";
        case Phenotype::flowering: return "flowering";
    }
    return "healthy";
}

inline const char* species_word(Species s) {
    switch (s) {
        case Species::canola: return "canola";
        case Species::soybean: return "soybean";
        case Species::foxtail: return "foxtail";
        case Species::pigweed: return "pigweed";
        case Species::kochia: return "kochia";
    }
    return "canola";
}

inline Phenotype phenotype_from_word(const std::string& w) {
    if (w == "healthy") return Phenotype::healthy;
    if (w == "spotted") return Phenotype::spotted;
    if (w == "yellowing") return Phenotype::yellowing;
    if (w == "flowering") return Phenotype::flowering;
    throw RuntimeError("unknown phenotype: " + w);
}

struct PlantSpec {
    Species species = Species::canola;
    double growth_stage = 0.5;  // [0, 1]
    Phenotype phenotype = Phenotype::healthy;
    uint64_t seed = 0;
};

struct PlacedPlant {
    PlantSpec plant;
    double x = 0.5;     // base point, fraction of canvas width
    double y = 0.85;    // base point, fraction of canvas height
    double scale = 1.0;
};

struct SceneSpec {
    Background background = Background::indoor_blue;
    std::vector<PlacedPlant> plants;
    int canvas = 64;
    uint64_t seed = 0;
};

struct Box {
    int x = 0, y = 0, w = 0, h = 0;

    bool empty() const { return w <= 0 || h <= 0; }
    double iou(const Box& o) const {
        const int x0 = std::max(x, o.x), y0 = std::max(y, o.y);
        const int x1 = std::min(x + w, o.x + o.w), y1 = std::min(y + h, o.y + o.h);
        const double inter = std::max(0, x1 - x0) * static_cast<double>(std::max(0, y1 - y0));
        const double uni = static_cast<double>(w) * h + static_cast<double>(o.w) * o.h - inter;
        return uni > 0.0 ? inter / uni : 0.0;
    }
};

struct RenderResult {
    Tensor image;                            // 3 x H x W
    std::vector<std::vector<uint8_t>> masks; // per plant, H*W, final ownership
    std::vector<Box> boxes;                  // tight bounds of each mask
};

// ---- value noise ---------------------------------------------------------------

namespace detail {

inline double lattice_hash(int x, int y, uint64_t seed) {
    uint64_t h = seed;
    h = fnv1a64(&x, sizeof(x), h);
    h = fnv1a64(&y, sizeof(y), h);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double value_noise(double x, double y, uint64_t seed, double cell) {
    const double gx = x / cell, gy = y / cell;
    const int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
    const double fx = gx - x0, fy = gy - y0;
    const double sx = fx * fx * (3.0 - 2.0 * fx), sy = fy * fy * (3.0 - 2.0 * fy);
    const double v00 = lattice_hash(x0, y0, seed), v10 = lattice_hash(x0 + 1, y0, seed);
    const double v01 = lattice_hash(x0, y0 + 1, seed), v11 = lattice_hash(x0 + 1, y0 + 1, seed);
    const double top = v00 + (v10 - v00) * sx;
    const double bot = v01 + (v11 - v01) * sx;
    return top + (bot - top) * sy;  // in [0, 1]
}

struct Rgb {
    double r, g, b;
};

inline void put_pixel(Tensor& img, std::vector<int>& owner, int plant_idx, int x, int y, Rgb c) {
    const int H = img.dim(1), W = img.dim(2);
    if (x < 0 || x >= W || y < 0 || y >= H) return;
    img.at3(0, y, x) = c.r;
    img.at3(1, y, x) = c.g;
    img.at3(2, y, x) = c.b;
    owner[static_cast<size_t>(y) * W + static_cast<size_t>(x)] = plant_idx;
}

inline void fill_disc(Tensor& img, std::vector<int>& owner, int plant_idx, double cx, double cy,
                      double radius, Rgb c) {
    const int x0 = static_cast<int>(std::floor(cx - radius)), x1 = static_cast<int>(std::ceil(cx + radius));
    const int y0 = static_cast<int>(std::floor(cy - radius)), y1 = static_cast<int>(std::ceil(cy + radius));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= radius * radius) put_pixel(img, owner, plant_idx, x, y, c);
        }
}

inline void fill_ellipse(Tensor& img, std::vector<int>& owner, int plant_idx, double cx, double cy,
                         double a, double b, double angle, Rgb c) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double ext = std::max(a, b);
    const int x0 = static_cast<int>(std::floor(cx - ext)), x1 = static_cast<int>(std::ceil(cx + ext));
    const int y0 = static_cast<int>(std::floor(cy - ext)), y1 = static_cast<int>(std::ceil(cy + ext));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
            if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) put_pixel(img, owner, plant_idx, x, y, c);
        }
}

} // namespace detail

// ---- rendering -----------------------------------------------------------------

inline void render_background(Tensor& img, Background bg, uint64_t seed) {
    const int H = img.dim(1), W = img.dim(2);
    detail::Rgb base;
    double amp;
    switch (bg) {
        case Background::indoor_blue: base = {0.10, 0.22, 0.72}; amp = 0.02; break;
        case Background::outdoor_soil_light: base = {0.58, 0.47, 0.34}; amp = 0.10; break;
        case Background::outdoor_soil_dark: base = {0.26, 0.19, 0.13}; amp = 0.08; break;
        default: throw RuntimeError("render_background: unknown background");
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double n = detail::value_noise(x, y, seed, 9.0) +
                             0.5 * detail::value_noise(x, y, seed ^ 0x9e37ull, 4.0);
            const double v = amp * (n / 1.5 - 0.5);
            const double grad = bg == Background::indoor_blue ? 0.03 * (y / static_cast<double>(H) - 0.5) : 0.0;
            img.at3(0, y, x) = std::clamp(base.r + v + grad, 0.0, 1.0);
            img.at3(1, y, x) = std::clamp(base.g + v + grad, 0.0, 1.0);
            img.at3(2, y, x) = std::clamp(base.b + v * 0.6 + grad, 0.0, 1.0);
        }
}

namespace detail {

inline Rgb leaf_color(const PlantSpec& p, Rng& rng) {
    const double j = rng.uniform(-0.03, 0.03);
    Rgb c;
    switch (p.phenotype) {
        case Phenotype::yellowing: c = {0.55 + j, 0.52 + j, 0.08}; break;
        default: c = {0.13 + j, 0.52 + j, 0.10}; break;
    }
    if (p.species == Species::soybean) c.g -= 0.06;
    if (p.species == Species::foxtail) { c.r += 0.08; c.g += 0.05; }
    if (p.species == Species::pigweed) c.r += 0.10;
    return c;
}

inline void draw_plant(Tensor& img, std::vector<int>& owner, int plant_idx, const PlacedPlant& pp,
                       int canvas) {
    const PlantSpec& p = pp.plant;
    Rng rng(derive_seed(p.seed, "plant"));
    const double stage = std::clamp(p.growth_stage, 0.0, 1.0);
    const double bx = pp.x * canvas, by = pp.y * canvas;
    const double height = pp.scale * canvas * (0.18 + 0.50 * stage);
    const double bend = rng.uniform(-0.12, 0.12) * height;

    Rgb stem = p.species == Species::pigweed ? Rgb{0.45, 0.15, 0.12} : Rgb{0.13, 0.33, 0.10};
    const double stem_r = std::max(0.6, height * 0.035);
    const int steps = std::max(6, static_cast<int>(height));
    for (int i = 0; i <= steps; ++i) {
        const double s = static_cast<double>(i) / steps;
        const double px = bx + bend * std::sin(s * M_PI * 0.5);
        const double py = by - s * height;
        fill_disc(img, owner, plant_idx, px, py, stem_r, stem);
    }

    int leaves = 2 + static_cast<int>(std::lround(stage * 5.0));
    double leaf_len = height * 0.33, leaf_wid = leaf_len * 0.5;
    double angle_base = 0.9;
    switch (p.species) {
        case Species::canola: break;
        case Species::soybean: leaf_len = height * 0.30; leaf_wid = leaf_len * 0.38; break;
        case Species::foxtail: leaf_len = height * 0.52; leaf_wid = std::max(0.8, leaf_len * 0.09); angle_base = 1.15; break;
        case Species::pigweed: leaf_len = height * 0.28; leaf_wid = leaf_len * 0.45; break;
        case Species::kochia: leaves += 4; leaf_len = height * 0.19; leaf_wid = leaf_len * 0.32; break;
    }

    for (int i = 0; i < leaves; ++i) {
        const double f = 0.25 + 0.65 * (static_cast<double>(i) + rng.uniform(0.0, 0.6)) / leaves;
        const double side = (i % 2 == 0) ? 1.0 : -1.0;
        const double sx = bx + bend * std::sin(f * M_PI * 0.5);
        const double sy = by - f * height;
        const double ang = side * (angle_base + rng.uniform(-0.25, 0.25));
        // keep the ellipse center within its own half-axis of the stem anchor
        const double cx = sx + side * leaf_len * 0.40 * std::cos(ang * 0.5);
        const double cy = sy - leaf_len * 0.28 * std::sin(std::abs(ang) * 0.5);
        Rgb lc = leaf_color(p, rng);
        fill_ellipse(img, owner, plant_idx, cx, cy, leaf_len * 0.5, leaf_wid * 0.5, ang, lc);
        if (p.phenotype == Phenotype::spotted) {
            const int spots = 2 + static_cast<int>(rng.uniform_int(0, 1));
            for (int sp = 0; sp < spots; ++sp) {
                const double ox = rng.uniform(-0.3, 0.3) * leaf_len;
                const double oy = rng.uniform(-0.25, 0.25) * leaf_wid;
                fill_disc(img, owner, plant_idx, cx + ox, cy + oy,
                          std::max(1.0, leaf_wid * 0.30), {0.30, 0.16, 0.05});
            }
        }
    }

    if (p.phenotype == Phenotype::flowering) {
        const int flowers = 3 + static_cast<int>(rng.uniform_int(0, 1));
        for (int i = 0; i < flowers; ++i) {
            const double fx = bx + bend + rng.uniform(-0.04, 0.04) * height;
            const double fy = by - height * (1.0 - 0.12 * i) - rng.uniform(0.0, 0.04) * height;
            fill_disc(img, owner, plant_idx, fx, fy, std::max(1.2, height * 0.10),
                      {0.93, 0.86, 0.14});
        }
    }
}

} // namespace detail

/// Renders the scene: deterministic background, plants painted in order with
/// final-ownership masks and tight boxes.
inline RenderResult render_scene(const SceneSpec& spec) {
    RenderResult out;
    const int H = spec.canvas, W = spec.canvas;
    out.image = Tensor({3, H, W});
    render_background(out.image, spec.background, spec.seed);
    std::vector<int> owner(static_cast<size_t>(H) * W, -1);
    for (size_t i = 0; i < spec.plants.size(); ++i)
        detail::draw_plant(out.image, owner, static_cast<int>(i), spec.plants[i], spec.canvas);

    out.masks.assign(spec.plants.size(), std::vector<uint8_t>(static_cast<size_t>(H) * W, 0));
    std::vector<std::array<int, 4>> bounds(spec.plants.size(), {W, H, -1, -1});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int o = owner[static_cast<size_t>(y) * W + static_cast<size_t>(x)];
            if (o < 0) continue;
            out.masks[static_cast<size_t>(o)][static_cast<size_t>(y) * W + static_cast<size_t>(x)] = 1;
            auto& b = bounds[static_cast<size_t>(o)];
            b[0] = std::min(b[0], x);
            b[1] = std::min(b[1], y);
            b[2] = std::max(b[2], x);
            b[3] = std::max(b[3], y);
        }
    for (const auto& b : bounds) {
        if (b[2] < 0)
            out.boxes.push_back({0, 0, 0, 0});
        else
            out.boxes.push_back({b[0], b[1], b[2] - b[0] + 1, b[3] - b[1] + 1});
    }
    return out;
}

/// Template caption with a controlled vocabulary. The identifier token is
/// never emitted here.
inline std::string caption_for(const SceneSpec& spec) {
    const std::string env = spec.background == Background::indoor_blue ? "an indoor lab" : "an outdoor field";
    if (spec.plants.empty()) return "bare ground in " + env;
    const PlantSpec& p = spec.plants.front().plant;
    const double st = p.growth_stage;
    const std::string stage = st < 0.33 ? "seedling" : (st < 0.66 ? "vegetative" : "mature");
    if (spec.plants.size() == 1) {
        return std::string("a ") + phenotype_word(p.phenotype) + " " + species_word(p.species) +
               " plant at " + stage + " stage in " + env;
    }
    return std::string(phenotype_word(p.phenotype)) + " " + species_word(p.species) +
           " plants in rows in " + env;
}

// ---- segmentation ---------------------------------------------------------------

struct SegmentResult {
    std::vector<uint8_t> mask;  // H*W over the source image
    Box box;
    Tensor patch;  // 4 x h x w RGBA crop
};

/// Color-threshold segmentation against the uniform blue indoor background,
/// keeping the largest connected component.
inline SegmentResult segment_plant(const Tensor& img, Background background) {
    if (background != Background::indoor_blue)
        throw RuntimeError("segment_plant: only the indoor blue background is supported");
    const int H = img.dim(1), W = img.dim(2);
    std::vector<uint8_t> raw(static_cast<size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double blueness =
                img.at3(2, y, x) - std::max(img.at3(0, y, x), img.at3(1, y, x));
            raw[static_cast<size_t>(y) * W + static_cast<size_t>(x)] = blueness < 0.15 ? 1 : 0;
        }

    // largest 4-connected component
    std::vector<int> comp(static_cast<size_t>(H) * W, -1);
    int best_comp = -1, best_size = 0, n_comp = 0;
    for (int start = 0; start < H * W; ++start) {
        if (!raw[static_cast<size_t>(start)] || comp[static_cast<size_t>(start)] >= 0) continue;
        int size = 0;
        std::queue<int> q;
        q.push(start);
        comp[static_cast<size_t>(start)] = n_comp;
        while (!q.empty()) {
            const int cur = q.front();
            q.pop();
            ++size;
            const int cx = cur % W, cy = cur / W;
            const int nb[4][2] = {{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}};
            for (auto& [nx, ny] : nb) {
                if (nx < 0 || nx >= W || ny < 0 || ny >= H) continue;
                const int ni = ny * W + nx;
                if (raw[static_cast<size_t>(ni)] && comp[static_cast<size_t>(ni)] < 0) {
                    comp[static_cast<size_t>(ni)] = n_comp;
                    q.push(ni);
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_comp = n_comp;
        }
        ++n_comp;
    }
    if (best_comp < 0) throw RuntimeError("segment_plant: no plant found (empty mask)");

    SegmentResult out;
    out.mask.assign(static_cast<size_t>(H) * W, 0);
    int x0 = W, y0 = H, x1 = -1, y1 = -1;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (comp[static_cast<size_t>(y) * W + static_cast<size_t>(x)] == best_comp) {
                out.mask[static_cast<size_t>(y) * W + static_cast<size_t>(x)] = 1;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    out.box = {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
    out.patch = Tensor({4, out.box.h, out.box.w});
    for (int y = 0; y < out.box.h; ++y)
        for (int x = 0; x < out.box.w; ++x) {
            const int sy = y0 + y, sx = x0 + x;
            const bool on = out.mask[static_cast<size_t>(sy) * W + static_cast<size_t>(sx)] != 0;
            out.patch.at3(0, y, x) = img.at3(0, sy, sx);
            out.patch.at3(1, y, x) = img.at3(1, sy, sx);
            out.patch.at3(2, y, x) = img.at3(2, sy, sx);
            out.patch.at3(3, y, x) = on ? 1.0 : 0.0;
        }
    return out;
}

// ---- compositing ----------------------------------------------------------------

struct CompositeResult {
    Tensor image;
    std::vector<Box> boxes;  // one per patch, opaque extent clipped to canvas
};

/// Alpha-blends RGBA patches onto the background in row order with seeded
/// jitter. Each patch contributes one box regardless of later overlap.
inline CompositeResult composite(const std::vector<Tensor>& patches, const Tensor& background,
                                 int rows, uint64_t seed) {
    CompositeResult out;
    out.image = background;
    const int H = background.dim(1), W = background.dim(2);
    const int n = static_cast<int>(patches.size());
    if (n == 0) return out;
    if (rows < 1) rows = n <= 3 ? 1 : 2;
    Rng rng(derive_seed(seed, "composite"));

    const int per_row = (n + rows - 1) / rows;
    for (int i = 0; i < n; ++i) {
        const Tensor& p = patches[static_cast<size_t>(i)];
        if (p.ndim() != 3 || p.dim(0) != 4) throw ShapeError("composite: patches must be 4 x h x w");
        const int ph = p.dim(1), pw = p.dim(2);
        if (ph > H || pw > W) throw RuntimeError("composite: patch larger than canvas");
        const int row = i / per_row, col = i % per_row;
        const int in_row = std::min(per_row, n - row * per_row);
        const double cx = (col + 0.5) / in_row * W + rng.uniform(-0.04, 0.04) * W;
        const double cy = (row + 0.65) / (rows + 0.3) * H + rng.uniform(-0.04, 0.04) * H;
        const int ox = static_cast<int>(std::lround(cx - pw / 2.0));
        const int oy = static_cast<int>(std::lround(cy - ph / 2.0));

        int bx0 = W, by0 = H, bx1 = -1, by1 = -1;
        for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x) {
                const int ty = oy + y, tx = ox + x;
                if (ty < 0 || ty >= H || tx < 0 || tx >= W) continue;
                const double a = p.at3(3, y, x);
                if (a <= 0.0) continue;
                for (int c = 0; c < 3; ++c)
                    out.image.at3(c, ty, tx) =
                        a * p.at3(c, y, x) + (1.0 - a) * out.image.at3(c, ty, tx);
                if (a > 0.5) {
                    bx0 = std::min(bx0, tx);
                    by0 = std::min(by0, ty);
                    bx1 = std::max(bx1, tx);
                    by1 = std::max(by1, ty);
                }
            }
        if (bx1 < 0)
            out.boxes.push_back({0, 0, 0, 0});
        else
            out.boxes.push_back({bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1});
    }
    return out;
}

// ---- manifests ------------------------------------------------------------------

struct BoxLabel {
    int class_id = 0;
    Box box;
};

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest's directory
    std::string caption;
    std::string label;
    std::vector<BoxLabel> boxes;
    std::string provenance = "real";  // real | synthetic | translated
    int width = 0, height = 0;
};

struct DatasetManifest {
    static constexpr int kSchemaVersion = 1;
    std::string split;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;
    std::string config_hash = "none";

    int class_id(const std::string& label) const {
        for (size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == label) return static_cast<int>(i);
        throw RuntimeError("manifest: label not in class list: " + label);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = kSchemaVersion;
        j["split"] = split;
        j["classes"] = class_names;
        j["config"] = config_hash;
        j["tool_version"] = kToolVersion;
        j["entries"] = nlohmann::json::array();
        for (const auto& e : entries) {
            nlohmann::json je{{"id", e.id},       {"path", e.path},
                              {"caption", e.caption}, {"label", e.label},
                              {"provenance", e.provenance}, {"width", e.width},
                              {"height", e.height}};
            je["boxes"] = nlohmann::json::array();
            for (const auto& b : e.boxes)
                je["boxes"].push_back({{"class_id", b.class_id},
                                       {"x", b.box.x},
                                       {"y", b.box.y},
                                       {"w", b.box.w},
                                       {"h", b.box.h}});
            j["entries"].push_back(std::move(je));
        }
        return j;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write manifest: " + path.string());
        f << to_json().dump(2) << "\n";
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open manifest: " + path.string());
        nlohmann::json j = nlohmann::json::parse(f);
        if (j.at("schema_version").get<int>() != kSchemaVersion)
            throw IoError("unsupported manifest schema in " + path.string());
        DatasetManifest m;
        m.split = j.at("split").get<std::string>();
        m.class_names = j.at("classes").get<std::vector<std::string>>();
        m.config_hash = j.value("config", "none");
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.path = je.at("path").get<std::string>();
            e.caption = je.at("caption").get<std::string>();
            e.label = je.at("label").get<std::string>();
            e.provenance = je.at("provenance").get<std::string>();
            e.width = je.at("width").get<int>();
            e.height = je.at("height").get<int>();
            for (const auto& jb : je.at("boxes"))
                e.boxes.push_back({jb.at("class_id").get<int>(),
                                   {jb.at("x").get<int>(), jb.at("y").get<int>(),
                                    jb.at("w").get<int>(), jb.at("h").get<int>()}});
            m.entries.push_back(std::move(e));
        }
        return m;
    }

    /// Paths resolve, boxes sit inside their images.
    void validate(const std::filesystem::path& base_dir) const {
        for (const auto& e : entries) {
            if (!std::filesystem::exists(base_dir / e.path))
                throw IoError("manifest entry missing on disk: " + e.path);
            for (const auto& b : e.boxes)
                if (b.box.x < 0 || b.box.y < 0 || b.box.x + b.box.w > e.width ||
                    b.box.y + b.box.h > e.height)
                    throw RuntimeError("manifest box outside image bounds: " + e.id);
        }
    }
};

// ---- ratio mixing ----------------------------------------------------------------

/// Nested ratio datasets: ratio r keeps all real entries and prepends the
/// first floor(r * n_real / 100) entries of one seed-shuffled pool ordering,
/// so lower-ratio synthetic sets are strict subsets of higher ones.
inline std::vector<DatasetManifest> build_ratio_datasets(const DatasetManifest& real,
                                                         const DatasetManifest& synthetic_pool,
                                                         const std::vector<int>& ratios,
                                                         uint64_t seed) {
    const int n_real = static_cast<int>(real.entries.size());
    if (n_real < 1) throw RuntimeError("build_ratio_datasets: empty real set");
    Rng rng(derive_seed(seed, "ratio-shuffle"));
    std::vector<int> order = rng.permutation(static_cast<int>(synthetic_pool.entries.size()));

    std::vector<DatasetManifest> out;
    for (int r : ratios) {
        if (r < 0) throw RuntimeError("build_ratio_datasets: negative ratio");
        const int n_syn = static_cast<int>(static_cast<int64_t>(r) * n_real / 100);
        if (n_syn > static_cast<int>(synthetic_pool.entries.size()))
            throw RuntimeError("build_ratio_datasets: synthetic pool exhausted at ratio " +
                               std::to_string(r) + "% (need " + std::to_string(n_syn) + ", have " +
                               std::to_string(synthetic_pool.entries.size()) + ")");
        DatasetManifest m;
        m.split = real.split + "_ratio" + std::to_string(r);
        m.class_names = real.class_names;
        m.config_hash = real.config_hash;
        m.entries = real.entries;
        for (int i = 0; i < n_syn; ++i)
            m.entries.push_back(synthetic_pool.entries[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        out.push_back(std::move(m));
    }
    return out;
}

// ---- detection label export --------------------------------------------------------

// ---- dataset builders ----------------------------------------------------------

struct RenderedEntry {
    Tensor image;
    ManifestEntry meta;
};

inline const std::vector<std::string>& phenotype_class_names() {
    static const std::vector<std::string> names{"healthy", "spotted", "yellowing", "flowering"};
    return names;
}

/// Detection class names standing in for the crop plus three weed species.
inline const std::vector<std::string>& detection_class_names() {
    static const std::vector<std::string> names{"crop", "weed_a", "weed_b", "weed_c"};
    return names;
}

inline Species detection_species(int class_id) {
    switch (class_id) {
        case 0: return Species::soybean;
        case 1: return Species::foxtail;
        case 2: return Species::pigweed;
        case 3: return Species::kochia;
    }
    throw RuntimeError("detection class id out of range");
}

/// Single-plant phenotype-classification scenes; label, caption and rendered
/// phenotype agree by construction.
inline std::vector<RenderedEntry> make_phenotype_set(int per_class, Background bg, int canvas,
                                                     uint64_t seed, const std::string& split,
                                                     const std::string& provenance) {
    std::vector<RenderedEntry> out;
    const auto& classes = phenotype_class_names();
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        for (int i = 0; i < per_class; ++i) {
            const uint64_t s = derive_seed(seed, "pheno-" + split + "-" + classes[ci], static_cast<uint64_t>(i));
            Rng rng(s);
            SceneSpec scene;
            scene.background = bg;
            scene.canvas = canvas;
            scene.seed = derive_seed(s, "bg");
            PlacedPlant pp;
            pp.plant.species = Species::canola;
            pp.plant.phenotype = phenotype_from_word(classes[ci]);
            pp.plant.growth_stage = rng.uniform(0.25, 0.95);
            pp.plant.seed = derive_seed(s, "spec");
            pp.x = rng.uniform(0.38, 0.62);
            pp.y = rng.uniform(0.78, 0.92);
            pp.scale = rng.uniform(0.8, 1.15);
            scene.plants.push_back(pp);

            RenderedEntry e;
            RenderResult r = render_scene(scene);
            e.image = std::move(r.image);
            e.meta.id = split + "-" + classes[ci] + "-" + std::to_string(i);
            e.meta.path = e.meta.id + ".ppm";
            e.meta.caption = caption_for(scene);
            e.meta.label = classes[ci];
            e.meta.provenance = provenance;
            e.meta.width = canvas;
            e.meta.height = canvas;
            out.push_back(std::move(e));
        }
    }
    return out;
}

/// Row-composited detection scenes with 3-6 plants (crop plus weeds).
inline std::vector<RenderedEntry> make_detection_set(int count, Background bg, int canvas,
                                                     uint64_t seed, const std::string& split,
                                                     const std::string& provenance) {
    std::vector<RenderedEntry> out;
    for (int i = 0; i < count; ++i) {
        const uint64_t s = derive_seed(seed, "detect-" + split, static_cast<uint64_t>(i));
        Rng rng(s);
        SceneSpec scene;
        scene.background = bg;
        scene.canvas = canvas;
        scene.seed = derive_seed(s, "bg");
        const int n_plants = 3 + static_cast<int>(rng.uniform_int(0, 3));
        std::vector<int> class_ids;
        for (int p = 0; p < n_plants; ++p) {
            // crops dominate, weeds mixed in
            const int cid = rng.uniform() < 0.55 ? 0 : 1 + static_cast<int>(rng.uniform_int(0, 2));
            class_ids.push_back(cid);
            PlacedPlant pp;
            pp.plant.species = detection_species(cid);
            pp.plant.phenotype = Phenotype::healthy;
            pp.plant.growth_stage = rng.uniform(0.3, 0.8);
            pp.plant.seed = derive_seed(s, "plant", static_cast<uint64_t>(p));
            pp.x = (p + 0.5) / n_plants + rng.uniform(-0.05, 0.05);
            pp.y = rng.uniform(0.7, 0.9);
            pp.scale = rng.uniform(0.45, 0.7);
            scene.plants.push_back(pp);
        }
        RenderResult r = render_scene(scene);
        RenderedEntry e;
        e.image = std::move(r.image);
        e.meta.id = split + "-scene-" + std::to_string(i);
        e.meta.path = e.meta.id + ".ppm";
        e.meta.caption = caption_for(scene);
        e.meta.label = "scene";
        e.meta.provenance = provenance;
        e.meta.width = canvas;
        e.meta.height = canvas;
        for (int p = 0; p < n_plants; ++p)
            if (!r.boxes[static_cast<size_t>(p)].empty())
                e.meta.boxes.push_back({class_ids[static_cast<size_t>(p)], r.boxes[static_cast<size_t>(p)]});
        out.push_back(std::move(e));
    }
    return out;
}

/// Uniform-noise images: the negative-control pool for augmentation runs.
inline std::vector<RenderedEntry> make_noise_set(int per_class, int canvas, uint64_t seed,
                                                 const std::string& split) {
    std::vector<RenderedEntry> out;
    const auto& classes = phenotype_class_names();
    for (size_t ci = 0; ci < classes.size(); ++ci)
        for (int i = 0; i < per_class; ++i) {
            Rng rng(derive_seed(seed, "noise-" + classes[ci], static_cast<uint64_t>(i)));
            RenderedEntry e;
            e.image = rng.uniform_tensor({3, canvas, canvas}, 0.0, 1.0);
            e.meta.id = split + "-noise-" + classes[ci] + "-" + std::to_string(i);
            e.meta.path = e.meta.id + ".ppm";
            e.meta.caption = "noise";
            e.meta.label = classes[ci];
            e.meta.provenance = "synthetic";
            e.meta.width = canvas;
            e.meta.height = canvas;
            out.push_back(std::move(e));
        }
    return out;
}

/// Persists rendered entries as PPM files plus a manifest.json in `dir`.
inline DatasetManifest write_dataset(const std::filesystem::path& dir,
                                     const std::vector<RenderedEntry>& entries,
                                     std::vector<std::string> class_names, const std::string& split,
                                     const std::string& config_hash,
                                     const std::string& manifest_name = "manifest.json") {
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.split = split;
    m.class_names = std::move(class_names);
    m.config_hash = config_hash;
    for (const auto& e : entries) {
        write_ppm(dir / e.meta.path, e.image, config_hash);
        m.entries.push_back(e.meta);
    }
    m.save(dir / manifest_name);
    return m;
}

/// Loads every image of a manifest into one N x 3 x H x W stack (entry order).
inline Tensor load_images(const DatasetManifest& m, const std::filesystem::path& base_dir) {
    if (m.entries.empty()) throw RuntimeError("load_images: empty manifest");
    Tensor first = read_ppm(base_dir / m.entries[0].path);
    Tensor out({static_cast<int>(m.entries.size()), first.dim(0), first.dim(1), first.dim(2)});
    std::copy(first.data.begin(), first.data.end(), out.data.begin());
    for (size_t i = 1; i < m.entries.size(); ++i) {
        Tensor img = read_ppm(base_dir / m.entries[i].path);
        check_same_shape(img, first, "load_images");
        std::copy(img.data.begin(), img.data.end(),
                  out.data.begin() + static_cast<int64_t>(i) * first.size());
    }
    return out;
}

/// One text file per image: `class_id cx cy w h`, center/size normalized to
/// [0, 1] at 6 decimal places, plus a class-map file.
inline void export_detection_labels(const DatasetManifest& manifest,
                                    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream cf(dir / "classes.txt");
        cf << "# config=" << manifest.config_hash << " version=" << kToolVersion << "\n";
        for (const auto& c : manifest.class_names) cf << c << "\n";
    }
    char buf[128];
    for (const auto& e : manifest.entries) {
        std::filesystem::path name = std::filesystem::path(e.path).stem();
        std::ofstream f(dir / (name.string() + ".txt"));
        if (!f) throw IoError("cannot write label file for " + e.id);
        for (const auto& b : e.boxes) {
            const double cx = (b.box.x + b.box.w / 2.0) / e.width;
            const double cy = (b.box.y + b.box.h / 2.0) / e.height;
            const double w = static_cast<double>(b.box.w) / e.width;
            const double h = static_cast<double>(b.box.h) / e.height;
            std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f\n", b.class_id, cx, cy, w, h);
            f << buf;
        }
    }
}

} // namespace agrigen
