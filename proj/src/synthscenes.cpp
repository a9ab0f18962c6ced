#include "usersod/synthscenes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "usersod/rng.hpp"

namespace usersod::synth {
namespace {

struct Point {
    double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double px, double py) {
    bool in = false;
    for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) in = !in;
    }
    return in;
}

struct ShapeGeometry {
    std::string shape;
    double cx = 0, cy = 0;
    double scale = 0; // circle radius, square half-side, triangle side, star outer radius
    std::vector<Point> polygon;

    double extent() const {
        if (shape == "triangle") return scale / std::sqrt(3.0); // circumradius
        return scale;
    }
};

ShapeGeometry make_geometry(const std::string& shape, double area) {
    ShapeGeometry g;
    g.shape = shape;
    if (shape == "circle") {
        g.scale = std::sqrt(area / std::numbers::pi);
    } else if (shape == "square") {
        g.scale = std::sqrt(area) / 2.0;
    } else if (shape == "triangle") {
        g.scale = std::sqrt(4.0 * area / std::sqrt(3.0));
    } else if (shape == "star") {
        // 5-point star with inner radius half the outer one.
        g.scale = std::sqrt(area / (2.5 * std::sin(std::numbers::pi / 5.0)));
    } else {
        throw InvariantError("unknown shape '" + shape + "'");
    }
    return g;
}

void place(ShapeGeometry& g, double cx, double cy) {
    g.cx = cx;
    g.cy = cy;
    g.polygon.clear();
    if (g.shape == "triangle") {
        const double r = g.scale / std::sqrt(3.0);
        for (int k = 0; k < 3; ++k) {
            const double a = -std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3;
            g.polygon.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
        }
    } else if (g.shape == "star") {
        for (int k = 0; k < 10; ++k) {
            const double r = (k % 2 == 0) ? g.scale : g.scale * 0.5;
            const double a = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
            g.polygon.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
        }
    }
}

BinaryMask rasterize(const ShapeGeometry& g, int res) {
    BinaryMask m(res, res);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool in = false;
            if (g.shape == "circle") {
                in = (px - g.cx) * (px - g.cx) + (py - g.cy) * (py - g.cy) <= g.scale * g.scale;
            } else if (g.shape == "square") {
                in = std::abs(px - g.cx) <= g.scale && std::abs(py - g.cy) <= g.scale;
            } else {
                in = inside_polygon(g.polygon, px, py);
            }
            m.at(y, x) = in ? 1 : 0;
        }
    return m;
}

struct Draft {
    Attributes attrs;
    std::array<float, 3> rgb{};
    BinaryMask full;
};

using Triple = std::tuple<std::string, std::string, std::string>; // color, size, shape

std::vector<Attributes> draw_attributes(const GeneratorConfig& cfg, Rng& rng, int count) {
    std::vector<Attributes> out;
    std::set<Triple> used;
    auto push = [&](Attributes a) {
        used.insert({a["color"], a["size"], a["shape"]});
        out.push_back(std::move(a));
    };
    if (cfg.fine_grained) {
        const auto& shape = cfg.shapes[rng.index(cfg.shapes.size())];
        const auto& size = cfg.sizes[rng.index(cfg.sizes.size())].name;
        const auto& texture = cfg.textures[rng.index(cfg.textures.size())];
        const size_t c0 = rng.index(cfg.palette.size());
        size_t c1 = rng.index(cfg.palette.size() - 1);
        if (c1 >= c0) ++c1;
        push({{"color", cfg.palette[c0].name}, {"shape", shape}, {"size", size}, {"texture", texture}});
        push({{"color", cfg.palette[c1].name}, {"shape", shape}, {"size", size}, {"texture", texture}});
    }
    while (static_cast<int>(out.size()) < count) {
        Attributes a{{"color", cfg.palette[rng.index(cfg.palette.size())].name},
                     {"shape", cfg.shapes[rng.index(cfg.shapes.size())]},
                     {"size", cfg.sizes[rng.index(cfg.sizes.size())].name},
                     {"texture", cfg.textures[rng.index(cfg.textures.size())]}};
        if (used.count({a["color"], a["size"], a["shape"]})) continue;
        push(std::move(a));
    }
    return out;
}

const NamedColor& color_by_name(const GeneratorConfig& cfg, const std::string& name) {
    for (const auto& c : cfg.palette)
        if (c.name == name) return c;
    throw InvariantError("unknown color '" + name + "'");
}

double size_fraction(const GeneratorConfig& cfg, const std::string& name) {
    for (const auto& s : cfg.sizes)
        if (s.name == name) return s.area_fraction;
    throw InvariantError("unknown size '" + name + "'");
}

// One placement attempt for the whole scene; empty on failure.
std::optional<SceneRecord> try_build(const GeneratorConfig& cfg, int scene_index, uint64_t scene_seed) {
    Rng rng(scene_seed);
    const int res = cfg.resolution;
    const int count = cfg.min_objects + static_cast<int>(rng.index(static_cast<size_t>(cfg.max_objects - cfg.min_objects + 1)));
    const auto attrs = draw_attributes(cfg, rng, std::max(count, cfg.fine_grained ? 2 : 1));

    std::vector<Draft> drafts;
    for (const auto& a : attrs) {
        ShapeGeometry g = make_geometry(a.at("shape"), size_fraction(cfg, a.at("size")) * res * res);
        const double margin = g.extent() + 1.0;
        if (2 * margin >= res) return std::nullopt;
        bool placed = false;
        for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
            place(g, rng.uniform(margin, res - margin), rng.uniform(margin, res - margin));
            BinaryMask full = rasterize(g, res);
            if (full.area() == 0) continue;
            placed = std::all_of(drafts.begin(), drafts.end(),
                                 [&](const Draft& d) { return mask_iou(d.full, full) <= cfg.max_pairwise_iou; });
            if (placed) {
                const auto& c = color_by_name(cfg, a.at("color")).rgb;
                drafts.push_back({a, {quantize_unit(c[0]), quantize_unit(c[1]), quantize_unit(c[2])}, std::move(full)});
            }
        }
        if (!placed) return std::nullopt;
    }

    SceneRecord scene;
    scene.scene_id = scene_index;
    scene.rng_seed = scene_seed;
    scene.image = ImageTensor(res, res);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const float g = quantize_unit(kBackgroundGray + rng.uniform(-kBackgroundNoise, kBackgroundNoise));
            for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = g;
        }

    // Later objects are painted over earlier ones; recorded masks are the visible parts.
    std::vector<BinaryMask> visible;
    for (const auto& d : drafts) visible.push_back(d.full);
    for (size_t i = 0; i < drafts.size(); ++i)
        for (size_t j = i + 1; j < drafts.size(); ++j)
            for (size_t p = 0; p < visible[i].data.size(); ++p)
                if (drafts[j].full.data[p]) visible[i].data[p] = 0;
    for (size_t i = 0; i < drafts.size(); ++i)
        if (2 * visible[i].area() < drafts[i].full.area()) return std::nullopt;

    for (size_t i = 0; i < drafts.size(); ++i) {
        const auto& d = drafts[i];
        const bool striped = d.attrs.at("texture") == "striped";
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                if (!d.full.at(y, x)) continue;
                const bool dark = striped && ((x + y) % kStripePeriod) >= kStripePeriod / 2;
                for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = dark ? quantize_unit(d.rgb[c] * 0.55) : d.rgb[c];
            }
        ObjectRecord o;
        o.object_id = static_cast<int>(i);
        o.mask = visible[i];
        o.bbox = tight_bbox(o.mask);
        o.semantic_label = d.attrs.at("shape");
        o.attributes = d.attrs;
        scene.objects.push_back(std::move(o));
    }
    scene.gt_b = conventional_gt(scene);
    scene.commands = make_commands(scene, cfg);
    return scene;
}

} // namespace

std::vector<NamedColor> GeneratorConfig::default_palette() {
    return {{"red", {0.90f, 0.10f, 0.10f}},    {"green", {0.10f, 0.75f, 0.15f}}, {"blue", {0.10f, 0.20f, 0.90f}},
            {"yellow", {0.95f, 0.90f, 0.10f}}, {"magenta", {0.90f, 0.10f, 0.85f}}, {"cyan", {0.10f, 0.85f, 0.90f}},
            {"orange", {0.95f, 0.55f, 0.05f}}, {"purple", {0.50f, 0.10f, 0.70f}}};
}

void GeneratorConfig::validate() const {
    if (num_scenes < 0) throw InvariantError("num_scenes must be >= 0");
    if (resolution < 16) throw InvariantError("resolution must be >= 16");
    if (min_objects < 1 || max_objects < min_objects) throw InvariantError("objects_per_scene range is empty");
    if (fine_grained && max_objects < 2) throw InvariantError("fine_grained scenes need at least 2 objects");
    if (palette.size() < 2 || shapes.empty() || sizes.empty() || textures.empty())
        throw InvariantError("attribute vocabularies must be non-empty");
    if (!(near_miss_fraction >= 0.0 && near_miss_fraction <= 1.0))
        throw InvariantError("near_miss_fraction must lie in [0,1]");
    if (!(max_pairwise_iou >= 0.0 && max_pairwise_iou <= 1.0)) throw InvariantError("max_pairwise_iou must lie in [0,1]");
}

SceneRecord generate_scene(const GeneratorConfig& config, int scene_index) {
    config.validate();
    if (scene_index < 0 || scene_index >= config.num_scenes) throw InvariantError("scene_index out of range");
    for (uint64_t sub = 0;; ++sub) {
        const uint64_t scene_seed =
            splitmix64(splitmix64(config.seed) ^ splitmix64((static_cast<uint64_t>(scene_index) << 20) + sub));
        if (auto scene = try_build(config, scene_index, scene_seed)) return std::move(*scene);
    }
}

std::vector<SceneRecord> generate_dataset(const GeneratorConfig& config) {
    std::vector<SceneRecord> out;
    out.reserve(static_cast<size_t>(config.num_scenes));
    for (int i = 0; i < config.num_scenes; ++i) out.push_back(generate_scene(config, i));
    return out;
}

double object_contrast(const ImageTensor& image, const BinaryMask& mask) {
    double sum = 0.0;
    size_t n = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(y, x)) continue;
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = image.at(c, y, x) - kBackgroundGray;
                d2 += d * d;
            }
            sum += std::sqrt(d2);
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

namespace {
constexpr double kTieTolerance = 1e-9;

// True when `a` beats `b` under the (area desc, id asc) tie rule.
bool wins_tie(const ObjectRecord& a, const ObjectRecord& b) {
    const size_t aa = a.mask.area(), ab = b.mask.area();
    if (aa != ab) return aa > ab;
    return a.object_id < b.object_id;
}
} // namespace

int conventional_gt_object(const SceneRecord& scene) {
    if (scene.objects.empty()) throw InvariantError("conventional_gt: scene has no objects");
    const ObjectRecord* best = nullptr;
    double best_contrast = 0.0;
    for (const auto& o : scene.objects) {
        const double c = object_contrast(scene.image, o.mask);
        if (!best || c > best_contrast + kTieTolerance ||
            (std::abs(c - best_contrast) <= kTieTolerance && wins_tie(o, *best))) {
            best = &o;
            best_contrast = c;
        }
    }
    return best->object_id;
}

BinaryMask conventional_gt(const SceneRecord& scene) { return scene.find_object(conventional_gt_object(scene))->mask; }

int attribute_distance(const Attributes& object, const Attributes& requested) {
    int d = 0;
    for (const auto& [key, value] : requested) {
        auto it = object.find(key);
        if (it == object.end() || it->second != value) ++d;
    }
    return d;
}

int resolve_need(const SceneRecord& scene, const Attributes& requested) {
    if (scene.objects.empty()) throw InvariantError("resolve_need: scene has no objects");
    const ObjectRecord* best = nullptr;
    int best_d = 0;
    for (const auto& o : scene.objects) {
        const int d = attribute_distance(o.attributes, requested);
        if (!best || d < best_d || (d == best_d && wins_tie(o, *best))) {
            best = &o;
            best_d = d;
        }
    }
    return best->object_id;
}

std::string coarse_command(const Attributes& a) { return "I want to find a " + a.at("shape") + "."; }

std::string fine_command(const Attributes& a) {
    return "I want to find the " + a.at("color") + " " + a.at("size") + " " + a.at("shape") + ".";
}

std::string near_miss_command(const std::string& color, const std::string& shape) {
    return "I want to find the " + color + " " + shape + ".";
}

std::optional<Attributes> parse_command(const std::string& text) {
    static const std::string kCoarse = "I want to find a ";
    static const std::string kFine = "I want to find the ";
    if (text.empty() || text.back() != '.') return std::nullopt;
    const std::string body = text.substr(0, text.size() - 1);
    std::vector<std::string> words;
    if (body.rfind(kCoarse, 0) == 0) {
        std::istringstream ss(body.substr(kCoarse.size()));
        for (std::string w; ss >> w;) words.push_back(w);
        if (words.size() != 1) return std::nullopt;
        return Attributes{{"shape", words[0]}};
    }
    if (body.rfind(kFine, 0) == 0) {
        std::istringstream ss(body.substr(kFine.size()));
        for (std::string w; ss >> w;) words.push_back(w);
        if (words.size() == 2) return Attributes{{"color", words[0]}, {"shape", words[1]}};
        if (words.size() == 3) return Attributes{{"color", words[0]}, {"size", words[1]}, {"shape", words[2]}};
    }
    return std::nullopt;
}

std::vector<NeedCommand> make_commands(const SceneRecord& scene, const GeneratorConfig& config) {
    std::vector<NeedCommand> out;
    auto emit = [&](const std::string& text) {
        const int target = resolve_need(scene, *parse_command(text));
        out.push_back({static_cast<int>(out.size()), text, target, Provenance::synthetic_oracle});
    };
    for (const auto& o : scene.objects) {
        emit(coarse_command(o.attributes));
        emit(fine_command(o.attributes));
    }
    Rng rng(splitmix64(scene.rng_seed ^ 0xC0FFEEULL));
    if (rng.uniform() < config.near_miss_fraction) {
        std::vector<std::pair<std::string, std::string>> absent;
        for (const auto& c : config.palette)
            for (const auto& s : config.shapes) {
                const bool present = std::any_of(scene.objects.begin(), scene.objects.end(), [&](const ObjectRecord& o) {
                    return o.attributes.at("color") == c.name && o.attributes.at("shape") == s;
                });
                if (!present) absent.emplace_back(c.name, s);
            }
        if (!absent.empty()) {
            const auto& [color, shape] = absent[rng.index(absent.size())];
            emit(near_miss_command(color, shape));
        }
    }
    return out;
}

} // namespace usersod::synth
