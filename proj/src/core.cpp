#include "usersod/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "usersod/image_io.hpp"

namespace usersod {
namespace fs = std::filesystem;
using nlohmann::json;

float quantize_unit(double v) {
    const double clamped = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

size_t BinaryMask::area() const { return static_cast<size_t>(std::count(data.begin(), data.end(), uint8_t{1})); }

bool BinaryMask::is_binary() const {
    return std::all_of(data.begin(), data.end(), [](uint8_t v) { return v == 0 || v == 1; });
}

SaliencyMap SaliencyMap::from_mask(const BinaryMask& m) {
    SaliencyMap s(m.height, m.width);
    for (size_t i = 0; i < m.data.size(); ++i) s.data[i] = m.data[i] ? 1.0 : 0.0;
    return s;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
    const int ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const int iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = static_cast<double>(ix) * iy;
    const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.height != b.height || a.width != b.width) throw InvariantError("mask_iou: shape mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        inter += (a.data[i] & b.data[i]);
        uni += (a.data[i] | b.data[i]);
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

BoundingBox tight_bbox(const BinaryMask& m) {
    BoundingBox b{m.width, m.height, 0, 0};
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) {
                b.x_min = std::min(b.x_min, x);
                b.y_min = std::min(b.y_min, y);
                b.x_max = std::max(b.x_max, x + 1);
                b.y_max = std::max(b.y_max, y + 1);
            }
    if (b.x_max == 0) return {};
    return b;
}

std::string to_string(Provenance p) {
    switch (p) {
    case Provenance::synthetic_oracle: return "synthetic_oracle";
    case Provenance::external_service: return "external_service";
    case Provenance::human_edited: return "human_edited";
    }
    return "synthetic_oracle";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "synthetic_oracle") return Provenance::synthetic_oracle;
    if (s == "external_service") return Provenance::external_service;
    if (s == "human_edited") return Provenance::human_edited;
    throw InvariantError("unknown provenance '" + s + "'");
}

const ObjectRecord* SceneRecord::find_object(int object_id) const {
    for (const auto& o : objects)
        if (o.object_id == object_id) return &o;
    return nullptr;
}

namespace {

void check_image(const ImageTensor& img, const std::string& where) {
    if (img.height <= 0 || img.width <= 0 || img.data.size() != img.plane() * 3)
        throw InvariantError(where + ": malformed image tensor");
    for (float v : img.data)
        if (!(v >= 0.0f && v <= 1.0f)) throw InvariantError(where + ": image value outside [0,1]");
}

void check_mask(const BinaryMask& m, const ImageTensor& img, const std::string& where) {
    if (m.height != img.height || m.width != img.width || m.data.size() != static_cast<size_t>(m.height) * m.width)
        throw InvariantError(where + ": mask shape does not match image");
    if (!m.is_binary()) throw InvariantError(where + ": mask is not binary");
}

// Foreground must lie inside the box dilated by one pixel.
void check_mask_in_box(const ObjectRecord& o, const std::string& where) {
    for (int y = 0; y < o.mask.height; ++y)
        for (int x = 0; x < o.mask.width; ++x)
            if (o.mask.at(y, x) && (x < o.bbox.x_min - 1 || x > o.bbox.x_max || y < o.bbox.y_min - 1 || y > o.bbox.y_max))
                throw InvariantError(where + ": mask foreground outside bbox");
}

} // namespace

void validate_scene(const SceneRecord& scene, SceneCheck level) {
    const std::string where = "scene " + std::to_string(scene.scene_id);
    check_image(scene.image, where);
    if (scene.objects.empty()) throw InvariantError(where + ": no objects");
    for (const auto& o : scene.objects) {
        const std::string ow = where + " object " + std::to_string(o.object_id);
        check_mask(o.mask, scene.image, ow);
        if (!o.bbox.valid_within(scene.image.width, scene.image.height)) throw InvariantError(ow + ": invalid bbox");
        if (o.semantic_label.empty()) throw InvariantError(ow + ": empty semantic label");
        check_mask_in_box(o, ow);
    }
    check_mask(scene.gt_b, scene.image, where + " gt_b");
    if (level == SceneCheck::strict) {
        const auto matches = std::count_if(scene.objects.begin(), scene.objects.end(),
                                           [&](const ObjectRecord& o) { return o.mask == scene.gt_b; });
        if (matches != 1) throw InvariantError(where + ": gt_b must equal exactly one object's mask");
    }
    for (const auto& c : scene.commands) {
        if (c.text.empty()) throw InvariantError(where + ": empty command text");
        if (!scene.find_object(c.target_object_id))
            throw InvariantError(where + ": command " + std::to_string(c.command_id) + " targets missing object");
    }
}

void validate_sample(const TrainingSample& sample) {
    const std::string where = "sample of scene " + std::to_string(sample.scene_id);
    if (!sample.image) throw InvariantError(where + ": missing image");
    check_image(*sample.image, where);
    check_mask(sample.gt, *sample.image, where + " gt");
    if (const auto* cmd = std::get_if<NeedCommand>(&sample.command); cmd && cmd->text.empty())
        throw InvariantError(where + ": empty command text");
}

std::vector<TrainingSample> to_training_samples(const SceneRecord& scene) {
    auto image = std::make_shared<const ImageTensor>(scene.image);
    std::vector<TrainingSample> out;
    out.reserve(scene.commands.size() + 1);
    for (const auto& c : scene.commands) {
        const ObjectRecord* target = scene.find_object(c.target_object_id);
        if (!target) throw InvariantError("command targets missing object");
        out.push_back({scene.scene_id, image, c, target->mask});
    }
    out.push_back({scene.scene_id, image, ZeroNeed{}, scene.gt_b});
    return out;
}

namespace {

std::string image_rel(int scene_id) { return "images/" + std::to_string(scene_id) + ".png"; }
std::string mask_rel(int scene_id, int object_id) {
    return "masks/" + std::to_string(scene_id) + "_" + std::to_string(object_id) + ".png";
}
std::string gtb_rel(int scene_id) { return "masks_gtb/" + std::to_string(scene_id) + ".png"; }

json box_json(const BoundingBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

BoundingBox box_from_json(const json& j) {
    return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

void write_lines(const fs::path& path, const std::vector<json>& lines) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& l : lines) out << l.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace

fs::path serialize_dataset(const std::vector<SceneRecord>& records, const fs::path& out_dir, SceneCheck level) {
    // Reject the whole write before touching the filesystem.
    for (const auto& r : records) validate_scene(r, level);

    std::error_code ec;
    for (const char* sub : {"", "images", "masks", "masks_gtb"}) {
        fs::create_directories(out_dir / sub, ec);
        if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
    }

    std::vector<json> manifest;
    std::vector<json> scenes;
    for (const auto& r : records) {
        write_png(out_dir / image_rel(r.scene_id), r.image);
        write_png(out_dir / gtb_rel(r.scene_id), r.gt_b);
        json objs = json::array();
        for (const auto& o : r.objects) {
            write_png(out_dir / mask_rel(r.scene_id, o.object_id), o.mask);
            objs.push_back({{"object_id", o.object_id},
                            {"bbox", box_json(o.bbox)},
                            {"label", o.semantic_label},
                            {"attributes", o.attributes},
                            {"mask", mask_rel(r.scene_id, o.object_id)}});
        }
        json cmds = json::array();
        for (const auto& c : r.commands) {
            cmds.push_back({{"command_id", c.command_id},
                            {"text", c.text},
                            {"target_object_id", c.target_object_id},
                            {"provenance", to_string(c.provenance)}});
            manifest.push_back({{"scene_id", r.scene_id},
                                {"image", image_rel(r.scene_id)},
                                {"command", c.text},
                                {"command_id", c.command_id},
                                {"target_object_id", c.target_object_id},
                                {"provenance", to_string(c.provenance)},
                                {"mask", mask_rel(r.scene_id, c.target_object_id)}});
        }
        manifest.push_back({{"scene_id", r.scene_id},
                            {"image", image_rel(r.scene_id)},
                            {"command", nullptr},
                            {"mask", gtb_rel(r.scene_id)}});
        scenes.push_back({{"scene_id", r.scene_id},
                          {"image", image_rel(r.scene_id)},
                          {"gt_b", gtb_rel(r.scene_id)},
                          {"rng_seed", r.rng_seed},
                          {"objects", objs},
                          {"commands", cmds}});
    }
    const fs::path manifest_path = out_dir / "manifest.jsonl";
    write_lines(manifest_path, manifest);
    write_lines(out_dir / "scenes.jsonl", scenes);
    return manifest_path;
}

std::vector<TrainingSample> load_dataset(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open manifest " + manifest.string());
    const fs::path root = manifest.parent_path();
    std::map<std::string, std::shared_ptr<const ImageTensor>> image_cache;
    std::vector<TrainingSample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = manifest.string() + ":" + std::to_string(lineno);
        try {
            const json j = json::parse(line);
            TrainingSample s;
            s.scene_id = j.at("scene_id").get<int>();
            const auto img_rel = j.at("image").get<std::string>();
            auto it = image_cache.find(img_rel);
            if (it == image_cache.end())
                it = image_cache.emplace(img_rel, std::make_shared<const ImageTensor>(read_png_image(root / img_rel))).first;
            s.image = it->second;
            if (j.at("command").is_null()) {
                s.command = ZeroNeed{};
            } else {
                NeedCommand c;
                c.text = j.at("command").get<std::string>();
                c.command_id = j.value("command_id", 0);
                c.target_object_id = j.value("target_object_id", 0);
                c.provenance = provenance_from_string(j.value("provenance", std::string("synthetic_oracle")));
                s.command = c;
            }
            s.gt = read_png_mask(root / j.at("mask").get<std::string>());
            validate_sample(s);
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw IoError(where + ": " + e.what());
        }
    }
    return out;
}

std::vector<SceneRecord> load_scenes(const fs::path& dataset_dir, SceneCheck level) {
    const fs::path path = dataset_dir / "scenes.jsonl";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<SceneRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            SceneRecord r;
            r.scene_id = j.at("scene_id").get<int>();
            r.rng_seed = j.at("rng_seed").get<uint64_t>();
            r.image = read_png_image(dataset_dir / j.at("image").get<std::string>());
            r.gt_b = read_png_mask(dataset_dir / j.at("gt_b").get<std::string>());
            for (const auto& jo : j.at("objects")) {
                ObjectRecord o;
                o.object_id = jo.at("object_id").get<int>();
                o.bbox = box_from_json(jo.at("bbox"));
                o.semantic_label = jo.at("label").get<std::string>();
                o.attributes = jo.at("attributes").get<Attributes>();
                o.mask = read_png_mask(dataset_dir / jo.at("mask").get<std::string>());
                r.objects.push_back(std::move(o));
            }
            for (const auto& jc : j.at("commands")) {
                r.commands.push_back({jc.at("command_id").get<int>(), jc.at("text").get<std::string>(),
                                      jc.at("target_object_id").get<int>(),
                                      provenance_from_string(jc.at("provenance").get<std::string>())});
            }
            validate_scene(r, level);
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

} // namespace usersod
