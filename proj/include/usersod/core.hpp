#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace usersod {

inline constexpr int kDefaultResolution = 96;

class InvariantError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// RGB image, channel-major (CHW), values in [0,1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<float> data; // 3 * height * width

    ImageTensor() = default;
    ImageTensor(int h, int w, float fill = 0.0f) : height(h), width(w), data(3 * static_cast<size_t>(h) * w, fill) {}

    size_t plane() const { return static_cast<size_t>(height) * width; }
    float& at(int c, int y, int x) { return data[c * plane() + static_cast<size_t>(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane() + static_cast<size_t>(y) * width + x]; }

    bool operator==(const ImageTensor&) const = default;
};

/// Quantizes a [0,1] value to the nearest 8-bit level so PNG storage is lossless.
float quantize_unit(double v);

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data; // values {0,1}

    BinaryMask() = default;
    BinaryMask(int h, int w, uint8_t fill = 0) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    size_t area() const;
    bool is_binary() const;

    bool operator==(const BinaryMask&) const = default;
};

struct SaliencyMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    SaliencyMap() = default;
    SaliencyMap(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}
    static SaliencyMap from_mask(const BinaryMask& m);

    double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
};

/// Half-open pixel box: [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    int width() const { return x_max - x_min; }
    int height() const { return y_max - y_min; }
    long area() const { return static_cast<long>(width()) * height(); }
    bool valid_within(int img_w, int img_h) const {
        return 0 <= x_min && x_min < x_max && x_max <= img_w && 0 <= y_min && y_min < y_max && y_max <= img_h;
    }
    bool operator==(const BoundingBox&) const = default;
};

double box_iou(const BoundingBox& a, const BoundingBox& b);
double mask_iou(const BinaryMask& a, const BinaryMask& b);
BoundingBox tight_bbox(const BinaryMask& m);

/// color, shape, size, texture
using Attributes = std::map<std::string, std::string>;

struct ObjectRecord {
    int object_id = 0;
    BoundingBox bbox;
    BinaryMask mask;
    std::string semantic_label;
    Attributes attributes;

    bool operator==(const ObjectRecord&) const = default;
};

enum class Provenance { synthetic_oracle, external_service, human_edited };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct NeedCommand {
    int command_id = 0;
    std::string text;
    int target_object_id = 0;
    Provenance provenance = Provenance::synthetic_oracle;

    bool operator==(const NeedCommand&) const = default;
};

/// Explicit "no need" state: the model's text input is zero-padded.
struct ZeroNeed {
    bool operator==(const ZeroNeed&) const = default;
};

using Need = std::variant<ZeroNeed, NeedCommand>;

inline bool is_zero_need(const Need& n) { return std::holds_alternative<ZeroNeed>(n); }

struct SceneRecord {
    int scene_id = 0;
    ImageTensor image;
    std::vector<ObjectRecord> objects;
    std::vector<NeedCommand> commands;
    BinaryMask gt_b;
    uint64_t rng_seed = 0;

    const ObjectRecord* find_object(int object_id) const;
    bool operator==(const SceneRecord&) const = default;
};

struct TrainingSample {
    int scene_id = 0;
    std::shared_ptr<const ImageTensor> image;
    Need command;
    BinaryMask gt;

    bool operator==(const TrainingSample& o) const {
        return scene_id == o.scene_id && *image == *o.image && command == o.command && gt == o.gt;
    }
};

enum class SceneCheck {
    strict,  // gt_b must equal exactly one object's mask
    relaxed, // gt_b only needs to be binary and shape-matched
};

/// Throws InvariantError describing the first violation.
void validate_scene(const SceneRecord& scene, SceneCheck level = SceneCheck::strict);
void validate_sample(const TrainingSample& sample);

/// Need samples (one per command) followed by the scene's ZeroNeed sample.
std::vector<TrainingSample> to_training_samples(const SceneRecord& scene);

// Dataset layout:
//   manifest.jsonl            one line per TrainingSample
//   scenes.jsonl              per-scene metadata (objects, commands, seeds)
//   images/{scene_id}.png
//   masks/{scene_id}_{object_id}.png
//   masks_gtb/{scene_id}.png
std::filesystem::path serialize_dataset(const std::vector<SceneRecord>& records, const std::filesystem::path& out_dir,
                                        SceneCheck level = SceneCheck::strict);
std::vector<TrainingSample> load_dataset(const std::filesystem::path& manifest);
std::vector<SceneRecord> load_scenes(const std::filesystem::path& dataset_dir, SceneCheck level = SceneCheck::strict);

} // namespace usersod
