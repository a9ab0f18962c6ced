#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "usersod/core.hpp"

namespace usersod::synth {

struct NamedColor {
    std::string name;
    std::array<float, 3> rgb;
};

struct SizeClass {
    std::string name;
    double area_fraction;
};

struct GeneratorConfig {
    uint64_t seed = 0;
    int num_scenes = 10;
    int resolution = kDefaultResolution;
    int min_objects = 2;
    int max_objects = 6;
    std::vector<NamedColor> palette = default_palette();
    std::vector<std::string> shapes = {"circle", "square", "triangle", "star"};
    std::vector<SizeClass> sizes = {{"small", 0.02}, {"medium", 0.05}, {"large", 0.10}};
    std::vector<std::string> textures = {"solid", "striped"};
    double max_pairwise_iou = 0.3;
    double near_miss_fraction = 0.25;
    /// Every scene holds >=2 objects sharing shape, size and texture but differing in color.
    bool fine_grained = false;

    static std::vector<NamedColor> default_palette();
    void validate() const;
};

inline constexpr float kBackgroundGray = 0.5f;
inline constexpr float kBackgroundNoise = 0.05f;
inline constexpr int kStripePeriod = 4;
inline constexpr int kMaxPlacementAttempts = 100;

SceneRecord generate_scene(const GeneratorConfig& config, int scene_index);
std::vector<SceneRecord> generate_dataset(const GeneratorConfig& config);

/// Mean Euclidean RGB distance of the object's pixels from the background gray.
double object_contrast(const ImageTensor& image, const BinaryMask& mask);

/// Mask of the object with the strongest color contrast (ties: larger area, then smaller id).
BinaryMask conventional_gt(const SceneRecord& scene);
int conventional_gt_object(const SceneRecord& scene);

/// Number of requested attributes the object does not match.
int attribute_distance(const Attributes& object, const Attributes& requested);

/// Object closest to the requested attributes (ties: larger area, then smaller id).
int resolve_need(const SceneRecord& scene, const Attributes& requested);

std::string coarse_command(const Attributes& a);
std::string fine_command(const Attributes& a);
std::string near_miss_command(const std::string& color, const std::string& shape);

/// Inverts the command templates back to the attributes they request.
std::optional<Attributes> parse_command(const std::string& text);

/// Coarse and fine template commands for every object, plus (with probability
/// near_miss_fraction, drawn from the scene's seed) one command naming an absent color/shape pair.
std::vector<NeedCommand> make_commands(const SceneRecord& scene, const GeneratorConfig& config);

} // namespace usersod::synth
