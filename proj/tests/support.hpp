#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "usersod/model.hpp"
#include "usersod/synthscenes.hpp"

namespace support {

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("usersod_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline usersod::synth::GeneratorConfig small_generator(int scenes, uint64_t seed, int resolution = 32) {
    usersod::synth::GeneratorConfig g;
    g.num_scenes = scenes;
    g.seed = seed;
    g.resolution = resolution;
    g.max_objects = 4;
    return g;
}

/// Under 10k parameters in every mode.
inline usersod::model::ModelConfig tiny_model(usersod::model::Mode mode, usersod::model::TsnVariant tsn) {
    usersod::model::ModelConfig c;
    c.mode = mode;
    c.tsn_variant = tsn;
    c.input_size = 32;
    c.levels = 3;
    c.channel_widths = {4, 4, 4};
    c.decoder_width = 4;
    c.attention_dim = 4;
    c.attention_heads = 1;
    c.embed_dim = 4;
    c.swin_window = 4;
    c.vocabulary = {"<unk>", "a", "blue", "find", "i", "red", "square", "the", "to", "want"};
    return c;
}

inline usersod::ImageTensor random_image(std::mt19937_64& rng, int size) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    usersod::ImageTensor img(size, size);
    for (auto& v : img.data) v = u(rng);
    return img;
}

inline usersod::BinaryMask random_blob(std::mt19937_64& rng, int size) {
    usersod::BinaryMask m(size, size);
    const int x0 = static_cast<int>(rng() % (size / 2)), y0 = static_cast<int>(rng() % (size / 2));
    const int w = 3 + static_cast<int>(rng() % (size / 3)), h = 3 + static_cast<int>(rng() % (size / 3));
    for (int y = y0; y < std::min(size, y0 + h); ++y)
        for (int x = x0; x < std::min(size, x0 + w); ++x) m.at(y, x) = 1;
    return m;
}

/// Adds noise to every parameter so zero-initialized projections carry gradient.
template <class T>
void jitter_params(usersod::model::UserSalModel<T>& m, uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& [name, v] : m.params().entries())
        for (auto& x : v->value.data) x = static_cast<T>(x + n(rng));
}

} // namespace support
