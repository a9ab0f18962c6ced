#include "doctest.h"

#include <set>

#include "support.hpp"
#include "usersod/core.hpp"
#include "usersod/synthscenes.hpp"

using namespace usersod;

namespace {

// Exhaustive nearest-object search written against the attribute map directly.
int brute_resolve(const SceneRecord& s, const Attributes& req) {
    int best = -1, best_d = 1 << 30;
    size_t best_area = 0;
    for (const auto& o : s.objects) {
        int d = 0;
        for (const auto& [k, v] : req) d += (o.attributes.count(k) && o.attributes.at(k) == v) ? 0 : 1;
        const size_t area = o.mask.area();
        if (d < best_d || (d == best_d && (area > best_area || (area == best_area && o.object_id < best)))) {
            best = o.object_id;
            best_d = d;
            best_area = area;
        }
    }
    return best;
}

double brute_contrast(const SceneRecord& s, const ObjectRecord& o) {
    double sum = 0;
    int n = 0;
    for (int y = 0; y < s.image.height; ++y)
        for (int x = 0; x < s.image.width; ++x)
            if (o.mask.at(y, x)) {
                double d2 = 0;
                for (int c = 0; c < 3; ++c) d2 += std::pow(s.image.at(c, y, x) - 0.5, 2);
                sum += std::sqrt(d2);
                ++n;
            }
    return sum / n;
}

} // namespace

TEST_CASE("generation is deterministic per seed and index") {
    auto cfg = support::small_generator(6, 42, 64);
    auto a = synth::generate_dataset(cfg);
    auto b = synth::generate_dataset(cfg);
    CHECK(a == b);
    CHECK(synth::generate_scene(cfg, 3) == a[3]);
    cfg.seed = 43;
    CHECK_FALSE(synth::generate_dataset(cfg) == a);
}

TEST_CASE("scenes satisfy the strict invariants") {
    for (bool fine : {false, true}) {
        auto cfg = support::small_generator(40, 7, 96);
        cfg.max_objects = 6;
        cfg.fine_grained = fine;
        for (const auto& s : synth::generate_dataset(cfg)) {
            CHECK_NOTHROW(validate_scene(s));
            CHECK(s.objects.size() >= 2);
            for (const auto& o : s.objects) {
                CHECK(o.mask.area() > 0);
                CHECK(o.bbox == tight_bbox(o.mask));
                CHECK(o.semantic_label == o.attributes.at("shape"));
            }
            for (size_t i = 0; i < s.objects.size(); ++i)
                for (size_t j = i + 1; j < s.objects.size(); ++j)
                    CHECK(mask_iou(s.objects[i].mask, s.objects[j].mask) == 0.0); // visible parts never overlap
            for (float v : s.image.data) CHECK(v == quantize_unit(v));
        }
    }
}

TEST_CASE("conventional gt is the highest-contrast object") {
    auto cfg = support::small_generator(40, 9, 64);
    for (const auto& s : synth::generate_dataset(cfg)) {
        const ObjectRecord* best = nullptr;
        double best_c = -1;
        for (const auto& o : s.objects) {
            const double c = brute_contrast(s, o);
            if (c > best_c + 1e-9 || (std::fabs(c - best_c) <= 1e-9 && o.mask.area() > best->mask.area())) {
                best = &o;
                best_c = c;
            }
        }
        CHECK(s.gt_b == best->mask);
    }
}

TEST_CASE("every command resolves to its recorded target") {
    auto cfg = support::small_generator(60, 11, 64);
    cfg.near_miss_fraction = 0.5;
    int near_miss = 0;
    for (const auto& s : synth::generate_dataset(cfg)) {
        CHECK(s.commands.size() >= 2 * s.objects.size());
        for (const auto& c : s.commands) {
            auto req = synth::parse_command(c.text);
            REQUIRE(req);
            CHECK(c.target_object_id == brute_resolve(s, *req));
            CHECK(c.target_object_id == synth::resolve_need(s, *req));
            if (req->size() == 2) ++near_miss;
        }
        for (size_t i = 0; i < s.commands.size(); ++i) CHECK(s.commands[i].command_id == static_cast<int>(i));
    }
    CHECK(near_miss > 10);
}

TEST_CASE("fine commands single out one object") {
    auto cfg = support::small_generator(30, 13, 96);
    cfg.fine_grained = true;
    for (const auto& s : synth::generate_dataset(cfg)) {
        // The first two objects are colour-only twins.
        const auto& a = s.objects[0].attributes;
        const auto& b = s.objects[1].attributes;
        CHECK(a.at("shape") == b.at("shape"));
        CHECK(a.at("size") == b.at("size"));
        CHECK(a.at("color") != b.at("color"));
        std::set<std::string> fine;
        for (const auto& o : s.objects) {
            const auto text = synth::fine_command(o.attributes);
            CHECK(fine.insert(text).second);
            CHECK(synth::resolve_need(s, *synth::parse_command(text)) == o.object_id);
        }
    }
}

TEST_CASE("command templates invert") {
    Attributes a{{"color", "red"}, {"shape", "star"}, {"size", "large"}, {"texture", "solid"}};
    CHECK(*synth::parse_command(synth::coarse_command(a)) == Attributes{{"shape", "star"}});
    CHECK(*synth::parse_command(synth::fine_command(a)) ==
          Attributes{{"color", "red"}, {"size", "large"}, {"shape", "star"}});
    CHECK(*synth::parse_command(synth::near_miss_command("blue", "circle")) ==
          Attributes{{"color", "blue"}, {"shape", "circle"}});
    CHECK_FALSE(synth::parse_command("find a star"));
    CHECK_FALSE(synth::parse_command(""));
}

TEST_CASE("dataset serialization round trips") {
    auto dir = support::temp_dir("serialize");
    auto scenes = synth::generate_dataset(support::small_generator(5, 21, 48));
    auto manifest = serialize_dataset(scenes, dir);
    CHECK(std::filesystem::exists(dir / "scenes.jsonl"));
    CHECK(load_scenes(dir) == scenes);
    auto samples = load_dataset(manifest);
    size_t expected = 0;
    for (const auto& s : scenes) expected += s.commands.size() + 1;
    CHECK(samples.size() == expected);
    std::vector<TrainingSample> direct;
    for (const auto& s : scenes)
        for (auto& t : to_training_samples(s)) direct.push_back(std::move(t));
    REQUIRE(direct.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) CHECK(samples[i] == direct[i]);
}

TEST_CASE("invalid generator configs are rejected") {
    auto cfg = support::small_generator(1, 0);
    cfg.min_objects = 3;
    cfg.max_objects = 2;
    CHECK_THROWS_AS(cfg.validate(), InvariantError);
    cfg = support::small_generator(1, 0);
    cfg.near_miss_fraction = 2;
    CHECK_THROWS_AS(cfg.validate(), InvariantError);
}
