#include "doctest.h"

#include <fstream>
#include <limits>

#include "support.hpp"
#include "usersod/harness.hpp"
#include "usersod/image_io.hpp"

using namespace usersod;
using namespace usersod::harness;

namespace {

std::vector<TrainingSample> samples_of(const std::vector<SceneRecord>& scenes) {
    std::vector<TrainingSample> out;
    for (const auto& s : scenes)
        for (auto& t : to_training_samples(s)) out.push_back(std::move(t));
    return out;
}

TrainConfig quick(uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    c.epochs = 2;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.samples_per_epoch = 8;
    c.eval_limit = 4;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

} // namespace

TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    c.epochs = 100;
    CHECK(c.decay_at() == 60);
    CHECK(c.lr_at(59) == doctest::Approx(1e-4));
    CHECK(c.lr_at(60) == doctest::Approx(1e-5));
    c.epochs = 8;
    CHECK(c.decay_at() == 6);
    CHECK(c.lr_at(5) == doctest::Approx(1e-4));
    CHECK(c.lr_at(6) == doctest::Approx(1e-5));
    c.epochs = 1;
    CHECK(c.decay_at() == 1);
    CHECK(c.lr_at(0) == doctest::Approx(1e-4));
    c.batch_size = 0;
    CHECK_THROWS(c.validate());
}

TEST_CASE("config parsing rejects unknown keys") {
    CHECK(train_config_from_json({{"epochs", 3}}).epochs == 3);
    CHECK_THROWS(train_config_from_json({{"epoch", 3}}));
    CHECK(generator_config_from_json({{"fine_grained", true}}).fine_grained);
    CHECK_THROWS(generator_config_from_json({{"colour", "red"}}));
    auto m = model_config_overlay({{"tsn_variant", "conv"}}, model::ModelConfig{});
    CHECK(m.tsn_variant == model::TsnVariant::conv);
    CHECK_THROWS(model_config_overlay({{"tsn", "conv"}}, model::ModelConfig{}));

    auto dir = support::temp_dir("cfg");
    std::ofstream(dir / "a.json") << "{\n  // comment\n  \"train\": {\"epochs\": 2}\n}\n";
    auto j = load_config_file(dir / "a.json", {"train"});
    CHECK(j["train"]["epochs"] == 2);
    CHECK_THROWS(load_config_file(dir / "a.json", {"model"}));
    CHECK_THROWS(load_config_file(dir / "missing.json", {"train"}));

    auto spec = ablation_spec_from_json({{"seeds", {4, 5}}, {"rows", {{{"name", "x"}, {"mode", "usersal"}}}}});
    CHECK(spec.seeds == std::vector<uint64_t>{4, 5});
    REQUIRE(spec.rows.size() == 1);
    CHECK(spec.rows[0].mode == model::Mode::usersal);
    CHECK_THROWS(ablation_spec_from_json({{"rowz", 1}}));

    auto row = ablation_spec_from_json(
        {{"rows", {{{"name", "r"}, {"mode", "usersal_plus"}, {"epochs", 2}, {"reverse_kl", true}}}}});
    CHECK(row.rows[0].epochs == 2);
    CHECK(row.rows[0].reverse_kl);
    CHECK_THROWS(ablation_spec_from_json({{"rows", {{{"name", "r"}, {"mode", "base"}, {"epochs", -1}}}}}));
    CHECK(model_config_overlay({{"norm", "position"}}, model::ModelConfig{}).norm == "position");
    auto bad = model_config_overlay({{"norm", "batch"}, {"mode", "base"}}, model::ModelConfig{});
    CHECK_THROWS(bad.validate());

    // The shipped ablation config parses.
    const auto shipped = std::filesystem::path(__FILE__).parent_path().parent_path() / "configs" / "ablation.json";
    auto full = ablation_spec_from_json(load_config_file(shipped, {"ablation"}).at("ablation"));
    CHECK(full.seeds.size() == 3);
    CHECK(full.rows.size() == 8);
}

TEST_CASE("splits") {
    auto scenes = synth::generate_dataset(support::small_generator(4, 1));
    auto all = samples_of(scenes);
    auto conv = conventional_split(all);
    auto need = need_split(all);
    CHECK(conv.size() == scenes.size());
    size_t fine = 0;
    for (const auto& s : scenes) fine += s.objects.size();
    CHECK(need.size() == fine);
    for (const auto& s : need) CHECK(std::get<NeedCommand>(s.command).text.find("the ") != std::string::npos);
    auto vocab = corpus_vocabulary(all);
    CHECK(vocab.front() == "<unk>");
    CHECK(std::is_sorted(vocab.begin() + 1, vocab.end()));
}

TEST_CASE("training is bitwise reproducible and keeps the backbone frozen") {
    auto scenes = synth::generate_dataset(support::small_generator(6, 2));
    auto all = samples_of(scenes);
    auto cfg = support::tiny_model(model::Mode::usersal_plus, model::TsnVariant::swin_attention);
    cfg.vocabulary.clear();
    auto dir = support::temp_dir("train_det");
    auto a = harness::train(quick(7), cfg, all, all, std::nullopt, dir / "a");
    auto b = harness::train(quick(7), cfg, all, all, std::nullopt, dir / "b");
    CHECK(slurp(a.checkpoint / "params.bin") == slurp(b.checkpoint / "params.bin"));
    CHECK(slurp(dir / "a" / "train_log.jsonl") == slurp(dir / "b" / "train_log.jsonl"));
    CHECK(a.backbone_hash_before == a.backbone_hash_after);
    CHECK(a.epoch_loss.size() == 2);

    auto c = harness::train(quick(8), cfg, all, all, std::nullopt, dir / "c");
    CHECK(slurp(a.checkpoint / "params.bin") != slurp(c.checkpoint / "params.bin"));

    // Every step line records the loss breakdown.
    std::ifstream log(dir / "a" / "train_log.jsonl");
    int steps = 0, epochs = 0;
    for (std::string line; std::getline(log, line);) {
        auto j = nlohmann::json::parse(line);
        if (j["event"] == "step") {
            ++steps;
            CHECK(j["al_per_level"].size() == 3);
            double sum = j["mse"];
            for (double v : j["al_per_level"]) sum += v;
            CHECK(j["total"].get<double>() == doctest::Approx(sum).epsilon(1e-6));
        }
        if (j["event"] == "epoch") ++epochs;
    }
    CHECK(steps == 4);
    CHECK(epochs == 2);
}

TEST_CASE("pretrained backbone is reused and stays frozen") {
    auto scenes = synth::generate_dataset(support::small_generator(6, 3));
    auto all = samples_of(scenes);
    auto dir = support::temp_dir("pretrain");
    auto base = support::tiny_model(model::Mode::base, model::TsnVariant::linear);
    auto esm = pretrain_esm(quick(1), base, all, all, dir / "esm");
    CHECK(esm.backbone_hash_before != esm.backbone_hash_after);

    auto cfg = support::tiny_model(model::Mode::usersal, model::TsnVariant::linear);
    auto r = harness::train(quick(1), cfg, all, all, esm.checkpoint, dir / "run");
    CHECK(r.backbone_hash_before == esm.backbone_hash_after);
    CHECK(r.backbone_hash_after == esm.backbone_hash_after);
}

TEST_CASE("a non-finite loss stops training with a pointer to the last checkpoint") {
    auto scenes = synth::generate_dataset(support::small_generator(3, 4));
    auto all = samples_of(scenes);
    auto cfg = support::tiny_model(model::Mode::base, model::TsnVariant::linear);
    auto dir = support::temp_dir("diverge");
    // A corrupt pixel makes the loss NaN on the first step.
    for (auto& s : all) {
        auto img = std::make_shared<ImageTensor>(*s.image);
        img->data[0] = std::numeric_limits<float>::quiet_NaN();
        s.image = img;
    }
    auto c = quick(1);
    CHECK_THROWS_AS(harness::train(c, cfg, all, all, std::nullopt, dir), TrainingDiverged);
    CHECK(std::filesystem::exists(dir / "checkpoint" / "params.bin"));
}

TEST_CASE("evaluation skips undefined F") {
    auto scenes = synth::generate_dataset(support::small_generator(2, 5));
    auto all = samples_of(scenes);
    all[0].gt = BinaryMask(32, 32);
    model::UserSalModel<float> m(support::tiny_model(model::Mode::base, model::TsnVariant::linear));
    std::vector<metrics::SampleMetrics> per;
    auto r = evaluate_dataset(m, all, &per);
    CHECK(r.count == static_cast<int>(all.size()));
    CHECK(r.skipped_undefined_f == 1);
    CHECK(per.size() == all.size());
}

TEST_CASE("median") {
    CHECK(median({3, 1, 2}) == 2);
    CHECK(median({4, 1, 2, 3}) == 2.5);
    CHECK(std::isnan(median({})));
}
