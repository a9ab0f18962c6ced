#include "doctest.h"

#include <random>

#include "support.hpp"
#include "usersod/losses.hpp"
#include "usersod/model.hpp"
#include "usersod/nn/params.hpp"

using namespace usersod;
using model::Mode;
using model::TsnVariant;

namespace {

const TsnVariant kVariants[] = {TsnVariant::linear, TsnVariant::conv, TsnVariant::vit_attention,
                                TsnVariant::swin_attention};

NeedCommand command(const std::string& text) {
    NeedCommand c;
    c.text = text;
    return c;
}

} // namespace

TEST_CASE("zero need equals the conventional forward bit for bit") {
    std::mt19937_64 rng(1);
    for (auto mode : {Mode::usersal, Mode::usersal_plus}) {
        model::UserSalModel<float> m(support::tiny_model(mode, TsnVariant::swin_attention));
        support::jitter_params(m, 2, 0.1);
        for (int i = 0; i < 5; ++i) {
            auto img = support::random_image(rng, 32);
            auto a = m.forward(img, Need{ZeroNeed{}});
            auto b = m.forward_conventional(img);
            CHECK(a.saliency->value.data == b.saliency->value.data);
            // The zero-padded prompt is literally zero at every level.
            for (const auto& p : m.zero_prompt().levels)
                for (float v : p->value.data) CHECK(v == 0.0f);
        }
    }
}

TEST_CASE("usersal_plus equals base at initialization") {
    std::mt19937_64 rng(3);
    for (auto tsn : kVariants) {
        auto plus_cfg = support::tiny_model(Mode::usersal_plus, tsn);
        auto base_cfg = support::tiny_model(Mode::base, tsn);
        model::UserSalModel<double> plus(plus_cfg), base(base_cfg);
        for (int i = 0; i < 3; ++i) {
            auto img = support::random_image(rng, 32);
            auto a = plus.forward(img, Need{command("find the red square")}).saliency->value.data;
            auto b = base.forward_conventional(img).saliency->value.data;
            REQUIRE(a.size() == b.size());
            double worst = 0;
            for (size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::fabs(a[k] - b[k]));
            CHECK(worst <= 1e-6);
        }
    }
}

TEST_CASE("similarity maps stay within [-1, 1]") {
    std::mt19937_64 rng(5);
    for (auto tsn : kVariants) {
        model::UserSalModel<double> m(support::tiny_model(Mode::usersal_plus, tsn));
        support::jitter_params(m, 7, 0.3);
        for (int i = 0; i < 10; ++i) {
            auto r = m.forward(support::random_image(rng, 32), Need{command("want blue")});
            for (const auto& s : r.similarity) {
                REQUIRE(s);
                for (double v : s->value.data) {
                    CHECK(v >= -1.0);
                    CHECK(v <= 1.0);
                }
            }
        }
    }
}

TEST_CASE("identity TSN with identical inputs gives similarity one") {
    model::UserSalModel<double> m(support::tiny_model(Mode::usersal_plus, TsnVariant::linear));
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.0);
    model::Pyramid<double> f;
    for (int lvl = 0, s = 16; lvl < 3; ++lvl, s /= 2) {
        nn::Tensor<double> t({4, s, s});
        for (auto& v : t.data) v = n(rng);
        f.push_back(nn::constant(t));
    }
    auto out = m.asa(f, f);
    for (const auto& s : out.similarity)
        for (double v : s->value.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("frozen backbone receives no gradient and SME* never trains") {
    model::UserSalModel<float> m(support::tiny_model(Mode::usersal_plus, TsnVariant::swin_attention));
    const auto before = m.params().hash(model::UserSalModel<float>::backbone_prefix());
    for (const auto& [name, v] : m.params().trainable()) CHECK(name.rfind("esm.", 0) != 0);

    std::mt19937_64 rng(11);
    auto img = support::random_image(rng, 32);
    auto gt = support::random_blob(rng, 32);
    nn::Adam<float> adam(m.params().trainable(), 1e-2);
    for (int i = 0; i < 3; ++i) {
        m.params().zero_grad();
        auto g = losses::total_loss(m, img, Need{command("find the blue square")}, gt);
        nn::backward(g.total);
        adam.step();
    }
    CHECK(m.params().hash(model::UserSalModel<float>::backbone_prefix()) == before);
    for (const auto& [name, v] : m.params().entries())
        if (name.rfind("esm.", 0) == 0) CHECK(v->grad.data.empty());
}

TEST_CASE("checkpoint round trip preserves weights and predictions") {
    auto dir = support::temp_dir("ckpt");
    model::UserSalModel<float> m(support::tiny_model(Mode::usersal_plus, TsnVariant::conv));
    support::jitter_params(m, 13, 0.1);
    model::save_checkpoint(m, dir / "c", {{"note", "x"}});
    auto r = model::load_checkpoint(dir / "c");
    CHECK(r.params().hash() == m.params().hash());
    CHECK(r.config().architecture_equals(m.config()));
    std::mt19937_64 rng(1);
    auto img = support::random_image(rng, 32);
    CHECK(r.predict(img, Need{command("red")}).data == m.predict(img, Need{command("red")}).data);
}

TEST_CASE("pretrained backbone loads into a fresh model") {
    auto dir = support::temp_dir("esm");
    auto base_cfg = support::tiny_model(Mode::base, TsnVariant::linear);
    base_cfg.freeze_esm = false;
    base_cfg.init_seed = 99;
    model::UserSalModel<float> esm(base_cfg);
    model::save_checkpoint(esm, dir / "esm");
    model::UserSalModel<float> m(support::tiny_model(Mode::usersal_plus, TsnVariant::linear));
    model::load_pretrained_esm(m, dir / "esm");
    CHECK(m.params().hash("esm.") == esm.params().hash("esm."));
    CHECK(m.params().hash("decoder.") == esm.params().hash("decoder."));

    auto wide = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    wide.channel_widths = {8, 8, 8};
    model::UserSalModel<float> other(wide);
    CHECK_THROWS(model::load_pretrained_esm(other, dir / "esm"));
}

TEST_CASE("config validation") {
    auto c = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    c.input_size = 30;
    CHECK_THROWS(c.validate());
    c = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    c.vocabulary = {"a", "b"};
    CHECK_THROWS(c.validate());
    c = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    c.channel_widths = {4, 4};
    CHECK_THROWS(c.validate());
    c = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    c.channel_widths = {4, 8, 8};
    c.tsn_shared = true;
    CHECK_THROWS(c.validate());
    CHECK_THROWS(model::model_config_from_json({{"mode", "base"}, {"bogus", 1}}));
    auto j = model::to_json(support::tiny_model(Mode::usersal, TsnVariant::vit_attention));
    CHECK(model::model_config_from_json(j).architecture_equals(support::tiny_model(Mode::usersal, TsnVariant::vit_attention)));
}

TEST_CASE("shared TSN uses one parameter set") {
    auto c = support::tiny_model(Mode::usersal_plus, TsnVariant::linear);
    c.tsn_shared = true;
    model::UserSalModel<float> m(c);
    CHECK(m.params().contains("asa.tsn.w"));
    CHECK_FALSE(m.params().contains("asa.0.tsn.w"));
}

TEST_CASE("tokenizer and vocabulary") {
    CHECK(model::tokenize("I want the RED, small-square!") ==
          std::vector<std::string>{"i", "want", "the", "red", "small", "square"});
    auto v = model::build_vocabulary({"b a", "a c"});
    CHECK(v == std::vector<std::string>{"<unk>", "a", "b", "c"});
    model::UserSalModel<float> m(support::tiny_model(Mode::usersal, TsnVariant::linear));
    CHECK(m.token_ids("red zebra") == std::vector<int>{5, 0});
    CHECK(m.token_ids("") == std::vector<int>{0});
}

TEST_CASE("input size mismatch is rejected") {
    model::UserSalModel<float> m(support::tiny_model(Mode::base, TsnVariant::linear));
    CHECK_THROWS(m.forward_conventional(ImageTensor(16, 16)));
}
