// Acceptance suite: one PASS/FAIL line per primary criterion.
// Usage: acceptance WORKDIR [--only N[,N...]]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "json.hpp"

#include "oracles.hpp"
#include "support.hpp"
#include "usersod/digger.hpp"
#include "usersod/harness.hpp"
#include "usersod/losses.hpp"
#include "usersod/metrics.hpp"
#include "usersod/synthscenes.hpp"

namespace fs = std::filesystem;
using namespace usersod;
using model::Mode;
using model::TsnVariant;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

fs::path g_work;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

NeedCommand command(const std::string& text) {
    NeedCommand c;
    c.text = text;
    return c;
}

const TsnVariant kVariants[] = {TsnVariant::linear, TsnVariant::conv, TsnVariant::vit_attention,
                                TsnVariant::swin_attention};

Outcome metric_oracles() {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        SaliencyMap p(8, 8);
        BinaryMask g(8, 8);
        const double rate = 0.1 + 0.6 * u(rng);
        for (size_t k = 0; k < 64; ++k) {
            p.data[k] = u(rng);
            g.data[k] = u(rng) < rate ? 1 : 0;
        }
        if (g.area() == 0) g.data[0] = 1;
        const auto P = oracle::grid(p), G = oracle::grid(g);
        worst = std::max({worst, std::fabs(metrics::mae(p, g) - oracle::mae(P, G)),
                          std::fabs(metrics::f_measure(p, g) - oracle::f_measure(P, G)),
                          std::fabs(metrics::s_measure(p, g) - oracle::s_measure(P, G)),
                          std::fabs(metrics::e_measure(p, g) - oracle::e_measure(P, G))});
    }
    double perfect = 0;
    for (int i = 0; i < 20; ++i) {
        BinaryMask g(8, 8);
        for (auto& v : g.data) v = u(rng) < 0.4 ? 1 : 0;
        if (g.area() == 0) g.data[5] = 1;
        const auto p = SaliencyMap::from_mask(g);
        perfect = std::max({perfect, std::fabs(metrics::mae(p, g)), std::fabs(metrics::f_measure(p, g) - 1),
                            std::fabs(metrics::s_measure(p, g) - 1), std::fabs(metrics::e_measure(p, g) - 1)});
    }
    return {worst <= 1e-6 && perfect <= 1e-6,
            "max |metric - reference| " + fmt(worst) + ", perfect-prediction deviation " + fmt(perfect)};
}

Outcome loss_correctness() {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 2.0);
    double identical = 0, most_negative = 0;
    for (int i = 0; i < 1000; ++i) {
        const int c = 1 + static_cast<int>(rng() % 8), h = 1 + static_cast<int>(rng() % 8), w = 1 + static_cast<int>(rng() % 8);
        nn::Tensor<double> t({c, h, w}), f({c, h, w});
        for (auto& v : t.data) v = n(rng);
        for (auto& v : f.data) v = n(rng);
        identical = std::max(identical, std::fabs(losses::appearance_loss_level(t, t)));
        most_negative = std::min(most_negative, losses::appearance_loss_level(t, f));
    }

    auto cfg = support::tiny_model(Mode::usersal_plus, TsnVariant::swin_attention);
    model::UserSalModel<double> m(cfg);
    support::jitter_params(m, 3, 0.05);
    auto img = support::random_image(rng, 32);
    auto gt = support::random_blob(rng, 32);
    const Need need{command("i want to find the blue square")};

    double decomposition = 0;
    {
        auto g = losses::total_loss(m, img, need, gt);
        double sum = g.report.mse;
        for (double a : g.report.al_per_level) sum += a;
        decomposition = std::fabs(g.report.total - sum) / std::fabs(sum);
    }

    m.params().zero_grad();
    auto g = losses::total_loss(m, img, need, gt);
    nn::backward(g.total);
    const double h = 1e-5;
    double worst = 0;
    size_t checked = 0;
    for (auto& [name, v] : m.params().trainable())
        for (size_t i = 0; i < v->value.numel(); ++i) {
            const double old = v->value.data[i];
            v->value.data[i] = old + h;
            const double up = losses::total_loss(m, img, need, gt).report.total;
            v->value.data[i] = old - h;
            const double down = losses::total_loss(m, img, need, gt).report.total;
            v->value.data[i] = old;
            const double fd = (up - down) / (2 * h);
            const double an = v->grad.shape == v->value.shape ? v->grad.data[i] : 0.0;
            worst = std::max(worst, std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6}));
            ++checked;
        }
    const bool ok = identical <= 1e-12 && most_negative >= -1e-12 && decomposition <= 1e-6 && worst <= 1e-3 &&
                    m.params().count() <= 10000;
    return {ok, "AL(x,x) max " + fmt(identical) + ", min AL " + fmt(most_negative) + ", decomposition rel err " +
                    fmt(decomposition) + ", gradient max rel err " + fmt(worst) + " over " + std::to_string(checked) +
                    " parameters"};
}

Outcome zero_prompt() {
    model::ModelConfig cfg;
    cfg.mode = Mode::usersal_plus;
    cfg.vocabulary = {"<unk>", "find", "red"};
    model::UserSalModel<float> m(cfg);
    support::jitter_params(m, 4, 0.05);
    std::mt19937_64 rng(4);
    int equal = 0;
    for (int i = 0; i < 20; ++i) {
        auto img = support::random_image(rng, cfg.input_size);
        auto a = m.forward(img, Need{ZeroNeed{}}).saliency->value.data;
        auto b = m.forward_conventional(img).saliency->value.data;
        equal += a == b;
    }
    return {equal == 20, std::to_string(equal) + "/20 images bitwise equal"};
}

Outcome frozen_mpl() {
    auto scenes = synth::generate_dataset(support::small_generator(8, 5));
    std::vector<TrainingSample> all;
    for (const auto& s : scenes)
        for (auto& t : to_training_samples(s)) all.push_back(std::move(t));
    harness::TrainConfig tc;
    tc.seed = 5;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.learning_rate = 1e-2;
    tc.eval_limit = 8;
    auto base_cfg = support::tiny_model(Mode::base, TsnVariant::swin_attention);
    base_cfg.vocabulary.clear();
    const auto esm = harness::pretrain_esm(tc, base_cfg, all, all, g_work / "frozen_mpl" / "esm");
    const auto pretrained = model::load_checkpoint(esm.checkpoint);

    auto cfg = support::tiny_model(Mode::usersal_plus, TsnVariant::swin_attention);
    cfg.vocabulary = harness::corpus_vocabulary(all);
    auto r = harness::train(tc, cfg, all, all, esm.checkpoint, g_work / "frozen_mpl" / "run");
    const auto trained = model::load_checkpoint(r.checkpoint);
    const auto target_before = losses::appearance_target(pretrained, *all[0].image, all[0].gt);
    const auto target_after = losses::appearance_target(trained, *all[0].image, all[0].gt);
    bool sme_same = target_before.size() == target_after.size();
    for (size_t i = 0; sme_same && i < target_before.size(); ++i) sme_same = target_before[i].data == target_after[i].data;
    const bool hashes = r.backbone_hash_before == r.backbone_hash_after &&
                        trained.params().hash("esm.") == pretrained.params().hash("esm.");
    model::UserSalModel<float> fresh(trained.config());
    const bool others_moved = trained.params().hash("asa.") != fresh.params().hash("asa.");

    double worst = 0;
    std::mt19937_64 rng(6);
    for (auto tsn : kVariants) {
        auto pc = support::tiny_model(Mode::usersal_plus, tsn);
        auto bc = support::tiny_model(Mode::base, tsn);
        model::UserSalModel<double> plus(pc), base(bc);
        for (int i = 0; i < 5; ++i) {
            auto img = support::random_image(rng, 32);
            auto a = plus.forward(img, Need{command("find the red square")}).saliency->value.data;
            auto b = base.forward_conventional(img).saliency->value.data;
            for (size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::fabs(a[k] - b[k]));
        }
    }
    return {hashes && sme_same && others_moved && worst <= 1e-6,
            std::string("backbone hash ") + (hashes ? "unchanged" : "CHANGED") + ", SME* targets " +
                (sme_same ? "identical" : "DIFFER") + ", trainable parts " + (others_moved ? "updated" : "STUCK") +
                ", init max |plus - base| " + fmt(worst)};
}

Outcome similarity_bounds() {
    std::mt19937_64 rng(7);
    double lo = 1, hi = -1;
    int passes = 0;
    std::vector<std::unique_ptr<model::UserSalModel<float>>> models;
    for (auto tsn : kVariants) {
        auto c = support::tiny_model(Mode::usersal_plus, tsn);
        c.input_size = 64;
        c.levels = 4;
        c.channel_widths = {4, 4, 4, 4};
        models.push_back(std::make_unique<model::UserSalModel<float>>(c));
        support::jitter_params(*models.back(), 8 + passes, 0.3);
        ++passes;
    }
    passes = 0;
    for (int i = 0; i < 1000; ++i) {
        auto& m = *models[i % models.size()];
        auto r = m.forward(support::random_image(rng, 64), Need{command(i % 3 ? "find the red square" : "blue")});
        for (const auto& s : r.similarity)
            for (float v : s->value.data) {
                lo = std::min<double>(lo, v);
                hi = std::max<double>(hi, v);
            }
        ++passes;
    }
    // Identity TSN, F == IF.
    model::UserSalModel<double> id(support::tiny_model(Mode::usersal_plus, TsnVariant::linear));
    std::normal_distribution<double> n(0.0, 1.0);
    model::Pyramid<double> f;
    for (int s = 16; s >= 4; s /= 2) {
        nn::Tensor<double> t({4, s, s});
        for (auto& v : t.data) v = n(rng);
        f.push_back(nn::constant(t));
    }
    double dev = 0;
    for (const auto& s : id.asa(f, f).similarity)
        for (double v : s->value.data) dev = std::max(dev, std::fabs(v - 1));
    return {lo >= -1 && hi <= 1 && dev <= 1e-12, std::to_string(passes) + " passes, S in [" + fmt(lo) + ", " + fmt(hi) +
                                                     "], identity-TSN max |S - 1| " + fmt(dev)};
}

Outcome round_trip() {
    synth::GeneratorConfig g;
    g.seed = 9;
    g.num_scenes = 50;
    auto scenes = synth::generate_dataset(g);
    auto queue = dig::propose(scenes, dig::oracle_backends({}), dig::PromptTemplate{});
    dig::auto_accept(queue);
    auto out = dig::emit_dataset(queue, scenes);
    using PairSet = std::set<std::pair<std::string, std::vector<uint8_t>>>;
    auto pairs = [](const SceneRecord& s) {
        PairSet p;
        for (const auto& c : s.commands) p.insert({c.text, s.find_object(c.target_object_id)->mask.data});
        return p;
    };
    int matched = 0;
    if (out.size() == scenes.size())
        for (size_t i = 0; i < scenes.size(); ++i) matched += pairs(out[i]) == pairs(scenes[i]);
    return {matched == 50, std::to_string(matched) + "/50 scenes with identical (command, mask) sets"};
}

Outcome ablation() {
    std::ifstream f(USERSOD_ABLATION_CONFIG);
    if (!f) return {false, "missing " + std::string(USERSOD_ABLATION_CONFIG)};
    const auto spec = harness::ablation_spec_from_json(
        harness::load_config_file(USERSOD_ABLATION_CONFIG, {"ablation"}).at("ablation"));
    const auto t0 = std::chrono::steady_clock::now();
    const auto table = harness::run_ablation(spec, g_work / "ablation");
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    std::cout << harness::render_table(table);

    const auto* base = table.find("base");
    const auto* mpl = table.find("+MPL");
    const auto* plus = table.find("+ASA+AL");
    if (!base || !mpl || !plus) return {false, "table lacks base, +MPL or +ASA+AL"};
    bool variants_ok = !plus->failed;
    std::string failed;
    for (const char* name : {"tsn=linear", "tsn=conv", "tsn=vit_attention"}) {
        const auto* r = table.find(name);
        if (!r || r->failed || !std::isfinite(r->median_need_mae)) {
            variants_ok = false;
            failed += std::string(" ") + name;
        }
    }
    const bool emitted = fs::exists(g_work / "ablation" / "ablation.json") && fs::exists(g_work / "ablation" / "ablation.txt");
    const double ratio = plus->median_need_mae / mpl->median_need_mae;
    const bool ok = !base->failed && !mpl->failed && ratio <= 0.9 && mpl->median_need_mae < base->median_need_mae &&
                    variants_ok && emitted && minutes <= 45.0 && spec.train_data.num_scenes == 2000 &&
                    spec.test_data.num_scenes == 300 && spec.seeds.size() == 3 && spec.train_data.fine_grained &&
                    spec.test_data.fine_grained && spec.train_data.resolution == 96;
    return {ok, "MAE base " + fmt(base->median_need_mae) + ", usersal " + fmt(mpl->median_need_mae) +
                    ", usersal_plus+AL " + fmt(plus->median_need_mae) + " (ratio " + fmt(ratio) +
                    ", needs <= 0.9); TSN variants " + (variants_ok ? "all trained" : "failed:" + failed) + "; " +
                    fmt(minutes) + " min"};
}

int run(const std::string& cmd) { return std::system(cmd.c_str()); }

bool same_tree(const fs::path& a, const fs::path& b, std::string& diff) {
    std::set<fs::path> files;
    for (const auto& root : {a, b})
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file()) files.insert(fs::relative(e.path(), root));
    for (const auto& rel : files) {
        std::ifstream fa(a / rel, std::ios::binary), fb(b / rel, std::ios::binary);
        std::string sa{std::istreambuf_iterator<char>(fa), {}}, sb{std::istreambuf_iterator<char>(fb), {}};
        if (!fa.is_open() || !fb.is_open() || sa != sb) {
            diff = rel.string();
            return false;
        }
    }
    return !files.empty();
}

Outcome determinism() {
    const std::string cli = USERSOD_CLI;
    std::vector<fs::path> roots = {g_work / "det1", g_work / "det2"};
    for (const auto& r : roots) {
        fs::remove_all(r);
        fs::create_directories(r);
        const std::string cd = "cd '" + r.string() + "' && '" + cli + "' ";
        const std::string quiet = " --log-level warn";
        if (run(cd + "synth-gen --seed 11 --out gen --num-scenes 12 --fine-grained" + quiet) ||
            run(cd + "dig --seed 11 --in gen --out dug --correction auto" + quiet) ||
            run(cd + "pretrain-esm --seed 11 --data dug --out esm --epochs 1 --batch-size 4 --samples-per-epoch 16 "
                     "--eval-limit 8" + quiet) ||
            run(cd + "train --seed 11 --data dug --out run --esm esm/checkpoint --mode usersal_plus --tsn swin_attention --epochs 2 "
                     "--batch-size 4 --samples-per-epoch 16 --eval-limit 8" + quiet) ||
            run(cd + "eval --seed 11 --model run/checkpoint --data dug --report report/eval.json "
                     "--per-sample report/per_sample.csv --split need" + quiet))
            return {false, "a CLI stage failed in " + r.string()};
    }
    std::string diff;
    for (const char* sub : {"gen", "dug", "esm", "run", "report"})
        if (!same_tree(roots[0] / sub, roots[1] / sub, diff))
            return {false, std::string(sub) + " differs at " + diff};
    return {true, "synth-gen, dig --correction auto, pretrain-esm, train and eval outputs bitwise identical"};
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance WORKDIR [--only N[,N...]]\n";
        return 2;
    }
    g_work = argv[1];
    fs::create_directories(g_work);
    std::set<int> only;
    if (argc >= 4 && std::string(argv[2]) == "--only") {
        std::stringstream ss(argv[3]);
        for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    }
    spdlog::set_level(spdlog::level::warn);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"metric-oracle equivalence", metric_oracles},
        {"loss correctness", loss_correctness},
        {"zero-prompt contract", zero_prompt},
        {"frozen-MPL contract", frozen_mpl},
        {"similarity bounds", similarity_bounds},
        {"oracle round trip", round_trip},
        {"directional ablation", ablation},
        {"determinism", determinism},
    };
    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures ? 1 : 0;
}
