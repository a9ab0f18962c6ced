#include "usersod/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "usersod/rng.hpp"

namespace usersod::harness {

using nlohmann::json;
namespace fs = std::filesystem;
using model::Mode;
using model::ModelConfig;
using model::UserSalModel;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& what) {
    if (!j.is_object()) throw std::invalid_argument(what + " config must be an object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw std::invalid_argument("unknown " + what + " config key '" + k + "'");
}

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("lr_decay_factor must be > 0");
    if (lr_decay_epoch < 1) throw std::invalid_argument("lr_decay_epoch must be >= 1");
    if (samples_per_epoch < 0 || eval_limit < 0) throw std::invalid_argument("sample counts must be >= 0");
}

int TrainConfig::decay_at() const {
    if (epochs >= lr_decay_epoch) return lr_decay_epoch;
    return std::max(1, static_cast<int>(std::lround(0.75 * epochs)));
}

double TrainConfig::lr_at(int epoch) const { return epoch >= decay_at() ? learning_rate * lr_decay_factor : learning_rate; }

json to_json(const TrainConfig& c) {
    return {{"seed", c.seed},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"lr_decay_factor", c.lr_decay_factor},
            {"lr_decay_epoch", c.lr_decay_epoch},
            {"samples_per_epoch", c.samples_per_epoch},
            {"eval_limit", c.eval_limit},
            {"appearance_loss", c.appearance_loss},
            {"reverse_kl", c.reverse_kl},
            {"al_through_residual", c.al_through_residual}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    reject_unknown(j,
                   {"seed", "epochs", "batch_size", "learning_rate", "lr_decay_factor", "lr_decay_epoch",
                    "samples_per_epoch", "eval_limit", "appearance_loss", "reverse_kl",
                    "al_through_residual"},
                   "train");
    take(j, "seed", c.seed);
    take(j, "epochs", c.epochs);
    take(j, "batch_size", c.batch_size);
    take(j, "learning_rate", c.learning_rate);
    take(j, "lr_decay_factor", c.lr_decay_factor);
    take(j, "lr_decay_epoch", c.lr_decay_epoch);
    take(j, "samples_per_epoch", c.samples_per_epoch);
    take(j, "eval_limit", c.eval_limit);
    take(j, "appearance_loss", c.appearance_loss);
    take(j, "reverse_kl", c.reverse_kl);
    take(j, "al_through_residual", c.al_through_residual);
    c.validate();
    return c;
}

json to_json(const synth::GeneratorConfig& c) {
    json palette = json::array(), sizes = json::array();
    for (const auto& p : c.palette) palette.push_back({{"name", p.name}, {"rgb", p.rgb}});
    for (const auto& s : c.sizes) sizes.push_back({{"name", s.name}, {"area_fraction", s.area_fraction}});
    return {{"seed", c.seed},
            {"num_scenes", c.num_scenes},
            {"resolution", c.resolution},
            {"min_objects", c.min_objects},
            {"max_objects", c.max_objects},
            {"palette", palette},
            {"shapes", c.shapes},
            {"sizes", sizes},
            {"textures", c.textures},
            {"max_pairwise_iou", c.max_pairwise_iou},
            {"near_miss_fraction", c.near_miss_fraction},
            {"fine_grained", c.fine_grained}};
}

synth::GeneratorConfig generator_config_from_json(const json& j, synth::GeneratorConfig c) {
    reject_unknown(j,
                   {"seed", "num_scenes", "resolution", "min_objects", "max_objects", "palette", "shapes", "sizes",
                    "textures", "max_pairwise_iou", "near_miss_fraction", "fine_grained"},
                   "generator");
    take(j, "seed", c.seed);
    take(j, "num_scenes", c.num_scenes);
    take(j, "resolution", c.resolution);
    take(j, "min_objects", c.min_objects);
    take(j, "max_objects", c.max_objects);
    take(j, "shapes", c.shapes);
    take(j, "textures", c.textures);
    take(j, "max_pairwise_iou", c.max_pairwise_iou);
    take(j, "near_miss_fraction", c.near_miss_fraction);
    take(j, "fine_grained", c.fine_grained);
    if (j.contains("palette")) {
        c.palette.clear();
        for (const auto& p : j.at("palette"))
            c.palette.push_back({p.at("name").get<std::string>(), p.at("rgb").get<std::array<float, 3>>()});
    }
    if (j.contains("sizes")) {
        c.sizes.clear();
        for (const auto& s : j.at("sizes"))
            c.sizes.push_back({s.at("name").get<std::string>(), s.at("area_fraction").get<double>()});
    }
    c.validate();
    return c;
}

ModelConfig model_config_overlay(const json& j, ModelConfig base) {
    json merged = model::to_json(base);
    for (const auto& [k, v] : j.items()) merged[k] = v;
    return model::model_config_from_json(merged);
}

json load_config_file(const fs::path& path, const std::vector<std::string>& allowed_sections) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(f, nullptr, true, true);
    } catch (const json::exception& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument(path.string() + ": config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (std::find(allowed_sections.begin(), allowed_sections.end(), k) == allowed_sections.end())
            throw std::invalid_argument(path.string() + ": unexpected section '" + k + "'");
    return j;
}

json to_json(const metrics::MetricsReport& r) {
    return {{"mae", r.mae},
            {"f_measure", r.f_measure},
            {"s_measure", r.s_measure},
            {"e_measure", r.e_measure},
            {"count", r.count},
            {"skipped_undefined_f", r.skipped_undefined_f}};
}

json to_json(const losses::LossReport& r) {
    return {{"mse", r.mse}, {"al_per_level", r.al_per_level}, {"total", r.total}};
}

metrics::MetricsReport evaluate_dataset(const UserSalModel<float>& model, const std::vector<TrainingSample>& samples,
                                        std::vector<metrics::SampleMetrics>* per_sample) {
    if (samples.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");
    metrics::MetricsAccumulator acc;
    for (const auto& s : samples) {
        const auto m = metrics::evaluate_pair(model.predict(*s.image, s.command), s.gt);
        acc.add(m);
        if (per_sample) per_sample->push_back(m);
    }
    return acc.report();
}

std::vector<std::string> corpus_vocabulary(const std::vector<TrainingSample>& samples) {
    std::vector<std::string> corpus;
    for (const auto& s : samples)
        if (const auto* c = std::get_if<NeedCommand>(&s.command)) corpus.push_back(c->text);
    return model::build_vocabulary(corpus);
}

std::vector<TrainingSample> conventional_split(const std::vector<TrainingSample>& samples) {
    std::vector<TrainingSample> out;
    for (const auto& s : samples)
        if (is_zero_need(s.command)) out.push_back(s);
    return out;
}

std::vector<TrainingSample> need_split(const std::vector<TrainingSample>& samples) {
    std::vector<TrainingSample> out;
    for (const auto& s : samples) {
        const auto* c = std::get_if<NeedCommand>(&s.command);
        if (!c) continue;
        const auto attrs = synth::parse_command(c->text);
        if (attrs && attrs->count("color") && attrs->count("size") && attrs->count("shape")) out.push_back(s);
    }
    return out;
}

namespace {

std::vector<TrainingSample> head(const std::vector<TrainingSample>& v, int limit) {
    if (limit <= 0 || static_cast<size_t>(limit) >= v.size()) return v;
    return {v.begin(), v.begin() + limit};
}

// Fisher-Yates driven by the portable Rng.
void shuffle(std::vector<size_t>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

TrainResult run_training(const TrainConfig& cfg, UserSalModel<float>& model, const std::vector<TrainingSample>& train,
                         const std::vector<TrainingSample>& heldout, const fs::path& out_dir, const json& metadata) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("training set is empty");
    fs::create_directories(out_dir);
    const auto ckpt = out_dir / "checkpoint";
    std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());

    const auto& prefix = UserSalModel<float>::backbone_prefix();
    const bool frozen = model.config().freeze_esm;
    TrainResult result;
    result.checkpoint = ckpt;
    result.backbone_hash_before = model.params().hash(prefix);

    losses::LossConfig lc;
    lc.appearance_loss = cfg.appearance_loss;
    lc.reverse_kl = cfg.reverse_kl;
    lc.al_through_residual = cfg.al_through_residual;
    nn::Adam<float> adam(model.params().trainable(), cfg.learning_rate);
    Rng rng(splitmix64(cfg.seed ^ 0x5EED5EEDULL));
    const auto eval_set = head(heldout, cfg.eval_limit);

    auto save = [&](int epochs_done) {
        json meta = metadata;
        meta["epochs_completed"] = epochs_done;
        meta["train"] = to_json(cfg);
        model::save_checkpoint(model, ckpt, meta);
    };
    save(0);

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    size_t cursor = order.size(); // forces a shuffle on first use
    const size_t per_epoch = cfg.samples_per_epoch > 0 ? static_cast<size_t>(cfg.samples_per_epoch) : train.size();
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.set_lr(cfg.lr_at(epoch));
        std::vector<size_t> picks;
        picks.reserve(per_epoch);
        while (picks.size() < per_epoch) {
            if (cursor == order.size()) {
                shuffle(order, rng);
                cursor = 0;
            }
            picks.push_back(order[cursor++]);
        }
        double epoch_total = 0.0;
        for (size_t b0 = 0; b0 < picks.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t b1 = std::min(picks.size(), b0 + static_cast<size_t>(cfg.batch_size));
            model.params().zero_grad();
            losses::LossReport mean;
            mean.al_per_level.assign(static_cast<size_t>(model.config().levels), 0.0);
            for (size_t i = b0; i < b1; ++i) {
                const auto& s = train[picks[i]];
                auto g = losses::total_loss(model, *s.image, s.command, s.gt, lc);
                if (!std::isfinite(g.report.total)) {
                    log << json{{"event", "diverged"}, {"epoch", epoch}, {"step", step}}.dump() << "\n";
                    throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                           std::to_string(step) + "; last good checkpoint in " + ckpt.string());
                }
                nn::backward(g.total);
                mean.mse += g.report.mse;
                mean.total += g.report.total;
                for (size_t n = 0; n < mean.al_per_level.size(); ++n) mean.al_per_level[n] += g.report.al_per_level[n];
            }
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            mean.mse *= inv;
            mean.total *= inv;
            for (auto& a : mean.al_per_level) a *= inv;
            adam.step(inv);
            epoch_total += mean.total * static_cast<double>(b1 - b0);
            json line = to_json(mean);
            line["event"] = "step";
            line["epoch"] = epoch;
            line["step"] = step++;
            line["lr"] = adam.lr();
            line["batch"] = b1 - b0;
            log << line.dump() << "\n";
        }
        if (frozen && model.params().hash(prefix) != result.backbone_hash_before)
            throw InvariantError("frozen backbone parameters changed during training");
        result.epoch_loss.push_back(epoch_total / static_cast<double>(picks.size()));
        json line{{"event", "epoch"}, {"epoch", epoch}, {"mean_total", result.epoch_loss.back()}};
        if (!eval_set.empty()) {
            result.heldout = evaluate_dataset(model, eval_set);
            line["heldout"] = to_json(result.heldout);
        }
        log << line.dump() << "\n";
        log.flush();
        save(epoch + 1);
        spdlog::info("epoch {}/{} loss {:.5f}{}", epoch + 1, cfg.epochs, result.epoch_loss.back(),
                     eval_set.empty() ? std::string()
                                      : fmt::format(" held-out MAE {:.4f}", result.heldout.mae));
    }
    result.backbone_hash_after = model.params().hash(prefix);
    return result;
}

} // namespace

TrainResult pretrain_esm(const TrainConfig& config, ModelConfig mc, const std::vector<TrainingSample>& train_set,
                         const std::vector<TrainingSample>& heldout, const fs::path& out_dir) {
    mc.mode = Mode::base;
    mc.freeze_esm = false;
    mc.vocabulary.clear();
    mc.init_seed = splitmix64(config.seed ^ 0xE5E5ULL);
    const auto conv = conventional_split(train_set);
    if (conv.empty()) throw std::invalid_argument("pretraining needs conventional (no-command) samples");
    UserSalModel<float> model(mc);
    return run_training(config, model, conv, conventional_split(heldout), out_dir,
                        {{"role", "esm"}, {"frozen", true}});
}

TrainResult train(const TrainConfig& config, ModelConfig mc, const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& heldout, const std::optional<fs::path>& pretrained,
                  const fs::path& out_dir) {
    if (mc.vocabulary.empty() && mc.mode != Mode::base) mc.vocabulary = corpus_vocabulary(train_set);
    mc.init_seed = splitmix64(config.seed ^ 0x1417ULL);
    UserSalModel<float> model(mc);
    if (pretrained) {
        model::load_pretrained_esm(model, *pretrained);
    } else if (mc.freeze_esm) {
        spdlog::warn("training with a frozen but randomly initialized backbone (no pretrained ESM given)");
    }
    json meta{{"role", model::to_string(mc.mode)}};
    if (pretrained) meta["pretrained"] = pretrained->filename().string();
    return run_training(config, model, train_set, heldout, out_dir, meta);
}

std::vector<AblationRow> default_ablation_rows() {
    using model::TsnVariant;
    return {
        {"base", Mode::base, TsnVariant::swin_attention, true, false, true},
        {"+MPL", Mode::usersal, TsnVariant::swin_attention, true, false, true},
        {"+ASA(noAL)", Mode::usersal_plus, TsnVariant::swin_attention, true, false, false},
        {"+ASA+AL", Mode::usersal_plus, TsnVariant::swin_attention, true, true, true},
        {"single-scale", Mode::usersal_plus, TsnVariant::swin_attention, false, true, false},
        {"tsn=linear", Mode::usersal_plus, TsnVariant::linear, true, true, false},
        {"tsn=conv", Mode::usersal_plus, TsnVariant::conv, true, true, false},
        {"tsn=vit_attention", Mode::usersal_plus, TsnVariant::vit_attention, true, true, false},
    };
}

AblationSpec ablation_spec_from_json(const json& j) {
    reject_unknown(j, {"train_data", "test_data", "seeds", "pretrain", "train", "model", "rows"}, "ablation");
    AblationSpec s;
    s.train_data.fine_grained = true;
    s.test_data.fine_grained = true;
    s.test_data.seed = 1000;
    if (j.contains("train_data")) s.train_data = generator_config_from_json(j.at("train_data"), s.train_data);
    if (j.contains("test_data")) s.test_data = generator_config_from_json(j.at("test_data"), s.test_data);
    take(j, "seeds", s.seeds);
    if (j.contains("pretrain")) s.pretrain = train_config_from_json(j.at("pretrain"), s.pretrain);
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"), s.train);
    if (j.contains("model")) s.model = model_config_overlay(j.at("model"), s.model);
    if (j.contains("rows")) {
        s.rows.clear();
        for (const auto& r : j.at("rows")) {
            reject_unknown(r, {"name", "mode", "tsn", "multi_scale", "appearance_loss", "reverse_kl", "al_through_residual",
                                "epochs", "all_seeds"}, "ablation row");
            AblationRow row;
            row.name = r.at("name").get<std::string>();
            row.mode = model::mode_from_string(r.at("mode").get<std::string>());
            if (r.contains("tsn")) row.tsn = model::tsn_from_string(r.at("tsn").get<std::string>());
            take(r, "multi_scale", row.multi_scale);
            take(r, "appearance_loss", row.appearance_loss);
            take(r, "reverse_kl", row.reverse_kl);
            take(r, "al_through_residual", row.al_through_residual);
            take(r, "epochs", row.epochs);
            if (row.epochs < 0) throw std::invalid_argument("ablation row epochs must be >= 0");
            take(r, "all_seeds", row.all_seeds);
            s.rows.push_back(row);
        }
    }
    if (s.seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
    return s;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

const RowResult* AblationTable::find(const std::string& name) const {
    for (const auto& r : rows)
        if (r.name == name) return &r;
    return nullptr;
}

json to_json(const AblationTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        json conv = json::array(), need = json::array();
        for (const auto& m : r.conventional) conv.push_back(to_json(m));
        for (const auto& m : r.need) need.push_back(to_json(m));
        json row{{"name", r.name},
                 {"failed", r.failed},
                 {"seeds", r.seeds},
                 {"epochs", r.epochs},
                 {"conventional", conv},
                 {"need", need},
                 {"seconds", r.seconds}};
        if (r.failed) {
            row["error"] = r.error;
        } else {
            row["median_need_mae"] = r.median_need_mae;
            row["median_conventional_mae"] = r.median_conventional_mae;
        }
        rows.push_back(row);
    }
    return {{"rows", rows}};
}

std::string render_table(const AblationTable& t) {
    auto med = [](const std::vector<metrics::MetricsReport>& v, double metrics::MetricsReport::*f) {
        std::vector<double> xs;
        for (const auto& m : v) xs.push_back(m.*f);
        return median(xs);
    };
    std::ostringstream os;
    os << std::left << std::setw(20) << "row" << std::right << std::setw(6) << "seeds" << std::setw(7) << "epochs";
    for (const char* split : {"conv", "need"})
        for (const char* m : {"Sm", "Fm", "Em", "MAE"}) os << std::setw(10) << (std::string(split) + "." + m);
    os << "\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& r : t.rows) {
        os << std::left << std::setw(20) << r.name << std::right << std::setw(6) << r.seeds.size() << std::setw(7)
           << r.epochs;
        if (r.failed) {
            os << "  FAILED: " << r.error << "\n";
            continue;
        }
        for (const auto* split : {&r.conventional, &r.need}) {
            os << std::setw(10) << med(*split, &metrics::MetricsReport::s_measure);
            os << std::setw(10) << med(*split, &metrics::MetricsReport::f_measure);
            os << std::setw(10) << med(*split, &metrics::MetricsReport::e_measure);
            os << std::setw(10) << med(*split, &metrics::MetricsReport::mae);
        }
        os << "\n";
    }
    os << "(medians over seeds; the swin_attention TSN variant is the +ASA+AL row)\n";
    return os.str();
}

AblationTable run_ablation(const AblationSpec& spec, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    auto flatten = [](const std::vector<SceneRecord>& scenes) {
        std::vector<TrainingSample> out;
        for (const auto& s : scenes)
            for (auto& t : to_training_samples(s)) out.push_back(std::move(t));
        return out;
    };
    spdlog::info("ablation: generating {} train / {} test scenes", spec.train_data.num_scenes,
                 spec.test_data.num_scenes);
    const auto train_set = flatten(synth::generate_dataset(spec.train_data));
    const auto test_set = flatten(synth::generate_dataset(spec.test_data));
    const auto conv_test = conventional_split(test_set);
    const auto need_test = need_split(test_set);
    ModelConfig base_mc = spec.model;
    base_mc.vocabulary = corpus_vocabulary(train_set);
    const auto heldout = head(need_test, spec.train.eval_limit);

    const auto esm_dir = out_dir / "esm";
    auto t0 = std::chrono::steady_clock::now();
    pretrain_esm(spec.pretrain, base_mc, train_set, conv_test, esm_dir);
    spdlog::info("ablation: ESM pretrained in {:.1f}s",
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    AblationTable table;
    std::ofstream progress(out_dir / "progress.jsonl", std::ios::trunc);
    for (const auto& row : spec.rows) {
        RowResult rr;
        rr.name = row.name;
        const auto start = std::chrono::steady_clock::now();
        std::vector<uint64_t> seeds = spec.seeds;
        if (!row.all_seeds) seeds.resize(1);
        try {
            for (auto seed : seeds) {
                ModelConfig mc = base_mc;
                mc.mode = row.mode;
                mc.tsn_variant = row.tsn;
                mc.multi_scale = row.multi_scale;
                if (mc.mode == Mode::base) mc.vocabulary.clear();
                TrainConfig tc = spec.train;
                tc.seed = seed;
                tc.appearance_loss = row.appearance_loss;
                tc.reverse_kl = row.reverse_kl;
                tc.al_through_residual = row.al_through_residual;
                if (row.epochs > 0) tc.epochs = row.epochs;
                rr.epochs = tc.epochs;
                std::string dir_name = row.name;
                for (auto& ch : dir_name)
                    if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                const auto run_dir = out_dir / "rows" / dir_name / ("seed" + std::to_string(seed));
                train(tc, mc, train_set, heldout, esm_dir / "checkpoint", run_dir);
                const auto m = model::load_checkpoint(run_dir / "checkpoint");
                rr.conventional.push_back(evaluate_dataset(m, conv_test));
                rr.need.push_back(evaluate_dataset(m, need_test));
                rr.seeds.push_back(seed);
                spdlog::info("ablation {} seed {}: need MAE {:.4f}, conventional MAE {:.4f}", row.name, seed,
                             rr.need.back().mae, rr.conventional.back().mae);
                progress << json{{"row", row.name},
                                 {"seed", seed},
                                 {"need", to_json(rr.need.back())},
                                 {"conventional", to_json(rr.conventional.back())}}
                                .dump()
                         << "\n";
                progress.flush();
            }
            std::vector<double> need_mae, conv_mae;
            for (const auto& m : rr.need) need_mae.push_back(m.mae);
            for (const auto& m : rr.conventional) conv_mae.push_back(m.mae);
            rr.median_need_mae = median(need_mae);
            rr.median_conventional_mae = median(conv_mae);
        } catch (const std::exception& e) {
            rr.failed = true;
            rr.error = e.what();
            spdlog::error("ablation row {} failed: {}", row.name, e.what());
        }
        rr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        table.rows.push_back(std::move(rr));
    }
    std::ofstream(out_dir / "ablation.json") << to_json(table).dump(2) << "\n";
    std::ofstream(out_dir / "ablation.txt") << render_table(table);
    return table;
}

} // namespace usersod::harness
