#include <atomic>
#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "usersod/digger.hpp"
#include "usersod/harness.hpp"
#include "usersod/reviewsvc.hpp"

using namespace usersod;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
    uint64_t seed = 0;
    bool seed_set = false;
    std::string config;
    std::string log_level = "info";
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--seed", c.seed, "Random seed")->each([&c](const std::string&) { c.seed_set = true; });
    app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--log-level", c.log_level, "trace|debug|info|warn|error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));
}

json config_section(const Common& c, const std::vector<std::string>& allowed, const std::string& name) {
    if (c.config.empty()) return json::object();
    const auto j = harness::load_config_file(c.config, allowed);
    return j.contains(name) ? j.at(name) : json::object();
}

std::vector<TrainingSample> load_samples(const fs::path& dir) {
    return load_dataset(dir / "manifest.jsonl");
}

// Last tenth of the scenes (by id) become the held-out split.
void split_heldout(const std::vector<TrainingSample>& all, std::vector<TrainingSample>& train,
                   std::vector<TrainingSample>& heldout) {
    std::set<int> ids;
    for (const auto& s : all) ids.insert(s.scene_id);
    const size_t n_hold = ids.size() >= 10 ? ids.size() / 10 : 0;
    std::set<int> hold(std::prev(ids.end(), static_cast<long>(n_hold)), ids.end());
    for (const auto& s : all) (hold.count(s.scene_id) ? heldout : train).push_back(s);
}

int run_synth_gen(const Common& c, const std::string& out, std::optional<int> num_scenes, std::optional<int> resolution,
                  bool fine_grained) {
    auto gc = harness::generator_config_from_json(config_section(c, {"generator"}, "generator"));
    if (c.seed_set) gc.seed = c.seed;
    if (num_scenes) gc.num_scenes = *num_scenes;
    if (resolution) gc.resolution = *resolution;
    if (fine_grained) gc.fine_grained = true;
    const auto scenes = synth::generate_dataset(gc);
    serialize_dataset(scenes, out);
    std::ofstream(fs::path(out) / "generator.json") << harness::to_json(gc).dump(2) << "\n";
    spdlog::info("synth-gen: wrote {} scenes to {}", scenes.size(), out);
    return 0;
}

struct DigArgs {
    std::string in, out, backends = "oracle", correction = "auto", decisions, prompt, host = "127.0.0.1", static_dir;
    int port = 8080;
    dig::OracleConfig oracle;
    dig::HttpConfig http;
};

int run_dig_cmd(const Common& c, DigArgs a) {
    const auto section = config_section(c, {"dig"}, "dig");
    for (const auto& [k, v] : section.items()) {
        if (k == "prompt") a.prompt = v.get<std::string>();
        else if (k == "oracle_jitter") a.oracle.jitter = v.get<int>();
        else if (k == "oracle_miss_rate") a.oracle.miss_rate = v.get<double>();
        else if (k == "oracle_detectors") a.oracle.detectors = v.get<int>();
        else if (k == "detector_urls") a.http.detector_urls = v.get<std::vector<std::string>>();
        else if (k == "segmenter_url") a.http.segmenter_url = v.get<std::string>();
        else if (k == "generator_url") a.http.generator_url = v.get<std::string>();
        else if (k == "timeout_seconds") a.http.timeout_seconds = v.get<int>();
        else if (k == "retries") a.http.retries = v.get<int>();
        else throw std::invalid_argument("unknown dig config key '" + k + "'");
    }
    a.oracle.seed = c.seed;
    const auto scenes = load_scenes(a.in, SceneCheck::relaxed);
    const auto factory = a.backends == "oracle" ? dig::oracle_backends(a.oracle) : dig::http_backends(a.http);
    dig::DigConfig dc;
    if (!a.prompt.empty()) dc.prompt = dig::PromptTemplate(a.prompt);
    dc.correction = dig::correction_from_string(a.correction);
    if (!a.decisions.empty()) dc.decisions = a.decisions;

    if (dc.correction != dig::CorrectionMode::review_service) {
        const auto r = dig::run_dig(scenes, factory, dc, a.out);
        std::cout << json{{"scenes_in", r.scenes_in},
                          {"scenes_out", r.scenes_out},
                          {"commands_out", r.commands_out},
                          {"pending", r.queue.pending},
                          {"accepted", r.queue.accepted},
                          {"edited", r.queue.edited},
                          {"rejected", r.queue.rejected}}
                         .dump()
                  << "\n";
        return 0;
    }

    fs::create_directories(a.out);
    const auto audit = fs::path(a.out) / "audit.jsonl";
    auto queue = dig::propose(scenes, factory, dc.prompt, audit);
    queue.save(fs::path(a.out) / "queue");
    if (fs::exists(audit)) queue.replay(audit);
    std::optional<fs::path> static_dir;
    if (!a.static_dir.empty()) static_dir = a.static_dir;
    review::ReviewService svc(queue, static_dir);
    const int port = svc.bind(a.host, a.port);
    spdlog::info("review service on http://{}:{} ({} pending); finishes when the queue is empty", a.host, port,
                 queue.stats().pending);
    std::atomic<bool> done = false;
    std::thread watcher([&] {
        while (!done) {
            if (queue.stats().pending == 0) {
                svc.stop();
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(200));
        }
    });
    svc.serve();
    done = true;
    watcher.join();
    const auto emitted = dig::emit_dataset(queue, scenes);
    serialize_dataset(emitted, a.out, SceneCheck::relaxed);
    spdlog::info("dig: emitted {} scenes", emitted.size());
    return 0;
}

int run_review_serve(const Common&, const std::string& queue_dir, const std::string& audit,
                     const std::string& static_dir, const std::string& host, int port) {
    const fs::path audit_path = audit.empty() ? fs::path(queue_dir) / "audit.jsonl" : fs::path(audit);
    auto queue = dig::CorrectionQueue::load(queue_dir, audit_path);
    std::optional<fs::path> sd;
    if (!static_dir.empty()) sd = static_dir;
    review::ReviewService svc(queue, sd);
    const int bound = svc.bind(host, port);
    spdlog::info("review service on http://{}:{} ({} pending)", host, bound, queue.stats().pending);
    svc.serve();
    return 0;
}

struct TrainArgs {
    std::string data, out, heldout, esm, mode, tsn;
    std::optional<int> epochs, batch_size, samples_per_epoch, eval_limit;
    std::optional<double> lr;
};

void apply_train_overrides(harness::TrainConfig& tc, const TrainArgs& a, const Common& c) {
    if (c.seed_set) tc.seed = c.seed;
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.samples_per_epoch) tc.samples_per_epoch = *a.samples_per_epoch;
    if (a.eval_limit) tc.eval_limit = *a.eval_limit;
    if (a.lr) tc.learning_rate = *a.lr;
    tc.validate();
}

void load_splits(const TrainArgs& a, std::vector<TrainingSample>& train, std::vector<TrainingSample>& heldout) {
    const auto all = load_samples(a.data);
    if (a.heldout.empty()) {
        split_heldout(all, train, heldout);
    } else {
        train = all;
        heldout = load_samples(a.heldout);
    }
}

int run_pretrain(const Common& c, const TrainArgs& a) {
    const std::vector<std::string> sections = {"model", "train"};
    auto tc = harness::train_config_from_json(config_section(c, sections, "train"));
    apply_train_overrides(tc, a, c);
    auto mc = harness::model_config_overlay(config_section(c, sections, "model"), {});
    std::vector<TrainingSample> train, heldout;
    load_splits(a, train, heldout);
    const auto r = harness::pretrain_esm(tc, mc, train, heldout, a.out);
    spdlog::info("pretrain-esm: checkpoint {}", r.checkpoint.string());
    return 0;
}

int run_train(const Common& c, const TrainArgs& a) {
    const std::vector<std::string> sections = {"model", "train"};
    auto tc = harness::train_config_from_json(config_section(c, sections, "train"));
    apply_train_overrides(tc, a, c);
    auto mc = harness::model_config_overlay(config_section(c, sections, "model"), {});
    if (!a.mode.empty()) mc.mode = model::mode_from_string(a.mode);
    if (!a.tsn.empty()) mc.tsn_variant = model::tsn_from_string(a.tsn);
    std::vector<TrainingSample> train, heldout;
    load_splits(a, train, heldout);
    std::optional<fs::path> esm;
    if (!a.esm.empty()) esm = a.esm;
    const auto r = harness::train(tc, mc, train, heldout, esm, a.out);
    json report{{"checkpoint", r.checkpoint.string()},
                {"epoch_loss", r.epoch_loss},
                {"heldout", harness::to_json(r.heldout)},
                {"backbone_hash_before", r.backbone_hash_before},
                {"backbone_hash_after", r.backbone_hash_after}};
    std::ofstream(fs::path(a.out) / "report.json") << report.dump(2) << "\n";
    return 0;
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    return f;
}

int run_eval(const Common&, const std::string& ckpt, const std::string& data, const std::string& report_path,
             const std::string& per_sample, const std::string& split) {
    const auto model = model::load_checkpoint(ckpt);
    auto samples = load_samples(data);
    if (split == "need") samples = harness::need_split(samples);
    else if (split == "conventional") samples = harness::conventional_split(samples);
    std::vector<metrics::SampleMetrics> rows;
    const auto rep = harness::evaluate_dataset(model, samples, per_sample.empty() ? nullptr : &rows);
    const auto j = harness::to_json(rep);
    if (report_path.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        open_output(report_path) << j.dump(2) << "\n";
    }
    if (!per_sample.empty()) {
        auto f = open_output(per_sample);
        f << "index,scene_id,command,mae,f_measure,s_measure,e_measure,f_defined\n";
        f.precision(17);
        for (size_t i = 0; i < rows.size(); ++i) {
            const auto* cmd = std::get_if<NeedCommand>(&samples[i].command);
            std::string text = cmd ? cmd->text : "";
            for (auto& ch : text)
                if (ch == '"') ch = '\'';
            f << i << "," << samples[i].scene_id << ",\"" << text << "\"," << rows[i].mae << "," << rows[i].f_measure
              << "," << rows[i].s_measure << "," << rows[i].e_measure << "," << (rows[i].f_defined ? 1 : 0) << "\n";
        }
    }
    return 0;
}

int run_ablate(const Common& c, const std::string& out, std::optional<int> train_scenes, std::optional<int> test_scenes,
               std::vector<uint64_t> seeds) {
    json spec_json = json::object();
    if (!c.config.empty()) {
        const auto j = harness::load_config_file(c.config, {"ablation"});
        if (j.contains("ablation")) spec_json = j.at("ablation");
    }
    auto spec = harness::ablation_spec_from_json(spec_json);
    if (train_scenes) spec.train_data.num_scenes = *train_scenes;
    if (test_scenes) spec.test_data.num_scenes = *test_scenes;
    if (!seeds.empty()) spec.seeds = seeds;
    if (c.seed_set) {
        spec.train_data.seed = c.seed;
        spec.test_data.seed = c.seed + 1000;
        spec.pretrain.seed = c.seed;
    }
    const auto table = harness::run_ablation(spec, out);
    std::cout << harness::render_table(table);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"usersod: user-need salient object detection toolkit"};
    app.require_subcommand(1);

    Common c_synth, c_dig, c_review, c_pre, c_train, c_eval, c_ablate;

    auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic scene dataset");
    add_common(synth, c_synth);
    std::string synth_out;
    std::optional<int> synth_n, synth_res;
    bool synth_fine = false;
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_option("--num-scenes", synth_n, "Number of scenes");
    synth->add_option("--resolution", synth_res, "Square image side in pixels");
    synth->add_flag("--fine-grained", synth_fine, "Every scene has same-shape objects differing only in color");

    auto* digc = app.add_subcommand("dig", "Run the user need digger over a dataset");
    add_common(digc, c_dig);
    DigArgs dig_args;
    digc->add_option("--in", dig_args.in, "Input dataset directory")->required()->check(CLI::ExistingDirectory);
    digc->add_option("--out", dig_args.out, "Output dataset directory")->required();
    digc->add_option("--backends", dig_args.backends, "oracle|http")->check(CLI::IsMember({"oracle", "http"}));
    digc->add_option("--correction", dig_args.correction, "auto|file|serve")
        ->check(CLI::IsMember({"auto", "file", "serve"}));
    digc->add_option("--decisions", dig_args.decisions, "Decision JSONL for --correction file")
        ->check(CLI::ExistingFile);
    digc->add_option("--prompt", dig_args.prompt, "Prompt template with a {label} placeholder");
    digc->add_option("--oracle-jitter", dig_args.oracle.jitter, "Oracle box jitter in pixels");
    digc->add_option("--oracle-miss-rate", dig_args.oracle.miss_rate, "Oracle per-object miss probability");
    digc->add_option("--oracle-detectors", dig_args.oracle.detectors, "Oracle ensemble size");
    digc->add_option("--detector-url", dig_args.http.detector_urls, "External detector base URL (repeatable)");
    digc->add_option("--segmenter-url", dig_args.http.segmenter_url, "External segmenter base URL");
    digc->add_option("--generator-url", dig_args.http.generator_url, "External command generator base URL");
    digc->add_option("--host", dig_args.host, "Review service host (serve mode)");
    digc->add_option("--port", dig_args.port, "Review service port (serve mode, 0 = any)");
    digc->add_option("--static", dig_args.static_dir, "Built review UI directory (serve mode)");

    auto* review = app.add_subcommand("review-serve", "Serve a saved correction queue over HTTP");
    add_common(review, c_review);
    std::string rv_queue, rv_audit, rv_static, rv_host = "127.0.0.1";
    int rv_port = 8080;
    review->add_option("--queue", rv_queue, "Queue directory written by dig")->required()->check(CLI::ExistingDirectory);
    review->add_option("--audit", rv_audit, "Audit log (default QUEUE/audit.jsonl)");
    review->add_option("--static", rv_static, "Built review UI directory");
    review->add_option("--host", rv_host, "Bind host");
    review->add_option("--port", rv_port, "Bind port (0 = any)");

    auto add_train_opts = [](CLI::App* sub, TrainArgs& a) {
        sub->add_option("--data", a.data, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
        sub->add_option("--out", a.out, "Output run directory")->required();
        sub->add_option("--heldout", a.heldout, "Held-out dataset (default: last tenth of the scenes)");
        sub->add_option("--epochs", a.epochs, "Epochs");
        sub->add_option("--batch-size", a.batch_size, "Batch size");
        sub->add_option("--lr", a.lr, "Learning rate");
        sub->add_option("--samples-per-epoch", a.samples_per_epoch, "Samples drawn per epoch (0 = all)");
        sub->add_option("--eval-limit", a.eval_limit, "Held-out samples scored per epoch (0 = all)");
    };
    auto* pre = app.add_subcommand("pretrain-esm", "Pretrain the base saliency model on conventional pairs");
    add_common(pre, c_pre);
    TrainArgs pre_args;
    add_train_opts(pre, pre_args);

    auto* trainc = app.add_subcommand("train", "Train a UserSal / UserSal+ model");
    add_common(trainc, c_train);
    TrainArgs train_args;
    add_train_opts(trainc, train_args);
    trainc->add_option("--esm", train_args.esm, "Pretrained ESM checkpoint directory");
    trainc->add_option("--mode", train_args.mode, "base|usersal|usersal_plus")
        ->check(CLI::IsMember({"base", "usersal", "usersal_plus"}));
    trainc->add_option("--tsn", train_args.tsn, "linear|conv|vit_attention|swin_attention")
        ->check(CLI::IsMember({"linear", "conv", "vit_attention", "swin_attention"}));

    auto* evalc = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    add_common(evalc, c_eval);
    std::string ev_model, ev_data, ev_report, ev_per_sample, ev_split = "all";
    evalc->add_option("--model", ev_model, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    evalc->add_option("--data", ev_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    evalc->add_option("--report", ev_report, "Report JSON path (default: stdout)");
    evalc->add_option("--per-sample", ev_per_sample, "Per-sample CSV path");
    evalc->add_option("--split", ev_split, "all|need|conventional")
        ->check(CLI::IsMember({"all", "need", "conventional"}));

    auto* ablate = app.add_subcommand("ablate", "Run the component ablation and emit its table");
    add_common(ablate, c_ablate);
    std::string ab_out;
    std::optional<int> ab_train, ab_test;
    std::vector<uint64_t> ab_seeds;
    ablate->add_option("--out", ab_out, "Output directory")->required();
    ablate->add_option("--train-scenes", ab_train, "Training scenes");
    ablate->add_option("--test-scenes", ab_test, "Test scenes");
    ablate->add_option("--seeds", ab_seeds, "Training seeds");

    CLI11_PARSE(app, argc, argv);

    const Common* active = nullptr;
    for (auto [sub, common] : std::vector<std::pair<CLI::App*, Common*>>{{synth, &c_synth},
                                                                          {digc, &c_dig},
                                                                          {review, &c_review},
                                                                          {pre, &c_pre},
                                                                          {trainc, &c_train},
                                                                          {evalc, &c_eval},
                                                                          {ablate, &c_ablate}})
        if (sub->parsed()) active = common;
    spdlog::set_level(spdlog::level::from_str(active->log_level));

    try {
        if (synth->parsed()) return run_synth_gen(c_synth, synth_out, synth_n, synth_res, synth_fine);
        if (digc->parsed()) return run_dig_cmd(c_dig, dig_args);
        if (review->parsed()) return run_review_serve(c_review, rv_queue, rv_audit, rv_static, rv_host, rv_port);
        if (pre->parsed()) return run_pretrain(c_pre, pre_args);
        if (trainc->parsed()) return run_train(c_train, train_args);
        if (evalc->parsed()) return run_eval(c_eval, ev_model, ev_data, ev_report, ev_per_sample, ev_split);
        if (ablate->parsed()) return run_ablate(c_ablate, ab_out, ab_train, ab_test, ab_seeds);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 2;
}
