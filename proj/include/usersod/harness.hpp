#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "usersod/digger.hpp"
#include "usersod/losses.hpp"
#include "usersod/metrics.hpp"
#include "usersod/model.hpp"
#include "usersod/synthscenes.hpp"

namespace usersod::harness {

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    uint64_t seed = 0;
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-4;
    double lr_decay_factor = 0.1;
    /// Epoch at which the rate drops; epochs < 60 scale it to 75% of the run.
    int lr_decay_epoch = 60;
    /// Samples drawn per epoch (0 = the whole training set).
    int samples_per_epoch = 0;
    /// Held-out samples scored after every epoch (0 = all).
    int eval_limit = 200;
    bool appearance_loss = true;
    bool reverse_kl = false;
    bool al_through_residual = true;

    void validate() const;
    int decay_at() const;
    double lr_at(int epoch) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const synth::GeneratorConfig& c);
synth::GeneratorConfig generator_config_from_json(const nlohmann::json& j, synth::GeneratorConfig base = {});
/// Overlays the keys present in `j` on `base`.
model::ModelConfig model_config_overlay(const nlohmann::json& j, model::ModelConfig base);

/// Parses a JSON config file, rejecting anything outside `allowed_sections`.
nlohmann::json load_config_file(const std::filesystem::path& path, const std::vector<std::string>& allowed_sections);

nlohmann::json to_json(const metrics::MetricsReport& r);
nlohmann::json to_json(const losses::LossReport& r);

/// Per-sample metrics averaged; samples with an all-zero gt are skipped for F and counted.
metrics::MetricsReport evaluate_dataset(const model::UserSalModel<float>& model,
                                        const std::vector<TrainingSample>& samples,
                                        std::vector<metrics::SampleMetrics>* per_sample = nullptr);

struct TrainResult {
    std::filesystem::path checkpoint;
    metrics::MetricsReport heldout;
    std::vector<double> epoch_loss;
    std::string backbone_hash_before;
    std::string backbone_hash_after;
};

/// Base-mode ESM trained with MSE on conventional (ZeroNeed) pairs, then marked frozen.
TrainResult pretrain_esm(const TrainConfig& config, model::ModelConfig model_config,
                         const std::vector<TrainingSample>& train, const std::vector<TrainingSample>& heldout,
                         const std::filesystem::path& out_dir);

/// Optimizes the total loss; writes out_dir/train_log.jsonl and out_dir/checkpoint.
TrainResult train(const TrainConfig& config, model::ModelConfig model_config, const std::vector<TrainingSample>& train,
                  const std::vector<TrainingSample>& heldout, const std::optional<std::filesystem::path>& pretrained,
                  const std::filesystem::path& out_dir);

/// Vocabulary over every command text in the samples.
std::vector<std::string> corpus_vocabulary(const std::vector<TrainingSample>& samples);

/// Conventional split: ZeroNeed samples. Need split: commands naming color, size and shape.
std::vector<TrainingSample> conventional_split(const std::vector<TrainingSample>& samples);
std::vector<TrainingSample> need_split(const std::vector<TrainingSample>& samples);

struct AblationRow {
    std::string name;
    model::Mode mode = model::Mode::usersal_plus;
    model::TsnVariant tsn = model::TsnVariant::swin_attention;
    bool multi_scale = true;
    bool appearance_loss = true;
    bool reverse_kl = false;
    bool al_through_residual = true;
    /// Overrides the shared epoch count when positive.
    int epochs = 0;
    /// Otherwise only the first seed is run.
    bool all_seeds = true;
};

std::vector<AblationRow> default_ablation_rows();

struct AblationSpec {
    synth::GeneratorConfig train_data;
    synth::GeneratorConfig test_data;
    std::vector<uint64_t> seeds = {0, 1, 2};
    TrainConfig pretrain;
    TrainConfig train;
    model::ModelConfig model;
    std::vector<AblationRow> rows = default_ablation_rows();
};

AblationSpec ablation_spec_from_json(const nlohmann::json& j);

struct RowResult {
    std::string name;
    bool failed = false;
    std::string error;
    std::vector<uint64_t> seeds;
    int epochs = 0;
    std::vector<metrics::MetricsReport> conventional; // per seed
    std::vector<metrics::MetricsReport> need;         // per seed
    double median_need_mae = 0.0;
    double median_conventional_mae = 0.0;
    double seconds = 0.0;
};

struct AblationTable {
    std::vector<RowResult> rows;
    const RowResult* find(const std::string& name) const;
};

nlohmann::json to_json(const AblationTable& t);
std::string render_table(const AblationTable& t);

/// Trains every row on shared data and seeds; writes ablation.json and ablation.txt.
AblationTable run_ablation(const AblationSpec& spec, const std::filesystem::path& out_dir);

double median(std::vector<double> v);

} // namespace usersod::harness
