#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "usersod/core.hpp"
#include "usersod/nn/autograd.hpp"
#include "usersod/nn/params.hpp"

namespace usersod::model {

using nn::Tensor;
using nn::Var;

enum class Mode { base, usersal, usersal_plus };
enum class TsnVariant { linear, conv, vit_attention, swin_attention };

std::string to_string(Mode m);
std::string to_string(TsnVariant v);
Mode mode_from_string(const std::string& s);
TsnVariant tsn_from_string(const std::string& s);

struct ModelConfig {
    Mode mode = Mode::usersal_plus;
    int input_size = kDefaultResolution;
    int levels = 5;
    std::vector<int> channel_widths = {8, 16, 16, 16, 16};
    int decoder_width = 8;
    bool freeze_esm = true;
    TsnVariant tsn_variant = TsnVariant::swin_attention;
    /// One TSN shared by every scale; needs uniform channel widths.
    bool tsn_shared = false;
    int swin_window = 6;
    int attention_dim = 8;
    int attention_heads = 1;
    int embed_dim = 16;
    /// ASA (and its appearance loss) at every scale; otherwise only at the deepest one.
    bool multi_scale = true;
    /// "map": one normalization group over the whole feature map; "position": per-position over channels.
    std::string norm = "map";
    std::vector<std::string> vocabulary; // index 0 is the unknown token
    uint64_t init_seed = 1;

    void validate() const;
    bool asa_at(int level) const { return mode == Mode::usersal_plus && (multi_scale || level == levels - 1); }
    /// Fields that must match for weights to be interchangeable.
    bool architecture_equals(const ModelConfig& o) const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline const std::string kUnknownToken = "<unk>";

/// Lowercase, split on whitespace and punctuation.
std::vector<std::string> tokenize(const std::string& text);
/// Sorted unique tokens of the corpus, prefixed with the unknown token.
std::vector<std::string> build_vocabulary(const std::vector<std::string>& corpus);

template <class T>
using Pyramid = std::vector<Var<T>>;

/// Per-level prompt vectors; `zero` marks the zero-padded (no need) state.
template <class T>
struct PromptStack {
    std::vector<Var<T>> levels;
    bool zero = true;
};

template <class T>
struct ForwardResult {
    Var<T> saliency; // [1,H,W], values in [0,1]
    Pyramid<T> features; // F' (equals F outside usersal_plus)
    std::vector<Var<T>> similarity; // S_n for levels running ASA, else null
    Pyramid<T> encoder_features; // F
    std::vector<Var<T>> residual; // F' - F, the attention branch; null where ASA is off
};

template <class T>
struct AsaOutput {
    Pyramid<T> fused;      // F'
    std::vector<Var<T>> similarity; // S
    Pyramid<T> gated;      // IF'
    std::vector<Var<T>> residual; // projected attention output added to F
};

template <class T>
class UserSalModel {
  public:
    explicit UserSalModel(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }

    static Var<T> image_var(const ImageTensor& image);

    PromptStack<T> zero_prompt() const;
    PromptStack<T> encode_command(const Need& need) const;
    std::vector<int> token_ids(const std::string& text) const;

    /// F: frozen backbone with per-level prompt injection.
    Pyramid<T> esm_encode(const Var<T>& image, const PromptStack<T>& prompts) const;
    /// IF: the same backbone weights, no injection.
    Pyramid<T> sme_encode(const Var<T>& image) const;
    AsaOutput<T> asa(const Pyramid<T>& features, const Pyramid<T>& image_features) const;
    Var<T> decode(const Pyramid<T>& features) const;

    ForwardResult<T> forward(const ImageTensor& image, const Need& need) const;
    /// Conventional SOD: the text input is zero-padded.
    ForwardResult<T> forward_conventional(const ImageTensor& image) const;

    /// Applies freeze_esm: backbone parameters stop receiving gradients.
    void apply_freezing();
    /// Prefix of the frozen backbone parameters (shared by ESM, SME and SME*).
    static const std::string& backbone_prefix();

    SaliencyMap predict(const ImageTensor& image, const Need& need) const;

  private:
    Var<T> p(const std::string& name) const { return params_.get(name); }
    Var<T> tsn(int level, const Var<T>& x) const;
    Var<T> self_attention(const std::string& prefix, const Var<T>& x, int window) const;
    std::string tsn_prefix(int level) const;
    Var<T> encoder_level(int level, const Var<T>& x, bool detached = false) const;
    Var<T> inject(int level, const Var<T>& x, const Var<T>& prompt) const;

    ModelConfig config_;
    nn::ParamStore<T> params_;
};

template <class T>
Tensor<T> to_tensor(const ImageTensor& image);
template <class T>
Tensor<T> to_tensor(const BinaryMask& mask);
template <class T>
SaliencyMap to_saliency(const Tensor<T>& t);

/// Checkpoint directory: config.json (config echo plus metadata) and params.bin.
void save_checkpoint(const UserSalModel<float>& model, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object());
UserSalModel<float> load_checkpoint(const std::filesystem::path& dir);
nlohmann::json read_checkpoint_metadata(const std::filesystem::path& dir);
/// Copies backbone and decoder weights from a pretrained base checkpoint into `model`.
void load_pretrained_esm(UserSalModel<float>& model, const std::filesystem::path& dir);

} // namespace usersod::model
