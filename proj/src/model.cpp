#include "usersod/model.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "usersod/rng.hpp"

namespace usersod::model {

using nn::Shape;
namespace ops = nn::ops;

std::string to_string(Mode m) {
    switch (m) {
    case Mode::base: return "base";
    case Mode::usersal: return "usersal";
    case Mode::usersal_plus: return "usersal_plus";
    }
    return "?";
}

std::string to_string(TsnVariant v) {
    switch (v) {
    case TsnVariant::linear: return "linear";
    case TsnVariant::conv: return "conv";
    case TsnVariant::vit_attention: return "vit_attention";
    case TsnVariant::swin_attention: return "swin_attention";
    }
    return "?";
}

Mode mode_from_string(const std::string& s) {
    for (Mode m : {Mode::base, Mode::usersal, Mode::usersal_plus})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown model mode '" + s + "'");
}

TsnVariant tsn_from_string(const std::string& s) {
    for (TsnVariant v : {TsnVariant::linear, TsnVariant::conv, TsnVariant::vit_attention, TsnVariant::swin_attention})
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown TSN variant '" + s + "'");
}

void ModelConfig::validate() const {
    if (levels < 1) throw std::invalid_argument("levels must be >= 1");
    if (static_cast<int>(channel_widths.size()) != levels)
        throw std::invalid_argument("channel_widths must list one width per level");
    if (input_size % (1 << levels) != 0)
        throw std::invalid_argument("input_size must be divisible by 2^levels");
    for (int c : channel_widths)
        if (c < 1) throw std::invalid_argument("channel widths must be positive");
    if (decoder_width < 1 || embed_dim < 1 || attention_dim < 1 || attention_heads < 1)
        throw std::invalid_argument("widths must be positive");
    if (attention_dim % attention_heads != 0) throw std::invalid_argument("attention_dim must divide into heads");
    for (int c : channel_widths)
        if (c % attention_heads != 0) throw std::invalid_argument("channel widths must divide into heads");
    if (swin_window < 1) throw std::invalid_argument("swin_window must be >= 1");
    if (norm != "map" && norm != "position") throw std::invalid_argument("norm must be 'map' or 'position'");
    if (tsn_shared && std::adjacent_find(channel_widths.begin(), channel_widths.end(), std::not_equal_to<>()) !=
                          channel_widths.end())
        throw std::invalid_argument("a shared TSN needs equal channel widths");
    if (mode != Mode::base && (vocabulary.empty() || vocabulary.front() != kUnknownToken))
        throw std::invalid_argument("vocabulary must start with the unknown token");
}

bool ModelConfig::architecture_equals(const ModelConfig& o) const {
    return mode == o.mode && input_size == o.input_size && levels == o.levels && channel_widths == o.channel_widths &&
           decoder_width == o.decoder_width && tsn_variant == o.tsn_variant && tsn_shared == o.tsn_shared &&
           swin_window == o.swin_window && attention_dim == o.attention_dim &&
           attention_heads == o.attention_heads && embed_dim == o.embed_dim && multi_scale == o.multi_scale &&
           norm == o.norm && vocabulary == o.vocabulary;
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"input_size", c.input_size},
            {"levels", c.levels},
            {"channel_widths", c.channel_widths},
            {"decoder_width", c.decoder_width},
            {"freeze_esm", c.freeze_esm},
            {"tsn_variant", to_string(c.tsn_variant)},
            {"tsn_shared", c.tsn_shared},
            {"swin_window", c.swin_window},
            {"attention_dim", c.attention_dim},
            {"attention_heads", c.attention_heads},
            {"embed_dim", c.embed_dim},
            {"multi_scale", c.multi_scale},
            {"norm", c.norm},
            {"vocabulary", c.vocabulary},
            {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"mode",          "input_size",    "levels",      "channel_widths",
                                                "decoder_width", "freeze_esm",    "tsn_variant", "tsn_shared",
                                                "swin_window",   "attention_dim", "attention_heads", "embed_dim",
                                                "multi_scale",   "norm",          "vocabulary",    "init_seed"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw std::invalid_argument("unknown model config key '" + k + "'");
    ModelConfig c;
    if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("input_size")) c.input_size = j.at("input_size").get<int>();
    if (j.contains("levels")) c.levels = j.at("levels").get<int>();
    if (j.contains("channel_widths")) c.channel_widths = j.at("channel_widths").get<std::vector<int>>();
    if (j.contains("decoder_width")) c.decoder_width = j.at("decoder_width").get<int>();
    if (j.contains("freeze_esm")) c.freeze_esm = j.at("freeze_esm").get<bool>();
    if (j.contains("tsn_variant")) c.tsn_variant = tsn_from_string(j.at("tsn_variant").get<std::string>());
    if (j.contains("tsn_shared")) c.tsn_shared = j.at("tsn_shared").get<bool>();
    if (j.contains("swin_window")) c.swin_window = j.at("swin_window").get<int>();
    if (j.contains("attention_dim")) c.attention_dim = j.at("attention_dim").get<int>();
    if (j.contains("attention_heads")) c.attention_heads = j.at("attention_heads").get<int>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int>();
    if (j.contains("multi_scale")) c.multi_scale = j.at("multi_scale").get<bool>();
    if (j.contains("norm")) c.norm = j.at("norm").get<std::string>();
    if (j.contains("vocabulary")) c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (j.contains("init_seed")) c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<std::string> build_vocabulary(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& text : corpus)
        for (auto& t : tokenize(text)) words.insert(std::move(t));
    words.erase(kUnknownToken);
    std::vector<std::string> vocab{kUnknownToken};
    vocab.insert(vocab.end(), words.begin(), words.end());
    return vocab;
}

namespace {

// Neither form removes a per-channel prompt offset entirely, unlike per-channel instance norm.
template <class T>
Var<T> norm(const std::string& kind, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    return kind == "position" ? ops::position_norm(x, gamma, beta) : ops::group_norm(x, gamma, beta, 1);
}

template <class T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

// He-uniform for ReLU convolutions.
template <class T>
Tensor<T> he_conv(Rng& rng, int out, int in, int k) {
    return uniform_tensor<T>(rng, {out, in, k, k}, std::sqrt(6.0 / (in * k * k)));
}

template <class T>
Tensor<T> xavier(Rng& rng, Shape shape, int fan_in, int fan_out) {
    return uniform_tensor<T>(rng, std::move(shape), std::sqrt(6.0 / (fan_in + fan_out)));
}

template <class T>
Tensor<T> identity_conv(int c, int k) {
    Tensor<T> t({c, c, k, k});
    for (int i = 0; i < c; ++i) t.data[((static_cast<size_t>(i) * c + i) * k + k / 2) * k + k / 2] = T(1);
    return t;
}

std::string lvl(const std::string& prefix, int level, const std::string& suffix) {
    return prefix + std::to_string(level) + "." + suffix;
}

} // namespace

template <class T>
const std::string& UserSalModel<T>::backbone_prefix() {
    static const std::string prefix = "esm.";
    return prefix;
}

template <class T>
UserSalModel<T>::UserSalModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(splitmix64(config_.init_seed));
    const auto& C = config_.channel_widths;
    const int N = config_.levels;
    auto add_norm = [&](const std::string& prefix, int channels) {
        Tensor<T> g({channels});
        std::fill(g.data.begin(), g.data.end(), T(1));
        params_.add(prefix + ".g", std::move(g), true);
        params_.add(prefix + ".b", Tensor<T>({channels}), true);
    };

    for (int n = 0; n < N; ++n) {
        const int in = n == 0 ? 3 : C[n - 1];
        params_.add(lvl("esm.enc.", n, "conv1.w"), he_conv<T>(rng, C[n], in, 3), true);
        params_.add(lvl("esm.enc.", n, "conv1.b"), Tensor<T>({C[n]}), true);
        add_norm(lvl("esm.enc.", n, "norm1"), C[n]);
        params_.add(lvl("esm.enc.", n, "conv2.w"), he_conv<T>(rng, C[n], C[n], 3), true);
        params_.add(lvl("esm.enc.", n, "conv2.b"), Tensor<T>({C[n]}), true);
        add_norm(lvl("esm.enc.", n, "norm2"), C[n]);
    }

    const int D = config_.decoder_width;
    for (int n = N - 1; n >= 0; --n) {
        const int in = C[n] + (n == N - 1 ? 0 : D);
        params_.add(lvl("decoder.", n, "w"), he_conv<T>(rng, D, in, 3), true);
        params_.add(lvl("decoder.", n, "b"), Tensor<T>({D}), true);
        add_norm(lvl("decoder.", n, "norm"), D);
    }
    params_.add("decoder.head.w", xavier<T>(rng, {1, D, 3, 3}, D * 9, 9), true);
    params_.add("decoder.head.b", Tensor<T>({1}), true);

    if (config_.mode != Mode::base) {
        const int V = static_cast<int>(config_.vocabulary.size());
        const int E = config_.embed_dim;
        Tensor<T> embed({V, E});
        for (auto& v : embed.data) v = static_cast<T>(0.5 * rng.normal());
        params_.add("text.embed", std::move(embed), true);
        params_.add("text.hidden.w", xavier<T>(rng, {E, E}, E, E), true);
        params_.add("text.hidden.b", Tensor<T>({E}), true);
        for (int n = 0; n < N; ++n) {
            params_.add(lvl("text.proj.", n, "w"), xavier<T>(rng, {C[n], E}, E, C[n]), true);
            params_.add(lvl("text.proj.", n, "b"), Tensor<T>({C[n]}), true);
            // Identity on the image half, zero on the prompt half: injection starts as a no-op.
            Tensor<T> w({C[n], 2 * C[n], 1, 1});
            for (int c = 0; c < C[n]; ++c) w.data[static_cast<size_t>(c) * 2 * C[n] + c] = T(1);
            params_.add(lvl("inject.", n, "w"), std::move(w), true);
            params_.add(lvl("inject.", n, "b"), Tensor<T>({C[n]}), true);
        }
    }

    if (config_.mode == Mode::usersal_plus) {
        const int A = config_.attention_dim;
        auto add_attention = [&](const std::string& prefix, int c) {
            params_.add(prefix + "q.w", xavier<T>(rng, {A, c, 1, 1}, c, A), true);
            params_.add(prefix + "k.w", xavier<T>(rng, {A, c, 1, 1}, c, A), true);
            params_.add(prefix + "v.w", xavier<T>(rng, {c, c, 1, 1}, c, c), true);
            params_.add(prefix + "o.w", Tensor<T>({c, c, 1, 1}), true);
            params_.add(prefix + "o.b", Tensor<T>({c}), true);
        };
        auto add_tsn = [&](const std::string& prefix, int c) {
            switch (config_.tsn_variant) {
            case TsnVariant::linear:
                params_.add(prefix + "w", identity_conv<T>(c, 1), true);
                params_.add(prefix + "b", Tensor<T>({c}), true);
                break;
            case TsnVariant::conv:
                params_.add(prefix + "w", identity_conv<T>(c, 3), true);
                params_.add(prefix + "b", Tensor<T>({c}), true);
                break;
            case TsnVariant::vit_attention:
            case TsnVariant::swin_attention: add_attention(prefix, c); break;
            }
        };
        std::set<std::string> made;
        for (int n = 0; n < N; ++n) {
            if (!config_.asa_at(n)) continue;
            const auto prefix = tsn_prefix(n);
            if (made.insert(prefix).second) add_tsn(prefix, C[n]);
            add_attention(lvl("asa.", n, "aia."), C[n]);
        }
    }
    apply_freezing();
}

template <class T>
void UserSalModel<T>::apply_freezing() {
    params_.set_trainable(backbone_prefix(), !config_.freeze_esm);
}

template <class T>
std::string UserSalModel<T>::tsn_prefix(int level) const {
    return config_.tsn_shared ? std::string("asa.tsn.") : lvl("asa.", level, "tsn.");
}

template <class T>
Var<T> UserSalModel<T>::image_var(const ImageTensor& image) {
    return nn::constant(to_tensor<T>(image));
}

template <class T>
PromptStack<T> UserSalModel<T>::zero_prompt() const {
    PromptStack<T> s;
    s.zero = true;
    for (int c : config_.channel_widths) s.levels.push_back(nn::constant(Tensor<T>({c})));
    return s;
}

template <class T>
std::vector<int> UserSalModel<T>::token_ids(const std::string& text) const {
    const auto& vocab = config_.vocabulary;
    std::vector<int> ids;
    for (const auto& tok : tokenize(text)) {
        auto it = std::lower_bound(vocab.begin() + 1, vocab.end(), tok);
        ids.push_back(it != vocab.end() && *it == tok ? static_cast<int>(it - vocab.begin()) : 0);
    }
    if (ids.empty()) ids.push_back(0);
    return ids;
}

template <class T>
PromptStack<T> UserSalModel<T>::encode_command(const Need& need) const {
    if (is_zero_need(need) || config_.mode == Mode::base) return zero_prompt();
    const auto ids = token_ids(std::get<NeedCommand>(need).text);
    auto e = ops::embedding_mean(p("text.embed"), std::span<const int>(ids));
    auto h = ops::tanh(ops::linear(e, p("text.hidden.w"), p("text.hidden.b")));
    PromptStack<T> s;
    s.zero = false;
    for (int n = 0; n < config_.levels; ++n)
        s.levels.push_back(ops::linear(h, p(lvl("text.proj.", n, "w")), p(lvl("text.proj.", n, "b"))));
    return s;
}

template <class T>
Var<T> UserSalModel<T>::encoder_level(int level, const Var<T>& x, bool detached) const {
    auto w = [&](const std::string& name) {
        auto v = p(lvl("esm.enc.", level, name));
        return detached ? nn::constant(v->value) : v;
    };
    auto h = ops::relu(norm(config_.norm, ops::conv2d(x, w("conv1.w"), w("conv1.b"), 2, 1), w("norm1.g"), w("norm1.b")));
    return ops::relu(norm(config_.norm, ops::conv2d(h, w("conv2.w"), w("conv2.b"), 1, 1), w("norm2.g"), w("norm2.b")));
}

template <class T>
Var<T> UserSalModel<T>::inject(int level, const Var<T>& x, const Var<T>& prompt) const {
    auto pm = ops::broadcast_spatial(prompt, x->value.dim(1), x->value.dim(2));
    auto cat = ops::concat_channels<T>({x, pm});
    return ops::conv2d(cat, p(lvl("inject.", level, "w")), p(lvl("inject.", level, "b")), 1, 0);
}

template <class T>
Pyramid<T> UserSalModel<T>::esm_encode(const Var<T>& image, const PromptStack<T>& prompts) const {
    Pyramid<T> out;
    Var<T> x = image;
    for (int n = 0; n < config_.levels; ++n) {
        x = encoder_level(n, x);
        if (config_.mode != Mode::base) x = inject(n, x, prompts.levels.at(n));
        out.push_back(x);
    }
    return out;
}

template <class T>
Pyramid<T> UserSalModel<T>::sme_encode(const Var<T>& image) const {
    // SME never trains: with an unfrozen backbone it reads detached copies of the weights.
    Pyramid<T> out;
    Var<T> x = image;
    for (int n = 0; n < config_.levels; ++n) {
        x = encoder_level(n, x, !config_.freeze_esm);
        out.push_back(x);
    }
    return out;
}

template <class T>
Var<T> UserSalModel<T>::self_attention(const std::string& prefix, const Var<T>& x, int window) const {
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    const int heads = config_.attention_heads;
    const int A = config_.attention_dim;
    auto q = ops::conv2d<T>(x, p(prefix + "q.w"), nullptr, 1, 0);
    auto k = ops::conv2d<T>(x, p(prefix + "k.w"), nullptr, 1, 0);
    auto v = ops::conv2d<T>(x, p(prefix + "v.w"), nullptr, 1, 0);

    int group = 0;
    std::vector<int> order, inverse;
    if (window > 0 && window < H && H % window == 0 && W % window == 0) {
        // Shifted windows: cyclic shift by half a window, then window-major token order.
        const int s = window / 2;
        for (int wy = 0; wy < H / window; ++wy)
            for (int wx = 0; wx < W / window; ++wx)
                for (int ly = 0; ly < window; ++ly)
                    for (int lx = 0; lx < window; ++lx)
                        order.push_back(((wy * window + ly + s) % H) * W + (wx * window + lx + s) % W);
        inverse.resize(order.size());
        for (size_t i = 0; i < order.size(); ++i) inverse[order[i]] = static_cast<int>(i);
        group = window * window;
        q = ops::gather_positions(q, order);
        k = ops::gather_positions(k, order);
        v = ops::gather_positions(v, order);
    }

    std::vector<Var<T>> outs;
    for (int h = 0; h < heads; ++h) {
        auto qh = ops::slice_channels(q, h * (A / heads), A / heads);
        auto kh = ops::slice_channels(k, h * (A / heads), A / heads);
        auto vh = ops::slice_channels(v, h * (C / heads), C / heads);
        outs.push_back(ops::attention(qh, kh, vh, group));
    }
    auto att = heads == 1 ? outs.front() : ops::concat_channels(outs);
    if (!inverse.empty()) att = ops::gather_positions(att, inverse);
    att = ops::reshape(att, {C, H, W});
    return ops::add(x, ops::conv2d(att, p(prefix + "o.w"), p(prefix + "o.b"), 1, 0));
}

template <class T>
Var<T> UserSalModel<T>::tsn(int level, const Var<T>& x) const {
    const auto prefix = tsn_prefix(level);
    switch (config_.tsn_variant) {
    case TsnVariant::linear: return ops::conv2d(x, p(prefix + "w"), p(prefix + "b"), 1, 0);
    case TsnVariant::conv: return ops::conv2d(x, p(prefix + "w"), p(prefix + "b"), 1, 1);
    case TsnVariant::vit_attention: return self_attention(prefix, x, 0);
    case TsnVariant::swin_attention:
        return self_attention(prefix, x, std::min(config_.swin_window, x->value.dim(1)));
    }
    throw std::logic_error("unreachable TSN variant");
}

template <class T>
AsaOutput<T> UserSalModel<T>::asa(const Pyramid<T>& features, const Pyramid<T>& image_features) const {
    AsaOutput<T> out;
    out.fused = features;
    out.similarity.assign(features.size(), nullptr);
    out.gated.assign(features.size(), nullptr);
    out.residual.assign(features.size(), nullptr);
    for (int n = 0; n < config_.levels; ++n) {
        if (!config_.asa_at(n)) continue;
        const auto& F = features.at(n);
        const auto& IF = image_features.at(n);
        auto S = ops::cosine_positions(tsn(n, F), tsn(n, IF));
        auto gated = ops::mul_spatial(IF, S);

        const int C = F->value.dim(0), H = F->value.dim(1), W = F->value.dim(2);
        const int heads = config_.attention_heads;
        const int A = config_.attention_dim;
        const auto prefix = lvl("asa.", n, "aia.");
        auto q = ops::conv2d<T>(F, p(prefix + "q.w"), nullptr, 1, 0);
        auto k = ops::conv2d<T>(gated, p(prefix + "k.w"), nullptr, 1, 0);
        auto v = ops::conv2d<T>(gated, p(prefix + "v.w"), nullptr, 1, 0);
        std::vector<Var<T>> outs;
        for (int h = 0; h < heads; ++h)
            outs.push_back(ops::attention(ops::slice_channels(q, h * (A / heads), A / heads),
                                          ops::slice_channels(k, h * (A / heads), A / heads),
                                          ops::slice_channels(v, h * (C / heads), C / heads)));
        auto att = ops::reshape(heads == 1 ? outs.front() : ops::concat_channels(outs), {C, H, W});
        out.residual[n] = ops::conv2d(att, p(prefix + "o.w"), p(prefix + "o.b"), 1, 0);
        out.fused[n] = ops::add(F, out.residual[n]);
        out.similarity[n] = S;
        out.gated[n] = gated;
    }
    return out;
}

template <class T>
Var<T> UserSalModel<T>::decode(const Pyramid<T>& features) const {
    const int N = config_.levels;
    Var<T> top;
    for (int n = N - 1; n >= 0; --n) {
        Var<T> x = features.at(n);
        if (top) {
            auto up = ops::upsample_bilinear(top, x->value.dim(1), x->value.dim(2));
            x = ops::concat_channels<T>({x, up});
        }
        top = ops::relu(norm(config_.norm, ops::conv2d(x, p(lvl("decoder.", n, "w")), p(lvl("decoder.", n, "b")), 1, 1),
                                           p(lvl("decoder.", n, "norm.g")), p(lvl("decoder.", n, "norm.b"))));
    }
    auto logits = ops::conv2d(top, p("decoder.head.w"), p("decoder.head.b"), 1, 1);
    auto sal = ops::sigmoid(logits);
    return ops::upsample_bilinear(sal, config_.input_size, config_.input_size);
}

template <class T>
ForwardResult<T> UserSalModel<T>::forward(const ImageTensor& image, const Need& need) const {
    if (image.height != config_.input_size || image.width != config_.input_size)
        throw std::invalid_argument("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                    ", model expects " + std::to_string(config_.input_size));
    auto img = image_var(image);
    auto F = esm_encode(img, encode_command(need));
    ForwardResult<T> r;
    r.similarity.assign(F.size(), nullptr);
    r.residual.assign(F.size(), nullptr);
    r.encoder_features = F;
    if (config_.mode == Mode::usersal_plus) {
        auto a = asa(F, sme_encode(img));
        r.features = std::move(a.fused);
        r.similarity = std::move(a.similarity);
        r.residual = std::move(a.residual);
    } else {
        r.features = std::move(F);
    }
    r.saliency = decode(r.features);
    return r;
}

template <class T>
ForwardResult<T> UserSalModel<T>::forward_conventional(const ImageTensor& image) const {
    return forward(image, Need{ZeroNeed{}});
}

template <class T>
SaliencyMap UserSalModel<T>::predict(const ImageTensor& image, const Need& need) const {
    return to_saliency(forward(image, need).saliency->value);
}

template <class T>
Tensor<T> to_tensor(const ImageTensor& image) {
    Tensor<T> t({3, image.height, image.width});
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<T>(image.data[i]);
    return t;
}

template <class T>
Tensor<T> to_tensor(const BinaryMask& mask) {
    Tensor<T> t({1, mask.height, mask.width});
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<T>(mask.data[i]);
    return t;
}

template <class T>
SaliencyMap to_saliency(const Tensor<T>& t) {
    if (t.rank() != 3 || t.dim(0) != 1) throw nn::ShapeError("saliency tensor must be [1,H,W], got " + nn::shape_str(t.shape));
    SaliencyMap m(t.dim(1), t.dim(2));
    for (size_t i = 0; i < t.data.size(); ++i) m.data[i] = static_cast<double>(t.data[i]);
    return m;
}

template class UserSalModel<float>;
template class UserSalModel<double>;
template Tensor<float> to_tensor<float>(const ImageTensor&);
template Tensor<double> to_tensor<double>(const ImageTensor&);
template Tensor<float> to_tensor<float>(const BinaryMask&);
template Tensor<double> to_tensor<double>(const BinaryMask&);
template SaliencyMap to_saliency<float>(const Tensor<float>&);
template SaliencyMap to_saliency<double>(const Tensor<double>&);

void save_checkpoint(const UserSalModel<float>& model, const std::filesystem::path& dir,
                     const nlohmann::json& metadata) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = metadata;
    j["model"] = to_json(model.config());
    {
        std::ofstream f(dir / "config.json");
        if (!f) throw IoError("cannot write " + (dir / "config.json").string());
        f << j.dump(2) << "\n";
    }
    model.params().save(dir / "params.bin");
}

nlohmann::json read_checkpoint_metadata(const std::filesystem::path& dir) {
    std::ifstream f(dir / "config.json");
    if (!f) throw IoError("cannot read checkpoint config " + (dir / "config.json").string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "config.json").string() + ": " + e.what());
    }
}

UserSalModel<float> load_checkpoint(const std::filesystem::path& dir) {
    const auto meta = read_checkpoint_metadata(dir);
    if (!meta.contains("model")) throw IoError((dir / "config.json").string() + ": missing 'model'");
    UserSalModel<float> model(model_config_from_json(meta.at("model")));
    model.params().load(dir / "params.bin", true);
    return model;
}

void load_pretrained_esm(UserSalModel<float>& model, const std::filesystem::path& dir) {
    const auto meta = read_checkpoint_metadata(dir);
    const auto src = model_config_from_json(meta.at("model"));
    const auto& dst = model.config();
    if (src.channel_widths != dst.channel_widths || src.levels != dst.levels ||
        src.decoder_width != dst.decoder_width || src.input_size != dst.input_size ||
        src.norm != dst.norm)
        throw std::invalid_argument("pretrained backbone at " + dir.string() + " does not match the model architecture");
    model.params().load(dir / "params.bin", false, UserSalModel<float>::backbone_prefix());
    model.params().load(dir / "params.bin", false, "decoder.");
}

} // namespace usersod::model
