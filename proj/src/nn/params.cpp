#include "usersod/nn/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <openssl/evp.h>

namespace usersod::nn {

template <class T>
Var<T> ParamStore<T>::add(const std::string& name, Tensor<T> init, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto v = leaf(std::move(init), trainable);
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
}

template <class T>
Var<T> ParamStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
}

template <class T>
void ParamStore<T>::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, v] : entries_)
        if (name.rfind(prefix, 0) == 0) v->requires_grad = trainable;
}

template <class T>
std::vector<std::pair<std::string, Var<T>>> ParamStore<T>::trainable() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& e : entries_)
        if (e.second->requires_grad) out.push_back(e);
    return out;
}

template <class T>
void ParamStore<T>::zero_grad() {
    for (auto& [name, v] : entries_) v->grad = Tensor<T>();
}

template <class T>
size_t ParamStore<T>::count(bool trainable_only) const {
    size_t n = 0;
    for (const auto& [name, v] : entries_)
        if (!trainable_only || v->requires_grad) n += v->value.numel();
    return n;
}

template <class T>
std::string ParamStore<T>::hash(const std::string& prefix) const {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto& [name, v] : entries_) {
        if (name.rfind(prefix, 0) != 0) continue;
        EVP_DigestUpdate(ctx, name.data(), name.size());
        EVP_DigestUpdate(ctx, v->value.shape.data(), v->value.shape.size() * sizeof(int));
        EVP_DigestUpdate(ctx, v->value.data.data(), v->value.data.size() * sizeof(T));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

namespace {
template <class V>
void put(std::ofstream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V take(std::ifstream& in, const std::filesystem::path& file) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw std::runtime_error("truncated parameter archive " + file.string());
    return v;
}
} // namespace

template <class T>
void ParamStore<T>::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    put<uint32_t>(out, static_cast<uint32_t>(entries_.size()));
    for (const auto& [name, v] : entries_) {
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(out, static_cast<uint32_t>(v->value.rank()));
        for (int d : v->value.shape) put<int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(v->value.data.data()), static_cast<std::streamsize>(v->value.numel() * sizeof(T)));
    }
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

template <class T>
void ParamStore<T>::load(const std::filesystem::path& file, bool require_all, const std::string& prefix) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + file.string());
    const auto n = take<uint32_t>(in, file);
    std::map<std::string, bool> seen;
    for (uint32_t i = 0; i < n; ++i) {
        const auto len = take<uint32_t>(in, file);
        std::string name(len, '\0');
        in.read(name.data(), len);
        const auto rank = take<uint32_t>(in, file);
        Shape shape(rank);
        for (auto& d : shape) d = take<int32_t>(in, file);
        std::vector<T> values(shape_numel(shape));
        in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
        if (!in) throw std::runtime_error("truncated parameter archive " + file.string());
        if (name.rfind(prefix, 0) != 0 || !contains(name)) continue;
        auto v = get(name);
        if (v->value.shape != shape)
            throw std::runtime_error("parameter " + name + " has shape " + shape_str(shape) + " in archive, model expects " +
                                     shape_str(v->value.shape));
        v->value.data = std::move(values);
        seen[name] = true;
    }
    if (require_all)
        for (const auto& [name, v] : entries_)
            if (name.rfind(prefix, 0) == 0 && !seen.count(name))
                throw std::runtime_error("parameter " + name + " missing from " + file.string());
}

template <class T>
Adam<T>::Adam(std::vector<std::pair<std::string, Var<T>>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, v] : params_) {
        m_.emplace_back(v->value.numel(), 0.0);
        v_.emplace_back(v->value.numel(), 0.0);
    }
}

template <class T>
void Adam<T>::step(double grad_scale) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        if (p->grad.shape != p->value.shape) continue; // no gradient reached this parameter
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < p->value.numel(); ++j) {
            const double g = static_cast<double>(p->grad.data[j]) * grad_scale;
            m[j] = beta1_ * m[j] + (1 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1 - beta2_) * g * g;
            const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
            p->value.data[j] = static_cast<T>(static_cast<double>(p->value.data[j]) - update);
        }
    }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;

} // namespace usersod::nn
