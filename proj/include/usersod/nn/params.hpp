#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "usersod/nn/autograd.hpp"

namespace usersod::nn {

/// Named, ordered parameter collection. Insertion order is the serialization order.
template <class T>
class ParamStore {
  public:
    Var<T> add(const std::string& name, Tensor<T> init, bool trainable);
    Var<T> get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    /// Marks every parameter whose name starts with `prefix`.
    void set_trainable(const std::string& prefix, bool trainable);
    std::vector<std::pair<std::string, Var<T>>> trainable() const;
    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

    void zero_grad();
    size_t count(bool trainable_only = false) const;

    /// SHA-256 over names, shapes and raw bytes of parameters whose name starts with `prefix`.
    std::string hash(const std::string& prefix = "") const;

    /// Flat archive: per entry u32 name length, name, u32 rank, i32 dims, raw values.
    void save(const std::filesystem::path& file) const;
    /// Copies values for matching names; throws on shape mismatch or (when `require_all`) missing names.
    void load(const std::filesystem::path& file, bool require_all = true, const std::string& prefix = "");

  private:
    std::vector<std::pair<std::string, Var<T>>> entries_;
    std::map<std::string, size_t> index_;
};

/// Adam with bias correction.
template <class T>
class Adam {
  public:
    Adam(std::vector<std::pair<std::string, Var<T>>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    /// Applies one update using the accumulated gradients scaled by `grad_scale`.
    void step(double grad_scale = 1.0);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    long steps() const { return t_; }

  private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

} // namespace usersod::nn
