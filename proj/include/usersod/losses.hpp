#pragma once

#include <vector>

#include "usersod/core.hpp"
#include "usersod/model.hpp"

namespace usersod::losses {

using model::Pyramid;
using model::UserSalModel;
using nn::Tensor;
using nn::Var;

inline constexpr double kLogEps = 1e-12;

struct LossReport {
    double mse = 0.0;
    std::vector<double> al_per_level;
    double total = 0.0;
};

struct LossConfig {
    /// Off for the "+ASA without AL" ablation row.
    bool appearance_loss = true;
    /// KL(prediction || target) instead of KL(target || prediction).
    bool reverse_kl = false;
    /// When false, AL reaches the encoder path only through the attention branch; the residual F is held fixed.
    bool al_through_residual = true;
    double eps = kLogEps;
};

double mse_loss(const SaliencyMap& pred, const BinaryMask& gt);

/// SME*(I ⊙ GT): background zeroed, then encoded with the frozen backbone weights. No gradients.
template <class T>
std::vector<Tensor<T>> appearance_target(const UserSalModel<T>& model, const ImageTensor& image, const BinaryMask& gt);

/// Mean over channels of KL(softmax(target_c) || softmax(pred_c)).
double appearance_loss_level(const Tensor<double>& target, const Tensor<double>& fprime, double eps = kLogEps,
                             bool reverse = false);

template <class T>
struct LossGraph {
    LossReport report;
    Var<T> total; // differentiable root
    model::ForwardResult<T> forward;
};

/// total = Σ_n AL_n + MSE. AL_n is 0 outside usersal_plus and at scales without ASA.
template <class T>
LossGraph<T> total_loss(const UserSalModel<T>& model, const ImageTensor& image, const Need& need, const BinaryMask& gt,
                        const LossConfig& config = {});

} // namespace usersod::losses
