#include "usersod/losses.hpp"

#include <spdlog/spdlog.h>

namespace usersod::losses {

namespace ops = nn::ops;

double mse_loss(const SaliencyMap& pred, const BinaryMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("mse_loss: prediction and ground truth shapes differ");
    double acc = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - gt.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.data.size());
}

template <class T>
std::vector<Tensor<T>> appearance_target(const UserSalModel<T>& model, const ImageTensor& image, const BinaryMask& gt) {
    if (image.height != gt.height || image.width != gt.width)
        throw std::invalid_argument("appearance_target: image and mask shapes differ");
    if (gt.area() == 0) spdlog::warn("appearance_target: all-zero ground truth, target is the empty-image encoding");
    ImageTensor masked = image;
    const size_t plane = static_cast<size_t>(image.height) * image.width;
    for (int c = 0; c < 3; ++c)
        for (size_t i = 0; i < plane; ++i)
            if (!gt.data[i]) masked.data[c * plane + i] = 0.0f;
    auto pyr = model.sme_encode(UserSalModel<T>::image_var(masked));
    std::vector<Tensor<T>> out;
    for (auto& v : pyr) out.push_back(v->value);
    return out;
}

double appearance_loss_level(const Tensor<double>& target, const Tensor<double>& fprime, double eps, bool reverse) {
    return ops::spatial_kl<double>(target, nn::constant(fprime), eps, reverse)->value.data.at(0);
}

template <class T>
LossGraph<T> total_loss(const UserSalModel<T>& model, const ImageTensor& image, const Need& need, const BinaryMask& gt,
                        const LossConfig& config) {
    LossGraph<T> g;
    g.forward = model.forward(image, need);
    auto mse = ops::mse(g.forward.saliency, model::to_tensor<T>(gt));
    std::vector<Var<T>> terms{mse};
    g.report.mse = static_cast<double>(mse->value.data[0]);

    const auto& mc = model.config();
    g.report.al_per_level.assign(static_cast<size_t>(mc.levels), 0.0);
    if (config.appearance_loss && mc.mode == model::Mode::usersal_plus) {
        const auto targets = appearance_target(model, image, gt);
        for (int n = 0; n < mc.levels; ++n) {
            if (!mc.asa_at(n)) continue;
            auto fprime = g.forward.features[n];
            if (!config.al_through_residual)
                fprime = ops::add(nn::constant(g.forward.encoder_features[n]->value), g.forward.residual[n]);
            auto al = ops::spatial_kl(targets[n], fprime, static_cast<T>(config.eps), config.reverse_kl);
            g.report.al_per_level[n] = static_cast<double>(al->value.data[0]);
            terms.push_back(al);
        }
    }
    g.total = ops::sum_scalars(terms);
    g.report.total = static_cast<double>(g.total->value.data[0]);
    return g;
}

template std::vector<Tensor<float>> appearance_target(const UserSalModel<float>&, const ImageTensor&, const BinaryMask&);
template std::vector<Tensor<double>> appearance_target(const UserSalModel<double>&, const ImageTensor&,
                                                       const BinaryMask&);
template LossGraph<float> total_loss(const UserSalModel<float>&, const ImageTensor&, const Need&, const BinaryMask&,
                                     const LossConfig&);
template LossGraph<double> total_loss(const UserSalModel<double>&, const ImageTensor&, const Need&, const BinaryMask&,
                                      const LossConfig&);

} // namespace usersod::losses
