#pragma once

// Minimal reverse-mode autodiff over dense CHW / row-major tensors.
// Graphs are built per forward pass; parameters are long-lived leaf nodes.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace usersod::nn {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape)) throw ShapeError("tensor data does not match shape " + shape_str(shape));
    }

    size_t numel() const { return data.size(); }
    int dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }
    bool operator==(const Tensor&) const = default;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // allocated lazily
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
        return grad;
    }
    const Shape& shape() const { return value.shape; }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> t) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(t);
    return n;
}

template <class T>
Var<T> leaf(Tensor<T> t, bool requires_grad) {
    auto n = constant(std::move(t));
    n->requires_grad = requires_grad;
    return n;
}

/// Seeds d(root)/d(root) = 1 and accumulates gradients into every reachable node that requires them.
template <class T>
void backward(const Var<T>& root);

namespace ops {

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T s);
/// x[C,H,W] * s[1,H,W], broadcast over channels.
template <class T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& s);
template <class T>
Var<T> relu(const Var<T>& x);
template <class T>
Var<T> sigmoid(const Var<T>& x);
template <class T>
Var<T> tanh(const Var<T>& x);
/// Normalizes each of `groups` consecutive channel blocks over channels and positions,
/// then applies gamma[C] * x + beta[C].
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5));
/// Normalizes every position over its channels (layer norm per token), then gamma[C] * x + beta[C].
template <class T>
Var<T> position_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
/// Bilinear resize of [C,H,W] with half-pixel centers (align_corners = false).
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w);
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);
/// Channels [begin, begin + count) of x along dim 0.
template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int count);
/// v[C] -> [C,H,W]
template <class T>
Var<T> broadcast_spatial(const Var<T>& v, int h, int w);
/// w[O,D] x[D] + b[O]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// Mean of the selected rows of table[V,D].
template <class T>
Var<T> embedding_mean(const Var<T>& table, std::span<const int> ids);
/// Cosine similarity over channels at every position: [C,H,W] x [C,H,W] -> [1,H,W].
/// Zero-norm positions yield 0; results are clamped into [-1,1].
template <class T>
Var<T> cosine_positions(const Var<T>& a, const Var<T>& b);
/// Scaled dot-product attention in channel-major layout.
/// q[d,n], k[d,m], v[dv,m] -> [dv,n]. With group > 0 (requires n == m), positions are
/// split into consecutive blocks of `group` and attend only within their block.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int group = 0);
/// Column gather over the flattened spatial axis: out[c, i] = x[c, index[i]].
template <class T>
Var<T> gather_positions(const Var<T>& x, std::vector<int> index);
template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// mean((pred - target)^2)
template <class T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target);
/// Mean over channels of KL(softmax(target_c) || softmax(pred_c)), softmax over spatial positions.
/// `reverse` swaps the arguments: KL(softmax(pred_c) || softmax(target_c)).
template <class T>
Var<T> spatial_kl(const Tensor<T>& target, const Var<T>& pred, T eps, bool reverse = false);
/// Sum of scalar-shaped ([1]) nodes.
template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& xs);

} // namespace ops

/// Numerical helpers used by both the ops and their independent checks.
template <class T>
void softmax_inplace(std::span<T> row);

} // namespace usersod::nn
