#include "usersod/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <Eigen/Core>

namespace usersod::nn {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

template <class T>
void backward(const Var<T>& root) {
    if (!root->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = root->grad_buffer();
    std::fill(g.data.begin(), g.data.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.shape == n->value.shape) n->backward_fn(*n);
    }
}

template <class T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) return;
    // Plain loops: Eigen peels unaligned heads with scalar code, so its rounding would depend on the address.
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (auto& v : row) sum += (v = std::exp(v - mx));
    for (auto& v : row) v /= sum;
}

namespace ops {
namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

template <class T>
bool wants(const Var<T>& v) {
    return v && v->requires_grad;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <class T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
    require(a->shape() == b->shape(),
            std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

struct ConvGeom {
    int ci, h, w, co, k, stride, pad, ho, wo;
    int kdim() const { return ci * k * k; }
    int npos() const { return ho * wo; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int np = g.npos();
    for (int c = 0; c < g.ci; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = cols + static_cast<size_t>((c * g.k + ky) * g.k + kx) * np;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
    const int np = g.npos();
    for (int c = 0; c < g.ci; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = cols + static_cast<size_t>((c * g.k + ky) * g.k + kx) * np;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = x + (static_cast<size_t>(c) * g.h + iy) * g.w;
                    const T* src = row + oy * g.wo;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

} // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    require(x->value.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x->shape()));
    require(w->value.rank() == 4 && w->value.dim(2) == w->value.dim(3), "conv2d: weight must be [Co,Ci,k,k]");
    require(w->value.dim(1) == x->value.dim(0), "conv2d: channel mismatch " + shape_str(x->shape()) + " vs weight " +
                                                     shape_str(w->shape()));
    ConvGeom g{x->value.dim(0), x->value.dim(1), x->value.dim(2), w->value.dim(0), w->value.dim(2), stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    require(g.ho > 0 && g.wo > 0, "conv2d: output would be empty");
    if (b) require(b->value.numel() == static_cast<size_t>(g.co), "conv2d: bias size mismatch");

    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(g.kdim()) * g.npos());
    im2col(x->value.data.data(), g, cols->data());
    Tensor<T> out({g.co, g.ho, g.wo});
    MapR<T> O(out.data.data(), g.co, g.npos());
    CMapR<T> W(w->value.data.data(), g.co, g.kdim());
    CMapR<T> C(cols->data(), g.kdim(), g.npos());
    O.noalias() = W * C;
    if (b)
        for (int o = 0; o < g.co; ++o) O.row(o).array() += b->value.data[o];

    auto node = make_node<T>(std::move(out), {x, w, b});
    if (node->requires_grad) {
        if (!wants(w)) cols.reset();
        node->backward_fn = [x, w, b, g, cols](Node<T>& self) {
            CMapR<T> dO(self.grad.data.data(), g.co, g.npos());
            if (wants(w)) {
                MapR<T> dW(w->grad_buffer().data.data(), g.co, g.kdim());
                dW.noalias() += dO * CMapR<T>(cols->data(), g.kdim(), g.npos()).transpose();
            }
            if (wants(b)) {
                auto& db = b->grad_buffer().data;
                const T* go = self.grad.data.data();
                for (int o = 0; o < g.co; ++o) db[o] += std::accumulate(go + o * g.npos(), go + (o + 1) * g.npos(), T(0));
            }
            if (wants(x)) {
                std::vector<T> dcols(static_cast<size_t>(g.kdim()) * g.npos());
                MapR<T> dC(dcols.data(), g.kdim(), g.npos());
                dC.noalias() = CMapR<T>(w->value.data.data(), g.co, g.kdim()).transpose() * dO;
                col2im_add(dcols.data(), g, x->grad_buffer().data.data());
            }
        };
    }
    return node;
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same(a, b, "add");
    Tensor<T> out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    auto node = make_node<T>(std::move(out), {a, b});
    if (node->requires_grad)
        node->backward_fn = [a, b](Node<T>& self) {
            for (const auto& p : {a, b})
                if (wants(p)) {
                    auto& g = p->grad_buffer().data;
                    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
                }
        };
    return node;
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same(a, b, "mul");
    Tensor<T> out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    auto node = make_node<T>(std::move(out), {a, b});
    if (node->requires_grad)
        node->backward_fn = [a, b](Node<T>& self) {
            if (wants(a)) {
                auto& g = a->grad_buffer().data;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * b->value.data[i];
            }
            if (wants(b)) {
                auto& g = b->grad_buffer().data;
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * a->value.data[i];
            }
        };
    return node;
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v *= s;
    auto node = make_node<T>(std::move(out), {a});
    if (node->requires_grad)
        node->backward_fn = [a, s](Node<T>& self) {
            auto& g = a->grad_buffer().data;
            for (size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad.data[i];
        };
    return node;
}

template <class T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& s) {
    require(x->value.rank() == 3 && s->value.rank() == 3 && s->value.dim(0) == 1 &&
                s->value.dim(1) == x->value.dim(1) && s->value.dim(2) == x->value.dim(2),
            "mul_spatial: expected [C,H,W] and [1,H,W], got " + shape_str(x->shape()) + " and " + shape_str(s->shape()));
    const size_t plane = static_cast<size_t>(x->value.dim(1)) * x->value.dim(2);
    const int channels = x->value.dim(0);
    Tensor<T> out = x->value;
    for (int c = 0; c < channels; ++c)
        for (size_t p = 0; p < plane; ++p) out.data[c * plane + p] *= s->value.data[p];
    auto node = make_node<T>(std::move(out), {x, s});
    if (node->requires_grad)
        node->backward_fn = [x, s, plane, channels](Node<T>& self) {
            if (wants(x)) {
                auto& g = x->grad_buffer().data;
                for (int c = 0; c < channels; ++c)
                    for (size_t p = 0; p < plane; ++p) g[c * plane + p] += self.grad.data[c * plane + p] * s->value.data[p];
            }
            if (wants(s)) {
                auto& g = s->grad_buffer().data;
                for (int c = 0; c < channels; ++c)
                    for (size_t p = 0; p < plane; ++p) g[p] += self.grad.data[c * plane + p] * x->value.data[c * plane + p];
            }
        };
    return node;
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = v < T(0) ? T(0) : v; // NaN passes through so divergence is visible
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (size_t i = 0; i < g.size(); ++i)
                if (x->value.data[i] > T(0)) g[i] += self.grad.data[i];
        };
    return node;
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (size_t i = 0; i < g.size(); ++i) {
                const T y = self.value.data[i];
                g[i] += self.grad.data[i] * y * (T(1) - y);
            }
        };
    return node;
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = std::tanh(v);
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (size_t i = 0; i < g.size(); ++i) {
                const T y = self.value.data[i];
                g[i] += self.grad.data[i] * (T(1) - y * y);
            }
        };
    return node;
}

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    const int C = x->value.dim(0);
    if (groups < 1 || C % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
    if (gamma->value.numel() != static_cast<size_t>(C) || beta->value.numel() != static_cast<size_t>(C))
        throw std::invalid_argument("group_norm: affine size must equal channel count");
    const size_t P = x->value.numel() / static_cast<size_t>(C);
    const int cg = C / groups;
    const size_t G = P * static_cast<size_t>(cg);
    auto xhat = std::make_shared<std::vector<T>>(x->value.numel());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(groups));
    Tensor<T> out(x->value.shape);
    for (int g = 0; g < groups; ++g) {
        const T* src = x->value.data.data() + g * G;
        double mean = 0.0, var = 0.0;
        for (size_t i = 0; i < G; ++i) mean += src[i];
        mean /= static_cast<double>(G);
        for (size_t i = 0; i < G; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(G);
        const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[g] = is;
        for (size_t i = 0; i < G; ++i) {
            const int c = g * cg + static_cast<int>(i / P);
            const T h = static_cast<T>(src[i] - mean) * is;
            (*xhat)[g * G + i] = h;
            out.data[g * G + i] = gamma->value.data[c] * h + beta->value.data[c];
        }
    }
    auto node = make_node<T>(std::move(out), {x, gamma, beta});
    if (node->requires_grad)
        node->backward_fn = [x, gamma, beta, xhat, inv_std, groups, cg, P, G](Node<T>& self) {
            const T* dy = self.grad.data.data();
            const T* h = xhat->data();
            for (int c = 0; c < groups * cg; ++c) {
                double sdy = 0.0, sdyh = 0.0;
                for (size_t i = c * P; i < (c + 1) * P; ++i) {
                    sdy += dy[i];
                    sdyh += static_cast<double>(dy[i]) * h[i];
                }
                if (gamma->requires_grad) gamma->grad_buffer().data[c] += static_cast<T>(sdyh);
                if (beta->requires_grad) beta->grad_buffer().data[c] += static_cast<T>(sdy);
            }
            if (!x->requires_grad) return;
            auto* dx = x->grad_buffer().data.data();
            for (int g = 0; g < groups; ++g) {
                // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                double m1 = 0.0, m2 = 0.0;
                for (size_t i = g * G; i < (g + 1) * G; ++i) {
                    const double d = static_cast<double>(dy[i]) * gamma->value.data[i / P];
                    m1 += d;
                    m2 += d * h[i];
                }
                m1 /= static_cast<double>(G);
                m2 /= static_cast<double>(G);
                const T is = (*inv_std)[g];
                for (size_t i = g * G; i < (g + 1) * G; ++i) {
                    const double d = static_cast<double>(dy[i]) * gamma->value.data[i / P];
                    dx[i] += static_cast<T>(is * (d - m1 - h[i] * m2));
                }
            }
        };
    return node;
}

template <class T>
Var<T> position_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const int C = x->value.dim(0);
    if (gamma->value.numel() != static_cast<size_t>(C) || beta->value.numel() != static_cast<size_t>(C))
        throw std::invalid_argument("position_norm: affine size must equal channel count");
    const size_t P = x->value.numel() / static_cast<size_t>(C);
    auto xhat = std::make_shared<std::vector<T>>(x->value.numel());
    auto inv_std = std::make_shared<std::vector<T>>(P);
    Tensor<T> out(x->value.shape);
    const T* src = x->value.data.data();
    for (size_t p = 0; p < P; ++p) {
        double mean = 0.0, var = 0.0;
        for (int c = 0; c < C; ++c) mean += src[c * P + p];
        mean /= C;
        for (int c = 0; c < C; ++c) var += (src[c * P + p] - mean) * (src[c * P + p] - mean);
        var /= C;
        const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[p] = is;
        for (int c = 0; c < C; ++c) {
            const T h = static_cast<T>(src[c * P + p] - mean) * is;
            (*xhat)[c * P + p] = h;
            out.data[c * P + p] = gamma->value.data[c] * h + beta->value.data[c];
        }
    }
    auto node = make_node<T>(std::move(out), {x, gamma, beta});
    if (node->requires_grad)
        node->backward_fn = [x, gamma, beta, xhat, inv_std, C, P](Node<T>& self) {
            const T* dy = self.grad.data.data();
            const T* h = xhat->data();
            for (int c = 0; c < C; ++c) {
                double sdy = 0.0, sdyh = 0.0;
                for (size_t i = c * P; i < (c + 1) * P; ++i) {
                    sdy += dy[i];
                    sdyh += static_cast<double>(dy[i]) * h[i];
                }
                if (gamma->requires_grad) gamma->grad_buffer().data[c] += static_cast<T>(sdyh);
                if (beta->requires_grad) beta->grad_buffer().data[c] += static_cast<T>(sdy);
            }
            if (!x->requires_grad) return;
            auto* dx = x->grad_buffer().data.data();
            for (size_t p = 0; p < P; ++p) {
                double m1 = 0.0, m2 = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double d = static_cast<double>(dy[c * P + p]) * gamma->value.data[c];
                    m1 += d;
                    m2 += d * h[c * P + p];
                }
                m1 /= C;
                m2 /= C;
                for (int c = 0; c < C; ++c) {
                    const double d = static_cast<double>(dy[c * P + p]) * gamma->value.data[c];
                    dx[c * P + p] += static_cast<T>((*inv_std)[p] * (d - m1 - h[c * P + p] * m2));
                }
            }
        };
    return node;
}

namespace {
struct Interp {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

Interp interp_axis(int in, int out) {
    Interp ip;
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        int lo = static_cast<int>(src);
        if (lo > in - 1) lo = in - 1;
        const int hi = std::min(lo + 1, in - 1);
        ip.lo.push_back(lo);
        ip.hi.push_back(hi);
        ip.frac.push_back(src - lo);
    }
    return ip;
}
} // namespace

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w) {
    require(x->value.rank() == 3, "upsample_bilinear: input must be [C,H,W]");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    const auto iy = std::make_shared<Interp>(interp_axis(h, out_h));
    const auto ix = std::make_shared<Interp>(interp_axis(w, out_w));
    Tensor<T> out({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        const T* src = x->value.data.data() + static_cast<size_t>(ch) * h * w;
        T* dst = out.data.data() + static_cast<size_t>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(iy->frac[oy]);
            const T* r0 = src + iy->lo[oy] * w;
            const T* r1 = src + iy->hi[oy] * w;
            for (int ox = 0; ox < out_w; ++ox) {
                const T fx = static_cast<T>(ix->frac[ox]);
                const int x0 = ix->lo[ox], x1 = ix->hi[ox];
                const T top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                const T bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x, iy, ix, c, h, w, out_h, out_w](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (int ch = 0; ch < c; ++ch) {
                T* dst = g.data() + static_cast<size_t>(ch) * h * w;
                const T* go = self.grad.data.data() + static_cast<size_t>(ch) * out_h * out_w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const T fy = static_cast<T>(iy->frac[oy]);
                    T* r0 = dst + iy->lo[oy] * w;
                    T* r1 = dst + iy->hi[oy] * w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const T fx = static_cast<T>(ix->frac[ox]);
                        const T v = go[oy * out_w + ox];
                        const int x0 = ix->lo[ox], x1 = ix->hi[ox];
                        r0[x0] += v * (T(1) - fy) * (T(1) - fx);
                        r0[x1] += v * (T(1) - fy) * fx;
                        r1[x0] += v * fy * (T(1) - fx);
                        r1[x1] += v * fy * fx;
                    }
                }
            }
        };
    return node;
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    require(!xs.empty(), "concat_channels: no inputs");
    const int h = xs[0]->value.dim(1), w = xs[0]->value.dim(2);
    int total = 0;
    for (const auto& x : xs) {
        require(x->value.rank() == 3 && x->value.dim(1) == h && x->value.dim(2) == w,
                "concat_channels: spatial mismatch " + shape_str(x->shape()));
        total += x->value.dim(0);
    }
    Tensor<T> out({total, h, w});
    size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += x->value.numel();
    }
    auto node = make_node<T>(std::move(out), xs);
    if (node->requires_grad)
        node->backward_fn = [xs](Node<T>& self) {
            size_t o = 0;
            for (const auto& x : xs) {
                if (wants(x)) {
                    auto& g = x->grad_buffer().data;
                    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[o + i];
                }
                o += x->value.numel();
            }
        };
    return node;
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
    const int c = x->value.dim(0);
    require(begin >= 0 && count > 0 && begin + count <= c, "slice_channels: range out of bounds");
    const size_t stride = x->value.numel() / static_cast<size_t>(c);
    Shape shape = x->value.shape;
    shape[0] = count;
    Tensor<T> out(shape);
    std::copy_n(x->value.data.begin() + static_cast<std::ptrdiff_t>(begin * stride), count * stride, out.data.begin());
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x, begin, stride](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (size_t i = 0; i < self.grad.data.size(); ++i) g[begin * stride + i] += self.grad.data[i];
        };
    return node;
}

template <class T>
Var<T> broadcast_spatial(const Var<T>& v, int h, int w) {
    const int c = static_cast<int>(v->value.numel());
    const size_t plane = static_cast<size_t>(h) * w;
    Tensor<T> out({c, h, w});
    for (int ch = 0; ch < c; ++ch) std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(ch * plane), plane, v->value.data[ch]);
    auto node = make_node<T>(std::move(out), {v});
    if (node->requires_grad)
        node->backward_fn = [v, c, plane](Node<T>& self) {
            auto& g = v->grad_buffer().data;
            for (int ch = 0; ch < c; ++ch) {
                T s = 0;
                for (size_t p = 0; p < plane; ++p) s += self.grad.data[ch * plane + p];
                g[ch] += s;
            }
        };
    return node;
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    require(w->value.rank() == 2, "linear: weight must be [O,D]");
    const int o = w->value.dim(0), d = w->value.dim(1);
    require(x->value.numel() == static_cast<size_t>(d), "linear: input size mismatch");
    Tensor<T> out({o});
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> y(out.data.data(), o);
    y.noalias() = CMapR<T>(w->value.data.data(), o, d) *
                  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x->value.data.data(), d);
    if (b)
        for (int i = 0; i < o; ++i) out.data[i] += b->value.data[i];
    auto node = make_node<T>(std::move(out), {x, w, b});
    if (node->requires_grad)
        node->backward_fn = [x, w, b, o, d](Node<T>& self) {
            Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gy(self.grad.data.data(), o);
            if (wants(w)) {
                MapR<T> gw(w->grad_buffer().data.data(), o, d);
                gw.noalias() += gy * Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(x->value.data.data(), d);
            }
            if (wants(b))
                for (int i = 0; i < o; ++i) b->grad_buffer().data[i] += self.grad.data[i];
            if (wants(x)) {
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gx(x->grad_buffer().data.data(), d);
                gx.noalias() += CMapR<T>(w->value.data.data(), o, d).transpose() * gy;
            }
        };
    return node;
}

template <class T>
Var<T> embedding_mean(const Var<T>& table, std::span<const int> ids_span) {
    require(table->value.rank() == 2, "embedding_mean: table must be [V,D]");
    require(!ids_span.empty(), "embedding_mean: no token ids");
    const int vocab = table->value.dim(0), dim = table->value.dim(1);
    std::vector<int> ids(ids_span.begin(), ids_span.end());
    Tensor<T> out({dim});
    const T inv = T(1) / static_cast<T>(ids.size());
    for (int id : ids) {
        require(id >= 0 && id < vocab, "embedding_mean: token id out of range");
        for (int j = 0; j < dim; ++j) out.data[j] += table->value.data[static_cast<size_t>(id) * dim + j];
    }
    for (auto& v : out.data) v *= inv;
    auto node = make_node<T>(std::move(out), {table});
    if (node->requires_grad)
        node->backward_fn = [table, ids, dim, inv](Node<T>& self) {
            auto& g = table->grad_buffer().data;
            for (int id : ids)
                for (int j = 0; j < dim; ++j) g[static_cast<size_t>(id) * dim + j] += self.grad.data[j] * inv;
        };
    return node;
}

template <class T>
Var<T> cosine_positions(const Var<T>& a, const Var<T>& b) {
    check_same(a, b, "cosine_positions");
    require(a->value.rank() == 3, "cosine_positions: inputs must be [C,H,W]");
    const int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
    const size_t plane = static_cast<size_t>(h) * w;
    auto na = std::make_shared<std::vector<T>>(plane);
    auto nb = std::make_shared<std::vector<T>>(plane);
    auto raw = std::make_shared<std::vector<T>>(plane);
    Tensor<T> out({1, h, w});
    for (size_t p = 0; p < plane; ++p) {
        T dot = 0, aa = 0, bb = 0;
        for (int ch = 0; ch < c; ++ch) {
            const T x = a->value.data[ch * plane + p], y = b->value.data[ch * plane + p];
            dot += x * y;
            aa += x * x;
            bb += y * y;
        }
        (*na)[p] = std::sqrt(aa);
        (*nb)[p] = std::sqrt(bb);
        const T denom = (*na)[p] * (*nb)[p];
        (*raw)[p] = denom > T(0) ? dot / denom : T(0);
        out.data[p] = std::clamp((*raw)[p], T(-1), T(1));
    }
    auto node = make_node<T>(std::move(out), {a, b});
    if (node->requires_grad)
        node->backward_fn = [a, b, na, nb, raw, c, plane](Node<T>& self) {
            for (size_t p = 0; p < plane; ++p) {
                const T denom = (*na)[p] * (*nb)[p];
                if (!(denom > T(0))) continue;
                const T gs = self.grad.data[p];
                const T s = (*raw)[p];
                if (wants(a)) {
                    auto& g = a->grad_buffer().data;
                    const T inv_a2 = T(1) / ((*na)[p] * (*na)[p]);
                    for (int ch = 0; ch < c; ++ch)
                        g[ch * plane + p] += gs * (b->value.data[ch * plane + p] / denom - s * a->value.data[ch * plane + p] * inv_a2);
                }
                if (wants(b)) {
                    auto& g = b->grad_buffer().data;
                    const T inv_b2 = T(1) / ((*nb)[p] * (*nb)[p]);
                    for (int ch = 0; ch < c; ++ch)
                        g[ch * plane + p] += gs * (a->value.data[ch * plane + p] / denom - s * b->value.data[ch * plane + p] * inv_b2);
                }
            }
        };
    return node;
}

namespace {
template <class T>
std::pair<int, size_t> as_matrix(const Var<T>& v) {
    const int rows = v->value.dim(0);
    return {rows, v->value.numel() / static_cast<size_t>(rows)};
}
} // namespace

constexpr int kTile = 256;

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int group) {
    const auto [d, n] = as_matrix(q);
    const auto [dk, m] = as_matrix(k);
    const auto [dv, mv] = as_matrix(v);
    require(d == dk, "attention: query/key width mismatch");
    require(m == mv, "attention: key/value length mismatch");
    const int ni = static_cast<int>(n), mi = static_cast<int>(m);
    int g = group;
    if (g <= 0) {
        g = 0;
    } else {
        require(n == m && n % static_cast<size_t>(g) == 0, "attention: group must divide the sequence length");
    }
    const int blocks = g ? ni / g : 1;
    const int bq = g ? g : ni; // queries per block
    const int bk = g ? g : mi; // keys per block
    const T sc = T(1) / std::sqrt(static_cast<T>(d));
    // Queries are processed in tiles so the probability rows stay cache-resident; backward
    // recomputes them from the stored per-query log-sum-exp instead of keeping the full matrix.

    auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(ni));
    Tensor<T> out({dv, ni});
    {
        CMapR<T> Q(q->value.data.data(), d, ni);
        CMapR<T> K(k->value.data.data(), d, mi);
        CMapR<T> V(v->value.data.data(), dv, mi);
        MapR<T> O(out.data.data(), dv, ni);
        MatR<T> P(std::min(kTile, bq), bk);
        for (int blk = 0; blk < blocks; ++blk)
            for (int r0 = 0; r0 < bq; r0 += kTile) {
                const int rows = std::min(kTile, bq - r0);
                const int c0 = blk * bq + r0;
                auto Pt = P.topRows(rows);
                Pt.noalias() = sc * Q.middleCols(c0, rows).transpose() * K.middleCols(blk * bk, bk);
                for (int r = 0; r < rows; ++r) {
                    auto row = Pt.row(r).array();
                    const T mx = row.maxCoeff();
                    row = (row - mx).exp();
                    const T sum = row.sum();
                    row /= sum;
                    (*lse)[c0 + r] = mx + std::log(sum);
                }
                O.middleCols(c0, rows).noalias() = V.middleCols(blk * bk, bk) * Pt.transpose();
            }
    }
    auto node = make_node<T>(std::move(out), {q, k, v});
    if (node->requires_grad)
        node->backward_fn = [q, k, v, lse, d, dv, ni, mi, blocks, bq, bk, sc](Node<T>& self) {
            CMapR<T> dO(self.grad.data.data(), dv, ni);
            CMapR<T> Q(q->value.data.data(), d, ni);
            CMapR<T> K(k->value.data.data(), d, mi);
            CMapR<T> V(v->value.data.data(), dv, mi);
            CMapR<T> O(self.value.data.data(), dv, ni);
            MatR<T> P(std::min(kTile, bq), bk), dP(std::min(kTile, bq), bk);
            for (int blk = 0; blk < blocks; ++blk)
                for (int r0 = 0; r0 < bq; r0 += kTile) {
                    const int rows = std::min(kTile, bq - r0);
                    const int c0 = blk * bq + r0;
                    auto Pt = P.topRows(rows);
                    auto dPt = dP.topRows(rows);
                    Pt.noalias() = sc * Q.middleCols(c0, rows).transpose() * K.middleCols(blk * bk, bk);
                    for (int r = 0; r < rows; ++r) Pt.row(r) = (Pt.row(r).array() - (*lse)[c0 + r]).exp().matrix();
                    const auto dOb = dO.middleCols(c0, rows);
                    if (wants(v)) {
                        MapR<T> dV(v->grad_buffer().data.data(), dv, mi);
                        dV.middleCols(blk * bk, bk).noalias() += dOb * Pt;
                    }
                    if (!wants(q) && !wants(k)) continue;
                    dPt.noalias() = dOb.transpose() * V.middleCols(blk * bk, bk);
                    for (int r = 0; r < rows; ++r) {
                        // sum_j P_rj dP_rj == dO_r . O_r
                        const T dot = dOb.col(r).dot(O.col(c0 + r));
                        dPt.row(r) = (Pt.row(r).array() * (dPt.row(r).array() - dot)).matrix();
                    }
                    if (wants(q)) {
                        MapR<T> dQ(q->grad_buffer().data.data(), d, ni);
                        dQ.middleCols(c0, rows).noalias() += sc * K.middleCols(blk * bk, bk) * dPt.transpose();
                    }
                    if (wants(k)) {
                        MapR<T> dK(k->grad_buffer().data.data(), d, mi);
                        dK.middleCols(blk * bk, bk).noalias() += sc * Q.middleCols(c0, rows) * dPt;
                    }
                }
        };
    return node;
}

template <class T>
Var<T> gather_positions(const Var<T>& x, std::vector<int> index) {
    const auto [c, n] = as_matrix(x);
    require(index.size() == n, "gather_positions: index length must equal position count");
    for (int i : index) require(i >= 0 && static_cast<size_t>(i) < n, "gather_positions: index out of range");
    Tensor<T> out(x->value.shape);
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < n; ++i) out.data[ch * n + i] = x->value.data[ch * n + static_cast<size_t>(index[i])];
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x, index = std::move(index), c, n](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (int ch = 0; ch < c; ++ch)
                for (size_t i = 0; i < n; ++i) g[ch * n + static_cast<size_t>(index[i])] += self.grad.data[ch * n + i];
        };
    return node;
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    require(shape_numel(shape) == x->value.numel(), "reshape: element count mismatch " + shape_str(x->shape()) + " -> " + shape_str(shape));
    Tensor<T> out(std::move(shape), x->value.data);
    auto node = make_node<T>(std::move(out), {x});
    if (node->requires_grad)
        node->backward_fn = [x](Node<T>& self) {
            auto& g = x->grad_buffer().data;
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
        };
    return node;
}

template <class T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
    require(pred->value.shape == target.shape,
            "mse: shape mismatch " + shape_str(pred->shape()) + " vs " + shape_str(target.shape));
    const size_t n = target.numel();
    T s = 0;
    for (size_t i = 0; i < n; ++i) {
        const T d = pred->value.data[i] - target.data[i];
        s += d * d;
    }
    auto node = make_node<T>(Tensor<T>({1}, std::vector<T>{s / static_cast<T>(n)}), {pred});
    if (node->requires_grad)
        node->backward_fn = [pred, target, n](Node<T>& self) {
            auto& g = pred->grad_buffer().data;
            const T k = T(2) * self.grad.data[0] / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i) g[i] += k * (pred->value.data[i] - target.data[i]);
        };
    return node;
}

template <class T>
Var<T> spatial_kl(const Tensor<T>& target, const Var<T>& pred, T eps, bool reverse) {
    require(pred->value.shape == target.shape,
            "spatial_kl: shape mismatch " + shape_str(target.shape) + " vs " + shape_str(pred->shape()));
    const int c = target.dim(0);
    const size_t n = target.numel() / static_cast<size_t>(c);
    auto pt = std::make_shared<std::vector<T>>(target.data);
    auto pp = std::make_shared<std::vector<T>>(pred->value.data);
    T total = 0;
    for (int ch = 0; ch < c; ++ch) {
        std::span<T> rt(pt->data() + ch * n, n), rp(pp->data() + ch * n, n);
        softmax_inplace(rt);
        softmax_inplace(rp);
        const std::span<T>& a = reverse ? rp : rt;
        const std::span<T>& b = reverse ? rt : rp;
        T kl = 0;
        for (size_t i = 0; i < n; ++i) kl += a[i] * (std::log(a[i] + eps) - std::log(b[i] + eps));
        total += kl;
    }
    auto node = make_node<T>(Tensor<T>({1}, std::vector<T>{total / static_cast<T>(c)}), {pred});
    if (node->requires_grad)
        node->backward_fn = [pred, pt, pp, c, n, eps, reverse](Node<T>& self) {
            auto& g = pred->grad_buffer().data;
            const T k = self.grad.data[0] / static_cast<T>(c);
            std::vector<T> r(n);
            for (int ch = 0; ch < c; ++ch) {
                const T* t = pt->data() + ch * n;
                const T* p = pp->data() + ch * n;
                if (reverse) {
                    // d/dp_i of sum p log((p + eps) / (t + eps)), then through the softmax.
                    T mean = 0;
                    for (size_t i = 0; i < n; ++i) {
                        r[i] = std::log(p[i] + eps) + p[i] / (p[i] + eps) - std::log(t[i] + eps);
                        mean += p[i] * r[i];
                    }
                    for (size_t j = 0; j < n; ++j) g[ch * n + j] += k * p[j] * (r[j] - mean);
                    continue;
                }
                T rs = 0;
                for (size_t i = 0; i < n; ++i) {
                    r[i] = t[i] * p[i] / (p[i] + eps);
                    rs += r[i];
                }
                for (size_t j = 0; j < n; ++j) g[ch * n + j] += k * (p[j] * rs - r[j]);
            }
        };
    return node;
}

template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& xs) {
    T s = 0;
    for (const auto& x : xs) {
        require(x->value.numel() == 1, "sum_scalars: inputs must hold one element");
        s += x->value.data[0];
    }
    auto node = make_node<T>(Tensor<T>({1}, std::vector<T>{s}), xs);
    if (node->requires_grad)
        node->backward_fn = [xs](Node<T>& self) {
            for (const auto& x : xs)
                if (wants(x)) x->grad_buffer().data[0] += self.grad.data[0];
        };
    return node;
}

#define USERSOD_INSTANTIATE_OPS(T)                                                                    \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                  \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> scale<T>(const Var<T>&, T);                                                       \
    template Var<T> mul_spatial<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> relu<T>(const Var<T>&);                                                           \
    template Var<T> sigmoid<T>(const Var<T>&);                                                        \
    template Var<T> tanh<T>(const Var<T>&);                                                           \
    template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);              \
    template Var<T> position_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
    template Var<T> upsample_bilinear<T>(const Var<T>&, int, int);                                    \
    template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                   \
    template Var<T> broadcast_spatial<T>(const Var<T>&, int, int);                                    \
    template Var<T> slice_channels<T>(const Var<T>&, int, int);                                       \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                           \
    template Var<T> embedding_mean<T>(const Var<T>&, std::span<const int>);                           \
    template Var<T> cosine_positions<T>(const Var<T>&, const Var<T>&);                                \
    template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);                   \
    template Var<T> gather_positions<T>(const Var<T>&, std::vector<int>);                             \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                 \
    template Var<T> mse<T>(const Var<T>&, const Tensor<T>&);                                          \
    template Var<T> spatial_kl<T>(const Tensor<T>&, const Var<T>&, T, bool);                          \
    template Var<T> sum_scalars<T>(const std::vector<Var<T>>&);

USERSOD_INSTANTIATE_OPS(float)
USERSOD_INSTANTIATE_OPS(double)

} // namespace ops

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template void softmax_inplace<float>(std::span<float>);
template void softmax_inplace<double>(std::span<double>);

} // namespace usersod::nn
