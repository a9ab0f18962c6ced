#include "usersod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace usersod::metrics {
namespace {

void check_shapes(const SaliencyMap& pred, const BinaryMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("prediction and ground truth shapes differ");
}

// Sums over a rectangular block [y0,y1) x [x0,x1).
struct BlockStats {
    double n = 0;
    double mean_x = 0, mean_y = 0;
    double var_x = 0, var_y = 0, cov = 0;
};

BlockStats block_stats(const SaliencyMap& pred, const BinaryMask& gt, int y0, int y1, int x0, int x1) {
    BlockStats s;
    s.n = static_cast<double>(y1 - y0) * (x1 - x0);
    if (s.n <= 0) return s;
    double sx = 0, sy = 0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            sx += pred.at(y, x);
            sy += gt.at(y, x);
        }
    s.mean_x = sx / s.n;
    s.mean_y = sy / s.n;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const double dx = pred.at(y, x) - s.mean_x;
            const double dy = gt.at(y, x) - s.mean_y;
            s.var_x += dx * dx;
            s.var_y += dy * dy;
            s.cov += dx * dy;
        }
    const double denom = s.n - 1 + kEps;
    s.var_x /= denom;
    s.var_y /= denom;
    s.cov /= denom;
    return s;
}

// SSIM-style structural similarity of one quadrant.
double block_ssim(const BlockStats& s) {
    const double alpha = 4 * s.mean_x * s.mean_y * s.cov;
    const double beta = (s.mean_x * s.mean_x + s.mean_y * s.mean_y) * (s.var_x + s.var_y);
    if (alpha != 0) return alpha / (beta + kEps);
    if (beta == 0) return 1.0;
    return 0.0;
}

double region_similarity(const SaliencyMap& pred, const BinaryMask& gt) {
    const int rows = gt.height, cols = gt.width;
    double total = 0, wx = 0, wy = 0;
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x)
            if (gt.at(y, x)) {
                total += 1;
                wx += x + 1;
                wy += y + 1;
            }
    // Split column/row counts (1-based centroid, rounded): quadrants are [0,cx) and [cx,cols).
    int cx, cy;
    if (total == 0) {
        cx = static_cast<int>(std::lround(cols / 2.0));
        cy = static_cast<int>(std::lround(rows / 2.0));
    } else {
        cx = static_cast<int>(std::lround(wx / total));
        cy = static_cast<int>(std::lround(wy / total));
    }
    const double area = static_cast<double>(rows) * cols;
    struct Quad {
        int y0, y1, x0, x1;
    };
    const Quad quads[4] = {{0, cy, 0, cx}, {0, cy, cx, cols}, {cy, rows, 0, cx}, {cy, rows, cx, cols}};
    double q = 0;
    for (const auto& qd : quads) {
        const double w = static_cast<double>(qd.y1 - qd.y0) * (qd.x1 - qd.x0) / area;
        if (w == 0) continue;
        q += w * block_ssim(block_stats(pred, gt, qd.y0, qd.y1, qd.x0, qd.x1));
    }
    return q;
}

// Mean/std (N-1 normalized) of `values` restricted to `region`, scored as 2x/(x^2+1+sigma+eps).
double object_score(const std::vector<double>& values, const std::vector<uint8_t>& region) {
    double sum = 0, n = 0;
    for (size_t i = 0; i < values.size(); ++i)
        if (region[i]) {
            sum += values[i];
            n += 1;
        }
    if (n == 0) return 0.0;
    const double mean = sum / n;
    double var = 0;
    for (size_t i = 0; i < values.size(); ++i)
        if (region[i]) var += (values[i] - mean) * (values[i] - mean);
    const double sigma = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
    return 2.0 * mean / (mean * mean + 1.0 + sigma + kEps);
}

double object_similarity(const SaliencyMap& pred, const BinaryMask& gt) {
    const size_t n = gt.data.size();
    std::vector<double> fg(n), bg(n);
    std::vector<uint8_t> in_fg(n), in_bg(n);
    double mu = 0;
    for (size_t i = 0; i < n; ++i) {
        fg[i] = gt.data[i] ? pred.data[i] : 0.0;
        bg[i] = gt.data[i] ? 0.0 : 1.0 - pred.data[i];
        in_fg[i] = gt.data[i];
        in_bg[i] = !gt.data[i];
        mu += gt.data[i];
    }
    mu /= static_cast<double>(n);
    return mu * object_score(fg, in_fg) + (1 - mu) * object_score(bg, in_bg);
}

} // namespace

double mae(const SaliencyMap& pred, const BinaryMask& gt) {
    check_shapes(pred, gt);
    double s = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - static_cast<double>(gt.data[i]));
    return pred.data.empty() ? 0.0 : s / static_cast<double>(pred.data.size());
}

double adaptive_threshold(const SaliencyMap& pred) {
    double mean = 0;
    for (double v : pred.data) mean += v;
    mean /= static_cast<double>(std::max<size_t>(1, pred.data.size()));
    return std::clamp(2.0 * mean, 0.0, 1.0);
}

BinaryMask binarize_adaptive(const SaliencyMap& pred) {
    const double th = adaptive_threshold(pred);
    BinaryMask b(pred.height, pred.width);
    for (size_t i = 0; i < pred.data.size(); ++i) b.data[i] = (pred.data[i] >= th && pred.data[i] > 0.0) ? 1 : 0;
    return b;
}

double f_measure(const SaliencyMap& pred, const BinaryMask& gt, double beta_squared) {
    check_shapes(pred, gt);
    if (gt.area() == 0) throw std::invalid_argument("undefined recall");
    const BinaryMask bin = binarize_adaptive(pred);
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < gt.data.size(); ++i) {
        tp += bin.data[i] & gt.data[i];
        fp += bin.data[i] & !gt.data[i];
        fn += !bin.data[i] & gt.data[i];
    }
    const double precision = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp / (tp + fn);
    const double denom = beta_squared * precision + recall;
    if (denom <= 0) return 0.0;
    return (1 + beta_squared) * precision * recall / denom;
}

double s_measure(const SaliencyMap& pred, const BinaryMask& gt, double alpha) {
    check_shapes(pred, gt);
    double gt_mean = 0, pred_mean = 0;
    for (size_t i = 0; i < gt.data.size(); ++i) {
        gt_mean += gt.data[i];
        pred_mean += pred.data[i];
    }
    gt_mean /= static_cast<double>(gt.data.size());
    pred_mean /= static_cast<double>(gt.data.size());
    if (gt_mean == 0) return 1.0 - pred_mean;
    if (gt_mean == 1) return pred_mean;
    const double q = alpha * object_similarity(pred, gt) + (1 - alpha) * region_similarity(pred, gt);
    return std::max(q, 0.0);
}

double e_measure(const SaliencyMap& pred, const BinaryMask& gt) {
    check_shapes(pred, gt);
    const BinaryMask bin = binarize_adaptive(pred);
    const size_t n = gt.data.size();
    const size_t fg = gt.area();
    double sum = 0;
    if (fg == 0) {
        for (size_t i = 0; i < n; ++i) sum += 1.0 - bin.data[i];
    } else if (fg == n) {
        for (size_t i = 0; i < n; ++i) sum += bin.data[i];
    } else {
        double mu_pred = 0, mu_gt = 0;
        for (size_t i = 0; i < n; ++i) {
            mu_pred += bin.data[i];
            mu_gt += gt.data[i];
        }
        mu_pred /= static_cast<double>(n);
        mu_gt /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            const double a = bin.data[i] - mu_pred;
            const double b = gt.data[i] - mu_gt;
            const double align = 2 * a * b / (a * a + b * b + kEps);
            sum += (align + 1) * (align + 1) / 4;
        }
    }
    return sum / static_cast<double>(n);
}

SampleMetrics evaluate_pair(const SaliencyMap& pred, const BinaryMask& gt) {
    SampleMetrics m;
    m.mae = mae(pred, gt);
    m.s_measure = s_measure(pred, gt);
    m.e_measure = e_measure(pred, gt);
    m.f_defined = gt.area() > 0;
    m.f_measure = m.f_defined ? f_measure(pred, gt) : 0.0;
    return m;
}

void MetricsAccumulator::add(const SampleMetrics& m) {
    mae_ += m.mae;
    s_ += m.s_measure;
    e_ += m.e_measure;
    ++count_;
    if (m.f_defined) {
        f_ += m.f_measure;
        ++f_count_;
    }
}

MetricsReport MetricsAccumulator::report() const {
    MetricsReport r;
    r.count = count_;
    r.skipped_undefined_f = count_ - f_count_;
    if (count_ > 0) {
        r.mae = mae_ / count_;
        r.s_measure = s_ / count_;
        r.e_measure = e_ / count_;
    }
    if (f_count_ > 0) r.f_measure = f_ / f_count_;
    return r;
}

} // namespace usersod::metrics
