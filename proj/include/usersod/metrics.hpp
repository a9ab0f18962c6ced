#pragma once

#include <functional>
#include <string>
#include <vector>

#include "usersod/core.hpp"

namespace usersod::metrics {

inline constexpr double kBetaSquared = 0.3;
inline constexpr double kStructureAlpha = 0.5;
inline constexpr double kEps = 2.2204e-16;

struct MetricsReport {
    double mae = 0.0;
    double f_measure = 0.0;
    double s_measure = 0.0;
    double e_measure = 0.0;
    int count = 0;
    int skipped_undefined_f = 0;
};

struct SampleMetrics {
    double mae = 0.0;
    double f_measure = 0.0;
    double s_measure = 0.0;
    double e_measure = 0.0;
    bool f_defined = true;
};

double mae(const SaliencyMap& pred, const BinaryMask& gt);

/// 2 x mean(pred), clamped to [0,1].
double adaptive_threshold(const SaliencyMap& pred);
/// Foreground where pred >= threshold and pred > 0, so an all-zero map stays empty.
BinaryMask binarize_adaptive(const SaliencyMap& pred);

/// Throws std::invalid_argument("undefined recall") for an all-zero gt.
double f_measure(const SaliencyMap& pred, const BinaryMask& gt, double beta_squared = kBetaSquared);
double s_measure(const SaliencyMap& pred, const BinaryMask& gt, double alpha = kStructureAlpha);
double e_measure(const SaliencyMap& pred, const BinaryMask& gt);

SampleMetrics evaluate_pair(const SaliencyMap& pred, const BinaryMask& gt);

/// Running average over pairs; pairs with an all-zero gt are excluded from Fm only.
class MetricsAccumulator {
  public:
    void add(const SampleMetrics& m);
    MetricsReport report() const;

  private:
    double mae_ = 0, f_ = 0, s_ = 0, e_ = 0;
    int count_ = 0;
    int f_count_ = 0;
};

} // namespace usersod::metrics
