#pragma once

// Wall-clock micro-benchmarks: attention-mechanism scaling in token count
// and per-frame cost of the four fusion wirings.

#include <string>
#include <vector>

#include "smat/attention.hpp"

namespace smat {

struct BenchPoint {
  std::string mechanism;  // "separable" | "standard"
  int k = 0;
  double median_ms = 0;
};

// Times one attention layer forward at each token count in ks (token width
// d), reps timed runs after warmup, medians of per-run wall time.
std::vector<BenchPoint> bench_attention(const std::vector<int>& ks, int d,
                                        int reps);

// Least-squares slope of ln(ms) against ln(k).
double fit_loglog_slope(const std::vector<int>& ks,
                        const std::vector<double>& ms);

std::string bench_csv(const std::vector<BenchPoint>& points);

// slope for one mechanism's points
double bench_slope(const std::vector<BenchPoint>& points,
                   const std::string& mechanism);
double bench_median_at(const std::vector<BenchPoint>& points,
                       const std::string& mechanism, int k);

struct VariantTiming {
  FusionVariant variant{};
  double median_ms = 0;
};

// Per-frame fusion cost at one transformer stage: the self-attention variant
// is timed on the search stream only (its template pass caches), the others
// run their full per-frame forward.
std::vector<VariantTiming> bench_fusion_variants(int kz, int kx, int d,
                                                 int reps);

}  // namespace smat
