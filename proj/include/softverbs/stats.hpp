#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace softverbs::stats {

inline double percentile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    double idx = p * double(v.size() - 1);
    size_t lo = size_t(idx);
    size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = idx - double(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

inline double median(const std::vector<double>& v) { return percentile(v, 0.5); }

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

// Median absolute deviation, the robust spread estimate used for noise floors.
inline double mad(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double m = median(v);
    std::vector<double> d;
    d.reserve(v.size());
    for (double x : v) d.push_back(std::fabs(x - m));
    return median(d);
}

struct LinearFit {
    double slope = 0;
    double intercept = 0;
    double r2 = 0;
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    LinearFit f;
    size_t n = std::min(x.size(), y.size());
    if (n < 2) return f;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    double denom = double(n) * sxx - sx * sx;
    if (denom == 0) return f;
    f.slope = (double(n) * sxy - sx * sy) / denom;
    f.intercept = (sy - f.slope * sx) / double(n);
    double ybar = sy / double(n), ss_tot = 0, ss_res = 0;
    for (size_t i = 0; i < n; ++i) {
        double fit = f.slope * x[i] + f.intercept;
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
        ss_res += (y[i] - fit) * (y[i] - fit);
    }
    f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    return f;
}

inline double binom_cdf(int k, int n, double p) {
    // P(X <= k) by direct summation; n stays small (tens of repetitions).
    double c = 0, term = std::pow(1.0 - p, n);
    for (int i = 0; i <= k; ++i) {
        if (i > 0) term *= double(n - i + 1) / double(i) * p / (1.0 - p);
        c += term;
    }
    return std::min(1.0, c);
}

// One-sided sign test that paired differences are positive.
// Returns the p-value of seeing at least `pos` positives out of the
// non-zero pairs under the null (p = 1/2).
inline double sign_test_p(const std::vector<double>& diffs) {
    int pos = 0, nz = 0;
    for (double d : diffs) {
        if (d == 0) continue;
        ++nz;
        if (d > 0) ++pos;
    }
    if (nz == 0) return 1.0;
    return 1.0 - binom_cdf(pos - 1, nz, 0.5);
}

// Mann-Kendall trend test over observations ordered by an external key
// (e.g. message size). `groups` holds the samples per key in ascending
// key order; pairs within one group do not count. Returns the one-sided
// p-value for a rising trend.
inline double trend_test_p_rising(const std::vector<std::vector<double>>& groups) {
    long s = 0;
    double n_pairs = 0;
    for (size_t a = 0; a < groups.size(); ++a)
        for (size_t b = a + 1; b < groups.size(); ++b)
            for (double xa : groups[a])
                for (double xb : groups[b]) {
                    n_pairs += 1;
                    if (xb > xa) ++s;
                    else if (xb < xa) --s;
                }
    if (n_pairs == 0) return 1.0;
    size_t n = 0;
    for (auto& g : groups) n += g.size();
    double var = double(n) * double(n - 1) * double(2 * n + 5) / 18.0;
    if (var <= 0) return 1.0;
    double z = (double(s) - (s > 0 ? 1.0 : s < 0 ? -1.0 : 0.0)) / std::sqrt(var);
    return 0.5 * std::erfc(z / std::sqrt(2.0));
}

} // namespace softverbs::stats
