#include "gradshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "gradshift/error.hpp"
#include "gradshift/gradcam.hpp"

namespace gradshift {

ClassificationMetrics classification_metrics(const std::vector<int>& predictions,
                                             const std::vector<int>& labels) {
    if (predictions.size() != labels.size())
        throw InvalidArgument("classification_metrics: " + std::to_string(predictions.size()) +
                              " predictions vs " + std::to_string(labels.size()) + " labels");
    if (predictions.empty()) throw InvalidArgument("classification_metrics: empty input");
    long tp = 0, tn = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        const bool pos = labels[i] == 1; // malignant is the positive class
        const bool pred_pos = predictions[i] == 1;
        if (pos && pred_pos) ++tp;
        else if (pos && !pred_pos) ++fn;
        else if (!pos && pred_pos) ++fp;
        else ++tn;
    }
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(labels.size());
    if (tp + fn > 0) m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (tn + fp > 0) m.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
    return m;
}

namespace {

// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

} // namespace

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw InvalidArgument("spearman: size mismatch " + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()));
    if (a.size() < 2) return std::nullopt;
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - ma, db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) return std::nullopt; // constant map, undefined
    return cov / std::sqrt(va * vb);
}

std::vector<long> top_fraction_indices(const double* values, long n, double frac) {
    if (n <= 0) throw InvalidArgument("top_fraction_indices: empty input");
    long k = std::max<long>(1, std::llround(frac * static_cast<double>(n)));
    k = std::min(k, n);
    std::vector<long> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0L);
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](long a, long b) {
        return values[a] != values[b] ? values[a] > values[b] : a < b;
    });
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

Tensor top_fraction_mask(const Tensor& map2d, double frac) {
    if (map2d.rank() != 2)
        throw InvalidArgument("top_fraction_mask: expected rank-2 map, got " + map2d.shape_str());
    Tensor mask = Tensor::zeros(map2d.shape());
    for (long i : top_fraction_indices(map2d.data(), map2d.numel(), frac)) mask[i] = 1.0;
    return mask;
}

std::pair<double, double> center_of_mass(const Tensor& map2d, bool* flagged) {
    if (map2d.rank() != 2)
        throw InvalidArgument("center_of_mass: expected rank-2 map, got " + map2d.shape_str());
    const int h = map2d.dim(0), w = map2d.dim(1);
    double total = 0, my = 0, mx = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = map2d[static_cast<long>(y) * w + x];
            total += v;
            my += v * y;
            mx += v * x;
        }
    if (flagged) *flagged = total == 0.0;
    if (total == 0.0) return {(h - 1) / 2.0, (w - 1) / 2.0}; // convention: image center
    return {my / total, mx / total};
}

ShiftMetrics shift_metrics(const CamMap& before, const CamMap& after) {
    if (!before.values.same_shape(after.values))
        throw InvalidArgument("shift_metrics: map shapes differ, " + before.values.shape_str() +
                              " vs " + after.values.shape_str());
    const long n = before.values.numel();
    ShiftMetrics m;

    std::vector<double> a(before.values.data(), before.values.data() + n);
    std::vector<double> b(after.values.data(), after.values.data() + n);
    m.rank_correlation = spearman(a, b);

    constexpr double kTopFrac = 0.05;
    const std::vector<long> ta = top_fraction_indices(before.values.data(), n, kTopFrac);
    const std::vector<long> tb = top_fraction_indices(after.values.data(), n, kTopFrac);
    std::vector<char> in_a(static_cast<size_t>(n), 0);
    for (long i : ta) in_a[static_cast<size_t>(i)] = 1;
    long common = 0;
    for (long i : tb)
        if (in_a[static_cast<size_t>(i)]) ++common;
    m.topk_overlap = static_cast<double>(common) / static_cast<double>(ta.size());

    bool fa = false, fb = false;
    const auto ca = center_of_mass(before.values, &fa);
    const auto cb = center_of_mass(after.values, &fb);
    m.com_flagged = fa || fb;
    m.com_displacement = std::hypot(ca.first - cb.first, ca.second - cb.second);
    return m;
}

namespace {
std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "na";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return buf;
}
std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}
} // namespace

std::string attack_csv_header() {
    return "image_id,mode,label_before,label_after,conf_before,conf_after,rho,topk,com_px,linf";
}

std::string attack_csv_row(const std::string& image_id, const std::string& mode,
                           int label_before, int label_after, double conf_before,
                           double conf_after, const ShiftMetrics& m) {
    std::string row = image_id;
    row += ',';
    row += mode;
    row += ',';
    row += std::to_string(label_before);
    row += ',';
    row += std::to_string(label_after);
    row += ',';
    row += fmt(conf_before);
    row += ',';
    row += fmt(conf_after);
    row += ',';
    row += fmt_opt(m.rank_correlation);
    row += ',';
    row += fmt(m.topk_overlap);
    row += ',';
    row += fmt(m.com_displacement);
    row += ',';
    row += fmt(m.linf_delta);
    return row;
}

} // namespace gradshift
