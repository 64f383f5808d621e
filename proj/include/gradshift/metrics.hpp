#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradshift/tensor.hpp"

namespace gradshift {

struct CamMap; // gradcam.hpp

struct ClassificationMetrics {
    double accuracy = 0.0;
    std::optional<double> sensitivity; // TP/(TP+FN), malignant positive; empty when undefined
    std::optional<double> specificity; // TN/(TN+FP)
};

ClassificationMetrics classification_metrics(const std::vector<int>& predictions,
                                             const std::vector<int>& labels);

// How far an importance map moved. rank_correlation is empty when either map
// is constant (Spearman undefined); com_flagged marks centroids that fell
// back to the image center because a map carried no mass.
struct ShiftMetrics {
    std::optional<double> rank_correlation; // Spearman rho over flattened values
    double topk_overlap = 0.0;              // |topK before ∩ topK after| / K, K = 5% of pixels
    double com_displacement = 0.0;          // importance-weighted centroid distance, pixels
    bool com_flagged = false;
    double linf_delta = 0.0;
};

ShiftMetrics shift_metrics(const CamMap& before, const CamMap& after);

// Spearman rank correlation with average ranks for ties; empty if either
// input is constant.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

// Indices of the ceil(frac*n) largest values, ties broken by lower index.
std::vector<long> top_fraction_indices(const double* values, long n, double frac);

// 1.0 on the top-frac cells of a 2-D map, 0.0 elsewhere.
Tensor top_fraction_mask(const Tensor& map2d, double frac);

// Importance-weighted centroid (y, x); falls back to the image center for a
// zero map (flag reported through the bool).
std::pair<double, double> center_of_mass(const Tensor& map2d, bool* flagged = nullptr);

// Stable header + row formatting for attacks.csv.
std::string attack_csv_header();
std::string attack_csv_row(const std::string& image_id, const std::string& mode,
                           int label_before, int label_after, double conf_before,
                           double conf_after, const ShiftMetrics& m);

} // namespace gradshift
