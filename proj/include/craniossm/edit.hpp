#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "craniossm/classify.hpp"
#include "craniossm/ssm.hpp"

namespace craniossm {

using ClassMeanCoefficients = std::map<DiagnosisClass, Eigen::VectorXd>;

/// alpha + mean_to - mean_from.
Eigen::VectorXd pathology_transfer(const Eigen::VectorXd& alpha, const ClassMeanCoefficients& means,
                                   DiagnosisClass from, DiagnosisClass to);

/// Per-class average of the coefficient vectors. Every class must be present
/// and every vector must have the model's full length.
ClassMeanCoefficients class_mean_coefficients(const ShapeModel& model, const FeatureSet& features);

struct FlexibilityBasis {
    Eigen::MatrixXd modes;      // k x m coefficient directions
    Eigen::VectorXd ratios;     // m generalized eigenvalues, descending
    std::vector<int> fixed;     // model vertices held fixed
};

/// Directions in coefficient space that move the free vertices most while
/// moving the fixed ones least: A c = lambda (B + eps tr(B)/k I) c with
/// A, B the Gram matrices of W = V diag(sqrt(lambda)) restricted to the free
/// and fixed coordinates. Modes are scaled to unit free-region RMS displacement.
FlexibilityBasis flexibility_modes(const ShapeModel& model, const std::vector<int>& fixed_vertices, int m,
                                   double eps = 1e-6);

/// Shape displacement (3p) of a coefficient direction, W c.
Eigen::VectorXd mode_displacement(const ShapeModel& model, const Eigen::VectorXd& c);

/// Writes flex_modes.f64 (k x m, row-major), flex_ratios.f64, flex_fixed.u32
/// and flex.json (sizes and checksums) into a model directory.
void save_flexibility(const FlexibilityBasis& basis, const std::filesystem::path& dir);
FlexibilityBasis load_flexibility(const std::filesystem::path& dir);

}  // namespace craniossm
