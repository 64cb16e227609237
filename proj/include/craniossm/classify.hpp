#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "craniossm/mesh.hpp"

namespace craniossm {

/// One observation in coefficient space.
struct Sample {
    Eigen::VectorXd alpha;
    DiagnosisClass label = DiagnosisClass::Control;
    std::string subject_id;
    bool mirrored = false;
    std::optional<std::string> twin_id;
};
using FeatureSet = std::vector<Sample>;

// --- classifiers ---------------------------------------------------------------
// Labels are class indices 0..C-1. Rows of X are observations.

struct LdaModel {
    std::vector<int> classes;
    std::vector<Eigen::VectorXd> means;
    std::vector<double> log_priors;
    Eigen::LLT<Eigen::MatrixXd> covariance;  // pooled within-class, denominator n - C
};

LdaModel lda_train(const Eigen::MatrixXd& X, const std::vector<int>& labels);
/// argmax_c log pi_c - (x - mu_c)^T S^-1 (x - mu_c) / 2; ties go to the lower class.
int lda_predict(const LdaModel& model, const Eigen::VectorXd& x);
std::vector<double> lda_discriminants(const LdaModel& model, const Eigen::VectorXd& x);

struct NaiveBayesModel {
    std::vector<int> classes;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::VectorXd> variances;  // population variance plus smoothing
    std::vector<double> log_priors;
};

NaiveBayesModel nb_train(const Eigen::MatrixXd& X, const std::vector<int>& labels);
int nb_predict(const NaiveBayesModel& model, const Eigen::VectorXd& x);

/// Majority vote of the k nearest training rows (Euclidean). On a vote tie the
/// tied class holding the nearest neighbour wins. Equal distances are ordered
/// by training row.
int knn_predict(const Eigen::MatrixXd& X, const std::vector<int>& labels, int k, const Eigen::VectorXd& x);

enum class ClassifierKind { Lda, NaiveBayes, Knn };
std::string_view classifier_name(ClassifierKind kind);
ClassifierKind classifier_from_name(std::string_view name);  // throws ValidationError

class Classifier {
public:
    virtual ~Classifier() = default;
    virtual void train(const Eigen::MatrixXd& X, const std::vector<int>& labels) = 0;
    virtual int predict(const Eigen::VectorXd& x) const = 0;
    virtual std::string name() const = 0;
};

std::unique_ptr<Classifier> make_classifier(ClassifierKind kind, int knn_k = 5);

// --- evaluation ------------------------------------------------------------------

struct ClassificationReport {
    Eigen::MatrixXi confusion;  // C x C, rows = true class
    Eigen::VectorXd sensitivity;
    Eigen::VectorXd specificity;
    double accuracy = 0.0;
    double g_mean = 0.0;
    int chosen_components = 0;
    std::string classifier_name;
};

/// Per-class sensitivity and specificity, accuracy, and the geometric mean of
/// the per-class sensitivities. A class without test samples has NaN
/// sensitivity (warning) and is left out of the geometric mean.
ClassificationReport report_metrics(const Eigen::MatrixXi& confusion);

/// Fold of every sample. Originals are shuffled within their class (seeded)
/// and dealt round-robin, the counter running on across classes. Mirrors take
/// the fold of their twin.
std::vector<int> make_folds(const FeatureSet& features, int n_folds, std::uint64_t seed);

struct FoldSplit {
    std::vector<size_t> train;  // originals outside the fold and their mirrors
    std::vector<size_t> test;   // originals inside the fold
};

/// Splits for a fold assignment. Throws ValidationError when a mirror does not
/// share its twin's fold, since it would then train on a test subject.
std::vector<FoldSplit> fold_splits(const FeatureSet& features, const std::vector<int>& folds);

/// Confusion matrix of one split using the first `components` coefficients.
Eigen::MatrixXi evaluate_split(const FeatureSet& train, const FeatureSet& test, Classifier& classifier,
                               int components);

using ClassifierFactory = std::function<std::unique_ptr<Classifier>()>;

ClassificationReport cross_validate(const FeatureSet& features, const std::vector<int>& folds,
                                    const ClassifierFactory& factory, int components);
ClassificationReport stratified_cv(const FeatureSet& features, const ClassifierFactory& factory, int n_folds,
                                   int components, std::uint64_t seed);

struct SweepResult {
    int best_components = 0;
    ClassificationReport report;
    std::vector<std::pair<int, double>> curve;  // (components, accuracy)
};

/// Cross-validated accuracy for m = 1..min(max_components, feature length);
/// the best m wins, ties going to the smaller m.
SweepResult sweep_components(const FeatureSet& features, const ClassifierFactory& factory, int max_components,
                             int n_folds, std::uint64_t seed, int jobs = 1);

nlohmann::json report_json(const ClassificationReport& report,
                           const std::vector<std::pair<int, double>>& curve = {});
/// Confusion table with sensitivity and specificity columns.
std::string report_text(const ClassificationReport& report);

}  // namespace craniossm
