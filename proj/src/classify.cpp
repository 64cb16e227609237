#include "craniossm/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "craniossm/error.hpp"
#include "craniossm/parallel.hpp"

namespace craniossm {

namespace {

// Distinct labels in ascending order, with their row lists.
std::map<int, std::vector<Eigen::Index>> group_rows(const Eigen::MatrixXd& X, const std::vector<int>& labels) {
    if (static_cast<Eigen::Index>(labels.size()) != X.rows())
        throw ValidationError("label count does not match the feature rows");
    if (X.rows() == 0) throw ValidationError("empty training set");
    if (!X.allFinite()) throw ValidationError("non-finite features");
    std::map<int, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        if (labels[i] < 0) throw ValidationError("negative class label");
        groups[labels[i]].push_back(i);
    }
    return groups;
}

int argmax_lowest(const std::vector<int>& classes, const std::vector<double>& scores) {
    size_t best = 0;
    for (size_t c = 1; c < scores.size(); ++c)
        if (scores[c] > scores[best]) best = c;
    return classes[best];
}

Eigen::MatrixXd feature_matrix(const FeatureSet& set, int components) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(set.size()), components);
    for (size_t i = 0; i < set.size(); ++i) {
        if (set[i].alpha.size() < components)
            throw ValidationError("sample '" + set[i].subject_id + "' has fewer than " + std::to_string(components) +
                                  " coefficients");
        X.row(static_cast<Eigen::Index>(i)) = set[i].alpha.head(components).transpose();
    }
    return X;
}

std::vector<int> label_vector(const FeatureSet& set) {
    std::vector<int> out;
    out.reserve(set.size());
    for (const auto& s : set) out.push_back(static_cast<int>(s.label));
    return out;
}

class LdaClassifier : public Classifier {
public:
    void train(const Eigen::MatrixXd& X, const std::vector<int>& labels) override { model_ = lda_train(X, labels); }
    int predict(const Eigen::VectorXd& x) const override { return lda_predict(model_, x); }
    std::string name() const override { return "lda"; }

private:
    LdaModel model_;
};

class NaiveBayesClassifier : public Classifier {
public:
    void train(const Eigen::MatrixXd& X, const std::vector<int>& labels) override { model_ = nb_train(X, labels); }
    int predict(const Eigen::VectorXd& x) const override { return nb_predict(model_, x); }
    std::string name() const override { return "nb"; }

private:
    NaiveBayesModel model_;
};

class KnnClassifier : public Classifier {
public:
    explicit KnnClassifier(int k) : k_(k) {}
    void train(const Eigen::MatrixXd& X, const std::vector<int>& labels) override {
        group_rows(X, labels);
        X_ = X;
        labels_ = labels;
    }
    int predict(const Eigen::VectorXd& x) const override { return knn_predict(X_, labels_, k_, x); }
    std::string name() const override { return "knn"; }

private:
    int k_;
    Eigen::MatrixXd X_;
    std::vector<int> labels_;
};

}  // namespace

// ---------------------------------------------------------------------------

LdaModel lda_train(const Eigen::MatrixXd& X, const std::vector<int>& labels) {
    const auto groups = group_rows(X, labels);
    if (groups.size() < 2) throw ValidationError("LDA needs at least two classes");
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    const auto C = static_cast<Eigen::Index>(groups.size());

    LdaModel model;
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(d, d);
    for (const auto& [label, rows] : groups) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
        for (auto r : rows) mu += X.row(r).transpose();
        mu /= static_cast<double>(rows.size());
        for (auto r : rows) {
            const Eigen::VectorXd diff = X.row(r).transpose() - mu;
            scatter.noalias() += diff * diff.transpose();
        }
        model.classes.push_back(label);
        model.means.push_back(mu);
        model.log_priors.push_back(std::log(static_cast<double>(rows.size()) / static_cast<double>(n)));
    }
    if (n - C <= 0) warn("LDA: no within-class degrees of freedom; covariance denominator clamped to 1");
    Eigen::MatrixXd sigma = scatter / static_cast<double>(std::max<Eigen::Index>(n - C, 1));

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma, Eigen::EigenvaluesOnly);
    const double top = eig.eigenvalues().maxCoeff();
    const double bottom = eig.eigenvalues().minCoeff();
    if (!(top > 0.0) || bottom <= 1e-12 * top) {
        const double trace = sigma.trace();
        const double ridge = trace > 0.0 ? 1e-8 * trace / static_cast<double>(d) : 1.0;
        warn("LDA: pooled covariance is singular; adding ridge " + std::to_string(ridge));
        sigma.diagonal().array() += ridge;
    }
    model.covariance.compute(sigma);
    if (model.covariance.info() != Eigen::Success) throw NumericalError("LDA covariance factorization failed");
    return model;
}

std::vector<double> lda_discriminants(const LdaModel& model, const Eigen::VectorXd& x) {
    std::vector<double> scores;
    scores.reserve(model.classes.size());
    for (size_t c = 0; c < model.classes.size(); ++c) {
        const Eigen::VectorXd diff = x - model.means[c];
        const Eigen::VectorXd z = model.covariance.matrixL().solve(diff);
        scores.push_back(model.log_priors[c] - 0.5 * z.squaredNorm());
    }
    return scores;
}

int lda_predict(const LdaModel& model, const Eigen::VectorXd& x) {
    if (x.size() != (model.means.empty() ? 0 : model.means.front().size()))
        throw ValidationError("feature length does not match the LDA model");
    return argmax_lowest(model.classes, lda_discriminants(model, x));
}

NaiveBayesModel nb_train(const Eigen::MatrixXd& X, const std::vector<int>& labels) {
    const auto groups = group_rows(X, labels);
    const Eigen::Index n = X.rows();
    const Eigen::RowVectorXd grand = X.colwise().mean();
    const double max_var = X.cols() ? (X.rowwise() - grand).colwise().squaredNorm().maxCoeff() / n : 0.0;
    const double smoothing = max_var > 0.0 ? 1e-9 * max_var : 1e-9;

    NaiveBayesModel model;
    for (const auto& [label, rows] : groups) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(X.cols());
        for (auto r : rows) mu += X.row(r).transpose();
        mu /= static_cast<double>(rows.size());
        Eigen::VectorXd var = Eigen::VectorXd::Zero(X.cols());
        for (auto r : rows) var += (X.row(r).transpose() - mu).cwiseAbs2();
        var /= static_cast<double>(rows.size());
        var.array() += smoothing;
        model.classes.push_back(label);
        model.means.push_back(mu);
        model.variances.push_back(var);
        model.log_priors.push_back(std::log(static_cast<double>(rows.size()) / static_cast<double>(n)));
    }
    return model;
}

int nb_predict(const NaiveBayesModel& model, const Eigen::VectorXd& x) {
    std::vector<double> scores;
    for (size_t c = 0; c < model.classes.size(); ++c) {
        if (x.size() != model.means[c].size()) throw ValidationError("feature length does not match the NB model");
        const auto& var = model.variances[c].array();
        const double ll = -0.5 * ((2.0 * std::numbers::pi * var).log() + (x - model.means[c]).array().square() / var).sum();
        scores.push_back(model.log_priors[c] + ll);
    }
    return argmax_lowest(model.classes, scores);
}

int knn_predict(const Eigen::MatrixXd& X, const std::vector<int>& labels, int k, const Eigen::VectorXd& x) {
    if (static_cast<Eigen::Index>(labels.size()) != X.rows()) throw ValidationError("label count mismatch");
    if (k < 1 || k > X.rows())
        throw ValidationError("kNN needs 1 <= k <= training size (k=" + std::to_string(k) + ", n=" +
                              std::to_string(X.rows()) + ")");
    if (x.size() != X.cols()) throw ValidationError("feature length does not match the training data");
    std::vector<std::pair<double, Eigen::Index>> dist(static_cast<size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) dist[i] = {(X.row(i).transpose() - x).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

    std::map<int, int> votes;
    for (int i = 0; i < k; ++i) ++votes[labels[dist[i].second]];
    int top = 0;
    for (const auto& [label, count] : votes) top = std::max(top, count);
    for (int i = 0; i < k; ++i) {
        const int label = labels[dist[i].second];
        if (votes[label] == top) return label;
    }
    return labels[dist[0].second];
}

std::string_view classifier_name(ClassifierKind kind) {
    switch (kind) {
        case ClassifierKind::Lda: return "lda";
        case ClassifierKind::NaiveBayes: return "nb";
        case ClassifierKind::Knn: return "knn";
    }
    return "lda";
}

ClassifierKind classifier_from_name(std::string_view name) {
    if (name == "lda") return ClassifierKind::Lda;
    if (name == "nb") return ClassifierKind::NaiveBayes;
    if (name == "knn") return ClassifierKind::Knn;
    throw ValidationError("unknown classifier '" + std::string(name) + "' (expected lda, nb or knn)");
}

std::unique_ptr<Classifier> make_classifier(ClassifierKind kind, int knn_k) {
    switch (kind) {
        case ClassifierKind::Lda: return std::make_unique<LdaClassifier>();
        case ClassifierKind::NaiveBayes: return std::make_unique<NaiveBayesClassifier>();
        case ClassifierKind::Knn: return std::make_unique<KnnClassifier>(knn_k);
    }
    return std::make_unique<LdaClassifier>();
}

// ---------------------------------------------------------------------------

ClassificationReport report_metrics(const Eigen::MatrixXi& confusion) {
    if (confusion.rows() != confusion.cols() || confusion.rows() == 0)
        throw ValidationError("confusion matrix must be square and non-empty");
    if (confusion.minCoeff() < 0) throw ValidationError("confusion matrix has negative counts");
    const Eigen::Index C = confusion.rows();
    const double total = confusion.sum();
    ClassificationReport r;
    r.confusion = confusion;
    r.sensitivity.resize(C);
    r.specificity.resize(C);
    double log_sum = 0.0;
    int defined = 0;
    bool zero_factor = false;
    for (Eigen::Index c = 0; c < C; ++c) {
        const double tp = confusion(c, c);
        const double row = confusion.row(c).sum();
        const double col = confusion.col(c).sum();
        const double tn = total - row - col + tp;
        const double fp = col - tp;
        if (row > 0) {
            r.sensitivity(c) = tp / row;
            ++defined;
            if (tp == 0) zero_factor = true;
            else log_sum += std::log(r.sensitivity(c));
        } else {
            r.sensitivity(c) = NAN;
            warn("class " + std::to_string(c) + " has no test samples; sensitivity undefined");
        }
        r.specificity(c) = (tn + fp) > 0 ? tn / (tn + fp) : NAN;
    }
    r.accuracy = total > 0 ? confusion.trace() / total : NAN;
    r.g_mean = defined == 0 ? NAN : zero_factor ? 0.0 : std::exp(log_sum / defined);
    return r;
}

std::vector<int> make_folds(const FeatureSet& features, int n_folds, std::uint64_t seed) {
    if (n_folds < 2) throw ValidationError("cross-validation needs at least two folds");
    std::vector<int> folds(features.size(), -1);
    std::map<std::string, size_t> original_index;
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < features.size(); ++i) {
        if (features[i].mirrored) continue;
        if (!original_index.emplace(features[i].subject_id, i).second)
            throw ValidationError("duplicate subject id '" + features[i].subject_id + "'");
        by_class[static_cast<int>(features[i].label)].push_back(i);
    }
    std::mt19937_64 rng(seed);
    int counter = 0;
    for (auto& [label, members] : by_class) {
        if (static_cast<int>(members.size()) < n_folds)
            warn("class '" + std::string(class_name(static_cast<DiagnosisClass>(label))) + "' has " +
                 std::to_string(members.size()) + " originals, fewer than " + std::to_string(n_folds) +
                 " folds; it is absent from some folds");
        std::shuffle(members.begin(), members.end(), rng);
        for (size_t i : members) folds[i] = counter++ % n_folds;
    }
    for (size_t i = 0; i < features.size(); ++i) {
        if (!features[i].mirrored) continue;
        if (!features[i].twin_id) throw ValidationError("mirror '" + features[i].subject_id + "' has no twin id");
        const auto it = original_index.find(*features[i].twin_id);
        if (it == original_index.end())
            throw ValidationError("mirror '" + features[i].subject_id + "' has no original '" + *features[i].twin_id +
                                  "' in the feature set");
        folds[i] = folds[it->second];
    }
    return folds;
}

std::vector<FoldSplit> fold_splits(const FeatureSet& features, const std::vector<int>& folds) {
    if (folds.size() != features.size()) throw ValidationError("fold assignment does not match the feature set");
    std::map<std::string, size_t> original_index;
    int n_folds = 0;
    for (size_t i = 0; i < features.size(); ++i) {
        if (folds[i] < 0) throw ValidationError("sample '" + features[i].subject_id + "' has no fold");
        n_folds = std::max(n_folds, folds[i] + 1);
        if (!features[i].mirrored) original_index.emplace(features[i].subject_id, i);
    }
    for (size_t i = 0; i < features.size(); ++i) {
        if (!features[i].mirrored) continue;
        const auto it = features[i].twin_id ? original_index.find(*features[i].twin_id) : original_index.end();
        if (it == original_index.end())
            throw ValidationError("mirror '" + features[i].subject_id + "' has no original in the feature set");
        if (folds[i] != folds[it->second])
            throw ValidationError("leakage: mirror '" + features[i].subject_id + "' is in fold " +
                                  std::to_string(folds[i]) + " but its original '" + *features[i].twin_id +
                                  "' is tested in fold " + std::to_string(folds[it->second]));
    }
    std::vector<FoldSplit> splits(static_cast<size_t>(n_folds));
    for (size_t i = 0; i < features.size(); ++i)
        for (int f = 0; f < n_folds; ++f) {
            if (folds[i] != f) splits[f].train.push_back(i);
            else if (!features[i].mirrored) splits[f].test.push_back(i);
        }
    return splits;
}

Eigen::MatrixXi evaluate_split(const FeatureSet& train, const FeatureSet& test, Classifier& classifier,
                               int components) {
    if (components < 1) throw ValidationError("need at least one component");
    classifier.train(feature_matrix(train, components), label_vector(train));
    Eigen::MatrixXi confusion = Eigen::MatrixXi::Zero(kClassCount, kClassCount);
    const Eigen::MatrixXd Xt = feature_matrix(test, components);
    for (size_t i = 0; i < test.size(); ++i) {
        const int predicted = classifier.predict(Xt.row(static_cast<Eigen::Index>(i)).transpose());
        ++confusion(static_cast<int>(test[i].label), predicted);
    }
    return confusion;
}

ClassificationReport cross_validate(const FeatureSet& features, const std::vector<int>& folds,
                                    const ClassifierFactory& factory, int components) {
    const auto splits = fold_splits(features, folds);
    Eigen::MatrixXi confusion = Eigen::MatrixXi::Zero(kClassCount, kClassCount);
    std::string name;
    for (const auto& split : splits) {
        if (split.test.empty()) continue;
        FeatureSet train, test;
        for (size_t i : split.train) train.push_back(features[i]);
        for (size_t i : split.test) test.push_back(features[i]);
        auto classifier = factory();
        name = classifier->name();
        confusion += evaluate_split(train, test, *classifier, components);
    }
    ClassificationReport report = report_metrics(confusion);
    report.chosen_components = components;
    report.classifier_name = name;
    return report;
}

ClassificationReport stratified_cv(const FeatureSet& features, const ClassifierFactory& factory, int n_folds,
                                   int components, std::uint64_t seed) {
    return cross_validate(features, make_folds(features, n_folds, seed), factory, components);
}

SweepResult sweep_components(const FeatureSet& features, const ClassifierFactory& factory, int max_components,
                             int n_folds, std::uint64_t seed, int jobs) {
    if (features.empty()) throw ValidationError("empty feature set");
    Eigen::Index length = features.front().alpha.size();
    for (const auto& s : features) length = std::min(length, s.alpha.size());
    if (length < 1) throw ValidationError("features need at least one coefficient");
    const int top = static_cast<int>(std::min<Eigen::Index>(max_components, length));
    if (top < 1) throw ValidationError("component sweep needs max_components >= 1");

    const auto folds = make_folds(features, n_folds, seed);
    std::vector<ClassificationReport> reports(static_cast<size_t>(top));
    parallel_for(reports.size(), jobs,
                 [&](size_t m) { reports[m] = cross_validate(features, folds, factory, static_cast<int>(m) + 1); });

    SweepResult result;
    size_t best = 0;
    for (size_t m = 0; m < reports.size(); ++m) {
        result.curve.emplace_back(static_cast<int>(m) + 1, reports[m].accuracy);
        if (reports[m].accuracy > reports[best].accuracy) best = m;
    }
    result.best_components = static_cast<int>(best) + 1;
    result.report = reports[best];
    return result;
}

nlohmann::json report_json(const ClassificationReport& report, const std::vector<std::pair<int, double>>& curve) {
    auto number = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json confusion = nlohmann::json::array();
    for (Eigen::Index r = 0; r < report.confusion.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < report.confusion.cols(); ++c) row.push_back(report.confusion(r, c));
        confusion.push_back(row);
    }
    nlohmann::json per_class = nlohmann::json::object();
    for (Eigen::Index c = 0; c < report.sensitivity.size(); ++c) {
        const std::string key = c < kClassCount ? std::string(class_name(static_cast<DiagnosisClass>(c)))
                                                : std::to_string(c);
        per_class[key] = {{"sensitivity", number(report.sensitivity(c))},
                          {"specificity", number(report.specificity(c))}};
    }
    nlohmann::json doc;
    doc["classifier"] = report.classifier_name;
    doc["class_order"] = nlohmann::json::array();
    for (Eigen::Index c = 0; c < report.confusion.rows() && c < kClassCount; ++c)
        doc["class_order"].push_back(class_name(static_cast<DiagnosisClass>(c)));
    doc["confusion"] = confusion;
    doc["per_class"] = per_class;
    doc["accuracy"] = number(report.accuracy);
    doc["g_mean"] = number(report.g_mean);
    doc["best_components"] = report.chosen_components;
    nlohmann::json c = nlohmann::json::array();
    for (const auto& [m, acc] : curve) c.push_back({m, number(acc)});
    doc["curve"] = c;
    return doc;
}

std::string report_text(const ClassificationReport& report) {
    std::ostringstream out;
    char buf[256];
    const Eigen::Index C = report.confusion.rows();
    auto label = [](Eigen::Index c) {
        return c < kClassCount ? std::string(class_name(static_cast<DiagnosisClass>(c))) : std::to_string(c);
    };
    std::snprintf(buf, sizeof buf, "%-12s", "true\\pred");
    out << buf;
    for (Eigen::Index c = 0; c < C; ++c) {
        std::snprintf(buf, sizeof buf, "%10s", label(c).c_str());
        out << buf;
    }
    out << "  sensitivity  specificity\n";
    for (Eigen::Index r = 0; r < C; ++r) {
        std::snprintf(buf, sizeof buf, "%-12s", label(r).c_str());
        out << buf;
        for (Eigen::Index c = 0; c < C; ++c) {
            std::snprintf(buf, sizeof buf, "%10d", report.confusion(r, c));
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "  %11.3f  %11.3f\n", report.sensitivity(r), report.specificity(r));
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "accuracy %.3f  g-mean %.3f  components %d  classifier %s\n", report.accuracy,
                  report.g_mean, report.chosen_components, report.classifier_name.c_str());
    out << buf;
    return out.str();
}

}  // namespace craniossm
