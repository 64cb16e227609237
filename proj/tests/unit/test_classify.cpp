#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "support.hpp"

#include "craniossm/classify.hpp"
#include "craniossm/error.hpp"

using namespace craniossm;

namespace {

// n originals per class (optionally with mirrored twins), class c centred at
// offset * e_c in d dimensions plus unit noise.
FeatureSet make_features(std::mt19937_64& rng, int per_class, int d, double offset, bool mirrors,
                         int classes = kClassCount) {
    FeatureSet out;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            Sample s;
            s.alpha = testing::random_matrix(rng, d, 1);
            if (c < d) s.alpha(c) += offset;
            s.label = static_cast<DiagnosisClass>(c);
            s.subject_id = std::string(class_name(s.label)) + "_" + std::to_string(i);
            if (mirrors) {
                Sample m = s;
                m.alpha += 0.1 * testing::random_matrix(rng, d, 1);
                m.mirrored = true;
                m.subject_id = s.subject_id + "_mirror";
                m.twin_id = s.subject_id;
                s.twin_id = m.subject_id;
                out.push_back(s);
                out.push_back(m);
            } else {
                out.push_back(s);
            }
        }
    return out;
}

ClassifierFactory factory(ClassifierKind kind) {
    return [kind] { return make_classifier(kind); };
}

std::vector<int> labels_of(const std::vector<int>& counts) {
    std::vector<int> labels;
    for (size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
    return labels;
}

}  // namespace

TEST_SUITE("classify") {

TEST_CASE("LDA boundary sits at the midpoint of symmetric clusters") {
    Eigen::MatrixXd X(6, 1);
    X << -1, 0, 1, 3, 4, 5;
    const LdaModel model = lda_train(X, labels_of({3, 3}));
    CHECK(lda_predict(model, Eigen::VectorXd::Constant(1, 1.999)) == 0);
    CHECK(lda_predict(model, Eigen::VectorXd::Constant(1, 2.001)) == 1);
    CHECK(lda_predict(model, Eigen::VectorXd::Constant(1, 2.0)) == 0);
    for (Eigen::Index i = 0; i < 6; ++i) CHECK(lda_predict(model, X.row(i).transpose()) == (i < 3 ? 0 : 1));
}

TEST_CASE("LDA discriminants match the direct formula") {
    std::mt19937_64 rng(1);
    Eigen::Matrix2d L;
    L << 2.0, 0.0, 0.8, 0.5;
    Eigen::MatrixXd X(50, 2);
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        const int c = i < 20 ? 0 : 1;
        X.row(i) = (L * testing::random_matrix(rng, 2, 1)).transpose() + Eigen::RowVector2d(c * 1.5, -c);
        labels.push_back(c);
    }
    const LdaModel model = lda_train(X, labels);

    // Independent evaluation: pooled covariance with denominator n - C.
    Eigen::Vector2d mu[2] = {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
    int count[2] = {0, 0};
    for (int i = 0; i < 50; ++i) {
        mu[labels[i]] += X.row(i).transpose();
        ++count[labels[i]];
    }
    for (int c = 0; c < 2; ++c) mu[c] /= count[c];
    Eigen::Matrix2d S = Eigen::Matrix2d::Zero();
    for (int i = 0; i < 50; ++i) {
        const Eigen::Vector2d d = X.row(i).transpose() - mu[labels[i]];
        S += d * d.transpose();
    }
    S /= 48.0;
    const Eigen::Matrix2d Sinv = S.inverse();
    for (int t = 0; t < 40; ++t) {
        const Eigen::Vector2d x = 3.0 * testing::random_matrix(rng, 2, 1);
        double score[2];
        for (int c = 0; c < 2; ++c)
            score[c] = std::log(count[c] / 50.0) - 0.5 * (x - mu[c]).dot(Sinv * (x - mu[c]));
        const auto got = lda_discriminants(model, x);
        REQUIRE(got[0] == doctest::Approx(score[0]).epsilon(1e-10));
        REQUIRE(got[1] == doctest::Approx(score[1]).epsilon(1e-10));
        REQUIRE(lda_predict(model, x) == (score[1] > score[0] ? 1 : 0));
    }
}

TEST_CASE("LDA predictions are invariant under affine maps") {
    std::mt19937_64 rng(2);
    const Eigen::Index d = 3;
    Eigen::MatrixXd X(60, d);
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
        labels.push_back(i % 3);
        X.row(i) = testing::random_matrix(rng, d, 1).transpose();
        X(i, i % 3) += 1.5;
    }
    const Eigen::MatrixXd tests = 2.0 * testing::random_matrix(rng, 50, d);
    const LdaModel base = lda_train(X, labels);
    for (int trial = 0; trial < 5; ++trial) {
        const Eigen::MatrixXd A = testing::random_matrix(rng, d, d) + 2.0 * Eigen::MatrixXd::Identity(d, d);
        const Eigen::RowVectorXd b = 5.0 * testing::random_matrix(rng, 1, d);
        const Eigen::MatrixXd Y = (X * A.transpose()).rowwise() + b;
        const LdaModel moved = lda_train(Y, labels);
        for (Eigen::Index t = 0; t < tests.rows(); ++t) {
            const Eigen::VectorXd x = tests.row(t).transpose();
            REQUIRE(lda_predict(moved, A * x + b.transpose()) == lda_predict(base, x));
        }
    }
}

TEST_CASE("LDA regularizes a singular covariance") {
    Eigen::MatrixXd X(4, 2);
    X << 0, 0, 1, 0, 5, 0, 6, 0;  // second feature constant
    const LdaModel model = lda_train(X, labels_of({2, 2}));
    CHECK(lda_predict(model, Eigen::Vector2d(0.2, 0.0)) == 0);
    CHECK(lda_predict(model, Eigen::Vector2d(5.8, 0.0)) == 1);
    CHECK_THROWS_AS(lda_train(X, labels_of({4})), ValidationError);
}

TEST_CASE("naive Bayes midpoint tie and prior") {
    Eigen::MatrixXd X(6, 1);
    X << -1, 0, 1, 3, 4, 5;
    CHECK(nb_predict(nb_train(X, labels_of({3, 3})), Eigen::VectorXd::Constant(1, 2.0)) == 0);

    // Same class-1 spread with twice the samples: the prior decides.
    Eigen::MatrixXd Y(9, 1);
    Y << -1, 0, 1, 3, 4, 5, 3, 4, 5;
    CHECK(nb_predict(nb_train(Y, labels_of({3, 6})), Eigen::VectorXd::Constant(1, 2.0)) == 1);
}

TEST_CASE("naive Bayes survives a constant feature") {
    Eigen::MatrixXd X(6, 2);
    X << 0, 1, 1, 1, 2, 1, 5, 3, 6, 4, 7, 5;
    const NaiveBayesModel model = nb_train(X, labels_of({3, 3}));
    for (const auto& v : model.variances) CHECK(v.minCoeff() > 0.0);
    CHECK(nb_predict(model, Eigen::Vector2d(1.0, 1.0)) == 0);
    CHECK(nb_predict(model, Eigen::Vector2d(6.0, 4.0)) == 1);
}

TEST_CASE("naive Bayes agrees with LDA on isotropic data") {
    std::mt19937_64 rng(3);
    const Eigen::Index d = 4;
    Eigen::MatrixXd X(400, d);
    std::vector<int> labels;
    for (int i = 0; i < 400; ++i) {
        labels.push_back(i % 4);
        X.row(i) = testing::random_matrix(rng, d, 1).transpose();
        X(i, i % 4) += 2.0;
    }
    const LdaModel lda = lda_train(X, labels);
    const NaiveBayesModel nb = nb_train(X, labels);
    int agree = 0;
    const int n = 1000;
    for (int t = 0; t < n; ++t) {
        const Eigen::VectorXd x = 1.5 * testing::random_matrix(rng, d, 1) + Eigen::VectorXd::Constant(d, 0.5);
        agree += lda_predict(lda, x) == nb_predict(nb, x);
    }
    CHECK(agree >= 0.95 * n);
}

TEST_CASE("kNN exact match and tie rule") {
    Eigen::MatrixXd X(3, 1);
    X << 0, 10, 20;
    CHECK(knn_predict(X, {0, 1, 2}, 1, Eigen::VectorXd::Constant(1, 10.0)) == 1);

    // Votes 2-2-1 among classes 0, 1, 2; class 1 owns the nearest point.
    Eigen::MatrixXd Y(5, 1);
    Y << 1.0, 2.0, 3.0, 4.0, 5.0;
    const std::vector<int> labels{1, 0, 2, 0, 1};
    CHECK(knn_predict(Y, labels, 5, Eigen::VectorXd::Constant(1, 0.0)) == 1);
    CHECK(knn_predict(Y, labels, 5, Eigen::VectorXd::Constant(1, 2.1)) == 0);
    CHECK_THROWS_AS(knn_predict(Y, labels, 6, Eigen::VectorXd::Constant(1, 0.0)), ValidationError);
    CHECK_THROWS_AS(knn_predict(Y, labels, 0, Eigen::VectorXd::Constant(1, 0.0)), ValidationError);
}

TEST_CASE("kNN matches an exhaustive scan") {
    std::mt19937_64 rng(4);
    const Eigen::MatrixXd X = testing::random_matrix(rng, 200, 3);
    std::vector<int> labels;
    std::uniform_int_distribution<int> pick(0, 3);
    for (int i = 0; i < 200; ++i) labels.push_back(pick(rng));
    for (int t = 0; t < 100; ++t) {
        const Eigen::VectorXd x = testing::random_matrix(rng, 3, 1);
        std::vector<std::pair<double, int>> all;
        for (int i = 0; i < 200; ++i) all.emplace_back((X.row(i).transpose() - x).norm(), i);
        std::sort(all.begin(), all.end());
        std::map<int, int> votes;
        for (int i = 0; i < 5; ++i) ++votes[labels[all[i].second]];
        int best = 0;
        for (const auto& [c, v] : votes) best = std::max(best, v);
        int expected = -1;
        for (int i = 0; i < 5 && expected < 0; ++i)
            if (votes[labels[all[i].second]] == best) expected = labels[all[i].second];
        REQUIRE(knn_predict(X, labels, 5, x) == expected);
    }
}

TEST_CASE("classifier names") {
    CHECK(classifier_from_name("lda") == ClassifierKind::Lda);
    CHECK(classifier_from_name("nb") == ClassifierKind::NaiveBayes);
    CHECK(classifier_from_name("knn") == ClassifierKind::Knn);
    CHECK(classifier_name(ClassifierKind::Knn) == "knn");
    CHECK_THROWS_AS(classifier_from_name("svm"), ValidationError);
    CHECK(make_classifier(ClassifierKind::NaiveBayes)->name() == "nb");
}

TEST_CASE("metrics of the published confusion matrix") {
    // Rows and columns in class order Control, Coronal, Sagittal, Metopic.
    Eigen::MatrixXi m(4, 4);
    m << 178, 0, 0, 0,
         5, 17, 0, 0,
         3, 0, 108, 0,
         0, 0, 0, 56;
    const ClassificationReport r = report_metrics(m);
    CHECK(std::abs(r.accuracy - 0.978) <= 0.001);
    CHECK(std::abs(r.g_mean - 0.931) <= 0.001);
    CHECK(std::abs(r.sensitivity(1) - 0.773) <= 0.001);
    CHECK(std::abs(r.specificity(0) - 0.958) <= 0.001);
    CHECK(std::abs(r.sensitivity(2) - 0.973) <= 0.001);
    CHECK(r.specificity(1) == 1.0);
}

TEST_CASE("metrics edge cases") {
    const ClassificationReport id = report_metrics(Eigen::MatrixXi::Identity(4, 4) * 7);
    CHECK(id.accuracy == 1.0);
    CHECK(id.g_mean == doctest::Approx(1.0));
    CHECK(id.sensitivity.minCoeff() == 1.0);
    CHECK(id.specificity.minCoeff() == 1.0);

    Eigen::MatrixXi miss = Eigen::MatrixXi::Identity(3, 3) * 4;
    miss(2, 2) = 0;
    miss(2, 0) = 4;
    CHECK(report_metrics(miss).g_mean == 0.0);

    Eigen::MatrixXi empty = Eigen::MatrixXi::Identity(3, 3) * 4;
    empty(1, 1) = 0;
    const ClassificationReport r = report_metrics(empty);
    CHECK(std::isnan(r.sensitivity(1)));
    CHECK(r.g_mean == doctest::Approx(1.0));
    CHECK_THROWS_AS(report_metrics(Eigen::MatrixXi::Zero(2, 3)), ValidationError);
    CHECK_THROWS_AS(report_metrics(-Eigen::MatrixXi::Identity(2, 2)), ValidationError);
}

TEST_CASE("folds stratify originals and mirrors follow their twins") {
    std::mt19937_64 rng(5);
    const FeatureSet f = make_features(rng, 23, 3, 2.0, true);
    const auto folds = make_folds(f, 10, 7);
    CHECK(folds == make_folds(f, 10, 7));
    CHECK(folds != make_folds(f, 10, 8));

    std::map<std::string, int> of;
    for (size_t i = 0; i < f.size(); ++i) of[f[i].subject_id] = folds[i];
    std::map<int, std::map<int, int>> per_class;  // class -> fold -> count
    for (size_t i = 0; i < f.size(); ++i) {
        REQUIRE(folds[i] >= 0);
        REQUIRE(folds[i] < 10);
        if (f[i].mirrored) CHECK(folds[i] == of.at(*f[i].twin_id));
        else ++per_class[static_cast<int>(f[i].label)][folds[i]];
    }
    for (auto& [c, counts] : per_class) {
        int lo = 1000, hi = 0;
        for (int k = 0; k < 10; ++k) {
            lo = std::min(lo, counts[k]);
            hi = std::max(hi, counts[k]);
        }
        CHECK(hi - lo <= 1);
    }
}

TEST_CASE("splits test originals only and train on the rest with mirrors") {
    std::mt19937_64 rng(6);
    const FeatureSet f = make_features(rng, 12, 3, 2.0, true);
    const auto folds = make_folds(f, 4, 1);
    const auto splits = fold_splits(f, folds);
    REQUIRE(splits.size() == 4);
    std::set<size_t> tested;
    for (size_t k = 0; k < splits.size(); ++k) {
        std::set<std::string> test_ids;
        for (size_t i : splits[k].test) {
            CHECK_FALSE(f[i].mirrored);
            CHECK(folds[i] == static_cast<int>(k));
            CHECK(tested.insert(i).second);
            test_ids.insert(f[i].subject_id);
        }
        for (size_t i : splits[k].train) {
            CHECK(folds[i] != static_cast<int>(k));
            if (f[i].mirrored) CHECK(test_ids.count(*f[i].twin_id) == 0);
        }
        CHECK(splits[k].train.size() == 2 * (f.size() / 2 - splits[k].test.size()));
    }
    CHECK(tested.size() == f.size() / 2);
}

TEST_CASE("a mirror outside its twin's fold is rejected") {
    std::mt19937_64 rng(7);
    const FeatureSet f = make_features(rng, 10, 3, 2.0, true);
    auto folds = make_folds(f, 5, 3);
    for (size_t i = 0; i < f.size(); ++i)
        if (f[i].mirrored) {
            folds[i] = (folds[i] + 1) % 5;
            break;
        }
    CHECK_THROWS_AS(fold_splits(f, folds), ValidationError);
    CHECK_THROWS_AS(cross_validate(f, folds, factory(ClassifierKind::Lda), 3), ValidationError);

    FeatureSet orphan = f;
    orphan[1].twin_id = "nobody";
    CHECK_THROWS_AS(make_folds(orphan, 5, 3), ValidationError);
}

TEST_CASE("separable classes are classified perfectly") {
    std::mt19937_64 rng(8);
    const FeatureSet f = make_features(rng, 20, 4, 20.0, true);
    for (auto kind : {ClassifierKind::Lda, ClassifierKind::NaiveBayes, ClassifierKind::Knn}) {
        const ClassificationReport r = stratified_cv(f, factory(kind), 10, 4, 3);
        CHECK(r.accuracy == 1.0);
        CHECK(r.g_mean == doctest::Approx(1.0));
        CHECK(r.confusion.sum() == 80);
    }
}

TEST_CASE("shuffled labels sit at chance") {
    std::mt19937_64 rng(9);
    FeatureSet f = make_features(rng, 40, 5, 0.0, false);
    const ClassificationReport r = stratified_cv(f, factory(ClassifierKind::Lda), 10, 5, 11);
    CHECK(std::abs(r.accuracy - 0.25) <= 0.08);
}

TEST_CASE("classifiers do not depend on training order") {
    std::mt19937_64 rng(10);
    const FeatureSet f = make_features(rng, 15, 3, 1.5, false);
    Eigen::MatrixXd X(static_cast<Eigen::Index>(f.size()), 3);
    std::vector<int> labels;
    for (size_t i = 0; i < f.size(); ++i) {
        X.row(static_cast<Eigen::Index>(i)) = f[i].alpha.transpose();
        labels.push_back(static_cast<int>(f[i].label));
    }
    std::vector<Eigen::Index> order(f.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    std::shuffle(order.begin(), order.end(), rng);
    Eigen::MatrixXd Xs(X.rows(), 3);
    std::vector<int> ls;
    for (size_t i = 0; i < order.size(); ++i) {
        Xs.row(static_cast<Eigen::Index>(i)) = X.row(order[i]);
        ls.push_back(labels[order[i]]);
    }
    for (auto kind : {ClassifierKind::Lda, ClassifierKind::NaiveBayes, ClassifierKind::Knn}) {
        auto a = make_classifier(kind);
        auto b = make_classifier(kind);
        a->train(X, labels);
        b->train(Xs, ls);
        for (int t = 0; t < 50; ++t) {
            const Eigen::VectorXd x = 2.0 * testing::random_matrix(rng, 3, 1);
            REQUIRE(a->predict(x) == b->predict(x));
        }
    }
}

TEST_CASE("component sweep finds a planted low-dimensional signal") {
    std::mt19937_64 rng(11);
    FeatureSet f = make_features(rng, 30, 52, 0.0, true);
    // Signal only in the first two coefficients: class c sits at a corner of a square.
    for (auto& s : f) {
        const int c = static_cast<int>(s.label);
        s.alpha(0) += 4.0 * (c & 1);
        s.alpha(1) += 4.0 * (c >> 1);
    }
    const SweepResult r = sweep_components(f, factory(ClassifierKind::Lda), 52, 10, 5);
    CHECK(r.best_components <= 10);
    CHECK(r.best_components >= 2);
    CHECK(r.curve.size() == 52);
    CHECK(r.report.accuracy == r.curve[r.best_components - 1].second);
    for (const auto& [m, acc] : r.curve) CHECK(acc <= r.report.accuracy);
    CHECK(r.curve.back().second < r.report.accuracy);
    CHECK(r.curve[0].second < r.report.accuracy);

    const SweepResult parallel = sweep_components(f, factory(ClassifierKind::Lda), 52, 10, 5, 3);
    CHECK(parallel.curve == r.curve);
    CHECK(parallel.best_components == r.best_components);
}

TEST_CASE("constant features fall back to the majority class") {
    FeatureSet f;
    const int counts[4] = {30, 10, 10, 10};
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < counts[c]; ++i) {
            Sample s;
            s.alpha = Eigen::VectorXd::Ones(3);
            s.label = static_cast<DiagnosisClass>(c);
            s.subject_id = std::to_string(c) + "_" + std::to_string(i);
            f.push_back(s);
        }
    const SweepResult r = sweep_components(f, factory(ClassifierKind::Lda), 3, 10, 1);
    for (const auto& [m, acc] : r.curve) CHECK(acc == doctest::Approx(0.5));
    CHECK(r.best_components == 1);
}

TEST_CASE("report serialization") {
    Eigen::MatrixXi m = Eigen::MatrixXi::Identity(4, 4) * 5;
    m(1, 0) = 2;
    ClassificationReport r = report_metrics(m);
    r.classifier_name = "lda";
    r.chosen_components = 7;
    const nlohmann::json j = report_json(r, {{1, 0.5}, {2, 0.9}});
    CHECK(j.at("classifier") == "lda");
    CHECK(j.at("best_components") == 7);
    CHECK(j.at("confusion")[1][0] == 2);
    CHECK(j.at("class_order")[0] == "control");
    CHECK(j.at("per_class").at("coronal").at("sensitivity").get<double>() == doctest::Approx(5.0 / 7.0));
    const std::string text = report_text(r);
    CHECK(text.find("sensitivity") != std::string::npos);
}

}  // TEST_SUITE
