#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "support.hpp"

#include "craniossm/error.hpp"
#include "craniossm/mesh_io.hpp"
#include "craniossm/pipeline.hpp"

using namespace craniossm;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(const fs::path& root, int jobs = 1) {
    PipelineConfig c;
    c.paths.corpus = root / "corpus";
    c.paths.template_mesh = root / "template" / "template.ply";
    c.paths.output = root / "out";
    c.seed = 5;
    c.jobs = jobs;
    c.phantom.per_class = 3;
    c.phantom.resolution = 5;
    c.phantom.template_resolution = 4;
    c.classify.folds = 3;
    c.classify.max_components = 4;
    c.eval_model.max_components = 3;
    c.eval_model.specificity_samples = 4;
    c.sample.count = 2;
    c.flex.modes = 2;
    return c;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Relative path -> bytes of every regular file below root.
std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
    return out;
}

void run_through_classify(const PipelineConfig& c) {
    run_phantom(c);
    run_preprocess(c);
    run_morph(c);
    run_build(c);
    run_classify(c);
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config round trips through JSON") {
    PipelineConfig c;
    c.seed = 42;
    c.jobs = 3;
    c.model.keep_variance = 0.97;
    c.morph.method = MorphMethod::TwoStageLbrp;
    c.classify.classifier = ClassifierKind::Knn;
    c.transfer.from = DiagnosisClass::Metopic;
    c.eval_morph.methods = {MorphMethod::NicpTranslation};
    const nlohmann::ordered_json doc = config_to_json(c);
    const PipelineConfig back = config_from_json(nlohmann::json::parse(doc.dump()));
    CHECK(config_to_json(back) == doc);
    CHECK(back.model.keep_variance == 0.97);
    CHECK(back.transfer.from == DiagnosisClass::Metopic);
    CHECK(config_to_json(config_from_json(nlohmann::json::object())) == config_to_json(PipelineConfig{}));
}

TEST_CASE("config rejects unknown keys, wrong types and bad values") {
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"sed": 1})")), ValidationError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"phantom": {"per_clas": 2}})")), ValidationError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"jobs": "two"})")), ValidationError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"morph": {"method": "cpd"}})")), ValidationError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"classify": []})")), ValidationError);

    PipelineConfig c;
    c.jobs = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = PipelineConfig{};
    c.classify.folds = 1;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = PipelineConfig{};
    c.sample.model = "face";
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = PipelineConfig{};
    c.phantom.severity_max = 1.5;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK_NOTHROW(PipelineConfig{}.validate());
}

TEST_CASE("config files") {
    testing::TempDir dir("config");
    std::ofstream(dir / "ok.json") << R"({"seed": 9, "paths": {"output": "elsewhere"}})";
    const PipelineConfig c = load_config(dir / "ok.json");
    CHECK(c.seed == 9);
    CHECK(c.paths.output == fs::path("elsewhere"));
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_config(dir / "bad.json"), IoError);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), IoError);
}

TEST_CASE("method names") {
    for (MorphMethod m : {MorphMethod::NicpAffine, MorphMethod::NicpTranslation, MorphMethod::TwoStageLbrp})
        CHECK(morph_method_from_name(morph_method_name(m)) == m);
    CHECK(morph_method_name(MorphMethod::NicpAffine) == "nicp-a");
    CHECK_THROWS_AS(morph_method_from_name("nicp"), ValidationError);
    CHECK(model_names().size() == 6);
}

TEST_CASE("numbers are written in shortest round-trip form") {
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(-2.5) == "-2.5");
    CHECK(format_number(100.0) == "100");
    CHECK(format_number(std::nan("")) == "nan");
    CHECK(format_number(-std::numeric_limits<double>::infinity()) == "-inf");
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
        REQUIRE(std::stod(format_number(v)) == v);
    }
}

TEST_CASE("every stage runs on a tiny phantom corpus") {
    testing::TempDir dir("pipeline");
    PipelineConfig c = tiny_config(dir.path());

    const auto ph = run_phantom(c);
    CHECK(ph.at("stage") == "phantom");
    CHECK(load_scan_dir(c.paths.corpus).size() == 12);
    CHECK(fs::exists(c.paths.template_mesh));

    run_preprocess(c);
    const auto pre = load_scan_dir(preprocessed_dir(c));
    REQUIRE(pre.size() == 24);
    int mirrors = 0;
    for (const auto& s : pre) {
        mirrors += s.mirrored;
        CHECK(s.twin_id.has_value());
    }
    CHECK(mirrors == 12);

    run_morph(c);
    const auto morphs = load_scan_dir(morph_dir(c, MorphMethod::NicpAffine));
    CHECK(morphs.size() == 24);
    CHECK(fs::exists(morph_dir(c, MorphMethod::NicpAffine) / "morph_metrics.csv"));
    CHECK(fs::exists(morph_dir(c, MorphMethod::NicpAffine) / (morphs.front().subject_id + ".diag.json")));

    const auto built = run_build(c);
    CHECK(built.at("stage") == "build");
    for (const auto& name : model_names()) CHECK(fs::exists(model_dir(c, name) / "manifest.json"));
    const ShapeModel full = load_model(model_dir(c, "full"));
    const ShapeModel cranial = load_model(model_dir(c, "cranial"));
    CHECK(full.n_train == 24);
    CHECK(cranial.vertex_mask.has_value());
    CHECK(cranial.vertex_count() < full.vertex_count());
    CHECK(fs::exists(model_dir(c, "full") / "class_means.json"));

    run_eval_model(c);
    const std::string curve = read_file(c.paths.output / "eval" / "model_full.csv");
    CHECK(curve.rfind("components,compactness,generalization_mm,specificity_mm\n", 0) == 0);

    c.eval_morph.methods = {MorphMethod::NicpAffine};
    run_eval_morph(c);
    CHECK(read_file(c.paths.output / "eval" / "morph_table.csv").find("\nnicp-a,24,") != std::string::npos);

    const auto cls = run_classify(c);
    CHECK(cls.at("stage") == "classify");
    const auto report = nlohmann::json::parse(read_file(c.paths.output / "classify" / "report.json"));
    CHECK(report.at("samples") == 12);
    CHECK(report.at("best_components").get<int>() >= 1);
    CHECK(fs::exists(c.paths.output / "classify" / "features.csv"));
    CHECK(fs::exists(c.paths.output / "classify" / "curve.csv"));

    run_sample(c);
    CHECK(fs::exists(c.paths.output / "samples" / "full" / "sample_001.ply"));
    CHECK(fs::exists(c.paths.output / "samples" / "full" / "coefficients.csv"));

    c.transfer.scan = morphs.front().subject_id;
    c.transfer.to = DiagnosisClass::Sagittal;
    const auto tr = run_transfer(c);
    CHECK(fs::exists(tr.at("output").get<std::string>()));

    run_flex(c);
    CHECK(fs::exists(model_dir(c, "full") / "flex.json"));
    CHECK(fs::exists(c.paths.output / "flex" / "full_modes.json"));

    c.transfer.scan = "nobody";
    CHECK_THROWS_AS(run_transfer(c), IoError);
}

TEST_CASE("stages fail cleanly on missing inputs") {
    testing::TempDir dir("missing");
    const PipelineConfig c = tiny_config(dir.path());
    CHECK_THROWS_AS(run_preprocess(c), IoError);
    CHECK_THROWS_AS(run_morph(c), IoError);
    CHECK_THROWS_AS(run_build(c), IoError);
    PipelineConfig bad = c;
    bad.paths.template_mesh = dir / "template.obj";
    CHECK_THROWS_AS(run_phantom(bad), ValidationError);
}

TEST_CASE("outputs do not depend on the job count") {
    testing::TempDir a("jobs1"), b("jobs2");
    run_through_classify(tiny_config(a.path(), 1));
    run_through_classify(tiny_config(b.path(), 2));
    const auto sa = snapshot(a.path());
    const auto sb = snapshot(b.path());
    REQUIRE(sa.size() == sb.size());
    for (const auto& [name, bytes] : sa) {
        CAPTURE(name);
        REQUIRE(sb.count(name) == 1);
        CHECK(sb.at(name) == bytes);
    }
}

}  // TEST_SUITE
