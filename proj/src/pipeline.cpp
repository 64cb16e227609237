#include "craniossm/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "craniossm/align.hpp"
#include "craniossm/edit.hpp"
#include "craniossm/error.hpp"
#include "craniossm/geometry.hpp"
#include "craniossm/mesh_io.hpp"
#include "craniossm/parallel.hpp"
#include "craniossm/seed.hpp"
#include "craniossm/synth.hpp"

namespace craniossm {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 3> kMethodNames{"nicp-a", "nicp-t", "2s-lbrp"};

// --- JSON config helpers -------------------------------------------------------

void check_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!obj.is_object()) throw ValidationError("config: '" + where + "' must be an object");
    for (const auto& item : obj.items())
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
            throw ValidationError("config: unknown key '" + where + "." + item.key() + "'");
}

template <class T>
void read(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("config: '" + where + "." + key + "' has the wrong type");
    }
}

template <class T>
void read_optional(const nlohmann::json& obj, const char* key, std::optional<T>& out, const std::string& where) {
    if (!obj.contains(key)) return;
    if (obj.at(key).is_null()) {
        out.reset();
        return;
    }
    T value{};
    read(obj, key, value, where);
    out = value;
}

void read_path(const nlohmann::json& obj, const char* key, fs::path& out) {
    std::string s = out.string();
    read(obj, key, s, "paths");
    out = s;
}

template <class T>
ojson optional_json(const std::optional<T>& v) {
    return v ? ojson(*v) : ojson(nullptr);
}

// --- files -----------------------------------------------------------------------

/// Removes stale outputs (files with the given extensions) directly inside dir.
void prepare_dir(const fs::path& dir, std::initializer_list<std::string_view> extensions) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        if (std::find(extensions.begin(), extensions.end(), ext) != extensions.end()) fs::remove(entry.path());
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string csv_line(const std::vector<std::string>& cells) {
    std::string out;
    for (size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
    }
    return out + "\n";
}

Scan load_template(const PipelineConfig& c) {
    if (!fs::exists(c.paths.template_mesh)) throw IoError("template mesh not found: " + c.paths.template_mesh.string());
    return load_scan(c.paths.template_mesh);
}

std::vector<Scan> load_morphs(const PipelineConfig& c, const Scan& templ) {
    const fs::path dir = morph_dir(c, c.morph.method);
    std::vector<Scan> scans = load_scan_dir(dir);
    if (scans.empty()) throw ValidationError("no morphs in " + dir.string() + "; run 'morph' first");
    for (const auto& s : scans)
        if (s.mesh.vertex_count() != templ.mesh.vertex_count())
            throw ValidationError("morph " + s.subject_id + " does not have the template's vertex count");
    return scans;
}

std::vector<PointSet> vertices_of(const std::vector<Scan>& scans) {
    std::vector<PointSet> out;
    out.reserve(scans.size());
    for (const auto& s : scans) out.push_back(s.mesh.vertices);
    return out;
}

bool is_class_model(const std::string& name) {
    return std::any_of(kAllClasses.begin(), kAllClasses.end(), [&](DiagnosisClass k) { return class_name(k) == name; });
}

ClassifierFactory classifier_factory(const PipelineConfig& c) {
    const ClassifierKind kind = c.classify.classifier;
    const int k = c.classify.knn_k;
    return [kind, k] { return make_classifier(kind, k); };
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

ClassMeanCoefficients class_means_from_json(const nlohmann::json& doc) {
    ClassMeanCoefficients out;
    try {
        for (const auto& [name, values] : doc.at("classes").items()) {
            const auto v = values.get<std::vector<double>>();
            out[class_from_name(name)] = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed class_means.json: ") + e.what());
    }
    return out;
}

/// Template vertices inside the model, as model vertex indices.
std::vector<int> to_model_vertices(const ShapeModel& model, const std::vector<int>& template_vertices) {
    if (!model.vertex_mask) return template_vertices;
    std::map<int, int> index;
    for (size_t i = 0; i < model.vertex_mask->size(); ++i) index[(*model.vertex_mask)[i]] = static_cast<int>(i);
    std::vector<int> out;
    for (int v : template_vertices)
        if (auto it = index.find(v); it != index.end()) out.push_back(it->second);
    return out;
}

}  // namespace

// --- names -------------------------------------------------------------------------

std::string_view morph_method_name(MorphMethod m) { return kMethodNames[static_cast<int>(m)]; }

MorphMethod morph_method_from_name(std::string_view name) {
    for (size_t i = 0; i < kMethodNames.size(); ++i)
        if (kMethodNames[i] == name) return static_cast<MorphMethod>(i);
    throw ValidationError("unknown morph method '" + std::string(name) + "' (expected nicp-a, nicp-t or 2s-lbrp)");
}

std::vector<std::string> model_names() {
    std::vector<std::string> out{"full", "cranial"};
    for (DiagnosisClass k : kAllClasses) out.emplace_back(class_name(k));
    return out;
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// --- config ------------------------------------------------------------------------

void PipelineConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ValidationError("config: " + what);
    };
    require(jobs >= 1, "jobs must be >= 1");
    require(phantom.per_class >= 1, "phantom.per_class must be >= 1");
    require(phantom.severity_min >= 0.0 && phantom.severity_max <= 1.0 && phantom.severity_min <= phantom.severity_max,
            "phantom severity range must satisfy 0 <= min <= max <= 1");
    require(phantom.size_min_mm > 0.0 && phantom.size_min_mm <= phantom.size_max_mm,
            "phantom size range must satisfy 0 < min <= max");
    require(phantom.jitter_mm >= 0.0 && phantom.variation >= 0.0, "phantom jitter and variation must be >= 0");
    require(phantom.resolution >= 2 && phantom.template_resolution >= 2, "phantom resolutions must be >= 2");
    require(preprocess.dedup_tol >= 0.0, "preprocess.dedup_tol must be >= 0");
    require(preprocess.min_component_fraction >= 0.0 && preprocess.min_component_fraction <= 1.0,
            "preprocess.min_component_fraction must lie in [0, 1]");
    morph.nicp.validate();
    morph.lbrp.validate();
    require(!model.keep_components || *model.keep_components >= 1, "model.keep_components must be >= 1");
    require(!model.keep_variance || (*model.keep_variance > 0.0 && *model.keep_variance <= 1.0),
            "model.keep_variance must lie in (0, 1]");
    require(std::isfinite(model.cranial_offset_mm), "model.cranial_offset_mm must be finite");
    require(classify.knn_k >= 1, "classify.knn_k must be >= 1");
    require(classify.folds >= 2, "classify.folds must be >= 2");
    require(classify.max_components >= 1, "classify.max_components must be >= 1");
    const auto names = model_names();
    auto known = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
    for (const auto& m : eval_model.models) require(known(m), "eval_model.models: unknown model '" + m + "'");
    require(eval_model.max_components >= 1, "eval_model.max_components must be >= 1");
    require(eval_model.specificity_samples >= 1, "eval_model.specificity_samples must be >= 1");
    require(!eval_morph.methods.empty(), "eval_morph.methods must not be empty");
    require(known(sample.model), "sample.model: unknown model '" + sample.model + "'");
    require(sample.count >= 1, "sample.count must be >= 1");
    require(sample.clamp_sigma > 0.0, "sample.clamp_sigma must be > 0");
    require(!sample.components || *sample.components >= 1, "sample.components must be >= 1");
    require(known(flex.model), "flex.model: unknown model '" + flex.model + "'");
    require(flex.modes >= 1, "flex.modes must be >= 1");
    require(flex.eps > 0.0 && flex.amplitude_mm > 0.0, "flex.eps and flex.amplitude_mm must be > 0");
}

PipelineConfig config_from_json(const nlohmann::json& doc) {
    PipelineConfig c;
    check_keys(doc,
               {"paths", "seed", "jobs", "phantom", "preprocess", "morph", "model", "classify", "eval_model",
                "eval_morph", "sample", "transfer", "flex"},
               "config");
    read(doc, "seed", c.seed, "config");
    read(doc, "jobs", c.jobs, "config");
    if (doc.contains("paths")) {
        const auto& p = doc["paths"];
        check_keys(p, {"corpus", "template", "output"}, "paths");
        read_path(p, "corpus", c.paths.corpus);
        read_path(p, "template", c.paths.template_mesh);
        read_path(p, "output", c.paths.output);
    }
    if (doc.contains("phantom")) {
        const auto& p = doc["phantom"];
        check_keys(p,
                   {"per_class", "severity_min", "severity_max", "size_min_mm", "size_max_mm", "jitter_mm",
                    "variation", "resolution", "template_resolution"},
                   "phantom");
        read(p, "per_class", c.phantom.per_class, "phantom");
        read(p, "severity_min", c.phantom.severity_min, "phantom");
        read(p, "severity_max", c.phantom.severity_max, "phantom");
        read(p, "size_min_mm", c.phantom.size_min_mm, "phantom");
        read(p, "size_max_mm", c.phantom.size_max_mm, "phantom");
        read(p, "jitter_mm", c.phantom.jitter_mm, "phantom");
        read(p, "variation", c.phantom.variation, "phantom");
        read(p, "resolution", c.phantom.resolution, "phantom");
        read(p, "template_resolution", c.phantom.template_resolution, "phantom");
    }
    if (doc.contains("preprocess")) {
        const auto& p = doc["preprocess"];
        check_keys(p, {"dedup_tol", "min_component_fraction", "mirror"}, "preprocess");
        read(p, "dedup_tol", c.preprocess.dedup_tol, "preprocess");
        read(p, "min_component_fraction", c.preprocess.min_component_fraction, "preprocess");
        read(p, "mirror", c.preprocess.mirror, "preprocess");
    }
    if (doc.contains("morph")) {
        const auto& m = doc["morph"];
        check_keys(m, {"method", "nicp", "lbrp"}, "morph");
        std::string method(morph_method_name(c.morph.method));
        read(m, "method", method, "morph");
        c.morph.method = morph_method_from_name(method);
        if (m.contains("nicp")) {
            const auto& n = m["nicp"];
            check_keys(n,
                       {"n_iters", "alpha_initial", "alpha_decay", "landmark_cutoff", "inner_exit_eps",
                        "normal_compat_max_deg", "gamma", "max_inner"},
                       "morph.nicp");
            auto& cfg = c.morph.nicp;
            read(n, "n_iters", cfg.n_iters, "morph.nicp");
            read(n, "alpha_initial", cfg.alpha_initial, "morph.nicp");
            read(n, "alpha_decay", cfg.alpha_decay, "morph.nicp");
            read(n, "landmark_cutoff", cfg.landmark_cutoff, "morph.nicp");
            read(n, "inner_exit_eps", cfg.inner_exit_eps, "morph.nicp");
            read(n, "normal_compat_max_deg", cfg.normal_compat_max_deg, "morph.nicp");
            read(n, "gamma", cfg.gamma, "morph.nicp");
            read(n, "max_inner", cfg.max_inner, "morph.nicp");
        }
        if (m.contains("lbrp")) {
            const auto& l = m["lbrp"];
            check_keys(l, {"lambda1", "lambda2", "normal_compat_max_deg"}, "morph.lbrp");
            read(l, "lambda1", c.morph.lbrp.lambda1, "morph.lbrp");
            read(l, "lambda2", c.morph.lbrp.lambda2, "morph.lbrp");
            read(l, "normal_compat_max_deg", c.morph.lbrp.normal_compat_max_deg, "morph.lbrp");
        }
    }
    if (doc.contains("model")) {
        const auto& m = doc["model"];
        check_keys(m, {"keep_components", "keep_variance", "release_profile", "class_models", "cranial_offset_mm"},
                   "model");
        read_optional(m, "keep_components", c.model.keep_components, "model");
        read_optional(m, "keep_variance", c.model.keep_variance, "model");
        read(m, "release_profile", c.model.release_profile, "model");
        read(m, "class_models", c.model.class_models, "model");
        read(m, "cranial_offset_mm", c.model.cranial_offset_mm, "model");
    }
    if (doc.contains("classify")) {
        const auto& k = doc["classify"];
        check_keys(k, {"classifier", "knn_k", "folds", "max_components", "rebuild_model_per_fold"}, "classify");
        std::string name(classifier_name(c.classify.classifier));
        read(k, "classifier", name, "classify");
        c.classify.classifier = classifier_from_name(name);
        read(k, "knn_k", c.classify.knn_k, "classify");
        read(k, "folds", c.classify.folds, "classify");
        read(k, "max_components", c.classify.max_components, "classify");
        read(k, "rebuild_model_per_fold", c.classify.rebuild_model_per_fold, "classify");
    }
    if (doc.contains("eval_model")) {
        const auto& e = doc["eval_model"];
        check_keys(e, {"models", "max_components", "specificity_samples"}, "eval_model");
        read(e, "models", c.eval_model.models, "eval_model");
        read(e, "max_components", c.eval_model.max_components, "eval_model");
        read(e, "specificity_samples", c.eval_model.specificity_samples, "eval_model");
    }
    if (doc.contains("eval_morph")) {
        const auto& e = doc["eval_morph"];
        check_keys(e, {"methods"}, "eval_morph");
        std::vector<std::string> names;
        read(e, "methods", names, "eval_morph");
        if (e.contains("methods")) {
            c.eval_morph.methods.clear();
            for (const auto& n : names) c.eval_morph.methods.push_back(morph_method_from_name(n));
        }
    }
    if (doc.contains("sample")) {
        const auto& s = doc["sample"];
        check_keys(s, {"model", "count", "clamp_sigma", "components"}, "sample");
        read(s, "model", c.sample.model, "sample");
        read(s, "count", c.sample.count, "sample");
        read(s, "clamp_sigma", c.sample.clamp_sigma, "sample");
        read_optional(s, "components", c.sample.components, "sample");
    }
    if (doc.contains("transfer")) {
        const auto& t = doc["transfer"];
        check_keys(t, {"scan", "from", "to"}, "transfer");
        read(t, "scan", c.transfer.scan, "transfer");
        std::optional<std::string> from;
        read_optional(t, "from", from, "transfer");
        if (from) c.transfer.from = class_from_name(*from);
        std::string to(class_name(c.transfer.to));
        read(t, "to", to, "transfer");
        c.transfer.to = class_from_name(to);
    }
    if (doc.contains("flex")) {
        const auto& f = doc["flex"];
        check_keys(f, {"model", "modes", "eps", "amplitude_mm"}, "flex");
        read(f, "model", c.flex.model, "flex");
        read(f, "modes", c.flex.modes, "flex");
        read(f, "eps", c.flex.eps, "flex");
        read(f, "amplitude_mm", c.flex.amplitude_mm, "flex");
    }
    return c;
}

ojson config_to_json(const PipelineConfig& c) {
    ojson doc;
    doc["paths"] = {{"corpus", c.paths.corpus.string()},
                    {"template", c.paths.template_mesh.string()},
                    {"output", c.paths.output.string()}};
    doc["seed"] = c.seed;
    doc["jobs"] = c.jobs;
    doc["phantom"] = {{"per_class", c.phantom.per_class},
                      {"severity_min", c.phantom.severity_min},
                      {"severity_max", c.phantom.severity_max},
                      {"size_min_mm", c.phantom.size_min_mm},
                      {"size_max_mm", c.phantom.size_max_mm},
                      {"jitter_mm", c.phantom.jitter_mm},
                      {"variation", c.phantom.variation},
                      {"resolution", c.phantom.resolution},
                      {"template_resolution", c.phantom.template_resolution}};
    doc["preprocess"] = {{"dedup_tol", c.preprocess.dedup_tol},
                         {"min_component_fraction", c.preprocess.min_component_fraction},
                         {"mirror", c.preprocess.mirror}};
    const auto& n = c.morph.nicp;
    doc["morph"] = {{"method", morph_method_name(c.morph.method)},
                    {"nicp",
                     {{"n_iters", n.n_iters},
                      {"alpha_initial", n.alpha_initial},
                      {"alpha_decay", n.alpha_decay},
                      {"landmark_cutoff", n.landmark_cutoff},
                      {"inner_exit_eps", n.inner_exit_eps},
                      {"normal_compat_max_deg", n.normal_compat_max_deg},
                      {"gamma", n.gamma},
                      {"max_inner", n.max_inner}}},
                    {"lbrp",
                     {{"lambda1", c.morph.lbrp.lambda1},
                      {"lambda2", c.morph.lbrp.lambda2},
                      {"normal_compat_max_deg", c.morph.lbrp.normal_compat_max_deg}}}};
    doc["model"] = {{"keep_components", optional_json(c.model.keep_components)},
                    {"keep_variance", optional_json(c.model.keep_variance)},
                    {"release_profile", c.model.release_profile},
                    {"class_models", c.model.class_models},
                    {"cranial_offset_mm", c.model.cranial_offset_mm}};
    doc["classify"] = {{"classifier", classifier_name(c.classify.classifier)},
                       {"knn_k", c.classify.knn_k},
                       {"folds", c.classify.folds},
                       {"max_components", c.classify.max_components},
                       {"rebuild_model_per_fold", c.classify.rebuild_model_per_fold}};
    doc["eval_model"] = {{"models", c.eval_model.models},
                         {"max_components", c.eval_model.max_components},
                         {"specificity_samples", c.eval_model.specificity_samples}};
    ojson methods = ojson::array();
    for (MorphMethod m : c.eval_morph.methods) methods.push_back(morph_method_name(m));
    doc["eval_morph"] = {{"methods", methods}};
    doc["sample"] = {{"model", c.sample.model},
                     {"count", c.sample.count},
                     {"clamp_sigma", c.sample.clamp_sigma},
                     {"components", optional_json(c.sample.components)}};
    doc["transfer"] = {{"scan", c.transfer.scan},
                       {"from", c.transfer.from ? ojson(class_name(*c.transfer.from)) : ojson(nullptr)},
                       {"to", class_name(c.transfer.to)}};
    doc["flex"] = {{"model", c.flex.model},
                   {"modes", c.flex.modes},
                   {"eps", c.flex.eps},
                   {"amplitude_mm", c.flex.amplitude_mm}};
    return doc;
}

PipelineConfig load_config(const fs::path& path) { return config_from_json(read_json_file(path)); }

fs::path preprocessed_dir(const PipelineConfig& c) { return c.paths.output / "preprocessed"; }
fs::path morph_dir(const PipelineConfig& c, MorphMethod m) {
    return c.paths.output / "morphs" / std::string(morph_method_name(m));
}
fs::path models_dir(const PipelineConfig& c) { return c.paths.output / "models"; }
fs::path model_dir(const PipelineConfig& c, const std::string& name) { return models_dir(c) / name; }

// --- building blocks -------------------------------------------------------------

std::vector<Scan> load_scan_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> meshes;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ply") meshes.push_back(entry.path());
    std::sort(meshes.begin(), meshes.end());
    std::vector<Scan> scans;
    scans.reserve(meshes.size());
    std::set<std::string> ids;
    for (const auto& m : meshes) {
        scans.push_back(load_scan(m));
        if (!ids.insert(scans.back().subject_id).second)
            throw ValidationError("duplicate subject id '" + scans.back().subject_id + "' in " + dir.string());
    }
    return scans;
}

MorphResult morph_scan(const Scan& templ, const Scan& target, MorphMethod method, const NicpConfig& nicp,
                       const LbrpConfig& lbrp) {
    const SimilarityTransform init = procrustes_similarity(templ.landmarks, target.landmarks);
    const TriMesh mesh = apply_similarity(init, templ.mesh);
    const LandmarkSet lms = apply_similarity(init, templ.landmarks);
    switch (method) {
        case MorphMethod::NicpAffine: return nicp_affine(mesh, target.mesh, lms, target.landmarks, nicp);
        case MorphMethod::NicpTranslation: return nicp_translation(mesh, target.mesh, lms, target.landmarks, nicp);
        case MorphMethod::TwoStageLbrp: return two_stage_lbrp(mesh, target.mesh, lbrp);
    }
    throw ValidationError("unknown morph method");
}

FeatureSet extract_features(const ShapeModel& model, const std::vector<Scan>& shapes) {
    FeatureSet out;
    out.reserve(shapes.size());
    for (const auto& s : shapes) {
        Sample sample;
        sample.alpha = project(model, align_to_model(model, s.mesh.vertices));
        sample.label = s.diagnosis;
        sample.subject_id = s.subject_id;
        sample.mirrored = s.mirrored;
        sample.twin_id = s.twin_id;
        out.push_back(std::move(sample));
    }
    return out;
}

SweepResult sweep_rebuilding_model(const std::vector<Scan>& shapes, const FaceArray& faces, const MassMatrix& mass,
                                   const BuildOptions& build, const ClassifierFactory& factory, int max_components,
                                   int n_folds, std::uint64_t seed, int jobs) {
    if (max_components < 1) throw ValidationError("component sweep needs max_components >= 1");
    FeatureSet meta;
    meta.reserve(shapes.size());
    for (const auto& s : shapes) meta.push_back({Eigen::VectorXd(), s.diagnosis, s.subject_id, s.mirrored, s.twin_id});
    const std::vector<int> folds = make_folds(meta, n_folds, seed);
    const std::vector<FoldSplit> splits = fold_splits(meta, folds);

    BuildOptions opts = build;
    opts.keep_components.reset();
    opts.keep_variance.reset();
    std::vector<FeatureSet> train(splits.size()), test(splits.size());
    parallel_for(splits.size(), jobs, [&](size_t f) {
        std::vector<PointSet> train_shapes;
        for (size_t i : splits[f].train) train_shapes.push_back(shapes[i].mesh.vertices);
        const ShapeModel model = build_model(train_shapes, faces, mass, opts);
        std::vector<Scan> tr, te;
        for (size_t i : splits[f].train) tr.push_back(shapes[i]);
        for (size_t i : splits[f].test) te.push_back(shapes[i]);
        train[f] = extract_features(model, tr);
        test[f] = extract_features(model, te);
    });
    Eigen::Index k = max_components;
    for (const auto& t : train)
        if (!t.empty()) k = std::min<Eigen::Index>(k, t.front().alpha.size());
    if (k < 1) throw NumericalError("a fold model has no components");

    SweepResult result;
    std::vector<Eigen::MatrixXi> confusions(static_cast<size_t>(k));
    parallel_for(static_cast<size_t>(k), jobs, [&](size_t mi) {
        Eigen::MatrixXi total = Eigen::MatrixXi::Zero(kClassCount, kClassCount);
        for (size_t f = 0; f < splits.size(); ++f) {
            if (test[f].empty()) continue;
            auto classifier = factory();
            total += evaluate_split(train[f], test[f], *classifier, static_cast<int>(mi) + 1);
        }
        confusions[mi] = total;
    });
    double best = -1.0;
    for (Eigen::Index m = 1; m <= k; ++m) {
        ClassificationReport r = report_metrics(confusions[m - 1]);
        result.curve.emplace_back(static_cast<int>(m), r.accuracy);
        if (r.accuracy > best) {
            best = r.accuracy;
            result.best_components = static_cast<int>(m);
            result.report = r;
        }
    }
    result.report.chosen_components = result.best_components;
    result.report.classifier_name = factory()->name();
    return result;
}

// --- stages --------------------------------------------------------------------------

ojson run_phantom(const PipelineConfig& c) {
    c.validate();
    if (c.paths.template_mesh.extension() != ".ply")
        throw ValidationError("template path must end in .ply: " + c.paths.template_mesh.string());
    CorpusOptions o;
    for (DiagnosisClass k : kAllClasses) o.per_class[k] = c.phantom.per_class;
    o.severity_min = c.phantom.severity_min;
    o.severity_max = c.phantom.severity_max;
    o.size_min_mm = c.phantom.size_min_mm;
    o.size_max_mm = c.phantom.size_max_mm;
    o.jitter_mm = c.phantom.jitter_mm;
    o.variation = c.phantom.variation;
    o.resolution = c.phantom.resolution;
    o.seed = c.seed;
    o.jobs = c.jobs;
    const std::vector<Scan> scans = generate_corpus(o);

    prepare_dir(c.paths.corpus, {".ply", ".json"});
    parallel_for(scans.size(), c.jobs, [&](size_t i) { save_scan(c.paths.corpus, scans[i]); });

    // Neutral template: symmetric base head, its own triangulation.
    PhantomSpec t;
    t.diagnosis = DiagnosisClass::Control;
    t.severity = 0.0;
    t.variation = 0.0;
    t.jitter_mm = 0.0;
    t.resolution = c.phantom.template_resolution;
    t.seed = derive_seed(c.seed, "template");
    Scan templ = generate_phantom(t);
    templ.subject_id = c.paths.template_mesh.stem().string();
    const fs::path template_dir = c.paths.template_mesh.parent_path().empty() ? fs::path(".")
                                                                              : c.paths.template_mesh.parent_path();
    ensure_dir(template_dir);
    save_scan(template_dir, templ);

    ojson summary;
    summary["stage"] = "phantom";
    summary["scans"] = scans.size();
    summary["corpus"] = c.paths.corpus.string();
    summary["template"] = c.paths.template_mesh.string();
    summary["template_vertices"] = templ.mesh.vertex_count();
    return summary;
}

ojson run_preprocess(const PipelineConfig& c) {
    c.validate();
    std::vector<Scan> scans = load_scan_dir(c.paths.corpus);
    if (scans.empty()) throw ValidationError("no scans in " + c.paths.corpus.string());
    std::set<std::string> ids;
    for (const auto& s : scans) ids.insert(s.subject_id);
    CleanOptions opts;
    opts.dedup_tol = c.preprocess.dedup_tol;
    opts.min_component_fraction = c.preprocess.min_component_fraction;

    const fs::path out = preprocessed_dir(c);
    prepare_dir(out, {".ply", ".json"});
    std::vector<long> removed(scans.size(), 0);
    std::vector<int> mirrors(scans.size(), 0);
    parallel_for(scans.size(), c.jobs, [&](size_t i) {
        Scan s = scans[i];
        s.mesh = clean(scans[i].mesh, opts);
        removed[i] = static_cast<long>(scans[i].mesh.vertex_count() - s.mesh.vertex_count());
        if (c.preprocess.mirror && !s.mirrored) {
            Scan m = mirror_scan(s);
            if (ids.count(m.subject_id))
                throw ValidationError("mirror id '" + m.subject_id + "' collides with an existing scan");
            s.twin_id = m.subject_id;
            save_scan(out, m);
            mirrors[i] = 1;
        }
        save_scan(out, s);
    });
    ojson summary;
    summary["stage"] = "preprocess";
    summary["scans"] = scans.size();
    summary["mirrors"] = std::accumulate(mirrors.begin(), mirrors.end(), 0);
    summary["vertices_removed"] = std::accumulate(removed.begin(), removed.end(), 0L);
    summary["output"] = out.string();
    return summary;
}

ojson run_morph(const PipelineConfig& c) {
    c.validate();
    const Scan templ = load_template(c);
    const std::vector<Scan> targets = load_scan_dir(preprocessed_dir(c));
    if (targets.empty()) throw ValidationError("no scans in " + preprocessed_dir(c).string() + "; run 'preprocess' first");
    const LandmarkIndices lm = landmark_vertex_indices(templ.mesh, templ.landmarks);
    const fs::path out = morph_dir(c, c.morph.method);
    prepare_dir(out, {".ply", ".json", ".csv"});

    std::vector<std::string> rows(targets.size());
    std::vector<int> violations(targets.size(), 0);
    parallel_for(targets.size(), c.jobs, [&](size_t i) {
        const Scan& target = targets[i];
        MorphResult r;
        try {
            r = morph_scan(templ, target, c.morph.method, c.morph.nicp, c.morph.lbrp);
        } catch (const Error& e) {
            throw NumericalError("morph of " + target.subject_id + " failed: " + e.what());
        }
        Scan morphed;
        morphed.mesh = r.morphed;
        for (int l = 0; l < kLandmarkCount; ++l) morphed.landmarks.at(l) = r.morphed.vertices.row(lm[l]).transpose();
        morphed.diagnosis = target.diagnosis;
        morphed.age_days = target.age_days;
        morphed.subject_id = target.subject_id;
        morphed.mirrored = target.mirrored;
        morphed.twin_id = target.twin_id;
        save_scan(out, morphed);

        const double lm_err = landmark_error(r.morphed, lm, target.landmarks);
        const double v2nn = v2nn_distance(r.morphed, target.mesh);
        nlohmann::json diag = morph_diagnostics_json(r);
        diag["subject_id"] = target.subject_id;
        diag["method"] = morph_method_name(c.morph.method);
        diag["metrics"] = {{"landmark_error_mm", lm_err}, {"v2nn_mm", v2nn}};
        write_text_file(out / (target.subject_id + ".diag.json"), diag.dump(2) + "\n");

        const double validity = r.iterations.empty() ? 0.0 : r.iterations.back().validity_ratio;
        violations[i] = r.monotonicity_violations;
        rows[i] = csv_line({target.subject_id, std::string(class_name(target.diagnosis)),
                            target.mirrored ? "1" : "0", format_number(lm_err), format_number(v2nn),
                            std::to_string(r.iterations.size()), std::to_string(r.monotonicity_violations),
                            format_number(validity)});
    });
    std::string csv = "subject_id,diagnosis,mirrored,landmark_error_mm,v2nn_mm,iterations,monotonicity_violations,"
                      "validity_ratio\n";
    for (const auto& r : rows) csv += r;
    write_text_file(out / "morph_metrics.csv", csv);

    ojson summary;
    summary["stage"] = "morph";
    summary["method"] = morph_method_name(c.morph.method);
    summary["scans"] = targets.size();
    summary["monotonicity_violations"] = std::accumulate(violations.begin(), violations.end(), 0);
    summary["output"] = out.string();
    return summary;
}

ojson run_build(const PipelineConfig& c) {
    c.validate();
    const Scan templ = load_template(c);
    const std::vector<Scan> scans = load_morphs(c, templ);
    const MassMatrix mass = mass_matrix(templ.mesh);

    BuildOptions base;
    base.keep_components = c.model.keep_components;
    base.keep_variance = c.model.keep_variance;
    auto finish = [&](ShapeModel model, const std::string& name) {
        if (c.model.release_profile && name != "cranial") {
            const Eigen::Index k = std::min<Eigen::Index>(model.component_count(),
                                                          release_component_count(model.class_label));
            if (k >= 1) model = truncate(model, k);
        }
        save_model(model, model_dir(c, name));
        return model;
    };

    ojson summary;
    summary["stage"] = "build";
    ojson models = ojson::object();
    auto describe = [](const ShapeModel& m) {
        return ojson{{"vertices", m.vertex_count()}, {"components", m.component_count()}, {"n_train", m.n_train}};
    };

    const ShapeModel full = finish(build_model(vertices_of(scans), templ.mesh.faces, mass, base), "full");
    models["full"] = describe(full);
    {
        const FeatureSet features = extract_features(full, scans);
        std::set<DiagnosisClass> present;
        for (const auto& f : features) present.insert(f.label);
        if (present.size() == kAllClasses.size()) {
            ojson doc;
            doc["model"] = "full";
            doc["components"] = full.component_count();
            ojson classes = ojson::object();
            for (const auto& [cls, mean] : class_mean_coefficients(full, features))
                classes[std::string(class_name(cls))] = std::vector<double>(mean.data(), mean.data() + mean.size());
            doc["classes"] = classes;
            write_text_file(model_dir(c, "full") / "class_means.json", doc.dump(2) + "\n");
        } else {
            warn("not every class is present; class_means.json was not written");
        }
    }

    BuildOptions cranial = base;
    cranial.mask = cranial_mask(templ.mesh, templ.landmarks, c.model.cranial_offset_mm);
    models["cranial"] = describe(finish(build_model(vertices_of(scans), templ.mesh.faces, mass, cranial), "cranial"));

    if (c.model.class_models) {
        for (DiagnosisClass k : kAllClasses) {
            std::vector<PointSet> shapes;
            for (const auto& s : scans)
                if (s.diagnosis == k) shapes.push_back(s.mesh.vertices);
            const std::string name(class_name(k));
            if (shapes.size() < 2) {
                warn("class '" + name + "' has fewer than 2 morphs; no submodel built");
                continue;
            }
            BuildOptions opts = base;
            opts.class_label = k;
            models[name] = describe(finish(build_model(shapes, templ.mesh.faces, mass, opts), name));
        }
    }
    summary["models"] = models;
    summary["output"] = models_dir(c).string();
    return summary;
}

ojson run_eval_model(const PipelineConfig& c) {
    c.validate();
    const Scan templ = load_template(c);
    const std::vector<Scan> scans = load_morphs(c, templ);
    const MassMatrix mass = mass_matrix(templ.mesh);
    const fs::path out = c.paths.output / "eval";
    ensure_dir(out);

    ojson summary;
    summary["stage"] = "eval-model";
    ojson files = ojson::array();
    for (const std::string& name : c.eval_model.models) {
        const ShapeModel model = load_model(model_dir(c, name));
        std::vector<PointSet> shapes;
        for (const auto& s : scans)
            if (!is_class_model(name) || class_name(s.diagnosis) == name) shapes.push_back(s.mesh.vertices);
        if (shapes.size() < 3) {
            warn("model '" + name + "' has fewer than 3 training shapes; skipped");
            continue;
        }
        BuildOptions opts;
        opts.mask = model.vertex_mask;
        const Eigen::Index max_j =
            std::min<Eigen::Index>(c.eval_model.max_components, std::max<Eigen::Index>(1, model.component_count()));
        const std::vector<double> gen = generalization_curve(shapes, templ.mesh.faces, mass, max_j, opts, c.jobs);
        std::vector<double> spec(static_cast<size_t>(max_j));
        parallel_for(static_cast<size_t>(max_j), c.jobs, [&](size_t j) {
            spec[j] = specificity(model, shapes, static_cast<Eigen::Index>(j) + 1, c.eval_model.specificity_samples,
                                  derive_seed(c.seed, "specificity/" + name));
        });
        std::string csv = "components,compactness,generalization_mm,specificity_mm\n";
        for (Eigen::Index j = 1; j <= max_j; ++j)
            csv += csv_line({std::to_string(j), format_number(compactness(model, j)), format_number(gen[j - 1]),
                             format_number(spec[j - 1])});
        const fs::path file = out / ("model_" + name + ".csv");
        write_text_file(file, csv);
        files.push_back(file.string());
    }
    summary["files"] = files;
    return summary;
}

ojson run_eval_morph(const PipelineConfig& c) {
    c.validate();
    const fs::path out = c.paths.output / "eval";
    ensure_dir(out);
    std::string csv =
        "method,scans,landmark_error_mean_mm,landmark_error_sd_mm,v2nn_mean_mm,v2nn_sd_mm,normal_deviation_mean_deg,"
        "normal_deviation_sd_deg\n";
    ojson summary;
    summary["stage"] = "eval-morph";
    ojson methods = ojson::array();
    for (MorphMethod m : c.eval_morph.methods) {
        const fs::path dir = morph_dir(c, m);
        if (!fs::is_directory(dir)) {
            warn("no morphs for method '" + std::string(morph_method_name(m)) + "'; skipped");
            continue;
        }
        const std::vector<Scan> scans = load_scan_dir(dir);
        if (scans.empty()) continue;
        std::vector<double> lm, v2nn;
        std::map<DiagnosisClass, std::vector<TriMesh>> by_class;
        for (const auto& s : scans) {
            const auto diag = read_json_file(dir / (s.subject_id + ".diag.json"));
            try {
                lm.push_back(diag.at("metrics").at("landmark_error_mm").get<double>());
                v2nn.push_back(diag.at("metrics").at("v2nn_mm").get<double>());
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError("malformed diagnostics for " + s.subject_id + ": " + e.what());
            }
            by_class[s.diagnosis].push_back(s.mesh);
        }
        const NormalDeviation nd = surface_normal_deviation(by_class);
        std::vector<double> class_scores;
        for (const auto& [cls, v] : nd.per_class_deg) class_scores.push_back(v);
        csv += csv_line({std::string(morph_method_name(m)), std::to_string(scans.size()), format_number(mean_of(lm)),
                         format_number(sd_of(lm)), format_number(mean_of(v2nn)), format_number(sd_of(v2nn)),
                         format_number(nd.overall_deg), format_number(sd_of(class_scores))});
        methods.push_back(morph_method_name(m));
    }
    if (methods.empty()) throw ValidationError("no morph results found under " + (c.paths.output / "morphs").string());
    write_text_file(out / "morph_table.csv", csv);
    summary["methods"] = methods;
    summary["file"] = (out / "morph_table.csv").string();
    return summary;
}

ojson run_classify(const PipelineConfig& c) {
    c.validate();
    const Scan templ = load_template(c);
    const std::vector<Scan> scans = load_morphs(c, templ);
    const std::uint64_t fold_seed = derive_seed(c.seed, "folds");
    const auto factory = classifier_factory(c);
    const fs::path out = c.paths.output / "classify";
    ensure_dir(out);

    SweepResult sweep;
    if (c.classify.rebuild_model_per_fold) {
        BuildOptions opts;
        opts.mask = cranial_mask(templ.mesh, templ.landmarks, c.model.cranial_offset_mm);
        sweep = sweep_rebuilding_model(scans, templ.mesh.faces, mass_matrix(templ.mesh), opts, factory,
                                       c.classify.max_components, c.classify.folds, fold_seed, c.jobs);
    } else {
        const ShapeModel model = load_model(model_dir(c, "cranial"));
        const FeatureSet features = extract_features(model, scans);
        sweep = sweep_components(features, factory, c.classify.max_components, c.classify.folds, fold_seed, c.jobs);

        const std::vector<int> folds = make_folds(features, c.classify.folds, fold_seed);
        std::vector<std::string> header{"subject_id", "diagnosis", "mirrored", "fold"};
        const Eigen::Index k = features.empty() ? 0 : features.front().alpha.size();
        for (Eigen::Index j = 1; j <= k; ++j) header.push_back("alpha_" + std::to_string(j));
        std::string csv = csv_line(header);
        for (size_t i = 0; i < features.size(); ++i) {
            std::vector<std::string> row{features[i].subject_id, std::string(class_name(features[i].label)),
                                         features[i].mirrored ? "1" : "0", std::to_string(folds[i])};
            for (Eigen::Index j = 0; j < k; ++j) row.push_back(format_number(features[i].alpha(j)));
            csv += csv_line(row);
        }
        write_text_file(out / "features.csv", csv);
    }

    nlohmann::json report = report_json(sweep.report, sweep.curve);
    report["mode"] = c.classify.rebuild_model_per_fold ? "rebuild-model-per-fold" : "corpus-model";
    report["folds"] = c.classify.folds;
    report["samples"] = std::count_if(scans.begin(), scans.end(), [](const Scan& s) { return !s.mirrored; });
    write_text_file(out / "report.json", report.dump(2) + "\n");
    write_text_file(out / "report.txt", report_text(sweep.report));
    std::string curve = "components,accuracy\n";
    for (const auto& [m, acc] : sweep.curve) curve += csv_line({std::to_string(m), format_number(acc)});
    write_text_file(out / "curve.csv", curve);

    ojson summary;
    summary["stage"] = "classify";
    summary["classifier"] = sweep.report.classifier_name;
    summary["best_components"] = sweep.best_components;
    summary["accuracy"] = sweep.report.accuracy;
    summary["g_mean"] = sweep.report.g_mean;
    summary["output"] = out.string();
    return summary;
}

ojson run_sample(const PipelineConfig& c) {
    c.validate();
    const std::string& name = c.sample.model;
    const ShapeModel model = load_model(model_dir(c, name));
    const fs::path out = c.paths.output / "samples" / name;
    prepare_dir(out, {".ply", ".csv"});
    const size_t n = static_cast<size_t>(c.sample.count);
    std::optional<Eigen::Index> components;
    if (c.sample.components) components = *c.sample.components;
    std::vector<Eigen::VectorXd> alphas(n);
    parallel_for(n, c.jobs, [&](size_t i) {
        const std::uint64_t seed = derive_seed(c.seed, "sample/" + name + "/" + std::to_string(i));
        auto [alpha, shape] = sample(model, seed, c.sample.clamp_sigma, components);
        TriMesh mesh;
        mesh.vertices = std::move(shape);
        mesh.faces = model.faces;
        char file[32];
        std::snprintf(file, sizeof file, "sample_%03zu.ply", i);
        save_mesh(out / file, mesh);
        alphas[i] = std::move(alpha);
    });
    const Eigen::Index k = model.component_count();
    std::vector<std::string> header{"sample"};
    for (Eigen::Index j = 1; j <= k; ++j) header.push_back("alpha_" + std::to_string(j));
    std::string csv = csv_line(header);
    for (size_t i = 0; i < n; ++i) {
        std::vector<std::string> row{std::to_string(i)};
        for (Eigen::Index j = 0; j < k; ++j) row.push_back(format_number(alphas[i](j)));
        csv += csv_line(row);
    }
    write_text_file(out / "coefficients.csv", csv);
    ojson summary;
    summary["stage"] = "sample";
    summary["model"] = name;
    summary["samples"] = n;
    summary["output"] = out.string();
    return summary;
}

ojson run_transfer(const PipelineConfig& c) {
    c.validate();
    if (c.transfer.scan.empty()) throw UsageError("transfer needs a scan id (--scan)");
    const fs::path scan_path = morph_dir(c, c.morph.method) / (c.transfer.scan + ".ply");
    if (!fs::exists(scan_path)) throw IoError("morph not found: " + scan_path.string());
    const Scan scan = load_scan(scan_path);
    const ShapeModel model = load_model(model_dir(c, "full"));
    const ClassMeanCoefficients means = class_means_from_json(read_json_file(model_dir(c, "full") / "class_means.json"));
    const DiagnosisClass from = c.transfer.from.value_or(scan.diagnosis);
    const DiagnosisClass to = c.transfer.to;

    const Eigen::VectorXd alpha = project(model, align_to_model(model, scan.mesh.vertices));
    const Eigen::VectorXd moved = pathology_transfer(alpha, means, from, to);
    const fs::path out = c.paths.output / "transfer";
    ensure_dir(out);
    const std::string stem = scan.subject_id + "_" + std::string(class_name(from)) + "_to_" + std::string(class_name(to));
    TriMesh mesh;
    mesh.faces = model.faces;
    mesh.vertices = reconstruct(model, alpha);
    save_mesh(out / (scan.subject_id + "_reconstruction.ply"), mesh);
    mesh.vertices = reconstruct(model, moved);
    save_mesh(out / (stem + ".ply"), mesh);

    ojson doc;
    doc["subject_id"] = scan.subject_id;
    doc["from"] = class_name(from);
    doc["to"] = class_name(to);
    doc["alpha"] = std::vector<double>(alpha.data(), alpha.data() + alpha.size());
    doc["alpha_transferred"] = std::vector<double>(moved.data(), moved.data() + moved.size());
    write_text_file(out / (stem + ".json"), doc.dump(2) + "\n");

    ojson summary;
    summary["stage"] = "transfer";
    summary["subject_id"] = scan.subject_id;
    summary["from"] = class_name(from);
    summary["to"] = class_name(to);
    summary["output"] = (out / (stem + ".ply")).string();
    return summary;
}

ojson run_flex(const PipelineConfig& c) {
    c.validate();
    const Scan templ = load_template(c);
    const std::string& name = c.flex.model;
    const ShapeModel model = load_model(model_dir(c, name));
    const std::vector<int> fixed =
        to_model_vertices(model, cranial_mask(templ.mesh, templ.landmarks, c.model.cranial_offset_mm));
    const int modes = std::min<int>(c.flex.modes, static_cast<int>(model.component_count()));
    if (modes < c.flex.modes) warn("model '" + name + "' has only " + std::to_string(modes) + " components");
    const FlexibilityBasis basis = flexibility_modes(model, fixed, modes, c.flex.eps);
    save_flexibility(basis, model_dir(c, name));

    std::vector<bool> is_fixed(static_cast<size_t>(model.vertex_count()), false);
    for (int v : fixed) is_fixed[v] = true;
    const fs::path out = c.paths.output / "flex";
    ensure_dir(out);
    ojson per_mode = ojson::array();
    for (int j = 0; j < modes; ++j) {
        const PointSet d = unflatten(mode_displacement(model, basis.modes.col(j)));
        double fixed_sq = 0.0, free_sq = 0.0;
        int n_fixed = 0, n_free = 0;
        for (Eigen::Index v = 0; v < d.rows(); ++v) {
            if (is_fixed[v]) {
                fixed_sq += d.row(v).squaredNorm();
                ++n_fixed;
            } else {
                free_sq += d.row(v).squaredNorm();
                ++n_free;
            }
        }
        const double fixed_rms = n_fixed ? std::sqrt(fixed_sq / n_fixed) : 0.0;
        const double free_rms = n_free ? std::sqrt(free_sq / n_free) : 0.0;
        per_mode.push_back({{"mode", j + 1},
                            {"ratio", basis.ratios(j)},
                            {"fixed_rms_mm", fixed_rms},
                            {"free_rms_mm", free_rms}});
        TriMesh mesh;
        mesh.faces = model.faces;
        for (const auto& [suffix, sign] : {std::pair{"minus", -1.0}, std::pair{"plus", 1.0}}) {
            mesh.vertices = model.mean_shape() + sign * c.flex.amplitude_mm * d;
            save_mesh(out / (name + "_mode_" + std::to_string(j + 1) + "_" + suffix + ".ply"), mesh);
        }
    }
    ojson doc;
    doc["model"] = name;
    doc["fixed_vertices"] = fixed.size();
    doc["eps"] = c.flex.eps;
    doc["amplitude_mm"] = c.flex.amplitude_mm;
    doc["modes"] = per_mode;
    write_text_file(out / (name + "_modes.json"), doc.dump(2) + "\n");

    ojson summary;
    summary["stage"] = "flex";
    summary["model"] = name;
    summary["modes"] = modes;
    summary["fixed_vertices"] = fixed.size();
    summary["output"] = out.string();
    return summary;
}

}  // namespace craniossm
