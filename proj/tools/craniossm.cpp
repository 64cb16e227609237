#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "craniossm/error.hpp"
#include "craniossm/pipeline.hpp"

using namespace craniossm;

namespace {

struct Overrides {
    std::optional<std::string> corpus, template_mesh, output;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;

    // phantom
    std::optional<int> per_class, resolution, template_resolution;
    std::optional<double> severity_min, severity_max, jitter_mm, variation;
    // preprocess
    bool no_mirror = false;
    // morph / transfer
    std::optional<std::string> method;
    // build
    std::optional<int> keep_components;
    std::optional<double> keep_variance, cranial_offset_mm;
    bool release_profile = false, no_class_models = false;
    // eval
    std::vector<std::string> eval_models, eval_methods;
    std::optional<int> eval_max_components, specificity_samples;
    // classify
    std::optional<std::string> classifier;
    std::optional<int> knn_k, folds, classify_max_components;
    bool rebuild_model_per_fold = false;
    // sample
    std::optional<std::string> sample_model;
    std::optional<int> count, sample_components;
    std::optional<double> clamp_sigma;
    // transfer
    std::optional<std::string> scan, from, to;
    // flex
    std::optional<std::string> flex_model;
    std::optional<int> modes;
    std::optional<double> eps, amplitude_mm;
};

template <class T, class U>
void apply(const std::optional<T>& v, U& target) {
    if (v) target = *v;
}

void apply_overrides(const Overrides& o, PipelineConfig& c) {
    apply(o.corpus, c.paths.corpus);
    apply(o.template_mesh, c.paths.template_mesh);
    apply(o.output, c.paths.output);
    apply(o.seed, c.seed);
    apply(o.jobs, c.jobs);
    apply(o.per_class, c.phantom.per_class);
    apply(o.resolution, c.phantom.resolution);
    apply(o.template_resolution, c.phantom.template_resolution);
    apply(o.severity_min, c.phantom.severity_min);
    apply(o.severity_max, c.phantom.severity_max);
    apply(o.jitter_mm, c.phantom.jitter_mm);
    apply(o.variation, c.phantom.variation);
    if (o.no_mirror) c.preprocess.mirror = false;
    if (o.method) c.morph.method = morph_method_from_name(*o.method);
    if (o.keep_components) c.model.keep_components = *o.keep_components;
    if (o.keep_variance) c.model.keep_variance = *o.keep_variance;
    apply(o.cranial_offset_mm, c.model.cranial_offset_mm);
    if (o.release_profile) c.model.release_profile = true;
    if (o.no_class_models) c.model.class_models = false;
    if (!o.eval_models.empty()) c.eval_model.models = o.eval_models;
    if (!o.eval_methods.empty()) {
        c.eval_morph.methods.clear();
        for (const auto& m : o.eval_methods) c.eval_morph.methods.push_back(morph_method_from_name(m));
    }
    apply(o.eval_max_components, c.eval_model.max_components);
    apply(o.specificity_samples, c.eval_model.specificity_samples);
    if (o.classifier) c.classify.classifier = classifier_from_name(*o.classifier);
    apply(o.knn_k, c.classify.knn_k);
    apply(o.folds, c.classify.folds);
    apply(o.classify_max_components, c.classify.max_components);
    if (o.rebuild_model_per_fold) c.classify.rebuild_model_per_fold = true;
    apply(o.sample_model, c.sample.model);
    apply(o.count, c.sample.count);
    if (o.sample_components) c.sample.components = *o.sample_components;
    apply(o.clamp_sigma, c.sample.clamp_sigma);
    apply(o.scan, c.transfer.scan);
    if (o.from) c.transfer.from = class_from_name(*o.from);
    if (o.to) c.transfer.to = class_from_name(*o.to);
    apply(o.flex_model, c.flex.model);
    apply(o.modes, c.flex.modes);
    apply(o.eps, c.flex.eps);
    apply(o.amplitude_mm, c.flex.amplitude_mm);
}

std::string_view kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::Usage: return "usage";
        case ErrorKind::Io: return "io";
        case ErrorKind::Numerical: return "numerical";
        case ErrorKind::Validation: return "validation";
    }
    return "unknown";
}

int fail(ErrorKind kind, const std::string& message) {
    nlohmann::ordered_json err;
    err["error"] = kind_name(kind);
    err["exit_code"] = static_cast<int>(kind);
    err["message"] = message;
    std::cerr << err.dump() << "\n";
    return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Craniofacial statistical shape modeling pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    Overrides o;
    std::optional<std::string> config_path;
    bool print_config = false;
    app.add_option("--config", config_path, "JSON configuration file");
    app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");
    app.add_option("--seed", o.seed, "Root seed");
    app.add_option("--jobs", o.jobs, "Worker threads");
    app.add_option("--corpus", o.corpus, "Raw scan directory");
    app.add_option("--template", o.template_mesh, "Template mesh (.ply, landmarks in the sibling .json)");
    app.add_option("--output", o.output, "Output directory");

    std::map<std::string, std::function<nlohmann::ordered_json(const PipelineConfig&)>> stages;

    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic labeled corpus and a template");
    phantom->add_option("--per-class", o.per_class, "Scans per diagnosis class");
    phantom->add_option("--resolution", o.resolution, "Geodesic frequency of the scans");
    phantom->add_option("--template-resolution", o.template_resolution, "Geodesic frequency of the template");
    phantom->add_option("--severity-min", o.severity_min);
    phantom->add_option("--severity-max", o.severity_max);
    phantom->add_option("--jitter", o.jitter_mm, "Radial surface noise, mm");
    phantom->add_option("--variation", o.variation, "Scale of per-subject shape variation");
    stages["phantom"] = run_phantom;

    auto* preprocess = app.add_subcommand("preprocess", "Clean every scan and add mirrored copies");
    preprocess->add_flag("--no-mirror", o.no_mirror, "Skip mirroring");
    stages["preprocess"] = run_preprocess;

    auto* morph = app.add_subcommand("morph", "Register the template onto every preprocessed scan");
    morph->add_option("--method", o.method, "nicp-a, nicp-t or 2s-lbrp");
    stages["morph"] = run_morph;

    auto* build = app.add_subcommand("build", "Build full, cranial and per-class shape models");
    build->add_option("--method", o.method, "Morphs to build from");
    build->add_option("--keep-components", o.keep_components);
    build->add_option("--keep-variance", o.keep_variance);
    build->add_option("--cranial-offset", o.cranial_offset_mm, "Cranial cut plane offset, mm");
    build->add_flag("--release-profile", o.release_profile, "Truncate to the published component counts");
    build->add_flag("--no-class-models", o.no_class_models);
    stages["build"] = run_build;

    auto* eval_model = app.add_subcommand("eval-model", "Compactness, generalization and specificity curves");
    eval_model->add_option("--method", o.method, "Morphs used as evaluation shapes");
    eval_model->add_option("--models", o.eval_models, "Model names");
    eval_model->add_option("--max-components", o.eval_max_components);
    eval_model->add_option("--specificity-samples", o.specificity_samples);
    stages["eval-model"] = run_eval_model;

    auto* eval_morph = app.add_subcommand("eval-morph", "Corpus-level registration quality table");
    eval_morph->add_option("--methods", o.eval_methods, "Morph methods to tabulate");
    stages["eval-morph"] = run_eval_morph;

    auto* classify = app.add_subcommand("classify", "Cross-validated classification in coefficient space");
    classify->add_option("--method", o.method, "Morphs to classify");
    classify->add_option("--classifier", o.classifier, "lda, nb or knn");
    classify->add_option("--knn-k", o.knn_k);
    classify->add_option("--folds", o.folds);
    classify->add_option("--max-components", o.classify_max_components);
    classify->add_option("--cranial-offset", o.cranial_offset_mm, "Used with --rebuild-model-per-fold");
    classify->add_flag("--rebuild-model-per-fold", o.rebuild_model_per_fold,
                       "Rebuild the model on each fold's training shapes");
    stages["classify"] = run_classify;

    auto* sample = app.add_subcommand("sample", "Draw random instances from a model");
    sample->add_option("--model", o.sample_model);
    sample->add_option("--count", o.count);
    sample->add_option("--components", o.sample_components, "Leading components to sample");
    sample->add_option("--clamp", o.clamp_sigma, "Coefficient clamp, standard deviations");
    stages["sample"] = run_sample;

    auto* transfer = app.add_subcommand("transfer", "Move a morphed scan between diagnosis classes");
    transfer->add_option("--method", o.method, "Morph directory holding the scan");
    transfer->add_option("--scan", o.scan, "Subject id of a morphed scan")->required();
    transfer->add_option("--from", o.from, "Source class (default: the scan's diagnosis)");
    transfer->add_option("--to", o.to, "Target class");
    stages["transfer"] = run_transfer;

    auto* flex = app.add_subcommand("flex", "Flexibility modes with the cranium held fixed");
    flex->add_option("--model", o.flex_model);
    flex->add_option("--modes", o.modes);
    flex->add_option("--eps", o.eps);
    flex->add_option("--amplitude", o.amplitude_mm, "Free-region RMS of the exported mode shapes, mm");
    flex->add_option("--cranial-offset", o.cranial_offset_mm, "Cranial cut plane offset, mm");
    stages["flex"] = run_flex;

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(ErrorKind::Usage, e.what());
    }

    try {
        PipelineConfig config = config_path ? load_config(*config_path) : PipelineConfig{};
        apply_overrides(o, config);
        config.validate();
        if (print_config) {
            std::cout << config_to_json(config).dump(2) << "\n";
            return 0;
        }
        const std::string name = app.get_subcommands().front()->get_name();
        std::cout << stages.at(name)(config).dump(2) << "\n";
        return 0;
    } catch (const Error& e) {
        return fail(e.kind(), e.what());
    } catch (const std::exception& e) {
        return fail(ErrorKind::Numerical, e.what());
    }
}
