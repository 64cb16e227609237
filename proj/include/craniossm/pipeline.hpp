#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "craniossm/classify.hpp"
#include "craniossm/register.hpp"
#include "craniossm/ssm.hpp"

namespace craniossm {

enum class MorphMethod { NicpAffine, NicpTranslation, TwoStageLbrp };
std::string_view morph_method_name(MorphMethod m);        // "nicp-a", "nicp-t", "2s-lbrp"
MorphMethod morph_method_from_name(std::string_view name);  // throws ValidationError

/// Everything a pipeline run depends on. Loaded from JSON (unknown keys are
/// rejected) and overridden by command-line flags.
struct PipelineConfig {
    struct Paths {
        std::filesystem::path corpus = "corpus";                 // raw scans: <id>.ply + <id>.json
        std::filesystem::path template_mesh = "template/template.ply";  // landmarks in template.json
        std::filesystem::path output = "out";
    } paths;
    std::uint64_t seed = 0;
    int jobs = 1;

    struct Phantom {
        int per_class = 10;
        double severity_min = 0.4;
        double severity_max = 1.0;
        double size_min_mm = 130.0;
        double size_max_mm = 150.0;
        double jitter_mm = 0.05;
        double variation = 1.0;
        int resolution = 14;
        int template_resolution = 10;
    } phantom;

    struct Preprocess {
        double dedup_tol = 1e-6;
        double min_component_fraction = 0.05;
        bool mirror = true;
    } preprocess;

    struct Morph {
        MorphMethod method = MorphMethod::NicpAffine;
        NicpConfig nicp;
        LbrpConfig lbrp;
    } morph;

    struct Model {
        std::optional<int> keep_components;
        std::optional<double> keep_variance;
        bool release_profile = false;  // truncate to the published component counts
        bool class_models = true;
        double cranial_offset_mm = 10.0;
    } model;

    struct Classify {
        ClassifierKind classifier = ClassifierKind::Lda;
        int knn_k = 5;
        int folds = 10;
        int max_components = 100;
        bool rebuild_model_per_fold = false;
    } classify;

    struct EvalModel {
        std::vector<std::string> models{"full", "cranial"};
        int max_components = 20;
        int specificity_samples = 100;
    } eval_model;

    struct EvalMorph {
        std::vector<MorphMethod> methods{MorphMethod::NicpAffine, MorphMethod::NicpTranslation,
                                         MorphMethod::TwoStageLbrp};
    } eval_morph;

    struct Sample {
        std::string model = "full";
        int count = 100;
        double clamp_sigma = 3.0;
        std::optional<int> components;
    } sample;

    struct Transfer {
        std::string scan;
        std::optional<DiagnosisClass> from;  // defaults to the scan's diagnosis
        DiagnosisClass to = DiagnosisClass::Control;
    } transfer;

    struct Flex {
        std::string model = "full";
        int modes = 3;
        double eps = 1e-6;
        double amplitude_mm = 5.0;  // free-region RMS of the exported mode shapes
    } flex;

    /// Range and closed-set checks. Paths are checked by the stages that use them.
    void validate() const;
};

PipelineConfig config_from_json(const nlohmann::json& doc);
nlohmann::ordered_json config_to_json(const PipelineConfig& config);
PipelineConfig load_config(const std::filesystem::path& path);

// Output layout below paths.output.
std::filesystem::path preprocessed_dir(const PipelineConfig& c);
std::filesystem::path morph_dir(const PipelineConfig& c, MorphMethod m);
std::filesystem::path models_dir(const PipelineConfig& c);
std::filesystem::path model_dir(const PipelineConfig& c, const std::string& name);

/// Model names: "full", "cranial" and the four class names.
std::vector<std::string> model_names();

// Stages. Each returns a JSON summary of what it wrote.
nlohmann::ordered_json run_phantom(const PipelineConfig& c);
nlohmann::ordered_json run_preprocess(const PipelineConfig& c);
nlohmann::ordered_json run_morph(const PipelineConfig& c);
nlohmann::ordered_json run_build(const PipelineConfig& c);
nlohmann::ordered_json run_eval_model(const PipelineConfig& c);
nlohmann::ordered_json run_eval_morph(const PipelineConfig& c);
nlohmann::ordered_json run_classify(const PipelineConfig& c);
nlohmann::ordered_json run_sample(const PipelineConfig& c);
nlohmann::ordered_json run_transfer(const PipelineConfig& c);
nlohmann::ordered_json run_flex(const PipelineConfig& c);

// --- building blocks shared with tests -----------------------------------------

/// Scans of a directory (every <id>.ply with its <id>.json), sorted by file name.
std::vector<Scan> load_scan_dir(const std::filesystem::path& dir);

/// Template similarity-aligned onto the target's landmarks, then morphed with
/// the chosen method. The result lives in the target's frame.
MorphResult morph_scan(const Scan& templ, const Scan& target, MorphMethod method, const NicpConfig& nicp,
                       const LbrpConfig& lbrp);

/// Coefficients of every shape in the model (rigidly aligned to its mean first).
FeatureSet extract_features(const ShapeModel& model, const std::vector<Scan>& shapes);

/// Cross-validation where the model is rebuilt on each fold's training shapes
/// only, so test shapes never inform the basis. Sweeps m = 1..max_components.
SweepResult sweep_rebuilding_model(const std::vector<Scan>& shapes, const FaceArray& faces, const MassMatrix& mass,
                                   const BuildOptions& build, const ClassifierFactory& factory, int max_components,
                                   int n_folds, std::uint64_t seed, int jobs);

/// Shortest decimal text that round-trips to the same double.
std::string format_number(double v);

}  // namespace craniossm
