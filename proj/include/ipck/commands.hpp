#pragma once

#include "ipck/backend.hpp"
#include "ipck/config.hpp"
#include "ipck/corpus.hpp"
#include "ipck/evaluation.hpp"
#include "ipck/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ipck {

/// A loaded dataset with every example assigned to a split.
struct PreparedData {
    std::vector<CommitExample> examples;
    LabelSpace labels;
};

/// Load the dataset and assign splits, from the manifest when one is configured.
PreparedData prepare_data(const RunConfig& config);

/// Knowledge-graph candidates for each class, in label order.
std::vector<CandidateSet> expand_classes(const RunConfig& config, const LabelSpace& labels);

/// The configured verbalizer head over `labels`: prototype rows from the
/// expanded candidates (knowledgeable) or label-word output rows (manual).
VerbalizerHead<float> build_head(const RunConfig& config, const LabelSpace& labels, const Backend& backend);

struct ExperimentResult {
    RunMetrics metrics;
    TrainResult<float> trained;
    std::vector<Prediction> predictions;
    std::vector<CommitExample> evaluated; ///< the query set, aligned with predictions
    LabelSpace labels;                    ///< the episode's classes
};

/// One train-then-evaluate run.
///
/// With `k_shot` set, an N-way K-shot support set is drawn from the train
/// split with `seed` (k_shot 0 skips training); otherwise the whole train
/// split is used. Early stopping watches the validation split and the query
/// set is the configured eval split, both restricted to the episode's
/// classes. The backbone is left as trained; callers running several cells in
/// full mode restore it themselves.
ExperimentResult run_experiment(const RunConfig& config, Backend& backend, const PreparedData& data,
                                std::optional<std::size_t> k_shot, std::uint64_t seed,
                                const std::optional<std::filesystem::path>& metrics_log = std::nullopt);

/// Metrics of a head over examples, skipping (with a warning) gold labels outside the head's classes.
RunMetrics evaluate(const Backend& backend, const VerbalizerHead<float>& head, const PromptTemplate& tmpl,
                    const std::vector<CommitExample>& examples, Averaging averaging,
                    std::vector<Prediction>* predictions = nullptr, std::vector<CommitExample>* kept = nullptr);

/// The backend a checkpoint was trained with: its own backbone/ when present.
Backend open_checkpoint_backend(const std::filesystem::path& checkpoint, const RunConfig& config);

/// The run_config.json stored in a checkpoint.
nlohmann::json checkpoint_config(const std::filesystem::path& checkpoint);

/// Write metrics.json plus the confusion CSV, recall CSV and (optionally) SVG into `dir`.
void write_metrics(const std::filesystem::path& dir, const RunMetrics& metrics, bool svg);

/// Commands. Each validates the configuration before creating any output
/// and reports progress to `log`. Errors propagate as ipck::Error.
void cmd_build_verbalizer(const RunConfig& config, std::ostream& log);
void cmd_train(const RunConfig& config, std::ostream& log);
void cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log);

struct PredictInput {
    std::optional<std::filesystem::path> file; ///< CSV/TSV with a message column and an optional id column
    std::vector<std::string> messages;         ///< given directly; ids are their positions
};

/// Writes id,message,predicted_label,class_probs rows to `out` (stdout when empty).
void cmd_predict(const RunConfig& config, const std::filesystem::path& checkpoint, const PredictInput& input,
                 const std::optional<std::filesystem::path>& out, std::ostream& log);
SweepResult cmd_sweep(const RunConfig& config, std::ostream& log);

/// Read id/message pairs for prediction.
std::vector<CommitExample> read_messages(const std::filesystem::path& path);

} // namespace ipck
