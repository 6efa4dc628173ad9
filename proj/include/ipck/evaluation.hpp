#pragma once

#include "ipck/corpus.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ipck {

enum class Averaging { macro, weighted };
std::string to_string(Averaging a);
Averaging parse_averaging(std::string_view s);

using ConfusionMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ClassMetrics {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    long long support = 0;
};

struct AveragedScores {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

struct RunMetrics {
    // run description, filled by the caller
    std::string dataset;
    std::string model_id;
    std::string tune_mode;
    std::string verbalizer_kind;
    std::optional<std::size_t> shot;
    std::optional<std::uint64_t> seed;
    double wall_time_s = 0;

    std::vector<std::string> classes;
    Averaging averaging = Averaging::macro;
    double accuracy = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    AveragedScores macro;
    AveragedScores weighted;
    std::vector<ClassMetrics> per_class;
    ConfusionMatrix confusion; ///< rows gold, columns predicted

    nlohmann::ordered_json to_json(bool with_timing = true) const;
    static RunMetrics from_json(const nlohmann::json& j);
};

/// Confusion matrix, per-class scores, accuracy and both averages; the
/// headline precision/recall/f1 follow `averaging`. Per-class F1 is 0 when P+R is 0.
RunMetrics compute_metrics(std::span<const std::size_t> gold, std::span<const std::size_t> pred,
                           std::size_t num_classes, Averaging averaging = Averaging::macro);

/// Label-string form; throws DataError for a label outside the space.
RunMetrics compute_metrics(std::span<const std::string> gold, std::span<const std::string> pred,
                           const LabelSpace& labels, Averaging averaging = Averaging::macro);

/// Same metrics from an existing confusion matrix.
RunMetrics metrics_from_confusion(const ConfusionMatrix& confusion, Averaging averaging = Averaging::macro);

struct ConfusionReport {
    std::string confusion_csv;  ///< "gold/pred,<class>,..." then one row of counts per gold class
    std::string recall_csv;     ///< "class,recall,support,empty"
    std::vector<double> recall; ///< per-class accuracy (row-normalized diagonal); 0 for an empty row
    std::vector<bool> empty_row;
    std::string svg;
};

ConfusionReport confusion_report(const RunMetrics& metrics);

struct SweepCell {
    std::size_t shot = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    std::optional<RunMetrics> metrics;

    nlohmann::ordered_json to_json(bool with_timing = true) const;
    static SweepCell from_json(const nlohmann::json& j);
};

struct SweepSummaryRow {
    std::size_t shot = 0;
    std::size_t completed = 0;
    std::size_t failed = 0;
    double accuracy_mean = 0, accuracy_std = 0;
    double precision_mean = 0, precision_std = 0;
    double recall_mean = 0, recall_std = 0;
    double f1_mean = 0, f1_std = 0;
};

struct SweepResult {
    std::vector<std::size_t> shots;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells; ///< shot-major, seed-minor

    const SweepCell* find(std::size_t shot, std::uint64_t seed) const;
    /// Mean and sample standard deviation (0 for a single run) over completed cells.
    std::vector<SweepSummaryRow> summary() const;
    std::string summary_csv() const;
    nlohmann::ordered_json to_json(bool with_timing = true) const;
};

using CellRunner = std::function<RunMetrics(std::size_t shot, std::uint64_t seed)>;

/// Run every (shot, seed) cell. Each finished cell is appended to
/// `cells_log` (JSON lines) as soon as it completes; cells already completed
/// in an existing log are reused, failed ones are retried. A throwing cell is
/// recorded as failed and the sweep continues.
SweepResult run_sweep(const std::vector<std::size_t>& shots, const std::vector<std::uint64_t>& seeds,
                      const CellRunner& run_cell, const std::optional<std::filesystem::path>& cells_log = std::nullopt);

} // namespace ipck
