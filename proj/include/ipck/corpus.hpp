#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ipck {

enum class Split { unassigned, train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct CommitExample {
    std::string id;
    std::string message;
    std::string label;
    Split split = Split::unassigned;
    /// Source columns other than id/message/label (code diffs and the like), kept but unused.
    std::map<std::string, std::string> passthrough;
};

/// Ordered class names. Index order is the argmax tie-break order and the confusion-matrix row order.
class LabelSpace {
public:
    LabelSpace() = default;
    LabelSpace(std::string dataset_id, std::vector<std::string> classes);

    const std::string& dataset_id() const { return dataset_id_; }
    const std::vector<std::string>& classes() const { return classes_; }
    std::size_t size() const { return classes_.size(); }
    const std::string& name(std::size_t index) const { return classes_.at(index); }

    std::optional<std::size_t> find(std::string_view label) const;
    /// Index of a label; throws DataError for labels outside the space.
    std::size_t index_of(std::string_view label) const;
    bool contains(std::string_view label) const { return find(label).has_value(); }

    bool operator==(const LabelSpace&) const = default;

private:
    std::string dataset_id_;
    std::vector<std::string> classes_;
};

enum class DatasetSchema { dataset1_binary, dataset2_ternary, generic_csv };

DatasetSchema parse_schema(std::string_view name);
std::string_view to_string(DatasetSchema schema);

/// The fixed class order of a named schema; ConfigError for generic_csv, whose classes come from the data.
LabelSpace schema_labels(DatasetSchema schema);

struct Dataset {
    std::vector<CommitExample> examples;
    LabelSpace labels;
};

/// Load a CSV/TSV commit dataset (TSV when the extension is .tsv).
///
/// Required columns are `message` and `label`; `id` is optional and defaults to
/// the zero-based data-row index. The two fixed schemas use the class order
/// SECURE, INSECURE and Corrective, Adaptive, Perfective; generic_csv sorts the
/// distinct labels.
Dataset load_dataset(const std::filesystem::path& path, DatasetSchema schema);

struct SplitRatios {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;
};

/// Per-class split sizes under the floor-then-distribute rule.
struct SplitCounts {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

/// Stratified split. Per class: floor(n * ratio) for each split, then the
/// leftover examples go one at a time to train, test, val in rotation. The
/// rotation cursor carries across classes (taken in LabelSpace order) and
/// skips splits with a zero ratio.
std::vector<CommitExample> split_dataset(std::vector<CommitExample> examples, const LabelSpace& labels,
                                         const SplitRatios& ratios, std::uint64_t seed);

/// The per-class counts split_dataset assigns, in LabelSpace order.
std::vector<SplitCounts> stratified_counts(const std::vector<std::size_t>& class_sizes, const SplitRatios& ratios);

std::vector<CommitExample> select_split(const std::vector<CommitExample>& examples, Split split);

struct FewShotEpisode {
    std::vector<CommitExample> support;
    std::vector<CommitExample> query;
    std::vector<std::string> classes;
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::uint64_t seed = 0;
};

/// Sample an N-way K-shot support set from `train_pool`.
///
/// When n_way equals the number of classes every class takes part; otherwise
/// n_way classes are drawn with the seed and kept in LabelSpace order. The
/// query set is filtered to the episode's classes and must not share ids with
/// the support set.
FewShotEpisode sample_episode(const std::vector<CommitExample>& train_pool, const LabelSpace& labels,
                              std::size_t n_way, std::size_t k_shot, std::uint64_t seed,
                              const std::vector<CommitExample>& query);

/// Split manifest: JSON object {id: "train"|"val"|"test"} in example order.
void write_split_manifest(const std::filesystem::path& path, const std::vector<CommitExample>& examples);
std::vector<CommitExample> apply_split_manifest(const std::filesystem::path& path, std::vector<CommitExample> examples);

std::string trim(std::string_view text);

} // namespace ipck
