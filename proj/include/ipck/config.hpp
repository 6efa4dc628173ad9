#pragma once

#include "ipck/backend.hpp"
#include "ipck/corpus.hpp"
#include "ipck/evaluation.hpp"
#include "ipck/knowledge.hpp"
#include "ipck/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ipck {

struct DatasetConfig {
    std::filesystem::path path;
    DatasetSchema schema = DatasetSchema::generic_csv;
    std::string name; ///< recorded in metrics; defaults to the file stem
    SplitRatios ratios;
    std::uint64_t split_seed = 7;
    std::filesystem::path manifest; ///< optional split manifest overriding the seeded split
};

struct TemplateConfig {
    std::string pattern{default_template_pattern};
    std::filesystem::path file; ///< when set, pattern number `index` of this file is used
    std::size_t index = 0;
};

struct VerbalizerConfig {
    VerbalizerKind kind = VerbalizerKind::knowledgeable;
    std::filesystem::path snapshot_path;
    std::size_t n_kg = default_kg_size;
    std::map<std::string, std::vector<std::string>> label_words; ///< manual kind; empty = class names
};

struct BackendConfig {
    std::string model_id = "t5-small";
    std::size_t max_len = default_max_len;
};

/// Few-shot episode for train/eval; no k_shot means the whole train split.
struct EpisodeConfig {
    std::optional<std::size_t> k_shot;
    std::optional<std::size_t> n_way;
};

struct EvalConfig {
    Averaging averaging = Averaging::macro;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<std::size_t> shots{5, 10, 15, 20, 50};
    Split split = Split::test;
    bool confusion_svg = true;
};

enum class Command { build_verbalizer, train, eval, predict, sweep };

struct RunConfig {
    DatasetConfig dataset;
    TemplateConfig tmpl;
    VerbalizerConfig verbalizer;
    BackendConfig backend;
    TrainConfig train;
    EpisodeConfig episode;
    EvalConfig eval;
    std::filesystem::path output_dir;

    nlohmann::ordered_json to_json() const;
    /// Strict: unknown keys and wrong types are ConfigErrors naming the field.
    static RunConfig from_json(const nlohmann::json& j);

    /// Cross-field checks for `cmd`; never touches the output directory.
    void validate(Command cmd) const;

    PromptTemplate prompt_template() const;
    std::string dataset_name() const;
};

/// Set `dotted.key=value` in a JSON object. The value is parsed as JSON when
/// it is valid JSON and taken as a string otherwise.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Defaults, then `base` (e.g. a checkpoint's stored config), then the config
/// file, then the overrides, in increasing precedence.
RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                      const std::optional<nlohmann::json>& base = std::nullopt);

} // namespace ipck
