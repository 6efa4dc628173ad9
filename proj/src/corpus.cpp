#include "ipck/corpus.hpp"

#include "ipck/csv.hpp"
#include "ipck/error.hpp"
#include "ipck/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

namespace ipck {
namespace {

struct SchemaInfo {
    std::string dataset_id;
    std::vector<std::string> message_columns;
    std::vector<std::string> label_columns;
    std::vector<std::string> classes;                        // empty: derived from data
    std::vector<std::pair<std::string, std::string>> aliases; // raw label -> class
};

SchemaInfo schema_info(DatasetSchema schema, const std::filesystem::path& path)
{
    switch (schema) {
    case DatasetSchema::dataset1_binary:
        return {"dataset1",
                {"message", "msg", "commit_message"},
                {"label", "labels"},
                {"SECURE", "INSECURE"},
                {{"SECURE", "SECURE"}, {"INSECURE", "INSECURE"}, {"Positive", "SECURE"},
                 {"Negative", "INSECURE"}, {"1", "SECURE"}, {"0", "INSECURE"}}};
    case DatasetSchema::dataset2_ternary:
        return {"dataset2",
                {"message", "comment", "msg"},
                {"label", "labels"},
                {"Corrective", "Adaptive", "Perfective"},
                {{"Corrective", "Corrective"}, {"Adaptive", "Adaptive"}, {"Perfective", "Perfective"},
                 {"corrective", "Corrective"}, {"adaptive", "Adaptive"}, {"perfective", "Perfective"}}};
    case DatasetSchema::generic_csv:
        return {path.stem().string(), {"message"}, {"label"}, {}, {}};
    }
    throw ConfigError("unknown dataset schema");
}

std::optional<std::size_t> find_column(const std::vector<std::string>& header, const std::vector<std::string>& names)
{
    for (const auto& name : names) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it != header.end())
            return static_cast<std::size_t>(it - header.begin());
    }
    return std::nullopt;
}

} // namespace

std::string trim(std::string_view text)
{
    const auto first = text.find_first_not_of(" \t\r\n\f\v");
    if (first == std::string_view::npos)
        return {};
    const auto last = text.find_last_not_of(" \t\r\n\f\v");
    return std::string(text.substr(first, last - first + 1));
}

std::string_view to_string(Split split)
{
    switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

Split parse_split(std::string_view name)
{
    if (name == "train")
        return Split::train;
    if (name == "val")
        return Split::val;
    if (name == "test")
        return Split::test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

LabelSpace::LabelSpace(std::string dataset_id, std::vector<std::string> classes)
    : dataset_id_(std::move(dataset_id)), classes_(std::move(classes))
{
    std::set<std::string> seen;
    for (const auto& c : classes_)
        if (!seen.insert(c).second)
            throw DataError("duplicate class name '" + c + "' in label space");
}

std::optional<std::size_t> LabelSpace::find(std::string_view label) const
{
    for (std::size_t i = 0; i < classes_.size(); ++i)
        if (classes_[i] == label)
            return i;
    return std::nullopt;
}

std::size_t LabelSpace::index_of(std::string_view label) const
{
    if (auto idx = find(label))
        return *idx;
    throw DataError("label '" + std::string(label) + "' is not in the label space of " + dataset_id_);
}

DatasetSchema parse_schema(std::string_view name)
{
    if (name == "dataset1_binary")
        return DatasetSchema::dataset1_binary;
    if (name == "dataset2_ternary")
        return DatasetSchema::dataset2_ternary;
    if (name == "generic_csv")
        return DatasetSchema::generic_csv;
    throw ConfigError("dataset.schema: unknown schema '" + std::string(name) +
                      "' (expected dataset1_binary, dataset2_ternary or generic_csv)");
}

std::string_view to_string(DatasetSchema schema)
{
    switch (schema) {
    case DatasetSchema::dataset1_binary: return "dataset1_binary";
    case DatasetSchema::dataset2_ternary: return "dataset2_ternary";
    case DatasetSchema::generic_csv: return "generic_csv";
    }
    return "generic_csv";
}

LabelSpace schema_labels(DatasetSchema schema)
{
    if (schema == DatasetSchema::generic_csv)
        throw ConfigError("dataset.schema: generic_csv has no fixed classes; set dataset.path");
    auto info = schema_info(schema, {});
    return LabelSpace(info.dataset_id, info.classes);
}

Dataset load_dataset(const std::filesystem::path& path, DatasetSchema schema)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open dataset file " + path.string());
    const char delimiter = path.extension() == ".tsv" ? '\t' : ',';
    const auto records = csv::read(in, delimiter);
    if (records.size() < 2)
        throw DataError("no rows in " + path.string());

    const SchemaInfo info = schema_info(schema, path);
    std::vector<std::string> header;
    for (const auto& h : records.front().fields)
        header.push_back(trim(h));
    const auto message_col = find_column(header, info.message_columns);
    const auto label_col = find_column(header, info.label_columns);
    const auto id_col = find_column(header, {"id"});
    if (!message_col)
        throw DataError(path.string() + ": missing required column 'message'");
    if (!label_col)
        throw DataError(path.string() + ": missing required column 'label'");

    Dataset data;
    std::set<std::string> unknown;
    std::set<std::string> distinct;
    std::unordered_set<std::string> ids;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        auto field = [&](std::size_t col) -> std::string {
            return col < rec.fields.size() ? rec.fields[col] : std::string{};
        };
        CommitExample ex;
        ex.id = id_col ? trim(field(*id_col)) : std::to_string(r - 1);
        ex.message = trim(field(*message_col));
        if (ex.message.empty())
            throw DataError(path.string() + ":" + std::to_string(rec.line) + ": empty or missing message");
        if (ex.id.empty())
            throw DataError(path.string() + ":" + std::to_string(rec.line) + ": empty id");
        if (!ids.insert(ex.id).second)
            throw DataError(path.string() + ":" + std::to_string(rec.line) + ": duplicate id '" + ex.id + "'");

        const std::string raw_label = trim(field(*label_col));
        if (info.classes.empty()) {
            if (raw_label.empty())
                throw DataError(path.string() + ":" + std::to_string(rec.line) + ": empty label");
            ex.label = raw_label;
            distinct.insert(raw_label);
        } else {
            auto it = std::find_if(info.aliases.begin(), info.aliases.end(),
                                   [&](const auto& a) { return a.first == raw_label; });
            if (it == info.aliases.end())
                unknown.insert(raw_label);
            else
                ex.label = it->second;
        }
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (c == *message_col || c == *label_col || (id_col && c == *id_col))
                continue;
            ex.passthrough[header[c]] = field(c);
        }
        data.examples.push_back(std::move(ex));
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown)
            list += (list.empty() ? "'" : ", '") + u + "'";
        throw DataError(path.string() + ": unknown label value(s) for schema " + std::string(to_string(schema)) +
                        ": " + list);
    }
    std::vector<std::string> classes = info.classes;
    if (classes.empty())
        classes.assign(distinct.begin(), distinct.end());
    data.labels = LabelSpace(info.dataset_id, std::move(classes));
    return data;
}

std::vector<SplitCounts> stratified_counts(const std::vector<std::size_t>& class_sizes, const SplitRatios& ratios)
{
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    for (double v : r)
        if (!(v >= 0.0 && v <= 1.0))
            throw ConfigError("split ratios must lie in [0, 1]");
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");

    // Leftover order: train, test, val.
    constexpr std::array<int, 3> rotation{0, 2, 1};
    std::size_t cursor = 0;
    std::vector<SplitCounts> out;
    for (std::size_t n : class_sizes) {
        std::array<std::size_t, 3> counts{};
        std::size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            counts[s] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r[s] + 1e-9));
            assigned += counts[s];
        }
        for (std::size_t left = n - assigned; left > 0;) {
            const int s = rotation[cursor % 3];
            ++cursor;
            if (r[s] == 0.0)
                continue;
            ++counts[s];
            --left;
        }
        out.push_back({counts[0], counts[1], counts[2]});
    }
    return out;
}

std::vector<CommitExample> split_dataset(std::vector<CommitExample> examples, const LabelSpace& labels,
                                         const SplitRatios& ratios, std::uint64_t seed)
{
    std::vector<std::vector<std::size_t>> by_class(labels.size());
    for (std::size_t i = 0; i < examples.size(); ++i)
        by_class[labels.index_of(examples[i].label)].push_back(i);
    std::vector<std::size_t> sizes;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < 3)
            throw DataError("class '" + labels.name(c) + "' has " + std::to_string(by_class[c].size()) +
                            " example(s); at least 3 are needed to stratify into train/val/test");
        sizes.push_back(by_class[c].size());
    }
    const auto counts = stratified_counts(sizes, ratios);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        Rng rng(derive_seed(seed, c));
        rng.shuffle(std::span<std::size_t>(by_class[c]));
        std::size_t k = 0;
        for (std::size_t i = 0; i < counts[c].train; ++i)
            examples[by_class[c][k++]].split = Split::train;
        for (std::size_t i = 0; i < counts[c].val; ++i)
            examples[by_class[c][k++]].split = Split::val;
        for (std::size_t i = 0; i < counts[c].test; ++i)
            examples[by_class[c][k++]].split = Split::test;
    }
    return examples;
}

std::vector<CommitExample> select_split(const std::vector<CommitExample>& examples, Split split)
{
    std::vector<CommitExample> out;
    std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
                 [split](const CommitExample& e) { return e.split == split; });
    return out;
}

FewShotEpisode sample_episode(const std::vector<CommitExample>& train_pool, const LabelSpace& labels,
                              std::size_t n_way, std::size_t k_shot, std::uint64_t seed,
                              const std::vector<CommitExample>& query)
{
    if (n_way == 0 || n_way > labels.size())
        throw ConfigError("n_way must be between 1 and " + std::to_string(labels.size()));
    Rng rng(seed);

    std::vector<std::size_t> chosen(labels.size());
    for (std::size_t i = 0; i < chosen.size(); ++i)
        chosen[i] = i;
    if (n_way < labels.size()) {
        rng.shuffle(std::span<std::size_t>(chosen));
        chosen.resize(n_way);
        std::sort(chosen.begin(), chosen.end());
    }

    FewShotEpisode episode;
    episode.n_way = n_way;
    episode.k_shot = k_shot;
    episode.seed = seed;
    std::vector<std::vector<std::size_t>> members(labels.size());
    for (std::size_t i = 0; i < train_pool.size(); ++i)
        members[labels.index_of(train_pool[i].label)].push_back(i);

    std::string shortfalls;
    for (std::size_t c : chosen) {
        const auto have = members[c].size();
        if (have < k_shot)
            shortfalls += (shortfalls.empty() ? "" : "; ") + std::string("class '") + labels.name(c) + "' has " +
                          std::to_string(have) + " of " + std::to_string(k_shot) + " (short by " +
                          std::to_string(k_shot - have) + ")";
    }
    if (!shortfalls.empty())
        throw DataError("not enough training examples for a " + std::to_string(k_shot) + "-shot episode: " + shortfalls);

    std::set<std::string> support_ids;
    for (std::size_t c : chosen) {
        episode.classes.push_back(labels.name(c));
        auto& pool = members[c];
        // Partial Fisher-Yates: the first k positions hold the sample.
        for (std::size_t i = 0; i < k_shot; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            episode.support.push_back(train_pool[pool[i]]);
            support_ids.insert(train_pool[pool[i]].id);
        }
    }
    for (const auto& q : query) {
        if (support_ids.count(q.id))
            throw DataError("query example '" + q.id + "' also appears in the support set");
        if (std::find(episode.classes.begin(), episode.classes.end(), q.label) != episode.classes.end())
            episode.query.push_back(q);
    }
    return episode;
}

void write_split_manifest(const std::filesystem::path& path, const std::vector<CommitExample>& examples)
{
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& e : examples)
        j[e.id] = std::string(to_string(e.split));
    std::ofstream out(path);
    if (!out)
        throw RuntimeError("cannot write split manifest " + path.string());
    out << j.dump(1) << '\n';
}

std::vector<CommitExample> apply_split_manifest(const std::filesystem::path& path, std::vector<CommitExample> examples)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open split manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed split manifest " + path.string() + ": " + e.what());
    }
    for (auto& e : examples) {
        auto it = j.find(e.id);
        if (it == j.end())
            throw DataError("split manifest has no entry for id '" + e.id + "'");
        e.split = parse_split(it->get<std::string>());
    }
    return examples;
}

} // namespace ipck
