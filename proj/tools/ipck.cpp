// ipck command-line entry point.

#include "ipck/commands.hpp"
#include "ipck/config.hpp"
#include "ipck/error.hpp"
#include "ipck/knowledge.hpp"

#include <CLI11.hpp>

#ifdef IPCK_WITH_HTTP
#include <httplib.h>
#endif

#include <deque>
#include <iostream>
#include <set>

namespace {

namespace fs = std::filesystem;

struct CommonOptions {
    std::optional<fs::path> config;
    std::vector<std::string> sets;
    std::string dataset, schema, output, model, snapshot, kind, tune_mode;
    std::optional<std::size_t> k_shot;
    std::optional<std::uint64_t> seed;

    std::vector<std::string> overrides() const
    {
        // Named flags first so an explicit --set wins over them.
        std::vector<std::string> o;
        auto add = [&](const char* key, const std::string& v) {
            if (!v.empty())
                o.push_back(std::string(key) + "=" + nlohmann::json(v).dump());
        };
        add("dataset.path", dataset);
        add("dataset.schema", schema);
        add("output_dir", output);
        add("backend.model_id", model);
        add("verbalizer.snapshot_path", snapshot);
        add("verbalizer.kind", kind);
        add("train.tune_mode", tune_mode);
        if (k_shot)
            o.push_back("episode.k_shot=" + std::to_string(*k_shot));
        if (seed)
            o.push_back("train.seed=" + std::to_string(*seed));
        o.insert(o.end(), sets.begin(), sets.end());
        return o;
    }
};

void add_common(CLI::App* cmd, CommonOptions& o)
{
    cmd->add_option("-c,--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.sets, "Override a config field: key.path=value (repeatable)");
    cmd->add_option("--dataset", o.dataset, "Dataset CSV/TSV (dataset.path)");
    cmd->add_option("--schema", o.schema, "dataset1_binary | dataset2_ternary | generic_csv");
    cmd->add_option("-o,--output", o.output, "Output directory (output_dir)");
    cmd->add_option("--model", o.model, "Checkpoint id or directory (backend.model_id)");
    cmd->add_option("--snapshot", o.snapshot, "Knowledge snapshot (verbalizer.snapshot_path)");
    cmd->add_option("--verbalizer", o.kind, "manual | knowledgeable");
    cmd->add_option("--tune-mode", o.tune_mode, "prompt_only | full");
    cmd->add_option("--k-shot", o.k_shot, "Shots per class (episode.k_shot)");
    cmd->add_option("--seed", o.seed, "Training and episode seed (train.seed)");
}

#ifdef IPCK_WITH_HTTP
std::vector<ipck::Neighbor> fetch_related(httplib::Client& client, const std::string& word, std::size_t limit)
{
    const auto res = client.Get("/api/related", httplib::Params{{"term", word}}, httplib::Headers{});
    if (!res)
        throw ipck::RuntimeError("request for '" + word + "' failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw ipck::RuntimeError("request for '" + word + "' returned HTTP " + std::to_string(res->status));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw ipck::DataError("response for '" + word + "' is not JSON: " + e.what());
    }
    std::vector<ipck::Neighbor> out;
    double top = 0;
    for (const auto& item : j) {
        if (!item.contains("word") || !item["word"].is_string())
            continue;
        const double score = item.value("score", 0.0);
        top = std::max(top, score);
        out.push_back({ipck::canonical_word(item["word"].get<std::string>()), score});
        if (out.size() == limit)
            break;
    }
    for (auto& n : out)
        n.score = top > 0 ? n.score / top : 0.0;
    return out;
}
#endif

int fetch_snapshot(const std::vector<std::string>& words, const fs::path& out, const std::string& host,
                   std::size_t depth, std::size_t limit)
{
#ifdef IPCK_WITH_HTTP
    httplib::Client client(host);
    client.set_follow_location(true);
    ipck::KnowledgeSnapshot snapshot;
    std::deque<std::pair<std::string, std::size_t>> queue;
    std::set<std::string> seen;
    for (const auto& w : words)
        if (seen.insert(ipck::canonical_word(w)).second)
            queue.emplace_back(ipck::canonical_word(w), 0);
    while (!queue.empty()) {
        auto [word, level] = queue.front();
        queue.pop_front();
        const auto neighbors = fetch_related(client, word, limit);
        snapshot.add(word, neighbors);
        std::cerr << word << ": " << neighbors.size() << " neighbors\n";
        if (level + 1 < depth)
            for (const auto& n : neighbors)
                if (seen.insert(n.word).second)
                    queue.emplace_back(n.word, level + 1);
    }
    ipck::save_snapshot(out, snapshot);
    std::cerr << snapshot.size() << " entries written to " << out.string() << "\n";
    return 0;
#else
    (void)words, (void)out, (void)host, (void)depth, (void)limit;
    throw ipck::ConfigError("fetch-snapshot: this build has no HTTP client support");
#endif
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Commit classification by prompt tuning with knowledgeable verbalizers"};
    app.require_subcommand(1);

    CommonOptions build_opts, train_opts, eval_opts, predict_opts, sweep_opts;
    auto* build = app.add_subcommand("build-verbalizer", "Expand label words and write the verbalizer with a report");
    add_common(build, build_opts);

    auto* train = app.add_subcommand("train", "Prompt-tune and write a checkpoint directory");
    add_common(train, train_opts);

    fs::path eval_checkpoint;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write metrics");
    add_common(eval, eval_opts);
    eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint directory written by train")->required();

    fs::path predict_checkpoint;
    std::optional<fs::path> predict_input, predict_out;
    std::vector<std::string> predict_messages;
    auto* predict = app.add_subcommand("predict", "Classify raw commit messages");
    add_common(predict, predict_opts);
    predict->add_option("--checkpoint", predict_checkpoint, "Checkpoint directory written by train")->required();
    predict->add_option("--input", predict_input, "CSV/TSV with a message column (id optional)");
    predict->add_option("--message", predict_messages, "A commit message (repeatable)");
    predict->add_option("--out", predict_out, "Output CSV (stdout when omitted)");

    auto* sweep = app.add_subcommand("sweep", "Run the shots x seeds few-shot grid");
    add_common(sweep, sweep_opts);

    std::vector<std::string> fetch_words;
    fs::path fetch_out;
    std::string fetch_host = "https://relatedwords.org";
    std::size_t fetch_depth = 2, fetch_limit = 50;
    auto* fetch = app.add_subcommand("fetch-snapshot", "Build a knowledge snapshot from the related-words service");
    fetch->add_option("--word", fetch_words, "Seed word, usually a class name (repeatable)")->required();
    fetch->add_option("-o,--output", fetch_out, "Snapshot file (JSON lines)")->required();
    fetch->add_option("--host", fetch_host, "Service base URL");
    fetch->add_option("--depth", fetch_depth, "Neighbor levels to fetch");
    fetch->add_option("--limit", fetch_limit, "Neighbors kept per word");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (build->parsed()) {
            ipck::cmd_build_verbalizer(ipck::load_config(build_opts.config, build_opts.overrides()), std::cerr);
        } else if (train->parsed()) {
            ipck::cmd_train(ipck::load_config(train_opts.config, train_opts.overrides()), std::cerr);
        } else if (eval->parsed()) {
            auto base = ipck::checkpoint_config(eval_checkpoint);
            base["output_dir"] = (eval_checkpoint / "eval").string();
            ipck::cmd_eval(ipck::load_config(eval_opts.config, eval_opts.overrides(), std::optional<nlohmann::json>(base)), eval_checkpoint, std::cerr);
        } else if (predict->parsed()) {
            const auto base = ipck::checkpoint_config(predict_checkpoint);
            ipck::cmd_predict(ipck::load_config(predict_opts.config, predict_opts.overrides(), std::optional<nlohmann::json>(base)),
                              predict_checkpoint, {predict_input, predict_messages}, predict_out, std::cerr);
        } else if (sweep->parsed()) {
            ipck::cmd_sweep(ipck::load_config(sweep_opts.config, sweep_opts.overrides()), std::cerr);
        } else if (fetch->parsed()) {
            return fetch_snapshot(fetch_words, fetch_out, fetch_host, fetch_depth, fetch_limit);
        }
    } catch (const ipck::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
