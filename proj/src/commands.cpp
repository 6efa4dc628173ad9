#include "ipck/commands.hpp"

#include "ipck/csv.hpp"
#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"
#include "ipck/knowledge.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace ipck {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text))
        throw RuntimeError("cannot write " + path.string());
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

void make_output_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw RuntimeError("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::vector<CommitExample> restrict_to(const std::vector<CommitExample>& examples, const std::vector<std::string>& classes)
{
    std::vector<CommitExample> out;
    for (const auto& x : examples)
        if (std::find(classes.begin(), classes.end(), x.label) != classes.end())
            out.push_back(x);
    return out;
}

void describe(RunMetrics& m, const RunConfig& config)
{
    m.dataset = config.dataset_name();
    m.model_id = config.backend.model_id;
    m.tune_mode = std::string(to_string(config.train.tune_mode));
    m.verbalizer_kind = to_string(config.verbalizer.kind);
}

std::string format_probs(const std::vector<std::string>& classes, const std::vector<double>& probs)
{
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < classes.size(); ++c)
        j[classes[c]] = probs[c];
    return j.dump();
}

void save_backbone(const Backend& backend, const fs::path& dir)
{
    make_output_dir(dir);
    for (const char* name : {"config.json", "tokenizer.json", "generation_config.json"}) {
        const auto src = backend.directory() / name;
        if (fs::exists(src))
            fs::copy_file(src, dir / name, fs::copy_options::overwrite_existing);
    }
    backend.model().save(dir / "model.safetensors");
}

} // namespace

PreparedData prepare_data(const RunConfig& config)
{
    auto ds = load_dataset(config.dataset.path, config.dataset.schema);
    PreparedData out;
    out.labels = ds.labels;
    if (!config.dataset.manifest.empty())
        out.examples = apply_split_manifest(config.dataset.manifest, std::move(ds.examples));
    else
        out.examples = split_dataset(std::move(ds.examples), ds.labels, config.dataset.ratios, config.dataset.split_seed);
    return out;
}

std::vector<CandidateSet> expand_classes(const RunConfig& config, const LabelSpace& labels)
{
    const auto snapshot = load_snapshot(config.verbalizer.snapshot_path);
    std::vector<CandidateSet> sets;
    for (const auto& c : labels.classes())
        sets.push_back(expand_class(snapshot, c, config.verbalizer.n_kg));
    return sets;
}

VerbalizerHead<float> build_head(const RunConfig& config, const LabelSpace& labels, const Backend& backend)
{
    if (config.verbalizer.kind == VerbalizerKind::knowledgeable) {
        const auto sets = expand_classes(config, labels);
        const auto proto = build_prototype<float>(std::span<const CandidateSet>(sets),
                                                  [&](const std::string& w) { return backend.embed_word(w); });
        return VerbalizerHead<float>::prototype(proto);
    }
    std::map<std::string, std::vector<std::string>> mapping;
    for (const auto& c : labels.classes()) {
        const auto it = config.verbalizer.label_words.find(c);
        if (it != config.verbalizer.label_words.end())
            mapping[c] = it->second;
        else
            mapping[c] = {canonical_word(c)};
    }
    for (const auto& [c, words] : config.verbalizer.label_words)
        if (!labels.contains(c))
            throw ConfigError("verbalizer.label_words: unknown class '" + c + "'");
    return VerbalizerHead<float>::manual(build_manual(labels, mapping), backend);
}

RunMetrics evaluate(const Backend& backend, const VerbalizerHead<float>& head, const PromptTemplate& tmpl,
                    const std::vector<CommitExample>& examples, Averaging averaging,
                    std::vector<Prediction>* predictions, std::vector<CommitExample>* kept)
{
    const LabelSpace labels("", head.classes());
    auto usable = restrict_to(examples, head.classes());
    if (usable.size() != examples.size())
        warn(std::to_string(examples.size() - usable.size()) + " examples with labels outside the head's classes skipped");
    if (usable.empty())
        throw DataError("no examples to evaluate");
    const auto preds = predict(backend, head, tmpl, std::span<const CommitExample>(usable));
    std::vector<std::size_t> gold, pred;
    for (std::size_t i = 0; i < usable.size(); ++i) {
        gold.push_back(labels.index_of(usable[i].label));
        pred.push_back(preds[i].label);
    }
    auto m = compute_metrics(gold, pred, labels.size(), averaging);
    m.classes = head.classes();
    if (predictions)
        *predictions = preds;
    if (kept)
        *kept = std::move(usable);
    return m;
}

ExperimentResult run_experiment(const RunConfig& config, Backend& backend, const PreparedData& data,
                                std::optional<std::size_t> k_shot, std::uint64_t seed,
                                const std::optional<fs::path>& metrics_log)
{
    const auto start = std::chrono::steady_clock::now();
    const auto train_pool = select_split(data.examples, Split::train);
    const auto val_pool = select_split(data.examples, Split::val);
    const auto query_pool = select_split(data.examples, config.eval.split);

    std::vector<CommitExample> support;
    std::vector<std::string> classes = data.labels.classes();
    if (k_shot) {
        const std::size_t n_way = config.episode.n_way.value_or(data.labels.size());
        auto episode = sample_episode(train_pool, data.labels, n_way, *k_shot, seed, query_pool);
        support = std::move(episode.support);
        classes = std::move(episode.classes);
    } else {
        support = train_pool;
    }
    const LabelSpace labels(data.labels.dataset_id(), classes);
    const auto val = restrict_to(val_pool, classes);
    const auto query = restrict_to(query_pool, classes);

    const auto tmpl = config.prompt_template();
    auto head = build_head(config, labels, backend);
    TrainConfig tc = config.train;
    tc.seed = seed;
    TrainData td{support, val, &labels};

    ExperimentResult res{.metrics = {},
                         .trained = train(backend, std::move(head), tmpl, td, tc, metrics_log),
                         .predictions = {},
                         .evaluated = {},
                         .labels = labels};
    res.metrics = evaluate(backend, res.trained.head, tmpl, query, config.eval.averaging, &res.predictions, &res.evaluated);
    describe(res.metrics, config);
    res.metrics.shot = k_shot;
    res.metrics.seed = seed;
    res.metrics.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

nlohmann::json checkpoint_config(const fs::path& checkpoint)
{
    const auto path = checkpoint / "run_config.json";
    std::ifstream in(path);
    if (!in)
        throw ConfigError("checkpoint: " + checkpoint.string() + " has no run_config.json");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

Backend open_checkpoint_backend(const fs::path& checkpoint, const RunConfig& config)
{
    if (fs::is_directory(checkpoint / "backbone")) {
        auto b = Backend::open((checkpoint / "backbone").string(), config.backend.max_len);
        return b;
    }
    return Backend::open(config.backend.model_id, config.backend.max_len);
}

void write_metrics(const fs::path& dir, const RunMetrics& metrics, bool svg)
{
    write_json(dir / "metrics.json", metrics.to_json());
    const auto report = confusion_report(metrics);
    write_text(dir / "confusion.csv", report.confusion_csv);
    write_text(dir / "recall.csv", report.recall_csv);
    if (svg)
        write_text(dir / "confusion.svg", report.svg);
}

void cmd_build_verbalizer(const RunConfig& config, std::ostream& log)
{
    config.validate(Command::build_verbalizer);
    const LabelSpace labels = config.dataset.path.empty() ? schema_labels(config.dataset.schema)
                                                          : load_dataset(config.dataset.path, config.dataset.schema).labels;
    auto backend = Backend::open(config.backend.model_id, config.backend.max_len);
    const auto head = build_head(config, labels, backend);

    make_output_dir(config.output_dir);
    head.save(config.output_dir);
    write_json(config.output_dir / "run_config.json", config.to_json());

    std::ostringstream text, table;
    table << "class,rank,word,score\n";
    if (head.kind() == VerbalizerKind::knowledgeable) {
        for (const auto& set : head.sources()) {
            text << set.class_name << " (" << set.candidates.size() << " words)\n";
            for (std::size_t r = 0; r < set.candidates.size(); ++r) {
                const auto& c = set.candidates[r];
                text << "  " << std::setw(2) << r << "  " << std::left << std::setw(24) << c.word << std::right
                     << std::fixed << std::setprecision(4) << c.score << "\n";
                table << csv::join({set.class_name, std::to_string(r), c.word, json(c.score).dump()}) << "\n";
            }
        }
    } else {
        for (std::size_t c = 0; c < head.num_classes(); ++c) {
            text << head.classes()[c] << "\n";
            std::size_t r = 0;
            for (int row : head.groups()[c]) {
                const auto& w = head.row_labels()[static_cast<std::size_t>(row)];
                text << "  " << std::setw(2) << r << "  " << w << "\n";
                table << csv::join({head.classes()[c], std::to_string(r), w, ""}) << "\n";
                ++r;
            }
        }
    }
    write_text(config.output_dir / "candidates.txt", text.str());
    write_text(config.output_dir / "candidates.csv", table.str());
    log << text.str();
    log << "verbalizer written to " << config.output_dir.string() << "\n";
}

void cmd_train(const RunConfig& config, std::ostream& log)
{
    config.validate(Command::train);
    const auto data = prepare_data(config);
    auto backend = Backend::open(config.backend.model_id, config.backend.max_len);

    make_output_dir(config.output_dir);
    write_json(config.output_dir / "run_config.json", config.to_json());
    write_json(config.output_dir / "train_config.json", config.train.to_json());
    write_split_manifest(config.output_dir / "split_manifest.json", data.examples);

    auto res = run_experiment(config, backend, data, config.episode.k_shot, config.train.seed,
                              config.output_dir / "metrics.jsonl");
    res.trained.head.save(config.output_dir);
    if (config.train.tune_mode == TuneMode::full)
        save_backbone(backend, config.output_dir / "backbone");

    auto& st = res.trained.state;
    st.checkpoint_path = config.output_dir;
    nlohmann::ordered_json state{{"epoch", st.epoch},
                                 {"best_val_acc", st.best_val_acc},
                                 {"best_epoch", st.best_epoch},
                                 {"epochs_since_improve", st.epochs_since_improve},
                                 {"checkpoint_path", st.checkpoint_path.string()},
                                 {"stopped_early", st.stopped_early},
                                 {"diverged", st.diverged}};
    write_json(config.output_dir / "train_state.json", state);
    write_metrics(config.output_dir, res.metrics, config.eval.confusion_svg);

    log << "trained " << st.epoch << " epochs (best " << st.best_epoch << ", val acc " << st.best_val_acc << ")";
    if (st.diverged)
        log << ", diverged";
    log << "\n" << to_string(config.eval.split) << " accuracy " << res.metrics.accuracy << ", "
        << to_string(config.eval.averaging) << " F1 " << res.metrics.f1 << "\n";
    log << "checkpoint written to " << config.output_dir.string() << "\n";
}

void cmd_eval(const RunConfig& config, const fs::path& checkpoint, std::ostream& log)
{
    config.validate(Command::eval);
    if (!fs::is_regular_file(checkpoint / "head.json"))
        throw ConfigError("checkpoint: " + checkpoint.string() + " has no head.json");
    const auto data = prepare_data(config);
    auto backend = open_checkpoint_backend(checkpoint, config);
    const auto head = VerbalizerHead<float>::load(checkpoint);
    if (head.dim() != static_cast<Eigen::Index>(backend.handle().embed_dim))
        throw ConfigError("backend.model_id: hidden size " + std::to_string(backend.handle().embed_dim) +
                          " does not match the checkpoint's " + std::to_string(head.dim()));

    const auto start = std::chrono::steady_clock::now();
    std::vector<Prediction> preds;
    std::vector<CommitExample> kept;
    auto m = evaluate(backend, head, config.prompt_template(), select_split(data.examples, config.eval.split),
                      config.eval.averaging, &preds, &kept);
    describe(m, config);
    m.verbalizer_kind = to_string(head.kind());
    m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    make_output_dir(config.output_dir);
    write_metrics(config.output_dir, m, config.eval.confusion_svg);
    std::ostringstream rows;
    rows << "id,message,gold_label,predicted_label,class_probs\n";
    for (std::size_t i = 0; i < preds.size(); ++i)
        rows << csv::join({kept[i].id, kept[i].message, kept[i].label, head.classes()[preds[i].label],
                           format_probs(head.classes(), preds[i].probs)})
             << "\n";
    write_text(config.output_dir / "predictions.csv", rows.str());
    log << kept.size() << " examples, accuracy " << m.accuracy << ", " << to_string(m.averaging) << " P/R/F1 "
        << m.precision << "/" << m.recall << "/" << m.f1 << "\n";
    log << "metrics written to " << (config.output_dir / "metrics.json").string() << "\n";
}

std::vector<CommitExample> read_messages(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    const char delim = path.extension() == ".tsv" ? '\t' : ',';
    const auto records = csv::read(in, delim);
    if (records.empty())
        throw DataError(path.string() + ": empty file");
    const auto& header = records.front().fields;
    std::optional<std::size_t> id_col, msg_col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const auto h = trim(header[i]);
        if (h == "id")
            id_col = i;
        else if (h == "message")
            msg_col = i;
    }
    if (!msg_col)
        throw DataError(path.string() + ": missing column 'message'");
    std::vector<CommitExample> out;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& f = records[r].fields;
        if (f.size() == 1 && f[0].empty())
            continue;
        if (*msg_col >= f.size())
            throw DataError(path.string() + ":" + std::to_string(records[r].line) + ": missing message field");
        CommitExample x;
        x.id = id_col && *id_col < f.size() ? f[*id_col] : std::to_string(r - 1);
        x.message = f[*msg_col];
        out.push_back(std::move(x));
    }
    return out;
}

void cmd_predict(const RunConfig& config, const fs::path& checkpoint, const PredictInput& input,
                 const std::optional<fs::path>& out, std::ostream& log)
{
    config.validate(Command::predict);
    if (!fs::is_regular_file(checkpoint / "head.json"))
        throw ConfigError("checkpoint: " + checkpoint.string() + " has no head.json");
    std::vector<CommitExample> examples;
    if (input.file)
        examples = read_messages(*input.file);
    for (std::size_t i = 0; i < input.messages.size(); ++i) {
        CommitExample x;
        x.id = std::to_string(examples.size());
        x.message = input.messages[i];
        examples.push_back(std::move(x));
    }
    if (examples.empty())
        throw ConfigError("input: no messages given");
    for (const auto& x : examples)
        if (trim(x.message).empty())
            throw DataError("message for id '" + x.id + "' is empty");

    auto backend = open_checkpoint_backend(checkpoint, config);
    const auto head = VerbalizerHead<float>::load(checkpoint);
    const auto preds = predict(backend, head, config.prompt_template(), std::span<const CommitExample>(examples));

    std::ostringstream rows;
    rows << "id,message,predicted_label,class_probs\n";
    for (std::size_t i = 0; i < preds.size(); ++i)
        rows << csv::join({examples[i].id, examples[i].message, head.classes()[preds[i].label],
                           format_probs(head.classes(), preds[i].probs)})
             << "\n";
    if (out) {
        if (out->has_parent_path())
            make_output_dir(out->parent_path());
        write_text(*out, rows.str());
        log << preds.size() << " predictions written to " << out->string() << "\n";
    } else {
        std::cout << rows.str();
    }
}

SweepResult cmd_sweep(const RunConfig& config, std::ostream& log)
{
    config.validate(Command::sweep);
    const auto data = prepare_data(config);
    auto backend = Backend::open(config.backend.model_id, config.backend.max_len);
    make_output_dir(config.output_dir);
    write_json(config.output_dir / "run_config.json", config.to_json());

    std::vector<ad::Mat<float>> initial;
    if (config.train.tune_mode == TuneMode::full)
        for (const auto& p : backend.model().parameters())
            initial.push_back(p->value);

    auto runner = [&](std::size_t shot, std::uint64_t seed) {
        if (!initial.empty())
            for (std::size_t i = 0; i < initial.size(); ++i)
                backend.model().parameters()[i]->value = initial[i];
        log << "cell shot=" << shot << " seed=" << seed << std::flush;
        auto res = run_experiment(config, backend, data, shot, seed);
        log << "  accuracy " << res.metrics.accuracy << "  F1 " << res.metrics.f1 << "\n";
        return res.metrics;
    };
    auto result = run_sweep(config.eval.shots, config.eval.seeds, runner, config.output_dir / "sweep_cells.jsonl");
    if (!initial.empty())
        for (std::size_t i = 0; i < initial.size(); ++i)
            backend.model().parameters()[i]->value = initial[i];

    write_json(config.output_dir / "sweep.json", result.to_json());
    write_text(config.output_dir / "summary.csv", result.summary_csv());
    for (const auto& c : result.cells)
        if (c.failed)
            log << "cell shot=" << c.shot << " seed=" << c.seed << " failed: " << c.error << "\n";
    log << "sweep written to " << config.output_dir.string() << "\n";
    return result;
}

} // namespace ipck
