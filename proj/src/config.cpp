#include "ipck/config.hpp"

#include <cmath>
#include <fstream>

namespace ipck {

namespace {

using json = nlohmann::json;

[[noreturn]] void bad(const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); }

template <typename T>
T get(const json& j, const std::string& field)
{
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        bad(field, "wrong type");
    }
}

void check_keys(const json& j, const std::string& section, std::initializer_list<std::string_view> allowed)
{
    if (!j.is_object())
        bad(section, "expected an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (auto a : allowed)
            ok = ok || a == key;
        if (!ok)
            bad(section.empty() ? key : section + "." + key, "unknown field");
    }
}

std::string path_string(const std::filesystem::path& p) { return p.string(); }

} // namespace

nlohmann::ordered_json RunConfig::to_json() const
{
    nlohmann::ordered_json j;
    j["dataset"] = {{"path", path_string(dataset.path)},
                    {"schema", std::string(to_string(dataset.schema))},
                    {"name", dataset.name},
                    {"split", {{"ratios", {dataset.ratios.train, dataset.ratios.val, dataset.ratios.test}},
                               {"seed", dataset.split_seed}}},
                    {"manifest", path_string(dataset.manifest)}};
    j["template"] = {{"pattern", tmpl.pattern}, {"file", path_string(tmpl.file)}, {"index", tmpl.index}};
    nlohmann::ordered_json words = nlohmann::ordered_json::object();
    for (const auto& [k, v] : verbalizer.label_words)
        words[k] = v;
    j["verbalizer"] = {{"kind", to_string(verbalizer.kind)},
                       {"snapshot_path", path_string(verbalizer.snapshot_path)},
                       {"n_kg", verbalizer.n_kg},
                       {"label_words", words}};
    j["backend"] = {{"model_id", backend.model_id}, {"max_len", backend.max_len}};
    j["train"] = train.to_json();
    j["episode"] = {{"k_shot", episode.k_shot ? nlohmann::ordered_json(*episode.k_shot) : nlohmann::ordered_json()},
                    {"n_way", episode.n_way ? nlohmann::ordered_json(*episode.n_way) : nlohmann::ordered_json()}};
    j["eval"] = {{"averaging", to_string(eval.averaging)},
                 {"seeds", eval.seeds},
                 {"shots", eval.shots},
                 {"split", to_string(eval.split)},
                 {"confusion_svg", eval.confusion_svg}};
    j["output_dir"] = path_string(output_dir);
    return j;
}

RunConfig RunConfig::from_json(const json& j)
{
    RunConfig c;
    check_keys(j, "", {"dataset", "template", "verbalizer", "backend", "train", "episode", "eval", "output_dir"});
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        check_keys(d, "dataset", {"path", "schema", "name", "split", "manifest"});
        if (d.contains("path"))
            c.dataset.path = get<std::string>(d["path"], "dataset.path");
        if (d.contains("schema"))
            c.dataset.schema = parse_schema(get<std::string>(d["schema"], "dataset.schema"));
        if (d.contains("name"))
            c.dataset.name = get<std::string>(d["name"], "dataset.name");
        if (d.contains("manifest"))
            c.dataset.manifest = get<std::string>(d["manifest"], "dataset.manifest");
        if (d.contains("split")) {
            const auto& s = d["split"];
            check_keys(s, "dataset.split", {"ratios", "seed"});
            if (s.contains("ratios")) {
                const auto r = get<std::vector<double>>(s["ratios"], "dataset.split.ratios");
                if (r.size() != 3)
                    bad("dataset.split.ratios", "expected [train, val, test]");
                c.dataset.ratios = {r[0], r[1], r[2]};
            }
            if (s.contains("seed"))
                c.dataset.split_seed = get<std::uint64_t>(s["seed"], "dataset.split.seed");
        }
    }
    if (j.contains("template")) {
        const auto& t = j["template"];
        check_keys(t, "template", {"pattern", "file", "index"});
        if (t.contains("pattern"))
            c.tmpl.pattern = get<std::string>(t["pattern"], "template.pattern");
        if (t.contains("file"))
            c.tmpl.file = get<std::string>(t["file"], "template.file");
        if (t.contains("index"))
            c.tmpl.index = get<std::size_t>(t["index"], "template.index");
    }
    if (j.contains("verbalizer")) {
        const auto& v = j["verbalizer"];
        check_keys(v, "verbalizer", {"kind", "snapshot_path", "n_kg", "label_words"});
        if (v.contains("kind"))
            c.verbalizer.kind = parse_verbalizer_kind(get<std::string>(v["kind"], "verbalizer.kind"));
        if (v.contains("snapshot_path"))
            c.verbalizer.snapshot_path = get<std::string>(v["snapshot_path"], "verbalizer.snapshot_path");
        if (v.contains("n_kg"))
            c.verbalizer.n_kg = get<std::size_t>(v["n_kg"], "verbalizer.n_kg");
        if (v.contains("label_words"))
            c.verbalizer.label_words =
                get<std::map<std::string, std::vector<std::string>>>(v["label_words"], "verbalizer.label_words");
    }
    if (j.contains("backend")) {
        const auto& b = j["backend"];
        check_keys(b, "backend", {"model_id", "max_len"});
        if (b.contains("model_id"))
            c.backend.model_id = get<std::string>(b["model_id"], "backend.model_id");
        if (b.contains("max_len"))
            c.backend.max_len = get<std::size_t>(b["max_len"], "backend.max_len");
    }
    if (j.contains("train"))
        c.train = TrainConfig::from_json(j["train"]);
    if (j.contains("episode")) {
        const auto& e = j["episode"];
        check_keys(e, "episode", {"k_shot", "n_way"});
        if (e.contains("k_shot") && !e["k_shot"].is_null())
            c.episode.k_shot = get<std::size_t>(e["k_shot"], "episode.k_shot");
        if (e.contains("n_way") && !e["n_way"].is_null())
            c.episode.n_way = get<std::size_t>(e["n_way"], "episode.n_way");
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        check_keys(e, "eval", {"averaging", "seeds", "shots", "split", "confusion_svg"});
        if (e.contains("averaging"))
            c.eval.averaging = parse_averaging(get<std::string>(e["averaging"], "eval.averaging"));
        if (e.contains("seeds"))
            c.eval.seeds = get<std::vector<std::uint64_t>>(e["seeds"], "eval.seeds");
        if (e.contains("shots"))
            c.eval.shots = get<std::vector<std::size_t>>(e["shots"], "eval.shots");
        if (e.contains("split")) {
            try {
                c.eval.split = parse_split(get<std::string>(e["split"], "eval.split"));
            } catch (const Error&) {
                bad("eval.split", "must be train, val or test");
            }
        }
        if (e.contains("confusion_svg"))
            c.eval.confusion_svg = get<bool>(e["confusion_svg"], "eval.confusion_svg");
    }
    if (j.contains("output_dir"))
        c.output_dir = get<std::string>(j["output_dir"], "output_dir");
    return c;
}

void RunConfig::validate(Command cmd) const
{
    namespace fs = std::filesystem;
    const bool needs_data = cmd != Command::predict &&
                            !(cmd == Command::build_verbalizer && dataset.schema != DatasetSchema::generic_csv);
    if (needs_data) {
        if (dataset.path.empty())
            bad("dataset.path", "required");
        if (!fs::is_regular_file(dataset.path))
            bad("dataset.path", "file not found: " + dataset.path.string());
    }
    const double sum = dataset.ratios.train + dataset.ratios.val + dataset.ratios.test;
    if (dataset.ratios.train < 0 || dataset.ratios.val < 0 || dataset.ratios.test < 0 || std::abs(sum - 1.0) > 1e-9)
        bad("dataset.split.ratios", "must be non-negative and sum to 1");
    if (!dataset.manifest.empty() && !fs::is_regular_file(dataset.manifest))
        bad("dataset.manifest", "file not found: " + dataset.manifest.string());

    if (!tmpl.file.empty() && !fs::is_regular_file(tmpl.file))
        bad("template.file", "file not found: " + tmpl.file.string());
    try {
        (void)prompt_template();
    } catch (const ConfigError& e) {
        bad("template", e.what());
    }

    const bool builds_verbalizer = cmd == Command::build_verbalizer || cmd == Command::train || cmd == Command::sweep;
    if (builds_verbalizer && verbalizer.kind == VerbalizerKind::knowledgeable) {
        if (verbalizer.snapshot_path.empty())
            bad("verbalizer.snapshot_path", "required for the knowledgeable verbalizer");
        if (!fs::is_regular_file(verbalizer.snapshot_path))
            bad("verbalizer.snapshot_path", "file not found: " + verbalizer.snapshot_path.string());
    }
    if (verbalizer.n_kg < 1)
        bad("verbalizer.n_kg", "must be at least 1");

    if (backend.model_id.empty())
        bad("backend.model_id", "required");
    if (backend.max_len < 4)
        bad("backend.max_len", "must be at least 4");
    train.validate();
    if (episode.n_way && *episode.n_way < 1)
        bad("episode.n_way", "must be at least 1");
    if (cmd == Command::sweep) {
        if (eval.shots.empty())
            bad("eval.shots", "must list at least one shot count");
        if (eval.seeds.empty())
            bad("eval.seeds", "must list at least one seed");
    }
    if (cmd != Command::predict && output_dir.empty())
        bad("output_dir", "required");
}

PromptTemplate RunConfig::prompt_template() const
{
    if (tmpl.file.empty())
        return validate_template(tmpl.pattern);
    const auto all = load_templates(tmpl.file);
    if (tmpl.index >= all.size())
        bad("template.index", std::to_string(tmpl.index) + " out of range (" + std::to_string(all.size()) +
                                  " patterns in " + tmpl.file.string() + ")");
    return all[tmpl.index];
}

std::string RunConfig::dataset_name() const
{
    if (!dataset.name.empty())
        return dataset.name;
    if (!dataset.path.empty())
        return dataset.path.stem().string();
    return std::string(to_string(dataset.schema));
}

void apply_override(json& j, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0)
        throw ConfigError("override '" + std::string(assignment) + "': expected key.path=value");
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty())
            throw ConfigError("override '" + std::string(assignment) + "': empty key segment");
        if (!node->is_object())
            *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                      const std::optional<nlohmann::json>& base)
{
    json j = json::parse(RunConfig{}.to_json().dump());
    if (base)
        j.merge_patch(*base);
    if (file) {
        std::ifstream in(*file);
        if (!in)
            throw ConfigError("config file not found: " + file->string());
        try {
            j.merge_patch(json::parse(in));
        } catch (const json::exception& e) {
            throw ConfigError(file->string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides)
        apply_override(j, o);
    return RunConfig::from_json(j);
}

} // namespace ipck
