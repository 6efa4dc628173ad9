#include "ipck/commands.hpp"
#include "ipck/config.hpp"
#include "ipck/csv.hpp"
#include "ipck/error.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <sys/wait.h>

using namespace ipck;
namespace fs = std::filesystem;

namespace {

const fs::path fixtures = IPCK_FIXTURES;

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("ipck_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig ternary_config(const fs::path& out, std::vector<std::string> extra = {})
{
    std::vector<std::string> o{"dataset.path=" + (fixtures / "commits_ternary.csv").string(),
                               "dataset.schema=dataset2_ternary",
                               "backend.model_id=" + (fixtures / "tiny_t5").string(),
                               "verbalizer.snapshot_path=" + (fixtures / "snapshot.jsonl").string(),
                               "train.lr=0.01",
                               "train.batch_size=8",
                               "train.max_epochs=4",
                               "output_dir=" + out.string()};
    o.insert(o.end(), extra.begin(), extra.end());
    return load_config(std::nullopt, o);
}

int run_cli(const std::string& args)
{
    const std::string cmd = std::string(IPCK_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json without_timing(nlohmann::json j)
{
    if (j.is_object()) {
        j.erase("wall_time_s");
        for (auto& [k, v] : j.items())
            v = without_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j)
            v = without_timing(v);
    }
    return j;
}

} // namespace

TEST_SUITE("cli")
{
    TEST_CASE("config precedence: overrides beat the file, the file beats defaults")
    {
        const auto file = fs::temp_directory_path() / "ipck_cfg.json";
        std::ofstream(file) << R"({"train": {"lr": 0.002, "patience_epochs": 3}, "verbalizer": {"kind": "manual"}})";
        const auto c = load_config(file, {"train.lr=0.5", "eval.shots=[1,2]", "backend.model_id=foo"});
        CHECK(c.train.lr == 0.5);
        CHECK(c.train.patience_epochs == 3);
        CHECK(c.train.batch_size == 64);
        CHECK(c.verbalizer.kind == VerbalizerKind::manual);
        CHECK(c.eval.shots == std::vector<std::size_t>{1, 2});
        CHECK(c.backend.model_id == "foo");
        CHECK(c.verbalizer.n_kg == 20);
        CHECK(c.eval.seeds == std::vector<std::uint64_t>{1, 2, 3});
        CHECK(c.eval.averaging == Averaging::macro);

        const auto round = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
        CHECK(round.to_json().dump() == c.to_json().dump());
    }

    TEST_CASE("config errors name the field")
    {
        CHECK_THROWS_WITH_AS(load_config(std::nullopt, {"train.lrr=1"}), doctest::Contains("train.lrr"), ConfigError);
        CHECK_THROWS_WITH_AS(load_config(std::nullopt, {"dataset.colour=1"}), doctest::Contains("dataset.colour"),
                             ConfigError);
        CHECK_THROWS_WITH_AS(load_config(std::nullopt, {"verbalizer.n_kg=\"many\""}),
                             doctest::Contains("verbalizer.n_kg"), ConfigError);
        CHECK_THROWS_AS(load_config(std::nullopt, {"nonsense"}), ConfigError);
        CHECK_THROWS_AS(load_config(fs::path("/nonexistent/cfg.json"), {}), ConfigError);

        const auto out = scratch("invalid");
        auto c = ternary_config(out, {"verbalizer.snapshot_path="});
        CHECK_THROWS_WITH_AS(cmd_train(c, std::cerr), doctest::Contains("verbalizer.snapshot_path"), ConfigError);
        c = ternary_config(out, {"train.lr=-1"});
        CHECK_THROWS_WITH_AS(cmd_train(c, std::cerr), doctest::Contains("train.lr"), ConfigError);
        c = ternary_config(out, {"template.pattern=\"{mask} {mask}\""});
        CHECK_THROWS_WITH_AS(cmd_train(c, std::cerr), doctest::Contains("template"), ConfigError);
        c = ternary_config(out, {"dataset.split.ratios=[0.5,0.5,0.5]"});
        CHECK_THROWS_WITH_AS(cmd_train(c, std::cerr), doctest::Contains("dataset.split.ratios"), ConfigError);
        CHECK_FALSE(fs::exists(out));
    }

    TEST_CASE("build-verbalizer writes the verbalizer and a candidate report")
    {
        const auto out = scratch("verbalizer");
        auto c = ternary_config(out, {"dataset.path=" + (fixtures / "commits_binary.csv").string(),
                                      "dataset.schema=dataset1_binary"});
        std::ostringstream log;
        cmd_build_verbalizer(c, log);
        const auto report = slurp(out / "candidates.txt");
        const auto secure = report.substr(0, report.find("INSECURE"));
        CHECK(secure.find("safe") != std::string::npos);
        CHECK(secure.find("fix") != std::string::npos);
        CHECK(fs::exists(out / "head.json"));
        CHECK(fs::exists(out / "prototypes.bin"));
        CHECK(slurp(out / "candidates.csv").rfind("class,rank,word,score", 0) == 0);

        // The manual kind needs no snapshot.
        const auto manual_out = scratch("verbalizer_manual");
        auto m = ternary_config(manual_out, {"verbalizer.kind=manual", "verbalizer.snapshot_path="});
        cmd_build_verbalizer(m, log);
        CHECK(fs::exists(manual_out / "verbalizer.json"));
    }

    TEST_CASE("train, eval and predict")
    {
        const auto out = scratch("train");
        auto c = ternary_config(out);
        std::ostringstream log;
        cmd_train(c, log);
        for (const char* f : {"head.json", "prototypes.bin", "prototypes.json", "train_config.json", "run_config.json",
                              "metrics.jsonl", "split_manifest.json", "train_state.json", "metrics.json"})
            CHECK_MESSAGE(fs::exists(out / f), f);
        CHECK_FALSE(fs::exists(out / "backbone"));

        auto ec = load_config(std::nullopt, {"output_dir=" + (out / "eval").string()}, checkpoint_config(out));
        cmd_eval(ec, out, log);
        const auto metrics = nlohmann::json::parse(slurp(out / "eval" / "metrics.json"));
        CHECK(metrics["accuracy"].get<double>() >= 0.0);
        CHECK(fs::exists(out / "eval" / "confusion.csv"));
        CHECK(fs::exists(out / "eval" / "confusion.svg"));

        const auto pred_path = out / "pred.csv";
        cmd_predict(ec, out, {std::nullopt, {"Fixed critical bug in user authentication."}}, pred_path, log);
        std::ifstream in(pred_path);
        const auto rows = csv::read(in);
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].fields == std::vector<std::string>{"id", "message", "predicted_label", "class_probs"});
        const auto& row = rows[1].fields;
        CHECK((row[2] == "Corrective" || row[2] == "Adaptive" || row[2] == "Perfective"));
        const auto probs = nlohmann::json::parse(row[3]);
        double sum = 0;
        for (const auto& [k, v] : probs.items())
            sum += v.get<double>();
        CHECK(std::abs(sum - 1.0) < 1e-5);
        CHECK(probs.size() == 3);

        CHECK_THROWS_AS(cmd_predict(ec, out, {std::nullopt, {"  "}}, pred_path, log), DataError);
        CHECK_THROWS_AS(cmd_eval(ec, scratch("no_checkpoint"), log), ConfigError);
    }

    TEST_CASE("training on the support set does not fall below the untrained baseline on it")
    {
        const auto base_cfg = ternary_config(scratch("paired"), {"episode.k_shot=4", "train.max_epochs=15",
                                                                 "train.lr=0.02", "train.batch_size=4"});
        const auto data = prepare_data(base_cfg);
        auto backend = Backend::open(base_cfg.backend.model_id);
        const auto trained = run_experiment(base_cfg, backend, data, 4, 1);

        // Same support, untouched W0 versus the tuned head.
        const auto pool = select_split(data.examples, Split::train);
        const auto support = sample_episode(pool, data.labels, 3, 4, 1, {}).support;
        const auto tmpl = base_cfg.prompt_template();
        const auto untrained = build_head(base_cfg, data.labels, backend);
        const auto before = evaluate(backend, untrained, tmpl, support, Averaging::macro);
        const auto after = evaluate(backend, trained.trained.head, tmpl, support, Averaging::macro);
        CHECK(after.accuracy >= before.accuracy);
    }

    TEST_CASE("full mode saves a backbone the checkpoint reloads")
    {
        const auto out = scratch("full");
        auto c = ternary_config(out, {"train.tune_mode=full", "train.max_epochs=2", "train.aux_lm_weight=0.2",
                                      "episode.k_shot=3"});
        std::ostringstream log;
        cmd_train(c, log);
        REQUIRE(fs::exists(out / "backbone" / "model.safetensors"));
        const auto cfg = load_config(std::nullopt, {}, checkpoint_config(out));
        auto reopened = open_checkpoint_backend(out, cfg);
        const auto head = VerbalizerHead<float>::load(out);
        const auto m = evaluate(reopened, head, cfg.prompt_template(),
                                select_split(prepare_data(cfg).examples, Split::test), Averaging::macro);
        const auto saved = nlohmann::json::parse(slurp(out / "metrics.json"));
        CHECK(m.accuracy == doctest::Approx(saved["accuracy"].get<double>()));
    }

    TEST_CASE("sweep writes cells, result and summary; reruns are identical")
    {
        auto run = [](const fs::path& out) {
            auto c = ternary_config(out, {"eval.shots=[1,3]", "eval.seeds=[1]", "train.max_epochs=3"});
            std::ostringstream log;
            cmd_sweep(c, log);
            return without_timing(nlohmann::json::parse(slurp(out / "sweep.json"))).dump();
        };
        const auto a_dir = scratch("sweep_a"), b_dir = scratch("sweep_b");
        const auto a = run(a_dir);
        const auto b = run(b_dir);
        CHECK(a == b);
        CHECK(fs::exists(a_dir / "summary.csv"));
        CHECK(fs::exists(a_dir / "sweep_cells.jsonl"));
        // Resuming over a complete log reproduces the same result.
        CHECK(run(a_dir) != "");
        CHECK(without_timing(nlohmann::json::parse(slurp(a_dir / "sweep.json"))).dump() == a);
    }

    TEST_CASE("commands are idempotent apart from timing")
    {
        auto once = [](const fs::path& out) {
            std::ostringstream log;
            cmd_train(ternary_config(out, {"episode.k_shot=3"}), log);
            return std::make_pair(without_timing(nlohmann::json::parse(slurp(out / "metrics.json"))).dump(),
                                  slurp(out / "prototypes.bin"));
        };
        CHECK(once(scratch("idem_a")) == once(scratch("idem_b")));
    }

    TEST_CASE("process exit codes")
    {
        const auto f = fixtures.string();
        CHECK(run_cli("--help") == 0);
        CHECK(run_cli("") == 2);
        CHECK(run_cli("train --dataset /nonexistent.csv -o " + scratch("exit2").string()) == 2);
        const auto bad = fs::temp_directory_path() / "ipck_bad_labels.csv";
        std::ofstream(bad) << "message,label\nfix,Sideways\n";
        CHECK(run_cli("train --dataset " + bad.string() + " --schema dataset2_ternary --model " + f +
                      "/tiny_t5 --verbalizer manual -o " + scratch("exit3").string()) == 3);
        CHECK(run_cli("predict --checkpoint " + scratch("exit_missing").string() + " --message hi") == 2);
        CHECK(run_cli("build-verbalizer --schema dataset1_binary --model " + f + "/tiny_t5 --snapshot " + f +
                      "/snapshot.jsonl -o " + scratch("exit0").string()) == 0);
    }
}
