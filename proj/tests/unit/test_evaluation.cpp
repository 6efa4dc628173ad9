#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"
#include "ipck/evaluation.hpp"
#include "ipck/rng.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace ipck;

namespace {

// Per-class counting written without a confusion matrix.
struct Oracle {
    double accuracy = 0;
    std::vector<double> p, r, f;
    std::vector<long long> support;
    double macro_f1 = 0, weighted_f1 = 0;
};

Oracle brute(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred, std::size_t n)
{
    Oracle o;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i)
        correct += gold[i] == pred[i];
    o.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
    for (std::size_t c = 0; c < n; ++c) {
        long long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            tp += gold[i] == c && pred[i] == c;
            fp += gold[i] != c && pred[i] == c;
            fn += gold[i] == c && pred[i] != c;
        }
        const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        o.p.push_back(p);
        o.r.push_back(r);
        o.f.push_back(f);
        o.support.push_back(tp + fn);
    }
    for (std::size_t c = 0; c < n; ++c) {
        o.macro_f1 += o.f[c] / static_cast<double>(n);
        o.weighted_f1 += o.f[c] * static_cast<double>(o.support[c]) / static_cast<double>(gold.size());
    }
    return o;
}

ConfusionMatrix three_class_fixture()
{
    ConfusionMatrix m(3, 3);
    m << 73, 20, 7, 10, 84, 6, 9, 9, 82;
    return m;
}

RunMetrics fake_metrics(std::size_t shot, std::uint64_t seed)
{
    // Deterministic toy predictions whose quality grows with the shot count.
    Rng rng(shot * 1000 + seed);
    std::vector<std::size_t> gold, pred;
    for (std::size_t i = 0; i < 60; ++i) {
        gold.push_back(i % 3);
        pred.push_back(rng.uniform() < 0.3 + 0.01 * static_cast<double>(shot) ? i % 3 : rng.below(3));
    }
    auto m = compute_metrics(gold, pred, 3);
    m.classes = {"Corrective", "Adaptive", "Perfective"};
    m.shot = shot;
    m.seed = seed;
    m.wall_time_s = 0.25 * static_cast<double>(seed);
    return m;
}

std::filesystem::path fresh(const std::string& name)
{
    const auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove(p);
    return p;
}

} // namespace

TEST_SUITE("evaluation")
{
    TEST_CASE("perfect predictions")
    {
        const std::vector<std::size_t> g{0, 1, 2, 1, 0};
        const auto m = compute_metrics(g, g, 3);
        CHECK(m.accuracy == 1.0);
        CHECK(m.precision == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.f1 == 1.0);
    }

    TEST_CASE("binary hand-built example")
    {
        // Class index 1 plays the positive class.
        const std::vector<std::size_t> gold{1, 1, 0, 0}, pred{1, 0, 0, 0};
        const auto m = compute_metrics(gold, pred, 2);
        CHECK(m.accuracy == 0.75);
        CHECK(m.per_class[1].precision == 1.0);
        CHECK(m.per_class[1].recall == 0.5);
        CHECK(m.per_class[1].f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
        CHECK(m.per_class[0].f1 == doctest::Approx(0.8).epsilon(1e-15));
        CHECK(m.macro.f1 == doctest::Approx((0.8 + 2.0 / 3.0) / 2).epsilon(1e-15));
        CHECK(m.f1 == m.macro.f1);
        const auto w = compute_metrics(gold, pred, 2, Averaging::weighted);
        CHECK(w.f1 == w.weighted.f1);
        CHECK(w.averaging == Averaging::weighted);
    }

    TEST_CASE("single-class predictions on balanced gold")
    {
        const std::vector<std::size_t> gold{0, 0, 1, 1, 2, 2}, pred(6, 1);
        const auto m = compute_metrics(gold, pred, 3);
        CHECK(m.accuracy == doctest::Approx(1.0 / 3.0));
        CHECK(m.macro.recall == doctest::Approx(1.0 / 3.0));
        CHECK(m.per_class[0].f1 == 0.0);
    }

    TEST_CASE("string labels and unknown labels")
    {
        const LabelSpace labels("d1", {"SECURE", "INSECURE"});
        const std::vector<std::string> gold{"SECURE", "INSECURE"}, pred{"SECURE", "SECURE"};
        const auto m = compute_metrics(gold, pred, labels);
        CHECK(m.classes == labels.classes());
        CHECK(m.confusion(1, 0) == 1);
        const std::vector<std::string> bad{"SECURE", "MAYBE"};
        CHECK_THROWS_AS(compute_metrics(gold, bad, labels), DataError);
        const std::vector<std::string> shorter{"SECURE"};
        CHECK_THROWS_AS(compute_metrics(gold, shorter, labels), Error);
    }

    TEST_CASE("agreement with brute-force counting on 500 random sets")
    {
        Rng rng(500);
        for (int t = 0; t < 500; ++t) {
            const std::size_t n = 2 + rng.below(5);
            const std::size_t len = 1 + rng.below(80);
            std::vector<std::size_t> gold(len), pred(len);
            for (std::size_t i = 0; i < len; ++i) {
                gold[i] = rng.below(n);
                pred[i] = rng.uniform() < 0.5 ? gold[i] : rng.below(n);
            }
            const auto m = compute_metrics(gold, pred, n);
            const auto o = brute(gold, pred, n);
            CHECK(m.accuracy == o.accuracy);
            for (std::size_t c = 0; c < n; ++c) {
                CHECK(m.per_class[c].precision == o.p[c]);
                CHECK(m.per_class[c].recall == o.r[c]);
                CHECK(m.per_class[c].f1 == o.f[c]);
                CHECK(m.per_class[c].support == o.support[c]);
            }
            CHECK(std::abs(m.macro.f1 - o.macro_f1) < 1e-15);
            CHECK(std::abs(m.weighted.f1 - o.weighted_f1) < 1e-15);
            // Invariants of the matrix itself.
            CHECK(m.confusion.sum() == static_cast<long long>(len));
            CHECK(static_cast<double>(m.confusion.trace()) / static_cast<double>(len) == m.accuracy);
            for (std::size_t c = 0; c < n; ++c)
                CHECK(m.confusion.row(static_cast<Eigen::Index>(c)).sum() == o.support[c]);
        }
    }

    TEST_CASE("macro F1 is invariant under class relabeling")
    {
        Rng rng(77);
        for (int t = 0; t < 100; ++t) {
            const std::size_t n = 3 + rng.below(3);
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), 0);
            rng.shuffle(std::span<std::size_t>(perm));
            std::vector<std::size_t> gold(50), pred(50), pg(50), pp(50);
            for (std::size_t i = 0; i < 50; ++i) {
                gold[i] = rng.below(n);
                pred[i] = rng.below(n);
                pg[i] = perm[gold[i]];
                pp[i] = perm[pred[i]];
            }
            CHECK(std::abs(compute_metrics(gold, pred, n).macro.f1 - compute_metrics(pg, pp, n).macro.f1) < 1e-12);
        }
    }

    TEST_CASE("confusion report: recall fixture, identity, empty rows")
    {
        const auto m = metrics_from_confusion(three_class_fixture());
        const auto r = confusion_report(m);
        CHECK(r.recall[0] == doctest::Approx(0.73).epsilon(1e-12));
        CHECK(r.recall[1] == doctest::Approx(0.84).epsilon(1e-12));
        CHECK(r.recall[2] == doctest::Approx(0.82).epsilon(1e-12));
        CHECK(r.svg.find("<svg") != std::string::npos);
        CHECK(r.confusion_csv.rfind("gold/pred", 0) == 0);

        const auto id = confusion_report(metrics_from_confusion(ConfusionMatrix::Identity(4, 4) * 5));
        for (double x : id.recall)
            CHECK(x == 1.0);

        ConfusionMatrix holes(3, 3);
        holes << 4, 1, 0, 0, 0, 0, 2, 0, 3;
        ScopedWarningCapture warnings;
        const auto e = confusion_report(metrics_from_confusion(holes));
        CHECK(e.recall[1] == 0.0);
        CHECK(e.empty_row[1]);
        CHECK_FALSE(e.empty_row[0]);
        CHECK(warnings.messages().size() >= 1);
        CHECK(e.recall_csv.find("true") != std::string::npos);
    }

    TEST_CASE("metrics JSON round trip and timing exclusion")
    {
        auto m = fake_metrics(5, 1);
        m.dataset = "dataset2";
        const auto back = RunMetrics::from_json(nlohmann::json::parse(m.to_json().dump()));
        CHECK(back.to_json().dump() == m.to_json().dump());
        CHECK(m.to_json(false).dump().find("wall_time") == std::string::npos);
        CHECK(m.to_json(true).dump().find("wall_time") != std::string::npos);
    }

    TEST_CASE("sweep: one cell, determinism, failures recorded")
    {
        const auto one = run_sweep({5}, {1}, fake_metrics);
        REQUIRE(one.cells.size() == 1);
        CHECK(one.cells[0].metrics.has_value());

        const auto a = run_sweep({5, 50}, {1, 2, 3}, fake_metrics);
        const auto b = run_sweep({5, 50}, {1, 2, 3}, fake_metrics);
        CHECK(a.to_json(false).dump() == b.to_json(false).dump());
        CHECK(a.summary_csv() == b.summary_csv());

        const auto failing = run_sweep({5, 10}, {1, 2}, [](std::size_t shot, std::uint64_t seed) {
            if (shot == 10 && seed == 2)
                throw DataError("not enough examples");
            return fake_metrics(shot, seed);
        });
        REQUIRE(failing.cells.size() == 4);
        const auto* bad = failing.find(10, 2);
        REQUIRE(bad);
        CHECK(bad->failed);
        CHECK(bad->error.find("not enough") != std::string::npos);
        const auto rows = failing.summary();
        CHECK(rows[1].completed == 1);
        CHECK(rows[1].failed == 1);
        CHECK(rows[1].accuracy_std == 0.0);
    }

    TEST_CASE("sweep summary uses the sample standard deviation")
    {
        const auto s = run_sweep({5}, {1, 2, 3}, fake_metrics);
        std::vector<double> acc;
        for (const auto& c : s.cells)
            acc.push_back(c.metrics->accuracy);
        const double mean = (acc[0] + acc[1] + acc[2]) / 3;
        double ss = 0;
        for (double x : acc)
            ss += (x - mean) * (x - mean);
        const auto row = s.summary()[0];
        CHECK(row.accuracy_mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(row.accuracy_std == doctest::Approx(std::sqrt(ss / 2)).epsilon(1e-12));
    }

    TEST_CASE("sweep resumes from its cell log and retries failed cells")
    {
        const auto log = fresh("ipck_sweep_cells.jsonl");
        int calls = 0;
        auto flaky = [&](std::size_t shot, std::uint64_t seed) {
            ++calls;
            if (shot == 10)
                throw RuntimeError("interrupted");
            return fake_metrics(shot, seed);
        };
        const auto first = run_sweep({5, 10}, {1, 2}, flaky, log);
        CHECK(calls == 4);
        calls = 0;
        auto healthy = [&](std::size_t shot, std::uint64_t seed) {
            ++calls;
            return fake_metrics(shot, seed);
        };
        const auto second = run_sweep({5, 10}, {1, 2}, healthy, log);
        CHECK(calls == 2); // only the failed cells reran
        for (const auto& c : second.cells)
            CHECK_FALSE(c.failed);
        CHECK(second.to_json(false).dump() == run_sweep({5, 10}, {1, 2}, fake_metrics).to_json(false).dump());

        // A truncated trailing line is ignored and its cell recomputed.
        std::ofstream(log, std::ios::app) << "{\"shot\": 5, \"se";
        calls = 0;
        const auto third = run_sweep({5, 10}, {1, 2}, healthy, log);
        CHECK(calls == 0);
        CHECK(third.cells.size() == 4);
    }

    TEST_CASE("averaging names")
    {
        CHECK(parse_averaging("weighted") == Averaging::weighted);
        CHECK(to_string(Averaging::macro) == "macro");
        CHECK_THROWS_AS(parse_averaging("micro"), ConfigError);
    }
}
