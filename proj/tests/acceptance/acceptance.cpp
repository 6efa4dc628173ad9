// Acceptance checks, one criterion per invocation: ipck_acceptance --criterion N.
// Prints one PASS/FAIL/BLOCKED line. Exit 0 pass, 1 fail, 77 blocked (ctest skip).
//
// Criteria 5-9 need the real datasets and a pretrained checkpoint:
//   IPCK_DATASET1   binary security dataset (CSV/TSV)
//   IPCK_DATASET2   three-class maintenance dataset (CSV/TSV)
//   IPCK_BACKEND    small checkpoint id or directory (e.g. t5-small)
//   IPCK_SNAPSHOT   knowledge snapshot (JSON lines)
//   IPCK_EXTENDED=1 and IPCK_BASE_BACKEND enable criterion 8.

#include "ipck/commands.hpp"
#include "ipck/diagnostics.hpp"
#include "ipck/evaluation.hpp"
#include "ipck/knowledge.hpp"
#include "ipck/loss.hpp"
#include "ipck/rng.hpp"
#include "ipck/verbalizer.hpp"

#include <CLI11.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace ipck;
using Big = boost::multiprecision::cpp_bin_float_50;

namespace {

constexpr int pass_code = 0, fail_code = 1, blocked_code = 77;

struct Outcome {
    int code;
    std::string detail;
};

Outcome pass(std::string d) { return {pass_code, std::move(d)}; }
Outcome fail(std::string d) { return {fail_code, std::move(d)}; }
Outcome blocked(std::string d) { return {blocked_code, std::move(d)}; }

std::string fmt(double x, int precision = 4)
{
    std::ostringstream s;
    s.precision(precision);
    s << x;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::optional<std::string> env(const char* name)
{
    const char* v = std::getenv(name);
    if (!v || !*v)
        return std::nullopt;
    return std::string(v);
}

Matrix<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c)
{
    Matrix<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.normal();
    return m;
}

// 1. build_prototype vs brute-force mean; softmax and cross-entropy vs a 50-digit oracle.
Outcome verbalizer_oracle()
{
    Rng rng(1);
    double worst_mean = 0, worst_p = 0, worst_ce = 0;
    for (int t = 0; t < 100; ++t) {
        const Eigen::Index D = 16;
        std::vector<Vector<double>> table;
        for (int i = 0; i < 30; ++i)
            table.push_back(random_matrix(rng, D, 1));
        std::vector<CandidateSet> sets(3);
        for (std::size_t c = 0; c < 3; ++c) {
            sets[c].class_name = "c" + std::to_string(c);
            const auto n = 1 + rng.below(20);
            for (std::uint64_t k = 0; k < n; ++k)
                sets[c].candidates.push_back({std::to_string(rng.below(30)), 1.0});
        }
        const auto v = build_prototype<double>(std::span<const CandidateSet>(sets), [&](const std::string& w) {
            return std::optional<Vector<double>>(table[static_cast<std::size_t>(std::stoi(w))]);
        });
        for (std::size_t c = 0; c < 3; ++c)
            for (Eigen::Index d = 0; d < D; ++d) {
                double sum = 0;
                for (const auto& cand : sets[c].candidates)
                    sum += table[static_cast<std::size_t>(std::stoi(cand.word))](d);
                const double mean = sum / static_cast<double>(sets[c].candidates.size());
                worst_mean = std::max(worst_mean, std::abs(v.prototypes(static_cast<Eigen::Index>(c), d) - mean));
            }
    }
    for (int t = 0; t < 1000; ++t) {
        const auto n = static_cast<Eigen::Index>(2 + rng.below(9));
        const Matrix<double> w = random_matrix(rng, n, 8);
        const Vector<double> h = random_matrix(rng, 8, 1);
        const auto p = prototype_class_probs(w, h);
        std::vector<Big> e;
        Big z = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            Big acc = 0;
            for (Eigen::Index d = 0; d < 8; ++d)
                acc += Big(w(i, d)) * Big(h(d));
            e.push_back(boost::multiprecision::exp(acc));
            z += e.back();
        }
        std::vector<double> y(static_cast<std::size_t>(n)), yh(p.data(), p.data() + n);
        double ys = 0;
        for (auto& x : y)
            ys += (x = rng.uniform());
        Big ce = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Big want = e[static_cast<std::size_t>(i)] / z;
            worst_p = std::max(worst_p, std::abs(p(i) - static_cast<double>(want)) / static_cast<double>(want));
            y[static_cast<std::size_t>(i)] /= ys;
            ce -= Big(y[static_cast<std::size_t>(i)]) * boost::multiprecision::log(Big(yh[static_cast<std::size_t>(i)]));
        }
        const double got = cross_entropy<double>(y, yh);
        worst_ce = std::max(worst_ce, std::abs(got - static_cast<double>(ce)) / static_cast<double>(ce));
    }
    const std::string d = "prototype max abs err " + fmt(worst_mean) + " (tol 1e-6), softmax max rel err " +
                          fmt(worst_p) + ", cross-entropy max rel err " + fmt(worst_ce) + " (tol 1e-9, 1000 cases)";
    return worst_mean <= 1e-6 && worst_p <= 1e-9 && worst_ce <= 1e-9 ? pass(d) : fail(d);
}

// 2. expand_class vs exhaustive ranking on random graphs of at most 200 nodes.
Outcome knowledge_oracle()
{
    Rng rng(2);
    std::size_t cases = 0, mismatches = 0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t nodes = 10 + rng.below(191);
        KnowledgeSnapshot s;
        for (std::size_t i = 0; i < nodes; ++i) {
            std::vector<Neighbor> ns;
            const auto deg = rng.below(9);
            for (std::uint64_t k = 0; k < deg; ++k)
                ns.push_back({"n" + std::to_string(rng.below(nodes)), static_cast<double>(rng.below(4)) / 3.0});
            s.add("n" + std::to_string(i), ns);
        }
        for (int q = 0; q < 5; ++q) {
            const std::string cls = "n" + std::to_string(rng.below(nodes));
            const std::size_t n_kg = 1 + rng.below(25);
            const auto got = expand_class(s, cls, n_kg);
            // Oracle: every vocabulary word scored by explicit set counting.
            std::vector<std::string> vocab;
            for (const auto& w : s.vocabulary())
                vocab.push_back(w);
            auto nb = [&](const std::string& w) {
                std::vector<std::string> out;
                auto it = s.entries().find(w);
                if (it != s.entries().end())
                    for (const auto& n : it->second)
                        out.push_back(n.word);
                return out;
            };
            const auto a = nb(cls);
            std::vector<std::pair<double, std::string>> scored;
            for (const auto& w : vocab) {
                if (w == cls)
                    continue;
                const auto b = nb(w);
                std::size_t inter = 0;
                for (const auto& x : a)
                    inter += std::find(b.begin(), b.end(), x) != b.end();
                const std::size_t uni = a.size() + b.size() - inter;
                const double j = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
                if (j > 0)
                    scored.push_back({-j, w});
            }
            std::sort(scored.begin(), scored.end());
            std::vector<std::string> want{cls};
            for (std::size_t i = 0; i < scored.size() && want.size() < n_kg; ++i)
                want.push_back(scored[i].second);
            ++cases;
            if (got.words() != want)
                ++mismatches;
        }
    }
    const std::string d = std::to_string(cases) + " queries on graphs of 10-200 nodes, " + std::to_string(mismatches) +
                          " rankings differ from the exhaustive oracle";
    return mismatches == 0 ? pass(d) : fail(d);
}

// 3. Finite differences of the softmax cross-entropy w.r.t. prototype rows, N=3, D=8.
Outcome gradient_check()
{
    Rng rng(3);
    double worst = 0;
    for (int t = 0; t < 50; ++t) {
        const Matrix<double> w = random_matrix(rng, 3, 8);
        const Vector<double> h = random_matrix(rng, 8, 1);
        const auto y = static_cast<std::size_t>(rng.below(3));
        const auto g = prototype_loss_grad(w, h, y);
        auto loss = [&](const Matrix<double>& m) {
            const auto p = prototype_class_probs(m, h);
            std::vector<double> onehot(3, 0.0), ph(p.data(), p.data() + 3);
            onehot[y] = 1;
            return cross_entropy<double>(onehot, ph);
        };
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index j = 0; j < 8; ++j) {
                Matrix<double> up = w, down = w;
                up(i, j) += 1e-4;
                down(i, j) -= 1e-4;
                const double fd = (loss(up) - loss(down)) / 2e-4;
                const double an = g.d_prototypes(i, j);
                worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-8));
            }
    }
    const std::string d = "max relative error " + fmt(worst) + " over 50 random cases (tol 1e-3, step 1e-4)";
    return worst <= 1e-3 ? pass(d) : fail(d);
}

// 4. Metrics vs brute-force counting; recall fixture.
Outcome metric_oracle()
{
    Rng rng(4);
    std::size_t bad = 0;
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 2 + rng.below(5), len = 1 + rng.below(100);
        std::vector<std::size_t> gold(len), pred(len);
        for (std::size_t i = 0; i < len; ++i) {
            gold[i] = rng.below(n);
            pred[i] = rng.uniform() < 0.6 ? gold[i] : rng.below(n);
        }
        const auto m = compute_metrics(gold, pred, n);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < len; ++i)
            correct += gold[i] == pred[i];
        bool ok = m.accuracy == static_cast<double>(correct) / static_cast<double>(len);
        for (std::size_t c = 0; c < n; ++c) {
            long long tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < len; ++i) {
                tp += gold[i] == c && pred[i] == c;
                fp += gold[i] != c && pred[i] == c;
                fn += gold[i] == c && pred[i] != c;
            }
            const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
            const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
            ok = ok && m.per_class[c].precision == p && m.per_class[c].recall == r && m.per_class[c].support == tp + fn;
            for (std::size_t k = 0; k < n; ++k) {
                long long cnt = 0;
                for (std::size_t i = 0; i < len; ++i)
                    cnt += gold[i] == c && pred[i] == k;
                ok = ok && m.confusion(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) == cnt;
            }
        }
        bad += !ok;
    }
    ConfusionMatrix fixture(3, 3);
    fixture << 73, 20, 7, 10, 84, 6, 9, 9, 82;
    const auto report = confusion_report(metrics_from_confusion(fixture));
    const bool recalls = std::abs(report.recall[0] - 0.73) < 1e-12 && std::abs(report.recall[1] - 0.84) < 1e-12 &&
                         std::abs(report.recall[2] - 0.82) < 1e-12;
    const std::string d = std::to_string(bad) + " of 500 random sets differ from brute force; fixture recalls " +
                          fmt(report.recall[0], 3) + "/" + fmt(report.recall[1], 3) + "/" + fmt(report.recall[2], 3);
    return bad == 0 && recalls ? pass(d) : fail(d);
}

struct RealSetup {
    std::string backend;
    std::string snapshot;
};

std::optional<RealSetup> real_setup(std::string& missing)
{
    const auto b = env("IPCK_BACKEND");
    const auto s = env("IPCK_SNAPSHOT");
    if (!b)
        missing += " IPCK_BACKEND";
    if (!s)
        missing += " IPCK_SNAPSHOT";
    if (!b || !s)
        return std::nullopt;
    return RealSetup{*b, *s};
}

RunConfig real_config(const RealSetup& setup, const std::string& dataset, DatasetSchema schema)
{
    auto c = load_config(std::nullopt, {});
    c.dataset.path = dataset;
    c.dataset.schema = schema;
    c.backend.model_id = setup.backend;
    c.verbalizer.kind = VerbalizerKind::knowledgeable;
    c.verbalizer.snapshot_path = setup.snapshot;
    c.output_dir = std::filesystem::temp_directory_path() / "ipck_acceptance";
    c.validate(Command::sweep);
    return c;
}

// 5. Two identical 2-way 10-shot runs on Dataset I give identical metrics JSON.
Outcome determinism()
{
    std::string missing;
    const auto setup = real_setup(missing);
    const auto d1 = env("IPCK_DATASET1");
    if (!d1)
        missing += " IPCK_DATASET1";
    if (!setup || !d1)
        return blocked("needs" + missing);
    const auto start = std::chrono::steady_clock::now();
    auto c = real_config(*setup, *d1, DatasetSchema::dataset1_binary);
    c.episode.n_way = 2;
    const auto data = prepare_data(c);
    std::string first, second;
    for (std::string* out : {&first, &second}) {
        auto backend = Backend::open(c.backend.model_id, c.backend.max_len);
        *out = run_experiment(c, backend, data, 10, 1).metrics.to_json(false).dump();
    }
    const double secs = seconds_since(start);
    const std::string d = std::string(first == second ? "identical" : "different") + " metrics JSON, " +
                          fmt(secs, 4) + " s (limit 900 s)";
    return first == second && secs < 900 ? pass(d) : fail(d);
}

SweepResult real_sweep(const RunConfig& c, const std::vector<std::size_t>& shots)
{
    const auto data = prepare_data(c);
    auto backend = Backend::open(c.backend.model_id, c.backend.max_len);
    return run_sweep(shots, {1, 2, 3}, [&](std::size_t shot, std::uint64_t seed) {
        return run_experiment(c, backend, data, shot, seed).metrics;
    });
}

// 6. Dataset II: mean accuracy over seeds 1-3 at 50-shot exceeds 5-shot.
Outcome few_shot_trend()
{
    std::string missing;
    const auto setup = real_setup(missing);
    const auto d2 = env("IPCK_DATASET2");
    if (!d2)
        missing += " IPCK_DATASET2";
    if (!setup || !d2)
        return blocked("needs" + missing);
    const auto start = std::chrono::steady_clock::now();
    const auto rows = real_sweep(real_config(*setup, *d2, DatasetSchema::dataset2_ternary), {5, 50}).summary();
    const double secs = seconds_since(start);
    const std::string d = "mean accuracy 5-shot " + fmt(rows[0].accuracy_mean) + ", 50-shot " +
                          fmt(rows[1].accuracy_mean) + " (" + std::to_string(rows[1].failed + rows[0].failed) +
                          " failed cells), " + fmt(secs, 5) + " s (limit 7200 s)";
    return rows[0].failed == 0 && rows[1].failed == 0 && rows[1].accuracy_mean > rows[0].accuracy_mean && secs < 7200
               ? pass(d)
               : fail(d);
}

// 7. 50-shot knowledgeable runs: macro-F1 >= 0.55 on Dataset II and >= 0.60 on Dataset I.
Outcome sanity_floors()
{
    std::string missing;
    const auto setup = real_setup(missing);
    const auto d1 = env("IPCK_DATASET1"), d2 = env("IPCK_DATASET2");
    if (!d1)
        missing += " IPCK_DATASET1";
    if (!d2)
        missing += " IPCK_DATASET2";
    if (!setup || !d1 || !d2)
        return blocked("needs" + missing);
    auto f1 = [&](const std::string& path, DatasetSchema schema) {
        const auto c = real_config(*setup, path, schema);
        const auto data = prepare_data(c);
        auto backend = Backend::open(c.backend.model_id, c.backend.max_len);
        return run_experiment(c, backend, data, 50, 1).metrics.macro.f1;
    };
    const double one = f1(*d1, DatasetSchema::dataset1_binary);
    const double two = f1(*d2, DatasetSchema::dataset2_ternary);
    const std::string d = "macro-F1 Dataset I " + fmt(one) + " (floor 0.60), Dataset II " + fmt(two) + " (floor 0.55)";
    return one >= 0.60 && two >= 0.55 ? pass(d) : fail(d);
}

// 8. Optional: full-data prompt tuning with a base-size checkpoint, within 2 points of the target scores.
Outcome extended()
{
    if (env("IPCK_EXTENDED") != std::optional<std::string>("1"))
        return blocked("optional and non-gating; set IPCK_EXTENDED=1 with IPCK_BASE_BACKEND to run");
    std::string missing;
    auto setup = real_setup(missing);
    const auto base = env("IPCK_BASE_BACKEND");
    const auto d1 = env("IPCK_DATASET1"), d2 = env("IPCK_DATASET2");
    if (!base)
        missing += " IPCK_BASE_BACKEND";
    if (!d1)
        missing += " IPCK_DATASET1";
    if (!d2)
        missing += " IPCK_DATASET2";
    if (!setup || !base || !d1 || !d2)
        return blocked("needs" + missing);
    setup->backend = *base;
    auto full = [&](const std::string& path, DatasetSchema schema) {
        const auto c = real_config(*setup, path, schema);
        const auto data = prepare_data(c);
        auto backend = Backend::open(c.backend.model_id, c.backend.max_len);
        return run_experiment(c, backend, data, std::nullopt, 1).metrics;
    };
    const auto one = full(*d1, DatasetSchema::dataset1_binary);
    const auto two = full(*d2, DatasetSchema::dataset2_ternary);
    const bool ok = std::abs(100 * one.precision - 90.15) <= 2 && std::abs(100 * one.recall - 90.15) <= 2 &&
                    std::abs(100 * one.f1 - 90.15) <= 2 && std::abs(100 * two.f1 - 83.43) <= 2;
    const std::string d = "Dataset I P/R/F " + fmt(100 * one.precision) + "/" + fmt(100 * one.recall) + "/" +
                          fmt(100 * one.f1) + " (target 90.15), Dataset II F " + fmt(100 * two.f1) + " (target 83.43)";
    return ok ? pass(d) : fail(d);
}

// 9. Zero-shot (k_shot 0, untouched prototypes) on both datasets.
Outcome zero_shot()
{
    std::string missing;
    const auto setup = real_setup(missing);
    const auto d1 = env("IPCK_DATASET1"), d2 = env("IPCK_DATASET2");
    if (!d1)
        missing += " IPCK_DATASET1";
    if (!d2)
        missing += " IPCK_DATASET2";
    if (!setup || !d1 || !d2)
        return blocked("needs" + missing);
    bool valid = true, beats = false;
    std::string d;
    for (auto [path, schema] : {std::pair{*d1, DatasetSchema::dataset1_binary}, std::pair{*d2, DatasetSchema::dataset2_ternary}}) {
        const auto c = real_config(*setup, path, schema);
        const auto data = prepare_data(c);
        auto backend = Backend::open(c.backend.model_id, c.backend.max_len);
        const auto res = run_experiment(c, backend, data, 0, 1);
        for (const auto& p : res.predictions) {
            const double s = std::accumulate(p.probs.begin(), p.probs.end(), 0.0);
            valid = valid && std::abs(s - 1.0) < 1e-4 &&
                    std::all_of(p.probs.begin(), p.probs.end(), [](double x) { return x >= 0 && std::isfinite(x); });
        }
        const double floor = 1.0 / static_cast<double>(data.labels.size());
        beats = beats || res.metrics.accuracy > floor;
        d += data.labels.dataset_id() + " accuracy " + fmt(res.metrics.accuracy) + " (floor " + fmt(floor) + "); ";
    }
    d += valid ? "all distributions valid" : "invalid distribution found";
    return valid && beats ? pass(d) : fail(d);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria"};
    int criterion = 0;
    app.add_option("--criterion", criterion, "Criterion number 1-9")->required()->check(CLI::Range(1, 9));
    CLI11_PARSE(app, argc, argv);

    const char* names[] = {"",
                           "verbalizer math oracle",
                           "knowledge ranking oracle",
                           "gradient check",
                           "metric oracle",
                           "determinism (Dataset I, 2-way 10-shot)",
                           "few-shot trend (Dataset II)",
                           "sanity floors (50-shot macro-F1)",
                           "extended full-data targets (optional)",
                           "zero-shot path"};
    Outcome (*checks[])() = {nullptr,     verbalizer_oracle, knowledge_oracle, gradient_check, metric_oracle,
                             determinism, few_shot_trend,    sanity_floors,    extended,       zero_shot};
    set_warning_handler([](const std::string&) {});
    Outcome out{fail_code, ""};
    try {
        out = checks[criterion]();
    } catch (const std::exception& e) {
        out = fail(std::string("error: ") + e.what());
    }
    const char* tag = out.code == pass_code ? "PASS" : out.code == blocked_code ? "BLOCKED" : "FAIL";
    std::cout << "criterion " << criterion << " [" << names[criterion] << "]: " << tag << " - " << out.detail
              << std::endl;
    return out.code;
}
