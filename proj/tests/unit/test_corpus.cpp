#include "ipck/corpus.hpp"
#include "ipck/csv.hpp"
#include "ipck/error.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using namespace ipck;

namespace {

const std::filesystem::path fixtures = IPCK_FIXTURES;

std::vector<CommitExample> synthetic(const LabelSpace& labels, const std::vector<std::size_t>& sizes)
{
    std::vector<CommitExample> out;
    for (std::size_t c = 0; c < sizes.size(); ++c)
        for (std::size_t i = 0; i < sizes[c]; ++i)
            out.push_back({labels.name(c) + "-" + std::to_string(i), "message " + std::to_string(i), labels.name(c),
                           Split::unassigned, {}});
    return out;
}

std::map<Split, std::size_t> split_sizes(const std::vector<CommitExample>& xs)
{
    std::map<Split, std::size_t> n;
    for (const auto& x : xs)
        ++n[x.split];
    return n;
}

std::filesystem::path temp_file(const std::string& name, const std::string& body)
{
    const auto p = std::filesystem::temp_directory_path() / ("ipck_corpus_" + name);
    std::ofstream(p, std::ios::binary) << body;
    return p;
}

} // namespace

TEST_SUITE("csv")
{
    TEST_CASE("quoted fields, doubled quotes and embedded newlines")
    {
        std::istringstream in("a,b,c\n\"x, y\",\"say \"\"hi\"\"\",\"two\nlines\"\n");
        const auto recs = csv::read(in);
        REQUIRE(recs.size() == 2);
        CHECK(recs[1].fields == std::vector<std::string>{"x, y", "say \"hi\"", "two\nlines"});
        CHECK(recs[1].line == 2);
    }

    TEST_CASE("escape round trip")
    {
        const std::vector<std::string> fields{"plain", "a,b", "q\"q", "n\nl", ""};
        std::istringstream in(csv::join(fields) + "\n");
        const auto recs = csv::read(in);
        REQUIRE(recs.size() == 1);
        CHECK(recs[0].fields == fields);
    }

    TEST_CASE("tab delimiter")
    {
        std::istringstream in("id\tmessage\n1\thello, world\n");
        const auto recs = csv::read(in, '\t');
        REQUIRE(recs.size() == 2);
        CHECK(recs[1].fields[1] == "hello, world");
    }
}

TEST_SUITE("corpus")
{
    TEST_CASE("fixture datasets load with schema class order")
    {
        const auto ternary = load_dataset(fixtures / "commits_ternary.csv", DatasetSchema::dataset2_ternary);
        CHECK(ternary.labels.classes() == std::vector<std::string>{"Corrective", "Adaptive", "Perfective"});
        CHECK(ternary.examples.size() == 60);
        CHECK(ternary.examples[0].message == "Fixed critical bug in user authentication.");
        CHECK(ternary.examples[0].label == "Corrective");

        const auto binary = load_dataset(fixtures / "commits_binary.csv", DatasetSchema::dataset1_binary);
        CHECK(binary.labels.classes() == std::vector<std::string>{"SECURE", "INSECURE"});
        CHECK(binary.examples.size() == 32);
        CHECK(schema_labels(DatasetSchema::dataset1_binary) == LabelSpace("dataset1", {"SECURE", "INSECURE"}));
        CHECK_THROWS_AS(schema_labels(DatasetSchema::generic_csv), ConfigError);
    }

    TEST_CASE("binary aliases map onto the schema classes")
    {
        const auto p = temp_file("alias.csv", "message,label\nfix overflow,Positive\nadd logo,Negative\nx,1\n");
        const auto ds = load_dataset(p, DatasetSchema::dataset1_binary);
        REQUIRE(ds.examples.size() == 3);
        CHECK(ds.examples[0].label == "SECURE");
        CHECK(ds.examples[1].label == "INSECURE");
        CHECK(ds.examples[2].label == "SECURE");
        CHECK(ds.examples[1].id == "1");
    }

    TEST_CASE("load errors")
    {
        CHECK_THROWS_WITH_AS(load_dataset(temp_file("empty.csv", "message,label\n"), DatasetSchema::generic_csv),
                             doctest::Contains("no rows"), DataError);
        CHECK_THROWS_AS(load_dataset(temp_file("blank.csv", "message,label\n   ,A\n"), DatasetSchema::generic_csv),
                        DataError);
        CHECK_THROWS_AS(load_dataset(temp_file("dup.csv", "id,message,label\n1,a,A\n1,b,B\n"), DatasetSchema::generic_csv),
                        DataError);
        CHECK_THROWS_AS(load_dataset(temp_file("bad.csv", "message,label\na,Sideways\n"), DatasetSchema::dataset2_ternary),
                        DataError);
        CHECK_THROWS_AS(load_dataset(temp_file("nolabel.csv", "message\na\n"), DatasetSchema::generic_csv), DataError);
    }

    TEST_CASE("generic schema sorts distinct labels and keeps passthrough columns")
    {
        const auto ds = load_dataset(temp_file("gen.csv", "message,label,diff\na,zeta,+x\nb,alpha,-y\n"),
                                     DatasetSchema::generic_csv);
        CHECK(ds.labels.classes() == std::vector<std::string>{"alpha", "zeta"});
        CHECK(ds.examples[0].passthrough.at("diff") == "+x");
    }

    TEST_CASE("stratified counts follow floor then train, test, val rotation")
    {
        // The maintenance dataset's class sizes.
        const auto counts = stratified_counts({600, 590, 603}, {});
        std::size_t tr = 0, va = 0, te = 0;
        for (const auto& c : counts) {
            tr += c.train;
            va += c.val;
            te += c.test;
        }
        CHECK(tr == 1256);
        CHECK(va == 268);
        CHECK(te == 269);
        // Within one example of the commonly quoted 1255/269/269.
        CHECK(std::abs(static_cast<long>(tr) - 1255) <= 1);
        CHECK(std::abs(static_cast<long>(va) - 269) <= 1);
        CHECK(counts[1].train == 414);
        CHECK(counts[2].test == 91);
    }

    TEST_CASE("split property: every split within one example of its stratified target")
    {
        const LabelSpace labels("toy", {"A", "B", "C", "D"});
        for (std::size_t trial = 0; trial < 40; ++trial) {
            const std::vector<std::size_t> sizes{3 + trial % 7, 11 + trial, 3 + (trial * 5) % 13, 40 - trial % 9};
            const auto xs = split_dataset(synthetic(labels, sizes), labels, {}, trial);
            for (std::size_t c = 0; c < sizes.size(); ++c) {
                std::map<Split, double> n;
                for (const auto& x : xs)
                    if (x.label == labels.name(c))
                        n[x.split] += 1;
                const double total = static_cast<double>(sizes[c]);
                CHECK(std::abs(n[Split::train] - 0.70 * total) <= 1.0);
                CHECK(std::abs(n[Split::val] - 0.15 * total) <= 1.0);
                CHECK(std::abs(n[Split::test] - 0.15 * total) <= 1.0);
            }
        }
    }

    TEST_CASE("split is deterministic under a seed and degenerate ratios put everything in train")
    {
        const LabelSpace labels("toy", {"A", "B"});
        const auto xs = synthetic(labels, {30, 25});
        const auto a = split_dataset(xs, labels, {}, 7);
        const auto b = split_dataset(xs, labels, {}, 7);
        const auto c = split_dataset(xs, labels, {}, 8);
        bool same = true, differ = false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            same = same && a[i].split == b[i].split && a[i].id == b[i].id;
            differ = differ || a[i].split != c[i].split;
        }
        CHECK(same);
        CHECK(differ);
        const auto all = split_dataset(xs, labels, {1.0, 0.0, 0.0}, 3);
        CHECK(split_sizes(all)[Split::train] == xs.size());
    }

    TEST_CASE("split manifest round trip")
    {
        const LabelSpace labels("toy", {"A", "B"});
        const auto xs = split_dataset(synthetic(labels, {10, 10}), labels, {}, 5);
        const auto path = std::filesystem::temp_directory_path() / "ipck_manifest.json";
        write_split_manifest(path, xs);
        const auto back = apply_split_manifest(path, synthetic(labels, {10, 10}));
        for (std::size_t i = 0; i < xs.size(); ++i)
            CHECK(back[i].split == xs[i].split);
    }

    TEST_CASE("episodes: sizes, per-class counts, disjoint from query, reproducible")
    {
        const LabelSpace labels("toy", {"A", "B", "C"});
        auto pool = synthetic(labels, {60, 55, 70});
        std::vector<CommitExample> query;
        for (int i = 0; i < 5; ++i)
            query.push_back({"q" + std::to_string(i), "q", "A", Split::test, {}});

        const auto two = sample_episode(pool, labels, 2, 5, 11, query);
        CHECK(two.support.size() == 10);
        CHECK(two.classes.size() == 2);

        const auto ep = sample_episode(pool, labels, 3, 50, 3, query);
        CHECK(ep.support.size() == 150);
        std::map<std::string, std::size_t> per;
        std::set<std::string> ids;
        for (const auto& x : ep.support) {
            ++per[x.label];
            ids.insert(x.id);
        }
        CHECK(ids.size() == 150);
        for (const auto& c : labels.classes())
            CHECK(per[c] == 50);
        for (const auto& q : ep.query)
            CHECK(ids.count(q.id) == 0);

        const auto again = sample_episode(pool, labels, 3, 50, 3, query);
        for (std::size_t i = 0; i < ep.support.size(); ++i)
            CHECK(again.support[i].id == ep.support[i].id);

        const auto zero = sample_episode(pool, labels, 3, 0, 3, query);
        CHECK(zero.support.empty());
        CHECK(zero.classes == labels.classes());

        CHECK_THROWS_AS(sample_episode(pool, labels, 3, 56, 3, query), DataError);
        CHECK_THROWS_AS(sample_episode(pool, labels, 4, 5, 3, query), ConfigError);
        // A query that shares ids with the support set is rejected.
        CHECK_THROWS_AS(sample_episode(pool, labels, 3, 5, 3, pool), DataError);
    }
}
