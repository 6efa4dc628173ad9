#include "ipck/evaluation.hpp"

#include "ipck/csv.hpp"
#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace ipck {

std::string to_string(Averaging a) { return a == Averaging::macro ? "macro" : "weighted"; }

Averaging parse_averaging(std::string_view s)
{
    if (s == "macro")
        return Averaging::macro;
    if (s == "weighted")
        return Averaging::weighted;
    throw ConfigError("eval.averaging must be 'macro' or 'weighted', got '" + std::string(s) + "'");
}

RunMetrics metrics_from_confusion(const ConfusionMatrix& confusion, Averaging averaging)
{
    const Eigen::Index n = confusion.rows();
    if (n == 0 || confusion.cols() != n)
        throw RuntimeError("confusion matrix must be square and non-empty");
    RunMetrics m;
    m.averaging = averaging;
    m.confusion = confusion;
    const long long total = confusion.sum();
    if (total <= 0)
        throw DataError("no predictions to score");
    m.accuracy = static_cast<double>(confusion.trace()) / static_cast<double>(total);
    for (Eigen::Index c = 0; c < n; ++c) {
        ClassMetrics cm;
        const long long tp = confusion(c, c);
        const long long gold = confusion.row(c).sum();
        const long long predicted = confusion.col(c).sum();
        cm.support = gold;
        cm.precision = predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        cm.recall = gold > 0 ? static_cast<double>(tp) / static_cast<double>(gold) : 0.0;
        cm.f1 = cm.precision + cm.recall > 0 ? 2 * cm.precision * cm.recall / (cm.precision + cm.recall) : 0.0;
        m.macro.precision += cm.precision / static_cast<double>(n);
        m.macro.recall += cm.recall / static_cast<double>(n);
        m.macro.f1 += cm.f1 / static_cast<double>(n);
        const double w = static_cast<double>(gold) / static_cast<double>(total);
        m.weighted.precision += w * cm.precision;
        m.weighted.recall += w * cm.recall;
        m.weighted.f1 += w * cm.f1;
        m.per_class.push_back(cm);
    }
    const auto& head = averaging == Averaging::macro ? m.macro : m.weighted;
    m.precision = head.precision;
    m.recall = head.recall;
    m.f1 = head.f1;
    return m;
}

RunMetrics compute_metrics(std::span<const std::size_t> gold, std::span<const std::size_t> pred,
                           std::size_t num_classes, Averaging averaging)
{
    if (gold.size() != pred.size())
        throw DataError("gold and predicted label lists differ in length (" + std::to_string(gold.size()) + " vs " +
                        std::to_string(pred.size()) + ")");
    if (gold.empty())
        throw DataError("no predictions to score");
    const auto n = static_cast<Eigen::Index>(num_classes);
    ConfusionMatrix cm = ConfusionMatrix::Zero(n, n);
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] >= num_classes || pred[i] >= num_classes)
            throw DataError("label index outside the label space");
        ++cm(static_cast<Eigen::Index>(gold[i]), static_cast<Eigen::Index>(pred[i]));
    }
    return metrics_from_confusion(cm, averaging);
}

RunMetrics compute_metrics(std::span<const std::string> gold, std::span<const std::string> pred,
                           const LabelSpace& labels, Averaging averaging)
{
    std::vector<std::size_t> g, p;
    for (const auto& s : gold)
        g.push_back(labels.index_of(s));
    for (const auto& s : pred)
        p.push_back(labels.index_of(s));
    auto m = compute_metrics(g, p, labels.size(), averaging);
    m.classes = labels.classes();
    return m;
}

nlohmann::ordered_json RunMetrics::to_json(bool with_timing) const
{
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["model_id"] = model_id;
    j["tune_mode"] = tune_mode;
    j["verbalizer_kind"] = verbalizer_kind;
    j["shot"] = shot ? nlohmann::ordered_json(*shot) : nlohmann::ordered_json();
    j["seed"] = seed ? nlohmann::ordered_json(*seed) : nlohmann::ordered_json();
    j["accuracy"] = accuracy;
    j["precision"] = precision;
    j["recall"] = recall;
    j["f1"] = f1;
    j["averaging"] = to_string(averaging);
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        const std::string name = c < classes.size() ? classes[c] : std::to_string(c);
        pc[name] = {{"precision", per_class[c].precision},
                    {"recall", per_class[c].recall},
                    {"f1", per_class[c].f1},
                    {"support", per_class[c].support}};
    }
    j["per_class"] = pc;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < confusion.rows(); ++r) {
        std::vector<long long> row(confusion.row(r).data(), confusion.row(r).data() + confusion.cols());
        rows.push_back(row);
    }
    j["confusion"] = rows;
    j["classes"] = classes;
    const auto& other = averaging == Averaging::macro ? weighted : macro;
    j[averaging == Averaging::macro ? "weighted" : "macro"] = {
        {"precision", other.precision}, {"recall", other.recall}, {"f1", other.f1}};
    if (with_timing)
        j["wall_time_s"] = wall_time_s;
    return j;
}

RunMetrics RunMetrics::from_json(const nlohmann::json& j)
{
    try {
        const auto rows = j.at("confusion").get<std::vector<std::vector<long long>>>();
        ConfusionMatrix cm(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != rows.size())
                throw DataError("metrics JSON: confusion matrix is not square");
            for (std::size_t c = 0; c < rows.size(); ++c)
                cm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
        RunMetrics m = metrics_from_confusion(cm, parse_averaging(j.at("averaging").get<std::string>()));
        m.dataset = j.value("dataset", "");
        m.model_id = j.value("model_id", "");
        m.tune_mode = j.value("tune_mode", "");
        m.verbalizer_kind = j.value("verbalizer_kind", "");
        if (j.contains("shot") && !j["shot"].is_null())
            m.shot = j["shot"].get<std::size_t>();
        if (j.contains("seed") && !j["seed"].is_null())
            m.seed = j["seed"].get<std::uint64_t>();
        m.classes = j.value("classes", std::vector<std::string>{});
        m.wall_time_s = j.value("wall_time_s", 0.0);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("metrics JSON: ") + e.what());
    }
}

namespace {

std::string fixed(double v, int digits = 6)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

ConfusionReport confusion_report(const RunMetrics& metrics)
{
    const auto& cm = metrics.confusion;
    const auto n = cm.rows();
    std::vector<std::string> names;
    for (Eigen::Index c = 0; c < n; ++c)
        names.push_back(static_cast<std::size_t>(c) < metrics.classes.size() ? metrics.classes[static_cast<std::size_t>(c)]
                                                                              : "class" + std::to_string(c));
    ConfusionReport r;
    std::ostringstream csv;
    csv << "gold/pred";
    for (const auto& name : names)
        csv << ',' << csv::escape(name, ',');
    csv << '\n';
    for (Eigen::Index g = 0; g < n; ++g) {
        csv << csv::escape(names[static_cast<std::size_t>(g)], ',');
        for (Eigen::Index p = 0; p < n; ++p)
            csv << ',' << cm(g, p);
        csv << '\n';
    }
    r.confusion_csv = csv.str();

    std::ostringstream rec;
    rec << "class,recall,support,empty\n";
    for (Eigen::Index g = 0; g < n; ++g) {
        const long long support = cm.row(g).sum();
        const bool empty = support == 0;
        const double recall = empty ? 0.0 : static_cast<double>(cm(g, g)) / static_cast<double>(support);
        if (empty)
            warn("class '" + names[static_cast<std::size_t>(g)] + "' has no gold examples; recall reported as 0");
        r.recall.push_back(recall);
        r.empty_row.push_back(empty);
        rec << csv::escape(names[static_cast<std::size_t>(g)], ',') << ',' << fixed(recall) << ',' << support << ','
            << (empty ? "true" : "false") << '\n';
    }
    r.recall_csv = rec.str();

    // Row-normalized heatmap.
    const int cell = 72, left = 140, top = 40;
    std::ostringstream svg;
    const int width = left + cell * static_cast<int>(n) + 20;
    const int height = top + cell * static_cast<int>(n) + 40;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    for (Eigen::Index p = 0; p < n; ++p)
        svg << "<text x=\"" << left + cell * p + cell / 2 << "\" y=\"" << top - 8 << "\" text-anchor=\"middle\">"
            << xml_escape(names[static_cast<std::size_t>(p)]) << "</text>\n";
    for (Eigen::Index g = 0; g < n; ++g) {
        const long long support = cm.row(g).sum();
        svg << "<text x=\"" << left - 8 << "\" y=\"" << top + cell * g + cell / 2 + 4 << "\" text-anchor=\"end\">"
            << xml_escape(names[static_cast<std::size_t>(g)]) << "</text>\n";
        for (Eigen::Index p = 0; p < n; ++p) {
            const double frac = support ? static_cast<double>(cm(g, p)) / static_cast<double>(support) : 0.0;
            const int shade = 255 - static_cast<int>(std::lround(frac * 200));
            svg << "<rect x=\"" << left + cell * p << "\" y=\"" << top + cell * g << "\" width=\"" << cell
                << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#888\"/>\n";
            svg << "<text x=\"" << left + cell * p + cell / 2 << "\" y=\"" << top + cell * g + cell / 2 + 4
                << "\" text-anchor=\"middle\">" << fixed(frac, 2) << "</text>\n";
        }
    }
    svg << "<text x=\"" << left << "\" y=\"" << height - 12 << "\">rows: gold, columns: predicted</text>\n";
    svg << "</svg>\n";
    r.svg = svg.str();
    return r;
}

nlohmann::ordered_json SweepCell::to_json(bool with_timing) const
{
    nlohmann::ordered_json j;
    j["shot"] = shot;
    j["seed"] = seed;
    j["status"] = failed ? "failed" : "ok";
    if (failed)
        j["error"] = error;
    if (metrics)
        j["metrics"] = metrics->to_json(with_timing);
    return j;
}

SweepCell SweepCell::from_json(const nlohmann::json& j)
{
    SweepCell c;
    c.shot = j.at("shot").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.failed = j.value("status", "ok") != "ok";
    c.error = j.value("error", "");
    if (j.contains("metrics"))
        c.metrics = RunMetrics::from_json(j["metrics"]);
    return c;
}

const SweepCell* SweepResult::find(std::size_t shot, std::uint64_t seed) const
{
    for (const auto& c : cells)
        if (c.shot == shot && c.seed == seed)
            return &c;
    return nullptr;
}

std::vector<SweepSummaryRow> SweepResult::summary() const
{
    auto stats = [](const std::vector<double>& xs, double& mean, double& sd) {
        mean = sd = 0;
        if (xs.empty())
            return;
        for (double x : xs)
            mean += x;
        mean /= static_cast<double>(xs.size());
        if (xs.size() < 2)
            return;
        for (double x : xs)
            sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    };
    std::vector<SweepSummaryRow> rows;
    for (auto shot : shots) {
        SweepSummaryRow r;
        r.shot = shot;
        std::vector<double> acc, p, rc, f;
        for (const auto& c : cells) {
            if (c.shot != shot)
                continue;
            if (c.failed || !c.metrics) {
                ++r.failed;
                continue;
            }
            ++r.completed;
            acc.push_back(c.metrics->accuracy);
            p.push_back(c.metrics->precision);
            rc.push_back(c.metrics->recall);
            f.push_back(c.metrics->f1);
        }
        stats(acc, r.accuracy_mean, r.accuracy_std);
        stats(p, r.precision_mean, r.precision_std);
        stats(rc, r.recall_mean, r.recall_std);
        stats(f, r.f1_mean, r.f1_std);
        rows.push_back(r);
    }
    return rows;
}

std::string SweepResult::summary_csv() const
{
    std::ostringstream os;
    os << "shot,completed,failed,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,"
          "f1_mean,f1_std\n";
    for (const auto& r : summary())
        os << r.shot << ',' << r.completed << ',' << r.failed << ',' << fixed(r.accuracy_mean) << ','
           << fixed(r.accuracy_std) << ',' << fixed(r.precision_mean) << ',' << fixed(r.precision_std) << ','
           << fixed(r.recall_mean) << ',' << fixed(r.recall_std) << ',' << fixed(r.f1_mean) << ',' << fixed(r.f1_std)
           << '\n';
    return os.str();
}

nlohmann::ordered_json SweepResult::to_json(bool with_timing) const
{
    nlohmann::ordered_json j;
    j["shots"] = shots;
    j["seeds"] = seeds;
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : cells)
        j["cells"].push_back(c.to_json(with_timing));
    j["summary"] = nlohmann::ordered_json::array();
    for (const auto& r : summary())
        j["summary"].push_back({{"shot", r.shot},
                                {"completed", r.completed},
                                {"failed", r.failed},
                                {"accuracy", {{"mean", r.accuracy_mean}, {"std", r.accuracy_std}}},
                                {"precision", {{"mean", r.precision_mean}, {"std", r.precision_std}}},
                                {"recall", {{"mean", r.recall_mean}, {"std", r.recall_std}}},
                                {"f1", {{"mean", r.f1_mean}, {"std", r.f1_std}}}});
    return j;
}

SweepResult run_sweep(const std::vector<std::size_t>& shots, const std::vector<std::uint64_t>& seeds,
                      const CellRunner& run_cell, const std::optional<std::filesystem::path>& cells_log)
{
    std::map<std::pair<std::size_t, std::uint64_t>, SweepCell> done;
    if (cells_log && std::filesystem::exists(*cells_log)) {
        std::ifstream in(*cells_log);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos)
                continue;
            try {
                auto cell = SweepCell::from_json(nlohmann::json::parse(line));
                if (!cell.failed)
                    done[{cell.shot, cell.seed}] = std::move(cell);
            } catch (const std::exception& e) {
                // A crash can leave a torn final line; anything unreadable is simply rerun.
                warn(cells_log->string() + ":" + std::to_string(lineno) + ": ignoring unreadable cell record");
            }
        }
    }
    SweepResult result;
    result.shots = shots;
    result.seeds = seeds;
    for (auto shot : shots) {
        for (auto seed : seeds) {
            if (auto it = done.find({shot, seed}); it != done.end()) {
                result.cells.push_back(it->second);
                continue;
            }
            SweepCell cell;
            cell.shot = shot;
            cell.seed = seed;
            try {
                cell.metrics = run_cell(shot, seed);
                cell.metrics->shot = shot;
                cell.metrics->seed = seed;
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
                warn("sweep cell shot=" + std::to_string(shot) + " seed=" + std::to_string(seed) +
                     " failed: " + e.what());
            }
            if (cells_log) {
                std::ofstream out(*cells_log, std::ios::app);
                out << cell.to_json().dump() << '\n';
                out.flush();
            }
            result.cells.push_back(std::move(cell));
        }
    }
    return result;
}

} // namespace ipck
