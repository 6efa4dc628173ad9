#include "ipck/knowledge.hpp"

#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <fstream>

namespace ipck {

void KnowledgeSnapshot::add(std::string_view word, const std::vector<Neighbor>& neighbors)
{
    const std::string key = canonical_word(word);
    if (key.empty())
        throw DataError("snapshot entry with empty word");
    auto& list = entries_[key];
    for (const auto& n : neighbors) {
        const std::string w = canonical_word(n.word);
        if (w.empty() || w == key)
            continue;
        if (!std::isfinite(n.score) || n.score < 0.0 || n.score > 1.0)
            throw DataError("relatedness score for '" + key + "' -> '" + w + "' outside [0, 1]");
        auto it = std::find_if(list.begin(), list.end(), [&](const Neighbor& x) { return x.word == w; });
        if (it == list.end())
            list.push_back({w, n.score});
        else
            it->score = std::max(it->score, n.score);
    }
    std::stable_sort(list.begin(), list.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.score != b.score ? a.score > b.score : a.word < b.word;
    });
}

std::set<std::string> KnowledgeSnapshot::neighbor_set(const std::string& word) const
{
    std::set<std::string> out;
    auto it = entries_.find(word);
    if (it != entries_.end())
        for (const auto& n : it->second)
            out.insert(n.word);
    return out;
}

std::set<std::string> KnowledgeSnapshot::vocabulary() const
{
    std::set<std::string> out;
    for (const auto& [word, neighbors] : entries_) {
        out.insert(word);
        for (const auto& n : neighbors)
            out.insert(n.word);
    }
    return out;
}

KnowledgeSnapshot parse_snapshot(std::istream& in)
{
    KnowledgeSnapshot snapshot;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        auto fail = [&](const std::string& why) {
            throw DataError("snapshot line " + std::to_string(line_no) + ": " + why);
        };
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(std::string("malformed JSON (") + e.what() + ")");
        }
        if (!j.is_object() || !j.contains("word") || !j["word"].is_string())
            fail("expected an object with a string \"word\"");
        if (!j.contains("neighbors") || !j["neighbors"].is_array())
            fail("expected a \"neighbors\" array");
        std::vector<Neighbor> neighbors;
        for (const auto& pair : j["neighbors"]) {
            if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_number())
                fail("each neighbor must be [string, number]");
            neighbors.push_back({pair[0].get<std::string>(), pair[1].get<double>()});
        }
        try {
            snapshot.add(j["word"].get<std::string>(), neighbors);
        } catch (const DataError& e) {
            fail(e.what());
        }
    }
    if (snapshot.empty())
        throw DataError("knowledge snapshot is empty");
    return snapshot;
}

KnowledgeSnapshot load_snapshot(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open knowledge snapshot " + path.string());
    return parse_snapshot(in);
}

void save_snapshot(const std::filesystem::path& path, const KnowledgeSnapshot& snapshot)
{
    std::ofstream out(path);
    if (!out)
        throw RuntimeError("cannot write knowledge snapshot " + path.string());
    for (const auto& [word, neighbors] : snapshot.entries()) {
        nlohmann::json j;
        j["word"] = word;
        j["neighbors"] = nlohmann::json::array();
        for (const auto& n : neighbors)
            j["neighbors"].push_back({n.word, n.score});
        out << j.dump() << '\n';
    }
}

std::vector<std::string> CandidateSet::words() const
{
    std::vector<std::string> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates)
        out.push_back(c.word);
    return out;
}

std::string canonical_word(std::string_view text)
{
    std::string out;
    bool pending_space = false;
    for (unsigned char ch : text) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (!(std::isalnum(ch) || ch == '-' || ch >= 0x80))
            continue;
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    return out;
}

CandidateSet expand_class(const KnowledgeSnapshot& snapshot, std::string_view class_name, std::size_t n_kg)
{
    if (n_kg == 0)
        throw ConfigError("n_kg must be at least 1");
    CandidateSet result;
    result.class_name = std::string(class_name);
    result.size_limit = n_kg;
    const std::string key = canonical_word(class_name);
    result.candidates.push_back({key, 1.0});
    if (!snapshot.contains(key)) {
        warn("class '" + std::string(class_name) + "' not found in knowledge snapshot; using the class name only");
        return result;
    }
    if (n_kg == 1)
        return result;

    const auto class_neighbors = snapshot.neighbor_set(key);
    std::vector<Candidate> ranked;
    for (const auto& word : snapshot.vocabulary()) {
        if (word == key)
            continue;
        const double s = jaccard(class_neighbors, snapshot.neighbor_set(word));
        if (s > 0.0)
            ranked.push_back({word, s});
    }
    std::sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
        return a.score != b.score ? a.score > b.score : a.word < b.word;
    });
    if (ranked.size() > n_kg - 1)
        ranked.resize(n_kg - 1);
    result.candidates.insert(result.candidates.end(), ranked.begin(), ranked.end());
    return result;
}

} // namespace ipck
