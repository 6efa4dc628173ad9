#pragma once

#include <algorithm>
#include <filesystem>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ipck {

struct Neighbor {
    std::string word;
    double score = 0.0; ///< relatedness in [0, 1]
};

/// Offline "related words" graph: word -> neighbors sorted by descending score.
///
/// Words are lowercase. Self-loops are dropped and duplicate neighbors keep
/// their highest score when the snapshot is built.
class KnowledgeSnapshot {
public:
    KnowledgeSnapshot() = default;

    /// Insert or merge an entry, enforcing the snapshot invariants.
    void add(std::string_view word, const std::vector<Neighbor>& neighbors);

    const std::map<std::string, std::vector<Neighbor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    bool contains(std::string_view word) const { return entries_.find(std::string(word)) != entries_.end(); }

    /// Neighbor words of `word` as a set; empty when the word has no entry.
    std::set<std::string> neighbor_set(const std::string& word) const;

    /// Every word in the graph: entry keys and neighbor words.
    std::set<std::string> vocabulary() const;

private:
    std::map<std::string, std::vector<Neighbor>> entries_;
};

/// Parse JSON-lines: {"word": string, "neighbors": [[string, float], ...]} per line.
KnowledgeSnapshot parse_snapshot(std::istream& in);
KnowledgeSnapshot load_snapshot(const std::filesystem::path& path);
void save_snapshot(const std::filesystem::path& path, const KnowledgeSnapshot& snapshot);

/// |a ∩ b| / |a ∪ b| over two sorted ranges; 0 when both are empty.
template <typename SortedRangeA, typename SortedRangeB>
double jaccard(const SortedRangeA& a, const SortedRangeB& b)
{
    std::size_t common = 0;
    auto ia = std::begin(a);
    auto ib = std::begin(b);
    std::size_t na = 0, nb = 0;
    while (ia != std::end(a) && ib != std::end(b)) {
        if (*ia < *ib) {
            ++ia;
            ++na;
        } else if (*ib < *ia) {
            ++ib;
            ++nb;
        } else {
            ++common;
            ++ia;
            ++ib;
            ++na;
            ++nb;
        }
    }
    na += static_cast<std::size_t>(std::distance(ia, std::end(a)));
    nb += static_cast<std::size_t>(std::distance(ib, std::end(b)));
    const std::size_t uni = na + nb - common;
    return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

struct Candidate {
    std::string word;
    double score = 0.0;
};

/// Label-word candidates for one class. The class word sits at rank 0 with score 1.
struct CandidateSet {
    std::string class_name;
    std::vector<Candidate> candidates;
    std::size_t size_limit = 20;

    std::vector<std::string> words() const;
};

inline constexpr std::size_t default_kg_size = 20;

/// Lookup key for a class name: lowercase, drop characters other than
/// letters, digits, spaces and hyphens, collapse whitespace.
std::string canonical_word(std::string_view text);

/// Expand a class name into at most `n_kg` candidate words.
///
/// A candidate's similarity is the Jaccard coefficient between the class
/// node's neighbor set and the candidate node's neighbor set. Only candidates
/// with positive similarity are kept; ties are broken lexicographically. A
/// class absent from the snapshot yields a singleton set and a warning.
CandidateSet expand_class(const KnowledgeSnapshot& snapshot, std::string_view class_name,
                          std::size_t n_kg = default_kg_size);

} // namespace ipck
