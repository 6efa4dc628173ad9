#include "ipck/tokenizer.hpp"

#include "ipck/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <regex>
#include <sstream>

namespace ipck {

struct Tokenizer::NormalizerStep {
    enum class Kind { replace_string, replace_regex, strip, lowercase, prepend } kind;
    std::string pattern;
    std::regex regex;
    std::string content;
    bool left = false, right = false;
};

struct Tokenizer::PreTokenizerStep {
    enum class Kind { whitespace_split, metaspace } kind;
    std::string replacement = "\xE2\x96\x81"; // U+2581
    enum class Prepend { always, first, never } prepend = Prepend::always;
    bool split = true;
};

namespace {

using json = nlohmann::json;

std::size_t utf8_length(unsigned char lead)
{
    if (lead < 0x80)
        return 1;
    if ((lead >> 5) == 0x6)
        return 2;
    if ((lead >> 4) == 0xE)
        return 3;
    if ((lead >> 3) == 0x1E)
        return 4;
    return 1;
}

std::string replace_all(std::string text, std::string_view from, std::string_view to)
{
    if (from.empty())
        return text;
    std::string out;
    std::size_t start = 0;
    for (auto pos = text.find(from); pos != std::string::npos; pos = text.find(from, start)) {
        out.append(text, start, pos - start);
        out.append(to);
        start = pos + from.size();
    }
    out.append(text, start);
    return out;
}

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

} // namespace

Tokenizer Tokenizer::from_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open tokenizer " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return from_json(ss.str());
    } catch (const json::exception& e) {
        throw DataError("malformed tokenizer " + path.string() + ": " + e.what());
    }
}

Tokenizer Tokenizer::from_json(std::string_view json_text)
{
    const json j = json::parse(json_text);
    Tokenizer t;
    const auto& model = j.at("model");
    if (model.value("type", std::string{}) != "Unigram")
        throw DataError("unsupported tokenizer model '" + model.value("type", std::string{"?"}) +
                        "' (only Unigram is implemented)");
    if (model.value("byte_fallback", false))
        throw DataError("byte-fallback Unigram tokenizers are not supported");
    t.unk_id_ = model.value("unk_id", 0);
    t.min_score_ = std::numeric_limits<double>::infinity();
    for (const auto& entry : model.at("vocab")) {
        const auto piece = entry.at(0).get<std::string>();
        const double score = entry.at(1).get<double>();
        const int id = static_cast<int>(t.pieces_.size());
        t.pieces_.push_back(piece);
        t.scores_.push_back(score);
        t.piece_ids_.emplace(piece, id);
        t.max_piece_bytes_ = std::max(t.max_piece_bytes_, piece.size());
        t.min_score_ = std::min(t.min_score_, score);
    }

    for (const auto& a : j.value("added_tokens", json::array())) {
        AddedToken tok;
        tok.content = a.at("content").get<std::string>();
        tok.id = a.at("id").get<int>();
        tok.lstrip = a.value("lstrip", false);
        tok.rstrip = a.value("rstrip", false);
        if (tok.id >= static_cast<int>(t.pieces_.size())) {
            t.pieces_.resize(static_cast<std::size_t>(tok.id) + 1);
            t.scores_.resize(static_cast<std::size_t>(tok.id) + 1, 0.0);
        }
        t.pieces_[static_cast<std::size_t>(tok.id)] = tok.content;
        t.added_.push_back(std::move(tok));
    }
    // Longest first so that overlapping contents match greedily.
    std::stable_sort(t.added_.begin(), t.added_.end(),
                     [](const AddedToken& a, const AddedToken& b) { return a.content.size() > b.content.size(); });

    auto normalizers = std::make_shared<std::vector<NormalizerStep>>();
    std::function<void(const json&)> add_normalizer = [&](const json& n) {
        if (n.is_null())
            return;
        const auto type = n.at("type").get<std::string>();
        if (type == "Sequence") {
            for (const auto& s : n.at("normalizers"))
                add_normalizer(s);
        } else if (type == "Replace") {
            NormalizerStep step;
            const auto& pat = n.at("pattern");
            step.content = n.at("content").get<std::string>();
            if (pat.contains("Regex")) {
                step.kind = NormalizerStep::Kind::replace_regex;
                step.pattern = pat.at("Regex").get<std::string>();
                step.regex = std::regex(step.pattern, std::regex::ECMAScript);
            } else {
                step.kind = NormalizerStep::Kind::replace_string;
                step.pattern = pat.at("String").get<std::string>();
            }
            normalizers->push_back(std::move(step));
        } else if (type == "Strip") {
            NormalizerStep step;
            step.kind = NormalizerStep::Kind::strip;
            step.left = n.value("strip_left", true);
            step.right = n.value("strip_right", true);
            normalizers->push_back(std::move(step));
        } else if (type == "Lowercase") {
            normalizers->push_back({NormalizerStep::Kind::lowercase, {}, {}, {}, false, false});
        } else if (type == "Prepend") {
            NormalizerStep step;
            step.kind = NormalizerStep::Kind::prepend;
            step.content = n.at("prepend").get<std::string>();
            normalizers->push_back(std::move(step));
        } else if (type == "Precompiled" || type == "NFKC" || type == "NFC" || type == "NFD" || type == "NFKD") {
            // Unicode normalization is the identity on ASCII input; non-ASCII text is passed through unchanged.
        } else {
            throw DataError("unsupported normalizer '" + type + "'");
        }
    };
    add_normalizer(j.value("normalizer", json()));
    t.normalizers_ = normalizers;

    auto pre = std::make_shared<std::vector<PreTokenizerStep>>();
    std::function<void(const json&)> add_pre = [&](const json& p) {
        if (p.is_null())
            return;
        const auto type = p.at("type").get<std::string>();
        if (type == "Sequence") {
            for (const auto& s : p.at("pretokenizers"))
                add_pre(s);
        } else if (type == "WhitespaceSplit") {
            PreTokenizerStep step;
            step.kind = PreTokenizerStep::Kind::whitespace_split;
            pre->push_back(step);
        } else if (type == "Metaspace") {
            PreTokenizerStep step;
            step.kind = PreTokenizerStep::Kind::metaspace;
            step.replacement = p.value("replacement", step.replacement);
            step.split = p.value("split", true);
            std::string scheme = p.value("prepend_scheme", std::string{});
            if (scheme.empty())
                scheme = p.value("add_prefix_space", true) ? "always" : "never";
            step.prepend = scheme == "first"   ? PreTokenizerStep::Prepend::first
                           : scheme == "never" ? PreTokenizerStep::Prepend::never
                                               : PreTokenizerStep::Prepend::always;
            pre->push_back(step);
        } else {
            throw DataError("unsupported pre-tokenizer '" + type + "'");
        }
    };
    add_pre(j.value("pre_tokenizer", json()));
    t.pre_tokenizers_ = pre;

    const auto post = j.value("post_processor", json());
    if (!post.is_null()) {
        if (post.at("type").get<std::string>() != "TemplateProcessing")
            throw DataError("unsupported post-processor '" + post.at("type").get<std::string>() + "'");
        bool seen_sequence = false;
        for (const auto& item : post.at("single")) {
            if (item.contains("Sequence")) {
                seen_sequence = true;
            } else if (item.contains("SpecialToken")) {
                const auto name = item.at("SpecialToken").at("id").get<std::string>();
                const auto ids = post.at("special_tokens").at(name).at("ids").get<std::vector<int>>();
                auto& target = seen_sequence ? t.suffix_ids_ : t.prefix_ids_;
                target.insert(target.end(), ids.begin(), ids.end());
            }
        }
    }
    return t;
}

std::optional<int> Tokenizer::token_id(std::string_view piece) const
{
    for (const auto& a : added_)
        if (a.content == piece)
            return a.id;
    auto it = piece_ids_.find(piece);
    if (it == piece_ids_.end())
        return std::nullopt;
    return it->second;
}

const std::string& Tokenizer::piece(int id) const
{
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
        throw RuntimeError("token id " + std::to_string(id) + " out of range");
    return pieces_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::eos_id() const
{
    if (!suffix_ids_.empty())
        return suffix_ids_.back();
    return token_id("</s>");
}

std::string Tokenizer::normalize(std::string text) const
{
    for (const auto& step : *normalizers_) {
        switch (step.kind) {
        case NormalizerStep::Kind::replace_string: text = replace_all(std::move(text), step.pattern, step.content); break;
        case NormalizerStep::Kind::replace_regex: text = std::regex_replace(text, step.regex, step.content); break;
        case NormalizerStep::Kind::strip: {
            std::size_t b = 0, e = text.size();
            if (step.left)
                while (b < e && is_space(static_cast<unsigned char>(text[b])))
                    ++b;
            if (step.right)
                while (e > b && is_space(static_cast<unsigned char>(text[e - 1])))
                    --e;
            text = text.substr(b, e - b);
            break;
        }
        case NormalizerStep::Kind::lowercase:
            for (auto& c : text)
                c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            break;
        case NormalizerStep::Kind::prepend:
            if (!text.empty())
                text = step.content + text;
            break;
        }
    }
    return text;
}

std::vector<std::string> Tokenizer::pre_tokenize(const std::string& text, bool first_segment) const
{
    std::vector<std::string> words{text};
    for (const auto& step : *pre_tokenizers_) {
        std::vector<std::string> next;
        for (std::size_t w = 0; w < words.size(); ++w) {
            const auto& word = words[w];
            if (step.kind == PreTokenizerStep::Kind::whitespace_split) {
                std::size_t i = 0;
                while (i < word.size()) {
                    while (i < word.size() && is_space(static_cast<unsigned char>(word[i])))
                        ++i;
                    std::size_t j = i;
                    while (j < word.size() && !is_space(static_cast<unsigned char>(word[j])))
                        ++j;
                    if (j > i)
                        next.push_back(word.substr(i, j - i));
                    i = j;
                }
                continue;
            }
            std::string s = replace_all(word, " ", step.replacement);
            const bool prepend = step.prepend == PreTokenizerStep::Prepend::always ||
                                 (step.prepend == PreTokenizerStep::Prepend::first && first_segment && w == 0);
            if (prepend && s.compare(0, step.replacement.size(), step.replacement) != 0)
                s = step.replacement + s;
            if (!step.split) {
                next.push_back(std::move(s));
                continue;
            }
            // Split before every replacement character; it stays attached to the following text.
            std::size_t start = 0;
            for (std::size_t pos = s.find(step.replacement, 1); pos != std::string::npos;
                 pos = s.find(step.replacement, pos + step.replacement.size())) {
                if (pos > start)
                    next.push_back(s.substr(start, pos - start));
                start = pos;
            }
            if (start < s.size())
                next.push_back(s.substr(start));
        }
        words = std::move(next);
    }
    return words;
}

void Tokenizer::unigram(std::string_view word, std::vector<int>& out) const
{
    struct Node {
        double score = 0.0;
        std::size_t start = 0;
        int id = -1;
        bool reached = false;
    };
    const std::size_t n = word.size();
    std::vector<Node> best(n + 1);
    best[0].reached = true;
    const double unk_score = min_score_ - 10.0;

    for (std::size_t pos = 0; pos < n;) {
        const std::size_t char_len = std::min(utf8_length(static_cast<unsigned char>(word[pos])), n - pos);
        if (!best[pos].reached) {
            pos += char_len;
            continue;
        }
        const double base = best[pos].score;
        bool has_single = false;
        const std::size_t limit = std::min(max_piece_bytes_, n - pos);
        for (std::size_t len = 1; len <= limit; ++len) {
            auto it = piece_ids_.find(word.substr(pos, len));
            if (it == piece_ids_.end())
                continue;
            const double cand = base + scores_[static_cast<std::size_t>(it->second)];
            Node& target = best[pos + len];
            if (!target.reached || cand > target.score)
                target = {cand, pos, it->second, true};
            if (len == char_len)
                has_single = true;
        }
        if (!has_single) {
            const double cand = base + unk_score;
            Node& target = best[pos + char_len];
            if (!target.reached || cand > target.score)
                target = {cand, pos, unk_id_, true};
        }
        pos += char_len;
    }

    std::vector<int> ids;
    for (std::size_t pos = n; pos > 0;) {
        ids.push_back(best[pos].id);
        pos = best[pos].start;
    }
    std::reverse(ids.begin(), ids.end());
    for (int id : ids) {
        if (id == unk_id_ && !out.empty() && out.back() == unk_id_)
            continue;
        out.push_back(id);
    }
}

std::vector<int> Tokenizer::encode(std::string_view text, bool add_special_tokens) const
{
    // Split around added tokens first; the remaining segments are normalized independently.
    struct Segment {
        std::string text;
        int added_id = -1;
    };
    std::vector<Segment> segments;
    std::string pending;
    std::size_t i = 0;
    while (i < text.size()) {
        const AddedToken* hit = nullptr;
        for (const auto& a : added_)
            if (!a.content.empty() && text.compare(i, a.content.size(), a.content) == 0) {
                hit = &a;
                break;
            }
        if (!hit) {
            pending.push_back(text[i++]);
            continue;
        }
        if (hit->lstrip)
            while (!pending.empty() && is_space(static_cast<unsigned char>(pending.back())))
                pending.pop_back();
        if (!pending.empty())
            segments.push_back({std::move(pending), -1});
        pending.clear();
        segments.push_back({{}, hit->id});
        i += hit->content.size();
        if (hit->rstrip)
            while (i < text.size() && is_space(static_cast<unsigned char>(text[i])))
                ++i;
    }
    if (!pending.empty())
        segments.push_back({std::move(pending), -1});

    std::vector<int> ids;
    if (add_special_tokens)
        ids = prefix_ids_;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        if (segments[s].added_id >= 0) {
            ids.push_back(segments[s].added_id);
            continue;
        }
        const std::string normalized = normalize(segments[s].text);
        if (normalized.empty())
            continue;
        for (const auto& word : pre_tokenize(normalized, s == 0))
            unigram(word, ids);
    }
    if (add_special_tokens)
        ids.insert(ids.end(), suffix_ids_.begin(), suffix_ids_.end());
    return ids;
}

} // namespace ipck
