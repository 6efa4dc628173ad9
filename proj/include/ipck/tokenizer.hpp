#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ipck {

/// SentencePiece-style Unigram tokenizer loaded from a Hugging Face tokenizer.json.
///
/// Supported pieces of the format: added tokens (with lstrip/rstrip), the
/// Sequence/Replace/Strip/Lowercase/Prepend normalizers (Precompiled and the
/// NFKC family are treated as identity), WhitespaceSplit and Metaspace
/// pre-tokenizers, the Unigram model with unk fusion, and a TemplateProcessing
/// post-processor that appends special tokens.
class Tokenizer {
public:
    static Tokenizer from_file(const std::filesystem::path& path);
    static Tokenizer from_json(std::string_view json_text);

    /// Token ids for `text`; the post-processor's special tokens are appended when requested.
    std::vector<int> encode(std::string_view text, bool add_special_tokens = true) const;

    std::optional<int> token_id(std::string_view piece) const;
    const std::string& piece(int id) const;
    std::size_t vocab_size() const { return pieces_.size(); }

    int unk_id() const { return unk_id_; }
    std::optional<int> eos_id() const;

private:
    struct AddedToken {
        std::string content;
        int id = 0;
        bool lstrip = false;
        bool rstrip = false;
    };
    struct NormalizerStep;
    struct PreTokenizerStep;

    std::string normalize(std::string text) const;
    std::vector<std::string> pre_tokenize(const std::string& text, bool first_segment) const;
    void unigram(std::string_view word, std::vector<int>& out) const;

    std::vector<std::string> pieces_;
    std::vector<double> scores_;
    struct StringHash {
        using is_transparent = void;
        std::size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
    };
    std::unordered_map<std::string, int, StringHash, std::equal_to<>> piece_ids_;
    std::size_t max_piece_bytes_ = 0;
    double min_score_ = 0.0;
    int unk_id_ = 0;
    std::vector<AddedToken> added_;
    std::shared_ptr<const std::vector<NormalizerStep>> normalizers_;
    std::shared_ptr<const std::vector<PreTokenizerStep>> pre_tokenizers_;
    std::vector<int> suffix_ids_;
    std::vector<int> prefix_ids_;
};

} // namespace ipck
