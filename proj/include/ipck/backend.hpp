#pragma once

#include "ipck/autodiff.hpp"
#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"
#include "ipck/prompting.hpp"
#include "ipck/rng.hpp"
#include "ipck/t5.hpp"
#include "ipck/tokenizer.hpp"
#include "ipck/verbalizer.hpp"

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ipck {

inline constexpr std::size_t default_max_len = 256;
inline constexpr std::string_view t5_mask_marker = "<extra_id_0>";

/// Capabilities record of a loaded checkpoint.
struct BackendHandle {
    std::string model_id;
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 0;
    std::size_t max_len = default_max_len;
    std::string mask_marker{t5_mask_marker};
};

struct TokenSequence {
    std::vector<int> ids;
    bool truncated = false;
};

template <typename Scalar>
struct MaskOutput {
    Vector<Scalar> word_logprobs; ///< log-probabilities over the vocabulary at the mask position
    Vector<Scalar> h;             ///< decoder state at the first generated position
};

enum class TuneMode { prompt_only, full };
std::string to_string(TuneMode m);
TuneMode parse_tune_mode(std::string_view s);

struct ParameterGroup {
    std::string name;
    std::size_t count = 0;
};

struct ParameterSetDescriptor {
    TuneMode mode = TuneMode::prompt_only;
    std::vector<ParameterGroup> groups;
    std::size_t total() const
    {
        std::size_t n = 0;
        for (const auto& g : groups)
            n += g.count;
        return n;
    }
};

/// A checkpoint directory for `model_id`: the id itself when it names a
/// directory, otherwise a lookup under $IPCK_CACHE_DIR (as given, or with
/// '/' replaced by "--"). Throws ConfigError when nothing matches.
std::filesystem::path resolve_model_dir(const std::string& model_id);

/// Largest byte length <= `limit` that ends on a UTF-8 character boundary of `s`.
std::size_t utf8_floor(std::string_view s, std::size_t limit);

/// Input and target of one span-corruption example.
struct DenoisingExample {
    std::vector<int> input;
    std::vector<int> target;
};

/// Replace ~15% of the unprotected positions of `tokens` (spans of up to 3)
/// with consecutive sentinel ids. The target lists each sentinel followed by
/// the tokens it hides, then `eos`. The target is empty when nothing can be
/// corrupted.
DenoisingExample corrupt_spans(std::span<const int> tokens, const std::vector<bool>& is_protected,
                               std::span<const int> sentinels, int eos, Rng& rng);

template <typename Scalar>
class BasicBackend {
public:
    using Model = T5Model<Scalar>;
    using Tape = ad::Tape<Scalar>;

    static BasicBackend open(const std::string& model_id, std::size_t max_len = default_max_len)
    {
        const auto dir = resolve_model_dir(model_id);
        BasicBackend b(Model::load(dir), Tokenizer::from_file(dir / "tokenizer.json"));
        b.dir_ = dir;
        b.handle_.model_id = model_id;
        b.handle_.max_len = max_len;
        b.finish_init();
        return b;
    }

    const BackendHandle& handle() const { return handle_; }
    const std::filesystem::path& directory() const { return dir_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    int mask_id() const { return mask_id_; }

    /// Token ids of a rendered prompt, shortening only the input slot when the
    /// whole prompt exceeds max_len.
    TokenSequence encode(const WrappedInput& w) const
    {
        if (w.text.empty())
            throw DataError("cannot encode an empty prompt");
        TokenSequence seq;
        seq.ids = tokenizer_.encode(w.text);
        if (seq.ids.size() > handle_.max_len) {
            std::size_t lo = 0, hi = w.input.size();
            auto fits = [&](std::size_t n) {
                return tokenizer_.encode(w.with_input(w.input.substr(0, utf8_floor(w.input, n))).text).size() <=
                       handle_.max_len;
            };
            if (!fits(0))
                throw DataError("prompt template alone exceeds max_len " + std::to_string(handle_.max_len) +
                                " tokens (source " + w.source_id + ")");
            while (lo < hi) {
                const std::size_t mid = lo + (hi - lo + 1) / 2;
                if (fits(mid))
                    lo = mid;
                else
                    hi = mid - 1;
            }
            seq.ids = tokenizer_.encode(w.with_input(w.input.substr(0, utf8_floor(w.input, lo))).text);
            seq.truncated = true;
        }
        const auto n = std::count(seq.ids.begin(), seq.ids.end(), mask_id_);
        if (n != 1)
            throw DataError("prompt '" + w.text + "' tokenizes to " + std::to_string(n) + " mask tokens (exactly 1 required)");
        return seq;
    }

    /// Encoder + two decoder steps on a tape; returns the 1 x D state at the first generated position.
    ad::Var forward_hidden(Tape& tape, const TokenSequence& tokens) const
    {
        check_tokens(tokens);
        const int dec[2] = {model_.config().decoder_start_token_id, mask_id_};
        ad::Var memory = model_.encode(tape, tokens.ids);
        return tape.row(model_.decode(tape, memory, dec), 1);
    }

    MaskOutput<Scalar> forward_mask(const TokenSequence& tokens) const
    {
        Tape tape(false);
        ad::Var h = forward_hidden(tape, tokens);
        const auto& z = tape.value(model_.lm_logits(tape, h));
        MaskOutput<Scalar> out;
        out.h = tape.value(h).row(0).transpose();
        const Scalar top = z.maxCoeff();
        const Scalar lse = top + std::log((z.array() - top).exp().sum());
        out.word_logprobs = (z.array() - lse).matrix().row(0).transpose();
        if (!out.word_logprobs.allFinite() || !out.h.allFinite())
            throw RuntimeError("non-finite backend output");
        return out;
    }

    /// Mean of the input-embedding rows of the word's subword pieces (no
    /// special tokens). Words made only of unknown pieces have no embedding.
    std::optional<Vector<Scalar>> embed_word(std::string_view word) const
    {
        const auto ids = tokenizer_.encode(word, false);
        Vector<Scalar> sum = Vector<Scalar>::Zero(static_cast<Eigen::Index>(handle_.embed_dim));
        std::size_t used = 0;
        for (int id : ids) {
            if (id == tokenizer_.unk_id())
                continue;
            sum += model_.shared().value.row(id).transpose();
            ++used;
        }
        if (used == 0)
            return std::nullopt;
        return Vector<Scalar>(sum / static_cast<Scalar>(used));
    }

    /// Vocabulary id of a word that is a single known piece, if any.
    std::optional<int> single_token_id(std::string_view word) const
    {
        const auto ids = tokenizer_.encode(word, false);
        if (ids.size() == 1 && ids[0] != tokenizer_.unk_id())
            return ids[0];
        return std::nullopt;
    }

    /// Output-layer rows for `ids`, scaled so that logits = rows · h.
    Matrix<Scalar> output_rows(std::span<const int> ids) const
    {
        const auto& table = model_.head().value;
        Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), table.cols());
        for (std::size_t i = 0; i < ids.size(); ++i)
            out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]) * model_.output_scale();
        return out;
    }

    /// Span-corruption loss on a prompt's own tokens (mask sentinel and </s> are never corrupted).
    /// A prompt too short to corrupt contributes a constant zero.
    ad::Var denoising_loss(Tape& tape, const TokenSequence& tokens, Rng& rng) const
    {
        std::vector<bool> keep(tokens.ids.size());
        for (std::size_t i = 0; i < keep.size(); ++i)
            keep[i] = tokens.ids[i] == mask_id_ || tokens.ids[i] == eos_id_;
        auto ex = corrupt_spans(tokens.ids, keep, sentinels_, eos_id_, rng);
        if (ex.target.empty())
            return tape.constant(ad::Mat<Scalar>::Zero(1, 1));
        return model_.seq2seq_loss(tape, ex.input, ex.target);
    }

    ParameterSetDescriptor trainable_params(TuneMode mode, std::size_t verbalizer_rows) const
    {
        ParameterSetDescriptor d;
        d.mode = mode;
        d.groups.push_back({"verbalizer", verbalizer_rows * handle_.embed_dim});
        if (mode == TuneMode::full)
            for (const auto& p : model_.parameters())
                d.groups.push_back({p->name, static_cast<std::size_t>(p->value.size())});
        return d;
    }

    /// crc32 of every backbone weight; changes iff some weight changes.
    std::string backbone_checksum() const
    {
        Matrix<double> all(static_cast<Eigen::Index>(model_.parameter_count()), 1);
        Eigen::Index at = 0;
        for (const auto& p : model_.parameters()) {
            all.middleRows(at, p->value.size()) = p->value.reshaped().template cast<double>();
            at += p->value.size();
        }
        return matrix_checksum(all);
    }

private:
    BasicBackend(Model m, Tokenizer t) : model_(std::move(m)), tokenizer_(std::move(t)) {}

    void finish_init()
    {
        const auto& c = model_.config();
        handle_.embed_dim = static_cast<std::size_t>(c.d_model);
        handle_.vocab_size = static_cast<std::size_t>(c.vocab_size);
        const auto marker = tokenizer_.encode(handle_.mask_marker, false);
        if (marker.size() != 1)
            throw DataError("mask marker " + handle_.mask_marker + " does not tokenize to exactly one token");
        mask_id_ = marker[0];
        const auto eos = tokenizer_.eos_id();
        if (!eos)
            throw DataError("tokenizer has no </s> token");
        eos_id_ = *eos;
        for (int i = 1; i < 100; ++i) {
            auto id = tokenizer_.token_id("<extra_id_" + std::to_string(i) + ">");
            if (!id)
                break;
            sentinels_.push_back(*id);
        }
        if (handle_.max_len < 4)
            throw ConfigError("backend.max_len must be at least 4");
    }

    void check_tokens(const TokenSequence& tokens) const
    {
        if (std::count(tokens.ids.begin(), tokens.ids.end(), mask_id_) != 1)
            throw DataError("token sequence must contain the mask sentinel exactly once");
        for (int id : tokens.ids)
            if (id < 0 || id >= model_.config().vocab_size)
                throw DataError("token id " + std::to_string(id) + " outside the vocabulary");
    }

    Model model_;
    Tokenizer tokenizer_;
    BackendHandle handle_;
    std::filesystem::path dir_;
    int mask_id_ = -1;
    int eos_id_ = -1;
    std::vector<int> sentinels_;
};

using Backend = BasicBackend<float>;

} // namespace ipck
