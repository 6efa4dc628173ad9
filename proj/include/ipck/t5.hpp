#pragma once

// T5-family encoder-decoder over the autodiff tape. Loads Hugging Face
// checkpoints (config.json + model.safetensors) with the standard tensor names.

#include "ipck/autodiff.hpp"
#include "ipck/error.hpp"
#include "ipck/safetensors.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ipck {

enum class Activation { relu, gelu_tanh, gelu_erf };

struct T5Config {
    int vocab_size = 0;
    int d_model = 0;
    int d_kv = 0;
    int d_ff = 0;
    int num_layers = 0;
    int num_decoder_layers = 0;
    int num_heads = 0;
    int relative_buckets = 32;
    int relative_max_distance = 128;
    double layer_norm_eps = 1e-6;
    bool gated = false;
    Activation activation = Activation::relu;
    bool tie_word_embeddings = true;
    bool scale_decoder_outputs = true; ///< multiply decoder states by d_model^-0.5 before the head
    int decoder_start_token_id = 0;

    static T5Config from_file(const std::filesystem::path& config_json);
};

/// Bucket index of a relative position, matching the reference implementation
/// (including its single-precision logarithm).
int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets, int max_distance);

template <typename Scalar>
class T5Model {
public:
    using Param = ad::Parameter<Scalar>;
    using Tape = ad::Tape<Scalar>;
    using Var = ad::Var;

    static T5Model load(const std::filesystem::path& dir)
    {
        T5Model m;
        m.config_ = T5Config::from_file(dir / "config.json");
        SafeTensorsFile file(dir / "model.safetensors");
        m.build(file.contains("lm_head.weight"));
        for (auto& p : m.params_) {
            std::string source = p->name;
            if (!file.contains(source) && source == "shared.weight" && file.contains("encoder.embed_tokens.weight"))
                source = "encoder.embed_tokens.weight";
            auto value = file.matrix<Scalar>(source);
            if (value.rows() != p->value.rows() || value.cols() != p->value.cols())
                throw DataError(dir.string() + ": tensor " + source + " has shape " + std::to_string(value.rows()) +
                                "x" + std::to_string(value.cols()) + ", expected " +
                                std::to_string(p->value.rows()) + "x" + std::to_string(p->value.cols()));
            p->value = std::move(value);
        }
        return m;
    }

    T5Model(T5Model&&) noexcept = default;
    T5Model& operator=(T5Model&&) noexcept = default;

    const T5Config& config() const { return config_; }
    Param& shared() { return *shared_; }
    const Param& shared() const { return *shared_; }

    const std::vector<std::unique_ptr<Param>>& parameters() const { return params_; }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_)
            n += static_cast<std::size_t>(p->value.size());
        return n;
    }

    void set_requires_grad(bool on)
    {
        for (auto& p : params_)
            p->requires_grad = on;
    }

    void zero_grad()
    {
        for (auto& p : params_)
            p->zero_grad();
    }

    /// Final-normed encoder states, one row per input token.
    Var encode(Tape& tape, std::span<const int> ids) const
    {
        const int n = static_cast<int>(ids.size());
        ad::RelativeBias<Scalar> bias{encoder_bias_, bucket_matrix(n, n, true)};
        Var x = tape.embed(*shared_, ids);
        for (const auto& b : encoder_) {
            Var h = tape.rms_norm(x, *b.self_norm, eps());
            x = tape.add(x, self_attention(tape, b, h, bias, false));
            x = tape.add(x, feed_forward(tape, b, tape.rms_norm(x, *b.ff_norm, eps())));
        }
        return tape.rms_norm(x, *encoder_norm_, eps());
    }

    /// Final-normed decoder states for `decoder_ids` attending to `memory`.
    Var decode(Tape& tape, Var memory, std::span<const int> decoder_ids) const
    {
        const int n = static_cast<int>(decoder_ids.size());
        ad::RelativeBias<Scalar> bias{decoder_bias_, bucket_matrix(n, n, false)};
        Var x = tape.embed(*shared_, decoder_ids);
        for (const auto& b : decoder_) {
            Var h = tape.rms_norm(x, *b.self_norm, eps());
            x = tape.add(x, self_attention(tape, b, h, bias, true));
            h = tape.rms_norm(x, *b.cross_norm, eps());
            Var q = tape.linear(h, *b.cq);
            Var k = tape.linear(memory, *b.ck);
            Var v = tape.linear(memory, *b.cv);
            x = tape.add(x, tape.linear(tape.attention(q, k, v, config_.num_heads, nullptr, false), *b.co));
            x = tape.add(x, feed_forward(tape, b, tape.rms_norm(x, *b.ff_norm, eps())));
        }
        return tape.rms_norm(x, *decoder_norm_, eps());
    }

    /// Vocabulary logits for decoder states (rows).
    Var lm_logits(Tape& tape, Var hidden) const
    {
        if (config_.scale_decoder_outputs)
            hidden = tape.scale(hidden, output_scale());
        return tape.linear(hidden, head());
    }

    /// Output projection: a separate lm_head when the checkpoint has one, else the shared table.
    Param& head() const { return lm_head_ ? *lm_head_ : *shared_; }

    Scalar output_scale() const
    {
        return config_.scale_decoder_outputs ? static_cast<Scalar>(1.0 / std::sqrt(config_.d_model)) : Scalar(1);
    }

    /// Mean token cross-entropy of `labels` given `input_ids` (teacher forcing, labels shifted right).
    Var seq2seq_loss(Tape& tape, std::span<const int> input_ids, std::span<const int> labels) const
    {
        std::vector<int> dec{config_.decoder_start_token_id};
        dec.insert(dec.end(), labels.begin(), labels.end() - 1);
        Var memory = encode(tape, input_ids);
        return tape.cross_entropy(lm_logits(tape, decode(tape, memory, dec)), labels);
    }

    Param* find(const std::string& name) const
    {
        for (const auto& p : params_)
            if (p->name == name)
                return p.get();
        return nullptr;
    }

    void save(const std::filesystem::path& path) const
    {
        std::vector<TensorToWrite> out;
        for (const auto& p : params_) {
            TensorToWrite t;
            t.name = p->name;
            if (p->value.rows() == 1 && p->name.find("layer_norm") != std::string::npos)
                t.shape = {p->value.cols()};
            else
                t.shape = {p->value.rows(), p->value.cols()};
            t.values.resize(static_cast<std::size_t>(p->value.size()));
            for (Eigen::Index i = 0; i < p->value.size(); ++i)
                t.values[static_cast<std::size_t>(i)] = static_cast<float>(p->value.data()[i]);
            out.push_back(std::move(t));
        }
        write_safetensors(path, std::move(out), {{"format", "pt"}});
    }

private:
    struct Block {
        Param* self_norm = nullptr;
        Param *q = nullptr, *k = nullptr, *v = nullptr, *o = nullptr;
        Param* cross_norm = nullptr;
        Param *cq = nullptr, *ck = nullptr, *cv = nullptr, *co = nullptr;
        Param* ff_norm = nullptr;
        Param *wi = nullptr, *wi1 = nullptr, *wo = nullptr;
    };

    T5Model() = default;

    Scalar eps() const { return static_cast<Scalar>(config_.layer_norm_eps); }

    Param* add(std::string name, Eigen::Index rows, Eigen::Index cols)
    {
        auto p = std::make_unique<Param>();
        p->name = std::move(name);
        p->value = ad::Mat<Scalar>::Zero(rows, cols);
        params_.push_back(std::move(p));
        return params_.back().get();
    }

    void build(bool separate_head)
    {
        const auto& c = config_;
        if (c.d_model <= 0 || c.num_heads <= 0 || c.d_kv <= 0 || c.vocab_size <= 0)
            throw DataError("config.json: missing model dimensions");
        const Eigen::Index inner = static_cast<Eigen::Index>(c.num_heads) * c.d_kv;
        shared_ = add("shared.weight", c.vocab_size, c.d_model);
        auto make_stack = [&](const std::string& prefix, int layers, bool decoder, std::vector<Block>& blocks) {
            for (int i = 0; i < layers; ++i) {
                const std::string b = prefix + ".block." + std::to_string(i) + ".layer.";
                Block blk;
                blk.self_norm = add(b + "0.layer_norm.weight", 1, c.d_model);
                blk.q = add(b + "0.SelfAttention.q.weight", inner, c.d_model);
                blk.k = add(b + "0.SelfAttention.k.weight", inner, c.d_model);
                blk.v = add(b + "0.SelfAttention.v.weight", inner, c.d_model);
                blk.o = add(b + "0.SelfAttention.o.weight", c.d_model, inner);
                if (i == 0) {
                    Param* bias = add(b + "0.SelfAttention.relative_attention_bias.weight", c.relative_buckets,
                                      c.num_heads);
                    (decoder ? decoder_bias_ : encoder_bias_) = bias;
                }
                int ff = 1;
                if (decoder) {
                    blk.cross_norm = add(b + "1.layer_norm.weight", 1, c.d_model);
                    blk.cq = add(b + "1.EncDecAttention.q.weight", inner, c.d_model);
                    blk.ck = add(b + "1.EncDecAttention.k.weight", inner, c.d_model);
                    blk.cv = add(b + "1.EncDecAttention.v.weight", inner, c.d_model);
                    blk.co = add(b + "1.EncDecAttention.o.weight", c.d_model, inner);
                    ff = 2;
                }
                const std::string f = b + std::to_string(ff) + ".";
                blk.ff_norm = add(f + "layer_norm.weight", 1, c.d_model);
                if (c.gated) {
                    blk.wi = add(f + "DenseReluDense.wi_0.weight", c.d_ff, c.d_model);
                    blk.wi1 = add(f + "DenseReluDense.wi_1.weight", c.d_ff, c.d_model);
                } else {
                    blk.wi = add(f + "DenseReluDense.wi.weight", c.d_ff, c.d_model);
                }
                blk.wo = add(f + "DenseReluDense.wo.weight", c.d_model, c.d_ff);
                blocks.push_back(blk);
            }
            return add(prefix + ".final_layer_norm.weight", 1, c.d_model);
        };
        encoder_norm_ = make_stack("encoder", c.num_layers, false, encoder_);
        decoder_norm_ = make_stack("decoder", c.num_decoder_layers, true, decoder_);
        if (separate_head)
            lm_head_ = add("lm_head.weight", c.vocab_size, c.d_model);
    }

    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> bucket_matrix(int queries, int keys,
                                                                                     bool bidirectional) const
    {
        Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(queries, keys);
        for (int i = 0; i < queries; ++i)
            for (int j = 0; j < keys; ++j)
                m(i, j) = relative_position_bucket(j - i, bidirectional, config_.relative_buckets,
                                                   config_.relative_max_distance);
        return m;
    }

    Var self_attention(Tape& tape, const Block& b, Var h, const ad::RelativeBias<Scalar>& bias, bool causal) const
    {
        Var q = tape.linear(h, *b.q);
        Var k = tape.linear(h, *b.k);
        Var v = tape.linear(h, *b.v);
        return tape.linear(tape.attention(q, k, v, config_.num_heads, &bias, causal), *b.o);
    }

    Var activate(Tape& tape, Var x) const
    {
        switch (config_.activation) {
        case Activation::relu:
            return tape.relu(x);
        case Activation::gelu_tanh:
            return tape.gelu_tanh(x);
        case Activation::gelu_erf:
            return tape.gelu_erf(x);
        }
        return x;
    }

    Var feed_forward(Tape& tape, const Block& b, Var h) const
    {
        Var inner = activate(tape, tape.linear(h, *b.wi));
        if (b.wi1)
            inner = tape.mul(inner, tape.linear(h, *b.wi1));
        return tape.linear(inner, *b.wo);
    }

    T5Config config_;
    std::vector<std::unique_ptr<Param>> params_;
    Param* shared_ = nullptr;
    Param* lm_head_ = nullptr;
    Param* encoder_bias_ = nullptr;
    Param* decoder_bias_ = nullptr;
    Param* encoder_norm_ = nullptr;
    Param* decoder_norm_ = nullptr;
    std::vector<Block> encoder_;
    std::vector<Block> decoder_;
};

} // namespace ipck
