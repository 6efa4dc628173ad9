#pragma once

#include "ipck/backend.hpp"
#include "ipck/corpus.hpp"
#include "ipck/loss.hpp"
#include "ipck/prompting.hpp"
#include "ipck/verbalizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ipck {

struct TrainConfig {
    double lr = 1e-5;
    std::size_t batch_size = 64;
    std::string optimizer = "adamw";
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t patience_epochs = 10;
    std::size_t max_epochs = 100;
    std::uint64_t seed = 1;
    TuneMode tune_mode = TuneMode::prompt_only;
    double aux_lm_weight = 0.0;

    /// Throws ConfigError naming the offending `train.*` field.
    void validate() const;
    nlohmann::ordered_json to_json() const;
    /// Missing keys keep their defaults; unknown keys are an error.
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainState {
    std::size_t epoch = 0;
    double best_val_acc = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_since_improve = 0;
    std::filesystem::path checkpoint_path;
    bool stopped_early = false;
    bool diverged = false;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0; ///< mean total loss over the epoch's examples
    double ce_loss = 0;
    double lm_loss = 0;
    double val_acc = 0;
    bool improved = false;

    nlohmann::ordered_json to_json() const;
};

/// Patience counter on validation accuracy; only a strict improvement resets it.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Record one epoch's accuracy; true when it is a new best.
    bool observe(double val_acc)
    {
        ++epoch_;
        if (!seen_ || val_acc > best_) {
            seen_ = true;
            best_ = val_acc;
            best_epoch_ = epoch_;
            since_ = 0;
            return true;
        }
        ++since_;
        return false;
    }
    bool should_stop() const { return seen_ && since_ >= patience_; }
    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }
    std::size_t epochs_since_improve() const { return since_; }
    std::size_t epoch() const { return epoch_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t since_ = 0;
    double best_ = 0.0;
    bool seen_ = false;
};

/// torch.optim.AdamW update rule, with decoupled weight decay.
template <typename Scalar>
class AdamW {
public:
    explicit AdamW(const TrainConfig& c) : cfg_(c) {}

    void step(const std::vector<ad::Parameter<Scalar>*>& params);
    std::size_t steps() const { return t_; }

private:
    struct Moments {
        ad::Mat<Scalar> m, v;
    };
    TrainConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::pair<const ad::Parameter<Scalar>*, Moments>> state_;
};

enum class VerbalizerKind { manual, knowledgeable };
std::string to_string(VerbalizerKind k);
VerbalizerKind parse_verbalizer_kind(std::string_view s);

/// The trainable classification layer on top of the mask-position state h.
///
/// knowledgeable: logits = W h with W the N x D prototype matrix.
/// manual: one output vector per single-token label word; a class's logit is
/// the log of the mean exp(u_j · h) over its words, so softmax over classes is
/// the mean-then-normalize rule applied to the model's word probabilities
/// (the vocabulary normalizer cancels). The vectors start as the model's own
/// output rows and are what prompt-only training tunes.
template <typename Scalar>
class VerbalizerHead {
public:
    static VerbalizerHead prototype(const PrototypeVerbalizer<Scalar>& v);
    static VerbalizerHead manual(const ManualVerbalizer& v, const BasicBackend<Scalar>& backend);

    VerbalizerKind kind() const { return kind_; }
    const std::vector<std::string>& classes() const { return classes_; }
    std::size_t num_classes() const { return classes_.size(); }
    Eigen::Index dim() const { return weights_.value.cols(); }

    /// Row labels of the weight matrix: class names, or label words for the manual head.
    const std::vector<std::string>& row_labels() const { return rows_; }
    const std::vector<std::vector<int>>& groups() const { return groups_; }
    const std::vector<CandidateSet>& sources() const { return sources_; }

    ad::Parameter<Scalar>& weights() { return weights_; }
    const ad::Parameter<Scalar>& weights() const { return weights_; }

    ad::Var logits(ad::Tape<Scalar>& tape, ad::Var h);
    Vector<Scalar> class_logits(const Vector<Scalar>& h) const;
    Vector<Scalar> class_probs(const Vector<Scalar>& h) const { return softmax(class_logits(h)); }

    /// verbalizer.bin/.json (the weight rows) plus head.json (kind, classes, word groups).
    void save(const std::filesystem::path& dir) const;
    static VerbalizerHead load(const std::filesystem::path& dir);

private:
    VerbalizerKind kind_ = VerbalizerKind::knowledgeable;
    std::vector<std::string> classes_;
    std::vector<std::string> rows_;
    std::vector<std::vector<int>> groups_;
    std::vector<CandidateSet> sources_;
    ad::Parameter<Scalar> weights_;
};

/// Mask-position state of one prompt, without recording gradients.
template <typename Scalar>
Vector<Scalar> hidden_state(const BasicBackend<Scalar>& backend, const PromptTemplate& tmpl, std::string_view message,
                            std::string_view id = {});

struct Prediction {
    std::string id;
    std::size_t label = 0;
    std::vector<double> probs;
};

template <typename Scalar>
std::vector<Prediction> predict(const BasicBackend<Scalar>& backend, const VerbalizerHead<Scalar>& head,
                                const PromptTemplate& tmpl, std::span<const CommitExample> examples);

template <typename Scalar>
struct TrainResult {
    VerbalizerHead<Scalar> head; ///< best-epoch weights
    TrainState state;
    std::vector<EpochRecord> history;
};

struct TrainData {
    std::span<const CommitExample> train;
    std::span<const CommitExample> val;
    const LabelSpace* labels = nullptr;
};

/// Prompt-tune `head` (and the backbone in full mode) on `data.train`, early
/// stopping on accuracy over `data.val`. The backbone and head are left at the
/// best epoch. Epoch records are appended to `metrics_log` when it is set.
/// A non-finite loss stops training with `state.diverged` set and the best
/// weights restored. With an empty training set or max_epochs 0 nothing is
/// tuned (the zero-shot configuration).
template <typename Scalar>
TrainResult<Scalar> train(BasicBackend<Scalar>& backend, VerbalizerHead<Scalar> head, const PromptTemplate& tmpl,
                          const TrainData& data, const TrainConfig& config,
                          const std::optional<std::filesystem::path>& metrics_log = std::nullopt);

} // namespace ipck
