#include "ipck/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace ipck {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const
{
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("train." + field + ": " + why); };
    if (!(lr > 0) || !std::isfinite(lr))
        fail("lr", "must be a positive number");
    if (batch_size < 1)
        fail("batch_size", "must be at least 1");
    if (patience_epochs < 1)
        fail("patience_epochs", "must be at least 1");
    if (optimizer != "adamw")
        fail("optimizer", "only 'adamw' is supported");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        fail("betas", "each beta must lie in [0, 1)");
    if (!(adam_eps > 0))
        fail("eps", "must be positive");
    if (!(weight_decay >= 0))
        fail("weight_decay", "must be non-negative");
    if (!(aux_lm_weight >= 0) || !std::isfinite(aux_lm_weight))
        fail("aux_lm_weight", "must be a finite number >= 0");
}

nlohmann::ordered_json TrainConfig::to_json() const
{
    nlohmann::ordered_json j;
    j["lr"] = lr;
    j["batch_size"] = batch_size;
    j["optimizer"] = optimizer;
    j["betas"] = {beta1, beta2};
    j["eps"] = adam_eps;
    j["weight_decay"] = weight_decay;
    j["patience_epochs"] = patience_epochs;
    j["max_epochs"] = max_epochs;
    j["seed"] = seed;
    j["tune_mode"] = to_string(tune_mode);
    j["aux_lm_weight"] = aux_lm_weight;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    if (!j.is_object())
        throw ConfigError("train: expected an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "lr")
                c.lr = value.get<double>();
            else if (key == "batch_size")
                c.batch_size = value.get<std::size_t>();
            else if (key == "optimizer")
                c.optimizer = value.get<std::string>();
            else if (key == "betas") {
                const auto b = value.get<std::vector<double>>();
                if (b.size() != 2)
                    throw ConfigError("train.betas: expected two numbers");
                c.beta1 = b[0];
                c.beta2 = b[1];
            } else if (key == "eps")
                c.adam_eps = value.get<double>();
            else if (key == "weight_decay")
                c.weight_decay = value.get<double>();
            else if (key == "patience_epochs")
                c.patience_epochs = value.get<std::size_t>();
            else if (key == "max_epochs")
                c.max_epochs = value.get<std::size_t>();
            else if (key == "seed")
                c.seed = value.get<std::uint64_t>();
            else if (key == "tune_mode")
                c.tune_mode = parse_tune_mode(value.get<std::string>());
            else if (key == "aux_lm_weight")
                c.aux_lm_weight = value.get<double>();
            else
                throw ConfigError("train." + key + ": unknown field");
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("train." + key + ": wrong type");
        }
    }
    return c;
}

nlohmann::ordered_json EpochRecord::to_json() const
{
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["train_loss"] = train_loss;
    j["ce_loss"] = ce_loss;
    j["lm_loss"] = lm_loss;
    j["val_acc"] = val_acc;
    j["improved"] = improved;
    return j;
}

std::string to_string(VerbalizerKind k) { return k == VerbalizerKind::manual ? "manual" : "knowledgeable"; }

VerbalizerKind parse_verbalizer_kind(std::string_view s)
{
    if (s == "manual")
        return VerbalizerKind::manual;
    if (s == "knowledgeable")
        return VerbalizerKind::knowledgeable;
    throw ConfigError("verbalizer.kind must be 'manual' or 'knowledgeable', got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- optimizer

template <typename Scalar>
void AdamW<Scalar>::step(const std::vector<ad::Parameter<Scalar>*>& params)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto step_size = static_cast<Scalar>(cfg_.lr / bc1);
    const auto bc2_sqrt = static_cast<Scalar>(std::sqrt(bc2));
    const auto b1 = static_cast<Scalar>(cfg_.beta1);
    const auto b2 = static_cast<Scalar>(cfg_.beta2);
    const auto eps = static_cast<Scalar>(cfg_.adam_eps);
    const auto decay = static_cast<Scalar>(1.0 - cfg_.lr * cfg_.weight_decay);
    for (auto* p : params) {
        if (p->grad.size() == 0)
            continue;
        auto it = std::find_if(state_.begin(), state_.end(), [p](const auto& s) { return s.first == p; });
        if (it == state_.end()) {
            state_.push_back({p, {ad::Mat<Scalar>::Zero(p->value.rows(), p->value.cols()),
                                  ad::Mat<Scalar>::Zero(p->value.rows(), p->value.cols())}});
            it = std::prev(state_.end());
        }
        auto& [m, v] = it->second;
        if (cfg_.weight_decay != 0)
            p->value *= decay;
        m += (Scalar(1) - b1) * (p->grad - m);
        v = b2 * v + (Scalar(1) - b2) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= step_size * m.array() / (v.array().sqrt() / bc2_sqrt + eps);
    }
}

// ---------------------------------------------------------------- head

template <typename Scalar>
VerbalizerHead<Scalar> VerbalizerHead<Scalar>::prototype(const PrototypeVerbalizer<Scalar>& v)
{
    VerbalizerHead h;
    h.kind_ = VerbalizerKind::knowledgeable;
    h.classes_ = v.classes;
    h.rows_ = v.classes;
    h.sources_ = v.sources;
    h.weights_.name = "verbalizer.prototypes";
    h.weights_.value = v.prototypes;
    if (!h.weights_.value.allFinite())
        throw DataError("prototype matrix contains NaN or Inf");
    return h;
}

template <typename Scalar>
VerbalizerHead<Scalar> VerbalizerHead<Scalar>::manual(const ManualVerbalizer& v, const BasicBackend<Scalar>& backend)
{
    VerbalizerHead h;
    h.kind_ = VerbalizerKind::manual;
    h.classes_ = v.classes;
    std::vector<int> ids;
    for (std::size_t c = 0; c < v.num_classes(); ++c) {
        std::vector<int> group;
        for (const auto& word : v.label_words[c]) {
            const auto id = backend.single_token_id(word);
            if (!id) {
                warn("label word '" + word + "' is not a single vocabulary token; excluded");
                continue;
            }
            group.push_back(static_cast<int>(ids.size()));
            ids.push_back(*id);
            h.rows_.push_back(word);
        }
        if (group.empty())
            throw DataError("verbalizer words absent from vocabulary (class '" + v.classes[c] + "')");
        h.groups_.push_back(std::move(group));
    }
    h.weights_.name = "verbalizer.label_words";
    h.weights_.value = backend.output_rows(ids);
    return h;
}

template <typename Scalar>
ad::Var VerbalizerHead<Scalar>::logits(ad::Tape<Scalar>& tape, ad::Var h)
{
    ad::Var scores = tape.linear(h, weights_);
    if (kind_ == VerbalizerKind::manual)
        return tape.group_log_mean_exp(scores, groups_);
    return scores;
}

template <typename Scalar>
Vector<Scalar> VerbalizerHead<Scalar>::class_logits(const Vector<Scalar>& h) const
{
    Vector<Scalar> scores = prototype_logits(weights_.value, h);
    if (kind_ == VerbalizerKind::knowledgeable)
        return scores;
    Vector<Scalar> out(static_cast<Eigen::Index>(groups_.size()));
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        Scalar top = -std::numeric_limits<Scalar>::infinity();
        for (int j : groups_[g])
            top = std::max(top, scores(j));
        Scalar sum = 0;
        for (int j : groups_[g])
            sum += std::exp(scores(j) - top);
        out(static_cast<Eigen::Index>(g)) = top + std::log(sum / static_cast<Scalar>(groups_[g].size()));
    }
    return out;
}

template <typename Scalar>
void VerbalizerHead<Scalar>::save(const std::filesystem::path& dir) const
{
    PrototypeVerbalizer<double> rows;
    rows.classes = rows_;
    rows.prototypes = weights_.value.template cast<double>();
    rows.sources = sources_;
    rows.trainable = true;
    save_prototype(dir / "prototypes", rows);
    nlohmann::ordered_json j;
    j["kind"] = to_string(kind_);
    j["classes"] = classes_;
    if (kind_ == VerbalizerKind::manual) {
        ManualVerbalizer m;
        m.classes = classes_;
        for (const auto& g : groups_) {
            m.label_words.emplace_back();
            for (int r : g)
                m.label_words.back().push_back(rows_[static_cast<std::size_t>(r)]);
        }
        j["groups"] = groups_;
        save_manual(dir / "verbalizer.json", m);
    }
    std::ofstream out(dir / "head.json");
    if (!out)
        throw RuntimeError("cannot write " + (dir / "head.json").string());
    out << j.dump(2) << '\n';
}

template <typename Scalar>
VerbalizerHead<Scalar> VerbalizerHead<Scalar>::load(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "head.json");
    if (!in)
        throw DataError("checkpoint " + dir.string() + " has no head.json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "head.json").string() + ": " + e.what());
    }
    const auto rows = load_prototype(dir / "prototypes");
    VerbalizerHead h;
    h.kind_ = parse_verbalizer_kind(j.at("kind").get<std::string>());
    h.classes_ = j.at("classes").get<std::vector<std::string>>();
    h.rows_ = rows.classes;
    h.sources_ = rows.sources;
    h.weights_.name = h.kind_ == VerbalizerKind::manual ? "verbalizer.label_words" : "verbalizer.prototypes";
    h.weights_.value = rows.prototypes.template cast<Scalar>();
    if (h.kind_ == VerbalizerKind::manual) {
        h.groups_ = j.at("groups").get<std::vector<std::vector<int>>>();
        if (h.groups_.size() != h.classes_.size())
            throw DataError("head.json: one word group per class required");
        for (const auto& g : h.groups_)
            for (int r : g)
                if (r < 0 || r >= h.weights_.value.rows())
                    throw DataError("head.json: word group index out of range");
    } else if (h.rows_ != h.classes_) {
        throw DataError("head.json classes do not match the prototype rows");
    }
    return h;
}

// ---------------------------------------------------------------- inference

template <typename Scalar>
Vector<Scalar> hidden_state(const BasicBackend<Scalar>& backend, const PromptTemplate& tmpl, std::string_view message,
                            std::string_view id)
{
    const auto seq = backend.encode(render(tmpl, message, backend.handle().mask_marker, id));
    ad::Tape<Scalar> tape(false);
    return tape.value(backend.forward_hidden(tape, seq)).row(0).transpose();
}

template <typename Scalar>
std::vector<Prediction> predict(const BasicBackend<Scalar>& backend, const VerbalizerHead<Scalar>& head,
                                const PromptTemplate& tmpl, std::span<const CommitExample> examples)
{
    std::vector<Prediction> out;
    out.reserve(examples.size());
    for (const auto& x : examples) {
        const Vector<Scalar> p = head.class_probs(hidden_state(backend, tmpl, x.message, x.id));
        Prediction pr;
        pr.id = x.id;
        pr.label = argmax(p);
        pr.probs.assign(p.data(), p.data() + p.size());
        out.push_back(std::move(pr));
    }
    return out;
}

// ---------------------------------------------------------------- training

namespace {

template <typename Scalar>
struct Snapshot {
    ad::Mat<Scalar> head;
    std::vector<ad::Mat<Scalar>> backbone;
};

} // namespace

template <typename Scalar>
TrainResult<Scalar> train(BasicBackend<Scalar>& backend, VerbalizerHead<Scalar> head, const PromptTemplate& tmpl,
                          const TrainData& data, const TrainConfig& config,
                          const std::optional<std::filesystem::path>& metrics_log)
{
    config.validate();
    if (static_cast<std::size_t>(head.dim()) != backend.handle().embed_dim)
        throw RuntimeError("verbalizer dimension " + std::to_string(head.dim()) + " does not match backend D " +
                           std::to_string(backend.handle().embed_dim));
    if (!data.labels)
        throw RuntimeError("train: label space missing");
    if (head.classes() != data.labels->classes())
        throw RuntimeError("verbalizer classes do not match the label space");

    TrainResult<Scalar> res{std::move(head), {}, {}};
    auto& h = res.head;
    if (metrics_log) {
        res.state.checkpoint_path = metrics_log->parent_path();
        std::ofstream truncate(*metrics_log);
    }
    if (data.train.empty() || config.max_epochs == 0)
        return res;
    if (data.val.empty())
        throw DataError("validation split is empty");

    const bool full = config.tune_mode == TuneMode::full;
    auto& model = backend.model();
    model.set_requires_grad(full);
    h.weights().requires_grad = true;

    auto encode_all = [&](std::span<const CommitExample> xs, std::vector<TokenSequence>& seqs, std::vector<int>& ys) {
        for (const auto& x : xs) {
            seqs.push_back(backend.encode(render(tmpl, x.message, backend.handle().mask_marker, x.id)));
            ys.push_back(static_cast<int>(data.labels->index_of(x.label)));
        }
    };
    std::vector<TokenSequence> train_seq, val_seq;
    std::vector<int> train_y, val_y;
    encode_all(data.train, train_seq, train_y);
    encode_all(data.val, val_seq, val_y);

    // A frozen backbone maps each prompt to a fixed h; compute it once.
    auto frozen_h = [&](const std::vector<TokenSequence>& seqs) {
        std::vector<Vector<Scalar>> out;
        for (const auto& s : seqs) {
            ad::Tape<Scalar> tape(false);
            out.push_back(tape.value(backend.forward_hidden(tape, s)).row(0).transpose());
        }
        return out;
    };
    std::vector<Vector<Scalar>> train_h, val_h;
    if (!full) {
        train_h = frozen_h(train_seq);
        val_h = frozen_h(val_seq);
    }

    std::vector<ad::Parameter<Scalar>*> params{&h.weights()};
    if (full)
        for (const auto& p : model.parameters())
            params.push_back(p.get());

    auto take_snapshot = [&] {
        Snapshot<Scalar> s{h.weights().value, {}};
        if (full)
            for (const auto& p : model.parameters())
                s.backbone.push_back(p->value);
        return s;
    };
    auto restore = [&](const Snapshot<Scalar>& s) {
        h.weights().value = s.head;
        if (full)
            for (std::size_t i = 0; i < s.backbone.size(); ++i)
                model.parameters()[i]->value = s.backbone[i];
    };

    auto val_accuracy = [&] {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < val_seq.size(); ++i) {
            Vector<Scalar> hv;
            if (full) {
                ad::Tape<Scalar> tape(false);
                hv = tape.value(backend.forward_hidden(tape, val_seq[i])).row(0).transpose();
            } else {
                hv = val_h[i];
            }
            if (static_cast<int>(argmax(h.class_logits(hv))) == val_y[i])
                ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(val_seq.size());
    };

    AdamW<Scalar> opt(config);
    EarlyStopping stopper(config.patience_epochs);
    Snapshot<Scalar> best = take_snapshot();
    const auto lambda = static_cast<Scalar>(config.aux_lm_weight);
    const auto floor = static_cast<Scalar>(probability_floor);

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_seq.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(config.seed, epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        Rng noise_rng(derive_seed(config.seed ^ 0x5eed5eedULL, epoch));

        double sum_ce = 0, sum_lm = 0;
        bool diverged = false;
        for (std::size_t start = 0; start < order.size() && !diverged; start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            for (auto* p : params)
                p->zero_grad();
            const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(end - start));
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                ad::Tape<Scalar> tape(true);
                ad::Var hv = full ? backend.forward_hidden(tape, train_seq[i])
                                  : tape.constant(ad::Mat<Scalar>(train_h[i].transpose()));
                const int target[1] = {train_y[i]};
                ad::Var ce = tape.cross_entropy(h.logits(tape, hv), target, floor);
                ad::Var loss = ce;
                double lm = 0;
                if (config.aux_lm_weight > 0) {
                    ad::Var lmv = backend.denoising_loss(tape, train_seq[i], noise_rng);
                    lm = static_cast<double>(tape.value(lmv)(0, 0));
                    loss = tape.add(ce, tape.scale(lmv, lambda));
                }
                const double ce_value = static_cast<double>(tape.value(ce)(0, 0));
                if (!std::isfinite(ce_value) || !std::isfinite(lm)) {
                    diverged = true;
                    break;
                }
                sum_ce += ce_value;
                sum_lm += lm;
                tape.backward(tape.scale(loss, inv));
            }
            if (diverged)
                break;
            opt.step(params);
            for (auto* p : params)
                if (!p->value.allFinite())
                    diverged = true;
        }
        if (diverged) {
            warn("training diverged at epoch " + std::to_string(epoch) + "; keeping the best checkpoint");
            res.state.diverged = true;
            res.state.epoch = epoch;
            break;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.ce_loss = sum_ce / static_cast<double>(order.size());
        rec.lm_loss = sum_lm / static_cast<double>(order.size());
        rec.train_loss = rec.ce_loss + config.aux_lm_weight * rec.lm_loss;
        rec.val_acc = val_accuracy();
        rec.improved = stopper.observe(rec.val_acc);
        if (rec.improved)
            best = take_snapshot();
        res.history.push_back(rec);
        if (metrics_log) {
            std::ofstream log(*metrics_log, std::ios::app);
            log << rec.to_json().dump() << '\n';
        }
        res.state.epoch = epoch;
        if (stopper.should_stop()) {
            res.state.stopped_early = true;
            break;
        }
    }

    restore(best);
    for (auto* p : params)
        p->zero_grad();
    model.set_requires_grad(false);
    h.weights().requires_grad = false;
    res.state.best_val_acc = stopper.best();
    res.state.best_epoch = stopper.best_epoch();
    res.state.epochs_since_improve = stopper.epochs_since_improve();
    return res;
}

#define IPCK_INSTANTIATE(S)                                                                                           \
    template class AdamW<S>;                                                                                          \
    template class VerbalizerHead<S>;                                                                                 \
    template Vector<S> hidden_state(const BasicBackend<S>&, const PromptTemplate&, std::string_view, std::string_view); \
    template std::vector<Prediction> predict(const BasicBackend<S>&, const VerbalizerHead<S>&, const PromptTemplate&,  \
                                             std::span<const CommitExample>);                                         \
    template TrainResult<S> train(BasicBackend<S>&, VerbalizerHead<S>, const PromptTemplate&, const TrainData&,       \
                                  const TrainConfig&, const std::optional<std::filesystem::path>&);

IPCK_INSTANTIATE(float)
IPCK_INSTANTIATE(double)

} // namespace ipck
