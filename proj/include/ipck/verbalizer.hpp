#pragma once

#include "ipck/corpus.hpp"
#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"
#include "ipck/knowledge.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ipck {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Class -> label words (V_y), classes in LabelSpace order.
struct ManualVerbalizer {
    std::vector<std::string> classes;
    std::vector<std::vector<std::string>> label_words;

    std::size_t num_classes() const { return classes.size(); }
};

/// Validate a class -> words mapping against the label space.
/// Errors: a class without words, an unknown class, or a word shared by two classes.
ManualVerbalizer build_manual(const LabelSpace& labels, const std::map<std::string, std::vector<std::string>>& mapping);

/// One prototype row per class; row y is w_y. The initial rows are W⁽⁰⁾.
template <typename Scalar>
struct PrototypeVerbalizer {
    std::vector<std::string> classes;
    Matrix<Scalar> prototypes; ///< N x D
    std::vector<CandidateSet> sources;
    bool trainable = true;

    Eigen::Index dim() const { return prototypes.cols(); }
    std::size_t num_classes() const { return classes.size(); }

    template <typename Other>
    PrototypeVerbalizer<Other> cast() const
    {
        return {classes, prototypes.template cast<Other>(), sources, trainable};
    }
};

/// Average the embeddings of each class's candidate words into one prototype row.
///
/// `embed(word)` returns std::optional<Vector<Scalar>>; words it cannot embed
/// are skipped with a warning. A class left with no embeddable word is an error.
template <typename Scalar, typename Embedder>
PrototypeVerbalizer<Scalar> build_prototype(std::span<const CandidateSet> candidates, Embedder&& embed)
{
    PrototypeVerbalizer<Scalar> v;
    Eigen::Index dim = -1;
    std::vector<Vector<Scalar>> rows;
    for (const auto& set : candidates) {
        Vector<Scalar> sum;
        std::size_t used = 0;
        for (const auto& cand : set.candidates) {
            std::optional<Vector<Scalar>> e = embed(cand.word);
            if (!e) {
                warn("candidate word '" + cand.word + "' of class '" + set.class_name + "' has no embedding; skipped");
                continue;
            }
            if (dim < 0)
                dim = e->size();
            if (e->size() != dim)
                throw RuntimeError("embedder returned inconsistent dimensions");
            if (used == 0)
                sum = *e;
            else
                sum += *e;
            ++used;
        }
        if (used == 0)
            throw DataError("class '" + set.class_name + "' has no embeddable candidate words");
        rows.push_back(sum / static_cast<Scalar>(used));
        v.classes.push_back(set.class_name);
        v.sources.push_back(set);
    }
    v.prototypes.resize(static_cast<Eigen::Index>(rows.size()), dim < 0 ? 0 : dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
        v.prototypes.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return v;
}

/// Numerically shifted softmax.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits)
{
    using Scalar = typename Derived::Scalar;
    const Scalar top = logits.maxCoeff();
    Vector<Scalar> p = (logits.array() - top).exp().matrix();
    return p / p.sum();
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
std::size_t argmax(const Eigen::MatrixBase<Derived>& values)
{
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < values.size(); ++i)
        if (values(i) > values(best))
            best = i;
    return static_cast<std::size_t>(best);
}

/// w_y · h for every class.
template <typename DerivedW, typename DerivedH>
Vector<typename DerivedW::Scalar> prototype_logits(const Eigen::MatrixBase<DerivedW>& prototypes,
                                                   const Eigen::MatrixBase<DerivedH>& h)
{
    if (prototypes.cols() != h.size())
        throw RuntimeError("hidden vector has dimension " + std::to_string(h.size()) + ", prototypes expect " +
                           std::to_string(prototypes.cols()));
    if (!h.allFinite())
        throw RuntimeError("hidden vector contains NaN or Inf");
    return prototypes * h;
}

/// P(y | x) = exp(w_y · h) / Σ_w exp(w · h).
template <typename DerivedW, typename DerivedH>
Vector<typename DerivedW::Scalar> prototype_class_probs(const Eigen::MatrixBase<DerivedW>& prototypes,
                                                        const Eigen::MatrixBase<DerivedH>& h)
{
    return softmax(prototype_logits(prototypes, h));
}

template <typename Scalar, typename DerivedH>
Vector<Scalar> prototype_class_probs(const PrototypeVerbalizer<Scalar>& v, const Eigen::MatrixBase<DerivedH>& h)
{
    return prototype_class_probs(v.prototypes, h);
}

/// Class distribution from mask-position word probabilities: the mean
/// probability of each class's label words, renormalized across classes.
/// Words missing from `word_probs` count as 0 and raise a warning.
template <typename Scalar>
Vector<Scalar> manual_class_probs(const std::map<std::string, Scalar>& word_probs, const ManualVerbalizer& v)
{
    Vector<Scalar> scores(static_cast<Eigen::Index>(v.num_classes()));
    for (std::size_t c = 0; c < v.num_classes(); ++c) {
        Scalar sum = 0;
        for (const auto& w : v.label_words[c]) {
            auto it = word_probs.find(w);
            if (it == word_probs.end()) {
                warn("label word '" + w + "' has no probability at the mask position; counted as 0");
                continue;
            }
            sum += it->second;
        }
        scores(static_cast<Eigen::Index>(c)) = sum / static_cast<Scalar>(v.label_words[c].size());
    }
    const Scalar total = scores.sum();
    if (!(total > 0))
        throw DataError("verbalizer words absent from vocabulary");
    return scores / total;
}

/// Softmax cross-entropy of the prototype classifier for one example and its
/// gradients with respect to the prototype matrix and the hidden vector.
template <typename Scalar>
struct PrototypeLossGrad {
    Scalar loss = 0;
    Matrix<Scalar> d_prototypes;
    Vector<Scalar> d_hidden;
};

template <typename DerivedW, typename DerivedH>
PrototypeLossGrad<typename DerivedW::Scalar> prototype_loss_grad(const Eigen::MatrixBase<DerivedW>& prototypes,
                                                                 const Eigen::MatrixBase<DerivedH>& h,
                                                                 std::size_t target)
{
    using Scalar = typename DerivedW::Scalar;
    const Vector<Scalar> p = prototype_class_probs(prototypes, h);
    Vector<Scalar> d_logits = p;
    d_logits(static_cast<Eigen::Index>(target)) -= Scalar(1);
    PrototypeLossGrad<Scalar> out;
    out.loss = -std::log(std::max(p(static_cast<Eigen::Index>(target)), Scalar(1e-12)));
    out.d_prototypes = d_logits * h.transpose();
    out.d_hidden = prototypes.transpose() * d_logits;
    return out;
}

// Serialization. Manual: JSON {class: [words]}. Prototype: <stem>.bin holds the
// class-ordered N x D matrix as little-endian float64 rows, <stem>.json the
// sidecar {kind, classes, D, rows, dtype, checksum, trainable, source}.

void save_manual(const std::filesystem::path& path, const ManualVerbalizer& v);
ManualVerbalizer load_manual(const std::filesystem::path& path, const LabelSpace& labels);

void save_prototype(const std::filesystem::path& stem, const PrototypeVerbalizer<double>& v);
PrototypeVerbalizer<double> load_prototype(const std::filesystem::path& stem);

/// "crc32:xxxxxxxx" over the little-endian float64 bytes of the matrix, row by row.
std::string matrix_checksum(const Matrix<double>& m);

} // namespace ipck
