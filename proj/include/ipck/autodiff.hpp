#pragma once

// Reverse-mode differentiation over row-major Eigen matrices.
//
// A Tape records one forward computation. Ops evaluate eagerly; when the tape
// is recording and an input needs a gradient, the op also pushes a backward
// closure. Parameters are referenced, never copied, so a large embedding table
// costs nothing until its gradient is requested.

#include "ipck/error.hpp"
#include "ipck/safetensors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ipck::ad {

template <typename Scalar>
using Mat = RowMatrix<Scalar>;

template <typename Scalar>
struct Parameter {
    std::string name;
    Mat<Scalar> value;
    Mat<Scalar> grad; ///< empty until the first accumulation
    bool requires_grad = false;

    Mat<Scalar>& grad_buffer()
    {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat<Scalar>::Zero(value.rows(), value.cols());
        return grad;
    }
    void zero_grad() { grad.resize(0, 0); }
    Eigen::Index size() const { return value.size(); }
};

struct Var {
    std::size_t index = static_cast<std::size_t>(-1);
};

/// Additive attention bias gathered from a (buckets x heads) table by a
/// (queries x keys) bucket index matrix.
template <typename Scalar>
struct RelativeBias {
    Parameter<Scalar>* table = nullptr;
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> buckets;
};

template <typename Scalar>
class Tape {
public:
    using M = Mat<Scalar>;

    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Var constant(M value) { return push(std::move(value), false); }

    const M& value(Var v) const { return nodes_.at(v.index).value; }
    bool needs_grad(Var v) const { return nodes_.at(v.index).needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Seed d(output)/d(output) = 1 for a 1x1 output and run every recorded closure.
    void backward(Var output)
    {
        if (value(output).size() != 1)
            throw RuntimeError("backward() needs a scalar output");
        if (!nodes_[output.index].needs_grad)
            return;
        grad(output) = M::Ones(1, 1);
        for (std::size_t i = output.index + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (node.back && node.grad.size() != 0)
                node.back();
        }
    }

    Var embed(Parameter<Scalar>& table, std::span<const int> ids)
    {
        M out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= table.value.rows())
                throw RuntimeError("token id " + std::to_string(ids[i]) + " outside the embedding table");
            out.row(static_cast<Eigen::Index>(i)) = table.value.row(ids[i]);
        }
        const bool ng = record_ && table.requires_grad;
        Var r = push(std::move(out), ng);
        if (ng) {
            std::vector<int> idv(ids.begin(), ids.end());
            nodes_[r.index].back = [this, r, &table, idv = std::move(idv)] {
                auto& g = table.grad_buffer();
                const M& dy = grad(r);
                for (std::size_t i = 0; i < idv.size(); ++i)
                    g.row(idv[i]) += dy.row(static_cast<Eigen::Index>(i));
            };
        }
        return r;
    }

    /// x Wᵀ with W stored (out x in), as in torch.nn.Linear.
    Var linear(Var x, Parameter<Scalar>& w)
    {
        M out = value(x) * w.value.transpose();
        const bool ng = record_ && (needs_grad(x) || w.requires_grad);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, x, &w] {
                const M& dy = grad(r);
                if (w.requires_grad)
                    w.grad_buffer().noalias() += dy.transpose() * value(x);
                if (needs_grad(x))
                    grad(x).noalias() += dy * w.value;
            };
        }
        return r;
    }

    /// x Wᵀ against a constant matrix (no parameter).
    Var matmul_nt(Var x, const M& w)
    {
        M out = value(x) * w.transpose();
        const bool ng = record_ && needs_grad(x);
        Var r = push(std::move(out), ng);
        if (ng) {
            M wc = w;
            nodes_[r.index].back = [this, r, x, wc = std::move(wc)] { grad(x).noalias() += grad(r) * wc; };
        }
        return r;
    }

    Var add(Var a, Var b)
    {
        M out = value(a) + value(b);
        const bool ng = record_ && (needs_grad(a) || needs_grad(b));
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, a, b] {
                if (needs_grad(a))
                    grad(a) += grad(r);
                if (needs_grad(b))
                    grad(b) += grad(r);
            };
        }
        return r;
    }

    Var scale(Var a, Scalar s)
    {
        M out = value(a) * s;
        const bool ng = record_ && needs_grad(a);
        Var r = push(std::move(out), ng);
        if (ng)
            nodes_[r.index].back = [this, r, a, s] { grad(a) += grad(r) * s; };
        return r;
    }

    /// Elementwise product.
    Var mul(Var a, Var b)
    {
        M out = value(a).cwiseProduct(value(b));
        const bool ng = record_ && (needs_grad(a) || needs_grad(b));
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, a, b] {
                if (needs_grad(a))
                    grad(a) += grad(r).cwiseProduct(value(b));
                if (needs_grad(b))
                    grad(b) += grad(r).cwiseProduct(value(a));
            };
        }
        return r;
    }

    Var relu(Var a)
    {
        M out = value(a).cwiseMax(Scalar(0));
        const bool ng = record_ && needs_grad(a);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, a] {
                grad(a) += (value(a).array() > Scalar(0)).select(grad(r), Scalar(0)).matrix();
            };
        }
        return r;
    }

    /// tanh approximation of GELU ("gelu_new").
    Var gelu_tanh(Var a)
    {
        const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / 3.14159265358979323846));
        const Scalar k = static_cast<Scalar>(0.044715);
        const auto& x = value(a).array();
        M t = (c * (x + k * x.cube())).tanh().matrix();
        M out = (Scalar(0.5) * x * (Scalar(1) + t.array())).matrix();
        const bool ng = record_ && needs_grad(a);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, a, t = std::move(t), c, k] {
                const auto& xv = value(a).array();
                const auto ta = t.array();
                auto d = Scalar(0.5) * (Scalar(1) + ta) +
                         Scalar(0.5) * xv * (Scalar(1) - ta.square()) * c * (Scalar(1) + Scalar(3) * k * xv.square());
                grad(a) += (grad(r).array() * d).matrix();
            };
        }
        return r;
    }

    /// Exact (erf) GELU.
    Var gelu_erf(Var a)
    {
        const Scalar inv_sqrt2 = static_cast<Scalar>(0.70710678118654752440);
        const Scalar inv_sqrt2pi = static_cast<Scalar>(0.39894228040143267794);
        M out = value(a).unaryExpr([&](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
        const bool ng = record_ && needs_grad(a);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, a, inv_sqrt2, inv_sqrt2pi] {
                M d = value(a).unaryExpr([&](Scalar x) {
                    return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-x * x / 2);
                });
                grad(a) += grad(r).cwiseProduct(d);
            };
        }
        return r;
    }

    /// Root-mean-square norm without mean subtraction: x / sqrt(mean(x²) + eps) * weight.
    Var rms_norm(Var x, Parameter<Scalar>& weight, Scalar eps)
    {
        const M& xv = value(x);
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv(xv.rows());
        for (Eigen::Index i = 0; i < xv.rows(); ++i)
            inv(i) = Scalar(1) / std::sqrt(xv.row(i).squaredNorm() / static_cast<Scalar>(xv.cols()) + eps);
        M xhat = inv.asDiagonal() * xv;
        M out = xhat * weight.value.reshaped().asDiagonal();
        const bool ng = record_ && (needs_grad(x) || weight.requires_grad);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, x, &weight, inv = std::move(inv), xhat = std::move(xhat)] {
                const M& dy = grad(r);
                if (weight.requires_grad) {
                    auto& g = weight.grad_buffer();
                    g.reshaped() += dy.cwiseProduct(xhat).colwise().sum().transpose();
                }
                if (needs_grad(x)) {
                    M dxhat = dy * weight.value.reshaped().asDiagonal();
                    const Scalar n = static_cast<Scalar>(xhat.cols());
                    auto& gx = grad(x);
                    for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                        const Scalar dot = dxhat.row(i).dot(xhat.row(i)) / n;
                        gx.row(i) += inv(i) * (dxhat.row(i) - dot * xhat.row(i));
                    }
                }
            };
        }
        return r;
    }

    /// Multi-head attention without score scaling. q: Tq x (H·d), k and v: Tk x (H·d).
    /// `bias` is added per head when given; `causal` masks keys after the query position.
    Var attention(Var q, Var k, Var v, int heads, const RelativeBias<Scalar>* bias, bool causal)
    {
        const M& Q = value(q);
        const M& K = value(k);
        const M& V = value(v);
        const Eigen::Index d = Q.cols() / heads;
        const Eigen::Index tq = Q.rows(), tk = K.rows();
        if (bias && (bias->buckets.rows() != tq || bias->buckets.cols() != tk))
            throw RuntimeError("attention bias shape mismatch");
        std::vector<M> probs(static_cast<std::size_t>(heads));
        M out(tq, Q.cols());
        for (int h = 0; h < heads; ++h) {
            M s = Q.middleCols(h * d, d) * K.middleCols(h * d, d).transpose();
            if (bias)
                for (Eigen::Index i = 0; i < tq; ++i)
                    for (Eigen::Index j = 0; j < tk; ++j)
                        s(i, j) += bias->table->value(bias->buckets(i, j), h);
            for (Eigen::Index i = 0; i < tq; ++i) {
                const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, tk) : tk;
                const Scalar top = s.row(i).head(visible).maxCoeff();
                s.row(i).head(visible) = (s.row(i).head(visible).array() - top).exp().matrix();
                s.row(i).head(visible) /= s.row(i).head(visible).sum();
                if (visible < tk)
                    s.row(i).tail(tk - visible).setZero();
            }
            out.middleCols(h * d, d).noalias() = s * V.middleCols(h * d, d);
            probs[static_cast<std::size_t>(h)] = std::move(s);
        }
        const bool bias_grad = bias && bias->table->requires_grad;
        const bool ng = record_ && (needs_grad(q) || needs_grad(k) || needs_grad(v) || bias_grad);
        Var r = push(std::move(out), ng);
        if (ng) {
            RelativeBias<Scalar> bias_copy;
            if (bias)
                bias_copy = *bias;
            nodes_[r.index].back = [this, r, q, k, v, heads, d, bias_copy = std::move(bias_copy),
                                    probs = std::move(probs)] {
                const M& dy = grad(r);
                const M& Qv = value(q);
                const M& Kv = value(k);
                const M& Vv = value(v);
                for (int h = 0; h < heads; ++h) {
                    const M& p = probs[static_cast<std::size_t>(h)];
                    const auto dyh = dy.middleCols(h * d, d);
                    if (needs_grad(v))
                        grad(v).middleCols(h * d, d).noalias() += p.transpose() * dyh;
                    M dp = dyh * Vv.middleCols(h * d, d).transpose();
                    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(p).rowwise().sum();
                    M ds = p.cwiseProduct(dp - rowdot.replicate(1, dp.cols()));
                    if (needs_grad(q))
                        grad(q).middleCols(h * d, d).noalias() += ds * Kv.middleCols(h * d, d);
                    if (needs_grad(k))
                        grad(k).middleCols(h * d, d).noalias() += ds.transpose() * Qv.middleCols(h * d, d);
                    if (bias_copy.table && bias_copy.table->requires_grad) {
                        auto& g = bias_copy.table->grad_buffer();
                        for (Eigen::Index i = 0; i < ds.rows(); ++i)
                            for (Eigen::Index j = 0; j < ds.cols(); ++j)
                                g(bias_copy.buckets(i, j), h) += ds(i, j);
                    }
                }
            };
        }
        return r;
    }

    Var row(Var x, Eigen::Index index)
    {
        M out = value(x).row(index);
        const bool ng = record_ && needs_grad(x);
        Var r = push(std::move(out), ng);
        if (ng)
            nodes_[r.index].back = [this, r, x, index] { grad(x).row(index) += grad(r); };
        return r;
    }

    /// Mean over rows of -log softmax(logits)[target]; rows whose target is negative are ignored.
    /// With `min_prob` > 0 a target probability below it is clamped (and passes no gradient).
    Var cross_entropy(Var logits, std::span<const int> targets, Scalar min_prob = 0)
    {
        const M& z = value(logits);
        if (static_cast<Eigen::Index>(targets.size()) != z.rows())
            throw RuntimeError("cross_entropy: one target per row required");
        M soft(z.rows(), z.cols());
        Scalar total = 0;
        std::size_t count = 0;
        std::vector<Eigen::Index> clamped;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const Scalar top = z.row(i).maxCoeff();
            soft.row(i) = (z.row(i).array() - top).exp().matrix();
            const Scalar sum = soft.row(i).sum();
            soft.row(i) /= sum;
            const int t = targets[static_cast<std::size_t>(i)];
            if (t < 0)
                continue;
            if (t >= z.cols())
                throw RuntimeError("cross_entropy: target out of range");
            const Scalar nll = std::log(sum) + top - z(i, t);
            if (min_prob > 0 && soft(i, t) < min_prob) {
                total -= std::log(min_prob);
                clamped.push_back(i);
            } else {
                total += nll;
            }
            ++count;
        }
        if (count == 0)
            throw RuntimeError("cross_entropy: every target is ignored");
        M out(1, 1);
        out(0, 0) = total / static_cast<Scalar>(count);
        const bool ng = record_ && needs_grad(logits);
        Var r = push(std::move(out), ng);
        if (ng) {
            std::vector<int> tv(targets.begin(), targets.end());
            nodes_[r.index].back = [this, r, logits, soft = std::move(soft), tv = std::move(tv), count,
                                    clamped = std::move(clamped)] {
                const Scalar g = grad(r)(0, 0) / static_cast<Scalar>(count);
                auto& gz = grad(logits);
                for (Eigen::Index i = 0; i < soft.rows(); ++i) {
                    const int t = tv[static_cast<std::size_t>(i)];
                    if (t < 0 || std::find(clamped.begin(), clamped.end(), i) != clamped.end())
                        continue;
                    gz.row(i) += g * soft.row(i);
                    gz(i, t) -= g;
                }
            };
        }
        return r;
    }

    /// Per-group log-mean-exp over the columns of a 1 x M row: output 1 x G.
    Var group_log_mean_exp(Var x, const std::vector<std::vector<int>>& groups)
    {
        const M& z = value(x);
        M out(1, static_cast<Eigen::Index>(groups.size()));
        std::vector<std::vector<Scalar>> weights(groups.size());
        for (std::size_t g = 0; g < groups.size(); ++g) {
            Scalar top = -std::numeric_limits<Scalar>::infinity();
            for (int c : groups[g])
                top = std::max(top, z(0, c));
            Scalar sum = 0;
            for (int c : groups[g]) {
                weights[g].push_back(std::exp(z(0, c) - top));
                sum += weights[g].back();
            }
            for (auto& w : weights[g])
                w /= sum;
            out(0, static_cast<Eigen::Index>(g)) = top + std::log(sum / static_cast<Scalar>(groups[g].size()));
        }
        const bool ng = record_ && needs_grad(x);
        Var r = push(std::move(out), ng);
        if (ng) {
            nodes_[r.index].back = [this, r, x, groups, weights = std::move(weights)] {
                auto& gx = grad(x);
                const M& dy = grad(r);
                for (std::size_t g = 0; g < groups.size(); ++g)
                    for (std::size_t j = 0; j < groups[g].size(); ++j)
                        gx(0, groups[g][j]) += dy(0, static_cast<Eigen::Index>(g)) * weights[g][j];
            };
        }
        return r;
    }

private:
    struct Node {
        M value;
        M grad;
        std::function<void()> back;
        bool needs_grad = false;
    };

    Var push(M value, bool needs)
    {
        nodes_.push_back({std::move(value), M{}, {}, needs});
        return Var{nodes_.size() - 1};
    }

    M& grad(Var v)
    {
        auto& node = nodes_[v.index];
        if (node.grad.size() == 0)
            node.grad = M::Zero(node.value.rows(), node.value.cols());
        return node.grad;
    }

    bool record_;
    std::vector<Node> nodes_;
};

} // namespace ipck::ad
