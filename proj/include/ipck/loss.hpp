#pragma once

#include "ipck/error.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

namespace ipck {

inline constexpr double probability_floor = 1e-12;

/// −Σ y_i log ŷ_i with ŷ clamped to [1e-12, 1].
template <typename Scalar>
Scalar cross_entropy(std::span<const Scalar> y, std::span<const Scalar> y_hat)
{
    if (y.size() != y_hat.size())
        throw RuntimeError("cross_entropy: distributions have lengths " + std::to_string(y.size()) + " and " +
                           std::to_string(y_hat.size()));
    Scalar loss = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] != Scalar(0))
            loss -= y[i] * std::log(std::clamp(y_hat[i], static_cast<Scalar>(probability_floor), Scalar(1)));
    return loss;
}

template <typename Scalar>
Scalar total_loss(Scalar ce, Scalar lm_loss, Scalar lambda)
{
    if (!std::isfinite(ce) || !std::isfinite(lm_loss))
        throw RuntimeError("total_loss: non-finite component");
    return ce + lambda * lm_loss;
}

} // namespace ipck
