#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ceperfed/errors.hpp"
#include "ceperfed/tensor.hpp"

namespace ceperfed {

/// Knobs of the local/global collaborative optimization.
struct CollabConfig {
    double lambda_step = 0.01;  // risk-matrix reduction step size
    double delta_scale = 0.1;   // historical average gradient scaling
    std::size_t n_clients = 5;
};

/// n x n nonnegative trust matrix; row i weights the other clients'
/// gradients when building client i's risk gradient.
struct RiskMatrix {
    std::size_t n = 0;
    std::vector<double> alpha;  // row-major n x n

    static RiskMatrix uniform(std::size_t n) {
        RiskMatrix m;
        m.n = n;
        m.alpha.assign(n * n, n > 0 ? 1.0 / static_cast<double>(n) : 0.0);
        return m;
    }

    double at(std::size_t i, std::size_t j) const { return alpha[i * n + j]; }

    std::vector<double> row(std::size_t i) const {
        return std::vector<double>(alpha.begin() + static_cast<std::ptrdiff_t>(i * n),
                                   alpha.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    }

    void set_row(std::size_t i, const std::vector<double>& row) {
        std::copy(row.begin(), row.end(), alpha.begin() + static_cast<std::ptrdiff_t>(i * n));
    }

    bool nonnegative() const {
        return std::all_of(alpha.begin(), alpha.end(), [](double x) { return x >= 0.0; });
    }
};

/// Trust signal uploaded by each client: cross-entropy loss minus the inner
/// product of its round gradient with its parameters. Lower means a more
/// trustworthy update.
inline double alignment_score(double loss_ce, const ParameterSet& grad,
                              const ParameterSet& params) {
    if (!std::isfinite(loss_ce)) throw NumericError("alignment_score: non-finite loss");
    const double m = loss_ce - dot(grad, params);
    if (!std::isfinite(m)) throw NumericError("alignment_score: non-finite score");
    return m;
}

/// One risk-vector update: out_j = max(row_j - lambda * (score_j + consistency), 0).
inline std::vector<double> update_risk_row(const std::vector<double>& row,
                                           const std::vector<double>& scores, double consistency,
                                           double lambda_step) {
    if (row.size() != scores.size())
        throw StructuralError("update_risk_row: row/scores length mismatch");
    std::vector<double> out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (!std::isfinite(scores[j]) || !std::isfinite(consistency))
            throw NumericError("update_risk_row: non-finite input");
        out[j] = std::max(row[j] - lambda_step * (scores[j] + consistency), 0.0);
    }
    return out;
}

/// Corrected gradient: raw batch gradient plus the client's historical risk
/// gradient from the previous round.
inline ParameterSet correct_gradient(const ParameterSet& raw, const ParameterSet& risk_grad) {
    return add(raw, risk_grad);
}

/// Global historical average gradient: (delta / n) * sum of client gradients.
inline ParameterSet historical_average_gradient(const std::vector<ParameterSet>& grads,
                                                double delta_scale) {
    if (grads.empty()) throw StructuralError("historical_average_gradient: no gradients");
    ParameterSet sum = zeros_like(grads.front());
    for (const auto& g : grads) add_scaled_in_place(sum, g, 1.0);
    scale_in_place(sum, delta_scale / static_cast<double>(grads.size()));
    return sum;
}

/// Client-specific historical risk gradient: alpha-weighted combination of
/// all clients' gradients.
inline ParameterSet historical_risk_gradient(const std::vector<double>& alpha_row,
                                             const std::vector<ParameterSet>& grads) {
    if (alpha_row.size() != grads.size())
        throw StructuralError("historical_risk_gradient: weight/gradient count mismatch");
    if (grads.empty()) throw StructuralError("historical_risk_gradient: no gradients");
    ParameterSet out = zeros_like(grads.front());
    for (std::size_t j = 0; j < grads.size(); ++j)
        add_scaled_in_place(out, grads[j], alpha_row[j]);
    return out;
}

}  // namespace ceperfed
