#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "transfo/autodiff.hpp"

namespace transfo::ad {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    bool flagged = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;

    bool passed() const {
        return std::none_of(entries.begin(), entries.end(), [](const auto& e) { return e.flagged; });
    }
    double max_rel_error() const {
        double worst = 0.0;
        for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
        return worst;
    }
    const GradCheckEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

/// Compares analytic gradients of `loss_fn` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps, element by element. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor); the floor
/// keeps entries whose true gradient is ~0 from dividing roundoff by zero.
/// `loss_fn` must be deterministic (dropout off, fixed rng).
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& loss_fn, std::vector<NamedTensor<T>> params,
                                  T epsilon, double tolerance, double abs_floor = 1e-7) {
    for (auto& p : params) p.tensor.zero_grad();
    loss_fn().backward();

    GradCheckReport report;
    report.tolerance = tolerance;
    NoGradGuard no_grad;
    for (auto& p : params) {
        GradCheckEntry entry;
        entry.name = p.name;
        const std::vector<T> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
        auto values = p.tensor.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T saved = values[i];
            values[i] = saved + epsilon;
            const double up = static_cast<double>(loss_fn().item());
            values[i] = saved - epsilon;
            const double down = static_cast<double>(loss_fn().item());
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * static_cast<double>(epsilon));
            const double a = static_cast<double>(analytic[i]);
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
        }
        entry.flagged = entry.max_rel_error > tolerance;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace transfo::ad
