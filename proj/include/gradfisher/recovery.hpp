#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "gradfisher/errors.hpp"
#include "gradfisher/model.hpp"

namespace gradfisher {

// |grad b_c| below this means no target-class data responded: far below any
// genuine single-example contribution (~1/batch_size) yet above rounding noise.
constexpr double kNoSignalTol = 1e-12;

// f_bar = grad(W_c) / grad(b_c): mean feature of the examples that responded
// on row c. Exact for a single responder, a weighted mean otherwise.
inline Vector recover_avg_feature(const GradientUpdate& g, std::size_t c) {
    if (c >= g.head_bias.size())
        throw ParamError("recover_avg_feature: class out of range");
    const double db = g.head_bias[c];
    if (std::abs(db) <= kNoSignalTol)
        throw NoSignalError("recover_avg_feature: no target-class signal on row " +
                            std::to_string(c));
    Vector f(g.head_weight.cols);
    for (std::size_t j = 0; j < f.size(); ++j) f[j] = g.head_weight.at(c, j) / db;
    return f;
}

// Each responding target example contributes about -1/batch_size to grad b_c
// under a fished head, non-targets about 0, so the count is just the scaled
// bias gradient rounded.
inline std::size_t estimate_target_count(const GradientUpdate& g, std::size_t c) {
    if (c >= g.head_bias.size())
        throw ParamError("estimate_target_count: class out of range");
    const double raw = -static_cast<double>(g.batch_size) * g.head_bias[c];
    if (raw < -0.5)
        throw ContractError("estimate_target_count: inconsistent negative count " +
                            std::to_string(raw));
    const long long s = std::llround(std::max(0.0, raw));
    return static_cast<std::size_t>(s);
}

struct RecoveredInput {
    Vector input;
    // Max pairwise L2 distance between per-row candidates. Near zero for a
    // true single-example gradient; large when the update mixes examples.
    double disagreement = 0.0;
    bool mixed = false;
};

constexpr double kRecoveryRowTol = 1e-8;

// Linear-layer identity on the first extractor layer: every row r with a
// usable bias gradient yields candidate x_r = grad(W1_r) / grad(b1_r), and all
// candidates agree exactly when the update really came from one example.
inline RecoveredInput analytic_input_recovery(const GradientUpdate& g) {
    if (g.extractor.empty())
        throw UnrecoverableError("input recovery: model has no extractor layer");
    const LayerGrad& first = g.extractor.front();
    std::vector<Vector> candidates;
    for (std::size_t r = 0; r < first.bias.size(); ++r) {
        if (std::abs(first.bias[r]) <= kRecoveryRowTol) continue;
        Vector cand(first.weight.cols);
        for (std::size_t k = 0; k < cand.size(); ++k)
            cand[k] = first.weight.at(r, k) / first.bias[r];
        candidates.push_back(std::move(cand));
    }
    if (candidates.empty())
        throw UnrecoverableError("input recovery: no first-layer row has bias signal");

    RecoveredInput out;
    out.input = Vector(candidates.front().size(), 0.0);
    for (const Vector& c : candidates)
        for (std::size_t k = 0; k < out.input.size(); ++k) out.input[k] += c[k];
    for (double& v : out.input) v /= static_cast<double>(candidates.size());

    for (std::size_t a = 0; a < candidates.size(); ++a)
        for (std::size_t b = a + 1; b < candidates.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < candidates[a].size(); ++k) {
                const double d = candidates[a][k] - candidates[b][k];
                d2 += d * d;
            }
            out.disagreement = std::max(out.disagreement, std::sqrt(d2));
        }
    out.mixed = out.disagreement > 1e-5 * std::max(1.0, norm2(out.input));
    return out;
}

inline double cosine_of_flats(const Vector& fa, const Vector& fb) {
    const double na = norm2(fa);
    const double nb = norm2(fb);
    if (na < 1e-15 || nb < 1e-15) return 0.0;
    return dot(fa, fb) / (na * nb);
}

inline double cosine_similarity(const GradientUpdate& a, const GradientUpdate& b) {
    if (!same_shape(a, b)) throw ContractError("cosine_similarity: shape mismatch");
    return cosine_of_flats(flatten(a), flatten(b));
}

constexpr double kCatchCosineThreshold = 0.95;

struct CatchCount {
    std::size_t n = 0;
    double best_cosine = 0.0;
};

// Catch criterion: among prefix sums of the per-example gradients (sorted
// ascending by attacked-feature value), pick the prefix whose extractor
// block best matches g_c. Cosines are compared with a small improvement
// margin: the full prefix always reproduces the batch mean exactly, so a
// bare argmax would drift past the caught set onto the plateau of
// suppressed, near-zero contributions. Requires the oracle per-example
// gradients, so this is an evaluation operation, not attacker capability.
inline CatchCount count_caught(const GradientUpdate& g_c,
                               std::span<const GradientUpdate> per_example_sorted) {
    constexpr double kMargin = 1e-9;
    const Vector target = flatten_extractor(g_c);
    CatchCount best;
    double running_best = -2.0;
    Vector prefix(target.size(), 0.0);
    for (std::size_t n = 0; n < per_example_sorted.size(); ++n) {
        if (!same_shape(g_c, per_example_sorted[n]))
            throw ContractError("count_caught: shape mismatch at prefix " +
                                std::to_string(n));
        const Vector part = flatten_extractor(per_example_sorted[n]);
        for (std::size_t k = 0; k < prefix.size(); ++k) prefix[k] += part[k];
        const double cos = cosine_of_flats(target, prefix);
        if (cos > running_best + kMargin) {
            running_best = cos;
            best.n = n + 1;
            best.best_cosine = cos;
        }
    }
    if (best.best_cosine < kCatchCosineThreshold) {
        best.n = 0;
        best.best_cosine = running_best > -2.0 ? running_best : 0.0;
    }
    return best;
}

// Evaluation-side outcome of attacking one user.
struct CatchReport {
    std::size_t user_id = 0;
    std::size_t n_caught = 0;
    double best_cosine = 0.0;
    std::optional<GradientUpdate> isolated_gradient;
    std::optional<Vector> recovered_input;
    std::size_t queries_used = 0;
    // Max abs deviation of recovered_input from the true caught example;
    // NaN when no isolation happened or no ground truth was available.
    double input_recovery_error = std::numeric_limits<double>::quiet_NaN();
};

// Oracle per-example gradients under the given (usually fished) parameters,
// sorted ascending by the value of feature j. Fishing never touches the
// extractor, so features can be read from the same forward pass.
inline std::vector<GradientUpdate> sorted_per_example_gradients(
    const ModelParams& params, std::span<const Example> batch, std::size_t j,
    std::vector<double>* features_out = nullptr,
    std::vector<std::size_t>* order_out = nullptr) {
    struct Item {
        double fj;
        std::size_t idx;
        GradientUpdate grad;
    };
    std::vector<Item> items;
    items.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        ForwardTrace t = forward(params, batch[i].x);
        const double fj = t.feature[j];
        items.push_back({fj, i, backward(params, t, batch[i].y)});
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const Item& a, const Item& b) { return a.fj < b.fj; });
    std::vector<GradientUpdate> out;
    out.reserve(items.size());
    if (features_out) features_out->clear();
    if (order_out) order_out->clear();
    for (Item& it : items) {
        if (features_out) features_out->push_back(it.fj);
        if (order_out) order_out->push_back(it.idx);
        out.push_back(std::move(it.grad));
    }
    return out;
}

} // namespace gradfisher
