#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradfisher/errors.hpp"
#include "gradfisher/linalg.hpp"
#include "gradfisher/model.hpp"

namespace gradfisher {

// Stand-in classification task: Gaussian blobs around well-separated class
// means. Means are orthonormalized directions scaled to mean_radius, which
// guarantees the pairwise distance is exactly radius * sqrt(2).
struct SyntheticTask {
    std::size_t n_classes = 20;
    std::size_t input_dim = 32;
    std::vector<Vector> class_means;
    double within_class_std = 0.5;
    std::uint64_t seed = 0;
};

inline SyntheticTask make_synthetic_task(std::size_t n_classes, std::size_t input_dim,
                                         double within_class_std, double mean_radius,
                                         std::uint64_t seed) {
    if (n_classes < 2) throw ParamError("task: need at least 2 classes");
    if (!(within_class_std > 0.0)) throw ParamError("task: within_class_std must be > 0");
    if (n_classes > input_dim)
        throw ParamError("task: orthogonal class means need n_classes <= input_dim");
    SyntheticTask task;
    task.n_classes = n_classes;
    task.input_dim = input_dim;
    task.within_class_std = within_class_std;
    task.seed = seed;

    RandomSource rng(seed, 0xC1A55ULL);
    task.class_means.reserve(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        // Gram-Schmidt against the means already placed.
        Vector v = gaussian_sample(rng, 0.0, 1.0, input_dim);
        for (const Vector& m : task.class_means) {
            const double proj = dot(v, m) / dot(m, m);
            for (std::size_t k = 0; k < v.size(); ++k) v[k] -= proj * m[k];
        }
        const double n2 = norm2(v);
        if (n2 < 1e-9) throw NumericError("task: degenerate direction draw");
        for (double& x : v) x *= mean_radius / n2;
        task.class_means.push_back(std::move(v));
    }

    // Separability: pairwise mean distance must dominate the blob width.
    const double min_dist = mean_radius * std::numbers::sqrt2;
    if (min_dist < 4.0 * within_class_std)
        throw ParamError("task: class means too close for within_class_std " +
                         std::to_string(within_class_std));
    return task;
}

inline Example sample_example(const SyntheticTask& task, std::size_t cls,
                              RandomSource& rng) {
    if (cls >= task.n_classes) throw ParamError("sample_example: class out of range");
    Example ex;
    ex.y = cls;
    ex.x = task.class_means[cls];
    for (double& v : ex.x) v += task.within_class_std * rng.next_gaussian();
    return ex;
}

inline std::vector<Example> sample_dataset(const SyntheticTask& task,
                                           std::size_t per_class, RandomSource& rng) {
    std::vector<Example> out;
    out.reserve(task.n_classes * per_class);
    for (std::size_t c = 0; c < task.n_classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i)
            out.push_back(sample_example(task, c, rng));
    shuffle(out, rng);
    return out;
}

enum class AggregationMode { mean, median };

struct DefenseConfig {
    std::optional<double> clip_norm; // per-example flattened L2 bound
    double noise_std = 0.0;
    AggregationMode aggregation = AggregationMode::mean;

    void validate() const {
        if (clip_norm && !(*clip_norm > 0.0))
            throw ParamError("defense: clip_norm must be positive");
        if (noise_std < 0.0) throw ParamError("defense: noise_std must be >= 0");
        if (noise_std > 0.0 && !clip_norm)
            throw ParamError("defense: noise requires clipping");
    }
};

struct User {
    std::size_t user_id = 0;
    std::vector<Example> batch;
    std::optional<DefenseConfig> defense;
    RandomSource noise_rng{0, 0};
};

struct Composition {
    enum class Kind { random_mix, single_class, k_of_batch } kind = Kind::random_mix;
    std::size_t target_class = 0; // single_class / k_of_batch
    std::size_t k = 0;            // k_of_batch
};

inline std::vector<User> generate_population(const SyntheticTask& task,
                                             std::size_t n_users, std::size_t batch_size,
                                             const Composition& comp, RandomSource src) {
    if (batch_size == 0) throw ParamError("population: empty batches");
    if (comp.kind != Composition::Kind::random_mix &&
        comp.target_class >= task.n_classes)
        throw ParamError("population: target class out of range");
    if (comp.kind == Composition::Kind::k_of_batch && comp.k > batch_size)
        throw ParamError("population: k exceeds batch size");

    std::vector<User> users(n_users);
    for (std::size_t u = 0; u < n_users; ++u) {
        RandomSource user_rng = src.stream(u);
        RandomSource data_rng = user_rng.stream(0);
        users[u].user_id = u;
        users[u].noise_rng = user_rng.stream(1);
        std::vector<std::size_t> labels(batch_size, comp.target_class);
        switch (comp.kind) {
            case Composition::Kind::random_mix:
                for (auto& y : labels)
                    y = static_cast<std::size_t>(data_rng.next_below(task.n_classes));
                break;
            case Composition::Kind::single_class:
                break;
            case Composition::Kind::k_of_batch:
                for (std::size_t i = comp.k; i < batch_size; ++i) {
                    std::size_t y;
                    do {
                        y = static_cast<std::size_t>(data_rng.next_below(task.n_classes));
                    } while (y == comp.target_class);
                    labels[i] = y;
                }
                shuffle(labels, data_rng);
                break;
        }
        users[u].batch.reserve(batch_size);
        for (std::size_t y : labels)
            users[u].batch.push_back(sample_example(task, y, data_rng));
    }
    return users;
}

// The user-side update for server-supplied parameters. Without a defense
// this is bit-identical to batch_gradient. With one, per-example gradients
// are clipped in flattened L2 before averaging and spherical noise of std
// noise_std / batch_size is added per parameter, drawn from the user's own
// stream (so repeated queries see fresh noise, deterministically).
inline GradientUpdate user_update(User& user, const ModelParams& params) {
    if (!user.defense) return batch_gradient(params, user.batch);
    user.defense->validate();
    std::vector<GradientUpdate> parts;
    parts.reserve(user.batch.size());
    for (const Example& ex : user.batch) {
        GradientUpdate g = backward(params, forward(params, ex.x), ex.y);
        if (user.defense->clip_norm) {
            const double n = flat_norm(g);
            if (n > *user.defense->clip_norm)
                scale_in_place(g, *user.defense->clip_norm / n);
        }
        parts.push_back(std::move(g));
    }
    GradientUpdate out = reduce_mean(parts);
    if (user.defense->noise_std > 0.0) {
        const double sigma =
            user.defense->noise_std / static_cast<double>(out.batch_size);
        for_each_entry(out, [&](double& x) { x += sigma * user.noise_rng.next_gaussian(); });
    }
    return out;
}

// Elementwise mean or median across updates. Median of an even count takes
// the lower-middle element so the result is deterministic.
inline GradientUpdate aggregate(std::span<const GradientUpdate> updates,
                                AggregationMode mode) {
    if (updates.empty()) throw ParamError("aggregate: no updates");
    for (const GradientUpdate& g : updates)
        if (!same_shape(g, updates.front()))
            throw ContractError("aggregate: shape mismatch");

    std::vector<Vector> flats;
    flats.reserve(updates.size());
    for (const GradientUpdate& g : updates) flats.push_back(flatten(g));

    GradientUpdate out = updates.front();
    std::size_t idx = 0;
    Vector column(updates.size());
    for_each_entry(out, [&](double& x) {
        for (std::size_t u = 0; u < flats.size(); ++u) column[u] = flats[u][idx];
        if (mode == AggregationMode::mean) {
            x = pairwise_sum(column) / static_cast<double>(column.size());
        } else {
            Vector sorted = column;
            std::sort(sorted.begin(), sorted.end());
            x = sorted[(sorted.size() - 1) / 2];
        }
        ++idx;
    });
    return out;
}

inline std::map<std::size_t, std::size_t> label_histogram(const User& user) {
    std::map<std::size_t, std::size_t> h;
    for (const Example& ex : user.batch) ++h[ex.y];
    return h;
}

} // namespace gradfisher
