#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "gradfisher/errors.hpp"
#include "gradfisher/fedsim.hpp"
#include "gradfisher/fishing.hpp"
#include "gradfisher/recovery.hpp"
#include "gradfisher/stats.hpp"

namespace gradfisher {

// One estimation user's mined result: recovered average feature vector and
// the estimated number of target-class examples behind it.
struct FeatureObservation {
    std::size_t user_id = 0;
    Vector f_bar;
    std::size_t s = 1;
};

struct GaussianFit {
    std::size_t feature_index = 0;
    double mu = 0.0;
    double sigma = 1.0;
    double ks_stat = 1.0;
    std::size_t n_observations = 0;
};

// Kolmogorov-Smirnov statistic of the standardized samples against N(0, 1):
// D = max_i max(i/N - Phi(z_(i)), Phi(z_(i)) - (i-1)/N).
inline double ks_statistic(std::span<const double> samples) {
    if (samples.size() < 8) throw ParamError("ks_statistic: need at least 8 samples");
    const std::size_t n = samples.size();
    const double mu = mean(samples);
    double ss = 0.0;
    for (double x : samples) ss += (x - mu) * (x - mu);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd <= 1e-12) throw DegenerateError("ks_statistic: constant samples");

    Vector z(samples.begin(), samples.end());
    for (double& x : z) x = (x - mu) / sd;
    std::sort(z.begin(), z.end());
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double cdf = normal_cdf(z[i]);
        const double hi = static_cast<double>(i + 1) / static_cast<double>(n) - cdf;
        const double lo = cdf - static_cast<double>(i) / static_cast<double>(n);
        d = std::max({d, hi, lo});
    }
    return d;
}

// Most-normal feature by KS statistic; degenerate (constant) features are
// excluded, ties break toward the lowest index.
inline std::size_t select_feature(std::span<const FeatureObservation> obs) {
    if (obs.size() < 8) throw ParamError("select_feature: need at least 8 observations");
    const std::size_t m = obs.front().f_bar.size();
    std::size_t best = m;
    double best_ks = kInf;
    Vector column(obs.size());
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < obs.size(); ++i) column[i] = obs[i].f_bar[j];
        double ks;
        try {
            ks = ks_statistic(column);
        } catch (const DegenerateError&) {
            continue;
        }
        if (ks < best_ks) {
            best_ks = ks;
            best = j;
        }
    }
    if (best == m) throw DegenerateError("select_feature: every feature is degenerate");
    return best;
}

// Normal fit of feature j from user means. mu is the plain mean of the
// observed f_bar; sigma is computed from f_bar * sqrt(s), which undoes the
// variance shrink of an s-sample mean.
inline GaussianFit fit_gaussian(std::span<const FeatureObservation> obs, std::size_t j) {
    if (obs.size() < 2) throw ParamError("fit_gaussian: need at least 2 observations");
    const std::size_t n = obs.size();
    Vector vals(n), scaled(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (j >= obs[i].f_bar.size())
            throw ParamError("fit_gaussian: feature index out of range");
        vals[i] = obs[i].f_bar[j];
        scaled[i] = vals[i] * std::sqrt(static_cast<double>(obs[i].s));
    }
    GaussianFit fit;
    fit.feature_index = j;
    fit.n_observations = n;
    fit.mu = mean(vals);
    const double mu_prime = mean(scaled);
    double ss = 0.0;
    for (double x : scaled) ss += (x - mu_prime) * (x - mu_prime);
    fit.sigma = std::sqrt(ss / static_cast<double>(n));
    if (!(fit.sigma > 0.0)) throw DegenerateError("fit_gaussian: zero spread");
    try {
        fit.ks_stat = ks_statistic(vals);
    } catch (const Error&) {
        fit.ks_stat = 1.0;
    }
    return fit;
}

// Cutoff at the lower 1/M mass of the fitted normal; with a single expected
// target there is nothing to split, so everything is kept.
inline double choose_cutoff(const GaussianFit& fit, std::size_t expected_targets) {
    if (expected_targets == 0) throw ParamError("choose_cutoff: M must be >= 1");
    if (expected_targets == 1) return kInf;
    return fit.mu +
           fit.sigma * normal_quantile(1.0 / static_cast<double>(expected_targets));
}

// P(exactly one of M draws lands in the lowest 1/M-mass bin), estimated with
// the generator's true CDF. Closed form is (1 - 1/M)^(M-1).
inline double lowest_bin_single_hit_rate(std::size_t m_targets, std::size_t trials,
                                         RandomSource& rng) {
    if (m_targets == 0 || trials == 0)
        throw ParamError("lowest_bin_single_hit_rate: empty experiment");
    const double cut = m_targets == 1
                           ? kInf
                           : normal_quantile(1.0 / static_cast<double>(m_targets));
    std::size_t hits = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::size_t below = 0;
        for (std::size_t i = 0; i < m_targets; ++i)
            below += (rng.next_gaussian() < cut) ? 1 : 0;
        hits += (below == 1) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
}

// Sup distance between the fitted normal CDF and an empirical sample pool,
// for judging estimation quality against a ground-truth population.
inline double fit_vs_empirical_ks(const GaussianFit& fit, std::span<const double> pool) {
    if (pool.empty()) throw ParamError("fit_vs_empirical_ks: empty pool");
    Vector sorted(pool.begin(), pool.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double cdf = normal_cdf((sorted[i] - fit.mu) / fit.sigma);
        d = std::max({d, static_cast<double>(i + 1) / static_cast<double>(n) - cdf,
                      cdf - static_cast<double>(i) / static_cast<double>(n)});
    }
    return d;
}

struct CrossDeviceConfig {
    double alpha = 1000.0;
    double beta = 1000.0;
    // Bin count M for the cutoff. 0 derives it as the rounded mean of the
    // observed per-user target counts; experiments attacking all-target
    // batches should pin it to the attacked batch's target count instead.
    std::size_t expected_targets = 0;
    bool combine_with_class = false;
    std::size_t min_observations = 8;
    unsigned threads = 1;
    // Features are post-relu in the default model, so no example can sit
    // below 0, and a fitted lower tail that extends under the clamp is
    // fiction. Candidates whose planned cutoff does not clear this floor by
    // a quarter of the fitted sigma are passed over for the next-most-normal
    // feature. -inf disables the check.
    double support_floor = 0.0;
};

struct OneShotFeatureResult {
    std::vector<FeatureObservation> observations;
    std::size_t feature_index = 0;
    GaussianFit fit;
    double theta = 0.0;
    std::size_t bin_count = 0; // the M actually used
    std::vector<CatchReport> reports;
};

// Attack phase: feature-fish every target user once at the given cutoff and
// score each returned update against the per-example oracle gradients.
inline std::vector<CatchReport> feature_fishing_round(const ModelParams& benign,
                                                      std::span<User> target_users,
                                                      std::size_t target_class,
                                                      std::size_t j, double theta,
                                                      const CrossDeviceConfig& config) {
    const ModelParams attack_params =
        feature_fishing(benign, target_class, j, theta, config.beta,
                        config.combine_with_class, config.alpha);
    std::vector<CatchReport> reports(target_users.size());
    parallel_for(target_users.size(), config.threads, [&](std::size_t i) {
        User& user = target_users[i];
        const GradientUpdate g = user_update(user, attack_params);
        std::vector<std::size_t> order;
        const std::vector<GradientUpdate> oracle =
            sorted_per_example_gradients(attack_params, user.batch, j, nullptr, &order);
        const CatchCount cc = count_caught(g, oracle);
        CatchReport rep;
        rep.user_id = user.user_id;
        rep.n_caught = cc.n;
        rep.best_cosine = cc.best_cosine;
        rep.queries_used = 1;
        if (cc.n == 1) {
            rep.isolated_gradient = g;
            try {
                const RecoveredInput rec = analytic_input_recovery(g);
                rep.recovered_input = rec.input;
                double err = 0.0;
                const Vector& truth = user.batch[order.front()].x;
                for (std::size_t k = 0; k < truth.size(); ++k)
                    err = std::max(err, std::abs(rec.input[k] - truth[k]));
                rep.input_recovery_error = err;
            } catch (const UnrecoverableError&) {
            }
        }
        reports[i] = std::move(rep);
    });
    return reports;
}

// The cross-device one-shot feature attack. Phase 1 class-fishes the
// estimation users and collects average-feature observations; phase 2 picks
// the most normal feature, fits it, and places the cutoff; phase 3
// feature-fishes every target user once and scores the catches against
// per-example oracles. Each user is queried exactly once.
inline OneShotFeatureResult one_shot_feature_attack(const ModelParams& benign,
                                                    std::span<User> estimation_users,
                                                    std::span<User> target_users,
                                                    std::size_t target_class,
                                                    const CrossDeviceConfig& config) {
    OneShotFeatureResult result;

    const ModelParams est_params = class_fishing(benign, target_class, config.alpha);
    std::vector<std::optional<FeatureObservation>> slots(estimation_users.size());
    parallel_for(estimation_users.size(), config.threads, [&](std::size_t i) {
        const GradientUpdate g = user_update(estimation_users[i], est_params);
        try {
            FeatureObservation ob;
            ob.user_id = estimation_users[i].user_id;
            ob.f_bar = recover_avg_feature(g, target_class);
            ob.s = estimate_target_count(g, target_class);
            if (ob.s >= 1) slots[i] = std::move(ob);
        } catch (const NoSignalError&) {
            // this user held no target-class data; skip
        } catch (const ContractError&) {
            // defense noise flipped the count reading; equally unusable
        }
    });
    for (auto& slot : slots)
        if (slot) result.observations.push_back(std::move(*slot));
    if (result.observations.size() < config.min_observations)
        throw AbortEstimationError("one_shot_feature_attack: only " +
                                   std::to_string(result.observations.size()) +
                                   " usable observations");

    if (config.expected_targets > 0) {
        result.bin_count = config.expected_targets;
    } else {
        Vector counts;
        counts.reserve(result.observations.size());
        for (const FeatureObservation& ob : result.observations)
            counts.push_back(static_cast<double>(ob.s));
        result.bin_count = static_cast<std::size_t>(std::llround(mean(counts)));
        if (result.bin_count == 0) result.bin_count = 1;
    }

    // candidate features, most normal first
    const std::size_t m = result.observations.front().f_bar.size();
    std::vector<std::pair<double, std::size_t>> ranking;
    Vector column(result.observations.size());
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < result.observations.size(); ++i)
            column[i] = result.observations[i].f_bar[j];
        try {
            ranking.emplace_back(ks_statistic(column), j);
        } catch (const DegenerateError&) {
        }
    }
    if (ranking.empty())
        throw DegenerateError("one_shot_feature_attack: every feature is degenerate");
    std::sort(ranking.begin(), ranking.end());

    bool placed = false;
    for (const auto& [ks, j] : ranking) {
        GaussianFit fit;
        try {
            fit = fit_gaussian(result.observations, j);
        } catch (const DegenerateError&) {
            continue;
        }
        const double theta = choose_cutoff(fit, result.bin_count);
        if (std::isfinite(config.support_floor) &&
            !(theta > config.support_floor + 0.25 * fit.sigma))
            continue;
        result.feature_index = j;
        result.fit = fit;
        result.theta = theta;
        placed = true;
        break;
    }
    if (!placed) {
        // no candidate clears the floor; fall back to the plain argmin
        result.feature_index = select_feature(result.observations);
        result.fit = fit_gaussian(result.observations, result.feature_index);
        result.theta = choose_cutoff(result.fit, result.bin_count);
    }

    result.reports = feature_fishing_round(benign, target_users, target_class,
                                           result.feature_index, result.theta, config);
    return result;
}

} // namespace gradfisher
