#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gradfisher/crossdevice.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gradfisher;

TEST_CASE("normal_quantile: agrees with bisection to 1e-10") {
    for (double p : {1e-6, 0.001, 0.01, 0.25, 0.5, 0.75, 0.9, 0.999, 1.0 - 1e-6}) {
        CHECK(std::abs(normal_quantile(p) - oracles::bisect_normal_quantile(p)) < 1e-10);
    }
    CHECK_THROWS_AS(normal_quantile(0.0), ParamError);
    CHECK_THROWS_AS(normal_quantile(1.0), ParamError);
}

TEST_CASE("ks_statistic: near-perfect normal quantile grid scores tiny") {
    const std::size_t n = 100;
    Vector samples(n);
    for (std::size_t i = 0; i < n; ++i)
        samples[i] = normal_quantile((static_cast<double>(i) + 0.5) / n);
    CHECK(ks_statistic(samples) <= 0.005 + 1.0 / (2.0 * n));
}

TEST_CASE("ks_statistic: two-atom bimodal sample scores at least 0.25") {
    Vector samples;
    for (int i = 0; i < 50; ++i) {
        samples.push_back(-1.0);
        samples.push_back(1.0);
    }
    CHECK(ks_statistic(samples) >= 0.25);
}

TEST_CASE("ks_statistic: degenerate and undersized samples") {
    Vector constant(20, 3.14);
    CHECK_THROWS_AS(ks_statistic(constant), DegenerateError);
    Vector tiny{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(ks_statistic(tiny), ParamError);
}

namespace {

std::vector<FeatureObservation> observations_from_columns(
    const std::vector<Vector>& columns, const std::vector<std::size_t>& counts) {
    const std::size_t n = columns.front().size();
    std::vector<FeatureObservation> obs(n);
    for (std::size_t i = 0; i < n; ++i) {
        obs[i].user_id = i;
        obs[i].s = counts.empty() ? 1 : counts[i];
        for (const Vector& col : columns) obs[i].f_bar.push_back(col[i]);
    }
    return obs;
}

} // namespace

TEST_CASE("select_feature: prefers the normal feature over the bimodal one") {
    RandomSource rng(500, 1);
    const std::size_t n = 40;
    Vector bimodal(n), normal(n);
    for (std::size_t i = 0; i < n; ++i) {
        bimodal[i] = (i % 2 == 0) ? -1.0 : 1.0;
        normal[i] = rng.next_gaussian();
    }
    const auto obs = observations_from_columns({bimodal, normal}, {});
    CHECK(select_feature(obs) == 1);
}

TEST_CASE("select_feature: identical features tie-break to index zero") {
    RandomSource rng(501, 2);
    const std::size_t n = 20;
    Vector col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = rng.next_gaussian();
    const auto obs = observations_from_columns({col, col, col}, {});
    CHECK(select_feature(obs) == 0);
}

TEST_CASE("select_feature: the winner minimizes the KS statistic") {
    RandomSource rng(502, 3);
    const std::size_t n = 60, m = 6;
    std::vector<Vector> cols(m, Vector(n));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i) {
            const double z = rng.next_gaussian();
            cols[j][i] = (j % 3 == 0) ? z * z : z; // some skewed columns
        }
    const auto obs = observations_from_columns(cols, {});
    const std::size_t best = select_feature(obs);
    Vector column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = obs[i].f_bar[best];
    const double best_ks = ks_statistic(column);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < n; ++i) column[i] = obs[i].f_bar[j];
        CHECK(best_ks <= ks_statistic(column) + 1e-15);
    }
}

TEST_CASE("select_feature: degenerate features are excluded") {
    RandomSource rng(503, 4);
    const std::size_t n = 24;
    Vector constant(n, 5.0), normal(n);
    for (std::size_t i = 0; i < n; ++i) normal[i] = rng.next_gaussian();
    const auto obs = observations_from_columns({constant, normal}, {});
    CHECK(select_feature(obs) == 1);
    const auto all_bad = observations_from_columns({constant, constant}, {});
    CHECK_THROWS_AS(select_feature(all_bad), DegenerateError);
}

TEST_CASE("fit_gaussian: unit counts reduce to plain mean and uncorrected std") {
    const auto obs = observations_from_columns({Vector{0.0, 2.0}}, {1, 1});
    const GaussianFit fit = fit_gaussian(obs, 0);
    CHECK(fit.mu == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(fit.sigma == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(fit.n_observations == 2);
}

TEST_CASE("fit_gaussian: monte carlo recovery of a known generator") {
    RandomSource rng(504, 5);
    const std::size_t users = 200, per_user = 4;
    std::vector<FeatureObservation> obs(users);
    for (std::size_t u = 0; u < users; ++u) {
        double sum = 0.0;
        for (std::size_t i = 0; i < per_user; ++i) sum += 3.0 + 2.0 * rng.next_gaussian();
        obs[u].user_id = u;
        obs[u].s = per_user;
        obs[u].f_bar = Vector{sum / per_user};
    }
    const GaussianFit fit = fit_gaussian(obs, 0);
    CHECK(std::abs(fit.mu - 3.0) < 0.3);
    CHECK(std::abs(fit.sigma - 2.0) < 0.4);
}

TEST_CASE("fit_gaussian: needs two observations") {
    const auto obs = observations_from_columns({Vector{1.0}}, {1});
    CHECK_THROWS_AS(fit_gaussian(obs, 0), ParamError);
}

TEST_CASE("choose_cutoff: median cut, keep-everything cut, quarter cut") {
    GaussianFit fit;
    fit.mu = 0.7;
    fit.sigma = 1.3;
    CHECK(choose_cutoff(fit, 2) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(choose_cutoff(fit, 1) == kInf);
    fit.mu = 0.0;
    fit.sigma = 1.0;
    // quantile frozen from the bisection oracle
    CHECK(choose_cutoff(fit, 4) == doctest::Approx(-0.67448975019608171).epsilon(1e-9));
    CHECK_THROWS_AS(choose_cutoff(fit, 0), ParamError);
}

TEST_CASE("choose_cutoff: monotone decreasing in the bin count") {
    GaussianFit fit;
    fit.mu = 1.0;
    fit.sigma = 2.0;
    double prev = kInf;
    for (std::size_t m = 1; m <= 16; ++m) {
        const double theta = choose_cutoff(fit, m);
        CHECK(theta <= prev);
        if (m >= 2) CHECK(theta < prev);
        prev = theta;
    }
}

TEST_CASE("prop-2 floor: single-hit frequency matches the closed form") {
    RandomSource root(505, 6);
    for (std::size_t m : {std::size_t{2}, std::size_t{4}, std::size_t{8},
                          std::size_t{16}}) {
        RandomSource rng = root.stream(m);
        const double freq = lowest_bin_single_hit_rate(m, 10000, rng);
        const double closed = std::pow(1.0 - 1.0 / static_cast<double>(m),
                                       static_cast<double>(m - 1));
        CHECK(std::abs(freq - closed) <= 0.02);
        CHECK(freq >= closed - 0.02);
        CHECK(freq >= 1.0 / std::numbers::e - 0.02);
    }
    // the closed form itself never drops below 1/e
    for (std::size_t m = 1; m <= 64; ++m) {
        const double closed = m == 1 ? 1.0
                                     : std::pow(1.0 - 1.0 / static_cast<double>(m),
                                                static_cast<double>(m - 1));
        CHECK(closed >= 1.0 / std::numbers::e);
    }
}

TEST_CASE("one-shot feature attack: single-example users are caught cleanly") {
    const auto& setup = testsupport::trained_setup();
    const auto& cfg = testsupport::default_config();
    const std::size_t c = cfg.target_class;
    RandomSource root(506, 7);
    Composition est_comp{Composition::Kind::k_of_batch, c, 4};
    Composition tgt_comp{Composition::Kind::single_class, c, 0};
    std::vector<User> est = generate_population(setup.task, 60, 10, est_comp,
                                                root.stream(1));
    std::vector<User> tgt = generate_population(setup.task, 30, 1, tgt_comp,
                                                root.stream(2));
    CrossDeviceConfig cdc;
    cdc.expected_targets = 10;
    const OneShotFeatureResult result =
        one_shot_feature_attack(setup.benign, est, tgt, c, cdc);

    CHECK(result.observations.size() == 60); // every estimation user had targets
    for (const FeatureObservation& ob : result.observations) CHECK(ob.s == 4);

    std::size_t below = 0;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        const double fj =
            forward(setup.benign, tgt[i].batch[0].x).feature[result.feature_index];
        const CatchReport& rep = result.reports[i];
        CHECK(rep.queries_used == 1);
        if (fj < result.theta - 1e-6) {
            ++below;
            CHECK(rep.n_caught == 1);
            CHECK(rep.best_cosine >= 0.999);
            REQUIRE(rep.recovered_input.has_value());
            CHECK(rep.input_recovery_error < 1e-6);
        }
    }
    CHECK(below >= 1); // the cutoff keeps some mass at this scale
}

TEST_CASE("one-shot feature attack: estimation users without target data abort") {
    const auto& setup = testsupport::trained_setup();
    const std::size_t c = testsupport::default_config().target_class;
    RandomSource root(507, 8);
    Composition none{Composition::Kind::k_of_batch, c, 0};
    Composition tgt_comp{Composition::Kind::single_class, c, 0};
    std::vector<User> est = generate_population(setup.task, 20, 10, none,
                                                root.stream(1));
    std::vector<User> tgt = generate_population(setup.task, 5, 10, tgt_comp,
                                                root.stream(2));
    CrossDeviceConfig cdc;
    CHECK_THROWS_AS(one_shot_feature_attack(setup.benign, est, tgt, c, cdc),
                    AbortEstimationError);
}

TEST_CASE("estimation quality improves with more users") {
    const auto& setup = testsupport::trained_setup();
    const std::size_t c = testsupport::default_config().target_class;
    RandomSource root(508, 9);
    Composition est_comp{Composition::Kind::k_of_batch, c, 4};

    auto observe = [&](std::size_t n_users, std::uint64_t stream) {
        std::vector<User> users = generate_population(setup.task, n_users, 10, est_comp,
                                                      root.stream(stream));
        const ModelParams fished = class_fishing(setup.benign, c, 1000.0);
        std::vector<FeatureObservation> obs;
        for (User& u : users) {
            const GradientUpdate g = user_update(u, fished);
            FeatureObservation ob;
            ob.user_id = u.user_id;
            ob.f_bar = recover_avg_feature(g, c);
            ob.s = estimate_target_count(g, c);
            obs.push_back(std::move(ob));
        }
        return obs;
    };

    const auto obs_small = observe(25, 1);
    const auto obs_large = observe(225, 2);
    const std::size_t j = select_feature(obs_large);
    const GaussianFit fit_small = fit_gaussian(obs_small, j);
    const GaussianFit fit_large = fit_gaussian(obs_large, j);

    // ground-truth per-example feature pool
    RandomSource pool_rng = root.stream(3);
    Vector pool;
    for (int i = 0; i < 10000; ++i) {
        const Example ex = sample_example(setup.task, c, pool_rng);
        pool.push_back(forward(setup.benign, ex.x).feature[j]);
    }
    const double d_small = fit_vs_empirical_ks(fit_small, pool);
    const double d_large = fit_vs_empirical_ks(fit_large, pool);
    CHECK(d_large < d_small);
}
