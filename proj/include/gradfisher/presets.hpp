#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradfisher/config.hpp"
#include "gradfisher/crossdevice.hpp"
#include "gradfisher/crosssilo.hpp"
#include "gradfisher/csv.hpp"
#include "gradfisher/fedsim.hpp"
#include "gradfisher/fishing.hpp"
#include "gradfisher/model.hpp"
#include "gradfisher/recovery.hpp"

namespace gradfisher {

// Root stream ids: one per consumer so no experiment phase shares draws.
namespace streams {
constexpr std::uint64_t model_init = 1;
constexpr std::uint64_t train_data = 2;
constexpr std::uint64_t train = 3;
constexpr std::uint64_t est_pop = 4;
constexpr std::uint64_t target_pop = 5;
constexpr std::uint64_t monte_carlo = 6;
constexpr std::uint64_t attack_pop = 7;
constexpr std::uint64_t defense_pop = 8;
constexpr std::uint64_t feature_probe = 9;
constexpr std::uint64_t random_feature = 10;
constexpr std::uint64_t eval_pool = 11;
constexpr std::uint64_t prop_batch = 12;
constexpr std::uint64_t agg_pop = 13;
} // namespace streams

struct ExperimentSetup {
    SyntheticTask task;
    ModelParams benign;
    std::vector<Example> train_data;
};

inline ExperimentSetup make_setup(const ExperimentConfig& c) {
    ExperimentSetup s;
    s.task = make_synthetic_task(c.n_classes, c.input_dim, c.within_class_std,
                                 c.mean_radius, c.seed);
    RandomSource root(c.seed, 0);
    RandomSource init_rng = root.stream(streams::model_init);
    RandomSource data_rng = root.stream(streams::train_data);
    RandomSource train_rng = root.stream(streams::train);
    ModelParams fresh = make_model(c.architecture(), init_rng);
    s.train_data = sample_dataset(s.task, c.train_per_class, data_rng);
    s.benign = train_sgd(std::move(fresh), s.train_data, c.train_epochs, c.train_lr,
                         train_rng, c.train_batch_size);
    return s;
}

// The attacked feature for cross-silo runs: largest mean value over a probe
// sample of the target class. Large-mean post-relu features are active for
// essentially every example, so their values are distinct and splittable.
inline std::size_t pick_attack_feature(const ModelParams& model,
                                       const SyntheticTask& task, std::size_t c,
                                       RandomSource rng, std::size_t probes = 64) {
    Vector acc(model.feature_dim(), 0.0);
    for (std::size_t i = 0; i < probes; ++i) {
        const Example ex = sample_example(task, c, rng);
        const Vector f = forward(model, ex.x).feature;
        for (std::size_t k = 0; k < f.size(); ++k) acc[k] += f[k];
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < acc.size(); ++k)
        if (acc[k] > acc[best]) best = k;
    return best;
}

namespace detail {

struct Checks {
    std::vector<std::string> failures;
    void require(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

inline ordered_json population_manifest(const std::vector<User>& users,
                                        const std::string& composition) {
    ordered_json pop;
    pop["composition"] = composition;
    pop["n_users"] = users.size();
    pop["batch_size"] = users.empty() ? 0 : users.front().batch.size();
    ordered_json hists = ordered_json::array();
    for (const User& u : users) {
        ordered_json h;
        h["user_id"] = u.user_id;
        ordered_json labels;
        for (const auto& [label, count] : label_histogram(u))
            labels[std::to_string(label)] = count;
        h["labels"] = labels;
        hists.push_back(h);
    }
    pop["users"] = hists;
    return pop;
}

inline void write_json(const ordered_json& j, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << '\n';
}

inline double input_cosine(const std::optional<Vector>& recovered, const Vector& truth) {
    if (!recovered) return 0.0;
    return cosine_of_flats(*recovered, truth);
}

// Extractor-block residual of Prop-1 style suppression: how far the batch
// update is from the mean over target-class contributions alone.
inline double suppression_residual(const ModelParams& fished,
                                   std::span<const Example> batch,
                                   std::size_t target_class) {
    const GradientUpdate g = batch_gradient(fished, batch);
    const Vector g_phi = flatten_extractor(g);
    Vector target_sum(g_phi.size(), 0.0);
    std::size_t targets = 0;
    for (const Example& ex : batch) {
        if (ex.y != target_class) continue;
        ++targets;
        const GradientUpdate gi = backward(fished, forward(fished, ex.x), ex.y);
        const Vector fi = flatten_extractor(gi);
        for (std::size_t k = 0; k < fi.size(); ++k) target_sum[k] += fi[k];
    }
    if (targets == 0) throw ParamError("suppression_residual: no target examples");
    Vector diff(g_phi.size());
    for (std::size_t k = 0; k < diff.size(); ++k)
        diff[k] = g_phi[k] - target_sum[k] / static_cast<double>(batch.size());
    return norm2(diff) / norm2(g_phi);
}

} // namespace detail

// --- individual presets ------------------------------------------------------

inline ordered_json preset_prop1_sweep(const ExperimentConfig& c,
                                       const std::filesystem::path& out,
                                       detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    RandomSource root(c.seed, 0);
    RandomSource pop_rng = root.stream(streams::prop_batch);
    Composition comp{Composition::Kind::k_of_batch, c.target_class, c.prop1_targets};
    std::vector<User> users =
        generate_population(setup.task, 1, c.prop1_batch_size, comp, pop_rng);

    CsvWriter csv((out / "prop1.csv").string(), {"alpha", "residual"});
    std::vector<double> alphas = c.prop1_alphas;
    std::sort(alphas.begin(), alphas.end());
    std::map<std::string, double> residuals;
    std::vector<double> values;
    for (double alpha : alphas) {
        const ModelParams fished = class_fishing(setup.benign, c.target_class, alpha);
        const double r =
            detail::suppression_residual(fished, users[0].batch, c.target_class);
        csv.field(alpha).field(r).end_row();
        residuals[format_double(alpha)] = r;
        values.push_back(r);
    }
    bool dominant = true;
    for (std::size_t i = 0; i + 1 < values.size(); ++i)
        dominant = dominant && values.back() < values[i];
    checks.require(dominant,
                   "prop1: residual at the largest alpha beats every smaller alpha");
    checks.require(values.back() < 1e-4, "prop1: residual at the largest alpha < 1e-4");

    ordered_json metrics;
    metrics["residuals"] = residuals;
    return metrics;
}

inline ordered_json preset_prop2_montecarlo(const ExperimentConfig& c,
                                            const std::filesystem::path& out,
                                            detail::Checks& checks) {
    RandomSource root(c.seed, 0);
    CsvWriter csv((out / "prop2.csv").string(),
                  {"bin_count", "frequency", "closed_form"});
    ordered_json rows = ordered_json::array();
    for (std::size_t m : c.mc_bin_counts) {
        RandomSource rng = root.stream(streams::monte_carlo).stream(m);
        const double freq = lowest_bin_single_hit_rate(m, c.mc_trials, rng);
        const double closed =
            m == 1 ? 1.0
                   : std::pow(1.0 - 1.0 / static_cast<double>(m),
                              static_cast<double>(m - 1));
        csv.field(m).field(freq).field(closed).end_row();
        ordered_json row;
        row["bin_count"] = m;
        row["frequency"] = freq;
        row["closed_form"] = closed;
        rows.push_back(row);
        checks.require(std::abs(freq - closed) <= 0.02,
                       "prop2: |frequency - closed form| <= 0.02 at M=" +
                           std::to_string(m));
        checks.require(freq >= 1.0 / std::numbers::e - 0.02,
                       "prop2: frequency >= 1/e - 0.02 at M=" + std::to_string(m));
    }
    ordered_json metrics;
    metrics["bins"] = rows;
    return metrics;
}

inline ordered_json preset_cross_device(const ExperimentConfig& c,
                                        const std::filesystem::path& out,
                                        detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    save_checkpoint(setup.benign, (out / "model.ckpt").string());
    save_dataset_csv(setup.train_data, (out / "dataset.csv").string());

    RandomSource root(c.seed, 0);
    RandomSource est_rng = root.stream(streams::est_pop);
    RandomSource tgt_rng = root.stream(streams::target_pop);
    Composition est_comp{Composition::Kind::k_of_batch, c.target_class,
                         c.targets_per_user};
    Composition tgt_comp{Composition::Kind::single_class, c.target_class, 0};
    std::vector<User> est_users = generate_population(
        setup.task, c.estimation_users, c.user_batch_size, est_comp, est_rng);
    std::vector<User> tgt_users = generate_population(
        setup.task, c.target_users, c.user_batch_size, tgt_comp, tgt_rng);

    ordered_json manifest;
    manifest["seed"] = c.seed;
    ordered_json pops = ordered_json::array();
    pops.push_back(detail::population_manifest(est_users, "k_of_batch"));
    pops.push_back(detail::population_manifest(tgt_users, "single_class"));
    manifest["populations"] = pops;
    detail::write_json(manifest, out / "population.json");

    CrossDeviceConfig cdc;
    cdc.alpha = c.alpha;
    cdc.beta = c.beta;
    cdc.expected_targets = c.expected_targets;
    cdc.combine_with_class = c.combine_with_class;
    cdc.threads = c.threads;
    cdc.support_floor = c.support_floor;
    const OneShotFeatureResult result = one_shot_feature_attack(
        setup.benign, est_users, tgt_users, c.target_class, cdc);

    CsvWriter est_csv((out / "estimation.csv").string(), {"user_id", "s", "f_bar_j"});
    for (const FeatureObservation& ob : result.observations)
        est_csv.field(ob.user_id)
            .field(ob.s)
            .field(ob.f_bar[result.feature_index])
            .end_row();

    CsvWriter catch_csv((out / "catches.csv").string(),
                        {"user_id", "n_caught", "best_cosine", "queries_used",
                         "input_recovery_error"});
    std::map<std::string, std::size_t> histogram{
        {"0", 0}, {"1", 0}, {"2", 0}, {"3_plus", 0}};
    for (const CatchReport& rep : result.reports) {
        catch_csv.field(rep.user_id)
            .field(rep.n_caught)
            .field(rep.best_cosine)
            .field(rep.queries_used)
            .field(rep.input_recovery_error)
            .end_row();
        if (rep.n_caught >= 3) ++histogram["3_plus"];
        else ++histogram[std::to_string(rep.n_caught)];
    }
    const double rate_one = static_cast<double>(histogram["1"]) /
                            static_cast<double>(result.reports.size());

    // Ablation: same users, same fit machinery, but a uniformly random
    // feature instead of the KS-selected one.
    RandomSource feat_rng = root.stream(streams::random_feature);
    const std::size_t j_random =
        static_cast<std::size_t>(feat_rng.next_below(setup.benign.feature_dim()));
    double rate_random = 0.0;
    ordered_json random_block;
    random_block["feature_index"] = j_random;
    try {
        const GaussianFit rfit = fit_gaussian(result.observations, j_random);
        const double rtheta = choose_cutoff(rfit, result.bin_count);
        const std::vector<CatchReport> rreports = feature_fishing_round(
            setup.benign, tgt_users, c.target_class, j_random, rtheta, cdc);
        std::size_t ones = 0;
        for (const CatchReport& rep : rreports) ones += (rep.n_caught == 1);
        rate_random = static_cast<double>(ones) / static_cast<double>(rreports.size());
        random_block["theta"] = rtheta;
    } catch (const DegenerateError&) {
        random_block["theta"] = nullptr; // constant feature: no cutoff to place
    }
    random_block["rate_one"] = rate_random;

    checks.require(rate_one >= 0.27 && rate_one <= 0.49,
                   "cross-device: exactly-one catch rate in [0.27, 0.49]");
    checks.require(rate_one >= rate_random,
                   "cross-device: KS-selected feature >= random feature");

    ordered_json metrics;
    metrics["observations"] = result.observations.size();
    metrics["feature_index"] = result.feature_index;
    metrics["ks_stat"] = result.fit.ks_stat;
    metrics["mu"] = result.fit.mu;
    metrics["sigma"] = result.fit.sigma;
    metrics["theta"] = result.theta;
    metrics["bin_count"] = result.bin_count;
    metrics["histogram"] = histogram;
    metrics["rate_one"] = rate_one;
    metrics["random_feature"] = random_block;
    return metrics;
}

inline ordered_json preset_binary_queries(const ExperimentConfig& c,
                                          const std::filesystem::path& out,
                                          detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    RandomSource root(c.seed, 0);
    const std::size_t j = pick_attack_feature(setup.benign, setup.task, c.target_class,
                                              root.stream(streams::feature_probe));

    CsvWriter scaling_csv((out / "scaling.csv").string(), {"batch_size", "mean_queries"});
    CsvWriter query_csv((out / "queries.csv").string(),
                        {"user_id", "query_index", "cutoff", "recovered_f", "s_below"});
    Vector log2n, means;
    ordered_json rows = ordered_json::array();
    for (std::size_t idx = 0; idx < c.scaling_batch_sizes.size(); ++idx) {
        const std::size_t n = c.scaling_batch_sizes[idx];
        RandomSource pop_rng = root.stream(streams::attack_pop).stream(n);
        Composition comp{Composition::Kind::single_class, c.target_class, 0};
        std::vector<User> users =
            generate_population(setup.task, c.attack_users, n, comp, pop_rng);
        std::vector<QueryLog> logs(users.size());
        std::vector<double> queries(users.size(), 0.0);
        parallel_for(users.size(), c.threads, [&](std::size_t u) {
            OneShotBinaryOptions opt;
            opt.query_budget = c.query_budget;
            opt.log = &logs[u];
            try {
                const CatchReport rep = one_shot_binary(users[u], setup.benign,
                                                        c.target_class, j, c.beta, opt);
                queries[u] = static_cast<double>(rep.queries_used);
            } catch (const GiveUpError&) {
                queries[u] = static_cast<double>(c.query_budget);
            }
        });
        for (const QueryLog& log : logs)
            for (const QueryRecord& q : log)
                query_csv.field(q.user_id)
                    .field(q.query_index)
                    .field(q.cutoff)
                    .field(q.recovered_f)
                    .field(q.s_below)
                    .end_row();
        const double mq = mean(queries);
        scaling_csv.field(n).field(mq).end_row();
        log2n.push_back(std::log2(static_cast<double>(n)));
        means.push_back(mq);
        ordered_json row;
        row["batch_size"] = n;
        row["mean_queries"] = mq;
        rows.push_back(row);
        if (n == 256)
            checks.require(mq >= 5.0 && mq <= 11.0,
                           "binary-queries: mean queries at n=256 in [5, 11]");
    }

    // least-squares slope of mean queries against log2(n)
    double slope = 0.0;
    if (log2n.size() >= 2) {
        const double mx = mean(log2n);
        const double my = mean(means);
        double sxx = 0.0, sxy = 0.0;
        for (std::size_t i = 0; i < log2n.size(); ++i) {
            sxx += (log2n[i] - mx) * (log2n[i] - mx);
            sxy += (log2n[i] - mx) * (means[i] - my);
        }
        slope = sxy / sxx;
        checks.require(slope >= 0.5 && slope <= 2.5,
                       "binary-queries: log2 fit slope in [0.5, 2.5]");
    }

    ordered_json metrics;
    metrics["feature_index"] = j;
    metrics["rows"] = rows;
    metrics["log2_slope"] = slope;
    return metrics;
}

inline ordered_json preset_binary_full(const ExperimentConfig& c,
                                       const std::filesystem::path& out,
                                       detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    RandomSource root(c.seed, 0);
    const std::size_t j = pick_attack_feature(setup.benign, setup.task, c.target_class,
                                              root.stream(streams::feature_probe));
    const std::size_t n = c.binary_batch_size;
    Composition comp{Composition::Kind::single_class, c.target_class, 0};
    std::vector<User> users = generate_population(setup.task, 1, n, comp,
                                                  root.stream(streams::attack_pop));

    QueryLog log;
    BinaryAttackOptions opt;
    opt.log = &log;
    const BinaryAttackResult result =
        binary_attack(users[0], setup.benign, c.target_class, j, n, c.beta, opt);

    CsvWriter query_csv((out / "queries.csv").string(),
                        {"user_id", "query_index", "cutoff", "recovered_f", "s_below"});
    for (const QueryRecord& q : log)
        query_csv.field(q.user_id)
            .field(q.query_index)
            .field(q.cutoff)
            .field(q.recovered_f)
            .field(q.s_below)
            .end_row();

    // per-example oracle under the everything-below cutoff
    const ModelParams oracle_params =
        feature_fishing(setup.benign, c.target_class, j, kInf, c.beta);
    const std::vector<GradientUpdate> oracle =
        sorted_per_example_gradients(oracle_params, users[0].batch, j);

    CsvWriter seg_csv((out / "segments.csv").string(),
                      {"segment", "count", "mean_feature", "isolated_at_query",
                       "cosine_vs_oracle"});
    bool all_single = result.segments.size() == n;
    double min_cos = 1.0;
    for (std::size_t i = 0; i < result.segments.size(); ++i) {
        const RecoveredSegment& seg = result.segments[i];
        all_single = all_single && seg.count == 1;
        double cos = 0.0;
        if (i < oracle.size()) cos = cosine_similarity(seg.gradient, oracle[i]);
        min_cos = std::min(min_cos, cos);
        seg_csv.field(i)
            .field(seg.count)
            .field(seg.mean_feature)
            .field(seg.isolated_at_query)
            .field(cos)
            .end_row();
    }

    // telescoping: the segment sums must reassemble the full-batch update
    GradientUpdate total = zeros_like(setup.benign);
    for (const RecoveredSegment& seg : result.segments)
        add_in_place(total, seg.gradient);
    const GradientUpdate& full = result.state.G.rbegin()->second.sum;
    GradientUpdate diff = total;
    Vector full_flat = flatten(full);
    std::size_t idx = 0;
    for_each_entry(diff, [&](double& x) { x -= full_flat[idx++]; });
    const double telescope = flat_norm(diff) / flat_norm(full);

    checks.require(all_single, "binary-full: every example isolated");
    checks.require(min_cos >= 0.999, "binary-full: per-example cosine >= 0.999");
    checks.require(telescope <= 1e-10, "binary-full: telescoping sum within 1e-10");
    checks.require(result.queries_used <= n * n,
                   "binary-full: queries within n^2 worst case");

    ordered_json metrics;
    metrics["feature_index"] = j;
    metrics["batch_size"] = n;
    metrics["segments"] = result.segments.size();
    metrics["queries_used"] = result.queries_used;
    metrics["min_cosine"] = min_cos;
    metrics["telescope_residual"] = telescope;
    return metrics;
}

inline ordered_json preset_disparate_impact(const ExperimentConfig& c,
                                            const std::filesystem::path& out,
                                            detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    RandomSource root(c.seed, 0);
    const std::size_t j = pick_attack_feature(setup.benign, setup.task, c.target_class,
                                              root.stream(streams::feature_probe));
    Composition comp{Composition::Kind::single_class, c.target_class, 0};
    std::vector<User> users =
        generate_population(setup.task, c.disparate_users, c.disparate_batch_size, comp,
                            root.stream(streams::attack_pop));

    QueryLog log;
    const DisparateImpactResult result = disparate_impact_experiment(
        users, setup.benign, c.target_class, j, c.beta, &log);

    CsvWriter iso_csv((out / "isolation.csv").string(),
                      {"user_id", "min_example_queries", "median_example_queries"});
    for (const DisparateImpactRow& row : result.rows)
        iso_csv.field(row.user_id)
            .field(row.min_example_queries)
            .field(row.median_example_queries)
            .end_row();
    CsvWriter query_csv((out / "queries.csv").string(),
                        {"user_id", "query_index", "cutoff", "recovered_f", "s_below"});
    for (const QueryRecord& q : log)
        query_csv.field(q.user_id)
            .field(q.query_index)
            .field(q.cutoff)
            .field(q.recovered_f)
            .field(q.s_below)
            .end_row();

    checks.require(result.mean_min_queries < result.mean_median_queries,
                   "disparate-impact: min-feature example isolated sooner than median");

    ordered_json metrics;
    metrics["feature_index"] = j;
    metrics["mean_min_queries"] = result.mean_min_queries;
    metrics["mean_median_queries"] = result.mean_median_queries;
    return metrics;
}

inline ordered_json preset_defense_sweep(const ExperimentConfig& c,
                                         const std::filesystem::path& out,
                                         detail::Checks& checks) {
    const ExperimentSetup setup = make_setup(c);
    RandomSource root(c.seed, 0);
    const std::size_t j = pick_attack_feature(setup.benign, setup.task, c.target_class,
                                              root.stream(streams::feature_probe));
    const double clip = c.clip_norm ? *c.clip_norm : 1.0;

    CsvWriter csv((out / "defense.csv").string(),
                  {"noise_std", "recovery_cosine", "queries_used", "gave_up"});
    ordered_json rows = ordered_json::array();
    double prev_cos = kInf;
    bool monotone = true;
    double last_cos = 1.0;
    Composition comp{Composition::Kind::single_class, c.target_class, 0};
    for (double noise : c.noise_sweep) {
        // identical batch each round: same stream, fresh defense
        std::vector<User> users = generate_population(
            setup.task, 1, c.defense_batch_size, comp, root.stream(streams::defense_pop));
        users[0].defense = DefenseConfig{clip, noise, AggregationMode::mean};

        double cos = 0.0;
        std::size_t queries = c.query_budget;
        bool gave_up = false;
        // ground truth: the minimum-feature example of the fixed batch
        std::vector<std::size_t> order;
        sorted_per_example_gradients(
            feature_fishing(setup.benign, c.target_class, j, kInf, c.beta),
            users[0].batch, j, nullptr, &order);
        const Vector truth = users[0].batch[order.front()].x;
        try {
            OneShotBinaryOptions opt;
            opt.query_budget = c.query_budget;
            const CatchReport rep =
                one_shot_binary(users[0], setup.benign, c.target_class, j, c.beta, opt);
            queries = rep.queries_used;
            cos = detail::input_cosine(rep.recovered_input, truth);
        } catch (const GiveUpError&) {
            gave_up = true;
        } catch (const NoSignalError&) {
            // noise can flip the mined bias sign outright
            gave_up = true;
        }
        csv.field(noise).field(cos).field(queries).field(std::size_t{gave_up ? 1u : 0u})
            .end_row();
        ordered_json row;
        row["noise_std"] = noise;
        row["recovery_cosine"] = cos;
        row["queries_used"] = queries;
        row["gave_up"] = gave_up;
        rows.push_back(row);
        if (cos > prev_cos + 1e-12) monotone = false;
        prev_cos = cos;
        last_cos = cos;
    }
    checks.require(monotone, "defense-sweep: recovery cosine non-increasing in noise");
    checks.require(last_cos < 0.5, "defense-sweep: cosine < 0.5 at the largest noise");

    // median vs mean aggregation across users: one target-holding user among
    // eight; the median wipes the row-c bias signal the attack mines.
    RandomSource agg_rng = root.stream(streams::agg_pop);
    Composition mixed{Composition::Kind::k_of_batch, c.target_class,
                      c.targets_per_user};
    Composition clean{Composition::Kind::k_of_batch, c.target_class, 0};
    std::vector<User> holders =
        generate_population(setup.task, 1, c.user_batch_size, mixed, agg_rng);
    std::vector<User> others = generate_population(setup.task, 7, c.user_batch_size,
                                                   clean, agg_rng.stream(1));
    const ModelParams est_params = class_fishing(setup.benign, c.target_class, c.alpha);
    std::vector<GradientUpdate> updates;
    updates.push_back(user_update(holders[0], est_params));
    for (User& u : others) updates.push_back(user_update(u, est_params));
    const GradientUpdate agg_mean = aggregate(updates, AggregationMode::mean);
    const GradientUpdate agg_median = aggregate(updates, AggregationMode::median);
    ordered_json agg;
    agg["mean_bias_signal"] = std::abs(agg_mean.head_bias[c.target_class]);
    agg["median_bias_signal"] = std::abs(agg_median.head_bias[c.target_class]);

    ordered_json metrics;
    metrics["feature_index"] = j;
    metrics["clip_norm"] = clip;
    metrics["rows"] = rows;
    metrics["aggregation"] = agg;
    return metrics;
}

// --- driver -------------------------------------------------------------------

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "prop1-sweep",   "prop2-montecarlo", "cross-device", "binary-queries",
        "binary-full",   "disparate-impact", "defense-sweep"};
    return names;
}

// Runs one preset, writes its artifacts under config.out_dir, and returns 0
// iff every preset-internal assertion passed.
inline int run_preset(const std::string& name, const ExperimentConfig& config,
                      std::ostream& diag = std::cerr) {
    config.validate();
    const std::filesystem::path out(config.out_dir);
    std::filesystem::create_directories(out);
    detail::write_json(to_json(config), out / "config-resolved.json");

    detail::Checks checks;
    ordered_json metrics;
    if (name == "prop1-sweep") metrics = preset_prop1_sweep(config, out, checks);
    else if (name == "prop2-montecarlo")
        metrics = preset_prop2_montecarlo(config, out, checks);
    else if (name == "cross-device") metrics = preset_cross_device(config, out, checks);
    else if (name == "binary-queries")
        metrics = preset_binary_queries(config, out, checks);
    else if (name == "binary-full") metrics = preset_binary_full(config, out, checks);
    else if (name == "disparate-impact")
        metrics = preset_disparate_impact(config, out, checks);
    else if (name == "defense-sweep")
        metrics = preset_defense_sweep(config, out, checks);
    else
        throw ParamError("unknown preset '" + name + "'");

    ordered_json summary;
    summary["schema"] = 1;
    summary["preset"] = name;
    summary["seed"] = config.seed;
    summary["metrics"] = metrics;
    summary["failed_checks"] = checks.failures;
    detail::write_json(summary, out / "summary.json");

    for (const std::string& f : checks.failures) diag << "FAILED: " << f << '\n';
    return checks.failures.empty() ? 0 : 1;
}

} // namespace gradfisher
