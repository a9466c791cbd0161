#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "gradfisher/errors.hpp"
#include "gradfisher/fedsim.hpp"
#include "gradfisher/fishing.hpp"
#include "gradfisher/recovery.hpp"

namespace gradfisher {

// One attack round: the user computes their update for whatever parameters
// the server sent. The user's batch is fixed for the lifetime of the attack.
inline GradientUpdate query_user(User& user, const ModelParams& params) {
    return user_update(user, params);
}

struct QueryRecord {
    std::size_t user_id = 0;
    std::size_t query_index = 0;
    double cutoff = 0.0;
    double recovered_f = std::numeric_limits<double>::quiet_NaN();
    double s_below = 0.0; // pre-rounding count estimate
};

using QueryLog = std::vector<QueryRecord>;

namespace detail {

// Sorted values with relative-tolerance membership; +inf compares exactly.
class ToleranceSet {
public:
    explicit ToleranceSet(double rtol) : rtol_(rtol) {}

    bool contains(double v) const {
        if (std::isinf(v)) return has_inf_;
        auto it = std::lower_bound(values_.begin(), values_.end(), v);
        if (it != values_.end() && close(*it, v)) return true;
        if (it != values_.begin() && close(*std::prev(it), v)) return true;
        return false;
    }

    void insert(double v) {
        if (std::isinf(v)) {
            has_inf_ = true;
            return;
        }
        values_.insert(std::lower_bound(values_.begin(), values_.end(), v), v);
    }

    const std::vector<double>& values() const { return values_; }

private:
    bool close(double a, double b) const {
        return std::abs(a - b) <= rtol_ * std::max({1.0, std::abs(a), std::abs(b)});
    }
    double rtol_;
    std::vector<double> values_;
    bool has_inf_ = false;
};

} // namespace detail

// Cumulative result of one productive query: the update scaled back to a sum
// over the examples below the cutoff.
struct CumulativeEntry {
    GradientUpdate sum;   // query update x batch size
    double recovered_mean = 0.0;
    double s_raw = 0.0;   // pre-rounding below-count estimate
    std::size_t count = 0;
    double cutoff_used = 0.0;
    std::size_t query_index = 0;
};

// The binary attack's working state: recovered feature values seen so far,
// the ordered cumulative-gradient map, and the pending cutoff list.
struct BinaryTreeState {
    detail::ToleranceSet visited{1e-9};
    std::map<double, CumulativeEntry> G; // keyed by recovered mean feature, ascending
    std::vector<double> C;               // pending cutoffs, processed LIFO
    std::size_t queries = 0;
};

struct RecoveredSegment {
    GradientUpdate gradient;  // sum over the segment's examples
    std::size_t count = 1;    // >1 means the group could not be split further
    double mean_feature = 0.0;
    std::size_t isolated_at_query = 0; // query index at which it became computable
};

struct BinaryAttackResult {
    std::vector<RecoveredSegment> segments; // ascending feature order
    std::size_t queries_used = 0;
    BinaryTreeState state;
};

struct BinaryAttackOptions {
    // Two feature values closer than this are declared inseparable and kept
    // as one merged group instead of being split forever.
    double feature_tol = 1e-7;
    std::size_t max_queries = 0; // 0: derive 4*n*n + 16 from the batch size
    QueryLog* log = nullptr;
};

namespace detail {

struct Probe {
    GradientUpdate g;
    bool signal = false;
    double f = std::numeric_limits<double>::quiet_NaN();
    double s_raw = 0.0;
    std::size_t count = 0;
    double beta_used = 0.0;
};

struct CutoffBounds {
    double max_cutoff = -kInf; // largest cutoff observed to produce this count
    double min_cutoff = kInf;  // smallest
};

class BinaryAttackDriver {
public:
    BinaryAttackDriver(User& user, const ModelParams& benign, std::size_t c,
                       std::size_t j, std::size_t n, double beta,
                       const BinaryAttackOptions& opt)
        : user_(user), benign_(benign), c_(c), j_(j), n_(n), beta_(beta), opt_(opt),
          queried_(1e-12), prefix_seen_(n + 1, false) {
        if (n_ == 0) throw ParamError("binary_attack: batch size must be >= 1");
        max_queries_ = opt.max_queries ? opt.max_queries : 4 * n_ * n_ + 16;
    }

    // every prefix size 1..n has a clean cumulative entry: nothing left to ask
    bool complete() const { return prefixes_found_ == n_; }

    static bool clean(const Probe& p) {
        return p.signal && std::abs(p.s_raw - std::round(p.s_raw)) < 0.01;
    }

    Probe probe(double cutoff, double beta_use) {
        const ModelParams fished = feature_fishing(benign_, c_, j_, cutoff, beta_use);
        Probe p;
        p.g = query_user(user_, fished);
        p.beta_used = beta_use;
        ++state_.queries;
        const double db = p.g.head_bias[c_];
        p.signal = std::abs(db) > kNoSignalTol && db < 0.0;
        if (p.signal) {
            p.f = p.g.head_weight.at(c_, j_) / db;
            p.s_raw = -static_cast<double>(p.g.batch_size) * db;
            p.count = estimate_target_count(p.g, c_);
            // fractional readings mean the cutoff grazed a feature's logit
            // transition; only exact ones pin down cutoff bounds
            if (p.count > 0 && clean(p)) {
                auto& b = bounds_[p.count];
                b.max_cutoff = std::max(b.max_cutoff, cutoff);
                b.min_cutoff = std::min(b.min_cutoff, cutoff);
            }
        }
        if (opt_.log)
            opt_.log->push_back({user_.user_id, state_.queries, cutoff, p.f, p.s_raw});
        return p;
    }

    // A fractional reading is resolved by re-querying with an escalated logit
    // scale: the sharper boundary snaps the grazing example to one side. The
    // scale is a per-query server knob, and the gradient is renormalized back
    // in record(), so entries in G stay mutually consistent.
    Probe crisp_probe(double cutoff) {
        Probe p = probe(cutoff, beta_);
        for (double boost : {1e6, 1e9, 1e12}) {
            if (!p.signal || clean(p) || !budget_left()) break;
            if (boost <= p.beta_used) continue;
            p = probe(cutoff, boost);
        }
        return p;
    }

    bool budget_left() const { return state_.queries < max_queries_; }

    // Alg-1 style cutoff tree. The worklist is consumed newest-first with the
    // recovered mean pushed last, so the attack descends toward the minimum
    // feature before widening; mirrored children explore upward. Cutoffs are
    // never repeated, and a singleton spawns no further descent.
    void run_tree() {
        state_.C.push_back(kInf);
        while (!state_.C.empty() && budget_left() && !complete()) {
            const double cutoff = state_.C.back();
            state_.C.pop_back();
            if (queried_.contains(cutoff)) continue;
            queried_.insert(cutoff);
            const Probe p = crisp_probe(cutoff);
            if (!p.signal || p.count == 0 || !clean(p)) continue;
            if (state_.visited.contains(p.f)) continue;
            state_.visited.insert(p.f);
            record(p, cutoff);
            if (!std::isinf(cutoff)) state_.C.push_back(2.0 * cutoff - p.f);
            if (p.count >= 2) state_.C.push_back(p.f);
        }
    }

    // Close remaining count gaps by bisecting between cutoffs with known
    // counts. Each probe either reveals a new prefix or halves an interval;
    // intervals narrower than feature_tol are declared merged.
    void close_gaps() {
        bool progress = true;
        while (progress && budget_left() && !complete()) {
            progress = false;
            auto it = bounds_.begin();
            if (it == bounds_.end()) break;
            for (auto next = std::next(it); next != bounds_.end(); ++it, ++next) {
                const std::size_t lo_count = it->first;
                const std::size_t hi_count = next->first;
                if (hi_count - lo_count < 2) continue;
                const double lo_cut = it->second.max_cutoff;
                double hi_cut = next->second.min_cutoff;
                if (std::isinf(hi_cut)) {
                    if (!find_finite_top(lo_cut)) continue;
                    hi_cut = bounds_[hi_count].min_cutoff;
                    if (std::isinf(hi_cut)) continue;
                }
                if (hi_cut - lo_cut < opt_.feature_tol) continue; // merged group
                if (!budget_left()) break;
                const double mid = lo_cut + (hi_cut - lo_cut) / 2.0;
                if (queried_.contains(mid)) break;
                queried_.insert(mid);
                const Probe p = crisp_probe(mid);
                if (clean(p) && p.count > 0 && !state_.visited.contains(p.f)) {
                    state_.visited.insert(p.f);
                    record(p, mid);
                }
                progress = true;
                break; // bounds changed; rescan from the bottom
            }
        }
    }

    // The topmost prefix is discovered at +inf; bisecting the top gap needs a
    // finite cutoff above every feature, found by doubling an upward span.
    bool find_finite_top(double lo_cut) {
        if (state_.G.empty()) return false;
        const double top_mean = state_.G.rbegin()->first;
        double span = std::isinf(lo_cut) ? 1.0 : std::max(1.0, top_mean - lo_cut);
        for (int attempt = 0; attempt < 64 && budget_left(); ++attempt) {
            const double trial = top_mean + span;
            if (!queried_.contains(trial)) {
                queried_.insert(trial);
                const Probe p = crisp_probe(trial);
                if (clean(p) && p.count > 0 && !state_.visited.contains(p.f)) {
                    state_.visited.insert(p.f);
                    record(p, trial);
                }
                if (clean(p) && p.count >= n_) return true;
            }
            span *= 2.0;
        }
        return false;
    }

    // Segments = first differences of the cumulative sums in ascending
    // feature order. A cutoff landing inside a feature's logit transition can
    // leave two entries with the same rounded count; the entry with the
    // cleaner integer reading wins.
    BinaryAttackResult finish() {
        std::map<std::size_t, const CumulativeEntry*> by_count;
        for (const auto& [f, entry] : state_.G) {
            auto it = by_count.find(entry.count);
            if (it == by_count.end()) {
                by_count.emplace(entry.count, &entry);
            } else {
                const double frac_old =
                    std::abs(it->second->s_raw - std::round(it->second->s_raw));
                const double frac_new = std::abs(entry.s_raw - std::round(entry.s_raw));
                if (frac_new < frac_old) it->second = &entry;
            }
        }
        BinaryAttackResult result;
        result.queries_used = state_.queries;
        const CumulativeEntry* prev = nullptr;
        for (const auto& [cnt, entry] : by_count) {
            if (cnt == 0) continue;
            RecoveredSegment seg;
            seg.gradient = entry->sum;
            if (prev) {
                Vector prev_flat = flatten(prev->sum);
                std::size_t idx = 0;
                for_each_entry(seg.gradient, [&](double& x) { x -= prev_flat[idx++]; });
            }
            const std::size_t prev_count = prev ? prev->count : 0;
            const double prev_mean = prev ? prev->recovered_mean : 0.0;
            seg.count = entry->count - prev_count;
            seg.mean_feature =
                (static_cast<double>(entry->count) * entry->recovered_mean -
                 static_cast<double>(prev_count) * prev_mean) /
                static_cast<double>(seg.count);
            seg.isolated_at_query =
                std::max(entry->query_index, prev ? prev->query_index : std::size_t{0});
            seg.gradient.batch_size = seg.count;
            result.segments.push_back(std::move(seg));
            prev = entry;
        }
        result.state = std::move(state_);
        return result;
    }

private:
    void record(const Probe& p, double cutoff) {
        CumulativeEntry entry;
        entry.sum = scaled(p.g, static_cast<double>(n_));
        if (p.beta_used != beta_) {
            // fished extractor gradients are exactly proportional to the
            // logit scale; head gradients are scale-free
            const double ratio = beta_ / p.beta_used;
            for (LayerGrad& l : entry.sum.extractor) {
                for (double& x : l.weight.data) x *= ratio;
                for (double& x : l.bias) x *= ratio;
            }
        }
        entry.sum.batch_size = p.count;
        entry.recovered_mean = p.f;
        entry.s_raw = p.s_raw;
        entry.count = p.count;
        entry.cutoff_used = cutoff;
        entry.query_index = state_.queries;
        state_.G.emplace(p.f, std::move(entry));
        if (p.count >= 1 && p.count <= n_ && !prefix_seen_[p.count]) {
            prefix_seen_[p.count] = true;
            ++prefixes_found_;
        }
    }

    User& user_;
    const ModelParams& benign_;
    std::size_t c_, j_, n_;
    double beta_;
    BinaryAttackOptions opt_;
    BinaryTreeState state_;
    ToleranceSet queried_;
    std::map<std::size_t, CutoffBounds> bounds_;
    std::size_t max_queries_ = 0;
    std::vector<bool> prefix_seen_;
    std::size_t prefixes_found_ = 0;
};

} // namespace detail

// Full cross-silo binary attack: reconstruct every per-example gradient of a
// fixed all-target-class user batch by walking a cutoff tree over feature j.
inline BinaryAttackResult binary_attack(User& user, const ModelParams& benign,
                                        std::size_t target_class, std::size_t j,
                                        std::size_t n, double beta,
                                        const BinaryAttackOptions& opt = {}) {
    if (n != user.batch.size())
        throw ContractError("binary_attack: declared batch size does not match user");
    detail::BinaryAttackDriver driver(user, benign, target_class, j, n, beta, opt);
    driver.run_tree();
    driver.close_gaps();
    return driver.finish();
}

struct OneShotBinaryOptions {
    std::size_t query_budget = 64;
    QueryLog* log = nullptr;
    // |f_new - f_old| below this (relative) confirms the below-set stopped
    // changing, i.e. it is a single example.
    double convergence_tol = 1e-6;
};

// Log-depth variant: repeatedly move the cutoff to the recovered mean until
// the below-set is a single example (always the batch minimum along j).
// Isolation is accepted on an exact integer count reading of one, or on
// convergence of the recovered mean (which an unknown per-example clipping
// factor cannot distort); otherwise the descent continues.
inline CatchReport one_shot_binary(User& user, const ModelParams& benign,
                                   std::size_t target_class, std::size_t j,
                                   double beta, const OneShotBinaryOptions& opt = {}) {
    const std::size_t n = user.batch.size();
    double cutoff = kInf;
    double backoff_hi = kInf; // last cutoff that produced signal
    double last_f = std::numeric_limits<double>::quiet_NaN();
    GradientUpdate last_g;
    ModelParams last_params;
    bool have_last = false;

    std::size_t queries = 0;
    std::optional<GradientUpdate> isolated;
    ModelParams isolated_params;

    while (queries < opt.query_budget) {
        const ModelParams fished = feature_fishing(benign, target_class, j, cutoff, beta);
        const GradientUpdate g = query_user(user, fished);
        ++queries;
        const double db = g.head_bias[target_class];
        const bool signal = std::abs(db) > kNoSignalTol && db < 0.0;
        const double f = signal ? g.head_weight.at(target_class, j) / db
                                : std::numeric_limits<double>::quiet_NaN();
        const double s_raw = signal ? -static_cast<double>(g.batch_size) * db : 0.0;
        if (opt.log) opt.log->push_back({user.user_id, queries, cutoff, f, s_raw});

        if (!signal) {
            // cutoff undershot the minimum feature (possible under noisy
            // count/mean estimates); back off toward the last live anchor
            const double hi = std::isinf(backoff_hi) ? last_f : backoff_hi;
            if (std::isnan(hi) || !(hi > cutoff))
                throw NoSignalError("one_shot_binary: user holds no target-class data");
            cutoff = cutoff + (hi - cutoff) / 2.0;
            continue;
        }

        const std::size_t s = estimate_target_count(g, target_class);
        const bool exact_reading = std::abs(s_raw - std::round(s_raw)) < 1e-9;
        if (have_last &&
            std::abs(f - last_f) <=
                opt.convergence_tol * std::max(1.0, std::abs(f))) {
            isolated = last_g;
            isolated_params = last_params;
            break;
        }
        if (s == 1 && exact_reading) {
            isolated = g;
            isolated_params = fished;
            break;
        }
        backoff_hi = cutoff;
        last_f = f;
        last_g = g;
        last_params = fished;
        have_last = true;
        cutoff = f;
    }
    if (!isolated)
        throw GiveUpError("one_shot_binary: no isolation within " +
                          std::to_string(opt.query_budget) + " queries");

    // Evaluation against the simulation-side oracle.
    CatchReport rep;
    rep.user_id = user.user_id;
    rep.queries_used = queries;
    std::vector<std::size_t> order;
    const std::vector<GradientUpdate> oracle =
        sorted_per_example_gradients(isolated_params, user.batch, j, nullptr, &order);
    const CatchCount cc = count_caught(*isolated, oracle);
    rep.n_caught = cc.n;
    rep.best_cosine = cc.best_cosine;
    rep.isolated_gradient = scaled(*isolated, static_cast<double>(n));
    try {
        const RecoveredInput rec = analytic_input_recovery(*isolated);
        rep.recovered_input = rec.input;
        const Vector& truth = user.batch[order.front()].x;
        double err = 0.0;
        for (std::size_t k = 0; k < truth.size(); ++k)
            err = std::max(err, std::abs(rec.input[k] - truth[k]));
        rep.input_recovery_error = err;
    } catch (const UnrecoverableError&) {
    }
    return rep;
}

struct DisparateImpactRow {
    std::size_t user_id = 0;
    std::size_t min_example_queries = 0;
    std::size_t median_example_queries = 0;
};

struct DisparateImpactResult {
    std::vector<DisparateImpactRow> rows;
    double mean_min_queries = 0.0;
    double mean_median_queries = 0.0;
};

// Instrumented full binary attack per user: record the query index at which
// the minimum-feature example and the median-feature example first become
// computable. Outliers in feature space fall out of the tree first.
inline DisparateImpactResult disparate_impact_experiment(std::span<User> users,
                                                         const ModelParams& benign,
                                                         std::size_t target_class,
                                                         std::size_t j, double beta,
                                                         QueryLog* log = nullptr) {
    if (users.size() < 20)
        throw ParamError("disparate_impact_experiment: need at least 20 users");
    const std::size_t n = users.front().batch.size();
    for (const User& u : users)
        if (u.batch.size() != n)
            throw ParamError("disparate_impact_experiment: batch sizes differ");

    DisparateImpactResult result;
    Vector mins, medians;
    const std::size_t median_rank = (n + 1) / 2;
    for (User& user : users) {
        BinaryAttackOptions opt;
        opt.log = log;
        const BinaryAttackResult att =
            binary_attack(user, benign, target_class, j, n, beta, opt);
        DisparateImpactRow row;
        row.user_id = user.user_id;
        std::size_t cum = 0;
        for (const RecoveredSegment& seg : att.segments) {
            const std::size_t lo = cum + 1;
            cum += seg.count;
            if (lo <= 1 && 1 <= cum) row.min_example_queries = seg.isolated_at_query;
            if (lo <= median_rank && median_rank <= cum)
                row.median_example_queries = seg.isolated_at_query;
        }
        mins.push_back(static_cast<double>(row.min_example_queries));
        medians.push_back(static_cast<double>(row.median_example_queries));
        result.rows.push_back(row);
    }
    result.mean_min_queries = mean(mins);
    result.mean_median_queries = mean(medians);
    return result;
}

} // namespace gradfisher
