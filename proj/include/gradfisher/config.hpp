#pragma once

#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradfisher/errors.hpp"
#include "gradfisher/fedsim.hpp"
#include "gradfisher/fishing.hpp"

namespace gradfisher {

using ordered_json = nlohmann::ordered_json;

// Flat key-value experiment configuration. A config plus a preset name fully
// determines every byte of output. Unknown keys are rejected so a typo can
// never silently change attack parameters.
struct ExperimentConfig {
    std::uint64_t seed = 42;
    unsigned threads = 1;
    std::string out_dir = "out";

    // model
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden_dims = {64, 32};
    std::size_t feature_dim = 16;
    std::size_t n_classes = 20;

    // task
    double within_class_std = 0.5;
    double mean_radius = 2.5;

    // training
    std::size_t train_per_class = 100;
    std::size_t train_epochs = 30;
    double train_lr = 0.05;
    std::size_t train_batch_size = 32;

    // fishing plan
    std::string mode = "class"; // "class" | "feature"
    std::size_t target_class = 3;
    std::size_t feature_index = 0;
    double alpha = 1000.0;
    double beta = 1000.0;
    double theta = kInf;
    bool combine_with_class = false;

    // cross-device experiment
    std::size_t estimation_users = 200;
    std::size_t target_users = 100;
    std::size_t user_batch_size = 10;
    std::size_t targets_per_user = 4;
    // Bin count M for the cutoff; 0 derives it from the observed counts.
    // The default pins it to the attacked population's per-user target count.
    std::size_t expected_targets = 10;
    // Lower bound of the feature support (0 for a relu feature layer); a
    // candidate feature whose planned cutoff falls at or below it is skipped.
    double support_floor = 0.0;

    // cross-silo experiments
    std::size_t query_budget = 64;
    std::size_t attack_users = 50;
    std::vector<std::size_t> scaling_batch_sizes = {8, 32, 128, 256};
    std::size_t binary_batch_size = 16;
    std::size_t disparate_users = 50;
    std::size_t disparate_batch_size = 64;

    // monte carlo / sweeps
    std::size_t mc_trials = 10000;
    std::vector<std::size_t> mc_bin_counts = {2, 4, 8, 16};
    std::vector<double> prop1_alphas = {2.0, 10.0, 1000.0};
    std::size_t prop1_batch_size = 16;
    std::size_t prop1_targets = 4;

    // defense
    std::optional<double> clip_norm;
    double noise_std = 0.0;
    std::string aggregation = "mean"; // "mean" | "median"
    std::vector<double> noise_sweep = {0.0, 0.01, 0.1, 1.0};
    std::size_t defense_batch_size = 32;

    FishingPlan fishing_plan() const {
        FishingPlan plan;
        plan.mode = (mode == "class") ? FishMode::by_class : FishMode::by_feature;
        plan.target_class = target_class;
        plan.feature_index = feature_index;
        plan.alpha = alpha;
        plan.beta = beta;
        plan.theta = theta;
        plan.combine_with_class = combine_with_class;
        return plan;
    }

    Architecture architecture() const {
        return {input_dim, hidden_dims, feature_dim, n_classes};
    }

    void validate() const {
        if (threads < 1) throw ParamError("config: threads must be >= 1");
        if (n_classes < 2) throw ParamError("config: n_classes must be >= 2");
        if (mode != "class" && mode != "feature")
            throw ParamError("config: mode must be 'class' or 'feature'");
        if (target_class >= n_classes)
            throw ParamError("config: target_class out of range");
        if (feature_index >= feature_dim)
            throw ParamError("config: feature_index out of range");
        if (!(alpha > 0.0) || !std::isfinite(alpha))
            throw ParamError("config: alpha must be finite and positive");
        if (!(beta > 0.0) || !std::isfinite(beta))
            throw ParamError("config: beta must be finite and positive");
        if (std::isnan(theta) || theta == -kInf)
            throw ParamError("config: theta must be finite or +inf");
        if (!(within_class_std > 0.0))
            throw ParamError("config: within_class_std must be positive");
        if (!(mean_radius > 0.0)) throw ParamError("config: mean_radius must be positive");
        if (!(train_lr > 0.0)) throw ParamError("config: train_lr must be positive");
        if (train_batch_size == 0 || user_batch_size == 0 || defense_batch_size == 0 ||
            binary_batch_size == 0 || disparate_batch_size == 0)
            throw ParamError("config: batch sizes must be >= 1");
        if (targets_per_user > user_batch_size)
            throw ParamError("config: targets_per_user exceeds user_batch_size");
        if (query_budget == 0) throw ParamError("config: query_budget must be >= 1");
        if (aggregation != "mean" && aggregation != "median")
            throw ParamError("config: aggregation must be 'mean' or 'median'");
        if (clip_norm && !(*clip_norm > 0.0))
            throw ParamError("config: clip_norm must be positive");
        if (noise_std < 0.0) throw ParamError("config: noise_std must be >= 0");
        if (std::isnan(support_floor) || support_floor == kInf)
            throw ParamError("config: support_floor must be finite or -inf");
        for (double a : prop1_alphas)
            if (!(a > 0.0)) throw ParamError("config: prop1_alphas must be positive");
        for (std::size_t m : mc_bin_counts)
            if (m == 0) throw ParamError("config: mc_bin_counts must be >= 1");
        for (std::size_t n : scaling_batch_sizes)
            if (n == 0) throw ParamError("config: scaling_batch_sizes must be >= 1");
        if (hidden_dims.empty()) throw ParamError("config: hidden_dims must be nonempty");
    }
};

namespace detail {

inline double theta_from_json(const ordered_json& v) {
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "inf" || s == "+inf") return kInf;
        throw ParamError("config: theta string must be 'inf'");
    }
    return v.get<double>();
}

inline ordered_json theta_to_json(double theta) {
    if (theta == kInf) return "inf";
    return theta;
}

} // namespace detail

inline ordered_json to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["out_dir"] = c.out_dir;
    j["input_dim"] = c.input_dim;
    j["hidden_dims"] = c.hidden_dims;
    j["feature_dim"] = c.feature_dim;
    j["n_classes"] = c.n_classes;
    j["within_class_std"] = c.within_class_std;
    j["mean_radius"] = c.mean_radius;
    j["train_per_class"] = c.train_per_class;
    j["train_epochs"] = c.train_epochs;
    j["train_lr"] = c.train_lr;
    j["train_batch_size"] = c.train_batch_size;
    j["mode"] = c.mode;
    j["target_class"] = c.target_class;
    j["feature_index"] = c.feature_index;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["theta"] = detail::theta_to_json(c.theta);
    j["combine_with_class"] = c.combine_with_class;
    j["estimation_users"] = c.estimation_users;
    j["target_users"] = c.target_users;
    j["user_batch_size"] = c.user_batch_size;
    j["targets_per_user"] = c.targets_per_user;
    j["expected_targets"] = c.expected_targets;
    if (c.support_floor == -kInf)
        j["support_floor"] = "-inf";
    else
        j["support_floor"] = c.support_floor;
    j["query_budget"] = c.query_budget;
    j["attack_users"] = c.attack_users;
    j["scaling_batch_sizes"] = c.scaling_batch_sizes;
    j["binary_batch_size"] = c.binary_batch_size;
    j["disparate_users"] = c.disparate_users;
    j["disparate_batch_size"] = c.disparate_batch_size;
    j["mc_trials"] = c.mc_trials;
    j["mc_bin_counts"] = c.mc_bin_counts;
    j["prop1_alphas"] = c.prop1_alphas;
    j["prop1_batch_size"] = c.prop1_batch_size;
    j["prop1_targets"] = c.prop1_targets;
    if (c.clip_norm)
        j["clip_norm"] = *c.clip_norm;
    else
        j["clip_norm"] = nullptr;
    j["noise_std"] = c.noise_std;
    j["aggregation"] = c.aggregation;
    j["noise_sweep"] = c.noise_sweep;
    j["defense_batch_size"] = c.defense_batch_size;
    return j;
}

inline ExperimentConfig config_from_json(const ordered_json& j) {
    if (!j.is_object()) throw ParseError("config: top level must be a JSON object");
    ExperimentConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "threads") c.threads = value.get<unsigned>();
            else if (key == "out_dir") c.out_dir = value.get<std::string>();
            else if (key == "input_dim") c.input_dim = value.get<std::size_t>();
            else if (key == "hidden_dims") c.hidden_dims = value.get<std::vector<std::size_t>>();
            else if (key == "feature_dim") c.feature_dim = value.get<std::size_t>();
            else if (key == "n_classes") c.n_classes = value.get<std::size_t>();
            else if (key == "within_class_std") c.within_class_std = value.get<double>();
            else if (key == "mean_radius") c.mean_radius = value.get<double>();
            else if (key == "train_per_class") c.train_per_class = value.get<std::size_t>();
            else if (key == "train_epochs") c.train_epochs = value.get<std::size_t>();
            else if (key == "train_lr") c.train_lr = value.get<double>();
            else if (key == "train_batch_size") c.train_batch_size = value.get<std::size_t>();
            else if (key == "mode") c.mode = value.get<std::string>();
            else if (key == "target_class") c.target_class = value.get<std::size_t>();
            else if (key == "feature_index") c.feature_index = value.get<std::size_t>();
            else if (key == "alpha") c.alpha = value.get<double>();
            else if (key == "beta") c.beta = value.get<double>();
            else if (key == "theta") c.theta = detail::theta_from_json(value);
            else if (key == "combine_with_class") c.combine_with_class = value.get<bool>();
            else if (key == "estimation_users") c.estimation_users = value.get<std::size_t>();
            else if (key == "target_users") c.target_users = value.get<std::size_t>();
            else if (key == "user_batch_size") c.user_batch_size = value.get<std::size_t>();
            else if (key == "targets_per_user") c.targets_per_user = value.get<std::size_t>();
            else if (key == "expected_targets") c.expected_targets = value.get<std::size_t>();
            else if (key == "support_floor") {
                if (value.is_string()) {
                    if (value.get<std::string>() != "-inf")
                        throw ParamError("config: support_floor string must be '-inf'");
                    c.support_floor = -kInf;
                } else {
                    c.support_floor = value.get<double>();
                }
            }
            else if (key == "query_budget") c.query_budget = value.get<std::size_t>();
            else if (key == "attack_users") c.attack_users = value.get<std::size_t>();
            else if (key == "scaling_batch_sizes")
                c.scaling_batch_sizes = value.get<std::vector<std::size_t>>();
            else if (key == "binary_batch_size") c.binary_batch_size = value.get<std::size_t>();
            else if (key == "disparate_users") c.disparate_users = value.get<std::size_t>();
            else if (key == "disparate_batch_size")
                c.disparate_batch_size = value.get<std::size_t>();
            else if (key == "mc_trials") c.mc_trials = value.get<std::size_t>();
            else if (key == "mc_bin_counts")
                c.mc_bin_counts = value.get<std::vector<std::size_t>>();
            else if (key == "prop1_alphas") c.prop1_alphas = value.get<std::vector<double>>();
            else if (key == "prop1_batch_size") c.prop1_batch_size = value.get<std::size_t>();
            else if (key == "prop1_targets") c.prop1_targets = value.get<std::size_t>();
            else if (key == "clip_norm") {
                if (value.is_null()) c.clip_norm.reset();
                else c.clip_norm = value.get<double>();
            }
            else if (key == "noise_std") c.noise_std = value.get<double>();
            else if (key == "aggregation") c.aggregation = value.get<std::string>();
            else if (key == "noise_sweep") c.noise_sweep = value.get<std::vector<double>>();
            else if (key == "defense_batch_size")
                c.defense_batch_size = value.get<std::size_t>();
            else
                throw ParseError("config: unknown key '" + key + "'");
        } catch (const nlohmann::json::exception&) {
            throw ParseError("config: bad value type for key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    bool blank = true;
    for (char ch : text)
        if (!std::isspace(static_cast<unsigned char>(ch))) {
            blank = false;
            break;
        }
    if (blank) return ExperimentConfig{}; // empty file: all defaults
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t line = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ParseError("config: parse error at line " + std::to_string(line) + ": " +
                         e.what());
    }
    return config_from_json(j);
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return to_json(a) == to_json(b);
}

} // namespace gradfisher
