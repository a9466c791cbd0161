#pragma once

#include <cmath>
#include <string>

#include "gradfisher/errors.hpp"
#include "gradfisher/model.hpp"

namespace gradfisher {

enum class FishMode { by_class, by_feature };

// One malicious head transform, fully described. theta is always the feature
// cutoff (units of feature value) and beta the logit scale.
struct FishingPlan {
    FishMode mode = FishMode::by_class;
    std::size_t target_class = 0;
    std::size_t feature_index = 0; // feature mode only
    double alpha = 1000.0;         // class mode: non-target bias
    double beta = 1000.0;          // feature mode: logit scale
    double theta = kInf;           // feature mode: cutoff (+inf allowed)
    bool combine_with_class = false;

    void validate(std::size_t n_classes, std::size_t feature_dim) const {
        if (target_class >= n_classes)
            throw ParamError("fishing plan: target_class out of range");
        if (mode == FishMode::by_feature && feature_index >= feature_dim)
            throw ParamError("fishing plan: feature_index out of range");
        if (!(alpha > 0.0) || !std::isfinite(alpha))
            throw ParamError("fishing plan: alpha must be finite and positive");
        if (!(beta > 0.0) || !std::isfinite(beta))
            throw ParamError("fishing plan: beta must be finite and positive");
        if (std::isnan(theta) || theta == -kInf)
            throw ParamError("fishing plan: theta must be finite or +inf");
    }
};

// Keep row c of W and entry c of b; zero the other rows and set the other
// biases to alpha. Only target-class examples then contribute meaningful
// extractor gradient. Returns a fresh copy; the benign checkpoint is not
// touched.
inline ModelParams class_fishing(const ModelParams& params, std::size_t c,
                                 double alpha) {
    if (c >= params.n_classes())
        throw ParamError("class_fishing: target class out of range");
    ModelParams out = params;
    for (std::size_t i = 0; i < out.head_weight.rows; ++i) {
        if (i == c) continue;
        for (std::size_t j = 0; j < out.head_weight.cols; ++j)
            out.head_weight.at(i, j) = 0.0;
        out.head_bias[i] = alpha;
    }
    return out;
}

// Single weight beta at (c, j), bias -beta*theta at c: the target logit
// becomes beta*(f_j - theta), every other logit 0. Examples with f_j below
// the cutoff keep their full gradient, the rest collapse. With
// combine_with_class the non-target biases are set to alpha instead of 0,
// which additionally suppresses non-target-class examples in mixed batches
// (only meaningful while beta * margin stays well above alpha).
inline ModelParams feature_fishing(const ModelParams& params, std::size_t c,
                                   std::size_t j, double theta, double beta,
                                   bool combine_with_class = false,
                                   double alpha = 1000.0) {
    if (c >= params.n_classes())
        throw ParamError("feature_fishing: target class out of range");
    if (j >= params.feature_dim())
        throw ParamError("feature_fishing: feature index out of range");
    ModelParams out = params;
    for (double& w : out.head_weight.data) w = 0.0;
    out.head_weight.at(c, j) = beta;
    for (std::size_t i = 0; i < out.head_bias.size(); ++i)
        out.head_bias[i] = (i == c) ? -beta * theta : (combine_with_class ? alpha : 0.0);
    return out;
}

inline ModelParams apply_plan(const ModelParams& params, const FishingPlan& plan) {
    plan.validate(params.n_classes(), params.feature_dim());
    if (plan.mode == FishMode::by_class)
        return class_fishing(params, plan.target_class, plan.alpha);
    return feature_fishing(params, plan.target_class, plan.feature_index, plan.theta,
                           plan.beta, plan.combine_with_class, plan.alpha);
}

} // namespace gradfisher
