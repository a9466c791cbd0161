#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gradfisher/errors.hpp"
#include "gradfisher/linalg.hpp"

namespace gradfisher {

enum class Activation : std::uint32_t { relu = 0, identity = 1 };

struct DenseLayer {
    Matrix weight;
    Vector bias;
    Activation act = Activation::relu;
};

// Feature extractor (stack of dense layers) plus linear classification head.
// This is the object a malicious server tampers with before sending it out.
struct ModelParams {
    std::vector<DenseLayer> extractor;
    Matrix head_weight; // n_classes x feature_dim
    Vector head_bias;   // n_classes

    std::size_t input_dim() const {
        return extractor.empty() ? head_weight.cols : extractor.front().weight.cols;
    }
    std::size_t feature_dim() const { return head_weight.cols; }
    std::size_t n_classes() const { return head_weight.rows; }

    void validate() const {
        if (n_classes() < 2) throw ShapeError("model: need at least 2 classes");
        if (head_bias.size() != head_weight.rows)
            throw ShapeError("model: head bias length does not match head rows");
        std::size_t dim = input_dim();
        for (std::size_t i = 0; i < extractor.size(); ++i) {
            const DenseLayer& l = extractor[i];
            if (l.weight.cols != dim)
                throw ShapeError("model: layer " + std::to_string(i) +
                                 " input dim mismatch");
            if (l.bias.size() != l.weight.rows)
                throw ShapeError("model: layer " + std::to_string(i) +
                                 " bias length mismatch");
            dim = l.weight.rows;
        }
        if (dim != feature_dim())
            throw ShapeError("model: extractor output dim does not match head cols");
    }
};

struct Example {
    Vector x;
    std::size_t y = 0;
};

struct ForwardTrace {
    // act[0] is the input, act[i] the post-activation output of layer i.
    std::vector<Vector> act;
    // pre[i] is the pre-activation of layer i (same length as extractor).
    std::vector<Vector> pre;
    Vector feature; // = act.back()
    Vector logits;
    Vector softmax;
};

struct LayerGrad {
    Matrix weight;
    Vector bias;
};

// Gradients mirroring ModelParams, averaged over batch_size examples.
struct GradientUpdate {
    std::vector<LayerGrad> extractor;
    Matrix head_weight;
    Vector head_bias;
    std::size_t batch_size = 1;
};

inline GradientUpdate zeros_like(const ModelParams& p) {
    GradientUpdate g;
    g.extractor.reserve(p.extractor.size());
    for (const DenseLayer& l : p.extractor)
        g.extractor.push_back({Matrix(l.weight.rows, l.weight.cols),
                               Vector(l.bias.size(), 0.0)});
    g.head_weight = Matrix(p.head_weight.rows, p.head_weight.cols);
    g.head_bias = Vector(p.head_bias.size(), 0.0);
    return g;
}

inline bool same_shape(const GradientUpdate& a, const GradientUpdate& b) {
    if (a.extractor.size() != b.extractor.size()) return false;
    for (std::size_t i = 0; i < a.extractor.size(); ++i) {
        if (!a.extractor[i].weight.same_shape(b.extractor[i].weight)) return false;
        if (a.extractor[i].bias.size() != b.extractor[i].bias.size()) return false;
    }
    return a.head_weight.same_shape(b.head_weight) &&
           a.head_bias.size() == b.head_bias.size();
}

// Visit every scalar of an update in a fixed order.
template <typename Fn>
void for_each_entry(GradientUpdate& g, Fn&& fn) {
    for (LayerGrad& l : g.extractor) {
        for (double& x : l.weight.data) fn(x);
        for (double& x : l.bias) fn(x);
    }
    for (double& x : g.head_weight.data) fn(x);
    for (double& x : g.head_bias) fn(x);
}

template <typename Fn>
void for_each_entry(const GradientUpdate& g, Fn&& fn) {
    for (const LayerGrad& l : g.extractor) {
        for (double x : l.weight.data) fn(x);
        for (double x : l.bias) fn(x);
    }
    for (double x : g.head_weight.data) fn(x);
    for (double x : g.head_bias) fn(x);
}

inline std::size_t entry_count(const GradientUpdate& g) {
    std::size_t n = 0;
    for_each_entry(g, [&](double) { ++n; });
    return n;
}

inline Vector flatten(const GradientUpdate& g) {
    Vector out;
    out.reserve(entry_count(g));
    for_each_entry(g, [&](double x) { out.push_back(x); });
    return out;
}

inline void add_in_place(GradientUpdate& acc, const GradientUpdate& g) {
    if (!same_shape(acc, g)) throw ShapeError("gradient add: shape mismatch");
    for (std::size_t i = 0; i < acc.extractor.size(); ++i) {
        for (std::size_t k = 0; k < acc.extractor[i].weight.data.size(); ++k)
            acc.extractor[i].weight.data[k] += g.extractor[i].weight.data[k];
        for (std::size_t k = 0; k < acc.extractor[i].bias.size(); ++k)
            acc.extractor[i].bias[k] += g.extractor[i].bias[k];
    }
    for (std::size_t k = 0; k < acc.head_weight.data.size(); ++k)
        acc.head_weight.data[k] += g.head_weight.data[k];
    for (std::size_t k = 0; k < acc.head_bias.size(); ++k)
        acc.head_bias[k] += g.head_bias[k];
}

inline void scale_in_place(GradientUpdate& g, double s) {
    for_each_entry(g, [s](double& x) { x *= s; });
}

inline GradientUpdate scaled(GradientUpdate g, double s) {
    scale_in_place(g, s);
    return g;
}

inline double flat_dot(const GradientUpdate& a, const GradientUpdate& b) {
    if (!same_shape(a, b)) throw ShapeError("gradient dot: shape mismatch");
    Vector terms;
    terms.reserve(entry_count(a));
    const Vector fa = flatten(a);
    const Vector fb = flatten(b);
    for (std::size_t i = 0; i < fa.size(); ++i) terms.push_back(fa[i] * fb[i]);
    return pairwise_sum(terms);
}

inline double flat_norm(const GradientUpdate& g) { return std::sqrt(flat_dot(g, g)); }

// Same, restricted to the feature-extractor block (the quantity the catch
// criterion and the suppression residuals are defined over).
inline Vector flatten_extractor(const GradientUpdate& g) {
    Vector out;
    for (const LayerGrad& l : g.extractor) {
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
}

// --- forward / backward ---------------------------------------------------

inline double apply_activation(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : z;
}

// Subgradient of relu at 0 is taken as 0.
inline double activation_grad(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

constexpr double kLossCap = 700.0;

inline Vector stable_softmax(const Vector& logits) {
    double maxv = -kInf;
    for (double l : logits) {
        if (std::isnan(l) || l == kInf)
            throw NumericError("softmax: logit is NaN or +inf");
        maxv = std::max(maxv, l);
    }
    if (!std::isfinite(maxv)) throw NumericError("softmax: all logits are -inf");
    Vector p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - maxv);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

inline ForwardTrace forward(const ModelParams& params, const Vector& x) {
    if (x.size() != params.input_dim())
        throw ShapeError("forward: input length " + std::to_string(x.size()) +
                         ", model expects " + std::to_string(params.input_dim()));
    ForwardTrace t;
    t.act.reserve(params.extractor.size() + 1);
    t.pre.reserve(params.extractor.size());
    t.act.push_back(x);
    for (std::size_t i = 0; i < params.extractor.size(); ++i) {
        const DenseLayer& l = params.extractor[i];
        Vector z = matvec(l.weight, t.act.back());
        for (std::size_t k = 0; k < z.size(); ++k) z[k] += l.bias[k];
        Vector a(z.size());
        for (std::size_t k = 0; k < z.size(); ++k) a[k] = apply_activation(l.act, z[k]);
        if (!all_finite(a))
            throw NumericError("forward: non-finite activation in layer " +
                               std::to_string(i));
        t.pre.push_back(std::move(z));
        t.act.push_back(std::move(a));
    }
    t.feature = t.act.back();
    t.logits = matvec(params.head_weight, t.feature);
    for (std::size_t k = 0; k < t.logits.size(); ++k) t.logits[k] += params.head_bias[k];
    t.softmax = stable_softmax(t.logits);
    return t;
}

// -log p_y, capped at kLossCap so a fished model that drives p -> 0 still
// yields a large-but-finite loss.
inline double loss(const ForwardTrace& trace, std::size_t y) {
    if (y >= trace.softmax.size()) throw ParamError("loss: label out of range");
    const double nll = -std::log(trace.softmax[y]);
    return nll < kLossCap ? nll : kLossCap;
}

// dL/dl = p - onehot(y); entry c equals p_c when y != c and p_c - 1 when
// y = c, which is the identity the mining side leans on.
inline Vector grad_logits(const ForwardTrace& trace, std::size_t y) {
    if (y >= trace.softmax.size()) throw ParamError("grad_logits: label out of range");
    Vector g = trace.softmax;
    g[y] -= 1.0;
    return g;
}

inline GradientUpdate backward(const ModelParams& params, const ForwardTrace& trace,
                               std::size_t y) {
    if (trace.act.size() != params.extractor.size() + 1 ||
        trace.pre.size() != params.extractor.size() ||
        trace.feature.size() != params.feature_dim() ||
        trace.logits.size() != params.n_classes())
        throw ContractError("backward: trace does not match model shape");

    GradientUpdate g = zeros_like(params);
    const Vector gl = grad_logits(trace, y);
    g.head_weight = outer(gl, trace.feature);
    g.head_bias = gl;

    Vector da = matvec_transposed(params.head_weight, gl);
    for (std::size_t li = params.extractor.size(); li-- > 0;) {
        const DenseLayer& l = params.extractor[li];
        Vector dz(da.size());
        for (std::size_t k = 0; k < da.size(); ++k)
            dz[k] = da[k] * activation_grad(l.act, trace.pre[li][k]);
        g.extractor[li].weight = outer(dz, trace.act[li]);
        g.extractor[li].bias = dz;
        if (li > 0) da = matvec_transposed(l.weight, dz);
    }
    g.batch_size = 1;
    return g;
}

// Pairwise reduction over per-example updates, then one scale: the result is
// independent of summation order to rounding.
inline GradientUpdate reduce_mean(std::vector<GradientUpdate>& parts) {
    if (parts.empty()) throw ParamError("reduce_mean: empty");
    const std::function<GradientUpdate(std::size_t, std::size_t)> reduce =
        [&](std::size_t lo, std::size_t hi) -> GradientUpdate {
        if (hi - lo == 1) return std::move(parts[lo]);
        const std::size_t mid = lo + (hi - lo) / 2;
        GradientUpdate left = reduce(lo, mid);
        add_in_place(left, reduce(mid, hi));
        return left;
    };
    const std::size_t n = parts.size();
    GradientUpdate total = reduce(0, n);
    scale_in_place(total, 1.0 / static_cast<double>(n));
    total.batch_size = n;
    return total;
}

inline GradientUpdate batch_gradient(const ModelParams& params,
                                     std::span<const Example> batch) {
    if (batch.empty()) throw ParamError("batch_gradient: empty batch");
    std::vector<GradientUpdate> parts;
    parts.reserve(batch.size());
    for (const Example& ex : batch)
        parts.push_back(backward(params, forward(params, ex.x), ex.y));
    return reduce_mean(parts);
}

// --- initialization / training ---------------------------------------------

struct Architecture {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden = {64, 32};
    std::size_t feature_dim = 16;
    std::size_t n_classes = 20;
};

// He-style init. All extractor layers use relu, including the feature layer:
// post-relu features are exactly the regime the feature-selection step is
// built for (some features bimodal with an atom at 0).
inline ModelParams make_model(const Architecture& arch, RandomSource& src) {
    ModelParams p;
    std::vector<std::size_t> dims;
    dims.push_back(arch.input_dim);
    for (std::size_t h : arch.hidden) dims.push_back(h);
    dims.push_back(arch.feature_dim);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        DenseLayer l;
        l.weight = Matrix(dims[i + 1], dims[i]);
        const double scale = std::sqrt(2.0 / static_cast<double>(dims[i]));
        for (double& w : l.weight.data) w = scale * src.next_gaussian();
        l.bias = Vector(dims[i + 1], 0.0);
        l.act = Activation::relu;
        p.extractor.push_back(std::move(l));
    }
    p.head_weight = Matrix(arch.n_classes, arch.feature_dim);
    const double hscale = std::sqrt(1.0 / static_cast<double>(arch.feature_dim));
    for (double& w : p.head_weight.data) w = hscale * src.next_gaussian();
    p.head_bias = Vector(arch.n_classes, 0.0);
    p.validate();
    return p;
}

inline void sgd_step(ModelParams& params, const GradientUpdate& g, double lr) {
    for (std::size_t i = 0; i < params.extractor.size(); ++i) {
        for (std::size_t k = 0; k < params.extractor[i].weight.data.size(); ++k)
            params.extractor[i].weight.data[k] -= lr * g.extractor[i].weight.data[k];
        for (std::size_t k = 0; k < params.extractor[i].bias.size(); ++k)
            params.extractor[i].bias[k] -= lr * g.extractor[i].bias[k];
    }
    for (std::size_t k = 0; k < params.head_weight.data.size(); ++k)
        params.head_weight.data[k] -= lr * g.head_weight.data[k];
    for (std::size_t k = 0; k < params.head_bias.size(); ++k)
        params.head_bias[k] -= lr * g.head_bias[k];
}

inline double dataset_loss(const ModelParams& params, std::span<const Example> data) {
    Vector losses;
    losses.reserve(data.size());
    for (const Example& ex : data) losses.push_back(loss(forward(params, ex.x), ex.y));
    return mean(losses);
}

inline double dataset_accuracy(const ModelParams& params, std::span<const Example> data) {
    std::size_t hits = 0;
    for (const Example& ex : data) {
        const ForwardTrace t = forward(params, ex.x);
        std::size_t best = 0;
        for (std::size_t k = 1; k < t.logits.size(); ++k)
            if (t.logits[k] > t.logits[best]) best = k;
        hits += (best == ex.y);
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Plain minibatch SGD. Deterministic: the shuffle is driven entirely by src.
inline ModelParams train_sgd(ModelParams params, std::span<const Example> dataset,
                             std::size_t epochs, double lr, RandomSource& src,
                             std::size_t minibatch = 32) {
    if (!(lr > 0.0)) throw ParamError("train_sgd: lr must be positive");
    if (dataset.empty()) throw ParamError("train_sgd: empty dataset");
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<Example> batch;
    for (std::size_t e = 0; e < epochs; ++e) {
        shuffle(order, src);
        for (std::size_t start = 0; start < order.size(); start += minibatch) {
            batch.clear();
            const std::size_t stop = std::min(order.size(), start + minibatch);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(dataset[order[i]]);
            sgd_step(params, batch_gradient(params, batch), lr);
        }
        const double l = dataset_loss(params, dataset);
        if (!std::isfinite(l))
            throw NumericError("train_sgd: loss diverged at epoch " + std::to_string(e));
    }
    return params;
}

// --- checkpoint (flat binary) -----------------------------------------------

namespace detail {

constexpr std::uint32_t kCkptMagic = 0x4746434B; // "GFCK"

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ParseError("checkpoint: truncated file");
    return v;
}

} // namespace detail

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("checkpoint: cannot open " + path + " for writing");
    detail::write_pod<std::uint32_t>(os, detail::kCkptMagic);
    detail::write_pod<std::uint32_t>(os, 1); // version
    detail::write_pod<std::uint64_t>(os, params.extractor.size());
    for (const DenseLayer& l : params.extractor) {
        detail::write_pod<std::uint64_t>(os, l.weight.rows);
        detail::write_pod<std::uint64_t>(os, l.weight.cols);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l.act));
    }
    detail::write_pod<std::uint64_t>(os, params.head_weight.rows);
    detail::write_pod<std::uint64_t>(os, params.head_weight.cols);
    for (const DenseLayer& l : params.extractor) {
        os.write(reinterpret_cast<const char*>(l.weight.data.data()),
                 static_cast<std::streamsize>(l.weight.data.size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(l.bias.data()),
                 static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
    }
    os.write(reinterpret_cast<const char*>(params.head_weight.data.data()),
             static_cast<std::streamsize>(params.head_weight.data.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(params.head_bias.data()),
             static_cast<std::streamsize>(params.head_bias.size() * sizeof(double)));
    if (!os) throw ParseError("checkpoint: write failed for " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint: cannot open " + path);
    if (detail::read_pod<std::uint32_t>(is) != detail::kCkptMagic)
        throw ParseError("checkpoint: bad magic in " + path);
    if (detail::read_pod<std::uint32_t>(is) != 1)
        throw ParseError("checkpoint: unsupported version in " + path);
    ModelParams p;
    const std::uint64_t layers = detail::read_pod<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < layers; ++i) {
        DenseLayer l;
        const auto rows = detail::read_pod<std::uint64_t>(is);
        const auto cols = detail::read_pod<std::uint64_t>(is);
        const auto act = detail::read_pod<std::uint32_t>(is);
        if (act > 1) throw ParseError("checkpoint: unknown activation code");
        l.weight = Matrix(rows, cols);
        l.bias = Vector(rows, 0.0);
        l.act = static_cast<Activation>(act);
        p.extractor.push_back(std::move(l));
    }
    const auto hrows = detail::read_pod<std::uint64_t>(is);
    const auto hcols = detail::read_pod<std::uint64_t>(is);
    p.head_weight = Matrix(hrows, hcols);
    p.head_bias = Vector(hrows, 0.0);
    auto read_block = [&](double* dst, std::size_t n) {
        is.read(reinterpret_cast<char*>(dst),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw ParseError("checkpoint: truncated parameter block");
    };
    for (DenseLayer& l : p.extractor) {
        read_block(l.weight.data.data(), l.weight.data.size());
        read_block(l.bias.data(), l.bias.size());
    }
    read_block(p.head_weight.data.data(), p.head_weight.data.size());
    read_block(p.head_bias.data(), p.head_bias.size());
    p.validate();
    return p;
}

// --- dataset CSV -------------------------------------------------------------
// One row per example: integer label first, then the feature columns.

inline std::vector<Example> load_dataset_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("dataset: cannot open " + path);
    std::vector<Example> out;
    std::string line;
    std::size_t lineno = 0;
    std::size_t dim = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        Example ex;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            try {
                if (first) {
                    const long long y = std::stoll(cell);
                    if (y < 0) throw ParamError("negative label");
                    ex.y = static_cast<std::size_t>(y);
                    first = false;
                } else {
                    ex.x.push_back(std::stod(cell));
                }
            } catch (const std::exception&) {
                throw ParseError("dataset: bad value at " + path + ":" +
                                 std::to_string(lineno));
            }
        }
        if (first || ex.x.empty())
            throw ParseError("dataset: short row at " + path + ":" +
                             std::to_string(lineno));
        if (!all_finite(ex.x))
            throw ParseError("dataset: non-finite feature at " + path + ":" +
                             std::to_string(lineno));
        if (dim == 0) dim = ex.x.size();
        if (ex.x.size() != dim)
            throw ParseError("dataset: inconsistent column count at " + path + ":" +
                             std::to_string(lineno));
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_dataset_csv(std::span<const Example> data, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ParseError("dataset: cannot open " + path + " for writing");
    char buf[40];
    for (const Example& ex : data) {
        os << ex.y;
        for (double v : ex.x) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << ',' << buf;
        }
        os << '\n';
    }
}

} // namespace gradfisher
