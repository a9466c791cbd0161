#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradfisher/fedsim.hpp"
#include "gradfisher/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gradfisher;

namespace {

ModelParams headless_model(std::size_t n_classes, std::size_t dim) {
    ModelParams p;
    p.head_weight = Matrix(n_classes, dim);
    p.head_bias = Vector(n_classes, 0.0);
    return p;
}

ModelParams identity_passthrough(std::size_t dim) {
    ModelParams p;
    DenseLayer l;
    l.weight = identity_matrix(dim);
    l.bias = Vector(dim, 0.0);
    l.act = Activation::identity;
    p.extractor.push_back(std::move(l));
    p.head_weight = identity_matrix(dim);
    p.head_bias = Vector(dim, 0.0);
    return p;
}

} // namespace

TEST_CASE("forward: zero parameters give the uniform softmax") {
    const ModelParams p = headless_model(4, 3);
    const ForwardTrace t = forward(p, Vector{0.3, -1.0, 2.0});
    for (double x : t.softmax) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("forward: identity extractor and identity head reproduce the input") {
    const ModelParams p = identity_passthrough(3);
    const Vector x{0.5, -2.0, 1.25};
    const ForwardTrace t = forward(p, x);
    CHECK(t.logits == x);
    CHECK(t.feature == x);
}

TEST_CASE("forward: softmax matches extended-precision exp-normalize") {
    RandomSource rng(100, 1);
    for (int rep = 0; rep < 10; ++rep) {
        Architecture arch{6, {10}, 5, 4};
        ModelParams p = testsupport::random_model(rng, arch);
        const Vector x = gaussian_sample(rng, 0.0, 1.5, 6);
        const ForwardTrace t = forward(p, x);
        const auto want = oracles::longdouble_softmax(t.logits);
        double sum = 0.0;
        for (std::size_t i = 0; i < t.softmax.size(); ++i) {
            CHECK(t.softmax[i] ==
                  doctest::Approx(static_cast<double>(want[i])).epsilon(1e-12));
            sum += t.softmax[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("forward: wrong input length is a shape error") {
    const ModelParams p = headless_model(3, 4);
    CHECK_THROWS_AS(forward(p, Vector{1.0, 2.0}), ShapeError);
}

TEST_CASE("forward: non-finite activation reports the layer") {
    ModelParams p = identity_passthrough(2);
    p.extractor[0].weight.at(0, 0) = kInf;
    try {
        forward(p, Vector{1.0, 1.0});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
}

TEST_CASE("loss: uniform prediction over 4 classes costs log 4") {
    const ModelParams p = headless_model(4, 3);
    const ForwardTrace t = forward(p, Vector{1.0, 2.0, 3.0});
    for (std::size_t y = 0; y < 4; ++y)
        CHECK(loss(t, y) == doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("loss: certain correct prediction costs zero, underflow is capped") {
    ModelParams p = headless_model(2, 1);
    p.head_weight.at(0, 0) = 800.0;
    const ForwardTrace t = forward(p, Vector{1.0});
    CHECK(loss(t, 0) == 0.0);
    CHECK(loss(t, 1) == kLossCap); // p_1 underflows to 0
}

TEST_CASE("loss: matches extended-precision evaluation on random traces") {
    RandomSource rng(101, 2);
    Architecture arch{5, {8}, 6, 5};
    for (int rep = 0; rep < 10; ++rep) {
        ModelParams p = testsupport::random_model(rng, arch);
        const Example ex = testsupport::random_example(rng, 5, 5);
        const double got = loss(forward(p, ex.x), ex.y);
        const double want = static_cast<double>(oracles::longdouble_loss(p, ex.x, ex.y));
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("grad_logits: symmetric two-class case") {
    const ModelParams p = headless_model(2, 2);
    const ForwardTrace t = forward(p, Vector{0.0, 0.0});
    const Vector g = grad_logits(t, 0);
    CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("grad_logits: one-hot prediction at the label gives zero") {
    ModelParams p = headless_model(2, 1);
    p.head_weight.at(0, 0) = 800.0;
    const Vector g = grad_logits(forward(p, Vector{1.0}), 0);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("grad_logits: matches central finite differences of the loss") {
    RandomSource rng(102, 3);
    for (int rep = 0; rep < 20; ++rep) {
        Vector logits = gaussian_sample(rng, 0.0, 1.0, 6);
        const std::size_t y = static_cast<std::size_t>(rng.next_below(6));
        ModelParams p = headless_model(6, 6);
        p.head_weight = identity_matrix(6);
        const ForwardTrace t = forward(p, logits);
        const Vector analytic = grad_logits(t, y);
        const Vector fd = oracles::finite_difference_logit_gradient(logits, y, 1e-6);
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double rel = std::abs(analytic[i] - fd[i]) / (std::abs(fd[i]) + 1e-12);
            CHECK(rel < 1e-6);
        }
    }
}

TEST_CASE("grad_logits entries sum to zero on random traces") {
    RandomSource rng(103, 4);
    Architecture arch{6, {12}, 8, 7};
    for (int rep = 0; rep < 50; ++rep) {
        ModelParams p = testsupport::random_model(rng, arch);
        const Example ex = testsupport::random_example(rng, 6, 7);
        const Vector g = grad_logits(forward(p, ex.x), ex.y);
        double sum = 0.0;
        for (double x : g) sum += x;
        CHECK(std::abs(sum) < 1e-12);
    }
}

TEST_CASE("case identities: derivative at the target logit is p or p-1") {
    RandomSource rng(104, 5);
    Architecture arch{6, {12}, 8, 9};
    for (int rep = 0; rep < 100; ++rep) {
        ModelParams p = testsupport::random_model(rng, arch);
        const Example ex = testsupport::random_example(rng, 6, 9);
        const ForwardTrace t = forward(p, ex.x);
        const Vector g = grad_logits(t, ex.y);
        const std::size_t c = static_cast<std::size_t>(rng.next_below(9));
        if (ex.y != c) {
            CHECK(g[c] == t.softmax[c]);
        } else {
            CHECK(g[c] == t.softmax[c] - 1.0);
        }
    }
}

TEST_CASE("backward: hand-computed two-dimensional case") {
    // one identity layer, then a 2x2 head; every step written out by hand
    ModelParams p;
    DenseLayer l;
    l.weight = Matrix(2, 2);
    l.weight.at(0, 0) = 1.0;
    l.weight.at(0, 1) = 0.5;
    l.weight.at(1, 0) = -0.25;
    l.weight.at(1, 1) = 2.0;
    l.bias = Vector{0.1, -0.2};
    l.act = Activation::identity;
    p.extractor.push_back(l);
    p.head_weight = Matrix(2, 2);
    p.head_weight.at(0, 0) = 0.7;
    p.head_weight.at(0, 1) = -1.0;
    p.head_weight.at(1, 0) = 0.3;
    p.head_weight.at(1, 1) = 0.4;
    p.head_bias = Vector{0.05, -0.05};

    const Vector x{0.8, -0.6};
    const std::size_t y = 1;

    // forward by hand
    const double f0 = 1.0 * 0.8 + 0.5 * -0.6 + 0.1;   // 0.6
    const double f1 = -0.25 * 0.8 + 2.0 * -0.6 - 0.2; // -1.6
    const double l0 = 0.7 * f0 + -1.0 * f1 + 0.05;
    const double l1 = 0.3 * f0 + 0.4 * f1 - 0.05;
    const double m = std::max(l0, l1);
    const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    const double g0 = p0, g1 = p1 - 1.0; // y = 1

    const ForwardTrace t = forward(p, x);
    const GradientUpdate g = backward(p, t, y);

    CHECK(g.head_bias[0] == doctest::Approx(g0).epsilon(1e-14));
    CHECK(g.head_bias[1] == doctest::Approx(g1).epsilon(1e-14));
    CHECK(g.head_weight.at(0, 0) == doctest::Approx(g0 * f0).epsilon(1e-14));
    CHECK(g.head_weight.at(0, 1) == doctest::Approx(g0 * f1).epsilon(1e-14));
    CHECK(g.head_weight.at(1, 0) == doctest::Approx(g1 * f0).epsilon(1e-14));
    CHECK(g.head_weight.at(1, 1) == doctest::Approx(g1 * f1).epsilon(1e-14));

    const double df0 = 0.7 * g0 + 0.3 * g1;
    const double df1 = -1.0 * g0 + 0.4 * g1;
    CHECK(g.extractor[0].bias[0] == doctest::Approx(df0).epsilon(1e-14));
    CHECK(g.extractor[0].bias[1] == doctest::Approx(df1).epsilon(1e-14));
    CHECK(g.extractor[0].weight.at(0, 0) == doctest::Approx(df0 * 0.8).epsilon(1e-14));
    CHECK(g.extractor[0].weight.at(0, 1) == doctest::Approx(df0 * -0.6).epsilon(1e-14));
    CHECK(g.extractor[0].weight.at(1, 0) == doctest::Approx(df1 * 0.8).epsilon(1e-14));
    CHECK(g.extractor[0].weight.at(1, 1) == doctest::Approx(df1 * -0.6).epsilon(1e-14));
}

TEST_CASE("backward: zero logit gradient means an all-zero update") {
    ModelParams p = identity_passthrough(2);
    p.head_weight.at(0, 0) = 800.0;
    p.head_weight.at(1, 1) = 0.0;
    const ForwardTrace t = forward(p, Vector{1.0, 0.0});
    const GradientUpdate g = backward(p, t, 0);
    for (double v : flatten(g)) CHECK(v == 0.0);
}

TEST_CASE("backward: matches finite differences on random two-hidden models") {
    RandomSource rng(105, 6);
    Architecture arch{8, {12, 10}, 6, 5};
    int accepted = 0;
    double worst = 0.0;
    while (accepted < 20) {
        ModelParams p = testsupport::random_model(rng, arch);
        const Example ex = testsupport::random_example(rng, 8, 5);
        const ForwardTrace t = forward(p, ex.x);
        if (!oracles::away_from_kinks(t, 1e-4)) continue;
        ++accepted;
        const GradientUpdate g = backward(p, t, ex.y);
        const Vector analytic = flatten(g);
        const std::vector<double> fd = oracles::finite_difference_gradient(p, ex, 1e-6);
        REQUIRE(analytic.size() == fd.size());
        for (std::size_t i = 0; i < fd.size(); ++i) {
            const double rel = std::abs(analytic[i] - fd[i]) / (std::abs(fd[i]) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("backward: trace from a different model is rejected") {
    RandomSource rng(106, 7);
    Architecture small{4, {6}, 5, 3};
    Architecture big{4, {8, 6}, 5, 3};
    ModelParams a = testsupport::random_model(rng, small);
    ModelParams b = testsupport::random_model(rng, big);
    const ForwardTrace t = forward(a, Vector{1.0, 2.0, 3.0, 4.0});
    CHECK_THROWS_AS(backward(b, t, 0), ContractError);
}

TEST_CASE("batch_gradient: batch of one equals backward exactly") {
    RandomSource rng(107, 8);
    Architecture arch{6, {8}, 5, 4};
    ModelParams p = testsupport::random_model(rng, arch);
    const Example ex = testsupport::random_example(rng, 6, 4);
    const GradientUpdate single = backward(p, forward(p, ex.x), ex.y);
    const std::vector<Example> batch{ex};
    const GradientUpdate batched = batch_gradient(p, batch);
    CHECK(flatten(single) == flatten(batched));
}

TEST_CASE("batch_gradient: two identical examples equal one") {
    RandomSource rng(108, 9);
    Architecture arch{6, {8}, 5, 4};
    ModelParams p = testsupport::random_model(rng, arch);
    const Example ex = testsupport::random_example(rng, 6, 4);
    const std::vector<Example> batch{ex, ex};
    CHECK(flatten(batch_gradient(p, batch)) ==
          flatten(backward(p, forward(p, ex.x), ex.y)));
}

TEST_CASE("batch_gradient: mean of eight per-example oracles") {
    RandomSource rng(109, 10);
    Architecture arch{6, {8}, 5, 4};
    ModelParams p = testsupport::random_model(rng, arch);
    std::vector<Example> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(testsupport::random_example(rng, 6, 4));
    const GradientUpdate got = batch_gradient(p, batch);
    Vector want;
    for (const Example& ex : batch) {
        const Vector f = flatten(backward(p, forward(p, ex.x), ex.y));
        if (want.empty()) want.assign(f.size(), 0.0);
        for (std::size_t i = 0; i < f.size(); ++i) want[i] += f[i];
    }
    const Vector flat = flatten(got);
    for (std::size_t i = 0; i < flat.size(); ++i)
        CHECK(flat[i] == doctest::Approx(want[i] / 8.0).epsilon(1e-13));
    CHECK(got.batch_size == 8);
}

TEST_CASE("batch_gradient: linear in power-of-two sub-batches, bit exact") {
    RandomSource rng(110, 11);
    Architecture arch{6, {8}, 5, 4};
    ModelParams p = testsupport::random_model(rng, arch);
    std::vector<Example> a, b, all;
    for (int i = 0; i < 8; ++i) a.push_back(testsupport::random_example(rng, 6, 4));
    for (int i = 0; i < 8; ++i) b.push_back(testsupport::random_example(rng, 6, 4));
    all = a;
    all.insert(all.end(), b.begin(), b.end());
    const Vector ga = flatten(batch_gradient(p, a));
    const Vector gb = flatten(batch_gradient(p, b));
    const Vector gall = flatten(batch_gradient(p, all));
    for (std::size_t i = 0; i < gall.size(); ++i)
        CHECK(gall[i] == (8.0 * ga[i] + 8.0 * gb[i]) / 16.0);
}

TEST_CASE("batch_gradient: empty batch rejected") {
    const ModelParams p = headless_model(3, 2);
    CHECK_THROWS_AS(batch_gradient(p, std::span<const Example>{}), ParamError);
}

TEST_CASE("train_sgd: zero epochs leave parameters untouched") {
    RandomSource rng(111, 12);
    Architecture arch{6, {8}, 5, 4};
    ModelParams p = testsupport::random_model(rng, arch);
    std::vector<Example> data;
    for (int i = 0; i < 16; ++i) data.push_back(testsupport::random_example(rng, 6, 4));
    RandomSource train_rng(1, 1);
    const ModelParams after = train_sgd(p, data, 0, 0.1, train_rng);
    CHECK(flatten(zeros_like(p)) == flatten(zeros_like(after)));
    CHECK(p.head_weight.data == after.head_weight.data);
    CHECK(p.extractor[0].weight.data == after.extractor[0].weight.data);
}

TEST_CASE("train_sgd: separable two-class blobs reach 95% accuracy") {
    const SyntheticTask task = make_synthetic_task(2, 8, 0.5, 2.5, 2024);
    RandomSource data_rng(2024, 1);
    const std::vector<Example> data = sample_dataset(task, 100, data_rng);
    RandomSource init_rng(2024, 2);
    Architecture arch{8, {16}, 8, 2};
    ModelParams p = make_model(arch, init_rng);
    RandomSource train_rng(2024, 3);
    const ModelParams trained = train_sgd(std::move(p), data, 50, 0.1, train_rng);
    CHECK(dataset_accuracy(trained, data) >= 0.95);
}

TEST_CASE("train_sgd: bit-identical under a fixed seed") {
    const SyntheticTask task = make_synthetic_task(3, 8, 0.5, 2.5, 7);
    RandomSource data_rng(7, 1);
    const std::vector<Example> data = sample_dataset(task, 30, data_rng);
    Architecture arch{8, {10}, 6, 3};
    auto run = [&] {
        RandomSource init_rng(7, 2);
        ModelParams p = make_model(arch, init_rng);
        RandomSource train_rng(7, 3);
        return train_sgd(std::move(p), data, 5, 0.1, train_rng);
    };
    const ModelParams m1 = run();
    const ModelParams m2 = run();
    CHECK(m1.head_weight.data == m2.head_weight.data);
    CHECK(m1.head_bias == m2.head_bias);
    for (std::size_t i = 0; i < m1.extractor.size(); ++i) {
        CHECK(m1.extractor[i].weight.data == m2.extractor[i].weight.data);
        CHECK(m1.extractor[i].bias == m2.extractor[i].bias);
    }
}

TEST_CASE("train_sgd: invalid learning rate rejected") {
    const ModelParams p = headless_model(3, 2);
    std::vector<Example> data{{Vector{1.0, 2.0}, 0}};
    RandomSource rng(1, 1);
    CHECK_THROWS_AS(train_sgd(p, data, 1, 0.0, rng), ParamError);
}

TEST_CASE("checkpoint: round trip is bit exact") {
    RandomSource rng(112, 13);
    Architecture arch{6, {8, 7}, 5, 4};
    const ModelParams p = testsupport::random_model(rng, arch);
    const std::string path =
        (std::filesystem::temp_directory_path() / "gradfisher_ckpt_test.bin").string();
    save_checkpoint(p, path);
    const ModelParams q = load_checkpoint(path);
    CHECK(p.head_weight.data == q.head_weight.data);
    CHECK(p.head_bias == q.head_bias);
    REQUIRE(p.extractor.size() == q.extractor.size());
    for (std::size_t i = 0; i < p.extractor.size(); ++i) {
        CHECK(p.extractor[i].weight.data == q.extractor[i].weight.data);
        CHECK(p.extractor[i].bias == q.extractor[i].bias);
        CHECK(p.extractor[i].act == q.extractor[i].act);
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint: garbage file rejected") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "gradfisher_ckpt_bad.bin").string();
    {
        std::ofstream os(path, std::ios::binary);
        os << "not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("dataset csv: round trip preserves values and labels") {
    RandomSource rng(113, 14);
    std::vector<Example> data;
    for (int i = 0; i < 12; ++i) data.push_back(testsupport::random_example(rng, 5, 7));
    const std::string path =
        (std::filesystem::temp_directory_path() / "gradfisher_data_test.csv").string();
    save_dataset_csv(data, path);
    const std::vector<Example> back = load_dataset_csv(path);
    REQUIRE(back.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back[i].y == data[i].y);
        CHECK(back[i].x == data[i].x);
    }
    std::filesystem::remove(path);
}

TEST_CASE("dataset csv: malformed rows carry a line number") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "gradfisher_data_bad.csv").string();
    {
        std::ofstream os(path);
        os << "0,1.5,2.5\n1,oops,3.5\n";
    }
    try {
        load_dataset_csv(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
    std::filesystem::remove(path);
}
