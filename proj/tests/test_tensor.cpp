#include <doctest.h>

#include <cmath>
#include <vector>

#include "mudjack/optim.hpp"
#include "mudjack/rng.hpp"
#include "mudjack/tensor.hpp"

using namespace mudjack;

namespace {

// Central finite difference of a scalar-valued function at every entry of
// `param`, used as the independent gradient oracle.
std::vector<double> finite_difference(Tensor& param, const std::function<double()>& eval,
                                      double step = 1e-5) {
    std::vector<double> fd(static_cast<size_t>(param.numel()));
    auto data = param.data_mut();
    for (size_t i = 0; i < fd.size(); ++i) {
        double keep = data[i];
        data[i] = keep + step;
        double up = eval();
        data[i] = keep - step;
        double down = eval();
        data[i] = keep;
        fd[i] = (up - down) / (2.0 * step);
    }
    return fd;
}

double max_rel_error(std::span<const double> got, std::span<const double> want) {
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        double denom = std::max({std::abs(got[i]), std::abs(want[i]), 1e-3});
        worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul shape law and values") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3, 1}, {1, 1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.data()[0] == doctest::Approx(6.0));
    CHECK(c.data()[1] == doctest::Approx(15.0));
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 1});
    try {
        matmul(a, b);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 1]") != std::string::npos);
    }
}

TEST_CASE("relu definition") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);
}

TEST_CASE("conv2d with 1x1 identity kernel reproduces the image") {
    Rng rng(11);
    Tensor img = Tensor::uniform({1, 1, 5, 7}, 0.0, 1.0, rng);
    Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor b = Tensor::from({1}, {0.0});
    Tensor out = conv2d(img, w, b, 0);
    REQUIRE(out.shape() == img.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[static_cast<size_t>(i)] ==
              doctest::Approx(img.data()[static_cast<size_t>(i)]));
    }
}

TEST_CASE("backward on sum gives unit gradients") {
    Tape tape;
    TapeScope scope(tape);
    Tensor w = Tensor::from({4}, {1, 2, 3, 4}, true);
    Tensor loss = sum(w);
    backward(loss);
    for (double g : w.grad()) {
        CHECK(g == 1.0);
    }
}

TEST_CASE("backward on sum of squares") {
    Tape tape;
    TapeScope scope(tape);
    Tensor w = Tensor::from({2}, {1, 2}, true);
    Tensor loss = sum(mul(w, w));
    backward(loss);
    CHECK(w.grad()[0] == doctest::Approx(2.0));
    CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape tape;
    TapeScope scope(tape);
    Tensor w = Tensor::from({2}, {1, 2}, true);
    Tensor y = mul(w, w);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("gradients accumulate across backward calls until reset") {
    Tape tape;
    TapeScope scope(tape);
    Tensor w = Tensor::from({2}, {1, 2}, true);
    Tensor l1 = sum(w);
    backward(l1);
    Tensor l2 = sum(mul(w, w));
    backward(l2);
    CHECK(w.grad()[0] == doctest::Approx(1.0 + 2.0));
    CHECK(w.grad()[1] == doctest::Approx(1.0 + 4.0));
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("two-layer net gradient matches central finite differences") {
    Rng rng(7);
    Tensor x = Tensor::uniform({3, 5}, -1.0, 1.0, rng);
    Tensor w1 = Tensor::uniform({5, 4}, -0.8, 0.8, rng, true);
    Tensor b1 = Tensor::uniform({4}, -0.2, 0.2, rng, true);
    Tensor w2 = Tensor::uniform({4, 1}, -0.8, 0.8, rng, true);

    auto eval = [&]() {
        NoGradGuard ng;
        Tensor h = relu(add_rowwise(matmul(x, w1), b1));
        Tensor y = matmul(h, w2);
        return sum(mul(y, y)).item();
    };

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor h = relu(add_rowwise(matmul(x, w1), b1));
        Tensor y = matmul(h, w2);
        Tensor loss = sum(mul(y, y));
        backward(loss);
    }

    for (Tensor* p : {&w1, &b1, &w2}) {
        auto fd = finite_difference(*p, eval);
        CHECK(max_rel_error(p->grad(), fd) < 1e-4);
    }
}

TEST_CASE("cosine similarity values") {
    Tensor a = Tensor::from({3}, {1, 0, 0});
    CHECK(cosine_similarity(a, a).item() == doctest::Approx(1.0));

    Tensor b = Tensor::from({2}, {1, 0});
    Tensor c = Tensor::from({2}, {0, 1});
    CHECK(cosine_similarity(b, c).item() == doctest::Approx(0.0));

    Tensor d = Tensor::from({2}, {1, 1});
    CHECK(cosine_similarity(d, b).item() == doctest::Approx(0.70710678).epsilon(1e-6));
}

TEST_CASE("cosine similarity rejects zero-norm input") {
    Tensor a = Tensor::from({2}, {0, 0});
    Tensor b = Tensor::from({2}, {1, 0});
    CHECK_THROWS_AS(cosine_similarity(a, b), std::invalid_argument);
}

TEST_CASE("cosine similarity gradient matches finite differences") {
    Rng rng(3);
    Tensor a = Tensor::uniform({4}, -1.0, 1.0, rng, true);
    Tensor b = Tensor::uniform({4}, -1.0, 1.0, rng, true);
    auto eval = [&]() {
        NoGradGuard ng;
        return cosine_similarity(a, b).item();
    };
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor c = cosine_similarity(a, b);
        backward(c);
    }
    for (Tensor* p : {&a, &b}) {
        auto fd = finite_difference(*p, eval);
        CHECK(max_rel_error(p->grad(), fd) < 1e-4);
    }
}

TEST_CASE("plain SGD update rule") {
    Tensor w = Tensor::from({1}, {1.0}, true);
    w.grad_mut()[0] = 2.0;
    Optimizer opt({w}, {OptimizerKind::Sgd, 0.1});
    opt.step();
    CHECK(w.data()[0] == doctest::Approx(0.8));
    CHECK(w.grad()[0] == 0.0);  // step zeroes gradients

    // two consecutive steps under constant gradient displace by 2*lr*g
    Tensor u = Tensor::from({1}, {1.0}, true);
    Optimizer opt2({u}, {OptimizerKind::Sgd, 0.1});
    u.grad_mut()[0] = 2.0;
    opt2.step();
    u.grad_mut()[0] = 2.0;
    opt2.step();
    CHECK(u.data()[0] == doctest::Approx(1.0 - 2.0 * 0.1 * 2.0));
}

TEST_CASE("optimizer rejects missing gradients") {
    Tensor w = Tensor::from({1}, {1.0}, true);
    Optimizer opt({w}, {OptimizerKind::Sgd, 0.1});
    CHECK_THROWS_AS(opt.step(), std::runtime_error);
}

TEST_CASE("adam step on a quadratic bowl decreases the loss") {
    Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
    auto loss_value = [&]() {
        double acc = 0.0;
        for (double v : w.data()) {
            acc += v * v;
        }
        return acc;
    };
    double before = loss_value();
    Optimizer opt({w}, {OptimizerKind::Adam, 1e-2});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sum(mul(w, w));
        backward(loss);
    }
    opt.step();
    CHECK(loss_value() < before);
}

TEST_CASE("chain rule composition equals fused expression") {
    Rng rng(5);
    Tensor x = Tensor::uniform({6}, -1.0, 1.0, rng, true);

    Tape t1;
    {
        TapeScope scope(t1);
        Tensor g = mul(x, x);
        Tensor f = sum(mul(g, g));  // f(g(x)) staged
        backward(f);
    }
    std::vector<double> staged(x.grad().begin(), x.grad().end());
    x.zero_grad();

    Tape t2;
    {
        TapeScope scope(t2);
        Tensor fused = sum(mul(mul(x, x), mul(x, x)));
        backward(fused);
    }
    for (size_t i = 0; i < staged.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(staged[i]).epsilon(1e-12));
    }
}

TEST_CASE("determinism: identical seeds give bit-identical outputs and gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor x = Tensor::uniform({4, 6}, -1.0, 1.0, rng);
        Tensor w = Tensor::uniform({6, 3}, -1.0, 1.0, rng, true);
        Tape tape;
        TapeScope scope(tape);
        Tensor y = relu(matmul(x, w));
        Tensor loss = mean(mul(y, y));
        backward(loss);
        std::vector<double> out(y.data().begin(), y.data().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto a = run(123);
    auto b = run(123);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);
    }
}

TEST_CASE("maxpool, concat, reshape, transpose gradients match finite differences") {
    Rng rng(17);
    Tensor x = Tensor::uniform({2, 2, 4, 4}, -1.0, 1.0, rng, true);
    Tensor w = Tensor::uniform({3, 2, 3, 3}, -0.5, 0.5, rng, true);
    Tensor b = Tensor::uniform({3}, -0.1, 0.1, rng, true);

    auto eval = [&]() {
        NoGradGuard ng;
        Tensor c = conv2d(x, w, b, 1);
        Tensor p = maxpool2d(relu(c), 2);
        Tensor flat = reshape(p, {2, 3 * 2 * 2});
        Tensor cat = concat(flat, flat, 0);
        Tensor tr = transpose2d(cat);
        return mean(mul(tr, tr)).item();
    };

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor c = conv2d(x, w, b, 1);
        Tensor p = maxpool2d(relu(c), 2);
        Tensor flat = reshape(p, {2, 3 * 2 * 2});
        Tensor cat = concat(flat, flat, 0);
        Tensor tr = transpose2d(cat);
        Tensor loss = mean(mul(tr, tr));
        backward(loss);
    }

    for (Tensor* p : {&w, &b, &x}) {
        auto fd = finite_difference(*p, eval);
        CHECK(max_rel_error(p->grad(), fd) < 1e-4);
    }
}

TEST_CASE("l2_normalize_rows produces unit rows and a safe degenerate fallback") {
    Tensor x = Tensor::from({2, 3}, {3, 0, 4, 0, 0, 0});
    Tensor y = l2_normalize_rows(x);
    CHECK(y.data()[0] == doctest::Approx(0.6));
    CHECK(y.data()[2] == doctest::Approx(0.8));
    double n1 = 0, n2 = 0;
    for (int j = 0; j < 3; ++j) {
        n1 += y.data()[static_cast<size_t>(j)] * y.data()[static_cast<size_t>(j)];
        n2 += y.data()[static_cast<size_t>(3 + j)] * y.data()[static_cast<size_t>(3 + j)];
    }
    CHECK(std::sqrt(n1) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("rowwise_dot and softmax_cross_entropy gradients match finite differences") {
    Rng rng(23);
    Tensor a = Tensor::uniform({3, 4}, -1.0, 1.0, rng, true);
    Tensor b = Tensor::uniform({3, 4}, -1.0, 1.0, rng, true);
    std::vector<int> labels{0, 2, 1};

    auto eval = [&]() {
        NoGradGuard ng;
        Tensor n = l2_normalize_rows(a);
        Tensor dots = rowwise_dot(n, b);
        Tensor logits = matmul(reshape(dots, {3, 1}), Tensor::from({1, 3}, {1.0, -0.5, 0.25}));
        return softmax_cross_entropy(logits, labels).item();
    };

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor n = l2_normalize_rows(a);
        Tensor dots = rowwise_dot(n, b);
        Tensor logits = matmul(reshape(dots, {3, 1}), Tensor::from({1, 3}, {1.0, -0.5, 0.25}));
        Tensor loss = softmax_cross_entropy(logits, labels);
        backward(loss);
    }

    for (Tensor* p : {&a, &b}) {
        auto fd = finite_difference(*p, eval);
        CHECK(max_rel_error(p->grad(), fd) < 1e-4);
    }
}

TEST_CASE("no recording happens without a tape or gradient-requiring inputs") {
    Tensor a = Tensor::from({2}, {1, 2}, true);
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor c = add(a, b);  // no active tape
    CHECK_FALSE(c.requires_grad());

    Tape tape;
    TapeScope scope(tape);
    Tensor d = add(b.clone(), b);  // no input requires grad
    CHECK_FALSE(d.requires_grad());
    CHECK(tape.size() == 0);

    Tensor e = add(a, b);
    CHECK(e.requires_grad());
    CHECK(tape.size() == 1);
}
