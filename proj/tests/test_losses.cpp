// Loss terms against closed-form oracle values.

#include <catch2/catch_amalgamated.hpp>

#include <swarmseg/losses.hpp>
#include <swarmseg/rng.hpp>
#include <swarmseg/tensor.hpp>

#include <cmath>

using namespace swarmseg;

namespace {

// One-pixel two-class fixture: probability p on the true class.
struct PixelCase {
    Tensor probs;
    Tensor onehot;
};

PixelCase pixel_case(double p_true) {
    return {Tensor::from_data({2, 1, 1}, {1.0 - p_true, p_true}),
            Tensor::from_data({2, 1, 1}, {0.0, 1.0})};
}

}  // namespace

TEST_CASE("cross entropy oracle values") {
    // Uniform two-class prediction: -log(1/2) = ln 2.
    auto u = pixel_case(0.5);
    REQUIRE(std::abs(ce_loss(u.probs, u.onehot).value() - 0.69314718055994530942) < 1e-11);

    // p_true = 0.9 (the 1e-12 floor shifts the 11th decimal).
    auto c = pixel_case(0.9);
    REQUIRE(std::abs(ce_loss(c.probs, c.onehot).value() - 0.10536051565671519012) < 1e-13);
}

TEST_CASE("cross entropy averages over pixels") {
    Tensor probs = Tensor::from_data({2, 1, 2}, {0.5, 0.1, 0.5, 0.9});
    Tensor onehot = Tensor::from_data({2, 1, 2}, {0.0, 0.0, 1.0, 1.0});
    const double expect = 0.5 * (0.69314718055994530942 + 0.10536051565671519012);
    REQUIRE(std::abs(ce_loss(probs, onehot).value() - expect) < 1e-11);
}

TEST_CASE("noise-robust loss oracle at q=0.7") {
    auto c = pixel_case(0.5);
    REQUIRE(std::abs(nr_loss(c.probs, c.onehot, 0.7).value() - 0.54918256189648836821) < 1e-14);
}

TEST_CASE("noise-robust loss at q=1 degrades to mean absolute error") {
    auto c = pixel_case(0.3);
    REQUIRE(std::abs(nr_loss(c.probs, c.onehot, 1.0).value() - 0.7) <= 1e-12);
}

TEST_CASE("noise-robust loss approaches cross entropy as q shrinks") {
    auto c = pixel_case(0.37);
    const double nr = nr_loss(c.probs, c.onehot, 1e-4).value();
    const double ce = ce_loss(c.probs, c.onehot).value();
    REQUIRE(std::abs(nr - ce) / ce < 1e-3);
}

TEST_CASE("noise-robust loss validates q") {
    auto c = pixel_case(0.5);
    REQUIRE_THROWS_AS(nr_loss(c.probs, c.onehot, 0.0), ValidationError);
    REQUIRE_THROWS_AS(nr_loss(c.probs, c.onehot, 1.5), ValidationError);
}

TEST_CASE("trace loss on identity, swap, and mixed fields") {
    // Two pixels, both identity: mean trace = 2.
    Tensor eye = Tensor::from_data({2, 2, 1, 2}, {1, 1, 0, 0, 0, 0, 1, 1});
    REQUIRE(tr_loss(eye).value() == 2.0);
    // Both swap: roof trace 0.
    Tensor swap = Tensor::from_data({2, 2, 1, 2}, {0, 0, 1, 1, 1, 1, 0, 0});
    REQUIRE(tr_loss(swap).value() == 0.0);
    // One of each: mean 1.
    Tensor half = Tensor::from_data({2, 2, 1, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    REQUIRE(tr_loss(half).value() == 1.0);
}

TEST_CASE("KL oracle: unit shift is one half") {
    GaussianDiag q{Tensor::from_data({1}, {1.0}), Tensor::from_data({1}, {0.0})};
    GaussianDiag p{Tensor::from_data({1}, {0.0}), Tensor::from_data({1}, {0.0})};
    REQUIRE(std::abs(kl_diag_gauss(q, p).value() - 0.5) < 1e-15);
}

TEST_CASE("KL of identical distributions is zero and sums over dims") {
    Tensor mu = Tensor::from_data({3}, {0.4, -1.0, 2.0});
    Tensor ls = Tensor::from_data({3}, {0.1, -0.2, 0.0});
    GaussianDiag g{mu, ls};
    REQUIRE(std::abs(kl_diag_gauss(g, g).value()) < 1e-15);

    GaussianDiag q{Tensor::from_data({2}, {1.0, 1.0}), Tensor::from_data({2}, {0.0, 0.0})};
    GaussianDiag p{Tensor::from_data({2}, {0.0, 0.0}), Tensor::from_data({2}, {0.0, 0.0})};
    REQUIRE(std::abs(kl_diag_gauss(q, p).value() - 1.0) < 1e-15);

    GaussianDiag bad{Tensor::from_data({2}, {0.0, 0.0}), Tensor::from_data({3}, {0, 0, 0})};
    REQUIRE_THROWS_AS(kl_diag_gauss(bad, bad), ShapeError);
    REQUIRE_THROWS_AS(kl_diag_gauss(q, bad), ShapeError);
}

TEST_CASE("KL asymmetry: variance widening vs narrowing differ") {
    GaussianDiag n{Tensor::from_data({1}, {0.0}), Tensor::from_data({1}, {0.0})};
    GaussianDiag w{Tensor::from_data({1}, {0.0}), Tensor::from_data({1}, {0.5})};
    const double a = kl_diag_gauss(n, w).value();
    const double b = kl_diag_gauss(w, n).value();
    REQUIRE(a > 0.0);
    REQUIRE(b > 0.0);
    REQUIRE(a != b);
}

TEST_CASE("warm-up loss with a perfect prediction is dominated by -trace") {
    // probs == onehot, KL(q,q) = 0, identity field: loss = ce(~0) + 0 - 2.
    Tensor probs = Tensor::from_data({2, 1, 1}, {0.0, 1.0});
    Tensor onehot = Tensor::from_data({2, 1, 1}, {0.0, 1.0});
    Tensor eye = Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1});
    GaussianDiag g{Tensor::from_data({2}, {0.3, -0.3}), Tensor::from_data({2}, {0.0, 0.1})};
    LossWeights lw;
    const double v = warmup_loss(probs, onehot, eye, g, g, lw).value();
    REQUIRE(std::abs(v - (-2.0)) < 1e-9);
}

TEST_CASE("total loss equals the sum of its parts") {
    Rng rng(99);
    Tensor logits({2, 2, 2});
    for (auto& v : logits.data()) v = rng.uniform(-2, 2);
    Tensor probs = channel_softmax(logits);
    Tensor raw({2, 2, 2, 2});
    for (auto& v : raw.data()) v = rng.uniform(-1, 1);
    Tensor w = normalize_columns(softplus(raw));
    Tensor local = pixelwise_matvec(w, probs);
    Tensor onehot = Tensor::from_data({2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    GaussianDiag q{Tensor::from_data({2}, {0.5, -0.5}), Tensor::from_data({2}, {0.2, -0.1})};
    GaussianDiag p{Tensor::from_data({2}, {0.0, 0.0}), Tensor::from_data({2}, {0.0, 0.0})};
    LossWeights lw;

    const double total = total_loss(probs, local, onehot, w, q, p, lw).value();
    const double parts = ce_loss(local, onehot).value() + nr_loss(probs, onehot, lw.q).value() +
                         lw.alpha * tr_loss(w).value() + lw.beta * kl_diag_gauss(q, p).value();
    REQUIRE(std::abs(total - parts) < 1e-14);
}

TEST_CASE("loss weights validate") {
    LossWeights lw;
    lw.alpha = -0.1;
    REQUIRE_THROWS_AS(lw.validate(), ValidationError);
    lw.alpha = 0.01;
    lw.q = 0.0;
    REQUIRE_THROWS_AS(lw.validate(), ValidationError);
    lw.q = 0.7;
    REQUIRE_NOTHROW(lw.validate());
}

TEST_CASE("loss shape validation") {
    Tensor probs = Tensor::from_data({2, 1, 1}, {0.5, 0.5});
    Tensor wrong = Tensor::from_data({2, 1, 2}, {1, 0, 0, 1});
    REQUIRE_THROWS_AS(ce_loss(probs, wrong), ShapeError);
    REQUIRE_THROWS_AS(tr_loss(Tensor({2, 3, 1, 1})), ShapeError);
    REQUIRE_THROWS_AS(tr_loss(Tensor({2, 2, 1})), ShapeError);
}
