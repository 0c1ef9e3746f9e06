#include "cahqp/alignment.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace cahqp;
using cahqp::testing::numeric_gradient;
using cahqp::testing::random_matrix;
using cahqp::testing::relative_error;

namespace {

// A discriminator whose last layer is zeroed outputs sigmoid(0) = 0.5 for any input.
Discriminator half_discriminator(int width) {
  Rng rng(1);
  Discriminator d = Discriminator::create(width, 8, rng);
  d.mlp.out.weight.mutable_value().setZero();
  d.mlp.out.bias.mutable_value().setZero();
  return d;
}

DiscriminatorSet half_set(int width) {
  return {half_discriminator(width), half_discriminator(width), half_discriminator(width), half_discriminator(width)};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One detection row per requested (class, probability) pair; the remaining mass
// is spread evenly over the other columns.
DetectionSet detections_with(const std::vector<std::pair<int, double>>& rows) {
  DetectionSet d{ag::Matrix(static_cast<Eigen::Index>(rows.size()), 4),
                 ag::Matrix::Constant(static_cast<Eigen::Index>(rows.size()), 4, 0.3)};
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto [cls, p] = rows[i];
    for (int c = 0; c < 4; ++c) d.class_logits(static_cast<Eigen::Index>(i), c) = std::log(c == cls ? p : (1 - p) / 3);
  }
  return d;
}

}  // namespace

TEST_SUITE("alignment") {
  TEST_CASE("domain BCE examples") {
    CHECK(domain_bce(0.5, DomainLabel::source) == doctest::Approx(0.6931).epsilon(1e-4));
    CHECK(domain_bce(0.5, DomainLabel::target) == doctest::Approx(0.6931).epsilon(1e-4));
    CHECK(domain_bce(0.99, DomainLabel::target) == doctest::Approx(0.01005).epsilon(1e-3));
    CHECK(domain_bce(0.99, DomainLabel::source) == doctest::Approx(4.6052).epsilon(1e-4));
    CHECK(domain_bce(0.99, DomainLabel::target) == doctest::Approx(-std::log(0.99)).epsilon(1e-12));
    // Clamping keeps saturated probabilities finite.
    CHECK(std::isfinite(domain_bce(1.0, DomainLabel::source)));
    CHECK(domain_bce(ag::Var(ag::Matrix{{0.99}}), DomainLabel::source).item() == doctest::Approx(-std::log(0.01)));
  }

  TEST_CASE("domain BCE-derived terms are non-negative") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 100; ++i) {
      const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      CHECK(domain_bce(p, DomainLabel::source) >= 0.0);
      CHECK(domain_bce(p, DomainLabel::target) >= 0.0);
    }
  }

  TEST_CASE("gradient reversal scales any upstream gradient by -strength") {
    std::mt19937_64 rng(3);
    Rng init(4);
    const Discriminator d = Discriminator::create(5, 8, init);
    for (double strength : {0.0, 0.3, 1.0, 2.5}) {
      ag::Var x(random_matrix(3, 5, rng), true);
      ag::backward(domain_bce(d(x), DomainLabel::target));
      const ag::Matrix plain = x.grad();
      x.zero_grad();
      ag::backward(domain_bce(d(ag::gradient_reversal(x, strength)), DomainLabel::target));
      CHECK((x.grad() + strength * plain).cwiseAbs().maxCoeff() < 1e-15);
    }
  }

  TEST_CASE("DQFA loss examples") {
    const DiscriminatorSet d = half_set(4);
    const ag::Var enc(ag::Matrix{{0.3, -1.0, 2.0, 0.1}}), dec(ag::Matrix{{1.0, 1.0, 0.0, -0.5}});
    AdvLossWeights w;
    CHECK(dqfa_loss(enc, dec, DomainLabel::source, d, w, 1.0).item() == doctest::Approx(1.3863).epsilon(1e-4));
    w.dqfa_encoder = 0.0;
    w.dqfa_decoder = 0.0;
    CHECK(dqfa_loss(enc, dec, DomainLabel::source, d, w, 1.0).item() == 0.0);
    w.dqfa_encoder = 1.0;
    w.dqfa_decoder = 2.0;
    CHECK(dqfa_loss(enc, dec, DomainLabel::target, d, w, 1.0).item() == doctest::Approx(2.0794).epsilon(1e-4));
    CHECK(dqfa_loss(enc, dec, DomainLabel::target, d, w, 1.0).item() == doctest::Approx(3.0 * std::log(2.0)));
    CHECK_THROWS_AS(dqfa_loss(ag::Var(), dec, DomainLabel::source, d, w, 1.0), std::invalid_argument);
  }

  TEST_CASE("soft mask: aligned token 0.731, orthogonal tokens 0.5") {
    const ag::Matrix tokens = ag::Matrix::Identity(3, 3);
    const auto m = compute_soft_mask(tokens, ag::Matrix{{0.0, 1.0, 0.0}});
    REQUIRE(m.has_value());
    CHECK(m->size() == 3);
    CHECK(m->psi(1) == doctest::Approx(sigmoid(1.0)).epsilon(1e-12));
    CHECK(m->psi(1) == doctest::Approx(0.731).epsilon(1e-3));
    CHECK(m->psi(0) == 0.5);
    CHECK(m->psi(2) == 0.5);
  }

  TEST_CASE("soft mask: two queries average the raw similarities before the sigmoid") {
    std::mt19937_64 rng(5);
    const ag::Matrix tokens = random_matrix(6, 4, rng);
    const ag::Matrix q = random_matrix(2, 4, rng);
    const auto both = compute_soft_mask(tokens, q);
    const auto a = compute_soft_mask(tokens, q.topRows(1));
    const auto b = compute_soft_mask(tokens, q.bottomRows(1));
    REQUIRE(both.has_value());
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    for (int k = 0; k < 6; ++k) {
      CHECK(both->psi(k) == doctest::Approx(sigmoid(0.5 * (logit(a->psi(k)) + logit(b->psi(k))))).epsilon(1e-10));
      // Independent computation from normalized dot products.
      double raw = 0.0;
      for (int i = 0; i < 2; ++i) raw += tokens.row(k).normalized().dot(q.row(i).normalized()) / 2.0;
      CHECK(both->psi(k) == doctest::Approx(sigmoid(raw)).epsilon(1e-12));
    }
  }

  TEST_CASE("soft mask guards: no matched queries or a zero query skip the term") {
    std::mt19937_64 rng(6);
    const ag::Matrix tokens = random_matrix(5, 4, rng);
    CHECK_FALSE(compute_soft_mask(tokens, ag::Matrix(0, 4)).has_value());
    CHECK_FALSE(compute_soft_mask(tokens, ag::Matrix::Zero(2, 4)).has_value());
  }

  TEST_CASE("soft mask range and length on random inputs") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 1 + trial % 17;
      const auto m = compute_soft_mask(random_matrix(n, 6, rng, -5, 5), random_matrix(1 + trial % 4, 6, rng));
      REQUIRE(m.has_value());
      CHECK(m->size() == n);
      CHECK((m->psi.array() >= 0.0).all());
      CHECK((m->psi.array() <= 1.0).all());
    }
  }

  TEST_CASE("TIAFA encoder loss examples") {
    std::mt19937_64 rng(8);
    Rng init(9);
    Discriminator d = Discriminator::create(4, 8, init);
    d.mlp.out.bias.mutable_value().setZero();
    d.mlp.hidden.bias.mutable_value().setZero();
    const ag::Var tokens(random_matrix(5, 4, rng));
    const SoftMask zero{ag::Matrix::Zero(5, 1)};
    CHECK(tiafa_encoder_loss(tokens, zero, DomainLabel::target, d, 1.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const Discriminator r = Discriminator::create(4, 8, init);
    const ag::Var single(random_matrix(1, 4, rng));
    const SoftMask one{ag::Matrix::Constant(1, 1, 0.7)};
    const double p = r(ag::Var(0.7 * single.value())).item();
    CHECK(tiafa_encoder_loss(single, one, DomainLabel::source, r, 1.0).item() ==
          doctest::Approx(domain_bce(p, DomainLabel::source)).epsilon(1e-12));

    CHECK_THROWS_AS(tiafa_encoder_loss(tokens, one, DomainLabel::source, r, 1.0), std::invalid_argument);
  }

  TEST_CASE("TIAFA encoder loss gradient w.r.t. tokens matches finite differences") {
    std::mt19937_64 rng(10);
    Rng init(11);
    const Discriminator d = Discriminator::create(4, 8, init);
    ag::Var tokens(random_matrix(6, 4, rng), true);
    const SoftMask m = *compute_soft_mask(tokens.value(), random_matrix(2, 4, rng));
    // Strength -1 makes the reversal an identity on gradients, so the
    // analytic gradient should equal the plain derivative of the loss value.
    auto loss = [&] { return tiafa_encoder_loss(tokens, m, DomainLabel::target, d, -1.0); };
    ag::backward(loss());
    CHECK(relative_error(tokens.grad(), numeric_gradient([&] { return loss().item(); }, tokens)) < 1e-4);
  }

  TEST_CASE("decoder foreground weights") {
    CHECK(decoder_foreground_weights(Assignment{{{0, 0}, {3, 1}}}, 5) == std::vector<double>{1, 0, 0, 1, 0});
    CHECK(decoder_foreground_weights(Assignment{}, 3) == std::vector<double>{0, 0, 0});
    CHECK(decoder_foreground_weights(Assignment{{{0, 1}, {1, 0}}}, 2) == std::vector<double>{1, 1});
  }

  TEST_CASE("TIAFA decoder loss: no foreground, one foreground, finite differences") {
    std::mt19937_64 rng(12);
    const Discriminator half = half_discriminator(4);
    const ag::Var q(random_matrix(4, 4, rng));
    const std::vector<double> none(4, 0.0), one{0, 0, 1, 0};
    CHECK(tiafa_decoder_loss(q, none, DomainLabel::source, half, 1.0).item() == 0.0);
    CHECK(tiafa_decoder_loss(q, one, DomainLabel::source, half, 1.0).item() == doctest::Approx(std::log(2.0)));

    Rng init(13);
    const Discriminator d = Discriminator::create(4, 8, init);
    ag::Var x(random_matrix(4, 4, rng), true);
    const std::vector<double> w{1, 0, 1, 1};
    auto loss = [&] { return tiafa_decoder_loss(x, w, DomainLabel::target, d, -1.0); };
    ag::backward(loss());
    CHECK(relative_error(x.grad(), numeric_gradient([&] { return loss().item(); }, x)) < 1e-4);
    CHECK(x.grad().row(1).isZero(0.0));

    // Mean over matched queries only: equals the mean of per-query BCE.
    double expected = 0.0;
    for (int i : {0, 2, 3}) expected += domain_bce(d(ag::Var(x.value().row(i))).item(), DomainLabel::target) / 3.0;
    CHECK(loss().item() == doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("total adversarial loss sums the parts; weighted TIAFA") {
    CHECK(total_adversarial_loss({ag::Var(ag::Matrix{{1.0}}), ag::Var(ag::Matrix{{0.5}})}).item() == 1.5);
    CHECK(total_adversarial_loss({ag::Var(), ag::Var()}).item() == 0.0);
    AdvLossWeights w;
    w.tiafa_encoder = 2.0;
    w.tiafa_decoder = 0.5;
    CHECK(weighted_tiafa(ag::Var(ag::Matrix{{1.0}}), ag::Var(ag::Matrix{{4.0}}), w).item() == 4.0);
    CHECK(weighted_tiafa(ag::Var(), ag::Var(ag::Matrix{{4.0}}), w).item() == 2.0);
    w.tiafa_encoder = w.tiafa_decoder = 0.0;
    CHECK(weighted_tiafa(ag::Var(ag::Matrix{{1.0}}), ag::Var(ag::Matrix{{4.0}}), w).item() == 0.0);
  }

  TEST_CASE("pseudo-label filter examples") {
    const DetectionSet d = detections_with({{0, 0.9}, {1, 0.6}, {2, 0.3}});
    CHECK(filter_pseudo_labels(d, 0.7).size() == 1);
    CHECK(filter_pseudo_labels(d, 0.7).front().class_id == 0);
    CHECK(filter_pseudo_labels(d, 0.999).empty());
    // Background-argmax queries are never kept.
    CHECK(filter_pseudo_labels(detections_with({{3, 0.95}}), 0.5).empty());
    // Order: descending confidence, ties by query index.
    const auto s = filter_scored_pseudo_labels(detections_with({{1, 0.7}, {0, 0.9}, {2, 0.7}}), 0.5);
    REQUIRE(s.size() == 3);
    CHECK(s[0].label.class_id == 0);
    CHECK(s[1].label.class_id == 1);
    CHECK(s[2].label.class_id == 2);
  }

  TEST_CASE("pseudo-label filter is monotone in tau") {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 50; ++trial) {
      const DetectionSet d{random_matrix(10, 4, rng, -4, 4), random_matrix(10, 4, rng, 0.1, 0.9)};
      const auto lo = filter_pseudo_labels(d, 0.5), hi = filter_pseudo_labels(d, 0.8);
      CHECK(hi.size() <= lo.size());
      for (const auto& l : hi) CHECK(std::find(lo.begin(), lo.end(), l) != lo.end());
    }
  }

  TEST_CASE("GRL warm-up schedule") {
    CHECK(grl_schedule(0, 100, 1.0) == 0.0);
    CHECK(grl_schedule(10, 100, 1.0) == doctest::Approx(0.5));
    CHECK(grl_schedule(20, 100, 2.0) == 2.0);
    CHECK(grl_schedule(90, 100, 1.0) == 1.0);
    CHECK(grl_schedule(0, 100, 1.0, 0.0) == 1.0);
  }

  TEST_CASE("adversarial direction: the discriminator improves while the features become harder to classify") {
    std::mt19937_64 rng(15);
    Rng init(16);
    // Toy "encoder": a linear map applied to fixed source and target inputs.
    ag::Var encoder(random_matrix(3, 4, rng), true);
    const ag::Matrix xs = random_matrix(8, 3, rng, 0.0, 1.0);
    const ag::Matrix xt = random_matrix(8, 3, rng, -1.0, 0.0);
    const Discriminator d = Discriminator::create(4, 8, init);
    ParameterList disc;
    d.collect("d", disc);

    auto domain_loss = [&](const ag::Matrix& enc, double strength) {
      const ag::Var w = strength == 0.0 ? ag::Var(enc) : encoder;
      const ag::Var fs = ag::gradient_reversal(ag::matmul(ag::Var(xs), w), strength);
      const ag::Var ft = ag::gradient_reversal(ag::matmul(ag::Var(xt), w), strength);
      return ag::add(domain_bce(d(fs), DomainLabel::source), domain_bce(d(ft), DomainLabel::target));
    };
    const ag::Matrix enc_before = encoder.value();
    const double before = domain_loss(enc_before, 0.0).item();
    ag::backward(domain_loss(enc_before, 1.0));
    const double lr = 0.05;
    for (auto& p : disc) {
      ag::Var v = p.var;
      v.mutable_value() -= lr * v.grad();
    }
    encoder.mutable_value() -= lr * encoder.grad();
    // Updated discriminator on the old features: better.
    const double disc_after = domain_loss(enc_before, 0.0).item();
    CHECK(disc_after < before);
    // Updated discriminator on features from the updated encoder: worse.
    const double feat_after = domain_loss(encoder.value(), 0.0).item();
    CHECK(feat_after > disc_after);
  }
}
