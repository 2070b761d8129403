#include <doctest.h>

#include <cmath>

#include "cir/losses.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace cir;

namespace {
MatrixXd random_unit_rows(Eigen::Index b, Eigen::Index d, SeededRng& rng) {
  return l2_normalize_rows(gaussian_matrix(b, d, rng, 1.0));
}
}  // namespace

TEST_CASE("info_nce closed forms") {
  SeededRng rng(1);
  auto p = random_unit_rows(1, 5, rng), t = random_unit_rows(1, 5, rng);
  CHECK(info_nce(p, t, 0.07).value == 0.0);

  MatrixXd eye = MatrixXd::Identity(2, 2);
  // Direct 2x2 enumeration: row i has logits (1, 0); -log(e / (e + 1)).
  const long double want = -std::log(std::exp(1.0L) / (std::exp(1.0L) + 1.0L));
  CHECK(std::abs(info_nce(eye, eye, 1.0).value - double(want)) < 1e-12);
  CHECK(std::abs(info_nce(eye, eye, 1.0).value - 0.3132616875182228) < 1e-12);

  CHECK_CIR_ERROR(info_nce(eye, MatrixXd(MatrixXd::Identity(3, 3)), 1.0), ErrorCode::ShapeMismatch);
  CHECK_CIR_ERROR(info_nce(MatrixXd(2 * eye), eye, 1.0), ErrorCode::NotNormalized);
  CHECK_CIR_ERROR(info_nce(eye, eye, 0.0), ErrorCode::InvalidTemperature);
  CHECK_CIR_ERROR(info_nce(p, t, 1.0, true), ErrorCode::InvalidArgument);
}

TEST_CASE("info_nce literal variant excludes the positive from the denominator") {
  MatrixXd eye = MatrixXd::Identity(2, 2);
  // Row i: -log(e^1 / e^0) = -1.
  CHECK(info_nce(eye, eye, 1.0, true).value == doctest::Approx(-1.0));
}

TEST_CASE("info_nce gradients match finite differences") {
  SeededRng rng(2);
  for (bool exclude : {false, true}) {
    for (int trial = 0; trial < 5; ++trial) {
      MatrixXd p = random_unit_rows(4, 8, rng), t = random_unit_rows(4, 8, rng);
      const double tau = 0.1 + rng.uniform();
      auto out = info_nce(p, t, tau, exclude);
      // Perturbations leave the unit sphere by O(h); the tolerance check is
      // loose enough (1e-3) that central differences stay valid.
      auto np = oracle::finite_difference(p, [&] { return info_nce(p, t, tau, exclude).value; });
      auto nt = oracle::finite_difference(t, [&] { return info_nce(p, t, tau, exclude).value; });
      CHECK(oracle::max_relative_error(out.grads.at("prompts"), np) <= 1e-6);
      CHECK(oracle::max_relative_error(out.grads.at("targets"), nt) <= 1e-6);
    }
  }
}

TEST_CASE("info_nce invariants") {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = static_cast<Eigen::Index>(2 + rng.below(8));
    MatrixXd p = random_unit_rows(b, 6, rng), t = random_unit_rows(b, 6, rng);
    const double v = info_nce(p, t, 0.07).value;
    CHECK(v >= 0.0);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(b);
    perm.setIdentity();
    for (Eigen::Index i = b - 1; i > 0; --i)
      std::swap(perm.indices()[i], perm.indices()[static_cast<Eigen::Index>(rng.below(i + 1))]);
    MatrixXd pp = perm * p, tp = perm * t;
    CHECK(info_nce(pp, tp, 0.07).value == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("similarity_scores") {
  SeededRng rng(4);
  Eigen::VectorXd e1 = Eigen::VectorXd::Unit(4, 0), e2 = Eigen::VectorXd::Unit(4, 1);
  auto s = similarity_scores<double>(e1, e1, e2, 100.0);
  CHECK(s.positive == doctest::Approx(100.0));
  CHECK(s.negative == 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd a = l2_normalize(Eigen::VectorXd(gaussian_matrix(9, 1, rng, 1.0).reshaped()));
    Eigen::VectorXd b = l2_normalize(Eigen::VectorXd(gaussian_matrix(9, 1, rng, 1.0).reshaped()));
    Eigen::VectorXd c = l2_normalize(Eigen::VectorXd(gaussian_matrix(9, 1, rng, 1.0).reshaped()));
    long double dab = 0, dac = 0;
    for (int i = 0; i < 9; ++i) {
      dab += (long double)a[i] * b[i];
      dac += (long double)a[i] * c[i];
    }
    auto sc = similarity_scores<double>(a, b, c, 37.5);
    CHECK(std::abs(sc.positive - double(37.5L * dab)) <= 1e-9);
    CHECK(std::abs(sc.negative - double(37.5L * dac)) <= 1e-9);
  }
  CHECK_CIR_ERROR(similarity_scores<double>(Eigen::VectorXd(2 * e1), e1, e2, 1.0),
                  ErrorCode::NotNormalized);
}

TEST_CASE("dpo_loss closed forms") {
  Eigen::VectorXd s(3);
  s << -4, 0.5, 17;
  CHECK(std::abs(dpo_loss(s, s, 0.1).value - std::log(2.0)) <= 1e-12);

  Eigen::VectorXd plus(4), minus(4);
  plus << 10, 11, 20, -5;
  minus << 0, 1, 10, -15;
  // mpmath: -log sigmoid(1) = 0.313261687518222834
  CHECK(std::abs(dpo_loss(plus, minus, 0.1).value - 0.31326168751822283) <= 1e-9);
  CHECK(std::abs(dpo_loss(plus, minus, 0.1).value - double(-oracle::log_sigmoid(1.0L))) <= 1e-9);

  CHECK_CIR_ERROR(dpo_loss(plus, Eigen::VectorXd::Zero(2), 0.1), ErrorCode::ShapeMismatch);
  CHECK_CIR_ERROR(dpo_loss(plus, minus, 0.0), ErrorCode::InvalidArgument);
}

TEST_CASE("dpo_loss monotone in the margin") {
  Eigen::VectorXd minus = Eigen::VectorXd::Zero(2);
  double prev = 1e9;
  for (double m = -3; m <= 3; m += 0.25) {
    Eigen::VectorXd plus(2);
    plus << m, -1.0;
    const double v = dpo_loss(plus, minus, 0.7).value;
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("dpo_loss invariants and gradient") {
  SeededRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = static_cast<Eigen::Index>(1 + rng.below(10));
    Eigen::VectorXd plus = gaussian_matrix(b, 1, rng, 20.0).reshaped();
    Eigen::VectorXd minus = gaussian_matrix(b, 1, rng, 20.0).reshaped();
    const double beta = 0.01 + rng.uniform();
    const double c = 50.0 * rng.normal();
    auto out = dpo_loss(plus, minus, beta);
    CHECK(dpo_loss(Eigen::VectorXd(plus.array() + c), Eigen::VectorXd(minus.array() + c), beta).value ==
          doctest::Approx(out.value).epsilon(1e-12));
    CHECK(std::abs(dpo_loss(Eigen::VectorXd(beta * plus), Eigen::VectorXd(beta * minus), 1.0).value -
                   out.value) <= 1e-12);
    for (Eigen::Index i = 0; i < b; ++i) {
      const long double closed =
          -(long double)beta / b * oracle::sigmoid(-(long double)beta * (plus[i] - minus[i]));
      CHECK(std::abs(out.grads.at("s_plus")(i, 0) - double(closed)) <= 1e-15);
      CHECK(out.grads.at("s_minus")(i, 0) == -out.grads.at("s_plus")(i, 0));
    }
    // Central differences lose relative precision once sigma saturates, so
    // the difference check uses moderate margins; h = 1e-4 balances
    // truncation against roundoff for small beta.
    plus = gaussian_matrix(b, 1, rng, 3.0).reshaped();
    minus = gaussian_matrix(b, 1, rng, 3.0).reshaped();
    out = dpo_loss(plus, minus, beta);
    MatrixXd pm = plus, mm = minus;
    auto np = oracle::finite_difference(pm, [&] {
      return dpo_loss(Eigen::VectorXd(pm.reshaped()), minus, beta).value;
    }, 1e-4);
    auto nm = oracle::finite_difference(mm, [&] {
      return dpo_loss(plus, Eigen::VectorXd(mm.reshaped()), beta).value;
    }, 1e-4);
    CHECK(oracle::max_relative_error(out.grads.at("s_plus"), np) <= 1e-8);
    CHECK(oracle::max_relative_error(out.grads.at("s_minus"), nm) <= 1e-8);
  }
}
