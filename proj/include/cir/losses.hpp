#pragma once

#include <map>
#include <string>
#include <utility>

#include "cir/tensor.hpp"

namespace cir {

struct LossConfig {
  double temperature = 0.07;  // InfoNCE tau
  double beta = 0.1;          // DPO margin sharpness
  double logit_scale = 100.0; // fixed similarity scale
  /// Literal reading of the contrastive denominator: sum over j != i only.
  bool exclude_positive = false;

  void validate() const {
    require(temperature > 0.0, ErrorCode::InvalidTemperature, "temperature must be > 0");
    require(beta > 0.0, ErrorCode::InvalidArgument, "beta must be > 0");
    require(logit_scale > 0.0, ErrorCode::InvalidArgument, "logit_scale must be > 0");
  }
};

template <typename T>
struct LossOutput {
  double value = 0.0;
  std::map<std::string, Matrix<T>> grads;
};

inline constexpr double kNormalizedTolerance = 1e-3;

template <typename T>
void require_unit_rows(const Matrix<T>& m, const char* what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = std::sqrt(squared_norm64(m.row(r)));
    require(std::abs(n - 1.0) <= kNormalizedTolerance, ErrorCode::NotNormalized,
            std::string(what) + " row " + std::to_string(r) + " has norm " + std::to_string(n));
  }
}

/// In-batch InfoNCE over row-aligned prompts/targets. With the default
/// convention the denominator of row i runs over every target, including i.
/// Gradients are w.r.t. the (already normalized) inputs.
template <typename T>
LossOutput<T> info_nce(const Matrix<T>& prompts, const Matrix<T>& targets, double temperature,
                       bool exclude_positive = false) {
  require(temperature > 0.0, ErrorCode::InvalidTemperature, "temperature must be > 0");
  require(prompts.rows() == targets.rows() && prompts.cols() == targets.cols(),
          ErrorCode::ShapeMismatch, "prompts and targets must share a shape");
  require(prompts.rows() >= 1, ErrorCode::ShapeMismatch, "batch must be nonempty");
  require(!exclude_positive || prompts.rows() >= 2, ErrorCode::InvalidArgument,
          "excluding the positive needs a batch of at least 2");
  require_unit_rows(prompts, "prompt");
  require_unit_rows(targets, "target");

  const Eigen::Index b = prompts.rows();
  const MatrixXd logits = (prompts.template cast<double>() * targets.template cast<double>().transpose()) /
                          temperature;
  MatrixXd dlogits = MatrixXd::Zero(b, b);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    Eigen::RowVectorXd row = logits.row(i);
    if (exclude_positive) row[i] = -std::numeric_limits<double>::infinity();
    const double lse = log_sum_exp(row);
    total += lse - logits(i, i);
    for (Eigen::Index j = 0; j < b; ++j) dlogits(i, j) = std::exp(row[j] - lse);
    dlogits(i, i) -= 1.0;
  }
  dlogits /= double(b);

  LossOutput<T> out;
  out.value = total / double(b);
  out.grads["prompts"] = (dlogits * targets.template cast<double>() / temperature).template cast<T>();
  out.grads["targets"] =
      (dlogits.transpose() * prompts.template cast<double>() / temperature).template cast<T>();
  return out;
}

struct ScorePair {
  double positive = 0.0;
  double negative = 0.0;
};

template <typename T>
ScorePair similarity_scores(const Vector<T>& prompt, const Vector<T>& pos, const Vector<T>& neg,
                            double logit_scale) {
  require(prompt.size() == pos.size() && prompt.size() == neg.size(), ErrorCode::ShapeMismatch,
          "similarity inputs must share a dim");
  for (const auto* v : {&prompt, &pos, &neg}) {
    const double n = std::sqrt(squared_norm64(*v));
    require(std::abs(n - 1.0) <= kNormalizedTolerance, ErrorCode::NotNormalized,
            "similarity input has norm " + std::to_string(n));
  }
  const auto p = prompt.template cast<double>();
  return {logit_scale * p.dot(pos.template cast<double>()),
          logit_scale * p.dot(neg.template cast<double>())};
}

/// -mean log sigmoid(beta (s+ - s-)), with gradients "s_plus"/"s_minus" as
/// B x 1 columns.
inline LossOutput<double> dpo_loss(const Eigen::VectorXd& s_plus, const Eigen::VectorXd& s_minus,
                                   double beta) {
  require(s_plus.size() == s_minus.size(), ErrorCode::ShapeMismatch,
          "s_plus and s_minus must have equal length");
  require(s_plus.size() >= 1, ErrorCode::ShapeMismatch, "batch must be nonempty");
  require(beta > 0.0, ErrorCode::InvalidArgument, "beta must be > 0");
  const auto b = s_plus.size();
  MatrixXd dplus(b, 1), dminus(b, 1);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double margin = beta * (s_plus[i] - s_minus[i]);
    total -= log_sigmoid(margin);
    const double g = -beta * sigmoid(-margin) / double(b);
    dplus(i, 0) = g;
    dminus(i, 0) = -g;
  }
  LossOutput<double> out;
  out.value = total / double(b);
  out.grads["s_plus"] = std::move(dplus);
  out.grads["s_minus"] = std::move(dminus);
  return out;
}

}  // namespace cir
