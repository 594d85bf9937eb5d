#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "core.hpp"
#include "feature_table.hpp"

namespace gpfusion {

struct LogisticModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double l2 = 0.0;
  std::vector<std::string> column_names;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json w = nlohmann::json::object();
    for (Eigen::Index j = 0; j < weights.size(); ++j)
      w[column_names.at(static_cast<std::size_t>(j))] = weights(j);
    return {{"weights", w}, {"column_order", column_names}, {"bias", bias}, {"l2", l2}};
  }

  static LogisticModel from_json(const nlohmann::json& j) {
    LogisticModel m;
    m.column_names = j.at("column_order").get<std::vector<std::string>>();
    m.weights.resize(static_cast<Eigen::Index>(m.column_names.size()));
    for (std::size_t k = 0; k < m.column_names.size(); ++k)
      m.weights(static_cast<Eigen::Index>(k)) = j.at("weights").at(m.column_names[k]).get<double>();
    m.bias = j.at("bias").get<double>();
    m.l2 = j.at("l2").get<double>();
    return m;
  }
};

struct LogisticFitInfo {
  int iterations = 0;
  bool converged = false;
  double gradient_inf_norm = 0.0;
  double objective = 0.0;
};

struct LogisticOptions {
  double l2 = 1.0;
  int max_iter = 5000;
  double tol = 1e-6;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline void require_both_classes(const std::vector<bool>& labels, std::string_view who) {
  bool pos = false, neg = false;
  for (bool b : labels) (b ? pos : neg) = true;
  if (!pos || !neg) throw Error(std::string(who) + ": both classes must be present");
}

namespace detail {

struct LogisticObjective {
  const Eigen::MatrixXd& x;
  Eigen::VectorXd y;
  double l2;

  // Mean BCE + (l2/2)|w|^2 ; params = [w..., b].
  double value_and_gradient(const Eigen::VectorXd& params, Eigen::VectorXd& grad) const {
    const Eigen::Index p = x.cols();
    const auto w = params.head(p);
    const double b = params(p);
    const Eigen::VectorXd z = (x * w).array() + b;
    const double n = static_cast<double>(x.rows());
    double loss = 0.0;
    Eigen::VectorXd r(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      loss += softplus(z(i)) - y(i) * z(i);
      r(i) = sigmoid(z(i)) - y(i);
    }
    grad.resize(p + 1);
    grad.head(p) = x.transpose() * r / n + l2 * w;
    grad(p) = r.sum() / n;
    return loss / n + 0.5 * l2 * w.squaredNorm();
  }
};

}  // namespace detail

// Gradient descent with Barzilai-Borwein step lengths and Armijo backtracking.
inline LogisticModel fit_logistic(const FeatureTable& features, const std::vector<bool>& labels,
                                  const LogisticOptions& opt, LogisticFitInfo* info = nullptr) {
  require_both_classes(labels, "fit_logistic");
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw Error("fit_logistic: label count does not match rows");
  if (!features.matrix.allFinite()) throw Error("fit_logistic: non-finite features");
  detail::LogisticObjective obj{features.matrix, Eigen::VectorXd(features.rows()), opt.l2};
  for (std::size_t i = 0; i < labels.size(); ++i) obj.y(static_cast<Eigen::Index>(i)) = labels[i];

  const Eigen::Index p = features.cols();
  Eigen::VectorXd params = Eigen::VectorXd::Zero(p + 1);
  Eigen::VectorXd grad, grad_new;
  double f = obj.value_and_gradient(params, grad);
  double step = 1.0;
  LogisticFitInfo fi;
  for (fi.iterations = 0; fi.iterations < opt.max_iter; ++fi.iterations) {
    fi.gradient_inf_norm = grad.cwiseAbs().maxCoeff();
    if (fi.gradient_inf_norm < opt.tol) {
      fi.converged = true;
      break;
    }
    double t = step;
    Eigen::VectorXd trial;
    double ft = 0.0;
    bool ok = false;
    for (int bt = 0; bt < 60; ++bt) {
      trial = params - t * grad;
      ft = obj.value_and_gradient(trial, grad_new);
      if (ft <= f - 1e-4 * t * grad.squaredNorm()) {
        ok = true;
        break;
      }
      t *= 0.5;
    }
    if (!ok) break;
    const Eigen::VectorXd s = trial - params;
    const Eigen::VectorXd yv = grad_new - grad;
    const double sy = s.dot(yv);
    step = sy > 0.0 ? std::clamp(s.squaredNorm() / sy, 1e-8, 1e8) : 1.0;
    params = trial;
    grad = grad_new;
    f = ft;
  }
  fi.gradient_inf_norm = grad.cwiseAbs().maxCoeff();
  fi.converged = fi.gradient_inf_norm < opt.tol;
  fi.objective = f;
  if (!fi.converged)
    log_warn("fit_logistic: no convergence after " + std::to_string(fi.iterations) +
             " iterations (|grad|inf = " + format_double(fi.gradient_inf_norm) + ")");
  if (info) *info = fi;

  LogisticModel m;
  m.weights = params.head(p);
  m.bias = params(p);
  m.l2 = opt.l2;
  m.column_names = features.column_names;
  return m;
}

inline std::vector<double> predict_logistic(const LogisticModel& m, const Eigen::MatrixXd& x) {
  if (x.cols() != m.weights.size()) throw Error("predict_logistic: column count mismatch");
  const Eigen::VectorXd z = (x * m.weights).array() + m.bias;
  std::vector<double> p(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) p[static_cast<std::size_t>(i)] = sigmoid(z(i));
  return p;
}

inline std::vector<double> predict_logistic(const LogisticModel& m, const FeatureTable& t) {
  return predict_logistic(m, t.matrix);
}

}  // namespace gpfusion
