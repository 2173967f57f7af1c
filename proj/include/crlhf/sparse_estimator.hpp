#pragma once

/** \file sparse_estimator.hpp
 *  \brief One-shot annotator reliability estimation by L1-regularized
 *         logistic regression.
 *
 * With w_i = logit(p_i) the per-line log-likelihood of Bayes fusion is
 * -log(1 + exp(-y * e^T w)), so estimating reliabilities from lines with
 * known truth y is a logistic regression on the label vectors e. We minimize
 *
 *     F(w) = sum_j log(1 + exp(-y_j * e_j^T w)) + gamma * ||w||_1
 *
 * by proximal gradient descent (gradient step, then soft thresholding) with
 * a constant step eta = 1 / L, L = (1/4) * sum_j ||e_j||^2.
 *
 * For a single observation the Lagrange dual is the binary-entropy problem
 *
 *     max_{0 < nu < 1} H(nu)  s.t.  ||e||_inf * nu <= gamma
 *
 * and at the optimum the margin -y * e^T w* equals logit(nu*).
 */

#include <Eigen/Core>

#include <optional>
#include <span>
#include <vector>

#include "crlhf/fusion.hpp"

namespace crlhf {

struct Observation {
    std::vector<Label> labels;  // one per annotator, kSkip when absent
    Label truth = Label::kCorrect;
};

struct SolverConfig {
    double gamma = 0.1;
    std::optional<double> eta;  // unset: 1 / L
    double tol = 1e-8;
    int max_iter = 10000;
    bool record_trace = false;

    void validate() const;
};

struct SparseEstimate {
    Eigen::VectorXd p_tilde;
    std::vector<double> reliabilities;  // inverse_logit(p_tilde), clamped
    double objective_value = 0.0;
    int iterations = 0;
    bool converged = false;
    std::optional<double> duality_gap;  // single-observation fits only
    double step_size = 0.0;
    double lipschitz = 0.0;
    std::size_t observation_count = 0;
    std::vector<double> objective_trace;  // F at the start and after each step
};

struct DualOptimum {
    double nu_star = 0.5;
    double dual_value = 0.0;
};

struct MarginCertificate {
    double margin = 0.0;
    double gap = 0.0;
};

/// Throws kShapeMismatch when observations disagree in width with p_tilde,
/// kInvalidArgument when an observation's truth is skip.
double loss(const Eigen::VectorXd& p_tilde, std::span<const Observation> observations);

Eigen::VectorXd loss_gradient(const Eigen::VectorXd& p_tilde,
                              std::span<const Observation> observations);

double objective(const Eigen::VectorXd& p_tilde, std::span<const Observation> observations,
                 double gamma);

Eigen::VectorXd soft_threshold(const Eigen::VectorXd& v, double theta);

/// Lipschitz bound (1/4) * sum_j ||e_j||_2^2 on the loss gradient.
double lipschitz_bound(std::span<const Observation> observations);

/// Proximal gradient from w = 0. Throws kDiverged on a non-finite iterate.
SparseEstimate fit(std::span<const Observation> observations, const SolverConfig& config,
                   double prob_clamp = kDefaultProbClamp);

/// Binary entropy in nats.
double binary_entropy(double nu) noexcept;

DualOptimum dual_optimum(double gamma, double eps_inf_norm);

/// Margin and primal-dual gap for a single-observation fit. Throws
/// kNotSingleObservation when the estimate came from several observations.
MarginCertificate margin_certificate(const SparseEstimate& estimate,
                                     const Observation& observation, double gamma);

}  // namespace crlhf
