#include "crlhf/sparse_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crlhf/error.hpp"

namespace crlhf {

namespace {

// log(1 + exp(-z)) without overflow.
double softplus_neg(double z) noexcept {
    return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

// Rows are y_j * e_j.
Eigen::MatrixXd signed_design(std::span<const Observation> observations, Eigen::Index width) {
    Eigen::MatrixXd a(static_cast<Eigen::Index>(observations.size()), width);
    for (Eigen::Index j = 0; j < a.rows(); ++j) {
        const auto& obs = observations[static_cast<std::size_t>(j)];
        if (static_cast<Eigen::Index>(obs.labels.size()) != width) {
            throw Error(ErrorCode::kShapeMismatch,
                        "observation " + std::to_string(j) + " has " +
                            std::to_string(obs.labels.size()) + " labels, expected " +
                            std::to_string(width));
        }
        if (obs.truth == Label::kSkip) {
            throw Error(ErrorCode::kInvalidArgument,
                        "observation " + std::to_string(j) + " has no truth label");
        }
        const double y = sign(obs.truth);
        for (Eigen::Index i = 0; i < width; ++i) {
            a(j, i) = y * sign(obs.labels[static_cast<std::size_t>(i)]);
        }
    }
    return a;
}

double loss_from_margins(const Eigen::VectorXd& margins) noexcept {
    double total = 0.0;
    for (Eigen::Index j = 0; j < margins.size(); ++j) total += softplus_neg(margins(j));
    return total;
}

Eigen::VectorXd gradient_from_design(const Eigen::MatrixXd& a, const Eigen::VectorXd& w) {
    const Eigen::VectorXd margins = a * w;
    Eigen::VectorXd weights(margins.size());
    for (Eigen::Index j = 0; j < margins.size(); ++j) weights(j) = inverse_logit(-margins(j));
    return -(a.transpose() * weights);
}

}  // namespace

void SolverConfig::validate() const {
    if (!(gamma > 0.0)) throw Error(ErrorCode::kInvalidArgument, "gamma must be positive");
    if (eta && !(*eta > 0.0 && std::isfinite(*eta))) {
        throw Error(ErrorCode::kInvalidArgument, "eta must be positive and finite");
    }
    if (!(tol > 0.0)) throw Error(ErrorCode::kInvalidArgument, "tol must be positive");
    if (max_iter <= 0) throw Error(ErrorCode::kInvalidArgument, "max_iter must be positive");
}

double loss(const Eigen::VectorXd& p_tilde, std::span<const Observation> observations) {
    const Eigen::MatrixXd a = signed_design(observations, p_tilde.size());
    return loss_from_margins(a * p_tilde);
}

Eigen::VectorXd loss_gradient(const Eigen::VectorXd& p_tilde,
                              std::span<const Observation> observations) {
    return gradient_from_design(signed_design(observations, p_tilde.size()), p_tilde);
}

double objective(const Eigen::VectorXd& p_tilde, std::span<const Observation> observations,
                 double gamma) {
    return loss(p_tilde, observations) + gamma * p_tilde.lpNorm<1>();
}

Eigen::VectorXd soft_threshold(const Eigen::VectorXd& v, double theta) {
    if (theta < 0.0) throw Error(ErrorCode::kInvalidArgument, "threshold must be non-negative");
    Eigen::VectorXd out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double shrunk = std::abs(v(i)) - theta;
        out(i) = shrunk > 0.0 ? std::copysign(shrunk, v(i)) : 0.0;
    }
    return out;
}

double lipschitz_bound(std::span<const Observation> observations) {
    double total = 0.0;
    for (const auto& obs : observations) {
        for (Label l : obs.labels) total += sign(l) * sign(l);
    }
    return 0.25 * total;
}

SparseEstimate fit(std::span<const Observation> observations, const SolverConfig& config,
                   double prob_clamp) {
    config.validate();
    if (observations.empty()) {
        throw Error(ErrorCode::kInvalidArgument, "fit needs at least one observation");
    }
    const auto width = static_cast<Eigen::Index>(observations.front().labels.size());
    if (width == 0) throw Error(ErrorCode::kInvalidArgument, "fit needs at least one annotator");
    for (std::size_t j = 0; j < observations.size(); ++j) {
        const auto& labels = observations[j].labels;
        if (std::all_of(labels.begin(), labels.end(), [](Label l) { return l == Label::kSkip; })) {
            throw Error(ErrorCode::kInvalidArgument,
                        "observation " + std::to_string(j) + " has no non-skip label");
        }
    }

    const Eigen::MatrixXd a = signed_design(observations, width);
    SparseEstimate est;
    est.observation_count = observations.size();
    est.lipschitz = lipschitz_bound(observations);
    est.step_size = config.eta.value_or(1.0 / est.lipschitz);
    const double theta = est.step_size * config.gamma;

    auto composite = [&](const Eigen::VectorXd& w) {
        return loss_from_margins(a * w) + config.gamma * w.lpNorm<1>();
    };

    Eigen::VectorXd w = Eigen::VectorXd::Zero(width);
    if (config.record_trace) est.objective_trace.push_back(composite(w));

    for (int k = 0; k < config.max_iter; ++k) {
        Eigen::VectorXd next = soft_threshold(w - est.step_size * gradient_from_design(a, w), theta);
        if (!next.allFinite()) {
            throw Error(ErrorCode::kDiverged,
                        "solver diverged at iteration " + std::to_string(k + 1));
        }
        const double change = (next - w).lpNorm<Eigen::Infinity>();
        w = std::move(next);
        est.iterations = k + 1;
        if (config.record_trace) est.objective_trace.push_back(composite(w));
        if (change < config.tol) {
            est.converged = true;
            break;
        }
    }

    est.p_tilde = w;
    est.objective_value = composite(w);
    if (!std::isfinite(est.objective_value)) {
        throw Error(ErrorCode::kDiverged, "solver diverged: objective is not finite");
    }
    est.reliabilities.reserve(static_cast<std::size_t>(width));
    for (Eigen::Index i = 0; i < width; ++i) {
        est.reliabilities.push_back(Probability(inverse_logit(w(i)), prob_clamp).value());
    }
    if (observations.size() == 1) {
        est.duality_gap = margin_certificate(est, observations.front(), config.gamma).gap;
    }
    return est;
}

double binary_entropy(double nu) noexcept {
    auto term = [](double x) { return x > 0.0 ? -x * std::log(x) : 0.0; };
    return term(nu) + term(1.0 - nu);
}

DualOptimum dual_optimum(double gamma, double eps_inf_norm) {
    if (!(gamma > 0.0)) throw Error(ErrorCode::kInvalidArgument, "gamma must be positive");
    if (!(eps_inf_norm > 0.0)) {
        throw Error(ErrorCode::kInvalidArgument, "label infinity norm must be positive");
    }
    // H is increasing on (0, 1/2], so the constraint binds below the peak.
    const double nu = std::min(0.5, gamma / eps_inf_norm);
    return {nu, binary_entropy(nu)};
}

MarginCertificate margin_certificate(const SparseEstimate& estimate,
                                     const Observation& observation, double gamma) {
    if (estimate.observation_count != 1) {
        throw Error(ErrorCode::kNotSingleObservation,
                    "certificate defined for single observation, estimate used " +
                        std::to_string(estimate.observation_count));
    }
    const std::span<const Observation> one(&observation, 1);
    const Eigen::MatrixXd a = signed_design(one, estimate.p_tilde.size());
    const double inf_norm = a.cwiseAbs().maxCoeff();
    if (inf_norm == 0.0) {
        throw Error(ErrorCode::kInvalidArgument, "observation has no non-skip label");
    }
    MarginCertificate cert;
    cert.margin = -(a.row(0).dot(estimate.p_tilde));
    const double primal = loss_from_margins(a * estimate.p_tilde) +
                          gamma * estimate.p_tilde.lpNorm<1>();
    cert.gap = primal - dual_optimum(gamma, inf_norm).dual_value;
    return cert;
}

}  // namespace crlhf
