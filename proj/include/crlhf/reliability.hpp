#pragma once

/** \file reliability.hpp
 *  \brief Annotator reliability tracking.
 *
 * Reliabilities move additively in log-odds space:
 *
 *     logit(p') = logit(p) + lambda * mu * logit(certainty)
 *
 * where mu = +1 when the annotator agreed with the reference answer and -1
 * otherwise. On honeypot lines the reference is ground truth and certainty is
 * the clamp ceiling 1 - delta; elsewhere it is the fused consensus posterior.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crlhf/fusion.hpp"

namespace crlhf {

enum class ConsensusMode { kLeaveOneOut, kIncludeSelf };

struct ReliabilityConfig {
    double lambda = 1.0;
    double nu_init = 0.7;
    ConsensusMode consensus_mode = ConsensusMode::kLeaveOneOut;
    double prob_clamp = kDefaultProbClamp;
    bool keep_history = true;

    void validate() const;
};

struct FeedbackSignal {
    int mu = 1;  // +1 agreed with the reference answer, -1 disagreed
    Probability certainty;
    std::size_t line_index = 0;
};

struct ProfileUpdate {
    std::string event_ref;
    double old_reliability = 0.0;
    double new_reliability = 0.0;

    friend bool operator==(const ProfileUpdate&, const ProfileUpdate&) = default;
};

struct AnnotatorProfile {
    std::string annotator_id;
    Probability reliability;
    std::uint64_t update_count = 0;
    std::vector<ProfileUpdate> history;

    friend bool operator==(const AnnotatorProfile&, const AnnotatorProfile&) = default;
};

AnnotatorProfile init_profile(std::string annotator_id, const ReliabilityConfig& config);

/// One log-odds step. Throws kInvalidArgument if the signal is malformed
/// (mu not +/-1 or certainty below one half).
AnnotatorProfile update_reliability(AnnotatorProfile profile, const FeedbackSignal& signal,
                                   const ReliabilityConfig& config,
                                   std::string event_ref = {});

/// Applies one step per labeled line against ground truth, in line order.
/// Skipped lines produce no step.
AnnotatorProfile calibrate_on_honeypot(AnnotatorProfile profile, std::span<const Label> labels,
                                       std::span<const Label> ground_truth,
                                       const ReliabilityConfig& config,
                                       const std::string& event_ref = {});

/// Signals for one annotator on one sample from the fused consensus of each
/// line. `evidence_per_line` holds every annotator's entry (including this
/// one); leave-one-out mode drops this annotator before fusing. Lines where
/// the consensus is exactly 0.5, or which the annotator skipped, yield no
/// signal.
std::vector<FeedbackSignal> consensus_feedback(const std::string& annotator_id,
                                               std::span<const Label> labels,
                                               std::span<const LineEvidence> evidence_per_line,
                                               const ReliabilityConfig& config,
                                               const FusionConfig& fusion);

}  // namespace crlhf
