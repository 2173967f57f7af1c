#include "crlhf/reliability.hpp"

#include <string>
#include <utility>

#include "crlhf/error.hpp"

namespace crlhf {

void ReliabilityConfig::validate() const {
    if (!(lambda > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda must be positive");
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) {
        throw Error(ErrorCode::kInvalidArgument, "probability clamp must lie in (0, 0.5)");
    }
    if (!(nu_init >= 0.5 && nu_init < 1.0)) {
        throw Error(ErrorCode::kInvalidArgument, "nu_init must lie in [0.5, 1)");
    }
}

AnnotatorProfile init_profile(std::string annotator_id, const ReliabilityConfig& config) {
    AnnotatorProfile profile;
    profile.annotator_id = std::move(annotator_id);
    profile.reliability = Probability(config.nu_init, config.prob_clamp);
    return profile;
}

AnnotatorProfile update_reliability(AnnotatorProfile profile, const FeedbackSignal& signal,
                                   const ReliabilityConfig& config, std::string event_ref) {
    if (signal.mu != 1 && signal.mu != -1) {
        throw Error(ErrorCode::kInvalidArgument, "feedback mu must be +1 or -1");
    }
    if (signal.certainty.value() < 0.5) {
        throw Error(ErrorCode::kInvalidArgument, "feedback certainty must be at least 0.5");
    }
    const double old_p = profile.reliability.value();
    const double step = config.lambda * signal.mu * logit(signal.certainty);
    // A zero step must leave p bit-identical; the logit round trip would not.
    if (step != 0.0) {
        profile.reliability =
            Probability(inverse_logit(logit(profile.reliability) + step), config.prob_clamp);
    }
    ++profile.update_count;
    if (config.keep_history) {
        profile.history.push_back({std::move(event_ref), old_p, profile.reliability.value()});
    }
    return profile;
}

AnnotatorProfile calibrate_on_honeypot(AnnotatorProfile profile, std::span<const Label> labels,
                                       std::span<const Label> ground_truth,
                                       const ReliabilityConfig& config,
                                       const std::string& event_ref) {
    if (labels.size() != ground_truth.size()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "annotation/ground-truth shape mismatch: " + std::to_string(labels.size()) +
                        " labels vs " + std::to_string(ground_truth.size()) + " truth lines");
    }
    for (Label t : ground_truth) {
        if (t == Label::kSkip) {
            throw Error(ErrorCode::kInvalidArgument, "ground truth may not contain skip labels");
        }
    }
    const Probability certain(1.0, config.prob_clamp);
    for (std::size_t line = 0; line < labels.size(); ++line) {
        if (labels[line] == Label::kSkip) continue;
        const FeedbackSignal signal{labels[line] == ground_truth[line] ? 1 : -1, certain, line};
        std::string ref = event_ref.empty() ? std::string{}
                                            : event_ref + "#" + std::to_string(line);
        profile = update_reliability(std::move(profile), signal, config, std::move(ref));
    }
    return profile;
}

std::vector<FeedbackSignal> consensus_feedback(const std::string& annotator_id,
                                               std::span<const Label> labels,
                                               std::span<const LineEvidence> evidence_per_line,
                                               const ReliabilityConfig& config,
                                               const FusionConfig& fusion) {
    if (labels.size() != evidence_per_line.size()) {
        throw Error(ErrorCode::kShapeMismatch, "annotation and evidence line counts differ");
    }
    std::vector<FeedbackSignal> signals;
    for (std::size_t line = 0; line < labels.size(); ++line) {
        if (labels[line] == Label::kSkip) continue;
        const double q = config.consensus_mode == ConsensusMode::kLeaveOneOut
                             ? fuse_line(evidence_per_line[line].without(annotator_id), fusion)
                             : fuse_line(evidence_per_line[line], fusion);
        if (q == 0.5) continue;
        const Label consensus = q > 0.5 ? Label::kCorrect : Label::kWrong;
        const int mu = labels[line] == consensus ? 1 : -1;
        signals.push_back({mu, Probability(q > 0.5 ? q : 1.0 - q, config.prob_clamp), line});
    }
    return signals;
}

}  // namespace crlhf
