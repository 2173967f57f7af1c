#include "crlhf/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "crlhf/error.hpp"

namespace crlhf {

namespace {

constexpr std::size_t kPairwiseBlock = 64;

double pairwise_sum(std::span<const double> terms) noexcept {
    if (terms.size() <= kPairwiseBlock) {
        double total = 0.0;
        for (double t : terms) total += t;
        return total;
    }
    const std::size_t half = terms.size() / 2;
    return pairwise_sum(terms.first(half)) + pairwise_sum(terms.subspan(half));
}

}  // namespace

Probability::Probability(double value, double clamp_delta) {
    if (!std::isfinite(value)) {
        throw Error(ErrorCode::kInvalidArgument, "probability must be finite");
    }
    if (!(clamp_delta > 0.0 && clamp_delta < 0.5)) {
        throw Error(ErrorCode::kInvalidArgument, "probability clamp must lie in (0, 0.5)");
    }
    value_ = std::clamp(value, clamp_delta, 1.0 - clamp_delta);
}

Label label_from_int(int value) {
    switch (value) {
        case -1: return Label::kWrong;
        case 0: return Label::kSkip;
        case 1: return Label::kCorrect;
        default:
            throw Error(ErrorCode::kInvalidArgument,
                        "label must be +1, -1 or 0 (skip), got " + std::to_string(value));
    }
}

LineEvidence::LineEvidence(std::vector<EvidenceEntry> entries) {
    entries_.reserve(entries.size());
    for (auto& e : entries) add(std::move(e.annotator_id), e.label, e.reliability);
}

void LineEvidence::add(std::string annotator_id, Label label, Probability reliability) {
    const bool seen = std::any_of(entries_.begin(), entries_.end(), [&](const EvidenceEntry& e) {
        return e.annotator_id == annotator_id;
    });
    if (seen) {
        throw Error(ErrorCode::kDuplicate,
                    "annotator '" + annotator_id + "' already contributed evidence to this line");
    }
    entries_.push_back({std::move(annotator_id), label, reliability});
}

LineEvidence LineEvidence::without(const std::string& annotator_id) const {
    LineEvidence out;
    out.entries_.reserve(entries_.size());
    for (const auto& e : entries_) {
        if (e.annotator_id != annotator_id) out.entries_.push_back(e);
    }
    return out;
}

void FusionConfig::validate() const {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw Error(ErrorCode::kInvalidArgument, "tau must lie in (0, 1)");
    }
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) {
        throw Error(ErrorCode::kInvalidArgument, "probability clamp must lie in (0, 0.5)");
    }
    if (!(prior > 0.0 && prior < 1.0)) {
        throw Error(ErrorCode::kInvalidArgument, "prior must lie in (0, 1)");
    }
}

double logit(Probability p) noexcept {
    const double v = p.value();
    return std::log(v / (1.0 - v));
}

double inverse_logit(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double accumulate_logits(std::span<const double> terms) noexcept { return pairwise_sum(terms); }

double fuse_line(const LineEvidence& evidence, const FusionConfig& config) {
    std::vector<double> terms;
    terms.reserve(evidence.size() + 1);
    terms.push_back(logit(Probability(config.prior, config.prob_clamp)));
    for (const auto& e : evidence.entries()) {
        if (e.label == Label::kSkip) continue;
        terms.push_back(sign(e.label) * logit(e.reliability));
    }
    return inverse_logit(accumulate_logits(terms));
}

double fuse_line_oracle(const LineEvidence& evidence, double prior) {
    // Likelihood of the observed labels under each truth hypothesis.
    double given_correct = 1.0;
    double given_wrong = 1.0;
    for (const auto& e : evidence.entries()) {
        const double p = e.reliability.value();
        switch (e.label) {
            case Label::kCorrect:
                given_correct *= p;
                given_wrong *= 1.0 - p;
                break;
            case Label::kWrong:
                given_correct *= 1.0 - p;
                given_wrong *= p;
                break;
            case Label::kSkip:
                break;
        }
    }
    const double joint_correct = given_correct * prior;
    const double joint_wrong = given_wrong * (1.0 - prior);
    return joint_correct / (joint_correct + joint_wrong);
}

SampleScore score_sample(std::string sample_id, std::span<const double> posteriors,
                         const FusionConfig& config) {
    if (posteriors.empty()) {
        throw Error(ErrorCode::kEmptySample, "empty sample: '" + sample_id + "' has no lines");
    }
    SampleScore out;
    out.sample_id = std::move(sample_id);
    out.posteriors.assign(posteriors.begin(), posteriors.end());
    out.verdicts.reserve(posteriors.size());
    for (double q : posteriors) {
        const bool ok = q > config.tau;
        out.verdicts.push_back(ok);
        if (ok) ++out.correct_count;
    }
    out.line_count = posteriors.size();
    out.score = static_cast<double>(out.correct_count) / static_cast<double>(out.line_count);
    return out;
}

}  // namespace crlhf
