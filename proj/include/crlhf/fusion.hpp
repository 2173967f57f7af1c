#pragma once

/** \file fusion.hpp
 *  \brief Logit-space Bayesian fusion of per-line annotator labels.
 *
 * Each annotator i reports a label e_i in {+1, -1} for a line and carries a
 * symmetric reliability p_i = P(label = truth). With a prior p0 the posterior
 * that the line is correct is
 *
 *     P(correct | e) = sigmoid(logit(p0) + sum_i e_i * logit(p_i))
 *
 * so fusion is addition of log-odds. Skipped lines contribute nothing.
 */

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace crlhf {

inline constexpr double kDefaultProbClamp = 0.01;

/// A probability held inside [delta, 1 - delta]. Construction clamps, so
/// logit() of any Probability is finite.
class Probability {
public:
    Probability() = default;
    explicit Probability(double value, double clamp_delta = kDefaultProbClamp);

    double value() const noexcept { return value_; }

    friend bool operator==(Probability a, Probability b) noexcept { return a.value_ == b.value_; }

private:
    double value_ = 0.5;
};

/// Per-line judgement. Skip carries no evidence.
enum class Label : std::int8_t { kWrong = -1, kSkip = 0, kCorrect = 1 };

constexpr int sign(Label label) noexcept { return static_cast<int>(label); }

/// Throws kInvalidArgument for anything other than -1, 0, +1.
Label label_from_int(int value);

struct EvidenceEntry {
    std::string annotator_id;
    Label label = Label::kSkip;
    Probability reliability;
};

/// Ordered evidence for one line; annotator ids are unique.
class LineEvidence {
public:
    LineEvidence() = default;
    explicit LineEvidence(std::vector<EvidenceEntry> entries);

    /// Throws kDuplicate if the annotator already contributed to this line.
    void add(std::string annotator_id, Label label, Probability reliability);

    const std::vector<EvidenceEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    /// Copy of this evidence without the given annotator's entry.
    LineEvidence without(const std::string& annotator_id) const;

private:
    std::vector<EvidenceEntry> entries_;
};

struct FusionConfig {
    double tau = 0.5;
    double prob_clamp = kDefaultProbClamp;
    double prior = 0.5;

    /// Throws kInvalidArgument when a field is out of range.
    void validate() const;
};

struct SampleScore {
    std::string sample_id;
    std::vector<double> posteriors;
    std::vector<bool> verdicts;
    std::size_t correct_count = 0;
    std::size_t line_count = 0;
    double score = 0.0;

    friend bool operator==(const SampleScore&, const SampleScore&) = default;
};

double logit(Probability p) noexcept;

/// Overflow-safe sigmoid. The result is a raw double; wrap it in Probability
/// to clamp it.
double inverse_logit(double x) noexcept;

/// Sum that switches to pairwise summation above 64 terms.
double accumulate_logits(std::span<const double> terms) noexcept;

/// Posterior that the line is correct.
double fuse_line(const LineEvidence& evidence, const FusionConfig& config);

/// Same posterior computed by enumerating the two truth hypotheses directly
/// (product of per-annotator likelihoods, normalized). Used to cross-check
/// fuse_line.
double fuse_line_oracle(const LineEvidence& evidence, double prior = 0.5);

/// verdict_j = posterior_j > tau (strict); s = c / k.
/// Throws kEmptySample for an empty posterior list.
SampleScore score_sample(std::string sample_id, std::span<const double> posteriors,
                         const FusionConfig& config);

}  // namespace crlhf
