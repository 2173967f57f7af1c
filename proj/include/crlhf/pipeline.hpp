#pragma once

/** \file pipeline.hpp
 *  \brief Per-task aggregation rounds and reward dataset construction.
 *
 * A round processes one task. Honeypot tasks calibrate every annotator line
 * by line against ground truth and produce no scores. Other tasks are scored
 * sample by sample: fuse each line with the reliabilities current at that
 * moment, score the sample, then feed consensus signals back into the
 * profiles. Annotators are always visited in id order so a round is a pure
 * function of its inputs.
 */

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "crlhf/fusion.hpp"
#include "crlhf/reliability.hpp"

namespace crlhf {

struct CodeSample {
    std::string sample_id;
    std::string task_id;
    std::vector<std::string> lines;
    std::map<std::string, std::string> generator_meta;

    friend bool operator==(const CodeSample&, const CodeSample&) = default;
};

struct Task {
    std::string task_id;
    std::string description;
    bool is_honeypot = false;
    std::vector<CodeSample> samples;
    // Per sample, per line. Required for honeypots.
    std::optional<std::vector<std::vector<Label>>> ground_truth;

    friend bool operator==(const Task&, const Task&) = default;
};

struct Annotation {
    std::string annotation_id;
    std::string annotator_id;
    std::string sample_id;
    std::vector<Label> labels;
    std::string submitted_at;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct RewardTriplet {
    std::string x;  // problem description
    std::string y;  // code, lines joined with '\n'
    double s = 0.0;

    friend bool operator==(const RewardTriplet&, const RewardTriplet&) = default;
};

using ProfileBook = std::map<std::string, AnnotatorProfile>;

struct PipelineConfig {
    FusionConfig fusion;
    ReliabilityConfig reliability;

    void validate() const;
};

enum class UpdateCause { kInit, kHoneypot, kConsensus, kOneShotSeed };

std::string_view to_string(UpdateCause cause) noexcept;
UpdateCause update_cause_from_string(std::string_view text);

/// A reliability change, in the order it was applied.
struct ProfileChange {
    std::string annotator_id;
    double old_reliability = 0.0;
    double new_reliability = 0.0;
    std::uint64_t update_count = 0;
    UpdateCause cause = UpdateCause::kHoneypot;
    std::string ref;  // sample id and line

    friend bool operator==(const ProfileChange&, const ProfileChange&) = default;
};

/// A sample score plus the reliabilities that produced it.
struct ScoredSample {
    std::string task_id;
    SampleScore score;
    std::map<std::string, double> reliabilities_used;

    friend bool operator==(const ScoredSample&, const ScoredSample&) = default;
};

using RoundStep = std::variant<ScoredSample, ProfileChange>;

struct RoundResult {
    std::optional<std::vector<ScoredSample>> scores;  // empty for honeypots
    ProfileBook profiles;
    std::vector<RoundStep> steps;  // interleaved, in application order
};

/// Throws kShapeMismatch / kInvalidArgument when the task is malformed.
void validate_task(const Task& task);

/// Throws kUnknownEntity, kShapeMismatch or kDuplicate.
void validate_annotations(const Task& task, std::span<const Annotation> annotations);

/// Unknown annotators are initialized with nu_init first (cause kInit).
RoundResult run_round(const Task& task, std::span<const Annotation> annotations,
                      ProfileBook profiles, const PipelineConfig& config);

/// Score a single sample of a non-honeypot task, then apply consensus
/// feedback. `sample_index` indexes task.samples.
RoundResult run_sample_round(const Task& task, std::size_t sample_index,
                             std::span<const Annotation> annotations, ProfileBook profiles,
                             const PipelineConfig& config);

/// Replaces reliabilities with externally estimated values (cause
/// kOneShotSeed), in annotator id order. Unknown annotators are initialized
/// first.
RoundResult seed_profiles(ProfileBook profiles, const std::map<std::string, double>& reliabilities,
                          const ReliabilityConfig& config);

using ScoreIndex = std::map<std::string, SampleScore>;  // by sample id

/// One triplet per scored sample of a non-honeypot task, ordered by
/// (task_id, sample_id).
std::vector<RewardTriplet> build_reward_dataset(std::span<const Task> tasks,
                                                const ScoreIndex& scores);

std::string join_lines(std::span<const std::string> lines);

/// Newline-delimited {"prompt", "completion", "reward"} records. Returns the
/// number written. Throws kIo with the path on failure.
std::size_t export_rewards(std::span<const RewardTriplet> dataset,
                           const std::filesystem::path& destination);

std::vector<RewardTriplet> import_rewards(const std::filesystem::path& source);

struct TrainerAck {
    bool accepted = false;
    std::string detail;
};

/// Boundary to an external policy-optimization trainer. Implementations must
/// tolerate redelivery: a batch whose acknowledgment was not recorded is sent
/// again (at-least-once).
class TrainerHook {
public:
    virtual ~TrainerHook() = default;
    virtual TrainerAck deliver(std::span<const RewardTriplet> batch) = 0;
};

/// Keeps every delivered batch for inspection.
class RecordingTrainerHook : public TrainerHook {
public:
    TrainerAck deliver(std::span<const RewardTriplet> batch) override;

    const std::vector<std::vector<RewardTriplet>>& batches() const noexcept { return batches_; }

private:
    std::vector<std::vector<RewardTriplet>> batches_;
};

}  // namespace crlhf
