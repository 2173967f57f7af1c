#pragma once

/** \file engine.hpp
 *  \brief Store-backed pipeline: every mutation is an appended event, and
 *         the in-memory state is the fold of the log.
 *
 * A single writer (guarded by the engine's lock) appends events; readers
 * take a shared lock. Honeypot annotations calibrate their annotator as soon
 * as they arrive. Other samples are scored when an operator closes the
 * task's round, or when the configured annotator quorum is reached.
 */

#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "crlhf/pipeline.hpp"
#include "crlhf/store.hpp"

namespace crlhf {

struct EngineConfig {
    PipelineConfig pipeline;
    bool auto_register = true;
    bool honeypots_first = true;
    std::optional<std::size_t> quorum;  // annotations per sample that trigger scoring
};

struct Assignment {
    std::string annotator_id;
    std::string task_id;
    std::string description;
    std::string sample_id;
    std::vector<std::string> lines;
    std::size_t completed = 0;
    std::size_t total = 0;
};

struct SubmitResult {
    std::uint64_t sequence = 0;
    std::string annotation_id;
    std::size_t profile_updates = 0;
    std::optional<SampleScore> scored;  // set when the submission reached quorum
};

enum class SampleStatus { kScored, kPending, kHoneypot };

struct SampleReport {
    SampleStatus status = SampleStatus::kPending;
    std::string task_id;
    std::optional<ScoredSample> scored;
    std::size_t annotation_count = 0;
};

struct ExportResult {
    std::filesystem::path destination;
    std::size_t count = 0;
    std::size_t delivered = 0;
    std::optional<std::string> hook_error;
};

class Engine {
public:
    Engine(EventLog log, EngineConfig config);

    std::uint64_t register_task(Task task);

    /// Throws kUnknownEntity, kShapeMismatch, kDuplicate or kRoundClosed
    /// before anything is written.
    SubmitResult submit_annotation(Annotation annotation);

    /// Scores every unscored sample of a non-honeypot task, in sample order.
    std::vector<ScoredSample> close_round(const std::string& task_id);

    /// close_round over all non-honeypot tasks in registration order.
    std::vector<ScoredSample> close_all_rounds();

    /// Registers unknown annotators when auto_register is set; otherwise
    /// throws kUnknownEntity.
    AnnotatorProfile ensure_annotator(const std::string& annotator_id);

    std::optional<AnnotatorProfile> profile(const std::string& annotator_id) const;

    std::optional<Assignment> next_assignment(const std::string& annotator_id);

    SampleReport sample_report(const std::string& sample_id) const;

    /// Writes every scored sample to `destination`. With a hook, the samples
    /// not yet acknowledged are delivered and the export is recorded only
    /// once the hook accepts; a failing hook leaves them pending.
    ExportResult export_rewards(const std::filesystem::path& destination,
                                TrainerHook* hook = nullptr);

    std::vector<RewardTriplet> pending_delivery() const;

    /// Overwrites reliabilities with externally fitted values (cause
    /// one-shot-seed), in annotator id order.
    std::size_t seed_profiles(const std::map<std::string, double>& reliabilities);

    PipelineState state() const;
    std::string state_hash() const;
    const EngineConfig& config() const noexcept { return config_; }
    std::uint64_t last_sequence() const;

private:
    void append(EventKind kind, nlohmann::json payload);
    void append_round(const RoundResult& round);
    AnnotatorProfile ensure_annotator_locked(const std::string& annotator_id);
    std::vector<Annotation> annotations_of_task(const Task& task) const;
    std::vector<ScoredSample> close_round_locked(const std::string& task_id);

    mutable std::shared_mutex mutex_;
    EventLog log_;
    EngineConfig config_;
    PipelineState state_;
};

}  // namespace crlhf
