#pragma once

/** \file store.hpp
 *  \brief Append-only event log, deterministic replay and snapshots.
 *
 * Log layout: one JSON record per line,
 *
 *     {"schema_version":1,"sequence":N,"kind":"...","payload":{...},
 *      "recorded_at":"2026-01-01T00:00:00Z"}
 *
 * Sequences start at 1 and have no gaps. A final record that is incomplete
 * or unparsable is treated as a torn write and dropped; a bad record anywhere
 * else is corruption.
 */

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crlhf/pipeline.hpp"

namespace crlhf {

inline constexpr int kSchemaVersion = 1;

enum class EventKind {
    kTaskRegistered,
    kAnnotationSubmitted,
    kProfileUpdated,
    kSampleScored,
    kDatasetExported,
};

std::string_view to_string(EventKind kind) noexcept;
EventKind event_kind_from_string(std::string_view text);

struct Event {
    std::uint64_t sequence = 0;
    EventKind kind = EventKind::kTaskRegistered;
    nlohmann::json payload;
    std::string recorded_at;
};

nlohmann::json event_to_json(const Event& event);
Event event_from_json(const nlohmann::json& j);

// Payload builders, shared by the engine and tests.
nlohmann::json task_registered_payload(const Task& task);
nlohmann::json annotation_submitted_payload(const Annotation& annotation);
nlohmann::json profile_updated_payload(const ProfileChange& change);
nlohmann::json sample_scored_payload(const ScoredSample& scored);
nlohmann::json dataset_exported_payload(const std::string& batch_id,
                                        const std::string& destination,
                                        const std::vector<std::string>& sample_ids);

struct ExportRecord {
    std::string batch_id;
    std::string destination;
    std::vector<std::string> sample_ids;

    friend bool operator==(const ExportRecord&, const ExportRecord&) = default;
};

/// Everything the pipeline knows, as a fold over the event log.
struct PipelineState {
    std::uint64_t last_sequence = 0;
    std::vector<std::string> task_order;
    std::map<std::string, Task> tasks;
    std::map<std::string, std::string> sample_task;
    // sample id -> annotator id -> annotation
    std::map<std::string, std::map<std::string, Annotation>> annotations;
    ProfileBook profiles;
    std::map<std::string, ScoredSample> scores;
    std::vector<ExportRecord> exports;
    std::set<std::string> exported_samples;

    /// Folds one event. Throws kCorruption when the event is inconsistent
    /// with the state so far (wrong sequence, unknown references, profile
    /// values that do not match the preceding updates).
    void apply(const Event& event);

    const Task& task_of_sample(const std::string& sample_id) const;
    const CodeSample& sample(const std::string& sample_id) const;
    std::vector<Task> ordered_tasks() const;
    ScoreIndex score_index() const;

    friend bool operator==(const PipelineState&, const PipelineState&) = default;
};

nlohmann::json state_to_json(const PipelineState& state);
PipelineState state_from_json(const nlohmann::json& j);

/// Hex SHA-256 of the canonical JSON encoding of the state.
std::string state_hash(const PipelineState& state);

std::string sha256_hex(std::string_view data);

/// Current UTC time, RFC 3339 with second precision.
std::string utc_timestamp();

struct LogReadResult {
    std::vector<Event> events;
    bool dropped_torn_tail = false;
    std::uint64_t valid_bytes = 0;
};

/// Reads a log file. A missing file reads as empty.
LogReadResult read_log(const std::filesystem::path& path);

class EventLog {
public:
    using Clock = std::function<std::string()>;

    /// Opens (creating if needed) and truncates any torn tail so later
    /// appends start on a record boundary.
    static EventLog open(const std::filesystem::path& path, Clock clock = utc_timestamp);

    /// Log that lives only in memory.
    static EventLog in_memory(Clock clock = utc_timestamp);

    EventLog(EventLog&& other) noexcept;
    EventLog& operator=(EventLog&& other) noexcept;
    EventLog(const EventLog&) = delete;
    EventLog& operator=(const EventLog&) = delete;
    ~EventLog();

    /// Writes and fsyncs the record before returning its sequence.
    const Event& append(EventKind kind, nlohmann::json payload);

    const std::vector<Event>& events() const noexcept { return events_; }
    std::uint64_t last_sequence() const noexcept {
        return events_.empty() ? 0 : events_.back().sequence;
    }
    const std::filesystem::path& path() const noexcept { return path_; }
    bool dropped_torn_tail() const noexcept { return dropped_torn_tail_; }

private:
    EventLog() = default;

    std::filesystem::path path_;
    int fd_ = -1;
    Clock clock_;
    std::vector<Event> events_;
    bool dropped_torn_tail_ = false;
};

PipelineState replay(std::span<const Event> events);
PipelineState replay(std::span<const Event> events, PipelineState from);
PipelineState replay_file(const std::filesystem::path& path);

struct Snapshot {
    std::uint64_t as_of_sequence = 0;
    PipelineState state;
    std::string hash;
};

/// Replays events up to and including `as_of`. Throws kInvalidArgument when
/// `as_of` is past the last event.
Snapshot snapshot(std::span<const Event> events, std::uint64_t as_of);
Snapshot snapshot(const PipelineState& state);

void write_snapshot(const Snapshot& snap, const std::filesystem::path& path);

/// Throws kHashMismatch when the stored hash does not match the content.
Snapshot load_snapshot(const std::filesystem::path& path);

}  // namespace crlhf
