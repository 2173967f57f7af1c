#include "crlhf/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <array>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "crlhf/error.hpp"
#include "crlhf/serialization.hpp"

namespace crlhf {

namespace {

using json = nlohmann::json;

[[noreturn]] void corrupt(std::uint64_t sequence, const std::string& what) {
    throw Error(ErrorCode::kCorruption,
                "event " + std::to_string(sequence) + ": " + what);
}

std::string io_message(const std::string& what, const std::filesystem::path& path) {
    return what + " '" + path.string() + "': " + std::strerror(errno);
}

void write_all(int fd, std::string_view data, const std::filesystem::path& path) {
    while (!data.empty()) {
        const ssize_t n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(ErrorCode::kIo, io_message("write failed for", path));
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

}  // namespace

std::string_view to_string(EventKind kind) noexcept {
    switch (kind) {
        case EventKind::kTaskRegistered: return "task-registered";
        case EventKind::kAnnotationSubmitted: return "annotation-submitted";
        case EventKind::kProfileUpdated: return "profile-updated";
        case EventKind::kSampleScored: return "sample-scored";
        case EventKind::kDatasetExported: return "dataset-exported";
    }
    return "unknown";
}

EventKind event_kind_from_string(std::string_view text) {
    for (auto kind : {EventKind::kTaskRegistered, EventKind::kAnnotationSubmitted,
                      EventKind::kProfileUpdated, EventKind::kSampleScored,
                      EventKind::kDatasetExported}) {
        if (to_string(kind) == text) return kind;
    }
    throw Error(ErrorCode::kSchema, "unknown event kind '" + std::string(text) + "'");
}

json event_to_json(const Event& event) {
    return json{{"schema_version", kSchemaVersion},
                {"sequence", event.sequence},
                {"kind", std::string(to_string(event.kind))},
                {"payload", event.payload},
                {"recorded_at", event.recorded_at}};
}

Event event_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != kSchemaVersion) {
            throw Error(ErrorCode::kSchema, "unsupported schema version " +
                                                j.at("schema_version").dump());
        }
        Event e;
        e.sequence = j.at("sequence").get<std::uint64_t>();
        e.kind = event_kind_from_string(j.at("kind").get<std::string>());
        e.payload = j.at("payload");
        e.recorded_at = j.at("recorded_at").get<std::string>();
        return e;
    } catch (const json::exception& ex) {
        throw Error(ErrorCode::kSchema, std::string("malformed event record: ") + ex.what());
    }
}

json task_registered_payload(const Task& task) { return json{{"task", task}}; }

json annotation_submitted_payload(const Annotation& annotation) {
    return json{{"annotation", annotation}};
}

json profile_updated_payload(const ProfileChange& change) { return json{{"change", change}}; }

json sample_scored_payload(const ScoredSample& scored) { return json{{"scored", scored}}; }

json dataset_exported_payload(const std::string& batch_id, const std::string& destination,
                              const std::vector<std::string>& sample_ids) {
    return json{{"batch_id", batch_id},
                {"destination", destination},
                {"count", sample_ids.size()},
                {"sample_ids", sample_ids}};
}

void PipelineState::apply(const Event& event) {
    const auto seq = event.sequence;
    if (seq != last_sequence + 1) {
        corrupt(seq, "expected sequence " + std::to_string(last_sequence + 1));
    }
    const std::string context = "event " + std::to_string(seq);
    switch (event.kind) {
        case EventKind::kTaskRegistered: {
            auto task = parse_record<Task>(event.payload.at("task"), context);
            try {
                validate_task(task);
            } catch (const Error& e) {
                corrupt(seq, e.what());
            }
            if (tasks.contains(task.task_id)) corrupt(seq, "task '" + task.task_id + "' registered twice");
            for (const auto& s : task.samples) {
                if (sample_task.contains(s.sample_id)) {
                    corrupt(seq, "sample '" + s.sample_id + "' registered twice");
                }
            }
            for (const auto& s : task.samples) sample_task.emplace(s.sample_id, task.task_id);
            task_order.push_back(task.task_id);
            tasks.emplace(task.task_id, std::move(task));
            break;
        }
        case EventKind::kAnnotationSubmitted: {
            auto ann = parse_record<Annotation>(event.payload.at("annotation"), context);
            if (!sample_task.contains(ann.sample_id)) corrupt(seq, "unknown sample '" + ann.sample_id + "'");
            if (sample(ann.sample_id).lines.size() != ann.labels.size()) {
                corrupt(seq, "annotation shape does not match sample '" + ann.sample_id + "'");
            }
            auto& by_annotator = annotations[ann.sample_id];
            if (by_annotator.contains(ann.annotator_id)) {
                corrupt(seq, "duplicate annotation by '" + ann.annotator_id + "'");
            }
            by_annotator.emplace(ann.annotator_id, std::move(ann));
            break;
        }
        case EventKind::kProfileUpdated: {
            auto change = parse_record<ProfileChange>(event.payload.at("change"), context);
            auto it = profiles.find(change.annotator_id);
            if (change.cause == UpdateCause::kInit) {
                if (it != profiles.end()) corrupt(seq, "annotator '" + change.annotator_id + "' initialized twice");
                AnnotatorProfile profile;
                profile.annotator_id = change.annotator_id;
                profile.reliability = parse_record<AnnotatorProfile>(
                                          json{{"annotator_id", change.annotator_id},
                                               {"reliability", change.new_reliability},
                                               {"update_count", 0}},
                                          context)
                                          .reliability;
                profiles.emplace(change.annotator_id, std::move(profile));
                break;
            }
            if (it == profiles.end()) corrupt(seq, "update for unknown annotator '" + change.annotator_id + "'");
            if (it->second.reliability.value() != change.old_reliability) {
                corrupt(seq, "profile '" + change.annotator_id +
                                 "' does not match the preceding updates");
            }
            auto updated = parse_record<AnnotatorProfile>(
                json{{"annotator_id", change.annotator_id},
                     {"reliability", change.new_reliability},
                     {"update_count", change.update_count}},
                context);
            it->second.reliability = updated.reliability;
            it->second.update_count = updated.update_count;
            break;
        }
        case EventKind::kSampleScored: {
            auto scored = parse_record<ScoredSample>(event.payload.at("scored"), context);
            const auto& id = scored.score.sample_id;
            if (!sample_task.contains(id)) corrupt(seq, "unknown sample '" + id + "'");
            if (scores.contains(id)) corrupt(seq, "sample '" + id + "' scored twice");
            for (const auto& [annotator, p] : scored.reliabilities_used) {
                auto pit = profiles.find(annotator);
                if (pit == profiles.end() || pit->second.reliability.value() != p) {
                    corrupt(seq, "reliability of '" + annotator + "' used for '" + id +
                                     "' does not match the profile history");
                }
            }
            scores.emplace(id, std::move(scored));
            break;
        }
        case EventKind::kDatasetExported: {
            ExportRecord rec;
            try {
                rec.batch_id = event.payload.at("batch_id").get<std::string>();
                rec.destination = event.payload.at("destination").get<std::string>();
                rec.sample_ids = event.payload.at("sample_ids").get<std::vector<std::string>>();
            } catch (const json::exception& e) {
                corrupt(seq, e.what());
            }
            for (const auto& id : rec.sample_ids) {
                if (!scores.contains(id)) corrupt(seq, "exported sample '" + id + "' was never scored");
                exported_samples.insert(id);
            }
            exports.push_back(std::move(rec));
            break;
        }
    }
    last_sequence = seq;
}

const Task& PipelineState::task_of_sample(const std::string& sample_id) const {
    const auto it = sample_task.find(sample_id);
    if (it == sample_task.end()) {
        throw Error(ErrorCode::kUnknownEntity, "unknown sample '" + sample_id + "'");
    }
    return tasks.at(it->second);
}

const CodeSample& PipelineState::sample(const std::string& sample_id) const {
    for (const auto& s : task_of_sample(sample_id).samples) {
        if (s.sample_id == sample_id) return s;
    }
    throw Error(ErrorCode::kUnknownEntity, "unknown sample '" + sample_id + "'");
}

std::vector<Task> PipelineState::ordered_tasks() const {
    std::vector<Task> out;
    out.reserve(task_order.size());
    for (const auto& id : task_order) out.push_back(tasks.at(id));
    return out;
}

ScoreIndex PipelineState::score_index() const {
    ScoreIndex out;
    for (const auto& [id, scored] : scores) out.emplace(id, scored.score);
    return out;
}

json state_to_json(const PipelineState& state) {
    json tasks = json::array();
    for (const auto& id : state.task_order) tasks.push_back(state.tasks.at(id));
    json annotations = json::array();
    for (const auto& [sample, by_annotator] : state.annotations) {
        for (const auto& [annotator, ann] : by_annotator) annotations.push_back(ann);
    }
    json profiles = json::array();
    for (const auto& [id, profile] : state.profiles) profiles.push_back(profile);
    json scores = json::array();
    for (const auto& [id, scored] : state.scores) scores.push_back(scored);
    json exports = json::array();
    for (const auto& e : state.exports) {
        exports.push_back(
            json{{"batch_id", e.batch_id}, {"destination", e.destination}, {"sample_ids", e.sample_ids}});
    }
    return json{{"last_sequence", state.last_sequence},
                {"tasks", tasks},
                {"annotations", annotations},
                {"profiles", profiles},
                {"scores", scores},
                {"exports", exports}};
}

PipelineState state_from_json(const json& j) {
    PipelineState state;
    try {
        state.last_sequence = j.at("last_sequence").get<std::uint64_t>();
        for (const auto& t : j.at("tasks")) {
            auto task = t.get<Task>();
            for (const auto& s : task.samples) state.sample_task.emplace(s.sample_id, task.task_id);
            state.task_order.push_back(task.task_id);
            state.tasks.emplace(task.task_id, std::move(task));
        }
        for (const auto& a : j.at("annotations")) {
            auto ann = a.get<Annotation>();
            auto sample_id = ann.sample_id;
            auto annotator_id = ann.annotator_id;
            state.annotations[sample_id].emplace(annotator_id, std::move(ann));
        }
        for (const auto& p : j.at("profiles")) {
            auto profile = p.get<AnnotatorProfile>();
            auto id = profile.annotator_id;
            state.profiles.emplace(id, std::move(profile));
        }
        for (const auto& s : j.at("scores")) {
            auto scored = s.get<ScoredSample>();
            auto id = scored.score.sample_id;
            state.scores.emplace(id, std::move(scored));
        }
        for (const auto& e : j.at("exports")) {
            ExportRecord rec{e.at("batch_id").get<std::string>(),
                             e.at("destination").get<std::string>(),
                             e.at("sample_ids").get<std::vector<std::string>>()};
            state.exported_samples.insert(rec.sample_ids.begin(), rec.sample_ids.end());
            state.exports.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::kSchema, std::string("malformed state: ") + e.what());
    }
    return state;
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::kIo, "sha256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0x0f]);
    }
    return out;
}

std::string state_hash(const PipelineState& state) { return sha256_hex(state_to_json(state).dump()); }

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

LogReadResult read_log(const std::filesystem::path& path) {
    LogReadResult result;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        if (!std::filesystem::exists(path)) return result;
        throw Error(ErrorCode::kIo, "cannot open log '" + path.string() + "'");
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string content = buffer.str();

    std::size_t pos = 0;
    std::uint64_t expected = 1;
    while (pos < content.size()) {
        const std::size_t nl = content.find('\n', pos);
        const bool terminated = nl != std::string::npos;
        const std::size_t end = terminated ? nl : content.size();
        const bool last = !terminated || end + 1 >= content.size();
        const std::string_view line(content.data() + pos, end - pos);

        Event event;
        bool ok = terminated;
        if (ok) {
            try {
                event = event_from_json(json::parse(line));
            } catch (const json::exception&) {
                ok = false;
            } catch (const Error&) {
                ok = false;
            }
        }
        if (!ok) {
            if (last) {
                result.dropped_torn_tail = true;
                break;
            }
            throw Error(ErrorCode::kCorruption, "corrupt record at sequence position " +
                                                    std::to_string(expected) + " in '" +
                                                    path.string() + "'");
        }
        if (event.sequence != expected) {
            throw Error(ErrorCode::kCorruption,
                        "sequence gap at position " + std::to_string(expected) + " in '" +
                            path.string() + "' (found " + std::to_string(event.sequence) + ")");
        }
        result.events.push_back(std::move(event));
        ++expected;
        pos = end + 1;
        result.valid_bytes = pos;
    }
    return result;
}

EventLog EventLog::open(const std::filesystem::path& path, Clock clock) {
    auto read = read_log(path);
    if (read.dropped_torn_tail) {
        std::error_code ec;
        std::filesystem::resize_file(path, read.valid_bytes, ec);
        if (ec) {
            throw Error(ErrorCode::kIo,
                        "cannot truncate torn tail of '" + path.string() + "': " + ec.message());
        }
    }
    EventLog log;
    log.path_ = path;
    log.clock_ = std::move(clock);
    log.events_ = std::move(read.events);
    log.dropped_torn_tail_ = read.dropped_torn_tail;
    log.fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (log.fd_ < 0) throw Error(ErrorCode::kIo, io_message("cannot open log", path));
    return log;
}

EventLog EventLog::in_memory(Clock clock) {
    EventLog log;
    log.clock_ = std::move(clock);
    return log;
}

EventLog::EventLog(EventLog&& other) noexcept
    : path_(std::move(other.path_)),
      fd_(std::exchange(other.fd_, -1)),
      clock_(std::move(other.clock_)),
      events_(std::move(other.events_)),
      dropped_torn_tail_(other.dropped_torn_tail_) {}

EventLog& EventLog::operator=(EventLog&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0) ::close(fd_);
        path_ = std::move(other.path_);
        fd_ = std::exchange(other.fd_, -1);
        clock_ = std::move(other.clock_);
        events_ = std::move(other.events_);
        dropped_torn_tail_ = other.dropped_torn_tail_;
    }
    return *this;
}

EventLog::~EventLog() {
    if (fd_ >= 0) ::close(fd_);
}

const Event& EventLog::append(EventKind kind, json payload) {
    Event event{last_sequence() + 1, kind, std::move(payload), clock_ ? clock_() : utc_timestamp()};
    if (fd_ >= 0) {
        write_all(fd_, event_to_json(event).dump() + "\n", path_);
        if (::fsync(fd_) != 0) throw Error(ErrorCode::kIo, io_message("fsync failed for", path_));
    }
    events_.push_back(std::move(event));
    return events_.back();
}

PipelineState replay(std::span<const Event> events) { return replay(events, PipelineState{}); }

PipelineState replay(std::span<const Event> events, PipelineState from) {
    for (const auto& e : events) {
        if (e.sequence <= from.last_sequence) continue;
        from.apply(e);
    }
    return from;
}

PipelineState replay_file(const std::filesystem::path& path) {
    const auto read = read_log(path);
    return replay(read.events);
}

Snapshot snapshot(std::span<const Event> events, std::uint64_t as_of) {
    const std::uint64_t latest = events.empty() ? 0 : events.back().sequence;
    if (as_of > latest) {
        throw Error(ErrorCode::kInvalidArgument, "snapshot sequence " + std::to_string(as_of) +
                                                     " is past the last event " +
                                                     std::to_string(latest));
    }
    PipelineState state;
    for (const auto& e : events) {
        if (e.sequence > as_of) break;
        state.apply(e);
    }
    return snapshot(state);
}

Snapshot snapshot(const PipelineState& state) {
    return Snapshot{state.last_sequence, state, state_hash(state)};
}

void write_snapshot(const Snapshot& snap, const std::filesystem::path& path) {
    const json j{{"schema_version", kSchemaVersion},
                 {"as_of_sequence", snap.as_of_sequence},
                 {"hash", snap.hash},
                 {"state", state_to_json(snap.state)}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write snapshot '" + path.string() + "'");
    out << j.dump() << '\n';
    if (!out) throw Error(ErrorCode::kIo, "write to snapshot '" + path.string() + "' failed");
}

Snapshot load_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open snapshot '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::kCorruption,
                    "snapshot '" + path.string() + "' is not valid JSON: " + e.what());
    }
    Snapshot snap;
    try {
        snap.as_of_sequence = j.at("as_of_sequence").get<std::uint64_t>();
        snap.hash = j.at("hash").get<std::string>();
        snap.state = state_from_json(j.at("state"));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::kCorruption, "snapshot '" + path.string() + "': " + e.what());
    } catch (const Error& e) {
        throw Error(ErrorCode::kHashMismatch,
                    "snapshot '" + path.string() + "' failed verification: " + e.what());
    }
    const auto actual = state_hash(snap.state);
    if (actual != snap.hash || snap.state.last_sequence != snap.as_of_sequence) {
        throw Error(ErrorCode::kHashMismatch,
                    "snapshot '" + path.string() + "' hash mismatch: stored " + snap.hash +
                        ", content " + actual);
    }
    return snap;
}

}  // namespace crlhf
