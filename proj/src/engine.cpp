#include "crlhf/engine.hpp"

#include <mutex>

#include "crlhf/error.hpp"
#include "crlhf/serialization.hpp"

namespace crlhf {

Engine::Engine(EventLog log, EngineConfig config)
    : log_(std::move(log)), config_(std::move(config)) {
    config_.pipeline.validate();
    state_ = replay(log_.events());
}

void Engine::append(EventKind kind, nlohmann::json payload) {
    const Event& event = log_.append(kind, std::move(payload));
    state_.apply(event);
}

void Engine::append_round(const RoundResult& round) {
    for (const auto& step : round.steps) {
        if (const auto* scored = std::get_if<ScoredSample>(&step)) {
            append(EventKind::kSampleScored, sample_scored_payload(*scored));
        } else {
            append(EventKind::kProfileUpdated,
                   profile_updated_payload(std::get<ProfileChange>(step)));
        }
    }
}

std::uint64_t Engine::register_task(Task task) {
    std::unique_lock lock(mutex_);
    for (auto& s : task.samples) {
        if (s.task_id.empty()) s.task_id = task.task_id;
    }
    validate_task(task);
    if (state_.tasks.contains(task.task_id)) {
        throw Error(ErrorCode::kDuplicate, "task '" + task.task_id + "' already registered");
    }
    for (const auto& s : task.samples) {
        if (state_.sample_task.contains(s.sample_id)) {
            throw Error(ErrorCode::kDuplicate, "sample '" + s.sample_id + "' already registered");
        }
    }
    append(EventKind::kTaskRegistered, task_registered_payload(task));
    return state_.last_sequence;
}

AnnotatorProfile Engine::ensure_annotator_locked(const std::string& annotator_id) {
    if (annotator_id.empty()) throw Error(ErrorCode::kInvalidArgument, "annotator id is empty");
    if (auto it = state_.profiles.find(annotator_id); it != state_.profiles.end()) return it->second;
    if (!config_.auto_register) {
        throw Error(ErrorCode::kUnknownEntity, "unknown annotator '" + annotator_id + "'");
    }
    const auto profile = init_profile(annotator_id, config_.pipeline.reliability);
    const double p = profile.reliability.value();
    append(EventKind::kProfileUpdated,
           profile_updated_payload({annotator_id, p, p, 0, UpdateCause::kInit, {}}));
    return state_.profiles.at(annotator_id);
}

AnnotatorProfile Engine::ensure_annotator(const std::string& annotator_id) {
    std::unique_lock lock(mutex_);
    return ensure_annotator_locked(annotator_id);
}

std::optional<AnnotatorProfile> Engine::profile(const std::string& annotator_id) const {
    std::shared_lock lock(mutex_);
    const auto it = state_.profiles.find(annotator_id);
    if (it == state_.profiles.end()) return std::nullopt;
    return it->second;
}

SubmitResult Engine::submit_annotation(Annotation annotation) {
    std::unique_lock lock(mutex_);
    const Task& task = state_.task_of_sample(annotation.sample_id);
    const CodeSample& sample = state_.sample(annotation.sample_id);
    if (annotation.labels.size() != sample.lines.size()) {
        throw Error(ErrorCode::kShapeMismatch,
                    "sample '" + sample.sample_id + "' has " + std::to_string(sample.lines.size()) +
                        " lines, got " + std::to_string(annotation.labels.size()) + " labels");
    }
    if (const auto it = state_.annotations.find(annotation.sample_id);
        it != state_.annotations.end() && it->second.contains(annotation.annotator_id)) {
        throw Error(ErrorCode::kDuplicate, "annotator '" + annotation.annotator_id +
                                               "' already annotated '" + annotation.sample_id + "'");
    }
    if (state_.scores.contains(annotation.sample_id)) {
        throw Error(ErrorCode::kRoundClosed,
                    "sample '" + annotation.sample_id + "' was already scored");
    }
    if (annotation.annotation_id.empty()) {
        annotation.annotation_id = annotation.annotator_id + ":" + annotation.sample_id;
    }
    if (annotation.submitted_at.empty()) annotation.submitted_at = utc_timestamp();

    ensure_annotator_locked(annotation.annotator_id);
    append(EventKind::kAnnotationSubmitted, annotation_submitted_payload(annotation));

    SubmitResult result;
    result.sequence = state_.last_sequence;
    result.annotation_id = annotation.annotation_id;

    if (task.is_honeypot) {
        const auto round = run_round(task, std::span<const Annotation>(&annotation, 1),
                                     state_.profiles, config_.pipeline);
        append_round(round);
        result.profile_updates = round.steps.size();
    } else if (config_.quorum && state_.annotations.at(annotation.sample_id).size() >= *config_.quorum) {
        std::size_t index = 0;
        while (task.samples[index].sample_id != annotation.sample_id) ++index;
        const auto anns = annotations_of_task(task);
        const auto round = run_sample_round(task, index, anns, state_.profiles, config_.pipeline);
        append_round(round);
        result.scored = round.scores->front().score;
    }
    return result;
}

std::vector<Annotation> Engine::annotations_of_task(const Task& task) const {
    std::vector<Annotation> out;
    for (const auto& s : task.samples) {
        const auto it = state_.annotations.find(s.sample_id);
        if (it == state_.annotations.end()) continue;
        for (const auto& [annotator, ann] : it->second) out.push_back(ann);
    }
    return out;
}

std::vector<ScoredSample> Engine::close_round_locked(const std::string& task_id) {
    const auto it = state_.tasks.find(task_id);
    if (it == state_.tasks.end()) {
        throw Error(ErrorCode::kUnknownEntity, "unknown task '" + task_id + "'");
    }
    const Task& task = it->second;
    if (task.is_honeypot) {
        throw Error(ErrorCode::kInvalidArgument,
                    "honeypot task '" + task_id + "' is calibrated on submission, not scored");
    }
    const auto anns = annotations_of_task(task);
    std::vector<ScoredSample> out;
    for (std::size_t i = 0; i < task.samples.size(); ++i) {
        if (state_.scores.contains(task.samples[i].sample_id)) continue;
        const auto round = run_sample_round(task, i, anns, state_.profiles, config_.pipeline);
        append_round(round);
        out.push_back(round.scores->front());
    }
    return out;
}

std::vector<ScoredSample> Engine::close_round(const std::string& task_id) {
    std::unique_lock lock(mutex_);
    return close_round_locked(task_id);
}

std::vector<ScoredSample> Engine::close_all_rounds() {
    std::unique_lock lock(mutex_);
    std::vector<ScoredSample> out;
    const auto order = state_.task_order;
    for (const auto& id : order) {
        if (state_.tasks.at(id).is_honeypot) continue;
        auto scored = close_round_locked(id);
        out.insert(out.end(), scored.begin(), scored.end());
    }
    return out;
}

std::optional<Assignment> Engine::next_assignment(const std::string& annotator_id) {
    std::unique_lock lock(mutex_);
    ensure_annotator_locked(annotator_id);

    std::vector<const Task*> order;
    for (const auto& id : state_.task_order) order.push_back(&state_.tasks.at(id));
    if (config_.honeypots_first) {
        std::stable_partition(order.begin(), order.end(),
                              [](const Task* t) { return t->is_honeypot; });
    }
    auto annotated = [&](const std::string& sample_id) {
        const auto it = state_.annotations.find(sample_id);
        return it != state_.annotations.end() && it->second.contains(annotator_id);
    };

    std::size_t total = 0;
    std::size_t completed = 0;
    for (const Task* t : order) {
        for (const auto& s : t->samples) {
            ++total;
            if (annotated(s.sample_id)) ++completed;
        }
    }
    for (const Task* t : order) {
        for (const auto& s : t->samples) {
            if (annotated(s.sample_id) || state_.scores.contains(s.sample_id)) continue;
            return Assignment{annotator_id, t->task_id, t->description, s.sample_id,
                              s.lines,      completed,  total};
        }
    }
    return std::nullopt;
}

SampleReport Engine::sample_report(const std::string& sample_id) const {
    std::shared_lock lock(mutex_);
    const Task& task = state_.task_of_sample(sample_id);
    SampleReport report;
    report.task_id = task.task_id;
    if (const auto it = state_.annotations.find(sample_id); it != state_.annotations.end()) {
        report.annotation_count = it->second.size();
    }
    if (task.is_honeypot) {
        report.status = SampleStatus::kHoneypot;
    } else if (const auto it = state_.scores.find(sample_id); it != state_.scores.end()) {
        report.status = SampleStatus::kScored;
        report.scored = it->second;
    }
    return report;
}

std::vector<RewardTriplet> Engine::pending_delivery() const {
    std::shared_lock lock(mutex_);
    ScoreIndex pending;
    for (const auto& [id, scored] : state_.scores) {
        if (!state_.exported_samples.contains(id)) pending.emplace(id, scored.score);
    }
    const auto tasks = state_.ordered_tasks();
    return build_reward_dataset(tasks, pending);
}

ExportResult Engine::export_rewards(const std::filesystem::path& destination, TrainerHook* hook) {
    std::unique_lock lock(mutex_);
    const auto tasks = state_.ordered_tasks();
    const auto all = build_reward_dataset(tasks, state_.score_index());

    ExportResult result;
    result.destination = destination;
    result.count = crlhf::export_rewards(all, destination);

    // Samples covered by this export, in dataset order.
    ScoreIndex covered_index;
    for (const auto& [id, scored] : state_.scores) {
        if (!hook || !state_.exported_samples.contains(id)) covered_index.emplace(id, scored.score);
    }
    std::vector<std::string> covered;
    for (const auto& task : tasks) {
        if (task.is_honeypot) continue;
        for (const auto& s : task.samples) {
            if (covered_index.contains(s.sample_id)) covered.push_back(s.sample_id);
        }
    }

    if (hook) {
        const auto batch = build_reward_dataset(tasks, covered_index);
        TrainerAck ack;
        try {
            ack = hook->deliver(batch);
        } catch (const std::exception& e) {
            ack = {false, e.what()};
        }
        if (!ack.accepted) {
            result.hook_error = ack.detail.empty() ? "trainer hook rejected the batch" : ack.detail;
            return result;
        }
        result.delivered = batch.size();
    }
    const std::string batch_id = "export-" + std::to_string(state_.exports.size() + 1);
    append(EventKind::kDatasetExported,
           dataset_exported_payload(batch_id, destination.string(), covered));
    return result;
}

std::size_t Engine::seed_profiles(const std::map<std::string, double>& reliabilities) {
    std::unique_lock lock(mutex_);
    for (const auto& [id, p] : reliabilities) ensure_annotator_locked(id);
    const auto round = crlhf::seed_profiles(state_.profiles, reliabilities, config_.pipeline.reliability);
    append_round(round);
    return reliabilities.size();
}

PipelineState Engine::state() const {
    std::shared_lock lock(mutex_);
    return state_;
}

std::string Engine::state_hash() const {
    std::shared_lock lock(mutex_);
    return crlhf::state_hash(state_);
}

std::uint64_t Engine::last_sequence() const {
    std::shared_lock lock(mutex_);
    return state_.last_sequence;
}

}  // namespace crlhf
