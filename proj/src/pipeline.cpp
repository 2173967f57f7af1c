#include "crlhf/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <tuple>
#include <utility>

#include <nlohmann/json.hpp>

#include "crlhf/error.hpp"

namespace crlhf {

namespace {

using json = nlohmann::json;

std::string line_ref(const std::string& sample_id, std::size_t line) {
    return sample_id + "#" + std::to_string(line);
}

std::vector<const Annotation*> annotations_for(const std::string& sample_id,
                                               std::span<const Annotation> annotations) {
    std::vector<const Annotation*> out;
    for (const auto& a : annotations) {
        if (a.sample_id == sample_id) out.push_back(&a);
    }
    std::sort(out.begin(), out.end(), [](const Annotation* l, const Annotation* r) {
        return l->annotator_id < r->annotator_id;
    });
    return out;
}

void ensure_profiles(std::span<const Annotation> annotations, RoundResult& result,
                     const ReliabilityConfig& config) {
    std::set<std::string> ids;
    for (const auto& a : annotations) ids.insert(a.annotator_id);
    for (const auto& id : ids) {
        if (result.profiles.contains(id)) continue;
        auto profile = init_profile(id, config);
        const double p = profile.reliability.value();
        result.profiles.emplace(id, std::move(profile));
        result.steps.emplace_back(ProfileChange{id, p, p, 0, UpdateCause::kInit, {}});
    }
}

void record_change(RoundResult& result, const AnnotatorProfile& before,
                   const AnnotatorProfile& after, UpdateCause cause, std::string ref) {
    result.steps.emplace_back(ProfileChange{after.annotator_id, before.reliability.value(),
                                            after.reliability.value(), after.update_count,
                                            cause, std::move(ref)});
}

void calibrate_sample(const Task& task, std::size_t sample_index,
                      std::span<const Annotation> annotations, RoundResult& result,
                      const PipelineConfig& config) {
    const auto& sample = task.samples[sample_index];
    const auto& truth = (*task.ground_truth)[sample_index];
    for (const Annotation* ann : annotations_for(sample.sample_id, annotations)) {
        auto& profile = result.profiles.at(ann->annotator_id);
        for (std::size_t line = 0; line < truth.size(); ++line) {
            if (ann->labels[line] == Label::kSkip) continue;
            const std::span<const Label> one_label(&ann->labels[line], 1);
            const std::span<const Label> one_truth(&truth[line], 1);
            auto ref = line_ref(sample.sample_id, line);
            AnnotatorProfile updated =
                calibrate_on_honeypot(profile, one_label, one_truth, config.reliability, ref);
            record_change(result, profile, updated, UpdateCause::kHoneypot, std::move(ref));
            profile = std::move(updated);
        }
    }
}

void score_and_feedback(const Task& task, std::size_t sample_index,
                        std::span<const Annotation> annotations, RoundResult& result,
                        const PipelineConfig& config) {
    const auto& sample = task.samples[sample_index];
    const std::size_t k = sample.lines.size();
    const auto anns = annotations_for(sample.sample_id, annotations);

    std::vector<LineEvidence> evidence(k);
    ScoredSample scored;
    scored.task_id = task.task_id;
    for (const Annotation* ann : anns) {
        const auto& profile = result.profiles.at(ann->annotator_id);
        scored.reliabilities_used.emplace(ann->annotator_id, profile.reliability.value());
        for (std::size_t line = 0; line < k; ++line) {
            evidence[line].add(ann->annotator_id, ann->labels[line], profile.reliability);
        }
    }

    std::vector<double> posteriors;
    posteriors.reserve(k);
    for (const auto& ev : evidence) posteriors.push_back(fuse_line(ev, config.fusion));
    scored.score = score_sample(sample.sample_id, posteriors, config.fusion);
    if (!result.scores) result.scores.emplace();
    result.scores->push_back(scored);
    result.steps.emplace_back(std::move(scored));

    // All signals come from the reliabilities used for scoring; they are
    // applied afterwards in line order, then annotator order.
    std::vector<std::vector<FeedbackSignal>> signals;
    signals.reserve(anns.size());
    for (const Annotation* ann : anns) {
        signals.push_back(consensus_feedback(ann->annotator_id, ann->labels, evidence,
                                             config.reliability, config.fusion));
    }
    std::vector<std::size_t> cursor(anns.size(), 0);
    for (std::size_t line = 0; line < k; ++line) {
        for (std::size_t a = 0; a < anns.size(); ++a) {
            auto& pending = signals[a];
            if (cursor[a] >= pending.size() || pending[cursor[a]].line_index != line) continue;
            const auto& signal = pending[cursor[a]++];
            auto& profile = result.profiles.at(anns[a]->annotator_id);
            auto ref = line_ref(sample.sample_id, line);
            AnnotatorProfile updated = update_reliability(profile, signal, config.reliability, ref);
            record_change(result, profile, updated, UpdateCause::kConsensus, std::move(ref));
            profile = std::move(updated);
        }
    }
}

}  // namespace

void PipelineConfig::validate() const {
    fusion.validate();
    reliability.validate();
}

std::string_view to_string(UpdateCause cause) noexcept {
    switch (cause) {
        case UpdateCause::kInit: return "init";
        case UpdateCause::kHoneypot: return "honeypot";
        case UpdateCause::kConsensus: return "consensus";
        case UpdateCause::kOneShotSeed: return "one-shot-seed";
    }
    return "unknown";
}

UpdateCause update_cause_from_string(std::string_view text) {
    if (text == "init") return UpdateCause::kInit;
    if (text == "honeypot") return UpdateCause::kHoneypot;
    if (text == "consensus") return UpdateCause::kConsensus;
    if (text == "one-shot-seed") return UpdateCause::kOneShotSeed;
    throw Error(ErrorCode::kSchema, "unknown profile update cause '" + std::string(text) + "'");
}

void validate_task(const Task& task) {
    if (task.task_id.empty()) throw Error(ErrorCode::kInvalidArgument, "task id is empty");
    std::set<std::string> ids;
    for (const auto& s : task.samples) {
        if (s.sample_id.empty()) {
            throw Error(ErrorCode::kInvalidArgument, "task '" + task.task_id + "' has a sample without id");
        }
        if (s.task_id != task.task_id) {
            throw Error(ErrorCode::kInvalidArgument,
                        "sample '" + s.sample_id + "' belongs to task '" + s.task_id +
                            "', not '" + task.task_id + "'");
        }
        if (s.lines.empty()) {
            throw Error(ErrorCode::kEmptySample, "empty sample: '" + s.sample_id + "' has no lines");
        }
        if (!ids.insert(s.sample_id).second) {
            throw Error(ErrorCode::kDuplicate, "duplicate sample id '" + s.sample_id + "'");
        }
    }
    if (task.is_honeypot && !task.ground_truth) {
        throw Error(ErrorCode::kInvalidArgument,
                    "honeypot task '" + task.task_id + "' has no ground truth");
    }
    if (task.ground_truth) {
        const auto& truth = *task.ground_truth;
        if (truth.size() != task.samples.size()) {
            throw Error(ErrorCode::kShapeMismatch,
                        "ground truth for task '" + task.task_id + "' covers " +
                            std::to_string(truth.size()) + " samples, task has " +
                            std::to_string(task.samples.size()));
        }
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i].size() != task.samples[i].lines.size()) {
                throw Error(ErrorCode::kShapeMismatch,
                            "ground truth for sample '" + task.samples[i].sample_id +
                                "' does not match its line count");
            }
            for (Label l : truth[i]) {
                if (l == Label::kSkip) {
                    throw Error(ErrorCode::kInvalidArgument,
                                "ground truth may not contain skip labels");
                }
            }
        }
    }
}

void validate_annotations(const Task& task, std::span<const Annotation> annotations) {
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& a : annotations) {
        const auto it = std::find_if(task.samples.begin(), task.samples.end(),
                                     [&](const CodeSample& s) { return s.sample_id == a.sample_id; });
        if (it == task.samples.end()) {
            throw Error(ErrorCode::kUnknownEntity,
                        "sample '" + a.sample_id + "' is not part of task '" + task.task_id + "'");
        }
        if (a.labels.size() != it->lines.size()) {
            throw Error(ErrorCode::kShapeMismatch,
                        "annotation of '" + a.sample_id + "' has " +
                            std::to_string(a.labels.size()) + " labels for " +
                            std::to_string(it->lines.size()) + " lines");
        }
        if (!seen.emplace(a.annotator_id, a.sample_id).second) {
            throw Error(ErrorCode::kDuplicate, "annotator '" + a.annotator_id +
                                                   "' annotated '" + a.sample_id + "' twice");
        }
    }
}

RoundResult run_round(const Task& task, std::span<const Annotation> annotations,
                      ProfileBook profiles, const PipelineConfig& config) {
    config.validate();
    validate_task(task);
    validate_annotations(task, annotations);

    RoundResult result;
    result.profiles = std::move(profiles);
    ensure_profiles(annotations, result, config.reliability);

    for (std::size_t i = 0; i < task.samples.size(); ++i) {
        if (task.is_honeypot) {
            calibrate_sample(task, i, annotations, result, config);
        } else {
            score_and_feedback(task, i, annotations, result, config);
        }
    }
    if (!task.is_honeypot && !result.scores) result.scores.emplace();
    return result;
}

RoundResult run_sample_round(const Task& task, std::size_t sample_index,
                             std::span<const Annotation> annotations, ProfileBook profiles,
                             const PipelineConfig& config) {
    config.validate();
    validate_task(task);
    validate_annotations(task, annotations);
    if (task.is_honeypot) {
        throw Error(ErrorCode::kInvalidArgument,
                    "honeypot task '" + task.task_id + "' is never scored");
    }
    if (sample_index >= task.samples.size()) {
        throw Error(ErrorCode::kUnknownEntity, "sample index out of range");
    }
    RoundResult result;
    result.profiles = std::move(profiles);
    const auto anns = annotations_for(task.samples[sample_index].sample_id, annotations);
    std::vector<Annotation> relevant;
    relevant.reserve(anns.size());
    for (const Annotation* a : anns) relevant.push_back(*a);
    ensure_profiles(relevant, result, config.reliability);
    score_and_feedback(task, sample_index, relevant, result, config);
    return result;
}

RoundResult seed_profiles(ProfileBook profiles, const std::map<std::string, double>& reliabilities,
                          const ReliabilityConfig& config) {
    config.validate();
    RoundResult result;
    result.profiles = std::move(profiles);
    for (const auto& [id, p] : reliabilities) {
        if (!result.profiles.contains(id)) {
            auto profile = init_profile(id, config);
            const double init = profile.reliability.value();
            result.profiles.emplace(id, std::move(profile));
            result.steps.emplace_back(ProfileChange{id, init, init, 0, UpdateCause::kInit, {}});
        }
        auto& profile = result.profiles.at(id);
        AnnotatorProfile updated = profile;
        updated.reliability = Probability(p, config.prob_clamp);
        ++updated.update_count;
        if (config.keep_history) {
            updated.history.push_back({"one-shot", profile.reliability.value(),
                                       updated.reliability.value()});
        }
        record_change(result, profile, updated, UpdateCause::kOneShotSeed, "one-shot");
        profile = std::move(updated);
    }
    return result;
}

std::string join_lines(std::span<const std::string> lines) {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i > 0) out += '\n';
        out += lines[i];
    }
    return out;
}

std::vector<RewardTriplet> build_reward_dataset(std::span<const Task> tasks,
                                                const ScoreIndex& scores) {
    std::vector<std::tuple<std::string, std::string, RewardTriplet>> rows;
    for (const auto& task : tasks) {
        if (task.is_honeypot) continue;
        for (const auto& sample : task.samples) {
            const auto it = scores.find(sample.sample_id);
            if (it == scores.end()) continue;
            rows.emplace_back(task.task_id, sample.sample_id,
                              RewardTriplet{task.description, join_lines(sample.lines),
                                            it->second.score});
        }
    }
    std::sort(rows.begin(), rows.end(), [](const auto& l, const auto& r) {
        return std::tie(std::get<0>(l), std::get<1>(l)) < std::tie(std::get<0>(r), std::get<1>(r));
    });
    std::vector<RewardTriplet> out;
    out.reserve(rows.size());
    for (auto& row : rows) out.push_back(std::move(std::get<2>(row)));
    return out;
}

std::size_t export_rewards(std::span<const RewardTriplet> dataset,
                           const std::filesystem::path& destination) {
    auto tmp = destination;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
        for (const auto& t : dataset) {
            out << json{{"prompt", t.x}, {"completion", t.y}, {"reward", t.s}}.dump() << '\n';
        }
        out.flush();
        if (!out) throw Error(ErrorCode::kIo, "write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, destination, ec);
    if (ec) {
        throw Error(ErrorCode::kIo,
                    "cannot move export into '" + destination.string() + "': " + ec.message());
    }
    return dataset.size();
}

std::vector<RewardTriplet> import_rewards(const std::filesystem::path& source) {
    std::ifstream in(source, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open '" + source.string() + "'");
    std::vector<RewardTriplet> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            out.push_back({j.at("prompt").get<std::string>(), j.at("completion").get<std::string>(),
                           j.at("reward").get<double>()});
        } catch (const json::exception& e) {
            throw Error(ErrorCode::kSchema, source.string() + ":" + std::to_string(line_no) +
                                                ": " + e.what());
        }
    }
    return out;
}

TrainerAck RecordingTrainerHook::deliver(std::span<const RewardTriplet> batch) {
    batches_.emplace_back(batch.begin(), batch.end());
    return {true, "recorded " + std::to_string(batch.size())};
}

}  // namespace crlhf
