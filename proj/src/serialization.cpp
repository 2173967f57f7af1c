#include "crlhf/serialization.hpp"

#include <algorithm>

#include "crlhf/error.hpp"

namespace crlhf {

using nlohmann::json;

void to_json(json& j, const Label& label) { j = sign(label); }

void from_json(const json& j, Label& label) {
    if (j.is_null() || (j.is_string() && j.get<std::string>() == "skip")) {
        label = Label::kSkip;
        return;
    }
    if (!j.is_number_integer()) {
        throw Error(ErrorCode::kSchema, "label must be 1, -1, 0 or \"skip\", got " + j.dump());
    }
    label = label_from_int(j.get<int>());
}

void to_json(json& j, const CodeSample& sample) {
    j = json{{"sample_id", sample.sample_id},
             {"task_id", sample.task_id},
             {"lines", sample.lines},
             {"generator_meta", sample.generator_meta}};
}

void from_json(const json& j, CodeSample& sample) {
    j.at("sample_id").get_to(sample.sample_id);
    sample.task_id = j.value("task_id", std::string{});
    j.at("lines").get_to(sample.lines);
    sample.generator_meta = j.value("generator_meta", std::map<std::string, std::string>{});
}

void to_json(json& j, const Task& task) {
    j = json{{"task_id", task.task_id},
             {"description", task.description},
             {"is_honeypot", task.is_honeypot},
             {"samples", task.samples}};
    if (task.ground_truth) j["ground_truth"] = *task.ground_truth;
}

void from_json(const json& j, Task& task) {
    j.at("task_id").get_to(task.task_id);
    task.description = j.value("description", std::string{});
    task.is_honeypot = j.value("is_honeypot", false);
    j.at("samples").get_to(task.samples);
    // Samples nested in a task inherit its id.
    for (auto& s : task.samples) {
        if (s.task_id.empty()) s.task_id = task.task_id;
    }
    if (j.contains("ground_truth") && !j.at("ground_truth").is_null()) {
        task.ground_truth = j.at("ground_truth").get<std::vector<std::vector<Label>>>();
    } else {
        task.ground_truth.reset();
    }
}

void to_json(json& j, const Annotation& annotation) {
    j = json{{"annotation_id", annotation.annotation_id},
             {"annotator_id", annotation.annotator_id},
             {"sample_id", annotation.sample_id},
             {"labels", annotation.labels},
             {"submitted_at", annotation.submitted_at}};
}

void from_json(const json& j, Annotation& annotation) {
    annotation.annotation_id = j.value("annotation_id", std::string{});
    j.at("annotator_id").get_to(annotation.annotator_id);
    j.at("sample_id").get_to(annotation.sample_id);
    j.at("labels").get_to(annotation.labels);
    annotation.submitted_at = j.value("submitted_at", std::string{});
}

void to_json(json& j, const SampleScore& score) {
    j = json{{"sample_id", score.sample_id},
             {"posteriors", score.posteriors},
             {"verdicts", score.verdicts},
             {"correct_count", score.correct_count},
             {"line_count", score.line_count},
             {"score", score.score}};
}

void from_json(const json& j, SampleScore& score) {
    j.at("sample_id").get_to(score.sample_id);
    j.at("posteriors").get_to(score.posteriors);
    j.at("verdicts").get_to(score.verdicts);
    j.at("correct_count").get_to(score.correct_count);
    j.at("line_count").get_to(score.line_count);
    j.at("score").get_to(score.score);
}

void to_json(json& j, const ScoredSample& scored) {
    j = json{{"task_id", scored.task_id},
             {"score", scored.score},
             {"reliabilities_used", scored.reliabilities_used}};
}

void from_json(const json& j, ScoredSample& scored) {
    j.at("task_id").get_to(scored.task_id);
    j.at("score").get_to(scored.score);
    j.at("reliabilities_used").get_to(scored.reliabilities_used);
}

void to_json(json& j, const ProfileChange& change) {
    j = json{{"annotator_id", change.annotator_id},
             {"old", change.old_reliability},
             {"new", change.new_reliability},
             {"update_count", change.update_count},
             {"cause", std::string(to_string(change.cause))},
             {"ref", change.ref}};
}

void from_json(const json& j, ProfileChange& change) {
    j.at("annotator_id").get_to(change.annotator_id);
    j.at("old").get_to(change.old_reliability);
    j.at("new").get_to(change.new_reliability);
    j.at("update_count").get_to(change.update_count);
    change.cause = update_cause_from_string(j.at("cause").get<std::string>());
    change.ref = j.value("ref", std::string{});
}

void to_json(json& j, const AnnotatorProfile& profile) {
    j = json{{"annotator_id", profile.annotator_id},
             {"reliability", profile.reliability.value()},
             {"update_count", profile.update_count}};
}

void from_json(const json& j, AnnotatorProfile& profile) {
    j.at("annotator_id").get_to(profile.annotator_id);
    const double p = j.at("reliability").get<double>();
    if (!(p > 0.0 && p < 1.0)) {
        throw Error(ErrorCode::kSchema, "stored reliability outside (0, 1)");
    }
    // Stored values are already clamped; keep them bit-exact.
    profile.reliability = Probability(p, std::min({p, 1.0 - p, kDefaultProbClamp}));
    j.at("update_count").get_to(profile.update_count);
    profile.history.clear();
}

void to_json(json& j, const Observation& obs) {
    j = json{{"labels", obs.labels}, {"truth", obs.truth}};
}

void from_json(const json& j, Observation& obs) {
    j.at("labels").get_to(obs.labels);
    obs.truth = j.contains("truth") ? j.at("truth").get<Label>() : Label::kCorrect;
    if (obs.truth == Label::kSkip) throw Error(ErrorCode::kSchema, "observation truth may not be skip");
}

json to_json(const SparseEstimate& estimate) {
    std::vector<double> p_tilde(estimate.p_tilde.data(),
                                estimate.p_tilde.data() + estimate.p_tilde.size());
    json j{{"p_tilde", p_tilde},
           {"reliabilities", estimate.reliabilities},
           {"objective_value", estimate.objective_value},
           {"iterations", estimate.iterations},
           {"converged", estimate.converged},
           {"step_size", estimate.step_size},
           {"lipschitz", estimate.lipschitz},
           {"observation_count", estimate.observation_count}};
    j["duality_gap"] = estimate.duality_gap ? json(*estimate.duality_gap) : json(nullptr);
    return j;
}

}  // namespace crlhf
