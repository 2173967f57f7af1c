#include "crlhf/simulator.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "crlhf/engine.hpp"
#include "crlhf/error.hpp"
#include "crlhf/random.hpp"

namespace crlhf {

namespace {

using json = nlohmann::json;

constexpr const char* kSyntheticTimestamp = "1970-01-01T00:00:00Z";

std::string indexed_id(const char* prefix, std::size_t index) {
    return fmt::format("{}{:03d}", prefix, index);
}

struct LineTally {
    std::size_t lines = 0;
    std::size_t fused_correct = 0;
    std::size_t majority_correct = 0;
    std::map<std::string, std::size_t> annotator_correct;
    double score_sum = 0.0;
    std::size_t samples = 0;
    std::map<std::size_t, double> pass_at_k_sum;
    std::size_t tasks = 0;
    std::size_t top_reward_pass = 0;
};

std::vector<std::size_t> pass_at_k_grid(std::size_t n) {
    std::set<std::size_t> ks{1, std::min<std::size_t>(5, n), n};
    return {ks.begin(), ks.end()};
}

void tally_task(const Task& task, const std::vector<Annotation>& annotations,
                const std::map<std::string, SampleScore>& scores, LineTally& tally) {
    const auto& truth = *task.ground_truth;
    std::size_t fully_correct = 0;
    double best_score = -1.0;
    bool best_is_correct = false;
    for (std::size_t s = 0; s < task.samples.size(); ++s) {
        const auto& sample = task.samples[s];
        const auto& score = scores.at(sample.sample_id);
        const bool all_correct = std::all_of(truth[s].begin(), truth[s].end(),
                                             [](Label l) { return l == Label::kCorrect; });
        if (all_correct) ++fully_correct;
        if (score.score > best_score) {
            best_score = score.score;
            best_is_correct = all_correct;
        }
        tally.score_sum += score.score;
        ++tally.samples;

        for (std::size_t line = 0; line < sample.lines.size(); ++line) {
            const bool line_ok = truth[s][line] == Label::kCorrect;
            ++tally.lines;
            if (score.verdicts[line] == line_ok) ++tally.fused_correct;
            int votes = 0;
            for (const auto& a : annotations) {
                if (a.sample_id != sample.sample_id) continue;
                votes += sign(a.labels[line]);
                if (a.labels[line] == truth[s][line]) ++tally.annotator_correct[a.annotator_id];
            }
            if ((votes > 0) == line_ok) ++tally.majority_correct;
        }
    }
    for (std::size_t k : pass_at_k_grid(task.samples.size())) {
        tally.pass_at_k_sum[k] += pass_at_k({task.samples.size(), fully_correct, k});
    }
    ++tally.tasks;
    if (best_is_correct) ++tally.top_reward_pass;
}

std::vector<Observation> honeypot_observations(const std::string& annotator_id,
                                               const std::vector<Task>& honeypots,
                                               const std::vector<std::vector<Annotation>>& anns) {
    std::vector<Observation> out;
    for (std::size_t t = 0; t < honeypots.size(); ++t) {
        const auto& truth = *honeypots[t].ground_truth;
        for (const auto& a : anns[t]) {
            if (a.annotator_id != annotator_id) continue;
            std::size_t s = 0;
            while (honeypots[t].samples[s].sample_id != a.sample_id) ++s;
            for (std::size_t line = 0; line < a.labels.size(); ++line) {
                if (a.labels[line] == Label::kSkip) continue;
                out.push_back({{a.labels[line]}, truth[s][line]});
            }
        }
    }
    return out;
}

}  // namespace

void TaskSpec::validate() const {
    if (samples_per_task == 0) throw Error(ErrorCode::kInvalidArgument, "samples_per_task must be positive");
    if (lines_per_sample == 0) throw Error(ErrorCode::kInvalidArgument, "lines_per_sample must be positive");
    if (!(error_rate >= 0.0 && error_rate <= 1.0)) {
        throw Error(ErrorCode::kInvalidArgument, "error_rate must lie in [0, 1]");
    }
}

std::vector<double> evenly_spaced(std::size_t n, double lo, double hi) {
    std::vector<double> out(n, lo);
    for (std::size_t i = 1; i < n; ++i) {
        out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return out;
}

Task synth_task(const std::string& task_id, const TaskSpec& spec, bool honeypot,
                std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Task task;
    task.task_id = task_id;
    task.description = fmt::format("Synthetic problem {}", task_id);
    task.is_honeypot = honeypot;
    std::vector<std::vector<Label>> truth;
    for (std::size_t s = 0; s < spec.samples_per_task; ++s) {
        CodeSample sample;
        sample.sample_id = fmt::format("{}/s{:02d}", task_id, s);
        sample.task_id = task_id;
        sample.generator_meta = {{"model", "mock"}, {"temperature", "0.8"}};
        std::vector<Label> sample_truth;
        for (std::size_t line = 0; line < spec.lines_per_sample; ++line) {
            const bool wrong = rng.bernoulli(spec.error_rate);
            sample_truth.push_back(wrong ? Label::kWrong : Label::kCorrect);
            sample.lines.push_back(fmt::format("step_{}()  # line {}", line, line + 1));
        }
        task.samples.push_back(std::move(sample));
        truth.push_back(std::move(sample_truth));
    }
    task.ground_truth = std::move(truth);
    return task;
}

Annotation annotate(const SyntheticAnnotator& annotator, const Task& task,
                    std::size_t sample_index) {
    if (!task.ground_truth) {
        throw Error(ErrorCode::kInvalidArgument, "synthetic annotation needs ground truth");
    }
    if (sample_index >= task.samples.size()) {
        throw Error(ErrorCode::kUnknownEntity, "sample index out of range");
    }
    Rng rng(derive_seed(annotator.rng_seed, task.task_id, 0));
    // Skip the draws of earlier samples so each sample has a fixed position in the stream.
    for (std::size_t s = 0; s < sample_index; ++s) {
        for (std::size_t line = 0; line < task.samples[s].lines.size(); ++line) rng.next();
    }
    const auto& truth = (*task.ground_truth)[sample_index];
    Annotation ann;
    ann.annotator_id = annotator.annotator_id;
    ann.sample_id = task.samples[sample_index].sample_id;
    ann.annotation_id = ann.annotator_id + ":" + ann.sample_id;
    ann.submitted_at = kSyntheticTimestamp;
    for (Label t : truth) {
        const bool honest = rng.bernoulli(annotator.true_reliability);
        ann.labels.push_back(honest ? t : static_cast<Label>(-sign(t)));
    }
    return ann;
}

std::vector<Annotation> annotate(const SyntheticAnnotator& annotator, const Task& task) {
    std::vector<Annotation> out;
    out.reserve(task.samples.size());
    for (std::size_t s = 0; s < task.samples.size(); ++s) out.push_back(annotate(annotator, task, s));
    return out;
}

std::string_view to_string(CalibrationMethod method) noexcept {
    return method == CalibrationMethod::kSequential ? "sequential" : "one-shot";
}

CalibrationMethod calibration_method_from_string(std::string_view text) {
    if (text == "sequential") return CalibrationMethod::kSequential;
    if (text == "one-shot") return CalibrationMethod::kOneShot;
    throw Error(ErrorCode::kInvalidArgument,
                "calibration must be 'sequential' or 'one-shot', got '" + std::string(text) + "'");
}

void ExperimentConfig::validate() const {
    if (true_reliabilities.empty()) {
        throw Error(ErrorCode::kInvalidArgument, "an experiment needs at least one annotator");
    }
    for (double p : true_reliabilities) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw Error(ErrorCode::kInvalidArgument, "true reliabilities must lie in [0, 1]");
        }
    }
    task_spec.validate();
    pipeline.validate();
    solver.validate();
}

json to_json(const ExperimentConfig& config) {
    return json{{"seed", config.seed},
                {"true_reliabilities", config.true_reliabilities},
                {"honeypot_tasks", config.honeypot_tasks},
                {"scored_tasks", config.scored_tasks},
                {"samples_per_task", config.task_spec.samples_per_task},
                {"lines_per_sample", config.task_spec.lines_per_sample},
                {"error_rate", config.task_spec.error_rate},
                {"calibration", std::string(to_string(config.calibration))},
                {"lambda", config.pipeline.reliability.lambda},
                {"nu", config.pipeline.reliability.nu_init},
                {"consensus_mode", config.pipeline.reliability.consensus_mode ==
                                           ConsensusMode::kLeaveOneOut
                                       ? "leave-one-out"
                                       : "include-self"},
                {"tau", config.pipeline.fusion.tau},
                {"clamp_delta", config.pipeline.fusion.prob_clamp},
                {"gamma", config.solver.gamma}};
}

double ExperimentReport::max_individual_accuracy() const {
    double best = 0.0;
    for (const auto& a : annotators) best = std::max(best, a.raw_accuracy);
    return best;
}

std::vector<double> ExperimentReport::per_annotator_accuracy() const {
    std::vector<double> out;
    for (const auto& a : annotators) out.push_back(a.raw_accuracy);
    return out;
}

std::vector<double> ExperimentReport::reliability_error() const {
    std::vector<double> out;
    for (const auto& a : annotators) out.push_back(a.calibration_error);
    return out;
}

std::vector<SyntheticAnnotator> make_annotators(const ExperimentConfig& config) {
    std::vector<SyntheticAnnotator> out;
    for (std::size_t i = 0; i < config.true_reliabilities.size(); ++i) {
        out.push_back({indexed_id("a", i), config.true_reliabilities[i],
                       derive_seed(config.seed, "annotator", i)});
    }
    return out;
}

ExperimentReport run_experiment(const ExperimentConfig& config, Engine* recorder) {
    config.validate();
    const auto annotators = make_annotators(config);

    std::vector<Task> honeypots;
    std::vector<Task> scored;
    for (std::size_t i = 0; i < config.honeypot_tasks; ++i) {
        honeypots.push_back(synth_task(indexed_id("hp", i), config.task_spec, true,
                                       derive_seed(config.seed, "task", i)));
    }
    for (std::size_t i = 0; i < config.scored_tasks; ++i) {
        scored.push_back(synth_task(indexed_id("task", i), config.task_spec, false,
                                    derive_seed(config.seed, "task", config.honeypot_tasks + i)));
    }

    // Sample-major, annotator-id order: the order the engine receives them.
    auto annotations_of = [&](const Task& task) {
        std::vector<Annotation> out;
        for (std::size_t s = 0; s < task.samples.size(); ++s) {
            for (const auto& a : annotators) out.push_back(annotate(a, task, s));
        }
        return out;
    };

    ProfileBook profiles;
    auto current_profiles = [&]() -> ProfileBook {
        return recorder ? recorder->state().profiles : profiles;
    };

    ExperimentReport report;
    report.seed = config.seed;
    report.config = to_json(config);

    std::vector<std::vector<Annotation>> honeypot_anns;
    for (const auto& task : honeypots) {
        auto anns = annotations_of(task);
        report.honeypot_lines += task.samples.size() * config.task_spec.lines_per_sample;
        if (recorder) {
            recorder->register_task(task);
            for (const auto& a : anns) recorder->submit_annotation(a);
        } else {
            profiles = run_round(task, anns, std::move(profiles), config.pipeline).profiles;
        }
        honeypot_anns.push_back(std::move(anns));
    }

    if (config.calibration == CalibrationMethod::kOneShot) {
        std::map<std::string, double> fitted;
        for (const auto& a : annotators) {
            const auto obs = honeypot_observations(a.annotator_id, honeypots, honeypot_anns);
            if (obs.empty()) continue;
            fitted.emplace(a.annotator_id,
                           fit(obs, config.solver, config.pipeline.reliability.prob_clamp)
                               .reliabilities.front());
        }
        if (recorder) {
            recorder->seed_profiles(fitted);
        } else {
            profiles =
                seed_profiles(std::move(profiles), fitted, config.pipeline.reliability).profiles;
        }
    }

    const ProfileBook calibrated = current_profiles();
    LineTally tally;
    for (const auto& task : scored) {
        const auto anns = annotations_of(task);
        std::map<std::string, SampleScore> scores;
        if (recorder) {
            recorder->register_task(task);
            for (const auto& a : anns) recorder->submit_annotation(a);
            for (auto& s : recorder->close_round(task.task_id)) {
                scores.emplace(s.score.sample_id, std::move(s.score));
            }
        } else {
            auto round = run_round(task, anns, std::move(profiles), config.pipeline);
            for (auto& s : *round.scores) scores.emplace(s.score.sample_id, std::move(s.score));
            profiles = std::move(round.profiles);
        }
        tally_task(task, anns, scores, tally);
    }
    const ProfileBook final_profiles = current_profiles();

    report.scored_lines = tally.lines;
    if (tally.lines > 0) {
        const auto lines = static_cast<double>(tally.lines);
        report.fused_accuracy = static_cast<double>(tally.fused_correct) / lines;
        report.majority_accuracy = static_cast<double>(tally.majority_correct) / lines;
    }
    if (tally.samples > 0) report.mean_aligned_score = tally.score_sum / static_cast<double>(tally.samples);
    if (tally.tasks > 0) {
        const auto tasks = static_cast<double>(tally.tasks);
        for (const auto& [k, sum] : tally.pass_at_k_sum) report.pass_at_k.push_back({k, sum / tasks});
        report.top_reward_pass_rate = static_cast<double>(tally.top_reward_pass) / tasks;
    }

    for (const auto& a : annotators) {
        AnnotatorReport row;
        row.annotator_id = a.annotator_id;
        row.true_reliability = a.true_reliability;
        const auto cal = calibrated.find(a.annotator_id);
        row.calibrated_reliability = cal != calibrated.end()
                                         ? cal->second.reliability.value()
                                         : config.pipeline.reliability.nu_init;
        row.calibration_error = std::abs(row.calibrated_reliability - row.true_reliability);
        if (tally.lines > 0) {
            const auto it = tally.annotator_correct.find(a.annotator_id);
            const std::size_t correct = it == tally.annotator_correct.end() ? 0 : it->second;
            row.raw_accuracy = static_cast<double>(correct) / static_cast<double>(tally.lines);
        }
        const auto fin = final_profiles.find(a.annotator_id);
        row.final_reliability = fin != final_profiles.end() ? fin->second.reliability.value()
                                                            : row.calibrated_reliability;
        report.annotators.push_back(row);
    }
    return report;
}

std::string report_records(const ExperimentReport& report) {
    std::string out;
    auto emit = [&out](const json& j) { out += j.dump() + "\n"; };
    emit(json{{"record", "config"}, {"config", report.config}});
    for (const auto& a : report.annotators) {
        emit(json{{"record", "annotator"},
                  {"annotator_id", a.annotator_id},
                  {"true_reliability", a.true_reliability},
                  {"calibrated_reliability", a.calibrated_reliability},
                  {"calibration_error", a.calibration_error},
                  {"raw_accuracy", a.raw_accuracy},
                  {"final_reliability", a.final_reliability}});
    }
    emit(json{{"record", "summary"},
              {"seed", report.seed},
              {"honeypot_lines", report.honeypot_lines},
              {"scored_lines", report.scored_lines},
              {"fused_accuracy", report.fused_accuracy},
              {"majority_accuracy", report.majority_accuracy},
              {"max_individual_accuracy", report.max_individual_accuracy()},
              {"mean_aligned_score", report.mean_aligned_score}});
    for (const auto& row : report.pass_at_k) {
        emit(json{{"record", "pass_at_k"}, {"k", row.k}, {"baseline", row.baseline}});
    }
    emit(json{{"record", "top_reward"}, {"pass_rate", report.top_reward_pass_rate}});
    return out;
}

std::string report_table(const ExperimentReport& report) {
    std::string out;
    out += fmt::format("# simulate {}\n", report.config.dump());
    out += fmt::format("honeypot lines: {}   scored lines: {}\n\n", report.honeypot_lines,
                       report.scored_lines);
    out += fmt::format("{:<10} {:>8} {:>12} {:>10} {:>10} {:>10}\n", "annotator", "p_true",
                       "p_calibrated", "|error|", "accuracy", "p_final");
    for (const auto& a : report.annotators) {
        out += fmt::format("{:<10} {:>8.4f} {:>12.4f} {:>10.4f} {:>10.4f} {:>10.4f}\n",
                           a.annotator_id, a.true_reliability, a.calibrated_reliability,
                           a.calibration_error, a.raw_accuracy, a.final_reliability);
    }
    out += "\nline verdict accuracy\n";
    out += fmt::format("{:<26} {:>10}\n", "method", "accuracy");
    out += fmt::format("{:<26} {:>10.4f}\n", "bayes fusion", report.fused_accuracy);
    out += fmt::format("{:<26} {:>10.4f}\n", "majority vote", report.majority_accuracy);
    out += fmt::format("{:<26} {:>10.4f}\n", "best single annotator",
                       report.max_individual_accuracy());
    const auto accs = report.per_annotator_accuracy();
    const double mean = accs.empty() ? 0.0
                                     : std::accumulate(accs.begin(), accs.end(), 0.0) /
                                           static_cast<double>(accs.size());
    out += fmt::format("{:<26} {:>10.4f}\n", "mean single annotator", mean);

    out += "\nsample selection (fully correct samples)\n";
    out += fmt::format("{:<26} {:>10}\n", "selection", "pass rate");
    for (const auto& row : report.pass_at_k) {
        out += fmt::format("{:<26} {:>10.4f}\n", fmt::format("random Pass@{}", row.k), row.baseline);
    }
    out += fmt::format("{:<26} {:>10.4f}\n", "highest aligned score", report.top_reward_pass_rate);
    out += fmt::format("\nmean aligned score: {:.4f}\n", report.mean_aligned_score);
    return out;
}

void PassAtKQuery::validate() const {
    if (n == 0) throw Error(ErrorCode::kInvalidArgument, "pass@k needs n >= 1");
    if (c > n) throw Error(ErrorCode::kInvalidArgument, "pass@k needs c <= n");
    if (k == 0 || k > n) throw Error(ErrorCode::kInvalidArgument, "pass@k needs 1 <= k <= n");
}

double pass_at_k(const PassAtKQuery& q) {
    q.validate();
    if (q.c == 0) return 0.0;
    if (q.k == 1) return static_cast<double>(q.c) / static_cast<double>(q.n);
    if (q.n - q.c < q.k) return 1.0;
    // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k / i)
    double miss = 1.0;
    for (std::uint64_t i = q.n - q.c + 1; i <= q.n; ++i) {
        miss *= 1.0 - static_cast<double>(q.k) / static_cast<double>(i);
    }
    return 1.0 - miss;
}

double pass_at_k_mc(const PassAtKQuery& q, std::uint64_t trials, std::uint64_t seed) {
    q.validate();
    if (trials == 0) throw Error(ErrorCode::kInvalidArgument, "pass@k Monte Carlo needs trials >= 1");
    Rng rng(derive_seed(seed, "pass-at-k", 0));
    std::vector<std::uint64_t> pool(q.n);
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<std::uint64_t> swaps(q.k);
    std::uint64_t hits = 0;
    for (std::uint64_t t = 0; t < trials; ++t) {
        // Partial Fisher-Yates; indices below c are the passing samples.
        bool hit = false;
        for (std::uint64_t i = 0; i < q.k; ++i) {
            const std::uint64_t j = i + rng.below(q.n - i);
            std::swap(pool[i], pool[j]);
            swaps[i] = j;
            if (pool[i] < q.c) hit = true;
        }
        for (std::uint64_t i = q.k; i-- > 0;) std::swap(pool[i], pool[swaps[i]]);
        if (hit) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
}

}  // namespace crlhf
