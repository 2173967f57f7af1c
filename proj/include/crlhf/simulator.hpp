#pragma once

/** \file simulator.hpp
 *  \brief Synthetic annotators and tasks for checking the pipeline's
 *         statistical behavior, plus the Pass@k estimator.
 *
 * Synthetic annotators follow the symmetric noise model: on every line they
 * report the truth with probability true_reliability, independently across
 * lines and annotators. Every output is a pure function of (config, seed).
 */

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crlhf/pipeline.hpp"
#include "crlhf/sparse_estimator.hpp"

namespace crlhf {

class Engine;

struct SyntheticAnnotator {
    std::string annotator_id;
    double true_reliability = 0.7;  // in [0, 1]; not clamped
    std::uint64_t rng_seed = 0;
};

struct TaskSpec {
    std::size_t samples_per_task = 10;
    std::size_t lines_per_sample = 10;
    double error_rate = 0.2;

    void validate() const;
};

/// Each line independently wrong with probability error_rate. Ground truth
/// is attached for honeypot and scored tasks alike (the simulator needs it
/// to measure accuracy); only honeypots use it in the pipeline.
Task synth_task(const std::string& task_id, const TaskSpec& spec, bool honeypot,
                std::uint64_t seed);

/// Annotation of one sample. Draws come from the annotator's stream for this
/// task, so the result does not depend on call order.
Annotation annotate(const SyntheticAnnotator& annotator, const Task& task,
                    std::size_t sample_index);

std::vector<Annotation> annotate(const SyntheticAnnotator& annotator, const Task& task);

enum class CalibrationMethod {
    kSequential,  // log-odds steps per honeypot line
    kOneShot,     // per-annotator L1 logistic fit on all honeypot lines
};

std::string_view to_string(CalibrationMethod method) noexcept;
CalibrationMethod calibration_method_from_string(std::string_view text);

/// n evenly spaced values from lo to hi inclusive.
std::vector<double> evenly_spaced(std::size_t n, double lo, double hi);

struct ExperimentConfig {
    std::vector<double> true_reliabilities = evenly_spaced(10, 0.55, 0.9);
    TaskSpec task_spec;
    std::size_t honeypot_tasks = 2;
    std::size_t scored_tasks = 13;
    PipelineConfig pipeline;
    CalibrationMethod calibration = CalibrationMethod::kOneShot;
    SolverConfig solver;
    std::uint64_t seed = 42;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);

struct AnnotatorReport {
    std::string annotator_id;
    double true_reliability = 0.0;
    double calibrated_reliability = 0.0;  // after the honeypot phase
    double calibration_error = 0.0;       // |calibrated - true|
    double raw_accuracy = 0.0;            // on scored lines
    double final_reliability = 0.0;
};

struct PassAtKRow {
    std::size_t k = 1;
    double baseline = 0.0;  // unbiased Pass@k over all samples
};

struct ExperimentReport {
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::size_t honeypot_lines = 0;
    std::size_t scored_lines = 0;
    double fused_accuracy = 0.0;
    double majority_accuracy = 0.0;
    double mean_aligned_score = 0.0;
    std::vector<AnnotatorReport> annotators;
    std::vector<PassAtKRow> pass_at_k;
    double top_reward_pass_rate = 0.0;  // highest-s sample fully correct

    double max_individual_accuracy() const;
    std::vector<double> per_annotator_accuracy() const;
    std::vector<double> reliability_error() const;
};

std::vector<SyntheticAnnotator> make_annotators(const ExperimentConfig& config);

/// Honeypot calibration, then scored rounds. With `recorder`, every task and
/// annotation goes through the store-backed engine instead of the in-memory
/// pipeline; both routes produce the same report.
ExperimentReport run_experiment(const ExperimentConfig& config, Engine* recorder = nullptr);

/// Newline-delimited records: config, one per annotator, summary, pass@k.
std::string report_records(const ExperimentReport& report);

/// Human-readable tables.
std::string report_table(const ExperimentReport& report);

struct PassAtKQuery {
    std::uint64_t n = 1;
    std::uint64_t c = 0;
    std::uint64_t k = 1;

    void validate() const;
};

/// 1 - C(n-c, k) / C(n, k), as a product of ratios.
double pass_at_k(const PassAtKQuery& q);

/// Fraction of `trials` draws of k out of n (without replacement) that hit
/// at least one of the c passing samples.
double pass_at_k_mc(const PassAtKQuery& q, std::uint64_t trials, std::uint64_t seed);

}  // namespace crlhf
