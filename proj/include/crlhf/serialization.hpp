#pragma once

// JSON mappings for the domain records. Labels are written as 1, -1 and 0
// (skip); on input the string "skip" and null are also accepted as skip.
// Field errors surface as crlhf::Error{kSchema}.

#include <nlohmann/json.hpp>

#include "crlhf/error.hpp"
#include "crlhf/pipeline.hpp"
#include "crlhf/sparse_estimator.hpp"

namespace crlhf {

void to_json(nlohmann::json& j, const Label& label);
void from_json(const nlohmann::json& j, Label& label);

void to_json(nlohmann::json& j, const CodeSample& sample);
void from_json(const nlohmann::json& j, CodeSample& sample);

void to_json(nlohmann::json& j, const Task& task);
void from_json(const nlohmann::json& j, Task& task);

void to_json(nlohmann::json& j, const Annotation& annotation);
void from_json(const nlohmann::json& j, Annotation& annotation);

void to_json(nlohmann::json& j, const SampleScore& score);
void from_json(const nlohmann::json& j, SampleScore& score);

void to_json(nlohmann::json& j, const ScoredSample& scored);
void from_json(const nlohmann::json& j, ScoredSample& scored);

void to_json(nlohmann::json& j, const ProfileChange& change);
void from_json(const nlohmann::json& j, ProfileChange& change);

void to_json(nlohmann::json& j, const AnnotatorProfile& profile);
void from_json(const nlohmann::json& j, AnnotatorProfile& profile);

void to_json(nlohmann::json& j, const Observation& obs);
void from_json(const nlohmann::json& j, Observation& obs);

nlohmann::json to_json(const SparseEstimate& estimate);

/// Parses with nlohmann and rethrows its exceptions as kSchema, with context.
template <typename T>
T parse_record(const nlohmann::json& j, const std::string& context) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kSchema, context + ": " + e.what());
    }
}

}  // namespace crlhf
