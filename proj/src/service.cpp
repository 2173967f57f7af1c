#include "crlhf/service.hpp"

#include "crlhf/serialization.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

namespace crlhf {

namespace {

using json = nlohmann::json;

template <typename Fn>
Response guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        return error_response(e);
    } catch (const json::exception& e) {
        return error_response(Error(ErrorCode::kSchema, e.what()));
    }
}

json parse_body(const std::string& text) {
    if (text.empty()) return json::object();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::kSchema, std::string("request body is not JSON: ") + e.what());
    }
}

void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body.dump(), "application/json");
}

}  // namespace

int http_status(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::kInvalidArgument:
        case ErrorCode::kShapeMismatch:
        case ErrorCode::kEmptySample:
        case ErrorCode::kSchema:
        case ErrorCode::kNotSingleObservation:
            return 400;
        case ErrorCode::kUnknownEntity:
            return 404;
        case ErrorCode::kDuplicate:
        case ErrorCode::kRoundClosed:
            return 409;
        case ErrorCode::kRoundOpen:
            return 202;
        default:
            return 500;
    }
}

Response error_response(const Error& error) {
    return {http_status(error.code()),
            json{{"error", std::string(to_string(error.code()))}, {"message", error.what()}}};
}

Service::Service(Engine& engine, ServiceConfig config)
    : engine_(engine), config_(std::move(config)) {}

Response Service::health() const {
    return {200, json{{"status", "ok"}, {"last_sequence", engine_.last_sequence()}}};
}

Response Service::next_assignment(const std::string& annotator_id) {
    return guarded([&]() -> Response {
        const auto a = engine_.next_assignment(annotator_id);
        if (!a) return {204, nullptr};
        // Annotator-facing: no honeypot flag and no ground truth.
        return {200, json{{"annotator_id", a->annotator_id},
                          {"task_id", a->task_id},
                          {"description", a->description},
                          {"sample_id", a->sample_id},
                          {"lines", a->lines},
                          {"progress", {{"completed", a->completed}, {"total", a->total}}}}};
    });
}

Response Service::submit_annotation(const json& body) {
    return guarded([&]() -> Response {
        auto annotation = parse_record<Annotation>(body, "annotation");
        annotation.submitted_at.clear();  // stamped by the server
        const auto result = engine_.submit_annotation(std::move(annotation));
        json out{{"sequence", result.sequence}, {"annotation_id", result.annotation_id}};
        if (result.scored) out["scored"] = *result.scored;
        return {201, out};
    });
}

Response Service::sample_score(const std::string& sample_id) const {
    return guarded([&]() -> Response {
        const auto report = engine_.sample_report(sample_id);
        switch (report.status) {
            case SampleStatus::kScored: {
                json out = report.scored->score;
                out["status"] = "scored";
                out["task_id"] = report.task_id;
                out["reliabilities_used"] = report.scored->reliabilities_used;
                return {200, out};
            }
            case SampleStatus::kHoneypot:
                return {200, json{{"sample_id", sample_id},
                                  {"task_id", report.task_id},
                                  {"status", "not-scored"},
                                  {"reason", "honeypot"}}};
            case SampleStatus::kPending:
                break;
        }
        return {202, json{{"sample_id", sample_id},
                          {"task_id", report.task_id},
                          {"status", "pending"},
                          {"error", std::string(to_string(ErrorCode::kRoundOpen))},
                          {"annotation_count", report.annotation_count}}};
    });
}

Response Service::annotator_reliability(const std::string& annotator_id) const {
    return guarded([&]() -> Response {
        const auto profile = engine_.profile(annotator_id);
        if (!profile) {
            throw Error(ErrorCode::kUnknownEntity, "unknown annotator '" + annotator_id + "'");
        }
        return {200, json(*profile)};
    });
}

Response Service::export_rewards(const json& body) {
    return guarded([&]() -> Response {
        std::string name =
            body.is_object() ? body.value("name", std::string{}) : std::string{};
        if (name.empty()) name = "rewards-" + std::to_string(engine_.last_sequence()) + ".jsonl";
        const std::filesystem::path file(name);
        if (file.has_parent_path() || file.filename() != file || name == "." || name == "..") {
            throw Error(ErrorCode::kInvalidArgument, "export name must be a plain file name");
        }
        std::error_code ec;
        std::filesystem::create_directories(config_.export_dir, ec);
        const auto result = engine_.export_rewards(config_.export_dir / file);
        return {201, json{{"destination", result.destination.string()}, {"count", result.count}}};
    });
}

Response Service::register_task(const json& body) {
    return guarded([&]() -> Response {
        const auto sequence = engine_.register_task(parse_record<Task>(body, "task"));
        return {201, json{{"sequence", sequence}, {"task_id", body.at("task_id")}}};
    });
}

Response Service::close_round(const std::string& task_id) {
    return guarded([&]() -> Response {
        const auto scored = engine_.close_round(task_id);
        return {200, json{{"task_id", task_id}, {"scored", scored}}};
    });
}

void Service::bind(httplib::Server& server) {
    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
        send(res, health());
    });
    server.Get(R"(/v1/annotators/([^/]+)/next-assignment)",
               [this](const httplib::Request& req, httplib::Response& res) {
                   send(res, next_assignment(req.matches[1]));
               });
    server.Get(R"(/v1/annotators/([^/]+)/reliability)",
               [this](const httplib::Request& req, httplib::Response& res) {
                   send(res, annotator_reliability(req.matches[1]));
               });
    server.Post("/v1/annotations", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, guarded([&] { return submit_annotation(parse_body(req.body)); }));
    });
    server.Get(R"(/v1/samples/(.+)/score)",
               [this](const httplib::Request& req, httplib::Response& res) {
                   send(res, sample_score(req.matches[1]));
               });
    server.Post("/v1/exports", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, guarded([&] { return export_rewards(parse_body(req.body)); }));
    });
    server.Post("/v1/tasks", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, guarded([&] { return register_task(parse_body(req.body)); }));
    });
    server.Post(R"(/v1/tasks/([^/]+)/close)",
                [this](const httplib::Request& req, httplib::Response& res) {
                    send(res, close_round(req.matches[1]));
                });
    if (config_.static_dir) server.set_mount_point("/", config_.static_dir->string());
}

}  // namespace crlhf
