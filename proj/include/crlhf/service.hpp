#pragma once

// HTTP surface over an Engine. Each endpoint is a plain member function that
// returns a status and JSON body, so handlers can be exercised without a
// socket; bind() wires them into an httplib server under /v1.

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "crlhf/engine.hpp"
#include "crlhf/error.hpp"

namespace httplib {
class Server;
}

namespace crlhf {

struct ServiceConfig {
    std::filesystem::path export_dir = "exports";
    std::optional<std::filesystem::path> static_dir;  // mounted at / when set
};

struct Response {
    int status = 200;
    nlohmann::json body;  // null for 204
};

int http_status(ErrorCode code) noexcept;

/// {"error": <code>, "message": <text>}
Response error_response(const Error& error);

class Service {
public:
    Service(Engine& engine, ServiceConfig config = {});

    Response health() const;
    Response next_assignment(const std::string& annotator_id);
    Response submit_annotation(const nlohmann::json& body);
    Response sample_score(const std::string& sample_id) const;
    Response annotator_reliability(const std::string& annotator_id) const;
    /// Optional body {"name": "<file name>"}; the file is written inside
    /// export_dir.
    Response export_rewards(const nlohmann::json& body);
    Response register_task(const nlohmann::json& body);
    Response close_round(const std::string& task_id);

    void bind(httplib::Server& server);

private:
    Engine& engine_;
    ServiceConfig config_;
};

}  // namespace crlhf
