#include "cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "crlhf/engine.hpp"
#include "crlhf/error.hpp"
#include "crlhf/serialization.hpp"
#include "crlhf/simulator.hpp"
#include "crlhf/service.hpp"

#include <httplib.h>

namespace crlhf::cli {

namespace {

using json = nlohmann::json;

// Flags that may also come from the environment.
const std::vector<std::pair<std::string, std::string>> kEnvFlags = {
    {"--config", "CRLHF_CONFIG"},   {"--store", "CRLHF_STORE"},
    {"--seed", "CRLHF_SEED"},       {"--lambda", "CRLHF_LAMBDA"},
    {"--tau", "CRLHF_TAU"},         {"--nu", "CRLHF_NU"},
    {"--gamma", "CRLHF_GAMMA"},     {"--clamp-delta", "CRLHF_CLAMP_DELTA"},
    {"--prior", "CRLHF_PRIOR"},     {"--eta", "CRLHF_ETA"},
    {"--tol", "CRLHF_TOL"},         {"--max-iter", "CRLHF_MAX_ITER"},
    {"--consensus", "CRLHF_CONSENSUS"}, {"--listen", "CRLHF_LISTEN"},
};

struct Globals {
    std::string config;
    std::string store;
    std::uint64_t seed = 42;
    double lambda = 1.0;
    double tau = 0.5;
    double nu = 0.7;
    double gamma = 0.1;
    double clamp_delta = kDefaultProbClamp;
    double prior = 0.5;
    double eta = 0.0;  // 0: use 1/L
    double tol = 1e-8;
    int max_iter = 10000;
    std::string consensus = "leave-one-out";
    std::string listen = "127.0.0.1:8080";
    bool as_json = false;

    PipelineConfig pipeline() const {
        PipelineConfig p;
        p.fusion.tau = tau;
        p.fusion.prob_clamp = clamp_delta;
        p.fusion.prior = prior;
        p.reliability.lambda = lambda;
        p.reliability.nu_init = nu;
        p.reliability.prob_clamp = clamp_delta;
        p.reliability.consensus_mode =
            consensus == "include-self" ? ConsensusMode::kIncludeSelf : ConsensusMode::kLeaveOneOut;
        p.validate();
        return p;
    }

    SolverConfig solver() const {
        SolverConfig s;
        s.gamma = gamma;
        if (eta > 0.0) s.eta = eta;
        s.tol = tol;
        s.max_iter = max_iter;
        s.validate();
        return s;
    }

    json effective() const {
        return json{{"store", store},
                    {"seed", seed},
                    {"lambda", lambda},
                    {"tau", tau},
                    {"nu", nu},
                    {"gamma", gamma},
                    {"clamp_delta", clamp_delta},
                    {"prior", prior},
                    {"eta", eta > 0.0 ? json(eta) : json(nullptr)},
                    {"tol", tol},
                    {"max_iter", max_iter},
                    {"consensus", consensus},
                    {"listen", listen}};
    }
};

class Printer {
public:
    Printer(std::ostream& out, bool as_json) : out_(out), json_(as_json) {}

    bool json_mode() const { return json_; }

    void header(const std::string& command, const json& config, const json& extra = {}) {
        if (json_) {
            json rec{{"record", "config"}, {"command", command}, {"config", config}};
            if (!extra.is_null()) rec["options"] = extra;
            record(rec);
        } else {
            out_ << "# crlhf " << command << ' ' << config.dump();
            if (!extra.is_null()) out_ << ' ' << extra.dump();
            out_ << '\n';
        }
    }

    void record(const json& j) { out_ << j.dump() << '\n'; }
    void text(const std::string& s) { out_ << s; }

private:
    std::ostream& out_;
    bool json_;
};

std::vector<json> read_ndjson(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "'");
    std::vector<json> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw Error(ErrorCode::kSchema,
                        fmt::format("{}:{}: not a JSON record: {}", path, number, e.what()));
        }
    }
    return out;
}

Engine open_engine(const Globals& g, std::optional<std::size_t> quorum = std::nullopt) {
    if (g.store.empty()) throw Error(ErrorCode::kInvalidArgument, "--store is required");
    EngineConfig cfg;
    cfg.pipeline = g.pipeline();
    cfg.quorum = quorum;
    return Engine(EventLog::open(g.store), cfg);
}

// --- simulate ---------------------------------------------------------------

struct SimulateOptions {
    std::size_t honeypot_tasks = 2;
    std::size_t scored_tasks = 13;
    std::size_t samples = 10;
    std::size_t lines = 10;
    double error_rate = 0.2;
    std::vector<double> reliabilities;
    std::string calibration = "one-shot";
    std::string record;
};

void simulate(const Globals& g, const SimulateOptions& o, Printer& p) {
    ExperimentConfig cfg;
    cfg.seed = g.seed;
    cfg.pipeline = g.pipeline();
    cfg.solver = g.solver();
    cfg.honeypot_tasks = o.honeypot_tasks;
    cfg.scored_tasks = o.scored_tasks;
    cfg.task_spec = {o.samples, o.lines, o.error_rate};
    cfg.calibration = calibration_method_from_string(o.calibration);
    if (!o.reliabilities.empty()) cfg.true_reliabilities = o.reliabilities;
    cfg.validate();

    std::optional<Engine> recorder;
    if (!o.record.empty()) {
        if (std::filesystem::exists(o.record)) {
            throw Error(ErrorCode::kInvalidArgument,
                        "--record target '" + o.record + "' already exists");
        }
        EngineConfig engine_cfg;
        engine_cfg.pipeline = cfg.pipeline;
        recorder.emplace(EventLog::open(o.record), engine_cfg);
    }
    const auto report = run_experiment(cfg, recorder ? &*recorder : nullptr);
    p.header("simulate", g.effective());
    p.text(p.json_mode() ? report_records(report) : report_table(report));
    if (recorder) {
        const json rec{{"record", "store"}, {"path", o.record},
                       {"events", recorder->last_sequence()}, {"state_hash", recorder->state_hash()}};
        if (p.json_mode()) {
            p.record(rec);
        } else {
            p.text(fmt::format("recorded {} events to {} (state {})\n", recorder->last_sequence(),
                               o.record, recorder->state_hash()));
        }
    }
}

// --- aggregate --------------------------------------------------------------

void aggregate(const Globals& g, const std::string& task, Printer& p) {
    Engine engine = open_engine(g);
    const auto closed = task.empty() ? engine.close_all_rounds() : engine.close_round(task);
    const auto state = engine.state();
    p.header("aggregate", g.effective(), json{{"task", task}});
    if (!p.json_mode()) {
        p.text(fmt::format("closed {} samples; state {}\n\n", closed.size(), engine.state_hash()));
        p.text(fmt::format("{:<16} {:<24} {:>8} {:>10}\n", "task", "sample", "c/k", "score"));
    }
    for (const auto& t : state.ordered_tasks()) {
        if (!task.empty() && t.task_id != task) continue;
        for (const auto& s : t.samples) {
            const auto it = state.scores.find(s.sample_id);
            if (it == state.scores.end()) continue;
            const auto& sc = it->second.score;
            if (p.json_mode()) {
                json rec = sc;
                rec["record"] = "score";
                rec["task_id"] = t.task_id;
                p.record(rec);
            } else {
                p.text(fmt::format("{:<16} {:<24} {:>8} {:>10.4f}\n", t.task_id, s.sample_id,
                                   fmt::format("{}/{}", sc.correct_count, sc.line_count),
                                   sc.score));
            }
        }
    }
}

// --- calibrate --------------------------------------------------------------

struct CalibrateOptions {
    bool one_shot = false;
    bool sequential = false;
    bool per_annotator = false;
    std::string input;
};

struct HoneypotFile {
    std::vector<std::string> annotators;
    std::vector<Observation> observations;
};

HoneypotFile read_honeypots(const std::string& path) {
    HoneypotFile file;
    for (const auto& j : read_ndjson(path)) {
        auto obs = parse_record<Observation>(j, path);
        if (j.contains("annotators")) {
            auto ids = parse_record<std::vector<std::string>>(j.at("annotators"), path);
            if (file.annotators.empty()) file.annotators = ids;
            if (ids != file.annotators) {
                throw Error(ErrorCode::kSchema, path + ": annotator columns differ between records");
            }
        }
        file.observations.push_back(std::move(obs));
    }
    if (file.observations.empty()) throw Error(ErrorCode::kInvalidArgument, path + ": no observations");
    const std::size_t width = file.observations.front().labels.size();
    if (file.annotators.empty()) {
        for (std::size_t i = 0; i < width; ++i) file.annotators.push_back(fmt::format("a{:03d}", i));
    }
    if (file.annotators.size() != width) {
        throw Error(ErrorCode::kShapeMismatch, path + ": annotator ids do not match label width");
    }
    return file;
}

std::vector<Observation> column(const HoneypotFile& file, std::size_t i) {
    std::vector<Observation> out;
    for (const auto& o : file.observations) {
        if (o.labels.size() != file.annotators.size()) {
            throw Error(ErrorCode::kShapeMismatch, "observations disagree in width");
        }
        if (o.labels[i] != Label::kSkip) out.push_back({{o.labels[i]}, o.truth});
    }
    return out;
}

void calibrate(const Globals& g, const CalibrateOptions& o, Printer& p) {
    const auto solver = g.solver();
    const auto pipeline = g.pipeline();
    const auto file = read_honeypots(o.input);
    const std::string method = o.sequential ? "sequential" : "one-shot";
    p.header("calibrate", g.effective(),
             json{{"method", method}, {"per_annotator", o.per_annotator}, {"input", o.input}});

    if (o.sequential) {
        if (!p.json_mode()) p.text(fmt::format("{:<12} {:>12} {:>8}\n", "annotator", "reliability", "updates"));
        for (std::size_t i = 0; i < file.annotators.size(); ++i) {
            auto profile = init_profile(file.annotators[i], pipeline.reliability);
            for (const auto& obs : column(file, i)) {
                profile = calibrate_on_honeypot(std::move(profile), std::span(obs.labels),
                                                std::span(&obs.truth, 1), pipeline.reliability);
            }
            if (p.json_mode()) {
                p.record(json{{"record", "profile"}, {"annotator_id", profile.annotator_id},
                              {"reliability", profile.reliability.value()},
                              {"update_count", profile.update_count}});
            } else {
                p.text(fmt::format("{:<12} {:>12.6f} {:>8}\n", profile.annotator_id,
                                   profile.reliability.value(), profile.update_count));
            }
        }
        return;
    }

    if (o.per_annotator) {
        if (!p.json_mode()) {
            p.text(fmt::format("{:<12} {:>12} {:>12} {:>6} {:>10}\n", "annotator", "p_tilde",
                               "reliability", "lines", "converged"));
        }
        for (std::size_t i = 0; i < file.annotators.size(); ++i) {
            const auto obs = column(file, i);
            if (obs.empty()) continue;
            const auto est = fit(obs, solver, pipeline.reliability.prob_clamp);
            if (p.json_mode()) {
                json rec = to_json(est);
                rec["record"] = "estimate";
                rec["annotator_id"] = file.annotators[i];
                p.record(rec);
            } else {
                p.text(fmt::format("{:<12} {:>12.6f} {:>12.6f} {:>6} {:>10}\n", file.annotators[i],
                                   est.p_tilde[0], est.reliabilities[0], obs.size(),
                                   est.converged ? "yes" : "no"));
            }
        }
        return;
    }

    const auto est = fit(file.observations, solver, pipeline.reliability.prob_clamp);
    json rec = to_json(est);
    rec["record"] = "estimate";
    rec["annotators"] = file.annotators;
    if (est.observation_count == 1) {
        const auto& obs = file.observations.front();
        const auto cert = margin_certificate(est, obs, solver.gamma);
        double inf_norm = 0.0;
        for (Label l : obs.labels) inf_norm = std::max(inf_norm, std::abs(double(sign(l))));
        const auto dual = dual_optimum(solver.gamma, inf_norm);
        rec["margin"] = cert.margin;
        rec["nu_star"] = dual.nu_star;
        rec["dual_value"] = dual.dual_value;
    }
    if (p.json_mode()) {
        p.record(rec);
        return;
    }
    p.text(fmt::format("{:<12} {:>12} {:>12}\n", "annotator", "p_tilde", "reliability"));
    for (std::size_t i = 0; i < file.annotators.size(); ++i) {
        p.text(fmt::format("{:<12} {:>12.6f} {:>12.6f}\n", file.annotators[i], est.p_tilde[i],
                           est.reliabilities[i]));
    }
    p.text(fmt::format("\nobjective  {:.10f}\niterations {}\nconverged  {}\n", est.objective_value,
                       est.iterations, est.converged ? "yes" : "no"));
    if (rec.contains("margin")) {
        p.text(fmt::format("margin     {:.10f}\nnu*        {:.10f}\ngap        {:.3e}\n",
                           rec["margin"].get<double>(), rec["nu_star"].get<double>(),
                           *est.duality_gap));
    }
}

// --- export / passk / serve --------------------------------------------------

void export_store(const Globals& g, const std::string& out_path, Printer& p) {
    Engine engine = open_engine(g);
    const auto result = engine.export_rewards(out_path);
    p.header("export", g.effective(), json{{"out", out_path}});
    if (p.json_mode()) {
        p.record(json{{"record", "export"}, {"destination", out_path}, {"count", result.count}});
    } else {
        p.text(fmt::format("exported {} reward triplets to {}\n", result.count, out_path));
    }
}

void passk(const Globals& g, const PassAtKQuery& q, std::uint64_t trials, Printer& p) {
    const double value = pass_at_k(q);
    std::optional<double> mc;
    if (trials > 0) mc = pass_at_k_mc(q, trials, g.seed);
    p.header("passk", g.effective(), json{{"n", q.n}, {"c", q.c}, {"k", q.k}, {"trials", trials}});
    if (p.json_mode()) {
        json rec{{"record", "pass_at_k"}, {"n", q.n}, {"c", q.c}, {"k", q.k}, {"value", value}};
        if (mc) rec["monte_carlo"] = *mc;
        p.record(rec);
        return;
    }
    p.text(fmt::format("{}\n", value));
    if (mc) p.text(fmt::format("monte carlo ({} trials, seed {}): {}\n", trials, g.seed, *mc));
}

std::pair<std::string, int> parse_listen(const std::string& listen) {
    const auto colon = listen.rfind(':');
    if (colon == std::string::npos || colon == 0) {
        throw Error(ErrorCode::kInvalidArgument, "--listen must be host:port, got '" + listen + "'");
    }
    int port = 0;
    try {
        std::size_t used = 0;
        port = std::stoi(listen.substr(colon + 1), &used);
        if (used != listen.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw Error(ErrorCode::kInvalidArgument, "--listen port is not a number: '" + listen + "'");
    }
    if (port < 0 || port > 65535) throw Error(ErrorCode::kInvalidArgument, "--listen port out of range");
    return {listen.substr(0, colon), port};
}

struct ServeOptions {
    std::size_t quorum = 0;
    std::string export_dir = "exports";
    std::string static_dir;
};

int serve(const Globals& g, const ServeOptions& o, Printer& p, std::ostream& err) {
    const auto [host, port] = parse_listen(g.listen);
    Engine engine = open_engine(g, o.quorum > 0 ? std::optional(o.quorum) : std::nullopt);
    ServiceConfig cfg;
    cfg.export_dir = o.export_dir;
    if (!o.static_dir.empty()) cfg.static_dir = o.static_dir;
    Service service(engine, cfg);
    httplib::Server server;
    service.bind(server);

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::thread stopper([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        server.stop();
    });

    p.header("serve", g.effective(), json{{"quorum", o.quorum}, {"export_dir", o.export_dir}});
    const bool ok = server.listen(host, port);
    if (!ok) {
        pthread_kill(stopper.native_handle(), SIGTERM);
        stopper.join();
        throw Error(ErrorCode::kIo, "cannot listen on " + g.listen);
    }
    stopper.join();
    err << "stopped\n";
    return 0;
}

void emit_error(std::ostream& err, std::string_view code, const std::string& message) {
    err << json{{"error", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err, const EnvLookup& env) {
    // CLI11 lets a config file override the environment, so environment
    // values are passed as flags when the flag itself is absent.
    for (const auto& [flag, name] : kEnvFlags) {
        const bool present = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == flag || a.rfind(flag + "=", 0) == 0;
        });
        if (present) continue;
        if (auto value = env(name)) args.push_back(flag + "=" + *value);
    }

    CLI::App app{"Crowd-feedback reward pipeline"};
    app.name("crlhf");
    app.fallthrough();
    app.require_subcommand(1);

    Globals g;
    app.set_config("--config", "", "Configuration file (TOML)");
    app.add_option("--store", g.store, "Event log path");
    app.add_option("--seed", g.seed, "Root random seed");
    app.add_option("--lambda", g.lambda, "Reliability step scale");
    app.add_option("--tau", g.tau, "Verdict threshold");
    app.add_option("--nu", g.nu, "Initial reliability");
    app.add_option("--gamma", g.gamma, "L1 weight for the sparse estimator");
    app.add_option("--clamp-delta", g.clamp_delta, "Probability clamp");
    app.add_option("--prior", g.prior, "Prior probability that a line is correct");
    app.add_option("--eta", g.eta, "Solver step size (default 1/L)");
    app.add_option("--tol", g.tol, "Solver tolerance");
    app.add_option("--max-iter", g.max_iter, "Solver iteration cap");
    app.add_option("--consensus", g.consensus, "Consensus mode")
        ->check(CLI::IsMember({"leave-one-out", "include-self"}));
    app.add_option("--listen", g.listen, "host:port for serve");
    app.add_flag("--json", g.as_json, "Structured records instead of tables");

    SimulateOptions sim;
    auto* sim_cmd = app.add_subcommand("simulate", "Run the synthetic annotator study");
    sim_cmd->add_option("--honeypot-tasks", sim.honeypot_tasks);
    sim_cmd->add_option("--scored-tasks", sim.scored_tasks);
    sim_cmd->add_option("--samples", sim.samples, "Samples per task");
    sim_cmd->add_option("--lines", sim.lines, "Lines per sample");
    sim_cmd->add_option("--error-rate", sim.error_rate);
    sim_cmd->add_option("--reliabilities", sim.reliabilities, "True annotator reliabilities");
    sim_cmd->add_option("--calibration", sim.calibration)
        ->check(CLI::IsMember({"one-shot", "sequential"}));
    sim_cmd->add_option("--record", sim.record, "Write the run to a new event log");

    std::string agg_task;
    auto* agg_cmd = app.add_subcommand("aggregate", "Close scoring rounds and print scores");
    agg_cmd->add_option("--task", agg_task, "Only this task");

    CalibrateOptions cal;
    auto* cal_cmd = app.add_subcommand("calibrate", "Estimate reliabilities from honeypot lines");
    auto* one_shot = cal_cmd->add_flag("--one-shot", cal.one_shot, "L1 logistic fit (default)");
    auto* sequential = cal_cmd->add_flag("--sequential", cal.sequential, "Log-odds steps per line");
    one_shot->excludes(sequential);
    auto* per_annotator =
        cal_cmd->add_flag("--per-annotator", cal.per_annotator, "Fit each annotator separately");
    per_annotator->excludes(sequential);
    cal_cmd->add_option("--input", cal.input, "NDJSON of {labels, truth} records")->required();

    std::string export_out;
    auto* exp_cmd = app.add_subcommand("export", "Write reward triplets");
    exp_cmd->add_option("--out", export_out, "Destination file")->required();

    PassAtKQuery query;
    std::uint64_t trials = 0;
    auto* pk_cmd = app.add_subcommand("passk", "Unbiased Pass@k");
    pk_cmd->add_option("--n", query.n)->required();
    pk_cmd->add_option("--c", query.c)->required();
    pk_cmd->add_option("--k", query.k)->required();
    pk_cmd->add_option("--trials", trials, "Also estimate by Monte Carlo");

    ServeOptions srv;
    auto* srv_cmd = app.add_subcommand("serve", "Run the annotation service");
    srv_cmd->add_option("--quorum", srv.quorum, "Annotations per sample that trigger scoring");
    srv_cmd->add_option("--export-dir", srv.export_dir);
    srv_cmd->add_option("--static-dir", srv.static_dir, "Serve UI files from this directory");

    std::vector<const char*> argv{"crlhf"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        emit_error(err, "invalid-argument", e.what());
        return 2;
    }

    Printer printer(out, g.as_json);
    try {
        if (*sim_cmd) simulate(g, sim, printer);
        else if (*agg_cmd) aggregate(g, agg_task, printer);
        else if (*cal_cmd) calibrate(g, cal, printer);
        else if (*exp_cmd) export_store(g, export_out, printer);
        else if (*pk_cmd) passk(g, query, trials, printer);
        else if (*srv_cmd) return serve(g, srv, printer, err);
        return 0;
    } catch (const Error& e) {
        emit_error(err, to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        emit_error(err, "internal", e.what());
    }
    return 1;
}

}  // namespace crlhf::cli
