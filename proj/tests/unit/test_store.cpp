#include <doctest.h>

#include <fstream>
#include <sstream>

#include "builders.hpp"
#include "crlhf/engine.hpp"
#include "crlhf/error.hpp"
#include "crlhf/store.hpp"
#include "oracles.hpp"

using namespace crlhf;
namespace fs = std::filesystem;

namespace {

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

// Registers a honeypot and a scored task, submits a handful of annotations
// and closes the round.
void populate(Engine& engine) {
    engine.register_task(build::task("hp", 1, 3, true));
    engine.register_task(build::task("t", 2, 3));
    engine.submit_annotation(build::annotation("a", "hp-s0", {1, 1, -1}));
    engine.submit_annotation(build::uniform("b", "hp-s0", 3, 1));
    engine.submit_annotation(build::annotation("a", "t-s0", {1, -1, 1}));
    engine.submit_annotation(build::annotation("b", "t-s0", {1, 1, 1}));
    engine.submit_annotation(build::annotation("b", "t-s1", {-1, 0, 1}));
    engine.close_round("t");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::kInvalidArgument;
}

}  // namespace

TEST_CASE("event kinds round trip through strings") {
    for (auto k : {EventKind::kTaskRegistered, EventKind::kAnnotationSubmitted, EventKind::kProfileUpdated,
                   EventKind::kSampleScored, EventKind::kDatasetExported}) {
        CHECK(event_kind_from_string(to_string(k)) == k);
    }
    CHECK_THROWS_AS(event_kind_from_string("nope"), Error);
}

TEST_CASE("events round trip through json") {
    Event e{7, EventKind::kAnnotationSubmitted, annotation_submitted_payload(build::uniform("a", "s", 2, 1)),
            "2026-01-01T00:00:00Z"};
    const auto j = event_to_json(e);
    CHECK(j.at("schema_version") == kSchemaVersion);
    CHECK(j.at("kind") == "annotation-submitted");
    const auto back = event_from_json(j);
    CHECK(back.sequence == 7);
    CHECK(back.kind == e.kind);
    CHECK(back.payload == e.payload);
    CHECK(back.recorded_at == e.recorded_at);
}

TEST_CASE("sha256 known values") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("utc timestamps have second precision") {
    const auto ts = utc_timestamp();
    CHECK(ts.size() == 20);
    CHECK(ts.back() == 'Z');
    CHECK(ts[10] == 'T');
}

TEST_CASE("replay reproduces the live state") {
    oracle::TempDir dir;
    const auto path = dir / "events.ndjson";
    std::string live_hash;
    PipelineState live;
    {
        Engine engine(EventLog::open(path, fixed_clock), {});
        populate(engine);
        live_hash = engine.state_hash();
        live = engine.state();
    }
    const auto replayed = replay_file(path);
    CHECK(replayed == live);
    CHECK(state_hash(replayed) == live_hash);
    CHECK(state_hash(replay_file(path)) == live_hash);

    // Reopening rebuilds the same state.
    Engine reopened(EventLog::open(path, fixed_clock), {});
    CHECK(reopened.state_hash() == live_hash);
}

TEST_CASE("state json round trip keeps the hash") {
    auto engine = Engine(EventLog::in_memory(fixed_clock), {});
    populate(engine);
    const auto state = engine.state();
    const auto back = state_from_json(state_to_json(state));
    CHECK(back == state);
    CHECK(state_hash(back) == state_hash(state));
}

TEST_CASE("sequences start at one without gaps") {
    auto log = EventLog::in_memory(fixed_clock);
    CHECK(log.last_sequence() == 0);
    CHECK(log.append(EventKind::kTaskRegistered, task_registered_payload(build::task("t", 1, 1))).sequence == 1);
    CHECK(log.append(EventKind::kTaskRegistered, task_registered_payload(build::task("u", 1, 1))).sequence == 2);
    CHECK(log.events().back().recorded_at == "2026-01-01T00:00:00Z");
}

TEST_CASE("replay rejects inconsistent events") {
    std::vector<Event> events{{1, EventKind::kAnnotationSubmitted,
                               annotation_submitted_payload(build::uniform("a", "ghost", 2, 1)), "t"}};
    CHECK(code_of([&] { replay(events); }) == ErrorCode::kCorruption);

    std::vector<Event> gap{{2, EventKind::kTaskRegistered, task_registered_payload(build::task("t", 1, 1)), "t"}};
    CHECK(code_of([&] { replay(gap); }) == ErrorCode::kCorruption);
}

TEST_CASE("a torn final record is dropped and truncated") {
    oracle::TempDir dir;
    const auto path = dir / "events.ndjson";
    std::string hash;
    {
        Engine engine(EventLog::open(path, fixed_clock), {});
        populate(engine);
        hash = engine.state_hash();
    }
    const auto intact = slurp(path);
    spit(path, intact + R"({"schema_version":1,"sequence":)");

    const auto read = read_log(path);
    CHECK(read.dropped_torn_tail);
    CHECK(read.valid_bytes == intact.size());
    CHECK(state_hash(replay_file(path)) == hash);

    auto log = EventLog::open(path, fixed_clock);
    CHECK(log.dropped_torn_tail());
    CHECK(slurp(path) == intact);
    const auto next = log.last_sequence() + 1;
    CHECK(log.append(EventKind::kTaskRegistered, task_registered_payload(build::task("late", 1, 1))).sequence == next);
    CHECK(read_log(path).events.size() == next);
}

TEST_CASE("a record without its newline counts as torn") {
    oracle::TempDir dir;
    const auto path = dir / "events.ndjson";
    {
        auto log = EventLog::open(path, fixed_clock);
        log.append(EventKind::kTaskRegistered, task_registered_payload(build::task("t", 1, 1)));
        log.append(EventKind::kTaskRegistered, task_registered_payload(build::task("u", 1, 1)));
    }
    auto content = slurp(path);
    content.pop_back();
    spit(path, content);
    const auto read = read_log(path);
    CHECK(read.dropped_torn_tail);
    CHECK(read.events.size() == 1);
}

TEST_CASE("corruption before the last record is fatal") {
    oracle::TempDir dir;
    const auto path = dir / "events.ndjson";
    {
        Engine engine(EventLog::open(path, fixed_clock), {});
        populate(engine);
    }
    auto content = slurp(path);
    const auto first_nl = content.find('\n');
    content.replace(first_nl / 2, 3, "@@@");
    spit(path, content);
    try {
        read_log(path);
        FAIL("expected corruption");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kCorruption);
        CHECK(std::string(e.what()).find("position 1") != std::string::npos);
    }
    CHECK(code_of([&] { EventLog::open(path, fixed_clock); }) == ErrorCode::kCorruption);
}

TEST_CASE("a missing log reads as empty") {
    oracle::TempDir dir;
    CHECK(read_log(dir / "absent").events.empty());
    CHECK(replay_file(dir / "absent") == PipelineState{});
}

TEST_CASE("snapshots") {
    oracle::TempDir dir;
    auto engine = Engine(EventLog::in_memory(fixed_clock), {});
    populate(engine);
    const auto state = engine.state();
    const auto& events = state.last_sequence;

    SUBCASE("mid-log snapshot plus the remaining events equals full replay") {
        auto log = EventLog::open(dir / "e.ndjson", fixed_clock);
        Engine on_disk(std::move(log), {});
        populate(on_disk);
        const auto all = read_log(dir / "e.ndjson").events;
        const std::uint64_t mid = all.size() / 2;
        const auto snap = snapshot(all, mid);
        CHECK(snap.as_of_sequence == mid);
        write_snapshot(snap, dir / "snap.json");
        const auto loaded = load_snapshot(dir / "snap.json");
        CHECK(loaded.state == snap.state);
        const auto rest = std::span<const Event>(all).subspan(mid);
        CHECK(state_hash(replay(rest, loaded.state)) == on_disk.state_hash());
        CHECK(code_of([&] { snapshot(all, all.size() + 1); }) == ErrorCode::kInvalidArgument);
    }
    SUBCASE("tampered content is detected") {
        const auto snap = snapshot(state);
        CHECK(snap.as_of_sequence == events);
        write_snapshot(snap, dir / "snap.json");
        auto text = slurp(dir / "snap.json");
        auto j = nlohmann::json::parse(text);
        j["state"]["profiles"][0]["reliability"] = 0.5;
        spit(dir / "snap.json", j.dump());
        CHECK(code_of([&] { load_snapshot(dir / "snap.json"); }) == ErrorCode::kHashMismatch);
    }
    SUBCASE("tampered hash is detected") {
        auto snap = snapshot(state);
        snap.hash[0] = snap.hash[0] == 'a' ? 'b' : 'a';
        write_snapshot(snap, dir / "snap.json");
        CHECK(code_of([&] { load_snapshot(dir / "snap.json"); }) == ErrorCode::kHashMismatch);
    }
    SUBCASE("garbage is corruption") {
        spit(dir / "snap.json", "not json");
        CHECK(code_of([&] { load_snapshot(dir / "snap.json"); }) == ErrorCode::kCorruption);
    }
}
