#include <doctest.h>

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "builders.hpp"
#include "crlhf/error.hpp"
#include "crlhf/pipeline.hpp"
#include "oracles.hpp"

using namespace crlhf;

namespace {

std::vector<ScoredSample> scores_of(const RoundResult& r) { return r.scores.value_or(std::vector<ScoredSample>{}); }

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

TEST_CASE("honeypot round raises reliabilities and yields no scores") {
    const auto hp = build::task("hp", 1, 4, true);
    const std::vector<Annotation> anns{build::uniform("a", "hp-s0", 4, 1), build::uniform("b", "hp-s0", 4, 1)};
    PipelineConfig cfg;
    cfg.reliability.lambda = 0.1;
    const auto r = run_round(hp, anns, {}, cfg);
    CHECK_FALSE(r.scores.has_value());
    CHECK(r.profiles.at("a").reliability.value() > 0.7);
    CHECK(r.profiles.at("b").reliability.value() > 0.7);
    CHECK(r.profiles.at("a").update_count == 4);
}

TEST_CASE("unknown annotators are initialized first, in id order") {
    const auto t = build::task("t", 1, 2);
    const std::vector<Annotation> anns{build::uniform("zed", "t-s0", 2, 1), build::uniform("amy", "t-s0", 2, 1)};
    const auto r = run_round(t, anns, {}, {});
    REQUIRE(r.steps.size() >= 2);
    const auto& first = std::get<ProfileChange>(r.steps[0]);
    const auto& second = std::get<ProfileChange>(r.steps[1]);
    CHECK(first.annotator_id == "amy");
    CHECK(first.cause == UpdateCause::kInit);
    CHECK(second.annotator_id == "zed");
}

TEST_CASE("scored round examples") {
    const auto t = build::task("t", 2, 3);
    SUBCASE("unanimous correct labels give s = 1") {
        const std::vector<Annotation> anns{build::uniform("a", "t-s0", 3, 1), build::uniform("b", "t-s0", 3, 1)};
        const auto r = run_round(t, anns, {}, {});
        REQUIRE(r.scores);
        REQUIRE(r.scores->size() == 2);
        CHECK(r.scores->at(0).score.score == 1.0);
    }
    SUBCASE("no annotations give s = 0") {
        const auto r = run_round(t, {}, {}, {});
        REQUIRE(r.scores);
        for (const auto& s : *r.scores) {
            CHECK(s.score.score == 0.0);
            CHECK(s.score.posteriors == std::vector<double>(3, 0.5));
        }
    }
    SUBCASE("mixed verdicts") {
        const std::vector<Annotation> anns{build::annotation("a", "t-s1", {1, -1, 1}),
                                           build::annotation("b", "t-s1", {1, -1, -1})};
        const auto r = run_round(t, anns, {}, {});
        const auto& s = r.scores->at(1).score;
        CHECK(s.verdicts == std::vector<bool>{true, false, false});
        CHECK(s.posteriors[2] == 0.5);
        CHECK(s.score == doctest::Approx(1.0 / 3.0));
    }
}

TEST_CASE("scores use the reliabilities current before feedback") {
    const auto t = build::task("t", 2, 2);
    const std::vector<Annotation> anns{
        build::uniform("a", "t-s0", 2, 1), build::uniform("b", "t-s0", 2, 1), build::uniform("c", "t-s0", 2, -1),
        build::uniform("a", "t-s1", 2, 1), build::uniform("b", "t-s1", 2, -1), build::uniform("c", "t-s1", 2, -1)};
    ProfileBook start;
    for (const char* id : {"a", "b", "c"}) start.emplace(id, init_profile(id, {}));
    const auto r = run_round(t, anns, start, {});
    REQUIRE(r.scores->size() == 2);
    // First sample scored with the initial values.
    for (const auto& [id, p] : r.scores->at(0).reliabilities_used) CHECK(p == 0.7);
    // The minority annotator lost reliability before the second sample.
    CHECK(r.scores->at(1).reliabilities_used.at("c") < 0.7);
    CHECK(r.profiles.at("c").reliability.value() < r.profiles.at("a").reliability.value());
}

TEST_CASE("score provenance: s is recomputable from stored inputs") {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> lab(-1, 1);
    const auto t = build::task("t", 5, 6);
    std::vector<Annotation> anns;
    for (const char* id : {"a", "b", "c", "d"}) {
        for (const auto& s : t.samples) {
            std::vector<int> labels(6);
            for (auto& l : labels) l = lab(rng);
            anns.push_back(build::annotation(id, s.sample_id, labels));
        }
    }
    PipelineConfig cfg;
    cfg.reliability.lambda = 0.3;
    const auto r = run_round(t, anns, {}, cfg);
    for (std::size_t i = 0; i < t.samples.size(); ++i) {
        const auto& scored = r.scores->at(i);
        std::vector<double> posteriors;
        for (std::size_t line = 0; line < 6; ++line) {
            std::vector<int> labels;
            std::vector<double> ps;
            for (const auto& a : anns) {
                if (a.sample_id != t.samples[i].sample_id) continue;
                labels.push_back(sign(a.labels[line]));
                ps.push_back(scored.reliabilities_used.at(a.annotator_id));
            }
            posteriors.push_back(static_cast<double>(oracle::bayes_posterior(labels, ps)));
        }
        for (std::size_t line = 0; line < 6; ++line) {
            CHECK(std::abs(posteriors[line] - scored.score.posteriors[line]) < 1e-12);
        }
    }
}

TEST_CASE("rounds are idempotent on identical inputs") {
    const auto t = build::task("t", 3, 4);
    std::vector<Annotation> anns;
    for (const char* id : {"b", "a", "c"}) {
        for (const auto& s : t.samples) anns.push_back(build::annotation(id, s.sample_id, {1, -1, id[0] == 'c' ? -1 : 1, 0}));
    }
    const auto r1 = run_round(t, anns, {}, {});
    auto shuffled = anns;
    std::reverse(shuffled.begin(), shuffled.end());
    const auto r2 = run_round(t, shuffled, {}, {});
    CHECK(scores_of(r1) == scores_of(r2));
    CHECK(r1.profiles == r2.profiles);
}

TEST_CASE("consensus updates apply line-major then by annotator id") {
    const auto t = build::task("t", 1, 2);
    const std::vector<Annotation> anns{build::uniform("b", "t-s0", 2, 1), build::uniform("a", "t-s0", 2, 1)};
    const auto r = run_round(t, anns, {}, {});
    std::vector<std::string> order;
    for (const auto& step : r.steps) {
        if (const auto* c = std::get_if<ProfileChange>(&step); c && c->cause == UpdateCause::kConsensus) {
            order.push_back(c->annotator_id + "@" + c->ref);
        }
    }
    CHECK(order == std::vector<std::string>{"a@t-s0#0", "b@t-s0#0", "a@t-s0#1", "b@t-s0#1"});
}

TEST_CASE("run_sample_round scores a single sample") {
    const auto t = build::task("t", 3, 2);
    const std::vector<Annotation> anns{build::uniform("a", "t-s1", 2, 1), build::uniform("a", "t-s2", 2, -1)};
    const auto r = run_sample_round(t, 1, anns, {}, {});
    REQUIRE(r.scores->size() == 1);
    CHECK(r.scores->front().score.sample_id == "t-s1");
    CHECK(r.scores->front().score.score == 1.0);
    CHECK_THROWS_AS(run_sample_round(t, 7, anns, {}, {}), Error);
    const auto hp = build::task("hp", 1, 2, true);
    CHECK_THROWS_AS(run_sample_round(hp, 0, {}, {}, {}), Error);
}

TEST_CASE("validation errors") {
    auto hp = build::task("hp", 1, 2, true);
    hp.ground_truth.reset();
    CHECK(code_of([&] { validate_task(hp); }) == ErrorCode::kInvalidArgument);

    auto bad_shape = build::task("hp", 1, 2, true);
    bad_shape.ground_truth->front().pop_back();
    CHECK(code_of([&] { validate_task(bad_shape); }) == ErrorCode::kShapeMismatch);

    auto empty = build::task("t", 1, 0);
    CHECK(code_of([&] { validate_task(empty); }) == ErrorCode::kEmptySample);

    const auto t = build::task("t", 1, 3);
    const std::vector<Annotation> short_labels{build::uniform("a", "t-s0", 2, 1)};
    CHECK(code_of([&] { run_round(t, short_labels, {}, {}); }) == ErrorCode::kShapeMismatch);
    const std::vector<Annotation> stranger{build::uniform("a", "nope", 3, 1)};
    CHECK(code_of([&] { run_round(t, stranger, {}, {}); }) == ErrorCode::kUnknownEntity);
    const std::vector<Annotation> twice{build::uniform("a", "t-s0", 3, 1), build::uniform("a", "t-s0", 3, -1)};
    CHECK(code_of([&] { run_round(t, twice, {}, {}); }) == ErrorCode::kDuplicate);
}

TEST_CASE("seed_profiles overwrites reliabilities") {
    ProfileBook book;
    book.emplace("a", init_profile("a", {}));
    const auto r = seed_profiles(book, {{"a", 0.83}, {"b", 0.999}}, {});
    CHECK(r.profiles.at("a").reliability.value() == 0.83);
    CHECK(r.profiles.at("b").reliability.value() == 0.99);
    CHECK(r.profiles.at("a").update_count == 1);
    const auto& last = std::get<ProfileChange>(r.steps.back());
    CHECK(last.cause == UpdateCause::kOneShotSeed);
    CHECK(last.annotator_id == "b");
}

TEST_CASE("reward dataset ordering and honeypot isolation") {
    const std::vector<Task> tasks{build::task("t2", 1, 2), build::task("hp", 1, 2, true), build::task("t1", 2, 3)};
    ScoreIndex scores;
    scores["t1-s1"].score = 1.0;
    scores["t1-s0"].score = 0.75;
    scores["t2-s0"].score = 0.5;
    scores["hp-s0"].score = 0.9;  // must be ignored
    const auto ds = build_reward_dataset(tasks, scores);
    REQUIRE(ds.size() == 3);
    CHECK(ds[0].x == "Problem t1");
    CHECK(ds[0].s == 0.75);
    CHECK(ds[1].s == 1.0);
    CHECK(ds[2].x == "Problem t2");
    CHECK(ds[0].y == "x0 = 0\nx1 = 1\nx2 = 2");
    // Unscored samples are omitted.
    scores.erase("t2-s0");
    CHECK(build_reward_dataset(tasks, scores).size() == 2);
}

TEST_CASE("export and import round trip") {
    oracle::TempDir dir;
    SUBCASE("empty dataset creates the file") {
        const auto path = dir / "empty.jsonl";
        CHECK(export_rewards({}, path) == 0);
        CHECK(std::filesystem::exists(path));
        CHECK(import_rewards(path).empty());
    }
    SUBCASE("records are independent lines at full precision") {
        const std::vector<RewardTriplet> ds{{"p1", "a\nb", 0.1 + 0.2}, {"p2", "c", 1.0 / 3.0}, {"p\"3", "d\te", 0.0}};
        const auto path = dir / "r.jsonl";
        CHECK(export_rewards(ds, path) == 3);
        std::ifstream in(path);
        std::string line;
        int lines = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            CHECK(j.contains("prompt"));
            CHECK(j.contains("completion"));
            CHECK(j.contains("reward"));
            ++lines;
        }
        CHECK(lines == 3);
        CHECK(import_rewards(path) == ds);
    }
    SUBCASE("unwritable destination reports the path") {
        const auto path = dir / "missing" / "r.jsonl";
        try {
            export_rewards({}, path);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::kIo);
            CHECK(std::string(e.what()).find("missing") != std::string::npos);
        }
    }
}

TEST_CASE("recording trainer hook keeps batches in order") {
    RecordingTrainerHook hook;
    const std::vector<RewardTriplet> batch{{"x", "y", 0.5}, {"x2", "y2", 1.0}};
    const auto ack = hook.deliver(batch);
    CHECK(ack.accepted);
    REQUIRE(hook.batches().size() == 1);
    CHECK(hook.batches()[0] == batch);
}

TEST_CASE("update cause strings") {
    for (auto c : {UpdateCause::kInit, UpdateCause::kHoneypot, UpdateCause::kConsensus, UpdateCause::kOneShotSeed}) {
        CHECK(update_cause_from_string(to_string(c)) == c);
    }
    CHECK_THROWS_AS(update_cause_from_string("bogus"), Error);
}
