#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "crlhf/error.hpp"
#include "crlhf/fusion.hpp"
#include "oracles.hpp"

using namespace crlhf;

namespace {

LineEvidence evidence(std::initializer_list<std::pair<int, double>> entries) {
    LineEvidence ev;
    int i = 0;
    for (auto [label, p] : entries) ev.add("a" + std::to_string(i++), label_from_int(label), Probability(p));
    return ev;
}

struct RandomEvidence {
    std::vector<int> labels;
    std::vector<double> reliabilities;

    LineEvidence build() const {
        LineEvidence ev;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            ev.add("a" + std::to_string(i), label_from_int(labels[i]), Probability(reliabilities[i]));
        }
        return ev;
    }
};

RandomEvidence random_evidence(std::mt19937_64& rng, std::size_t max_n = 10) {
    std::uniform_int_distribution<std::size_t> count(0, max_n);
    std::uniform_int_distribution<int> label(-1, 1);
    std::uniform_real_distribution<double> p(0.05, 0.95);
    RandomEvidence out;
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) {
        out.labels.push_back(label(rng));
        out.reliabilities.push_back(p(rng));
    }
    return out;
}

}  // namespace

TEST_CASE("probability clamps into [delta, 1 - delta]") {
    CHECK(Probability(0.0).value() == 0.01);
    CHECK(Probability(1.0).value() == 0.99);
    CHECK(Probability(0.3).value() == 0.3);
    CHECK(Probability(0.0, 0.05).value() == 0.05);
    // Idempotent.
    const Probability once(0.999);
    CHECK(Probability(once.value()) == once);
    CHECK_THROWS_AS(Probability(std::nan("")), Error);
    CHECK_THROWS_AS(Probability(0.5, 0.5), Error);
    CHECK_THROWS_AS(Probability(0.5, 0.0), Error);
}

TEST_CASE("labels are limited to three states") {
    CHECK(label_from_int(1) == Label::kCorrect);
    CHECK(label_from_int(-1) == Label::kWrong);
    CHECK(label_from_int(0) == Label::kSkip);
    CHECK_THROWS_AS(label_from_int(2), Error);
}

TEST_CASE("logit examples") {
    CHECK(logit(Probability(0.5)) == 0.0);
    CHECK(logit(Probability(0.8)) == doctest::Approx(1.3862943611198906).epsilon(1e-15));
    CHECK(logit(Probability(0.2)) == doctest::Approx(-1.3862943611198906).epsilon(1e-15));
    // Bounded by the clamp.
    CHECK(logit(Probability(1.0)) == doctest::Approx(4.59511985013459).epsilon(1e-14));
}

TEST_CASE("inverse logit examples and symmetry") {
    CHECK(inverse_logit(0.0) == 0.5);
    CHECK(inverse_logit(1.386294) == doctest::Approx(0.8).epsilon(1e-6));
    for (double x : {0.1, 1.0, 7.5, 30.0, 700.0, 800.0}) {
        CHECK(std::abs(inverse_logit(x) + inverse_logit(-x) - 1.0) < 1e-12);
    }
    CHECK(std::isfinite(inverse_logit(-1000.0)));
    CHECK(inverse_logit(-1000.0) >= 0.0);
    CHECK(inverse_logit(1000.0) == 1.0);
}

TEST_CASE("logit round trip over the clamp range") {
    for (double p = 0.01; p <= 0.99; p += 0.0037) {
        CHECK(std::abs(inverse_logit(logit(Probability(p))) - p) < 1e-12);
    }
}

TEST_CASE("fuse_line examples") {
    CHECK(fuse_line(evidence({{1, 0.8}}), {}) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(fuse_line(evidence({{1, 0.6}, {1, 0.6}}), {}) ==
          doctest::Approx(0.6923076923076923).epsilon(1e-14));
    CHECK(fuse_line(evidence({{1, 0.7}, {-1, 0.7}}), {}) == 0.5);
    CHECK(fuse_line(LineEvidence{}, {}) == 0.5);
    CHECK(fuse_line(evidence({{0, 0.99}, {0, 0.9}}), {}) == 0.5);
}

TEST_CASE("fuse_line_oracle examples") {
    CHECK(fuse_line_oracle(evidence({{1, 0.6}, {1, 0.6}})) ==
          doctest::Approx(0.6923076923076923).epsilon(1e-14));
    CHECK(fuse_line_oracle(LineEvidence{}) == 0.5);
    CHECK(fuse_line_oracle(evidence({{1, 0.5}, {-1, 0.5}, {1, 0.5}})) == 0.5);
}

TEST_CASE("duplicate annotators are rejected within a line") {
    LineEvidence ev;
    ev.add("a", Label::kCorrect, Probability(0.7));
    CHECK_THROWS_AS(ev.add("a", Label::kWrong, Probability(0.7)), Error);
    CHECK(ev.size() == 1);
    try {
        ev.add("a", Label::kWrong, Probability(0.7));
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kDuplicate);
    }
}

TEST_CASE("fuse_line agrees with both oracles on random evidence") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto r = random_evidence(rng);
        const auto ev = r.build();
        const double fused = fuse_line(ev, {});
        CHECK(std::abs(fused - fuse_line_oracle(ev)) < 1e-12);
        CHECK(std::abs(fused - static_cast<double>(oracle::bayes_posterior(r.labels, r.reliabilities))) <
              1e-12);
    }
}

TEST_CASE("a non-uniform prior enters as a logit term") {
    FusionConfig cfg;
    cfg.prior = 0.8;
    CHECK(fuse_line(LineEvidence{}, cfg) == doctest::Approx(0.8).epsilon(1e-14));
    const auto ev = evidence({{1, 0.6}, {-1, 0.9}});
    CHECK(fuse_line(ev, cfg) ==
          doctest::Approx(static_cast<double>(oracle::bayes_posterior({1, -1}, {0.6, 0.9}, 0.8L)))
              .epsilon(1e-13));
    CHECK(fuse_line_oracle(ev, 0.8) == doctest::Approx(fuse_line(ev, cfg)).epsilon(1e-13));
}

TEST_CASE("fusion properties") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> p(0.05, 0.95);

    SUBCASE("permutation invariance") {
        for (int trial = 0; trial < 300; ++trial) {
            auto r = random_evidence(rng);
            const double base = fuse_line(r.build(), {});
            std::vector<std::size_t> idx(r.labels.size());
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            RandomEvidence shuffled;
            for (auto i : idx) {
                shuffled.labels.push_back(r.labels[i]);
                shuffled.reliabilities.push_back(r.reliabilities[i]);
            }
            CHECK(std::abs(fuse_line(shuffled.build(), {}) - base) < 1e-12);
        }
    }

    SUBCASE("neutral annotator changes nothing") {
        for (int trial = 0; trial < 300; ++trial) {
            auto r = random_evidence(rng);
            auto ev = r.build();
            const double base = fuse_line(ev, {});
            ev.add("neutral", trial % 2 ? Label::kCorrect : Label::kWrong, Probability(0.5));
            CHECK(fuse_line(ev, {}) == base);
        }
    }

    SUBCASE("monotone in each reliability") {
        for (int trial = 0; trial < 300; ++trial) {
            auto r = random_evidence(rng, 9);
            r.labels.push_back(trial % 2 ? 1 : -1);
            r.reliabilities.push_back(0.05);
            double previous = fuse_line(r.build(), {});
            for (double q = 0.1; q <= 0.95; q += 0.05) {
                r.reliabilities.back() = q;
                const double now = fuse_line(r.build(), {});
                if (r.labels.back() == 1) {
                    CHECK(now > previous);
                } else {
                    CHECK(now < previous);
                }
                previous = now;
            }
        }
    }

    SUBCASE("label flip mirrors the posterior") {
        for (int trial = 0; trial < 300; ++trial) {
            auto r = random_evidence(rng);
            const double base = fuse_line(r.build(), {});
            for (auto& l : r.labels) l = -l;
            CHECK(std::abs(fuse_line(r.build(), {}) - (1.0 - base)) < 1e-12);
        }
    }
}

TEST_CASE("pairwise accumulation of many terms") {
    std::vector<double> terms(1000, 0.1);
    CHECK(accumulate_logits(terms) == doctest::Approx(100.0).epsilon(1e-13));
    CHECK(accumulate_logits({}) == 0.0);
    // Large cancelling terms keep the posterior neutral.
    LineEvidence ev;
    for (int i = 0; i < 200; ++i) {
        ev.add("a" + std::to_string(i), i % 2 ? Label::kCorrect : Label::kWrong, Probability(0.99));
    }
    CHECK(fuse_line(ev, {}) == 0.5);
}

TEST_CASE("score_sample examples") {
    const std::vector<double> mixed{0.9, 0.8, 0.3, 0.7};
    const auto s = score_sample("x", mixed, {});
    CHECK(s.correct_count == 3);
    CHECK(s.line_count == 4);
    CHECK(s.score == 0.75);
    CHECK(s.verdicts == std::vector<bool>{true, true, false, true});

    const std::vector<double> ties{0.5, 0.5};
    const auto t = score_sample("y", ties, {});
    CHECK(t.correct_count == 0);
    CHECK(t.score == 0.0);

    const std::vector<double> high{0.51, 0.99};
    CHECK(score_sample("z", high, {}).score == 1.0);

    try {
        score_sample("empty", std::span<const double>{}, {});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kEmptySample);
        CHECK(std::string(e.what()).find("empty sample") != std::string::npos);
    }
}

TEST_CASE("score bounds and the all-above-threshold rule") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> len(1, 20);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> post(len(rng));
        for (auto& x : post) x = u(rng);
        FusionConfig cfg;
        cfg.tau = 0.1 + 0.8 * u(rng);
        const auto s = score_sample("s", post, cfg);
        CHECK(s.score >= 0.0);
        CHECK(s.score <= 1.0);
        CHECK(s.score == static_cast<double>(s.correct_count) / static_cast<double>(s.line_count));
        const bool all_above = std::all_of(post.begin(), post.end(), [&](double x) { return x > cfg.tau; });
        CHECK((s.score == 1.0) == all_above);
    }
}

TEST_CASE("fusion config validation") {
    FusionConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.tau = 1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.prob_clamp = 0.5;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
