// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "veinatn/dataset.hpp"
#include "veinatn/eval.hpp"

using namespace veinatn;
using namespace veinatn::testing;

namespace {

ScoreSet hand_set() { return {{0.9, 0.8, 0.4}, {0.5, 0.3, 0.2}}; }

Model one_class_model() {
  Model m;
  m.config.num_classes = 1;
  m.config.input_size = 32;
  m.config.pool_grid = 4;
  m.params = init_model(m.config, 3);
  return m;
}

Model small_model(int classes, std::uint64_t seed) {
  Model m;
  m.config.num_classes = classes;
  m.config.input_size = 32;
  m.config.pool_grid = 4;
  m.params = init_model(m.config, seed);
  return m;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("fmr and fnmr") {
    const auto s = hand_set();
    auto r = fmr_fnmr(s, 0.1);
    CHECK(r.fmr == 1.0);
    CHECK(r.fnmr == 0.0);
    r = fmr_fnmr(s, 0.95);
    CHECK(r.fmr == 0.0);
    CHECK(r.fnmr == 1.0);
    r = fmr_fnmr(s, 0.45);
    CHECK(r.fmr == doctest::Approx(1.0 / 3));
    CHECK(r.fnmr == doctest::Approx(1.0 / 3));
    r = fmr_fnmr(s, 0.5);  // accept on tie
    CHECK(r.fmr == doctest::Approx(1.0 / 3));
    CHECK_THROWS(fmr_fnmr(ScoreSet{{}, {0.1}}, 0.5));
  }

  TEST_CASE("eer examples") {
    CHECK(eer(hand_set()).eer == doctest::Approx(1.0 / 3));
    CHECK(eer(ScoreSet{{0.7, 0.8, 0.9}, {0.1, 0.2}}).eer == 0.0);
    CHECK(eer(ScoreSet{{0.1, 0.5, 0.9}, {0.9, 0.5, 0.1}}).eer == 0.5);
    const auto b = brute_eer(hand_set().genuine, hand_set().impostor);
    CHECK(eer(hand_set()).eer == b.eer);
    CHECK(eer(hand_set()).threshold == b.threshold);
    CHECK_THROWS(eer(ScoreSet{{0.1}, {}}));
  }

  TEST_CASE("tar examples") {
    const ScoreSet sep{{0.7, 0.8, 0.9}, std::vector<double>(2000, 0.1)};
    for (double t : kTarTargets) CHECK(tar_at_fmr(sep, t).tar == 1.0);
    const ScoreSet few{{0.9}, std::vector<double>(100, 0.1)};
    CHECK(tar_at_fmr(few, 0.0001).under_resolved);
    CHECK_FALSE(tar_at_fmr(ScoreSet{{0.9}, std::vector<double>(1000, 0.1)}, 0.01).under_resolved);

    // Large seeded normal score sets against the exhaustive oracle.
    Rng rng(2024);
    ScoreSet big;
    for (int i = 0; i < 100000; ++i) big.genuine.push_back(rng.normal(0.8, 0.05));
    for (int i = 0; i < 100000; ++i) big.impostor.push_back(rng.normal(0.2, 0.05));
    const auto got = tar_at_fmr(big, 0.01);
    const auto oracle = sorted_tar(big.genuine, big.impostor, 0.01);
    CHECK(got.tar == oracle.tar);
    CHECK(got.threshold == oracle.threshold);
    // The two oracles agree on a subsample small enough for the sweep.
    const std::vector<double> g(big.genuine.begin(), big.genuine.begin() + 300);
    const std::vector<double> i(big.impostor.begin(), big.impostor.begin() + 300);
    const auto small_sorted = sorted_tar(g, i, 0.01), small_brute = brute_tar(g, i, 0.01);
    CHECK(small_sorted.tar == small_brute.tar);
    CHECK(small_sorted.threshold == small_brute.threshold);
  }

  TEST_CASE("det curve") {
    Rng rng(4);
    ScoreSet s;
    for (int i = 0; i < 50; ++i) s.genuine.push_back(std::round(rng.uniform(0.3, 1.0) * 20) / 20);
    for (int i = 0; i < 80; ++i) s.impostor.push_back(std::round(rng.uniform(0.0, 0.7) * 20) / 20);
    const auto det = det_curve(s);
    REQUIRE(det.size() >= 2);
    CHECK(det.front().fmr == 1.0);
    CHECK(det.back().fnmr == 1.0);
    for (std::size_t i = 1; i < det.size(); ++i) {
      CHECK(det[i].threshold > det[i - 1].threshold);
      CHECK(det[i].fmr <= det[i - 1].fmr);
      CHECK(det[i].fnmr >= det[i - 1].fnmr);
    }
    const auto e = eer(s);
    const auto d = eer_from_det(det);
    CHECK(d.eer == e.eer);
    CHECK(d.threshold == e.threshold);
  }

  TEST_CASE("per stream report") {
    // Enhanced separates perfectly, normal overlaps.
    std::vector<ScorePair> pairs;
    Rng rng(8);
    for (int i = 0; i < 40; ++i) {
      const bool gen = i % 4 == 0;
      ScorePair p;
      p.probe = "p" + std::to_string(i / 4);
      p.claimed_id = i % 4;
      p.genuine = gen;
      p.normal = gen ? rng.uniform(0.3, 1.0) : rng.uniform(0.0, 0.7);
      p.enhanced = gen ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4);
      p.fused = p.normal + p.enhanced;
      pairs.push_back(p);
    }
    const auto report = per_stream_report(pairs);
    REQUIRE(report.size() == 3);
    CHECK(report[1].eer.eer < report[0].eer.eer);
    for (const auto& m : report) {
      CHECK(std::isfinite(m.eer.eer));
      for (const auto& t : m.tar) CHECK(std::isfinite(t.tar));
      CHECK(m.genuine_count == 10);
      CHECK(m.impostor_count == 30);
    }
    const auto fused = select_view(pairs, ScoreView::kFused);
    for (std::size_t i = 0; i < fused.genuine.size(); ++i) CHECK(fused.genuine[i] == pairs[4 * i].fused);
    const auto kv = metrics_report(report);
    for (const char* key : {"fused.eer", "fused.eer_threshold", "fused.tar_at_1pct", "fused.tar_at_0p1pct",
                            "fused.tar_at_0p01pct", "normal.genuine_count", "enhanced.impostor_count"}) {
      CHECK(kv.contains(key));
    }
    CHECK(kv.contains("fused.warning"));
  }

  TEST_CASE("comparison scores") {
    const auto m = one_class_model();
    const auto x = random_tensor({1, 3, 32, 32}, 1, 0, 1).cast<float>();
    const auto s = comparison_score(m, m, x, x, 0);
    CHECK(s.normal == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s.enhanced == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s.fused == s.normal + s.enhanced);
    CHECK_THROWS(comparison_score(m, m, x, x, 1));
    CHECK_THROWS(comparison_score(small_model(3, 1), small_model(4, 2), x, x, 0));

    const auto n = small_model(5, 1), e = small_model(5, 2);
    const auto all = score_all_claims(n, e, x, random_tensor({1, 3, 32, 32}, 2, 0, 1).cast<float>(), 2, "p");
    REQUIRE(all.size() == 5);
    double total = 0;
    for (const auto& p : all) {
      CHECK(p.fused == p.normal + p.enhanced);
      CHECK(p.normal >= 0.0);
      CHECK(p.normal <= 1.0);
      CHECK(p.genuine == (p.claimed_id == 2));
      total += p.fused;
    }
    CHECK(std::abs(total - 2.0) < 1e-5);
  }

  TEST_CASE("protocol arithmetic") {
    ProtocolSpec p;
    p.identities.resize(300);
    p.test.resize(3000);
    CHECK(count_scores(p) == ScoreCounts{3000, 897000});
    p.identities.resize(492);
    p.test.resize(492 * 6);
    CHECK(count_scores(p) == ScoreCounts{2952, 1449432});
    p.identities.resize(312);
    p.test.resize(312 * 6);
    CHECK(count_scores(p) == ScoreCounts{1872, 582192});
  }

  TEST_CASE("generated scores on a toy tree") {
    const auto root = fresh_dir("eval_toy");
    make_toy_dataset(root, 4, 3, 32, 2);
    const auto protocol = build_protocol(root, "heldin");
    const auto n = small_model(4, 1), e = small_model(4, 2);
    const auto scores = generate_scores(protocol, n, e);
    const auto ss = select_view(scores, ScoreView::kFused);
    CHECK(ss.genuine.size() == 12);
    CHECK(ss.impostor.size() == 36);
    CHECK(count_scores(protocol) == ScoreCounts{12, 36});
    ScoringOptions threaded;
    threaded.threads = 3;
    CHECK(generate_scores(protocol, n, e, threaded) == scores);
    CHECK_THROWS(generate_scores(protocol, small_model(3, 1), e));

    const auto dir = fresh_dir("eval_csv");
    write_scores_csv(scores, dir / "s.csv");
    std::ifstream in(dir / "s.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == kScoresHeader);
    const auto back = read_scores_csv(dir / "s.csv");
    REQUIRE(back.size() == scores.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].probe == scores[i].probe);
      CHECK(back[i].genuine == scores[i].genuine);
      CHECK(std::abs(back[i].fused - scores[i].fused) <= 1e-8 * std::max(1.0, std::abs(scores[i].fused)));
    }
  }

  TEST_CASE("det csv round trip") {
    const auto dir = fresh_dir("eval_det");
    const auto det = det_curve(hand_set());
    write_det_csv(det, dir / "d.csv");
    const auto back = read_det_csv(dir / "d.csv");
    REQUIRE(back.size() == det.size());
    for (std::size_t i = 0; i < det.size(); ++i) {
      CHECK(back[i].threshold == det[i].threshold);
      CHECK(back[i].fmr == det[i].fmr);
      CHECK(back[i].fnmr == det[i].fnmr);
    }
    std::ofstream(dir / "bad.csv") << "thr,fmr,fnmr\n0.1,1,0\n";
    CHECK_THROWS(read_det_csv(dir / "bad.csv"));
  }
}
