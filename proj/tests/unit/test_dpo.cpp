#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "vlfuzz/dpo_core.hpp"
#include "vlfuzz/taxonomy.hpp"

using namespace vlfuzz::dpo;
namespace oracle = vlfuzz::oracle;

namespace {

const double kLn2 = std::log(2.0);

ToyPolicy random_policy(std::size_t rows, std::size_t width, std::uint64_t seed, double scale = 1.0) {
  vlfuzz::Rng rng(seed);
  std::vector<double> th(rows * width);
  for (auto& v : th) v = scale * rng.normal();
  return ToyPolicy(rows, width, th);
}

}  // namespace

TEST_CASE("template library shapes") {
  const auto a = make_template_library(Granularity::SubdimensionRole);
  CHECK(a.rows() == 192);
  CHECK(a.width() == 4);
  CHECK(a.row_for(3, 2) == static_cast<std::size_t>(vlfuzz::taxonomy::context_index(3, 2)));
  const auto b = make_template_library(Granularity::Subdimension);
  CHECK(b.rows() == 24);
  CHECK(b.width() == 32);
  CHECK(b.row_for(3, 7) == 2);
  CHECK(b.column_for(7, 1) == 25);
  CHECK(b.template_roles[0][25] == 7);
  CHECK(b.templates[2][b.column_for(7, 1)] == a.templates[a.row_for(3, 7)][1]);

  auto bad = a;
  bad.templates[5][1] = bad.templates[5][0];
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(granularity_from_string(to_string(Granularity::Subdimension)) == Granularity::Subdimension);
}

TEST_CASE("policy rows are distributions and shift invariant") {
  auto p = random_policy(6, 5, 1, 3.0);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const auto pr = p.probs(r);
    double s = 0.0;
    for (double v : pr) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  auto q = p;
  for (std::size_t k = 0; k < q.width(); ++k) q.logit(2, k) += 7.5;
  for (std::size_t k = 0; k < q.width(); ++k) CHECK(q.probs(2)[k] == doctest::Approx(p.probs(2)[k]).epsilon(1e-12));
  for (std::uint64_t s = 0; s < 200; ++s) CHECK(q.sample(2, s) == p.sample(2, s));

  const std::vector<PolicyPair> pairs{{2, 0, 2, 3}, {1, 1, 2, 4}};
  const RefPolicy ref(random_policy(6, 5, 2));
  DpoConfig cfg;
  cfg.lambda_kl = 0.3;
  CHECK(dpo_loss(q, ref, pairs, cfg) == doctest::Approx(dpo_loss(p, ref, pairs, cfg)).epsilon(1e-12));
}

TEST_CASE("sft loss") {
  const ToyPolicy u(3, 4);
  const std::vector<SftTarget> one{{1, 2}};
  CHECK(sft_loss(u, one) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const std::vector<SftTarget> two{{0, 0}, {2, 3}};
  CHECK(sft_loss(u, two) == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  ToyPolicy peaked(1, 4);
  peaked.logit(0, 1) = 20.0;
  const std::vector<SftTarget> hit{{0, 1}};
  CHECK(sft_loss(peaked, hit) <= 1e-6);

  const std::vector<SftTarget> bad{{0, 9}};
  CHECK_THROWS_AS(sft_loss(peaked, bad), std::out_of_range);
  CHECK_THROWS_AS(sft_loss(peaked, std::vector<SftTarget>{}), std::invalid_argument);
}

TEST_CASE("sft gradient matches finite differences and fitting lowers the loss") {
  auto p = random_policy(3, 4, 8);
  const std::vector<SftTarget> batch{{0, 1}, {0, 3}, {2, 2}};
  const auto g = grad_sft(p, batch);
  const double h = 1e-5;
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto up = p, down = p;
    up.theta()[i] += h;
    down.theta()[i] -= h;
    const double fd = (sft_loss(up, batch) - sft_loss(down, batch)) / (2 * h);
    CHECK(std::abs(fd - g[i]) < 1e-8);
  }
  CHECK(std::all_of(g.begin() + 4, g.begin() + 8, [](double v) { return v == 0.0; }));
  SftConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.steps = 100;
  const auto fit = fit_sft(p, batch, cfg);
  CHECK(fit.losses.back() < fit.losses.front());
  CHECK(fit.policy.probs(2)[2] > 0.9);
}

TEST_CASE("dpo delta") {
  const auto p = random_policy(4, 5, 3);
  const RefPolicy same(p);
  CHECK(dpo_delta(p, same, 1, 0, 3) == 0.0);

  // raise the winner logit by one over the reference
  auto q = p;
  q.logit(1, 0) += 1.0;
  const double d = dpo_delta(q, same, 1, 0, 3);
  const auto lq = oracle::log_softmax(q, 1), lr = oracle::log_softmax(p, 1);
  const auto want = (lq[0] - lq[3]) - (lr[0] - lr[3]);
  CHECK(std::abs(d - static_cast<double>(want)) < 1e-13);
  CHECK(std::abs(d - 1.0) < 1e-13);

  const RefPolicy ref(random_policy(4, 5, 4));
  CHECK(dpo_delta(p, ref, 2, 1, 4) == doctest::Approx(-dpo_delta(p, ref, 2, 4, 1)).epsilon(1e-14));
  CHECK_THROWS_AS(dpo_delta(p, ref, 2, 1, 1), std::invalid_argument);
}

TEST_CASE("dpo loss values") {
  DpoConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto draw = oracle::random_dpo_draw(s);
    const RefPolicy ref(draw.policy);
    CHECK(std::abs(dpo_loss(draw.policy, ref, draw.pairs, draw.cfg) - kLn2) <= 1e-12);
  }

  // beta 1, no KL, a single pair with delta 2
  ToyPolicy ref0(1, 3);
  ToyPolicy pol(1, 3);
  pol.logit(0, 0) = 1.0;
  pol.logit(0, 1) = -1.0;
  const std::vector<PolicyPair> pair{{0, 0, 0, 1}};
  cfg.beta = 1.0;
  cfg.lambda_kl = 0.0;
  REQUIRE(dpo_delta(pol, RefPolicy(ref0), pair[0]) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(std::abs(dpo_loss(pol, RefPolicy(ref0), pair, cfg) - 0.12692801104297263) < 1e-15);

  // library loss equals the extended-precision oracle
  for (std::uint64_t s = 100; s < 130; ++s) {
    const auto d = oracle::random_dpo_draw(s);
    const RefPolicy ref(d.ref);
    const auto want = oracle::dpo_loss(d.policy, d.ref, d.pairs, d.cfg.beta, d.cfg.lambda_kl);
    CHECK(std::abs(dpo_loss(d.policy, ref, d.pairs, d.cfg) - static_cast<double>(want)) < 1e-12);
  }
  CHECK_THROWS_AS(dpo_loss(pol, RefPolicy(ref0), std::vector<PolicyPair>{}, cfg), std::invalid_argument);
}

TEST_CASE("kl is zero exactly when rows coincide") {
  const auto p = random_policy(3, 4, 11);
  CHECK(kl_row(p, RefPolicy(p), 0) == 0.0);
  auto q = p;
  for (std::size_t k = 0; k < 4; ++k) q.logit(1, k) -= 3.0;
  CHECK(kl_row(q, RefPolicy(p), 1) < 1e-15);
  q.logit(1, 2) += 0.5;
  CHECK(kl_row(q, RefPolicy(p), 1) > 0.0);
}

TEST_CASE("dpo gradient: finite differences, zero rows, signs") {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto d = oracle::random_dpo_draw(1000 + s);
    const RefPolicy ref(d.ref);
    const auto g = grad_dpo(d.policy, ref, d.pairs, d.cfg);
    const auto fd = oracle::fd_gradient(d.policy, d.ref, d.pairs, d.cfg, 1e-5);
    worst = std::max(worst, oracle::max_relative_error(g, fd));
    const auto used = pair_rows(d.pairs);
    for (std::size_t row = 0; row < d.policy.rows(); ++row) {
      if (std::find(used.begin(), used.end(), row) != used.end()) continue;
      for (std::size_t k = 0; k < d.policy.width(); ++k) CHECK(g[row * d.policy.width() + k] == 0.0);
    }
  }
  MESSAGE("max relative error " << worst);
  CHECK(worst <= 1e-5);

  // policy = ref, no KL, one pair: winner pushed up, loser down, equal size
  const auto p = random_policy(2, 4, 5);
  DpoConfig cfg;
  cfg.lambda_kl = 0.0;
  cfg.beta = 0.4;
  const std::vector<PolicyPair> pair{{1, 0, 1, 2}};
  const auto g = grad_dpo(p, RefPolicy(p), pair, cfg);
  const double gw = g[4 + 0], gl = g[4 + 2];
  CHECK(gw < 0.0);
  CHECK(gl > 0.0);
  // same-row pair: the softmax terms cancel and only the two logits move
  CHECK(gw == doctest::Approx(-cfg.beta / 2).epsilon(1e-12));
  CHECK(gl == doctest::Approx(cfg.beta / 2).epsilon(1e-12));
  CHECK(g[4 + 1] == doctest::Approx(0.0));
  CHECK(g[4 + 3] == doctest::Approx(0.0));
  const auto fd = oracle::fd_gradient(p, p, pair, cfg, 1e-5);
  CHECK(oracle::max_relative_error(g, fd) <= 1e-5);
}

TEST_CASE("optimize: zero steps, monotone loss, preference learned") {
  const ToyPolicy p(3, 4);
  const RefPolicy ref(p);
  const std::vector<PolicyPair> pair{{1, 2, 1, 0}};
  DpoConfig cfg;
  cfg.steps = 0;
  const auto none = optimize(p, ref, pair, cfg);
  CHECK(std::equal(none.policy.theta().begin(), none.policy.theta().end(), p.theta().begin()));

  cfg.steps = 200;
  const auto run = optimize(p, ref, pair, cfg);
  REQUIRE(run.losses.size() == 201);
  for (std::size_t i = 2; i < run.losses.size(); ++i) CHECK(run.losses[i] <= run.losses[i - 1] + 1e-9);
  const auto after = run.policy.probs(1), before = p.probs(1);
  CHECK(after[2] > after[0]);
  CHECK(after[2] > before[2]);

  const auto again = optimize(p, ref, pair, cfg);
  CHECK(std::equal(again.policy.theta().begin(), again.policy.theta().end(), run.policy.theta().begin()));
}

TEST_CASE("optimize: large KL weight keeps the policy near the reference") {
  const auto p = random_policy(2, 5, 31);
  const RefPolicy ref(p);
  const std::vector<PolicyPair> pairs{{0, 1, 0, 3}, {1, 0, 1, 4}};
  DpoConfig cfg;
  cfg.lambda_kl = 1000.0;
  cfg.learning_rate = 1e-4;
  cfg.steps = 100;
  const auto run = optimize(p, ref, pairs, cfg);
  for (std::size_t row = 0; row < 2; ++row) CHECK(kl_row(run.policy, ref, row) <= 1e-3);
}

TEST_CASE("optimize: without KL the winner/loser ratio grows monotonically") {
  const auto p = random_policy(1, 4, 41);
  const RefPolicy ref(p);
  const std::vector<PolicyPair> pair{{0, 3, 0, 1}};
  DpoConfig cfg;
  cfg.lambda_kl = 0.0;
  cfg.learning_rate = 0.5;
  ToyPolicy cur = p;
  double last = cur.probs(0)[3] / cur.probs(0)[1];
  cfg.steps = 1;
  for (int i = 0; i < 300; ++i) {
    cur = optimize(cur, ref, pair, cfg).policy;
    const double ratio = cur.probs(0)[3] / cur.probs(0)[1];
    CHECK(ratio > last);
    last = ratio;
  }
}

TEST_CASE("divergence aborts with diagnostics") {
  const auto p = random_policy(1, 3, 51);
  const std::vector<PolicyPair> pair{{0, 0, 0, 1}};
  DpoConfig cfg;
  cfg.lambda_kl = 50.0;
  cfg.learning_rate = 500.0;
  cfg.steps = 50;
  try {
    optimize(p, RefPolicy(p), pair, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("snapshot round trip keeps full precision") {
  const auto lib = make_template_library(Granularity::SubdimensionRole);
  const auto p = random_policy(lib.rows(), lib.width(), 61, 1.7);
  const auto j = snapshot_to_json("policy-1", "policy-0", lib, p, {{"beta", 0.1}});
  const auto back = snapshot_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.snapshot_id == "policy-1");
  CHECK(back.parent_id == "policy-0");
  CHECK(back.library.templates == lib.templates);
  CHECK(std::equal(back.policy.theta().begin(), back.policy.theta().end(), p.theta().begin()));
  CHECK_THROWS(snapshot_from_json({{"format", "other"}}));
}
