#include "oracles.hpp"
#include "rlscale/replay.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace rlscale;
using namespace rlscale::algos;

namespace {

// Observation (sim, index) makes every stored row identifiable.
void push(ReplayBuffer& rb, std::size_t sim, double reward = 0.0, bool done = false, int action = 0) {
  const double obs[2] = {static_cast<double>(sim), static_cast<double>(rb.appended(sim))};
  rb.append(sim, obs, action, reward, done);
}

}  // namespace

TEST_CASE("replay append") {
  ReplayBuffer rb(40, 4, 2);
  CHECK(rb.segment_capacity() == 10);
  SUBCASE("ring overwrites the oldest entry") {
    for (int i = 0; i < 11; ++i) push(rb, 0);
    CHECK(rb.segment_size(0) == 10);
    CHECK(rb.appended(0) == 11);
    CHECK_THROWS_AS(rb.entry(0, 0), RuntimeError);
    CHECK(rb.entry(0, 1).obs[1] == 1.0);
    CHECK(rb.entry(0, 10).obs[1] == 10.0);
  }
  SUBCASE("appending to one simulator leaves the others untouched") {
    push(rb, 3);
    CHECK(rb.segment_size(3) == 1);
    for (std::size_t s = 0; s < 3; ++s) CHECK(rb.segment_size(s) == 0);
  }
  SUBCASE("counters grow by one per append") {
    for (int i = 0; i < 5; ++i) {
      push(rb, static_cast<std::size_t>(i % 4));
      CHECK(rb.total_appended() == static_cast<std::uint64_t>(i + 1));
    }
  }
  SUBCASE("errors") {
    const double obs[2] = {0, 0};
    const double short_obs[1] = {0};
    CHECK_THROWS_AS(rb.append(4, obs, 0, 0, false), ShapeError);
    CHECK_THROWS_AS(rb.append(0, short_obs, 0, 0, false), ShapeError);
    CHECK_THROWS_AS(ReplayBuffer(3, 2, 1), ConfigError);
  }
}

TEST_CASE("replay sample") {
  Rng rng(3);
  SUBCASE("n_step 1 gives plain transitions") {
    ReplayBuffer rb(20, 1, 2);
    for (int i = 0; i < 6; ++i) push(rb, 0, i * 1.0, false, i % 3);
    const auto mb = rb.sample(50, 1, 0.9, rng);
    for (std::size_t i = 0; i < mb.size(); ++i) {
      const double idx = mb.obs(static_cast<Eigen::Index>(i), 1);
      CHECK(mb.next_obs(static_cast<Eigen::Index>(i), 1) == idx + 1);
      CHECK(mb.returns[i] == idx);
      CHECK(mb.discounts[i] == 0.9);
      CHECK(mb.actions[i] == static_cast<int>(idx) % 3);
    }
  }
  SUBCASE("single valid transition sampled with replacement") {
    ReplayBuffer rb(4, 1, 2);
    push(rb, 0, 1.0);
    push(rb, 0, 2.0);
    CHECK(rb.valid_count(1) == 1);
    const auto mb = rb.sample(4, 1, 0.9, rng);
    CHECK(mb.size() == 4);
    for (auto idx : mb.indices) CHECK(idx == 0);
    CHECK(rb.total_sampled() == 4);
  }
  SUBCASE("insufficient history") {
    ReplayBuffer rb(4, 2, 2);
    push(rb, 0);
    CHECK_THROWS_AS(rb.sample(1, 1, 0.9, rng), RuntimeError);
    CHECK_THROWS_AS(rb.sample(1, 2, 0.9, rng), ConfigError);
  }
  SUBCASE("uniform frequencies over valid pairs") {
    ReplayBuffer rb(30, 3, 2);
    for (int i = 0; i < 7; ++i) push(rb, 0);
    for (int i = 0; i < 12; ++i) push(rb, 1);  // wrapped: 10 stored
    for (int i = 0; i < 4; ++i) push(rb, 2);
    const std::size_t cells = rb.valid_count(2);
    CHECK(cells == 5 + 8 + 2);
    std::map<std::pair<std::size_t, std::uint64_t>, int> counts;
    const int draws = 100000;
    const auto mb = rb.sample(draws, 2, 0.9, rng);
    for (std::size_t i = 0; i < mb.size(); ++i) counts[{mb.sims[i], mb.indices[i]}] += 1;
    CHECK(counts.size() == cells);
    const double p = 1.0 / static_cast<double>(cells);
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (const auto& [key, c] : counts) CHECK(std::abs(c - draws * p) < 3.5 * sigma);
  }
}

TEST_CASE("property: replay matches a naive list-based replay") {
  Rng rng(17);
  std::bernoulli_distribution done(0.15);
  std::uniform_real_distribution<double> rew(-1.0, 1.0);
  std::uniform_int_distribution<int> act(0, 3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t sims = 1 + static_cast<std::size_t>(trial % 4), cap = 5 + static_cast<std::size_t>(trial % 6);
    ReplayBuffer rb(sims * cap, sims, 2);
    oracle::ListReplay ref(sims, cap);
    std::uniform_int_distribution<std::size_t> which(0, sims - 1);
    const std::size_t n_step = 1 + static_cast<std::size_t>(trial % 3);
    for (int step = 0; step < 200; ++step) {
      const std::size_t s = which(rng);
      const double r = rew(rng);
      const bool d = done(rng);
      const int a = act(rng);
      push(rb, s, r, d, a);
      ref.append(s, a, r, d);
      if (step % 20 != 19) continue;
      CHECK(rb.valid_count(n_step) == ref.valid_count(n_step));
      if (rb.valid_count(n_step) == 0) continue;
      const auto mb = rb.sample(64, n_step, 0.9, rng);
      for (std::size_t i = 0; i < mb.size(); ++i) {
        const std::size_t sim = mb.sims[i];
        const auto idx = static_cast<std::size_t>(mb.indices[i]);
        REQUIRE(ref.valid(sim, idx, n_step));
        const auto row = static_cast<Eigen::Index>(i);
        CHECK(mb.obs(row, 0) == static_cast<double>(sim));
        CHECK(mb.obs(row, 1) == static_cast<double>(idx));
        CHECK(mb.actions[i] == ref.hist[sim][idx].action);
        const auto t = ref.nstep(sim, idx, n_step, 0.9);
        CHECK(std::abs(mb.returns[i] - t.ret) < 1e-12);
        CHECK(static_cast<bool>(mb.dones[i]) == t.done);
        CHECK(std::abs(mb.discounts[i] - t.discount) < 1e-15);
        if (!t.done) CHECK(mb.next_obs(row, 1) == static_cast<double>(idx + n_step));
      }
    }
  }
}

TEST_CASE("append_batch stores columns per simulator in time order") {
  sampler::SampleBatch b;
  b.allocate(3, 2, 1);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      b.obs(static_cast<Eigen::Index>(b.index(t, c)), 0) = static_cast<double>(10 * c + t);
      b.rewards[b.index(t, c)] = static_cast<double>(t);
    }
  ReplayBuffer rb(20, 2, 1);
  rb.append_batch(b);
  CHECK(rb.appended(0) == 3);
  CHECK(rb.appended(1) == 3);
  CHECK(rb.entry(1, 2).obs[0] == 12.0);
  CHECK(rb.entry(0, 1).reward == 1.0);
  ReplayBuffer wrong(30, 3, 1);
  CHECK_THROWS_AS(wrong.append_batch(b), ShapeError);
}
