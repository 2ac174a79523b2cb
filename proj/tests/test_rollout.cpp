#include <doctest.h>

#include <cmath>
#include <json.hpp>

#include "bicot/rollout.hpp"
#include "policy_fixtures.hpp"
#include "world_fixtures.hpp"

using namespace bicot;
using bicot::testing::random_params;
using bicot::testing::tiny_world;

namespace {

PolicyParams world_params(std::uint64_t seed, int layers = 1, double scale = 0.5) {
  const auto cfg = PolicyConfig::for_world(tiny_world(), 8, 8, layers, 40);
  return random_params(cfg, seed, scale);
}

Prompt sky() { return Prompt::from_text("the K_sky and a red square", tiny_world()); }

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("semantic CoT respects the text phase and the length bound") {
  const auto params = world_params(1);
  const auto& w = tiny_world();
  GenConfig gen;
  gen.max_cot_len = 6;
  Rng rng(4);
  int truncated = 0, terminated = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto cot = generate_semantic_cot(params, sky(), w, gen, rng);
    REQUIRE(cot.tokens.size() <= 6u);
    REQUIRE(cot.logp.size() == cot.tokens.size());
    for (std::size_t j = 0; j < cot.tokens.size(); ++j) {
      const bool eos = cot.tokens[j] == Vocab::kEosText;
      REQUIRE((token_kind(cot.tokens[j], w.vocab()) == TokenKind::text || eos));
      REQUIRE((!eos || j + 1 == cot.tokens.size()));
    }
    REQUIRE(cot.truncated == (cot.tokens.back() != Vocab::kEosText));
    (cot.truncated ? truncated : terminated) += 1;
  }
  CHECK(truncated > 0);
  CHECK(terminated > 0);

  gen.max_cot_len = 1;
  for (int i = 0; i < 50; ++i) CHECK(generate_semantic_cot(params, sky(), w, gen, rng).tokens.size() == 1u);

  gen.greedy = true;
  gen.max_cot_len = 8;
  Rng r1(1), r2(99);
  CHECK(generate_semantic_cot(params, sky(), w, gen, r1).tokens ==
        generate_semantic_cot(params, sky(), w, gen, r2).tokens);
}

TEST_CASE("image generation emits exactly M image tokens") {
  const auto params = world_params(2);
  const auto& w = tiny_world();
  GenConfig gen;
  Rng rng(8);
  for (double s : {1.0, 3.0}) {
    gen.cfg_scale = s;
    for (int i = 0; i < 500; ++i) {
      const auto cot = generate_semantic_cot(params, sky(), w, gen, rng);
      const auto img = generate_image_tokens(params, sky(), &cot, w, gen, rng);
      REQUIRE(img.tokens.size() == static_cast<std::size_t>(w.num_cells()));
      for (TokenId t : img.tokens) REQUIRE(token_kind(t, w.vocab()) == TokenKind::image);
    }
  }
}

TEST_CASE("guidance mixing") {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> lc{-inf, -0.5, -1.2, -2.0};
  const std::vector<double> lu{-inf, -1.0, -1.0, -1.5};
  CHECK(guided_logits(lc, lu, 1.0) == lc);
  CHECK(guided_logits(lc, lc, 5.0) == lc);
  const auto mix = guided_logits(lc, lu, 3.0);
  CHECK(mix[0] == -inf);
  CHECK(mix[1] == doctest::Approx(-1.0 + 3.0 * 0.5));
  CHECK(mix[3] == doctest::Approx(-1.5 + 3.0 * -0.5));

  // scale 1 samples exactly what unguided conditional sampling does
  const auto params = world_params(3);
  GenConfig a, b;
  b.cfg_scale = 1.0;
  a.cfg_scale = 1.0;
  b.guided_traces = true;
  Rng ra(5), rb(5);
  const auto x = sample_response(params, nullptr, sky(), tiny_world(), a, ra);
  const auto y = sample_response(params, nullptr, sky(), tiny_world(), b, rb);
  CHECK(x.image.tokens == y.image.tokens);
  CHECK(x.old_trace.logp == y.old_trace.logp);
}

TEST_CASE("recorded traces equal re-evaluation exactly") {
  const auto& w = tiny_world();
  for (int layers : {1, 2})
    for (bool planned : {true, false})
      for (double s : {1.0, 4.0})
        for (bool guided : {false, true}) {
          const auto params = world_params(10 + static_cast<std::uint64_t>(layers), layers);
          GenConfig gen;
          gen.semantic_cot = planned;
          gen.cfg_scale = s;
          gen.guided_traces = guided;
          auto group = rollout_group(params, &params, sky(), 17, 4, w, gen);
          for (const auto& r : group.responses) {
            REQUIRE(r.old_trace.size() == r.num_targets());
            REQUIRE(r.num_targets() == r.cot_length() + static_cast<std::size_t>(w.num_cells()));
            REQUIRE(bit_equal(r.old_trace.logp, trace_under(params, group.prompt, r, w, gen).logp));
            REQUIRE(bit_equal(r.old_trace.logp, r.ref_trace.logp));
            REQUIRE((planned || r.cot.tokens.empty()));
          }
        }
}

TEST_CASE("unguided traces match sequence_logprob") {
  const auto& w = tiny_world();
  const auto params = world_params(21);
  GenConfig gen;
  gen.cfg_scale = 5.0;
  Rng rng(3);
  const auto r = sample_response(params, nullptr, sky(), w, gen, rng);
  std::vector<TokenId> context(sky().tokens);
  context.insert(context.end(), w.instruction().begin(), w.instruction().end());
  const auto text = sequence_logprob(params, context, r.cot.tokens,
                                     std::vector<Phase>(r.cot.tokens.size(), Phase::text));
  context.insert(context.end(), r.cot.tokens.begin(), r.cot.tokens.end());
  context.push_back(Vocab::kImgStart);
  const auto image = sequence_logprob(params, context, r.image.tokens,
                                      std::vector<Phase>(r.image.tokens.size(), Phase::image));
  std::vector<double> both = text.logp;
  both.insert(both.end(), image.logp.begin(), image.logp.end());
  CHECK(bit_equal(both, r.old_trace.logp));
}

TEST_CASE("segment contexts") {
  const auto& w = tiny_world();
  const auto params = world_params(31, 2);
  GenConfig gen;
  gen.max_cot_len = 5;
  Rng rng(2);
  int checked = 0;
  for (int trial = 0; trial < 40 && checked < 10; ++trial) {
    auto r = sample_response(params, nullptr, sky(), w, gen, rng);
    if (r.cot.tokens.size() < 2) continue;
    const auto base = trace_under(params, sky(), r, w, gen).logp;
    const auto s = r.cot.tokens.size();

    // perturbing image tokens leaves text entries untouched
    auto img = r;
    for (auto& t : img.image.tokens)
      t = w.vocab().image_range().begin + (t - w.vocab().image_range().begin + 1) % w.vocab().image_range().size();
    const auto moved = trace_under(params, sky(), img, w, gen).logp;
    for (std::size_t j = 0; j < s; ++j) REQUIRE(moved[j] == base[j]);

    // the first image entry depends on the earliest CoT token
    auto cot = r;
    const auto tr = w.vocab().text_range();
    cot.cot.tokens[0] = tr.begin + (cot.cot.tokens[0] - tr.begin + 1) % tr.size();
    const auto changed = trace_under(params, sky(), cot, w, gen).logp;
    REQUIRE(changed[s] != base[s]);
    ++checked;
  }
  CHECK(checked == 10);
}

TEST_CASE("rollout groups are reproducible and thread-count independent") {
  const auto& w = tiny_world();
  const auto params = world_params(41);
  GenConfig gen;
  gen.cfg_scale = 2.0;
  std::vector<Prompt> prompts{sky(), Prompt::from_text("a blue circle above a red square", w)};
  const auto a = rollout_batch(params, &params, prompts, {7, 8}, 3, w, gen, Execution::parallel);
  const auto b = rollout_batch(params, &params, prompts, {7, 8}, 3, w, gen, Execution::serial);
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t m = 0; m < 3; ++m) {
      CHECK(a[g].responses[m].cot.tokens == b[g].responses[m].cot.tokens);
      CHECK(a[g].responses[m].image.tokens == b[g].responses[m].image.tokens);
      CHECK(bit_equal(a[g].responses[m].old_trace.logp, b[g].responses[m].old_trace.logp));
    }
  const auto c = rollout_group(params, nullptr, prompts[1], 8, 3, w, gen);
  CHECK(c.responses[2].image.tokens == a[1].responses[2].image.tokens);
  CHECK_THROWS_AS(rollout_group(params, nullptr, sky(), 1, 1, w, gen), Error);
}

TEST_CASE("group members are exchangeable") {
  const auto& w = tiny_world();
  const auto params = world_params(51, 1, 0.8);
  GenConfig gen;
  gen.max_cot_len = 4;
  const int n = 5000;
  double s0 = 0, s1 = 0, q0 = 0, q1 = 0;
  for (int i = 0; i < n; ++i) {
    const auto g = rollout_group(params, nullptr, sky(), static_cast<std::uint64_t>(i), 2, w, gen, Execution::serial);
    const double x = g.responses[0].cot_length() + g.responses[0].grid.num_foreground();
    const double y = g.responses[1].cot_length() + g.responses[1].grid.num_foreground();
    s0 += x;
    s1 += y;
    q0 += x * x;
    q1 += y * y;
  }
  const double m0 = s0 / n, m1 = s1 / n;
  const double var = (q0 / n - m0 * m0 + q1 / n - m1 * m1) / n;
  MESSAGE("member means " << m0 << " vs " << m1);
  CHECK(std::abs(m0 - m1) < 4.0 * std::sqrt(var));
}

TEST_CASE("guided response tape gradient matches finite differences") {
  const auto& w = tiny_world();
  for (bool guided : {false, true}) {
    auto params = world_params(61, 2);
    GenConfig gen;
    gen.cfg_scale = 3.0;
    gen.guided_traces = guided;
    gen.max_cot_len = 4;
    Rng rng(9);
    const auto r = sample_response(params, nullptr, sky(), w, gen, rng);
    std::vector<double> weights(r.num_targets());
    for (auto& x : weights) x = std::uniform_real_distribution<double>(-1, 1)(rng);
    auto objective = [&](const PolicyParams& p) {
      ResponseTape t(p, sky(), r, w, gen);
      double acc = 0;
      for (std::size_t j = 0; j < weights.size(); ++j) acc += weights[j] * t.logprobs()[j];
      return acc;
    };
    ResponseTape tape(params, sky(), r, w, gen);
    auto grad = params.zeros_like();
    tape.backward(weights, grad);
    double worst = 0;
    const double h = 1e-5;
    for (int k = 0; k < 60; ++k) {
      const auto i = static_cast<std::size_t>(rng() % params.size());
      const double v = params.values()[i];
      params.values()[i] = v + h;
      const double up = objective(params);
      params.values()[i] = v - h;
      const double dn = objective(params);
      params.values()[i] = v;
      const double fd = (up - dn) / (2 * h);
      const double err = std::abs(fd - grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(grad[i]));
      worst = std::max(worst, err);
    }
    MESSAGE("guided=" << guided << " worst relative error " << worst);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("rollout dump records") {
  const auto& w = tiny_world();
  const auto params = world_params(71);
  GenConfig gen;
  Rng rng(1);
  const auto r = sample_response(params, nullptr, sky(), w, gen, rng);
  const auto rep = score_image(r.grid, sky().spec, w, RewardConfig{});
  const auto j = nlohmann::json::parse(rollout_record(sky(), r, &rep, w, 0.25));
  CHECK(j["prompt"] == "the K_sky and a red square");
  CHECK(j["cot"].size() == r.cot.tokens.size());
  CHECK(j["image"].size() == 9u);
  CHECK(j["reward"]["final"].get<double>() == rep.final);
  CHECK(j["reward"]["mask"] == "hdvo");
  CHECK(j["advantage"].get<double>() == 0.25);
  CHECK(grid_from_text(j["grid"].get<std::string>()) == r.grid);
}
