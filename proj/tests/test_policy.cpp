#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "bicot/policy.hpp"
#include "policy_fixtures.hpp"

using namespace bicot;
using bicot::testing::random_bicot_sequence;
using bicot::testing::random_params;
using bicot::testing::tiny_config;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double weighted_logprob(const PolicyParams& p, const WeightedSequence& ws) {
  SequenceTape tape(p, ws.sequence);
  double acc = 0.0;
  for (std::size_t j = 0; j < ws.weights.size(); ++j) acc += ws.weights[j] * tape.target_logprobs()[j];
  return acc;
}

// Central differences over every parameter.
ParamVector finite_difference(PolicyParams p, const std::vector<WeightedSequence>& batch, double step) {
  ParamVector g(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double orig = p.values()[k];
    p.values()[k] = orig + step;
    double plus = 0.0;
    for (const auto& ws : batch) plus += weighted_logprob(p, ws);
    p.values()[k] = orig - step;
    double minus = 0.0;
    for (const auto& ws : batch) minus += weighted_logprob(p, ws);
    p.values()[k] = orig;
    g[k] = (plus - minus) / (2.0 * step);
  }
  return g;
}

double relative_error(const ParamVector& a, const ParamVector& b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max({l2_norm(a), l2_norm(b), 1e-12});
  return std::sqrt(diff) / scale;
}

}  // namespace

TEST_CASE("forward_logits: phase masks and determinism") {
  auto cfg = tiny_config();
  auto p = random_params(cfg, 1);
  auto text_logits = forward_logits(p, {}, Phase::text);
  for (TokenId id = 0; id < cfg.vocab_size; ++id) {
    if (cfg.text_range.contains(id) || id == Vocab::kEosText)
      CHECK(std::isfinite(text_logits[static_cast<std::size_t>(id)]));
    else
      CHECK(text_logits[static_cast<std::size_t>(id)] == -kInf);
  }
  const std::vector<TokenId> ctx = {4, 5, Vocab::kEosText, Vocab::kImgStart, 6};
  auto img = forward_logits(p, ctx, Phase::image);
  for (TokenId id = 0; id < cfg.vocab_size; ++id)
    CHECK(std::isfinite(img[static_cast<std::size_t>(id)]) == cfg.image_range.contains(id));
  CHECK(forward_logits(p, ctx, Phase::image) == img);

  std::vector<TokenId> too_long(static_cast<std::size_t>(cfg.max_text_len), 4);
  try {
    forward_logits(p, too_long, Phase::text);
    FAIL("expected ContextTooLong");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::context_too_long);
  }
}

TEST_CASE("causality: logits at a position ignore every later token") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    auto p = random_params(cfg, 100 + trial);
    auto seq = random_bicot_sequence(cfg, rng, 2, 3, 4);
    SequenceTape base(p, seq);
    const std::size_t cut = rng() % seq.targets.size();
    auto perturbed = seq;
    for (std::size_t j = cut + 1; j < seq.targets.size(); ++j) {
      auto& tok = perturbed.tokens[seq.targets[j]];
      const auto range = seq.phases[j] == Phase::image ? cfg.image_range : cfg.text_range;
      if (tok != Vocab::kEosText) tok = range.begin + static_cast<TokenId>(rng() % range.size());
    }
    // Replace the token at the cut too: it is predicted at `cut` and only
    // feeds later positions.
    SequenceTape other(p, perturbed);
    for (std::size_t j = 0; j <= cut; ++j) {
      auto a = base.log_distribution(j);
      auto b = other.log_distribution(j);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("normalization and masking of full distributions") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(cfg, 500 + trial, 2.0);
    auto seq = random_bicot_sequence(cfg, rng, 3, 2, 4);
    SequenceTape tape(p, seq);
    for (std::size_t j = 0; j < seq.num_targets(); ++j) {
      auto ld = tape.log_distribution(j);
      double total = 0.0, masked_mass = 0.0;
      for (TokenId id = 0; id < cfg.vocab_size; ++id) {
        const double pr = std::exp(ld[static_cast<std::size_t>(id)]);
        total += pr;
        if (!phase_allows(cfg, seq.phases[j], id)) masked_mass += pr;
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
      CHECK(masked_mass == 0.0);
      CHECK(tape.target_logprobs()[j] == ld[static_cast<std::size_t>(seq.tokens[seq.targets[j]])]);
    }
  }
}

TEST_CASE("sequence_logprob: uniform case, masked target") {
  auto cfg = tiny_config();
  PolicyParams zero(cfg);  // all-zero params give uniform logits
  const std::vector<TokenId> ctx = {4};
  const std::vector<TokenId> cont = {5};
  const std::vector<Phase> phases = {Phase::text};
  auto trace = sequence_logprob(zero, ctx, cont, phases);
  // text phase allows 2 text ids + EOS
  CHECK(trace.logp[0] == doctest::Approx(std::log(1.0 / 3.0)).epsilon(1e-15));

  const std::vector<TokenId> bad = {6};
  try {
    sequence_logprob(zero, ctx, bad, phases);
    FAIL("expected MaskedToken");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::masked_token);
  }
}

TEST_CASE("sequence_logprob obeys the chain rule against brute-force joint enumeration") {
  auto cfg = tiny_config();
  auto p = random_params(cfg, 42, 1.0);
  const std::vector<TokenId> ctx = {5, 4};
  const std::vector<Phase> phases = {Phase::text, Phase::text, Phase::text};
  const std::vector<TokenId> allowed = {Vocab::kEosText, 4, 5};
  double joint_mass = 0.0;
  for (TokenId a : allowed)
    for (TokenId b : allowed)
      for (TokenId c : allowed) {
        const std::vector<TokenId> cont = {a, b, c};
        auto trace = sequence_logprob(p, ctx, cont, phases);
        double sum = 0.0;
        for (double lp : trace.logp) sum += lp;
        // Independent route: one forward_logits call per prefix.
        double direct = 0.0;
        std::vector<TokenId> prefix = ctx;
        for (TokenId tok : cont) {
          auto ls = log_softmax(forward_logits(p, prefix, Phase::text));
          direct += ls[static_cast<std::size_t>(tok)];
          prefix.push_back(tok);
        }
        CHECK(sum == doctest::Approx(direct).epsilon(1e-12));
        joint_mass += std::exp(sum);
      }
  CHECK(joint_mass == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("incremental decoder matches the full tape bit-for-bit") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(5);
  auto p = random_params(cfg, 77);
  auto seq = random_bicot_sequence(cfg, rng, 3, 3, 4);
  SequenceTape tape(p, seq);
  IncrementalDecoder dec(p);
  std::size_t j = 0;
  for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t) {
    dec.push(seq.tokens[t]);
    if (j < seq.targets.size() && seq.targets[j] == t + 1) {
      auto logits = dec.logits();
      apply_phase_mask(cfg, seq.phases[j], logits);
      auto ls = log_softmax(logits);
      auto ld = tape.log_distribution(j);
      CHECK(std::equal(ls.begin(), ls.end(), ld.begin()));
      ++j;
    }
  }
  CHECK(j == seq.targets.size());
}

TEST_CASE("sample_token") {
  Rng rng(1);
  const std::vector<double> one = {-kInf, 0.3, -kInf};
  for (int i = 0; i < 100; ++i) CHECK(sample_token(one, 0.7, rng) == 1);
  const std::vector<double> none = {-kInf, -kInf};
  CHECK_THROWS_AS(sample_token(none, 1.0, rng), Error);
  CHECK_THROWS_AS(sample_token(one, 0.0, rng), Error);
  const std::vector<double> logits = {0.1, 2.0, -1.0, 1.9};
  CHECK(greedy_token(logits) == 1);
  // Tiny temperature concentrates on the argmax.
  for (int i = 0; i < 100; ++i) CHECK(sample_token(logits, 1e-3, rng) == 1);

  SUBCASE("empirical frequencies match softmax within 3 sigma") {
    const std::vector<double> l = {0.5, -0.2, 1.1, -kInf, 0.0};
    const double temp = 0.8;
    std::vector<double> prob(l.size(), 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i)
      if (std::isfinite(l[i])) z += prob[i] = std::exp(l[i] / temp);
    for (double& q : prob) q /= z;
    const int n = 100000;
    std::vector<int> counts(l.size(), 0);
    Rng r(2024);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_token(l, temp, r))];
    for (std::size_t i = 0; i < l.size(); ++i) {
      const double sigma = std::sqrt(n * prob[i] * (1.0 - prob[i]));
      CHECK(std::abs(counts[i] - n * prob[i]) <= 3.0 * sigma + 1e-9);
    }
    CHECK(counts[3] == 0);
  }
}

TEST_CASE("grad_objective: zero weights, linearity, serial equivalence") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(3);
  auto p = random_params(cfg, 8);
  std::vector<WeightedSequence> a, b;
  for (int i = 0; i < 3; ++i) {
    auto s = random_bicot_sequence(cfg, rng, 2, 2, 4);
    std::vector<double> w(s.num_targets());
    for (auto& x : w) x = std::uniform_real_distribution<double>(-1, 1)(rng);
    (i < 2 ? a : b).push_back({s, w});
  }
  auto zero = a;
  for (auto& ws : zero) std::fill(ws.weights.begin(), ws.weights.end(), 0.0);
  auto gz = grad_objective(p, zero);
  CHECK(l2_norm(gz.grad) == 0.0);

  auto ga = grad_objective(p, a);
  auto gb = grad_objective(p, b);
  auto all = a;
  all.insert(all.end(), b.begin(), b.end());
  auto gab = grad_objective(p, all);
  for (std::size_t k = 0; k < gab.grad.size(); ++k)
    CHECK(gab.grad[k] == doctest::Approx(ga.grad[k] + gb.grad[k]).epsilon(1e-12));

  auto serial = grad_objective_serial(p, all);
  CHECK(serial.grad == gab.grad);
  CHECK(serial.objective == gab.objective);
}

TEST_CASE("grad_objective matches central finite differences on 100 random draws") {
  std::mt19937_64 rng(12345);
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    auto cfg = tiny_config(1 + draw % 2);
    auto p = random_params(cfg, 1000 + static_cast<std::uint64_t>(draw), 0.6);
    // single-token batch: one scored target
    auto s = random_bicot_sequence(cfg, rng, 2, 1 + draw % 2, 2);
    const std::size_t keep = rng() % s.num_targets();
    ScoredSequence single;
    single.tokens.assign(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(s.targets[keep] + 1));
    single.targets = {s.targets[keep]};
    single.phases = {s.phases[keep]};
    std::vector<WeightedSequence> batch = {{single, {1.0}}};
    auto analytic = grad_objective(p, batch).grad;
    auto numeric = finite_difference(p, batch, 1e-4);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  MESSAGE("worst relative error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("checkpoint round trip and corruption handling") {
  auto cfg = tiny_config();
  auto p = random_params(cfg, 99);
  const auto dir = std::filesystem::temp_directory_path() / "bicot_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "p.ckpt";
  save_checkpoint(p, path);
  CHECK(load_checkpoint(path) == p);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  auto expect_code = [&](Errc code) {
    try {
      load_checkpoint(path);
      FAIL("expected failure");
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  write(bytes.substr(0, bytes.size() / 2));
  expect_code(Errc::corrupt_checksum);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x1;
  write(flipped);
  expect_code(Errc::corrupt_checksum);

  auto v2 = bytes;
  v2[8] = 2;  // version field follows the 8-byte magic
  write(v2);
  expect_code(Errc::version_mismatch);

  write(bytes);
  CHECK(load_checkpoint(path) == p);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("initialization is seeded and bounded") {
  auto cfg = tiny_config();
  auto a = PolicyParams::initialize(cfg, 5);
  auto b = PolicyParams::initialize(cfg, 5);
  CHECK(a == b);
  CHECK_FALSE(a == PolicyParams::initialize(cfg, 6));
  for (double v : a.values()) CHECK(std::abs(v) <= 0.05);
}
