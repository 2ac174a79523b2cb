#include "bicot/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <unordered_set>

#include <json.hpp>

namespace bicot {

namespace {

constexpr std::array<std::string_view, 4> kModeNames = {"none", "semantic_only", "token_only", "both"};

bool position_trained(CotMode mode, bool text) { return text ? mode_trains_text(mode) : mode_trains_image(mode); }

}  // namespace

std::string_view cot_mode_name(CotMode m) { return kModeNames[static_cast<std::size_t>(m)]; }

CotMode parse_cot_mode(std::string_view name) {
  for (std::size_t i = 0; i < kModeNames.size(); ++i)
    if (kModeNames[i] == name) return static_cast<CotMode>(i);
  throw Error(Errc::config_error, "unknown mode '" + std::string(name) + "'");
}

bool mode_plans(CotMode m) { return m == CotMode::semantic_only || m == CotMode::both; }
bool mode_trains_text(CotMode m) { return m == CotMode::semantic_only || m == CotMode::both; }
bool mode_trains_image(CotMode m) { return m == CotMode::token_only || m == CotMode::both; }

void TrainerConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(Errc::config_error, what);
  };
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(beta >= 0.0, "beta must be non-negative");
  require(clip_eps > 0.0 && clip_eps < 1.0, "clip_eps must lie in (0, 1)");
  require(group_size >= 2, "group_size must be at least 2");
  require(prompts_per_step >= 1, "prompts_per_step must be positive");
  require(max_grad_norm > 0.0, "max_grad_norm must be positive");
  require(inner_epochs >= 1, "inner_epochs must be at least 1");
  require(adv_std_floor > 0.0, "adv_std_floor must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam betas in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
}

AdvantageSet compute_advantages(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw Error(Errc::group_too_small, "advantages need at least two rewards");
  const auto n = static_cast<double>(rewards.size());
  AdvantageSet a;
  double sum = 0.0;
  for (double r : rewards) sum += r;
  a.mean = sum / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - a.mean) * (r - a.mean);
  a.std = std::sqrt(ss / n);
  a.values.assign(rewards.size(), 0.0);
  a.degenerate = !(a.std > std_floor);
  if (!a.degenerate)
    for (std::size_t i = 0; i < rewards.size(); ++i) a.values[i] = (rewards[i] - a.mean) / a.std;
  return a;
}

namespace {

void check_aligned(const LogProbTrace& a, const LogProbTrace& b, std::size_t position) {
  if (a.size() != b.size())
    throw Error(Errc::misaligned_traces,
                "trace lengths differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (position >= a.size()) throw Error(Errc::misaligned_traces, "position beyond the trace");
}

}  // namespace

double importance_ratio(const LogProbTrace& trace_new, const LogProbTrace& trace_old, std::size_t position,
                        std::size_t cot_length) {
  check_aligned(trace_new, trace_old, position);
  if (cot_length > trace_new.size()) throw Error(Errc::misaligned_traces, "CoT longer than the trace");
  return std::exp(trace_new.logp[position] - trace_old.logp[position]);
}

double k3(double logp_new, double logp_ref) {
  const double d = logp_ref - logp_new;
  return std::expm1(d) - d;
}

double kl_estimate(const LogProbTrace& trace_new, const LogProbTrace& trace_ref, std::size_t position) {
  check_aligned(trace_new, trace_ref, position);
  return k3(trace_new.logp[position], trace_ref.logp[position]);
}

ScoredGroup score_group(RolloutGroup group, const World& world, const RewardConfig& reward, double std_floor) {
  ScoredGroup sg;
  std::vector<double> finals;
  for (const auto& r : group.responses) {
    sg.rewards.push_back(score_image(r.grid, group.prompt.spec, world, reward));
    finals.push_back(sg.rewards.back().final);
  }
  sg.advantages = compute_advantages(finals, std_floor);
  sg.group = std::move(group);
  return sg;
}

ObjectiveReport grpo_objective(const std::vector<ScoredGroup>& groups, const PolicyParams& params,
                               const TrainerConfig& config, const GenConfig& gen, const World& world,
                               Execution exec) {
  struct Item {
    std::size_t g, i;
  };
  std::vector<Item> items;
  std::vector<double> denom(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& sg = groups[g];
    if (sg.advantages.values.size() != sg.group.responses.size())
      throw Error(Errc::invalid_argument, "group is missing advantages");
    for (std::size_t i = 0; i < sg.group.responses.size(); ++i) {
      const auto& r = sg.group.responses[i];
      if (position_trained(config.mode, true)) denom[g] += static_cast<double>(r.cot.tokens.size());
      if (position_trained(config.mode, false)) denom[g] += static_cast<double>(r.image.tokens.size());
      items.push_back({g, i});
    }
  }
  std::size_t active_groups = 0;
  for (double d : denom) active_groups += d > 0.0 ? 1 : 0;

  ObjectiveReport out;
  out.grad = params.zeros_like();
  if (active_groups == 0) return out;

  const auto n = static_cast<std::int64_t>(items.size());
  std::vector<ParamVector> grads(items.size());
  std::vector<double> obj(items.size(), 0.0), kl(items.size(), 0.0);
  std::vector<std::size_t> clipped(items.size(), 0), tokens(items.size(), 0);
  std::vector<std::exception_ptr> errors(items.size());
  const double eps = config.clip_eps;
  const double beta = config.beta;

#pragma omp parallel for schedule(dynamic) if (exec == Execution::parallel)
  for (std::int64_t k = 0; k < n; ++k) {
    const auto idx = static_cast<std::size_t>(k);
    const auto [g, i] = items[idx];
    if (denom[g] == 0.0) continue;
    try {
      const auto& sg = groups[g];
      const auto& r = sg.group.responses[i];
      const double adv = sg.advantages.values[i];
      const double scale = 1.0 / (denom[g] * static_cast<double>(active_groups));
      ResponseTape tape(params, sg.group.prompt, r, world, gen);
      const auto logp = tape.logprobs();
      if (r.old_trace.size() != logp.size() || r.ref_trace.size() != logp.size())
        throw Error(Errc::misaligned_traces, "response traces do not match its targets");
      std::vector<double> w(logp.size(), 0.0);
      double acc = 0.0, kl_acc = 0.0;
      std::size_t n_clip = 0, n_tok = 0;
      for (std::size_t j = 0; j < logp.size(); ++j) {
        if (!position_trained(config.mode, j < tape.num_text())) continue;
        const double ratio = std::exp(logp[j] - r.old_trace.logp[j]);
        const double unclipped = ratio * adv;
        const double clipped_term = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
        const bool take_unclipped = unclipped <= clipped_term;
        const double d = r.ref_trace.logp[j] - logp[j];
        const double kl_j = std::expm1(d) - d;
        acc += std::min(unclipped, clipped_term) - beta * kl_j;
        kl_acc += kl_j;
        ++n_tok;
        if (!take_unclipped) ++n_clip;
        w[j] = scale * ((take_unclipped ? adv * ratio : 0.0) + beta * std::expm1(d));
      }
      grads[idx] = params.zeros_like();
      tape.backward(w, grads[idx]);
      obj[idx] = acc * scale;
      kl[idx] = kl_acc;
      clipped[idx] = n_clip;
      tokens[idx] = n_tok;
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  double kl_sum = 0.0;
  std::size_t clip_sum = 0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (grads[k].empty()) continue;
    for (std::size_t p = 0; p < out.grad.size(); ++p) out.grad[p] += grads[k][p];
    out.objective += obj[k];
    kl_sum += kl[k];
    clip_sum += clipped[k];
    out.trained_tokens += tokens[k];
  }
  if (!std::isfinite(out.objective)) throw Error(Errc::non_finite_objective, "GRPO objective is not finite");
  for (double x : out.grad)
    if (!std::isfinite(x)) throw Error(Errc::non_finite_gradient, "GRPO gradient is not finite");
  if (out.trained_tokens > 0) {
    out.mean_kl = kl_sum / static_cast<double>(out.trained_tokens);
    out.clip_fraction = static_cast<double>(clip_sum) / static_cast<double>(out.trained_tokens);
  }
  return out;
}

TrainState TrainState::start(const PolicyParams& initial) {
  TrainState s;
  s.params = initial;
  s.params_old = initial;
  s.params_ref = initial;
  s.adam.m = initial.zeros_like();
  s.adam.v = initial.zeros_like();
  return s;
}

void snapshot_policies(TrainState& state) { state.params_old = state.params; }

double clip_grad_norm(ParamVector& grad, double max_norm) {
  const double norm = l2_norm(grad);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

void apply_update(TrainState& state, const ParamVector& grad, const TrainerConfig& config) {
  auto values = state.params.values();
  if (grad.size() != values.size()) throw Error(Errc::dimension_mismatch, "gradient size");
  if (config.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += config.learning_rate * grad[i];
    return;
  }
  auto& a = state.adam;
  if (a.m.size() != values.size()) {
    a.m.assign(values.size(), 0.0);
    a.v.assign(values.size(), 0.0);
  }
  ++a.t;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(a.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(a.t));
  for (std::size_t i = 0; i < values.size(); ++i) {
    a.m[i] = b1 * a.m[i] + (1.0 - b1) * grad[i];
    a.v[i] = b2 * a.v[i] + (1.0 - b2) * grad[i] * grad[i];
    values[i] += config.learning_rate * (a.m[i] / c1) / (std::sqrt(a.v[i] / c2) + config.adam_eps);
  }
}

std::string StepReport::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["reward"] = mean_reward;
  j["hpm"] = expert_means[0];
  j["det"] = expert_means[1];
  j["vqa"] = expert_means[2];
  j["orm"] = expert_means[3];
  j["objective"] = objective;
  j["kl"] = mean_kl;
  j["clip_fraction"] = clip_fraction;
  j["grad_norm"] = grad_norm;
  j["applied_norm"] = applied_norm;
  j["cot_len_mean"] = cot_len_mean;
  j["cot_len_min"] = cot_len_min;
  j["cot_len_max"] = cot_len_max;
  j["cot_truncated"] = cot_truncated;
  j["degenerate_groups"] = degenerate_groups;
  return j.dump();
}

GenConfig mode_gen(const GenConfig& base, CotMode mode) {
  GenConfig g = base;
  g.semantic_cot = mode_plans(mode);
  return g;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

StepReport train_step(TrainState& state, const std::vector<Prompt>& batch, const TrainerConfig& config,
                      const GenConfig& gen_base, const RewardConfig& reward, const World& world, Execution exec,
                      std::vector<ScoredGroup>* groups_out) {
  config.validate();
  const GenConfig gen = mode_gen(gen_base, config.mode);
  snapshot_policies(state);

  std::vector<std::uint64_t> seeds;
  for (std::size_t b = 0; b < batch.size(); ++b)
    seeds.push_back(mix_seed(config.seed, static_cast<std::uint64_t>(state.step), b));
  auto rollouts = rollout_batch(state.params_old, &state.params_ref, batch, seeds, config.group_size, world, gen, exec);

  std::vector<ScoredGroup> groups(rollouts.size());
  for (std::size_t g = 0; g < rollouts.size(); ++g)
    groups[g] = score_group(std::move(rollouts[g]), world, reward, config.adv_std_floor);

  StepReport rep;
  rep.step = state.step;
  double n_resp = 0.0, cot_sum = 0.0, truncated = 0.0;
  rep.cot_len_min = std::numeric_limits<int>::max();
  for (const auto& sg : groups) {
    rep.degenerate_groups += sg.advantages.degenerate ? 1 : 0;
    for (std::size_t i = 0; i < sg.rewards.size(); ++i) {
      rep.mean_reward += sg.rewards[i].final;
      for (std::size_t e = 0; e < 4; ++e) rep.expert_means[e] += sg.rewards[i].scores[e];
      const auto& r = sg.group.responses[i];
      const int len = static_cast<int>(r.cot_length());
      cot_sum += len;
      rep.cot_len_min = std::min(rep.cot_len_min, len);
      rep.cot_len_max = std::max(rep.cot_len_max, len);
      truncated += r.cot.truncated ? 1.0 : 0.0;
      n_resp += 1.0;
    }
  }
  if (n_resp > 0) {
    rep.mean_reward /= n_resp;
    for (double& e : rep.expert_means) e /= n_resp;
    rep.cot_len_mean = cot_sum / n_resp;
    rep.cot_truncated = truncated / n_resp;
  } else {
    rep.cot_len_min = 0;
  }

  if (config.mode != CotMode::none) {
    for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
      auto res = grpo_objective(groups, state.params, config, gen, world, exec);
      const double pre = clip_grad_norm(res.grad, config.max_grad_norm);
      if (epoch == 0) {
        rep.objective = res.objective;
        rep.mean_kl = res.mean_kl;
        rep.grad_norm = pre;
        rep.applied_norm = l2_norm(res.grad);
      }
      rep.clip_fraction += res.clip_fraction / config.inner_epochs;
      if (res.trained_tokens > 0) apply_update(state, res.grad, config);
    }
    if (!state.params.all_finite()) throw Error(Errc::non_finite_gradient, "parameters diverged");
  }
  ++state.step;
  if (groups_out) *groups_out = std::move(groups);
  return rep;
}

void run_training(TrainState& state, const PromptPool& pool, std::int64_t until_step, const TrainerConfig& config,
                  const GenConfig& gen, const RewardConfig& reward, const World& world, Execution exec,
                  const StepCallback& on_step) {
  config.validate();
  while (state.step < until_step) {
    const auto batch = pool.sample(config.seed, state.step, config.prompts_per_step);
    const auto rep = train_step(state, batch, config, gen, reward, world, exec);
    if (on_step) on_step(rep, state);
  }
}

namespace {

PolicyParams as_params(const PolicyConfig& config, const ParamVector& v) {
  PolicyParams p(config);
  if (v.size() != p.size()) throw Error(Errc::dimension_mismatch, "optimizer state size");
  std::copy(v.begin(), v.end(), p.values().begin());
  return p;
}

ParamVector as_vector(const PolicyParams& p) { return ParamVector(p.values().begin(), p.values().end()); }

}  // namespace

void save_train_state(const TrainState& state, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::io_error, "cannot create " + dir.string());
  const auto& cfg = state.params.config();
  save_checkpoint(state.params, dir / "policy.ckpt");
  save_checkpoint(state.params_ref, dir / "reference.ckpt");
  save_checkpoint(as_params(cfg, state.adam.m.empty() ? state.params.zeros_like() : state.adam.m), dir / "adam_m.ckpt");
  save_checkpoint(as_params(cfg, state.adam.v.empty() ? state.params.zeros_like() : state.adam.v), dir / "adam_v.ckpt");
  nlohmann::ordered_json j;
  j["step"] = state.step;
  j["adam_t"] = state.adam.t;
  const auto tmp = dir / "state.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
    out << j.dump() << "\n";
  }
  std::filesystem::rename(tmp, dir / "state.json", ec);
  if (ec) throw Error(Errc::io_error, "cannot move train state into place: " + ec.message());
}

TrainState load_train_state(const std::filesystem::path& dir) {
  std::ifstream in(dir / "state.json");
  if (!in) throw Error(Errc::io_error, "no train state in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corrupt_checksum, std::string("train state: ") + e.what());
  }
  TrainState s;
  s.params = load_checkpoint(dir / "policy.ckpt");
  s.params_ref = load_checkpoint(dir / "reference.ckpt");
  s.params_old = s.params;
  if (!(s.params_ref.config() == s.params.config()))
    throw Error(Errc::dimension_mismatch, "reference and policy configs differ");
  s.adam.m = as_vector(load_checkpoint(dir / "adam_m.ckpt"));
  s.adam.v = as_vector(load_checkpoint(dir / "adam_v.ckpt"));
  if (s.adam.m.size() != s.params.size() || s.adam.v.size() != s.params.size())
    throw Error(Errc::dimension_mismatch, "optimizer state does not match the policy");
  s.step = j.at("step").get<std::int64_t>();
  s.adam.t = j.at("adam_t").get<std::int64_t>();
  return s;
}

// ------------------------------------------------------------ prompts

PromptPool::PromptPool(const World& world, const std::vector<std::string>& excluded_texts) {
  std::unordered_set<std::string> excluded;
  for (const auto& t : excluded_texts) excluded.insert(render_prompt(parse_prompt(t, world), world));
  for (const auto& spec : enumerate_specs(world)) {
    auto p = Prompt::from_spec(spec, world);
    if (excluded.count(p.text)) continue;
    by_category_[static_cast<std::size_t>(category_of(spec))].push_back(std::move(p));
  }
}

std::size_t PromptPool::size() const noexcept {
  std::size_t n = 0;
  for (const auto& v : by_category_) n += v.size();
  return n;
}

bool PromptPool::contains(std::string_view text) const {
  for (const auto& v : by_category_)
    for (const auto& p : v)
      if (p.text == text) return true;
  return false;
}

std::vector<Prompt> PromptPool::sample(std::uint64_t seed, std::int64_t step, int count) const {
  std::vector<std::size_t> cats;
  for (std::size_t c = 0; c < by_category_.size(); ++c)
    if (!by_category_[c].empty()) cats.push_back(c);
  if (cats.empty()) throw Error(Errc::config_error, "training prompt pool is empty");
  Rng rng = substream(seed, {0x70726f6dULL, static_cast<std::uint64_t>(step)});
  std::vector<Prompt> out;
  for (int i = 0; i < count; ++i) {
    const auto& pool = by_category_[cats[rng() % cats.size()]];
    out.push_back(pool[rng() % pool.size()]);
  }
  return out;
}

}  // namespace bicot
