#pragma once

// Group-relative policy optimization over (semantic CoT, image tokens)
// responses: group-normalized advantages, clipped importance ratios with a
// k3 KL penalty to a frozen reference, token-level normalization, and the
// outer loop with old/reference policy management.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bicot/policy.hpp"
#include "bicot/reward.hpp"
#include "bicot/rollout.hpp"

namespace bicot {

enum class OptimizerKind { adam, sgd };

// Which CoT segments are generated and optimized.
enum class CotMode { none, semantic_only, token_only, both };

std::string_view cot_mode_name(CotMode m);
CotMode parse_cot_mode(std::string_view name);  // throws config_error
bool mode_plans(CotMode m);                     // a semantic CoT is generated
bool mode_trains_text(CotMode m);
bool mode_trains_image(CotMode m);

struct TrainerConfig {
  double learning_rate = 3e-3;
  double beta = 0.01;
  double clip_eps = 0.2;
  int group_size = 8;
  int prompts_per_step = 8;
  double max_grad_norm = 1.0;
  int inner_epochs = 1;
  double adv_std_floor = 1e-8;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  CotMode mode = CotMode::both;

  void validate() const;
};

struct AdvantageSet {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // population
  bool degenerate = false;
};

AdvantageSet compute_advantages(std::span<const double> rewards, double std_floor = 1e-8);

double importance_ratio(const LogProbTrace& trace_new, const LogProbTrace& trace_old, std::size_t position,
                        std::size_t cot_length);
double kl_estimate(const LogProbTrace& trace_new, const LogProbTrace& trace_ref, std::size_t position);
// k3 of a single pair: exp(d) - d - 1 with d = logp_ref - logp_new.
double k3(double logp_new, double logp_ref);

struct ScoredGroup {
  RolloutGroup group;
  std::vector<RewardReport> rewards;
  AdvantageSet advantages;
};

ScoredGroup score_group(RolloutGroup group, const World& world, const RewardConfig& reward, double std_floor);

struct ObjectiveReport {
  double objective = 0.0;
  ParamVector grad;
  double mean_kl = 0.0;         // over trained tokens
  double clip_fraction = 0.0;   // trained tokens where the clipped branch is active
  std::size_t trained_tokens = 0;
};

// Mean over groups of
//   (1 / sum_i |o_i|) sum_i sum_j [min(r A, clip(r, 1-eps, 1+eps) A) - beta k3]
// where the sums run over the positions trained under `config.mode`, and its
// exact gradient (ratio gradient only through the unclipped branch).
ObjectiveReport grpo_objective(const std::vector<ScoredGroup>& groups, const PolicyParams& params,
                               const TrainerConfig& config, const GenConfig& gen, const World& world,
                               Execution exec = Execution::parallel);

struct AdamState {
  ParamVector m, v;
  std::int64_t t = 0;
};

struct TrainState {
  PolicyParams params;
  PolicyParams params_old;
  PolicyParams params_ref;
  AdamState adam;
  std::int64_t step = 0;

  static TrainState start(const PolicyParams& initial);
};

// params_old <- deep copy of params; params_ref stays frozen.
void snapshot_policies(TrainState& state);

// Scales `grad` in place so its norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(ParamVector& grad, double max_norm);
void apply_update(TrainState& state, const ParamVector& grad, const TrainerConfig& config);

struct StepReport {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  std::array<double, 4> expert_means{};  // hpm, det, vqa, orm
  double objective = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;       // pre-clip, first epoch
  double applied_norm = 0.0;    // post-clip, first epoch
  double cot_len_mean = 0.0;
  int cot_len_min = 0;
  int cot_len_max = 0;
  double cot_truncated = 0.0;   // fraction
  int degenerate_groups = 0;

  std::string to_json() const;
};

// Generation settings implied by the mode.
GenConfig mode_gen(const GenConfig& base, CotMode mode);

StepReport train_step(TrainState& state, const std::vector<Prompt>& batch, const TrainerConfig& config,
                      const GenConfig& gen, const RewardConfig& reward, const World& world,
                      Execution exec = Execution::parallel, std::vector<ScoredGroup>* groups_out = nullptr);

// Training prompts: every grammatical spec except the excluded prompt texts,
// sampled category-balanced.
class PromptPool {
 public:
  PromptPool(const World& world, const std::vector<std::string>& excluded_texts);

  std::vector<Prompt> sample(std::uint64_t seed, std::int64_t step, int count) const;
  std::size_t size() const noexcept;
  bool contains(std::string_view text) const;

 private:
  std::array<std::vector<Prompt>, kNumCategories> by_category_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

using StepCallback = std::function<void(const StepReport&, const TrainState&)>;

// Steps until state.step == until_step. The batch of step t is
// pool.sample(config.seed, t, prompts_per_step), so a resumed run sees the
// same prompts as an uninterrupted one.
void run_training(TrainState& state, const PromptPool& pool, std::int64_t until_step, const TrainerConfig& config,
                  const GenConfig& gen, const RewardConfig& reward, const World& world,
                  Execution exec = Execution::parallel, const StepCallback& on_step = {});

// Directory holding params, reference, optimizer moments and the step.
void save_train_state(const TrainState& state, const std::filesystem::path& dir);
TrainState load_train_state(const std::filesystem::path& dir);

}  // namespace bicot
