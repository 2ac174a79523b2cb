// Serial reference vs OpenMP kernels.

#include <benchmark/benchmark.h>

#include "bicot/grpo.hpp"

using namespace bicot;

namespace {

struct Fixture {
  World world = World::builtin();
  PolicyParams params;
  GenConfig gen;
  TrainerConfig trainer;
  std::vector<Prompt> prompts;
  std::vector<std::uint64_t> seeds;
  std::vector<WeightedSequence> batch;
  std::vector<ScoredGroup> groups;

  Fixture() {
    params = PolicyParams::initialize(PolicyConfig::for_world(world, 16, 32, 1, 48), 1);
    gen.max_cot_len = 24;
    const PromptPool pool(world, {});
    prompts = pool.sample(7, 0, 8);
    for (std::size_t b = 0; b < prompts.size(); ++b) seeds.push_back(mix_seed(7, 0, b));

    const auto rolled = rollout_batch(params, nullptr, prompts, seeds, trainer.group_size, world, gen);
    for (const auto& g : rolled)
      for (const auto& r : g.responses) {
        auto s = response_sequence(g.prompt, r, world);
        std::vector<double> w(s.num_targets(), 0.1);
        batch.push_back({std::move(s), std::move(w)});
      }

    auto state = TrainState::start(params);
    train_step(state, prompts, trainer, gen, RewardConfig{}, world, Execution::parallel, &groups);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_grad_objective_serial(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(grad_objective_serial(f.params, f.batch));
}

void BM_grad_objective_parallel(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(grad_objective(f.params, f.batch));
}

void BM_rollout_batch(benchmark::State& st) {
  const auto& f = fixture();
  const auto exec = st.range(0) ? Execution::parallel : Execution::serial;
  for (auto _ : st)
    benchmark::DoNotOptimize(
        rollout_batch(f.params, &f.params, f.prompts, f.seeds, f.trainer.group_size, f.world, f.gen, exec));
}

void BM_grpo_objective(benchmark::State& st) {
  const auto& f = fixture();
  const auto exec = st.range(0) ? Execution::parallel : Execution::serial;
  for (auto _ : st) benchmark::DoNotOptimize(grpo_objective(f.groups, f.params, f.trainer, f.gen, f.world, exec));
}

}  // namespace

BENCHMARK(BM_grad_objective_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_grad_objective_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_rollout_batch)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_grpo_objective)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
