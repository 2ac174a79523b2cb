// bicot: train / eval / ablate / rollout / inspect.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>
#include <charconv>
#include <chrono>
#include <iostream>
#include <sstream>

#include "bicot/runner.hpp"

namespace fs = std::filesystem;
using namespace bicot;

namespace {

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::config_error:
    case Errc::grammar:
    case Errc::unknown_key:
    case Errc::version_mismatch:
    case Errc::corrupt_checksum:
    case Errc::io_error:
    case Errc::context_too_long:
    case Errc::group_too_small:
    case Errc::no_expert_enabled:
      return 2;
    default:
      return 1;
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

RunConfig optional_config(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

World pick_world(const std::string& world, const RunConfig& cfg) {
  return world.empty() ? cfg.load_world() : World::from_file(world);
}

int cmd_train(const std::string& config_path, std::optional<std::int64_t> stop_after, const std::string& out) {
  const auto cfg = RunConfig::load(config_path);
  const fs::path run_dir = out.empty() ? output_root() / cfg.name : fs::path(out);
  const auto r = train_run(cfg, run_dir, stop_after, std::cout);
  std::cout << (r.complete ? "complete" : "stopped") << " at step " << r.steps_done << " (" << r.steps_run
            << " this run) in " << run_dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& suite_path, int n, const std::string& config_path,
             const std::string& world_path, std::optional<std::uint64_t> seed, const std::string& out) {
  const auto cfg = optional_config(config_path);
  const World world = pick_world(world_path, cfg);
  const auto suite = BenchmarkSuite::load(suite_path, world);
  const auto params = load_policy(ckpt);
  const auto gen = mode_gen(cfg.gen, cfg.trainer.mode);
  const auto rep = eval_suite(params, suite, n, gen, world, cfg.reward, seed.value_or(cfg.eval_seed));
  const fs::path dir = out.empty() ? output_root() / "eval" / fs::path(ckpt).filename() : fs::path(out);
  write_file_atomic(dir / "eval.jsonl", rep.to_jsonl());
  write_file_atomic(dir / "eval_summary.txt", rep.summary());
  std::cout << rep.summary() << "reports in " << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& modes_arg, const std::string& seeds_arg,
               const std::string& base, std::optional<std::int64_t> steps, const std::string& out) {
  const auto cfg = RunConfig::load(config_path);
  std::vector<CotMode> modes;
  for (const auto& m : split_list(modes_arg)) modes.push_back(parse_cot_mode(m));
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(seeds_arg)) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw Error(Errc::config_error, "bad seed '" + s + "'");
    seeds.push_back(v);
  }
  const World world = cfg.load_world();
  const auto suite = cfg.load_suite(world);
  const PromptPool pool(world, suite.texts());
  const auto params = base.empty() ? PolicyParams::initialize(cfg.policy_config(world), cfg.seed) : load_policy(base);

  AblationSettings s;
  s.trainer = cfg.trainer;
  s.gen = cfg.gen;
  s.reward = cfg.reward;
  s.steps = steps.value_or(cfg.ablation_steps > 0 ? cfg.ablation_steps : cfg.steps);
  s.images_per_prompt = cfg.eval_images;
  s.eval_seed = cfg.eval_seed;

  const fs::path dir = out.empty() ? output_root() / (cfg.name + "_ablation") : fs::path(out);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kManifestVersion;
  manifest["code_version"] = kCodeVersion;
  manifest["config"] = cfg.to_json();
  manifest["config_text"] = cfg.text;
  manifest["modes"] = modes_arg;
  manifest["seeds"] = seeds_arg;
  manifest["base"] = base;
  manifest["steps"] = s.steps;
  manifest["status"] = "running";
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");

  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_ablation(params, modes, seeds, s, world, suite, pool, Execution::parallel,
                                [](const AblationRun& r) {
                                  std::cout << cot_mode_name(r.mode) << " seed " << r.seed << ": score " << r.eval.score
                                            << " vendi " << r.eval.diversity.mean << std::endl;
                                });
  write_file_atomic(dir / "ablation.jsonl", rep.to_jsonl());
  write_file_atomic(dir / "ablation_runs.csv", rep.runs_csv());
  write_file_atomic(dir / "ablation_curves.csv", rep.curves_csv());
  write_file_atomic(dir / "ablation_summary.txt", rep.summary());
  manifest["status"] = "complete";
  manifest["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest["reports"] = {"ablation.jsonl", "ablation_runs.csv", "ablation_curves.csv", "ablation_summary.txt"};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "\n" << rep.summary();
  return 0;
}

int cmd_rollout(const std::string& ckpt, const std::string& prompt_text, int g, bool greedy,
                const std::string& config_path, const std::string& world_path, std::uint64_t seed,
                const std::string& dump) {
  const auto cfg = optional_config(config_path);
  const World world = pick_world(world_path, cfg);
  const auto prompt = Prompt::from_text(prompt_text, world);
  const auto params = load_policy(ckpt);
  auto gen = mode_gen(cfg.gen, cfg.trainer.mode);
  gen.greedy = gen.greedy || greedy;
  const auto d = rollout_dump(params, prompt, g, world, gen, cfg.reward, seed);
  if (!dump.empty()) {
    std::string lines;
    for (const auto& r : d.records) lines += r + "\n";
    write_file_atomic(dump, lines);
  }
  std::cout << d.text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BiCoT-GRPO desk laboratory"};
  app.require_subcommand(1);

  std::string config, ckpt, suite, world, out, modes, seeds, base, prompt, dump;
  std::optional<std::int64_t> stop_after, steps;
  std::optional<std::uint64_t> eval_seed;
  int n = 10, g = 4;
  bool greedy = false;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train a policy");
  train->add_option("--config", config, "run config file")->required();
  train->add_option("--stop-after", stop_after, "take at most this many steps, then checkpoint and exit");
  train->add_option("--out", out, "run directory (default: output root / name)");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a suite");
  eval->add_option("--ckpt", ckpt, "policy file or checkpoint directory")->required();
  eval->add_option("--suite", suite, "suite file")->required();
  eval->add_option("--n", n, "images per prompt")->required();
  eval->add_option("--config", config, "run config for generation and reward settings");
  eval->add_option("--world", world, "world asset (default: from config, else built in)");
  eval->add_option("--seed", eval_seed, "evaluation seed");
  eval->add_option("--out", out, "report directory");

  auto* ablate = app.add_subcommand("ablate", "CoT-mode ablation");
  ablate->add_option("--config", config, "run config file")->required();
  ablate->add_option("--modes", modes, "comma-separated modes")->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds")->required();
  ablate->add_option("--base", base, "starting checkpoint (default: fresh init from the config seed)");
  ablate->add_option("--steps", steps, "training steps per run");
  ablate->add_option("--out", out, "report directory");

  auto* rollout = app.add_subcommand("rollout", "sample and score a group of responses");
  rollout->add_option("--ckpt", ckpt, "policy file or checkpoint directory")->required();
  rollout->add_option("--prompt", prompt, "prompt text")->required();
  rollout->add_option("--g", g, "group size")->required();
  rollout->add_flag("--greedy", greedy, "argmax decoding");
  rollout->add_option("--seed", seed, "sampling seed");
  rollout->add_option("--config", config, "run config for generation and reward settings");
  rollout->add_option("--world", world, "world asset");
  rollout->add_option("--dump", dump, "write one JSON record per response");

  auto* inspect = app.add_subcommand("inspect", "describe a checkpoint");
  inspect->add_option("--ckpt", ckpt, "policy file or checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(config, stop_after, out);
    if (eval->parsed()) return cmd_eval(ckpt, suite, n, config, world, eval_seed, out);
    if (ablate->parsed()) return cmd_ablate(config, modes, seeds, base, steps, out);
    if (rollout->parsed()) return cmd_rollout(ckpt, prompt, g, greedy, config, world, seed, dump);
    if (inspect->parsed()) {
      std::cout << inspect_report(ckpt);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
