#pragma once

// Run configuration files, run directories and manifests, and the train /
// eval / ablate / rollout drivers behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bicot/eval.hpp"

namespace bicot {

inline constexpr int kManifestVersion = 1;
inline constexpr std::string_view kCodeVersion = "0.3.0";
inline constexpr std::string_view kOutputRootEnv = "BICOT_OUTPUT_ROOT";

// key = value lines, '#' comments. Relative paths resolve against the
// directory of the config file.
struct RunConfig {
  std::string name = "run";
  TrainerConfig trainer;
  GenConfig gen;
  RewardConfig reward;
  int d_model = 16;
  int d_hidden = 32;
  int num_layers = 1;
  int max_text_len = 48;
  std::int64_t steps = 500;
  std::int64_t checkpoint_every = 100;
  std::uint64_t seed = 0;
  std::filesystem::path world;  // empty: built-in world
  std::filesystem::path suite;  // empty: generated default suite
  int eval_images = 10;
  std::uint64_t eval_seed = 0;
  std::int64_t ablation_steps = 0;  // 0: same as steps

  std::string text;  // the file as read

  static RunConfig parse(std::string_view text, const std::filesystem::path& base_dir = ".");
  static RunConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();
  void validate() const;

  World load_world() const;
  BenchmarkSuite load_suite(const World& world) const;
  PolicyConfig policy_config(const World& world) const;
  nlohmann::ordered_json to_json() const;
};

std::filesystem::path output_root();

// Writes to a sibling temporary and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

struct TrainOutcome {
  std::int64_t steps_done = 0;    // state.step at exit
  std::int64_t steps_run = 0;     // by this invocation
  bool resumed = false;
  bool complete = false;
};

// Train into `run_dir`, resuming from its latest checkpoint when one exists.
// `stop_after` bounds the steps taken by this invocation.
TrainOutcome train_run(const RunConfig& config, const std::filesystem::path& run_dir,
                       std::optional<std::int64_t> stop_after, std::ostream& log);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, std::int64_t step);
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);

// A checkpoint argument may be a policy file or a train-state directory.
PolicyParams load_policy(const std::filesystem::path& ckpt);

struct RolloutDump {
  std::vector<std::string> records;  // one JSON object each
  std::string text;                  // human-readable panels
};

RolloutDump rollout_dump(const PolicyParams& params, const Prompt& prompt, int group_size, const World& world,
                         const GenConfig& gen, const RewardConfig& reward, std::uint64_t seed);

std::string inspect_report(const std::filesystem::path& ckpt);

}  // namespace bicot
