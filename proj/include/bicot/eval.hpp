#pragma once

// Held-out benchmark suites, per-category scoring, the Vendi diversity score
// and the CoT-mode ablation runner.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bicot/grpo.hpp"

namespace bicot {

// Suite file:
//   # comment
//   suite <name>
//   category <color|shape|spatial|counting|complex|knowledge>
//   <prompt>            (one per line, belongs to the last category)
struct BenchmarkSuite {
  std::string name = "suite";
  std::array<std::vector<Prompt>, kNumCategories> categories;

  static BenchmarkSuite parse(std::string_view text, const World& world);
  static BenchmarkSuite load(const std::filesystem::path& path, const World& world);
  std::string to_text(const World& world) const;

  std::size_t size() const noexcept;
  std::vector<std::string> texts() const;
};

// Up to `per_category` prompts of each category, drawn without replacement.
BenchmarkSuite make_suite(const World& world, int per_category, std::uint64_t seed, std::string name = "default");

// Throws config_error if any suite prompt is also a training prompt.
void check_disjoint(const BenchmarkSuite& suite, const PromptPool& pool);

// ------------------------------------------------------------ diversity

// Fraction of cells with equal codes.
double similarity_kernel(const GridImage& a, const GridImage& b);
std::vector<double> gram_matrix(std::span<const GridImage> images);  // row-major n x n

struct SymmetricEigen {
  std::vector<double> values;   // ascending
  std::vector<double> vectors;  // row-major n x n, column k pairs with values[k]
  int sweeps = 0;
};

// Cyclic Jacobi rotations until the off-diagonal Frobenius norm is <= tol.
SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n, double tol = 1e-10, int max_sweeps = 100);

// exp of the Shannon entropy of the eigenvalues of K / n.
double vendi_score(std::span<const GridImage> images);

struct DiversityReport {
  std::vector<std::pair<std::string, double>> per_prompt;
  double mean = 0.0;
};

// ------------------------------------------------------------ evaluation

// Image for one (prompt, member) draw; called concurrently.
using ImageGenerator = std::function<GridImage(const Prompt&, Rng&)>;
ImageGenerator policy_generator(const PolicyParams& params, const World& world, const GenConfig& gen);

struct PromptResult {
  std::string text;
  Category category = Category::color;
  double final = 0.0;
  std::array<double, 4> experts{};
  double vendi = 1.0;
};

struct CategoryScore {
  Category category = Category::color;
  std::size_t prompts = 0;
  double final = 0.0;
  std::array<double, 4> experts{};
  double vendi = 0.0;
};

struct EvalReport {
  int images_per_prompt = 0;
  std::vector<PromptResult> prompts;      // by category, then prompt text
  std::vector<CategoryScore> categories;  // non-empty categories only
  double score = 0.0;                     // mean over categories
  DiversityReport diversity;

  std::string to_jsonl() const;
  std::string summary() const;
};

// Seed of a prompt's draws: depends on the text and eval seed only.
std::uint64_t prompt_seed(std::uint64_t eval_seed, std::string_view text);

EvalReport eval_suite(const ImageGenerator& generator, const BenchmarkSuite& suite, int images_per_prompt,
                      const World& world, const RewardConfig& reward, std::uint64_t eval_seed = 0,
                      Execution exec = Execution::parallel);
EvalReport eval_suite(const PolicyParams& params, const BenchmarkSuite& suite, int images_per_prompt,
                      const GenConfig& gen, const World& world, const RewardConfig& reward,
                      std::uint64_t eval_seed = 0, Execution exec = Execution::parallel);

// ------------------------------------------------------------ ablation

struct AblationSettings {
  TrainerConfig trainer;
  GenConfig gen;
  RewardConfig reward;
  std::int64_t steps = 0;
  int images_per_prompt = 10;
  std::uint64_t eval_seed = 0;
};

struct AblationRun {
  CotMode mode = CotMode::both;
  std::uint64_t seed = 0;
  EvalReport eval;
  std::vector<StepReport> curve;
};

struct OrderingCheck {
  std::string claim;
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

struct AblationReport {
  std::vector<AblationRun> runs;  // sorted by (mode, seed)

  std::vector<OrderingCheck> orderings() const;
  std::string summary() const;
  std::string runs_csv() const;
  std::string curves_csv() const;
  std::string to_jsonl() const;
};

using RunCallback = std::function<void(const AblationRun&)>;

// One training run per (mode, seed), all starting from `base`.
AblationReport run_ablation(const PolicyParams& base, const std::vector<CotMode>& modes,
                            const std::vector<std::uint64_t>& seeds, const AblationSettings& settings,
                            const World& world, const BenchmarkSuite& suite, const PromptPool& pool,
                            Execution exec = Execution::parallel, const RunCallback& on_run = {});

double median(std::vector<double> values);

}  // namespace bicot
