#pragma once

// Small causal attention policy over the unified text/image vocabulary with
// hand-derived gradients, incremental sampling and a versioned checkpoint.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bicot/task_domain.hpp"

namespace bicot {

using Rng = std::mt19937_64;
using ParamVector = std::vector<double>;

enum class Phase : std::uint8_t { text, image };

struct PolicyConfig {
  TokenId vocab_size = 0;
  TokenRange text_range;
  TokenRange image_range;
  int max_text_len = 48;  // BOS + prompt + instruction + CoT + IMG_START
  int num_cells = 64;
  int d_model = 32;
  int d_hidden = 64;
  int num_layers = 1;

  // Text positions 0..max_text_len-1, IMG_START at max_text_len, image
  // token k at max_text_len + 1 + k.
  int num_positions() const noexcept { return max_text_len + 1 + num_cells; }
  void validate() const;
  bool operator==(const PolicyConfig&) const = default;

  static PolicyConfig for_world(const World& world, int d_model = 32, int d_hidden = 64, int num_layers = 1,
                                int max_text_len = 48);
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t wq, wk, wv, wo, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<Block> blocks;
  std::size_t w_out = 0;
  std::size_t b_out = 0;
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  explicit ParamLayout(const PolicyConfig& config);
  ParamLayout() = default;
};

class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(const PolicyConfig& config);  // all zeros

  // Weights and embeddings ~ uniform(-0.05, 0.05) from `seed`; biases zero.
  static PolicyParams initialize(const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  ParamVector zeros_like() const { return ParamVector(values_.size(), 0.0); }
  bool all_finite() const;

  bool operator==(const PolicyParams& other) const {
    return config_ == other.config_ && values_ == other.values_;
  }

 private:
  PolicyConfig config_;
  ParamLayout layout_;
  ParamVector values_;
};

// A token sequence (always starting with BOS) together with the strictly
// increasing token indices whose log-probabilities are scored; phases[j]
// governs targets[j]. Unscored tokens (e.g. IMG_START) are context only.
struct ScoredSequence {
  using Index = std::size_t;
  std::vector<TokenId> tokens;
  std::vector<Index> targets;
  std::vector<Phase> phases;

  std::size_t num_targets() const noexcept { return targets.size(); }
};

struct LogProbTrace {
  std::vector<double> logp;
  std::vector<std::vector<double>> distributions;  // filled on demand

  std::size_t size() const noexcept { return logp.size(); }
};

bool phase_allows(const PolicyConfig& config, Phase phase, TokenId id);
void apply_phase_mask(const PolicyConfig& config, Phase phase, std::span<double> logits);
// Max-subtracted log-softmax; -inf entries stay -inf.
std::vector<double> log_softmax(std::span<const double> logits);

// Full forward pass over one scored sequence, retaining activations so
// gradients of any weighted sum of target log-probs can be taken.
class SequenceTape {
 public:
  SequenceTape(const PolicyParams& params, const ScoredSequence& seq);

  std::span<const double> target_logprobs() const noexcept { return logp_; }
  std::span<const double> log_distribution(std::size_t target) const;
  // grad += sum_j weights[j] * d logp_j / d params
  void backward(std::span<const double> weights, ParamVector& grad) const;
  // grad += sum_j dlogits[j] . d logits_j / d params, one row of vocab_size
  // entries per target (masked entries must be zero).
  void backward_logits(std::span<const double> dlogits, ParamVector& grad) const;

 private:
  struct BlockActs {
    std::vector<double> q, k, v, att, c, g, m, out;
  };
  const PolicyParams* params_;
  ScoredSequence seq_;
  int n_pos_ = 0;  // positions fed to the network (= last target index)
  std::vector<int> pos_ids_;
  std::vector<double> h0_;
  std::vector<BlockActs> blocks_;
  std::vector<double> logdist_;  // per target, vocab entries
  std::vector<double> logp_;

  void backprop(std::span<const double> dlogits, std::span<const char> active, ParamVector& grad) const;
};

// Incremental evaluator used while sampling. Produces logits bit-identical
// to SequenceTape for the same prefix.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const PolicyParams& params);

  void push(TokenId token);
  std::size_t length() const noexcept { return tokens_.size(); }
  // Unmasked logits predicting the token after the current prefix.
  std::vector<double> logits() const;

 private:
  const PolicyParams* params_;
  std::vector<TokenId> tokens_;
  int image_count_ = 0;
  bool in_image_ = false;
  std::vector<std::vector<double>> keys_, values_;  // per block, flat [pos][d]
  std::vector<double> last_hidden_;
};

std::vector<int> position_ids(const PolicyConfig& config, std::span<const TokenId> tokens);

// Logits after [BOS] + context, with the phase mask applied.
std::vector<double> forward_logits(const PolicyParams& params, std::span<const TokenId> context, Phase phase);

LogProbTrace sequence_logprob(const PolicyParams& params, std::span<const TokenId> context,
                              std::span<const TokenId> continuation, std::span<const Phase> phases,
                              bool with_distributions = false);

TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng);
TokenId greedy_token(std::span<const double> logits);

struct WeightedSequence {
  ScoredSequence sequence;
  std::vector<double> weights;  // one per target
};

struct ObjectiveGradient {
  double objective = 0.0;
  ParamVector grad;
};

// Exact gradient of sum_i sum_j w_ij log pi(target_ij | prefix). OpenMP over
// sequences; per-sequence buffers are reduced in index order so the result
// does not depend on the thread count.
ObjectiveGradient grad_objective(const PolicyParams& params, std::span<const WeightedSequence> batch);
// Single-threaded reference with the same reduction order.
ObjectiveGradient grad_objective_serial(const PolicyParams& params, std::span<const WeightedSequence> batch);

double l2_norm(std::span<const double> v);

inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace bicot
