#pragma once

// Two-step generation: a semantic plan in the text phase, then the image
// signifier and exactly M image tokens, optionally with classifier-free
// guidance. Groups of responses are sampled in parallel with one seeded
// random stream per member.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bicot/policy.hpp"
#include "bicot/reward.hpp"
#include "bicot/task_domain.hpp"

namespace bicot {

struct GenConfig {
  double text_temperature = 1.0;
  double image_temperature = 1.0;
  bool greedy = false;
  int max_cot_len = 24;  // counts the closing EOS_TEXT
  double cfg_scale = 1.0;
  bool semantic_cot = true;
  // Score image tokens with the guided distribution instead of the
  // conditional one when computing ratios and KL.
  bool guided_traces = false;

  bool guided() const noexcept { return guided_traces && cfg_scale != 1.0; }
  void validate() const;
};

enum class Execution { serial, parallel };

struct Prompt {
  std::string text;
  SceneSpec spec;
  std::vector<TokenId> tokens;

  static Prompt from_text(std::string_view text, const World& world);
  static Prompt from_spec(const SceneSpec& spec, const World& world);
};

struct SemanticCot {
  std::vector<TokenId> tokens;  // ends with EOS_TEXT unless truncated
  bool truncated = false;
  std::vector<double> logp;
};

struct ImageSample {
  std::vector<TokenId> tokens;  // exactly M
  std::vector<double> logp;
};

struct Response {
  bool planned = true;  // instruction + semantic CoT precede the image
  SemanticCot cot;
  ImageSample image;
  GridImage grid;
  LogProbTrace old_trace;  // sampling policy, text targets then image targets
  LogProbTrace ref_trace;  // empty when no reference policy was given

  std::size_t cot_length() const noexcept { return cot.tokens.size(); }
  std::size_t num_targets() const noexcept { return cot.tokens.size() + image.tokens.size(); }
};

struct RolloutGroup {
  Prompt prompt;
  std::vector<Response> responses;
};

// One independent generator per (seed, key...) tuple.
Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

SemanticCot generate_semantic_cot(const PolicyParams& params, const Prompt& prompt, const World& world,
                                  const GenConfig& gen, Rng& rng);
ImageSample generate_image_tokens(const PolicyParams& params, const Prompt& prompt, const SemanticCot* cot,
                                  const World& world, const GenConfig& gen, Rng& rng);
Response sample_response(const PolicyParams& params, const PolicyParams* ref, const Prompt& prompt, const World& world,
                         const GenConfig& gen, Rng& rng);

// [BOS] prompt [instruction cot] IMG_START image; targets are the CoT and
// image tokens.
ScoredSequence response_sequence(const Prompt& prompt, const Response& r, const World& world);
// [BOS] PAD IMG_START image; targets are the image tokens.
ScoredSequence unconditional_sequence(const Response& r);

// Log-probs of a response's targets under `params`, with gradient support.
class ResponseTape {
 public:
  ResponseTape(const PolicyParams& params, const Prompt& prompt, const Response& r, const World& world,
               const GenConfig& gen);

  std::span<const double> logprobs() const noexcept { return logp_; }
  std::size_t num_text() const noexcept { return num_text_; }
  // grad += sum_j weights[j] * d logp_j / d params
  void backward(std::span<const double> weights, ParamVector& grad) const;

 private:
  SequenceTape cond_;
  std::optional<SequenceTape> uncond_;
  double scale_ = 1.0;
  std::size_t num_text_ = 0;
  std::vector<double> logp_;
  std::vector<TokenId> tokens_;
  std::vector<double> mixed_;  // guided log-distributions for image targets
};

LogProbTrace trace_under(const PolicyParams& params, const Prompt& prompt, const Response& r, const World& world,
                         const GenConfig& gen);

// Responses for `group_size` members of every prompt. Member m of prompt b
// draws from substream(seeds[b], {m}).
std::vector<RolloutGroup> rollout_batch(const PolicyParams& sampler, const PolicyParams* ref,
                                        const std::vector<Prompt>& prompts, const std::vector<std::uint64_t>& seeds,
                                        int group_size, const World& world, const GenConfig& gen,
                                        Execution exec = Execution::parallel);
RolloutGroup rollout_group(const PolicyParams& sampler, const PolicyParams* ref, const Prompt& prompt,
                           std::uint64_t seed, int group_size, const World& world, const GenConfig& gen,
                           Execution exec = Execution::parallel);

// Guided log-distribution over allowed entries: lu + s (lc - lu); s == 1
// returns lc unchanged.
std::vector<double> guided_logits(std::span<const double> cond_logdist, std::span<const double> uncond_logdist,
                                  double scale);

// One line-delimited JSON record per response.
std::string rollout_record(const Prompt& prompt, const Response& r, const RewardReport* reward, const World& world,
                           std::optional<double> advantage = std::nullopt);

}  // namespace bicot
