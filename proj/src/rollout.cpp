#include "bicot/rollout.hpp"

#include <cmath>
#include <exception>
#include <limits>

#include <json.hpp>

namespace bicot {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

TokenId choose(std::span<const double> logits, double temperature, bool greedy, Rng& rng) {
  return greedy ? greedy_token(logits) : sample_token(logits, temperature, rng);
}

void push_prefix(IncrementalDecoder& dec, const Prompt& prompt, const World& world, bool planned) {
  dec.push(Vocab::kBos);
  for (TokenId t : prompt.tokens) dec.push(t);
  if (planned)
    for (TokenId t : world.instruction()) dec.push(t);
}

SemanticCot continue_cot(IncrementalDecoder& dec, const PolicyConfig& cfg, const GenConfig& gen, Rng& rng) {
  if (dec.length() + static_cast<std::size_t>(gen.max_cot_len) > static_cast<std::size_t>(cfg.max_text_len))
    throw Error(Errc::context_too_long, "prompt, instruction and max_cot_len exceed the text context of " +
                                            std::to_string(cfg.max_text_len));
  SemanticCot cot;
  cot.truncated = true;
  for (int step = 0; step < gen.max_cot_len; ++step) {
    auto logits = dec.logits();
    apply_phase_mask(cfg, Phase::text, logits);
    const auto logdist = log_softmax(logits);
    const TokenId tok = choose(logits, gen.text_temperature, gen.greedy, rng);
    cot.tokens.push_back(tok);
    cot.logp.push_back(logdist[static_cast<std::size_t>(tok)]);
    dec.push(tok);
    if (tok == Vocab::kEosText) {
      cot.truncated = false;
      break;
    }
  }
  return cot;
}

ImageSample continue_image(IncrementalDecoder& dec, const PolicyParams& params, const GenConfig& gen, Rng& rng) {
  const auto& cfg = params.config();
  const bool use_cfg = gen.cfg_scale != 1.0;
  std::optional<IncrementalDecoder> uncond;
  if (use_cfg) {
    uncond.emplace(params);
    uncond->push(Vocab::kBos);
    uncond->push(Vocab::kPad);
    uncond->push(Vocab::kImgStart);
  }
  dec.push(Vocab::kImgStart);
  ImageSample img;
  img.tokens.reserve(static_cast<std::size_t>(cfg.num_cells));
  for (int k = 0; k < cfg.num_cells; ++k) {
    auto lc = dec.logits();
    apply_phase_mask(cfg, Phase::image, lc);
    const auto lcd = log_softmax(lc);
    TokenId tok;
    double logp;
    if (use_cfg) {
      auto lu = uncond->logits();
      apply_phase_mask(cfg, Phase::image, lu);
      const auto mix = guided_logits(lcd, log_softmax(lu), gen.cfg_scale);
      tok = choose(mix, gen.image_temperature, gen.greedy, rng);
      logp = gen.guided_traces ? log_softmax(mix)[static_cast<std::size_t>(tok)] : lcd[static_cast<std::size_t>(tok)];
    } else {
      tok = choose(lc, gen.image_temperature, gen.greedy, rng);
      logp = lcd[static_cast<std::size_t>(tok)];
    }
    img.tokens.push_back(tok);
    img.logp.push_back(logp);
    if (k + 1 < cfg.num_cells) {
      dec.push(tok);
      if (uncond) uncond->push(tok);
    }
  }
  return img;
}

}  // namespace

void GenConfig::validate() const {
  if (!greedy && !(text_temperature > 0.0 && image_temperature > 0.0))
    throw Error(Errc::config_error, "sampling temperatures must be positive");
  if (max_cot_len < 1) throw Error(Errc::config_error, "max_cot_len must be at least 1");
  if (!std::isfinite(cfg_scale)) throw Error(Errc::config_error, "cfg_scale must be finite");
}

Prompt Prompt::from_text(std::string_view text, const World& world) {
  Prompt p;
  p.spec = parse_prompt(text, world);
  p.text = render_prompt(p.spec, world);
  p.tokens = world.tokenize(p.text);
  return p;
}

Prompt Prompt::from_spec(const SceneSpec& spec, const World& world) {
  Prompt p;
  p.spec = spec;
  p.text = render_prompt(spec, world);
  p.tokens = world.tokenize(p.text);
  return p;
}

Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

std::vector<double> guided_logits(std::span<const double> cond_logdist, std::span<const double> uncond_logdist,
                                  double scale) {
  if (cond_logdist.size() != uncond_logdist.size()) throw Error(Errc::dimension_mismatch, "guidance logits size");
  std::vector<double> out(cond_logdist.begin(), cond_logdist.end());
  if (scale == 1.0) return out;
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (cond_logdist[v] == kNegInf || uncond_logdist[v] == kNegInf) {
      out[v] = kNegInf;
      continue;
    }
    out[v] = uncond_logdist[v] + scale * (cond_logdist[v] - uncond_logdist[v]);
  }
  return out;
}

SemanticCot generate_semantic_cot(const PolicyParams& params, const Prompt& prompt, const World& world,
                                  const GenConfig& gen, Rng& rng) {
  IncrementalDecoder dec(params);
  push_prefix(dec, prompt, world, true);
  return continue_cot(dec, params.config(), gen, rng);
}

ImageSample generate_image_tokens(const PolicyParams& params, const Prompt& prompt, const SemanticCot* cot,
                                  const World& world, const GenConfig& gen, Rng& rng) {
  IncrementalDecoder dec(params);
  push_prefix(dec, prompt, world, cot != nullptr);
  if (cot)
    for (TokenId t : cot->tokens) dec.push(t);
  return continue_image(dec, params, gen, rng);
}

Response sample_response(const PolicyParams& params, const PolicyParams* ref, const Prompt& prompt, const World& world,
                         const GenConfig& gen, Rng& rng) {
  Response r;
  r.planned = gen.semantic_cot;
  IncrementalDecoder dec(params);
  push_prefix(dec, prompt, world, r.planned);
  if (r.planned) r.cot = continue_cot(dec, params.config(), gen, rng);
  r.image = continue_image(dec, params, gen, rng);
  r.grid = decode_image(r.image.tokens, world.vocab(), world.height(), world.width());
  r.old_trace.logp = r.cot.logp;
  r.old_trace.logp.insert(r.old_trace.logp.end(), r.image.logp.begin(), r.image.logp.end());
  if (ref) r.ref_trace = trace_under(*ref, prompt, r, world, gen);
  return r;
}

ScoredSequence response_sequence(const Prompt& prompt, const Response& r, const World& world) {
  ScoredSequence s;
  s.tokens.push_back(Vocab::kBos);
  s.tokens.insert(s.tokens.end(), prompt.tokens.begin(), prompt.tokens.end());
  if (r.planned) {
    s.tokens.insert(s.tokens.end(), world.instruction().begin(), world.instruction().end());
    for (TokenId t : r.cot.tokens) {
      s.targets.push_back(s.tokens.size());
      s.phases.push_back(Phase::text);
      s.tokens.push_back(t);
    }
  } else if (!r.cot.tokens.empty()) {
    throw Error(Errc::invalid_argument, "unplanned response carries a semantic CoT");
  }
  s.tokens.push_back(Vocab::kImgStart);
  for (TokenId t : r.image.tokens) {
    s.targets.push_back(s.tokens.size());
    s.phases.push_back(Phase::image);
    s.tokens.push_back(t);
  }
  return s;
}

ScoredSequence unconditional_sequence(const Response& r) {
  ScoredSequence s;
  s.tokens = {Vocab::kBos, Vocab::kPad, Vocab::kImgStart};
  for (TokenId t : r.image.tokens) {
    s.targets.push_back(s.tokens.size());
    s.phases.push_back(Phase::image);
    s.tokens.push_back(t);
  }
  return s;
}

ResponseTape::ResponseTape(const PolicyParams& params, const Prompt& prompt, const Response& r, const World& world,
                           const GenConfig& gen)
    : cond_(params, response_sequence(prompt, r, world)), num_text_(r.cot.tokens.size()) {
  auto lp = cond_.target_logprobs();
  logp_.assign(lp.begin(), lp.end());
  tokens_ = r.cot.tokens;
  tokens_.insert(tokens_.end(), r.image.tokens.begin(), r.image.tokens.end());
  if (!gen.guided()) return;
  scale_ = gen.cfg_scale;
  uncond_.emplace(params, unconditional_sequence(r));
  const auto V = static_cast<std::size_t>(params.config().vocab_size);
  const std::size_t n_img = r.image.tokens.size();
  mixed_.resize(n_img * V);
  for (std::size_t k = 0; k < n_img; ++k) {
    const auto mix = log_softmax(guided_logits(cond_.log_distribution(num_text_ + k), uncond_->log_distribution(k), scale_));
    std::copy(mix.begin(), mix.end(), mixed_.begin() + static_cast<std::ptrdiff_t>(k * V));
    logp_[num_text_ + k] = mix[static_cast<std::size_t>(r.image.tokens[k])];
  }
}

void ResponseTape::backward(std::span<const double> weights, ParamVector& grad) const {
  if (!uncond_) {
    cond_.backward(weights, grad);
    return;
  }
  if (weights.size() != logp_.size()) throw Error(Errc::invalid_argument, "one weight per target required");
  const std::size_t n_img = logp_.size() - num_text_;
  const std::size_t V = n_img ? mixed_.size() / n_img : 0;
  std::vector<double> dc(logp_.size() * V, 0.0);
  std::vector<double> du(n_img * V, 0.0);
  for (std::size_t j = 0; j < num_text_; ++j) {
    const double w = weights[j];
    if (w == 0.0) continue;
    const auto ld = cond_.log_distribution(j);
    double* row = dc.data() + j * V;
    for (std::size_t v = 0; v < V; ++v) row[v] = ld[v] == kNegInf ? 0.0 : -w * std::exp(ld[v]);
    row[static_cast<std::size_t>(tokens_[j])] += w;
  }
  for (std::size_t k = 0; k < n_img; ++k) {
    const double w = weights[num_text_ + k];
    if (w == 0.0) continue;
    const double* mix = mixed_.data() + k * V;
    double* rc = dc.data() + (num_text_ + k) * V;
    double* ru = du.data() + k * V;
    for (std::size_t v = 0; v < V; ++v) {
      const double g = mix[v] == kNegInf ? 0.0 : -w * std::exp(mix[v]);
      rc[v] = scale_ * g;
      ru[v] = (1.0 - scale_) * g;
    }
    const auto t = static_cast<std::size_t>(tokens_[num_text_ + k]);
    rc[t] += scale_ * w;
    ru[t] += (1.0 - scale_) * w;
  }
  cond_.backward_logits(dc, grad);
  uncond_->backward_logits(du, grad);
}

LogProbTrace trace_under(const PolicyParams& params, const Prompt& prompt, const Response& r, const World& world,
                         const GenConfig& gen) {
  ResponseTape tape(params, prompt, r, world, gen);
  LogProbTrace t;
  t.logp.assign(tape.logprobs().begin(), tape.logprobs().end());
  return t;
}

std::vector<RolloutGroup> rollout_batch(const PolicyParams& sampler, const PolicyParams* ref,
                                        const std::vector<Prompt>& prompts, const std::vector<std::uint64_t>& seeds,
                                        int group_size, const World& world, const GenConfig& gen, Execution exec) {
  if (seeds.size() != prompts.size()) throw Error(Errc::invalid_argument, "one seed per prompt required");
  if (group_size < 2) throw Error(Errc::group_too_small, "a group needs at least two responses");
  gen.validate();
  std::vector<RolloutGroup> groups(prompts.size());
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    groups[b].prompt = prompts[b];
    groups[b].responses.resize(static_cast<std::size_t>(group_size));
  }
  const auto G = static_cast<std::size_t>(group_size);
  const auto n = static_cast<std::int64_t>(prompts.size() * G);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic) if (exec == Execution::parallel)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto b = static_cast<std::size_t>(i) / G;
    const auto m = static_cast<std::size_t>(i) % G;
    try {
      Rng rng = substream(seeds[b], {m});
      groups[b].responses[m] = sample_response(sampler, ref, prompts[b], world, gen, rng);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return groups;
}

RolloutGroup rollout_group(const PolicyParams& sampler, const PolicyParams* ref, const Prompt& prompt,
                           std::uint64_t seed, int group_size, const World& world, const GenConfig& gen,
                           Execution exec) {
  return std::move(rollout_batch(sampler, ref, {prompt}, {seed}, group_size, world, gen, exec).front());
}

std::string rollout_record(const Prompt& prompt, const Response& r, const RewardReport* reward, const World& world,
                           std::optional<double> advantage) {
  nlohmann::ordered_json j;
  j["prompt"] = prompt.text;
  j["planned"] = r.planned;
  j["cot"] = r.cot.tokens;
  j["cot_text"] = world.detokenize(r.cot.tokens);
  j["cot_truncated"] = r.cot.truncated;
  j["image"] = r.image.tokens;
  j["grid"] = grid_to_text(r.grid);
  if (reward) {
    j["reward"] = {{"hpm", reward->hpm()}, {"det", reward->det()}, {"vqa", reward->vqa()},
                   {"orm", reward->orm()}, {"final", reward->final}, {"mask", reward->mask.to_string()}};
  }
  if (advantage) j["advantage"] = *advantage;
  return j.dump();
}

}  // namespace bicot
