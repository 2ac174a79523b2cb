#include "bicot/policy.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace bicot {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// y = W x (+ b), W row-major [rows x cols]. Every forward path goes through
// these two kernels so incremental and full evaluation agree bit-for-bit.
void matvec(const double* w, const double* x, int rows, int cols, double* y) {
  for (int i = 0; i < rows; ++i) {
    const double* row = w + static_cast<std::size_t>(i) * cols;
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

void affine(const double* w, const double* b, const double* x, int rows, int cols, double* y) {
  matvec(w, x, rows, cols, y);
  for (int i = 0; i < rows; ++i) y[i] += b[i];
}

// y += W^T x
void matvec_t_acc(const double* w, const double* x, int rows, int cols, double* y) {
  for (int i = 0; i < rows; ++i) {
    const double* row = w + static_cast<std::size_t>(i) * cols;
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (int j = 0; j < cols; ++j) y[j] += row[j] * xi;
  }
}

// G += a b^T
void outer_acc(const double* a, const double* b, int rows, int cols, double* g) {
  for (int i = 0; i < rows; ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    double* row = g + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) row[j] += ai * b[j];
  }
}

double dot(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

struct BlockOut {
  double* q;
  double* k;  // row t of the key cache
  double* v;  // row t of the value cache
  double* att;  // t + 1 entries
  double* c;
  double* g;
  double* m;
  double* out;
};

// One transformer block at position t. keys/values hold rows 0..t-1 and
// receive row t.
void block_step(const double* p, const ParamLayout::Block& blk, int d, int f, const double* h, int t,
                const double* keys, const double* values, const BlockOut& o) {
  matvec(p + blk.wq, h, d, d, o.q);
  matvec(p + blk.wk, h, d, d, o.k);
  matvec(p + blk.wv, h, d, d, o.v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  double mx = kNegInf;
  for (int u = 0; u <= t; ++u) {
    o.att[u] = dot(o.q, keys + static_cast<std::size_t>(u) * d, d) * scale;
    mx = std::max(mx, o.att[u]);
  }
  double sum = 0.0;
  for (int u = 0; u <= t; ++u) {
    o.att[u] = std::exp(o.att[u] - mx);
    sum += o.att[u];
  }
  for (int u = 0; u <= t; ++u) o.att[u] /= sum;
  std::fill(o.c, o.c + d, 0.0);
  for (int u = 0; u <= t; ++u) {
    const double a = o.att[u];
    const double* vu = values + static_cast<std::size_t>(u) * d;
    for (int j = 0; j < d; ++j) o.c[j] += a * vu[j];
  }
  matvec(p + blk.wo, o.c, d, d, o.g);
  for (int j = 0; j < d; ++j) o.g[j] += h[j];
  affine(p + blk.w1, p + blk.b1, o.g, f, d, o.m);
  for (int i = 0; i < f; ++i) o.m[i] = std::tanh(o.m[i]);
  affine(p + blk.w2, p + blk.b2, o.m, d, f, o.out);
  for (int j = 0; j < d; ++j) o.out[j] += o.g[j];
}

void embed(const double* p, const ParamLayout& lay, int d, TokenId token, int pid, double* h) {
  const double* e = p + lay.tok_emb + static_cast<std::size_t>(token) * d;
  const double* pe = p + lay.pos_emb + static_cast<std::size_t>(pid) * d;
  for (int j = 0; j < d; ++j) h[j] = e[j] + pe[j];
}

}  // namespace

// -------------------------------------------------------- config/layout

void PolicyConfig::validate() const {
  auto bad = [](const char* msg) { throw Error(Errc::invalid_argument, std::string("policy config: ") + msg); };
  if (vocab_size <= Vocab::kNumControl) bad("vocabulary too small");
  if (text_range.begin != Vocab::kNumControl || text_range.end > image_range.begin || image_range.end != vocab_size)
    bad("token ranges inconsistent with vocabulary size");
  if (max_text_len < 2 || num_cells < 1) bad("sequence bounds must be positive");
  if (d_model < 1 || d_model > 64) bad("d_model must be in [1, 64]");
  if (d_hidden < 1) bad("d_hidden must be positive");
  if (num_layers < 1 || num_layers > 2) bad("num_layers must be 1 or 2");
}

PolicyConfig PolicyConfig::for_world(const World& world, int d_model, int d_hidden, int num_layers,
                                     int max_text_len) {
  PolicyConfig c;
  c.vocab_size = world.vocab().size();
  c.text_range = world.vocab().text_range();
  c.image_range = world.vocab().image_range();
  c.max_text_len = max_text_len;
  c.num_cells = world.num_cells();
  c.d_model = d_model;
  c.d_hidden = d_hidden;
  c.num_layers = num_layers;
  c.validate();
  return c;
}

ParamLayout::ParamLayout(const PolicyConfig& config) {
  const int d = config.d_model;
  const int f = config.d_hidden;
  auto add = [&](std::string name, int rows, int cols) {
    TensorInfo info{std::move(name), rows, cols, total};
    total += info.size();
    tensors.push_back(info);
    return info.offset;
  };
  tok_emb = add("tok_emb", config.vocab_size, d);
  pos_emb = add("pos_emb", config.num_positions(), d);
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    Block b{};
    b.wq = add(pre + "wq", d, d);
    b.wk = add(pre + "wk", d, d);
    b.wv = add(pre + "wv", d, d);
    b.wo = add(pre + "wo", d, d);
    b.w1 = add(pre + "w1", f, d);
    b.b1 = add(pre + "b1", f, 1);
    b.w2 = add(pre + "w2", d, f);
    b.b2 = add(pre + "b2", d, 1);
    blocks.push_back(b);
  }
  w_out = add("w_out", config.vocab_size, d);
  b_out = add("b_out", config.vocab_size, 1);
}

PolicyParams::PolicyParams(const PolicyConfig& config) : config_(config), layout_(config) {
  config_.validate();
  values_.assign(layout_.total, 0.0);
}

PolicyParams PolicyParams::initialize(const PolicyConfig& config, std::uint64_t seed) {
  PolicyParams p(config);
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(-0.05, 0.05);
  for (const auto& t : p.layout_.tensors) {
    const bool is_bias = t.cols == 1 && t.name.find(".b") != std::string::npos;
    const bool is_out_bias = t.name == "b_out";
    if (is_bias || is_out_bias) continue;
    for (std::size_t i = 0; i < t.size(); ++i) p.values_[t.offset + i] = unif(rng);
  }
  return p;
}

bool PolicyParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

// ----------------------------------------------------------- masking

bool phase_allows(const PolicyConfig& config, Phase phase, TokenId id) {
  if (phase == Phase::image) return config.image_range.contains(id);
  return config.text_range.contains(id) || id == Vocab::kEosText;
}

void apply_phase_mask(const PolicyConfig& config, Phase phase, std::span<double> logits) {
  for (TokenId id = 0; id < static_cast<TokenId>(logits.size()); ++id)
    if (!phase_allows(config, phase, id)) logits[static_cast<std::size_t>(id)] = kNegInf;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = kNegInf;
  for (double l : logits)
    if (l > mx) mx = l;
  if (mx == kNegInf) throw Error(Errc::all_masked, "every logit is masked");
  double sum = 0.0;
  for (double l : logits)
    if (l != kNegInf) sum += std::exp(l - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] == kNegInf ? kNegInf : logits[i] - lse;
  return out;
}

std::vector<int> position_ids(const PolicyConfig& config, std::span<const TokenId> tokens) {
  std::vector<int> pids(tokens.size());
  bool in_image = false;
  int k = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId tok = tokens[t];
    if (tok < 0 || tok >= config.vocab_size) throw Error(Errc::out_of_vocab, "token id " + std::to_string(tok));
    if (in_image) {
      if (k >= config.num_cells) throw Error(Errc::context_too_long, "more image tokens than grid cells");
      pids[t] = config.max_text_len + 1 + k++;
    } else if (tok == Vocab::kImgStart) {
      pids[t] = config.max_text_len;
      in_image = true;
    } else {
      if (static_cast<int>(t) >= config.max_text_len)
        throw Error(Errc::context_too_long, "text context exceeds " + std::to_string(config.max_text_len));
      pids[t] = static_cast<int>(t);
    }
  }
  return pids;
}

// ------------------------------------------------------ SequenceTape

SequenceTape::SequenceTape(const PolicyParams& params, const ScoredSequence& seq) : params_(&params), seq_(seq) {
  const auto& cfg = params.config();
  const auto& lay = params.layout();
  const int d = cfg.d_model;
  const int f = cfg.d_hidden;
  const int V = cfg.vocab_size;
  if (seq.tokens.empty() || seq.tokens.front() != Vocab::kBos)
    throw Error(Errc::invalid_argument, "scored sequence must start with BOS");
  if (seq.phases.size() != seq.num_targets()) throw Error(Errc::invalid_argument, "one phase per target required");
  for (std::size_t j = 0; j < seq.targets.size(); ++j)
    if (seq.targets[j] < 1 || seq.targets[j] >= seq.tokens.size() || (j > 0 && seq.targets[j] <= seq.targets[j - 1]))
      throw Error(Errc::invalid_argument, "targets must be strictly increasing indices after BOS");
  pos_ids_ = position_ids(cfg, seq.tokens);

  n_pos_ = seq.targets.empty() ? 0 : static_cast<int>(seq.targets.back());
  const auto T = static_cast<std::size_t>(std::max(n_pos_, 0));
  const double* p = params.values().data();
  h0_.assign(T * d, 0.0);
  for (std::size_t t = 0; t < T; ++t) embed(p, lay, d, seq.tokens[t], pos_ids_[t], h0_.data() + t * d);

  blocks_.resize(lay.blocks.size());
  const double* h_in = h0_.data();
  for (std::size_t b = 0; b < lay.blocks.size(); ++b) {
    auto& a = blocks_[b];
    a.q.assign(T * d, 0.0);
    a.k.assign(T * d, 0.0);
    a.v.assign(T * d, 0.0);
    a.att.assign(T * (T + 1) / 2, 0.0);
    a.c.assign(T * d, 0.0);
    a.g.assign(T * d, 0.0);
    a.m.assign(T * f, 0.0);
    a.out.assign(T * d, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      BlockOut o{a.q.data() + t * d, a.k.data() + t * d,     a.v.data() + t * d,   a.att.data() + t * (t + 1) / 2,
                 a.c.data() + t * d, a.g.data() + t * d,     a.m.data() + t * f,   a.out.data() + t * d};
      block_step(p, lay.blocks[b], d, f, h_in + t * d, static_cast<int>(t), a.k.data(), a.v.data(), o);
    }
    h_in = a.out.data();
  }

  const std::size_t n_targets = seq.num_targets();
  logdist_.assign(n_targets * V, 0.0);
  logp_.assign(n_targets, 0.0);
  std::vector<double> logits(static_cast<std::size_t>(V));
  for (std::size_t j = 0; j < n_targets; ++j) {
    const std::size_t t = seq.targets[j] - 1;
    affine(p + lay.w_out, p + lay.b_out, h_in + t * d, V, d, logits.data());
    apply_phase_mask(cfg, seq.phases[j], logits);
    auto ls = log_softmax(logits);
    std::copy(ls.begin(), ls.end(), logdist_.begin() + static_cast<std::ptrdiff_t>(j * V));
    const TokenId target = seq.tokens[t + 1];
    logp_[j] = ls[static_cast<std::size_t>(target)];
    if (logp_[j] == kNegInf)
      throw Error(Errc::masked_token, "target " + std::to_string(j) + " (token " + std::to_string(target) +
                                          ") is masked in its phase");
  }
}

std::span<const double> SequenceTape::log_distribution(std::size_t target) const {
  const auto V = static_cast<std::size_t>(params_->config().vocab_size);
  return std::span<const double>(logdist_).subspan(target * V, V);
}

void SequenceTape::backward(std::span<const double> weights, ParamVector& grad) const {
  const int V = params_->config().vocab_size;
  if (weights.size() != logp_.size()) throw Error(Errc::invalid_argument, "one weight per target required");
  std::vector<double> dlogits(logp_.size() * static_cast<std::size_t>(V), 0.0);
  std::vector<char> active(logp_.size(), 0);
  for (std::size_t j = 0; j < logp_.size(); ++j) {
    const double w = weights[j];
    if (w == 0.0) continue;
    active[j] = 1;
    const TokenId target = seq_.tokens[seq_.targets[j]];
    auto ld = log_distribution(j);
    double* row = dlogits.data() + j * static_cast<std::size_t>(V);
    for (int v = 0; v < V; ++v) {
      const double prob = ld[static_cast<std::size_t>(v)] == kNegInf ? 0.0 : std::exp(ld[static_cast<std::size_t>(v)]);
      row[v] = -w * prob;
    }
    row[target] += w;
  }
  backprop(dlogits, active, grad);
}

void SequenceTape::backward_logits(std::span<const double> dlogits, ParamVector& grad) const {
  const auto V = static_cast<std::size_t>(params_->config().vocab_size);
  if (dlogits.size() != logp_.size() * V) throw Error(Errc::invalid_argument, "one logit row per target required");
  std::vector<char> active(logp_.size(), 0);
  for (std::size_t j = 0; j < logp_.size(); ++j)
    for (std::size_t v = 0; v < V; ++v)
      if (dlogits[j * V + v] != 0.0) {
        active[j] = 1;
        break;
      }
  backprop(dlogits, active, grad);
}

void SequenceTape::backprop(std::span<const double> dlogits_all, std::span<const char> active, ParamVector& grad) const {
  const auto& cfg = params_->config();
  const auto& lay = params_->layout();
  const int d = cfg.d_model;
  const int f = cfg.d_hidden;
  const int V = cfg.vocab_size;
  const auto T = static_cast<std::size_t>(n_pos_);
  if (grad.size() != params_->size()) throw Error(Errc::dimension_mismatch, "gradient buffer size");
  const double* p = params_->values().data();
  double* gp = grad.data();
  const double* h_last = blocks_.empty() ? h0_.data() : blocks_.back().out.data();

  std::vector<double> dh(T * d, 0.0);
  for (std::size_t j = 0; j < logp_.size(); ++j) {
    if (!active[j]) continue;
    const std::size_t t = seq_.targets[j] - 1;
    const double* dlogits = dlogits_all.data() + j * static_cast<std::size_t>(V);
    outer_acc(dlogits, h_last + t * d, V, d, gp + lay.w_out);
    for (int v = 0; v < V; ++v) gp[lay.b_out + static_cast<std::size_t>(v)] += dlogits[v];
    matvec_t_acc(p + lay.w_out, dlogits, V, d, dh.data() + t * d);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dg(T * d), dm(static_cast<std::size_t>(f)), dc(T * d), dq(T * d), dk(T * d), dv(T * d),
      da(T);
  for (std::size_t bi = blocks_.size(); bi-- > 0;) {
    const auto& blk = lay.blocks[bi];
    const auto& a = blocks_[bi];
    const double* h_in = bi == 0 ? h0_.data() : blocks_[bi - 1].out.data();

    // feed-forward with residual
    dg = dh;
    for (std::size_t t = 0; t < T; ++t) {
      const double* dout = dh.data() + t * d;
      const double* mt = a.m.data() + t * f;
      outer_acc(dout, mt, d, f, gp + blk.w2);
      for (int j = 0; j < d; ++j) gp[blk.b2 + static_cast<std::size_t>(j)] += dout[j];
      std::fill(dm.begin(), dm.end(), 0.0);
      matvec_t_acc(p + blk.w2, dout, d, f, dm.data());
      for (int i = 0; i < f; ++i) dm[static_cast<std::size_t>(i)] *= 1.0 - mt[i] * mt[i];
      outer_acc(dm.data(), a.g.data() + t * d, f, d, gp + blk.w1);
      for (int i = 0; i < f; ++i) gp[blk.b1 + static_cast<std::size_t>(i)] += dm[static_cast<std::size_t>(i)];
      matvec_t_acc(p + blk.w1, dm.data(), f, d, dg.data() + t * d);
    }

    // attention with residual
    dh = dg;
    std::fill(dc.begin(), dc.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      outer_acc(dg.data() + t * d, a.c.data() + t * d, d, d, gp + blk.wo);
      matvec_t_acc(p + blk.wo, dg.data() + t * d, d, d, dc.data() + t * d);
    }
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* att = a.att.data() + t * (t + 1) / 2;
      const double* dct = dc.data() + t * d;
      double weighted = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        da[u] = dot(dct, a.v.data() + u * d, d);
        weighted += att[u] * da[u];
        double* dvu = dv.data() + u * d;
        for (int j = 0; j < d; ++j) dvu[j] += att[u] * dct[j];
      }
      const double* qt = a.q.data() + t * d;
      double* dqt = dq.data() + t * d;
      for (std::size_t u = 0; u <= t; ++u) {
        const double ds = att[u] * (da[u] - weighted) * scale;
        if (ds == 0.0) continue;
        const double* ku = a.k.data() + u * d;
        double* dku = dk.data() + u * d;
        for (int j = 0; j < d; ++j) {
          dqt[j] += ds * ku[j];
          dku[j] += ds * qt[j];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const double* ht = h_in + t * d;
      outer_acc(dq.data() + t * d, ht, d, d, gp + blk.wq);
      outer_acc(dk.data() + t * d, ht, d, d, gp + blk.wk);
      outer_acc(dv.data() + t * d, ht, d, d, gp + blk.wv);
      double* dht = dh.data() + t * d;
      matvec_t_acc(p + blk.wq, dq.data() + t * d, d, d, dht);
      matvec_t_acc(p + blk.wk, dk.data() + t * d, d, d, dht);
      matvec_t_acc(p + blk.wv, dv.data() + t * d, d, d, dht);
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* ge = gp + lay.tok_emb + static_cast<std::size_t>(seq_.tokens[t]) * d;
    double* gpe = gp + lay.pos_emb + static_cast<std::size_t>(pos_ids_[t]) * d;
    const double* dht = dh.data() + t * d;
    for (int j = 0; j < d; ++j) {
      ge[j] += dht[j];
      gpe[j] += dht[j];
    }
  }
}

// ------------------------------------------------ IncrementalDecoder

IncrementalDecoder::IncrementalDecoder(const PolicyParams& params)
    : params_(&params), keys_(params.layout().blocks.size()), values_(params.layout().blocks.size()) {}

void IncrementalDecoder::push(TokenId token) {
  const auto& cfg = params_->config();
  const auto& lay = params_->layout();
  const int d = cfg.d_model;
  const int f = cfg.d_hidden;
  if (token < 0 || token >= cfg.vocab_size) throw Error(Errc::out_of_vocab, "token id " + std::to_string(token));
  const int t = static_cast<int>(tokens_.size());
  int pid = 0;
  if (in_image_) {
    if (image_count_ >= cfg.num_cells) throw Error(Errc::context_too_long, "more image tokens than grid cells");
    pid = cfg.max_text_len + 1 + image_count_++;
  } else if (token == Vocab::kImgStart) {
    pid = cfg.max_text_len;
    in_image_ = true;
  } else {
    if (t >= cfg.max_text_len)
      throw Error(Errc::context_too_long, "text context exceeds " + std::to_string(cfg.max_text_len));
    pid = t;
  }
  tokens_.push_back(token);

  const double* p = params_->values().data();
  std::vector<double> h(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d)),
      att(static_cast<std::size_t>(t + 1)), c(static_cast<std::size_t>(d)), g(static_cast<std::size_t>(d)),
      m(static_cast<std::size_t>(f)), out(static_cast<std::size_t>(d));
  embed(p, lay, d, token, pid, h.data());
  for (std::size_t b = 0; b < lay.blocks.size(); ++b) {
    keys_[b].resize(static_cast<std::size_t>(t + 1) * d);
    values_[b].resize(static_cast<std::size_t>(t + 1) * d);
    BlockOut o{q.data(), keys_[b].data() + static_cast<std::size_t>(t) * d,
               values_[b].data() + static_cast<std::size_t>(t) * d, att.data(), c.data(), g.data(), m.data(),
               out.data()};
    block_step(p, lay.blocks[b], d, f, h.data(), t, keys_[b].data(), values_[b].data(), o);
    h.swap(out);
  }
  last_hidden_ = std::move(h);
}

std::vector<double> IncrementalDecoder::logits() const {
  if (tokens_.empty()) throw Error(Errc::invalid_argument, "decoder has no context");
  const auto& cfg = params_->config();
  const auto& lay = params_->layout();
  const double* p = params_->values().data();
  std::vector<double> out(static_cast<std::size_t>(cfg.vocab_size));
  affine(p + lay.w_out, p + lay.b_out, last_hidden_.data(), cfg.vocab_size, cfg.d_model, out.data());
  return out;
}

// ----------------------------------------------------- entry points

std::vector<double> forward_logits(const PolicyParams& params, std::span<const TokenId> context, Phase phase) {
  IncrementalDecoder dec(params);
  dec.push(Vocab::kBos);
  for (TokenId t : context) dec.push(t);
  auto logits = dec.logits();
  apply_phase_mask(params.config(), phase, logits);
  return logits;
}

LogProbTrace sequence_logprob(const PolicyParams& params, std::span<const TokenId> context,
                              std::span<const TokenId> continuation, std::span<const Phase> phases,
                              bool with_distributions) {
  if (phases.size() != continuation.size()) throw Error(Errc::invalid_argument, "one phase per continuation token");
  ScoredSequence seq;
  seq.tokens.push_back(Vocab::kBos);
  seq.tokens.insert(seq.tokens.end(), context.begin(), context.end());
  for (std::size_t j = 0; j < continuation.size(); ++j) seq.targets.push_back(seq.tokens.size() + j);
  seq.tokens.insert(seq.tokens.end(), continuation.begin(), continuation.end());
  seq.phases.assign(phases.begin(), phases.end());
  SequenceTape tape(params, seq);
  LogProbTrace trace;
  trace.logp.assign(tape.target_logprobs().begin(), tape.target_logprobs().end());
  if (with_distributions)
    for (std::size_t j = 0; j < trace.logp.size(); ++j) {
      auto ld = tape.log_distribution(j);
      trace.distributions.emplace_back(ld.begin(), ld.end());
    }
  return trace;
}

TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw Error(Errc::invalid_argument, "temperature must be positive");
  double mx = kNegInf;
  for (double l : logits)
    if (l > mx) mx = l;
  if (mx == kNegInf) throw Error(Errc::all_masked, "no finite logit to sample from");
  std::vector<double> w(logits.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == kNegInf) continue;
    w[i] = std::exp((logits[i] - mx) / temperature);
    sum += w[i];
  }
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * sum;
  double acc = 0.0;
  TokenId last = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0) continue;
    acc += w[i];
    last = static_cast<TokenId>(i);
    if (u < acc) return last;
  }
  return last;
}

TokenId greedy_token(std::span<const double> logits) {
  auto it = std::max_element(logits.begin(), logits.end());
  if (it == logits.end() || *it == kNegInf) throw Error(Errc::all_masked, "no finite logit");
  return static_cast<TokenId>(it - logits.begin());
}

namespace {

ObjectiveGradient reduce_parts(const PolicyParams& params, std::vector<ParamVector>& parts,
                               const std::vector<double>& objectives) {
  ObjectiveGradient out;
  out.grad = params.zeros_like();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.objective += objectives[i];
    const auto& g = parts[i];
    for (std::size_t k = 0; k < g.size(); ++k) out.grad[k] += g[k];
  }
  for (double g : out.grad)
    if (!std::isfinite(g)) throw Error(Errc::non_finite_gradient, "gradient contains non-finite entries");
  if (!std::isfinite(out.objective)) throw Error(Errc::non_finite_gradient, "objective is non-finite");
  return out;
}

void one_sequence(const PolicyParams& params, const WeightedSequence& item, ParamVector& grad, double& objective) {
  SequenceTape tape(params, item.sequence);
  auto lp = tape.target_logprobs();
  if (item.weights.size() != lp.size()) throw Error(Errc::invalid_argument, "one weight per target required");
  double obj = 0.0;
  for (std::size_t j = 0; j < lp.size(); ++j)
    if (item.weights[j] != 0.0) obj += item.weights[j] * lp[j];
  objective = obj;
  grad = params.zeros_like();
  tape.backward(item.weights, grad);
}

}  // namespace

ObjectiveGradient grad_objective(const PolicyParams& params, std::span<const WeightedSequence> batch) {
  if (batch.empty()) throw Error(Errc::invalid_argument, "empty batch");
  std::vector<ParamVector> parts(batch.size());
  std::vector<double> objectives(batch.size(), 0.0);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(batch.size()); ++i) {
    try {
      one_sequence(params, batch[static_cast<std::size_t>(i)], parts[static_cast<std::size_t>(i)],
                   objectives[static_cast<std::size_t>(i)]);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return reduce_parts(params, parts, objectives);
}

ObjectiveGradient grad_objective_serial(const PolicyParams& params, std::span<const WeightedSequence> batch) {
  if (batch.empty()) throw Error(Errc::invalid_argument, "empty batch");
  std::vector<ParamVector> parts(batch.size());
  std::vector<double> objectives(batch.size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) one_sequence(params, batch[i], parts[i], objectives[i]);
  return reduce_parts(params, parts, objectives);
}

double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

// -------------------------------------------------------- checkpoint
//
// Layout (little-endian):
//   "BICOTPOL" | u32 version | u32 config[10] | u32 n_tensors |
//   n_tensors x (u16 name_len, name bytes, u32 rows, u32 cols) |
//   f64 values[total] | u32 crc32 of everything before it

namespace {

constexpr char kMagic[8] = {'B', 'I', 'C', 'O', 'T', 'P', 'O', 'L'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw Error(Errc::corrupt_checksum, "checkpoint truncated");
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw Error(Errc::corrupt_checksum, "checkpoint truncated");
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view data) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

}  // namespace

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
  const auto& c = params.config();
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointVersion);
  for (auto v : {c.vocab_size, c.text_range.begin, c.text_range.end, c.image_range.begin, c.image_range.end,
                 c.max_text_len, c.num_cells, c.d_model, c.d_hidden, c.num_layers})
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(v));
  const auto& tensors = params.layout().tensors;
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
    buf += t.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rows));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.cols));
  }
  for (double v : params.values()) put<double>(buf, v);
  put<std::uint32_t>(buf, crc_of(buf));

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error(Errc::io_error, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io_error, "cannot move checkpoint into place: " + ec.message());
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r(data);
  if (r.bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic)))
    throw Error(Errc::corrupt_checksum, "bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(Errc::version_mismatch, "checkpoint format version " + std::to_string(version) + ", reader expects " +
                                            std::to_string(kCheckpointVersion));
  if (data.size() < sizeof(std::uint32_t) + r.pos()) throw Error(Errc::corrupt_checksum, "checkpoint truncated");
  const std::string_view body(data.data(), data.size() - sizeof(std::uint32_t));
  std::uint32_t stored = 0;
  std::memcpy(&stored, data.data() + body.size(), sizeof(stored));
  if (crc_of(body) != stored) throw Error(Errc::corrupt_checksum, "checkpoint checksum mismatch");

  PolicyConfig c;
  c.vocab_size = static_cast<TokenId>(r.get<std::uint32_t>());
  c.text_range.begin = static_cast<TokenId>(r.get<std::uint32_t>());
  c.text_range.end = static_cast<TokenId>(r.get<std::uint32_t>());
  c.image_range.begin = static_cast<TokenId>(r.get<std::uint32_t>());
  c.image_range.end = static_cast<TokenId>(r.get<std::uint32_t>());
  c.max_text_len = static_cast<int>(r.get<std::uint32_t>());
  c.num_cells = static_cast<int>(r.get<std::uint32_t>());
  c.d_model = static_cast<int>(r.get<std::uint32_t>());
  c.d_hidden = static_cast<int>(r.get<std::uint32_t>());
  c.num_layers = static_cast<int>(r.get<std::uint32_t>());
  PolicyParams params(c);
  const auto n_tensors = r.get<std::uint32_t>();
  const auto& expected = params.layout().tensors;
  if (n_tensors != expected.size()) throw Error(Errc::corrupt_checksum, "shape table does not match config");
  for (const auto& t : expected) {
    const auto len = r.get<std::uint16_t>();
    const std::string name = r.bytes(len);
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (name != t.name || static_cast<int>(rows) != t.rows || static_cast<int>(cols) != t.cols)
      throw Error(Errc::corrupt_checksum, "shape table entry '" + name + "' does not match config");
  }
  for (double& v : params.values()) v = r.get<double>();
  if (r.pos() != body.size()) throw Error(Errc::corrupt_checksum, "trailing bytes in checkpoint");
  return params;
}

}  // namespace bicot
