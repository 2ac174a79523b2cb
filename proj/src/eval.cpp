#include "bicot/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace bicot {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

// ------------------------------------------------------------ suites

BenchmarkSuite BenchmarkSuite::parse(std::string_view text, const World& world) {
  BenchmarkSuite suite;
  std::optional<Category> current;
  std::set<std::string> seen;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    const auto line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    auto fail = [&](const std::string& msg) {
      throw Error(Errc::config_error, "suite line " + std::to_string(line_no) + ": " + msg);
    };
    if (line.empty() || line.front() == '#') continue;
    if (line.starts_with("suite ")) {
      suite.name = std::string(trim(line.substr(6)));
      continue;
    }
    if (line.starts_with("category ")) {
      current = parse_category(trim(line.substr(9)));
      continue;
    }
    if (!current) fail("prompt before any category");
    SceneSpec spec;
    try {
      spec = parse_prompt(line, world);
    } catch (const Error& e) {
      fail(e.what());
    }
    if (category_of(spec) != *current)
      fail("'" + std::string(line) + "' is a " + std::string(category_name(category_of(spec))) + " prompt");
    auto p = Prompt::from_spec(spec, world);
    if (!seen.insert(p.text).second) fail("duplicate prompt '" + p.text + "'");
    suite.categories[static_cast<std::size_t>(*current)].push_back(std::move(p));
  }
  if (suite.size() == 0) throw Error(Errc::config_error, "suite has no prompts");
  return suite;
}

BenchmarkSuite BenchmarkSuite::load(const std::filesystem::path& path, const World& world) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config_error, "cannot open suite " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), world);
}

std::string BenchmarkSuite::to_text(const World&) const {
  std::string out = "suite " + name + "\n";
  for (std::size_t c = 0; c < categories.size(); ++c) {
    if (categories[c].empty()) continue;
    out += "\ncategory " + std::string(category_name(static_cast<Category>(c))) + "\n";
    for (const auto& p : categories[c]) out += p.text + "\n";
  }
  return out;
}

std::size_t BenchmarkSuite::size() const noexcept {
  std::size_t n = 0;
  for (const auto& c : categories) n += c.size();
  return n;
}

std::vector<std::string> BenchmarkSuite::texts() const {
  std::vector<std::string> out;
  for (const auto& c : categories)
    for (const auto& p : c) out.push_back(p.text);
  return out;
}

BenchmarkSuite make_suite(const World& world, int per_category, std::uint64_t seed, std::string name) {
  std::array<std::vector<SceneSpec>, kNumCategories> by_cat;
  for (const auto& s : enumerate_specs(world)) by_cat[static_cast<std::size_t>(category_of(s))].push_back(s);
  BenchmarkSuite suite;
  suite.name = std::move(name);
  for (std::size_t c = 0; c < by_cat.size(); ++c) {
    auto& specs = by_cat[c];
    Rng rng = substream(seed, {0x7375697465ULL, c});
    std::shuffle(specs.begin(), specs.end(), rng);
    const auto n = std::min<std::size_t>(specs.size(), static_cast<std::size_t>(std::max(per_category, 0)));
    for (std::size_t i = 0; i < n; ++i) suite.categories[c].push_back(Prompt::from_spec(specs[i], world));
    std::sort(suite.categories[c].begin(), suite.categories[c].end(),
              [](const Prompt& a, const Prompt& b) { return a.text < b.text; });
  }
  return suite;
}

void check_disjoint(const BenchmarkSuite& suite, const PromptPool& pool) {
  for (const auto& t : suite.texts())
    if (pool.contains(t)) throw Error(Errc::config_error, "suite prompt '" + t + "' is also a training prompt");
}

// ------------------------------------------------------------ diversity

double similarity_kernel(const GridImage& a, const GridImage& b) {
  if (a.height != b.height || a.width != b.width || a.cells.size() != b.cells.size())
    throw Error(Errc::dimension_mismatch, "grids of different sizes");
  if (a.cells.empty()) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) same += a.cells[i] == b.cells[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.cells.size());
}

std::vector<double> gram_matrix(std::span<const GridImage> images) {
  const auto n = images.size();
  std::vector<double> k(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) k[i * n + j] = k[j * n + i] = similarity_kernel(images[i], images[j]);
  return k;
}

SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n, double tol, int max_sweeps) {
  if (matrix.size() != n * n) throw Error(Errc::dimension_mismatch, "matrix is not n x n");
  std::vector<double> a(matrix.begin(), matrix.end());
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
  };
  SymmetricEigen out;
  while (off_norm() > tol) {
    if (out.sweeps >= max_sweeps) throw Error(Errc::invalid_argument, "Jacobi iteration did not converge");
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] < a[y * n + y]; });
  out.values.resize(n);
  out.vectors.assign(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a[order[k] * n + order[k]];
    for (std::size_t r = 0; r < n; ++r) out.vectors[r * n + k] = v[r * n + order[k]];
  }
  return out;
}

double vendi_score(std::span<const GridImage> images) {
  const auto n = images.size();
  if (n == 0) throw Error(Errc::invalid_argument, "vendi score of an empty set");
  auto k = gram_matrix(images);
  for (double& x : k) x /= static_cast<double>(n);
  const auto eig = jacobi_eigen(k, n);
  double h = 0.0;
  for (double l : eig.values)
    if (l > 0.0) h -= l * std::log(l);
  // round-off guard; the exact value lies in [1, n]
  return std::clamp(std::exp(h), 1.0, static_cast<double>(n));
}

// ------------------------------------------------------------ evaluation

ImageGenerator policy_generator(const PolicyParams& params, const World& world, const GenConfig& gen) {
  return [&params, &world, gen](const Prompt& p, Rng& rng) {
    return sample_response(params, nullptr, p, world, gen, rng).grid;
  };
}

std::uint64_t prompt_seed(std::uint64_t eval_seed, std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(eval_seed, h);
}

EvalReport eval_suite(const ImageGenerator& generator, const BenchmarkSuite& suite, int images_per_prompt,
                      const World& world, const RewardConfig& reward, std::uint64_t eval_seed, Execution exec) {
  if (images_per_prompt < 1) throw Error(Errc::config_error, "images per prompt must be positive");
  std::vector<const Prompt*> prompts;
  for (const auto& c : suite.categories)
    for (const auto& p : c) prompts.push_back(&p);
  std::sort(prompts.begin(), prompts.end(), [](const Prompt* a, const Prompt* b) {
    const auto ca = category_of(a->spec), cb = category_of(b->spec);
    return ca != cb ? ca < cb : a->text < b->text;
  });

  const auto n_img = static_cast<std::size_t>(images_per_prompt);
  const auto total = static_cast<std::int64_t>(prompts.size() * n_img);
  std::vector<GridImage> grids(prompts.size() * n_img);
  std::vector<RewardReport> scores(grids.size());
  std::vector<std::exception_ptr> errors(grids.size());
#pragma omp parallel for schedule(dynamic) if (exec == Execution::parallel)
  for (std::int64_t k = 0; k < total; ++k) {
    const auto idx = static_cast<std::size_t>(k);
    const auto& p = *prompts[idx / n_img];
    try {
      Rng rng = substream(prompt_seed(eval_seed, p.text), {idx % n_img});
      grids[idx] = generator(p, rng);
      scores[idx] = score_image(grids[idx], p.spec, world, reward);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  EvalReport rep;
  rep.images_per_prompt = images_per_prompt;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    PromptResult r;
    r.text = prompts[i]->text;
    r.category = category_of(prompts[i]->spec);
    for (std::size_t m = 0; m < n_img; ++m) {
      const auto& s = scores[i * n_img + m];
      r.final += s.final;
      for (std::size_t e = 0; e < 4; ++e) r.experts[e] += s.scores[e];
    }
    r.final /= static_cast<double>(n_img);
    for (double& e : r.experts) e /= static_cast<double>(n_img);
    r.vendi = vendi_score(std::span<const GridImage>(grids.data() + i * n_img, n_img));
    rep.diversity.per_prompt.emplace_back(r.text, r.vendi);
    rep.diversity.mean += r.vendi;
    rep.prompts.push_back(std::move(r));
  }
  if (!rep.prompts.empty()) rep.diversity.mean /= static_cast<double>(rep.prompts.size());

  for (int c = 0; c < kNumCategories; ++c) {
    CategoryScore cs;
    cs.category = static_cast<Category>(c);
    for (const auto& r : rep.prompts) {
      if (r.category != cs.category) continue;
      ++cs.prompts;
      cs.final += r.final;
      cs.vendi += r.vendi;
      for (std::size_t e = 0; e < 4; ++e) cs.experts[e] += r.experts[e];
    }
    if (cs.prompts == 0) continue;
    const auto n = static_cast<double>(cs.prompts);
    cs.final /= n;
    cs.vendi /= n;
    for (double& e : cs.experts) e /= n;
    rep.score += cs.final;
    rep.categories.push_back(cs);
  }
  if (!rep.categories.empty()) rep.score /= static_cast<double>(rep.categories.size());
  return rep;
}

EvalReport eval_suite(const PolicyParams& params, const BenchmarkSuite& suite, int images_per_prompt,
                      const GenConfig& gen, const World& world, const RewardConfig& reward, std::uint64_t eval_seed,
                      Execution exec) {
  gen.validate();
  return eval_suite(policy_generator(params, world, gen), suite, images_per_prompt, world, reward, eval_seed, exec);
}

std::string EvalReport::to_jsonl() const {
  std::string out;
  auto experts_json = [](nlohmann::ordered_json& j, const std::array<double, 4>& e) {
    j["hpm"] = e[0];
    j["det"] = e[1];
    j["vqa"] = e[2];
    j["orm"] = e[3];
  };
  for (const auto& r : prompts) {
    nlohmann::ordered_json j;
    j["kind"] = "prompt";
    j["prompt"] = r.text;
    j["category"] = category_name(r.category);
    j["score"] = r.final;
    experts_json(j, r.experts);
    j["vendi"] = r.vendi;
    out += j.dump() + "\n";
  }
  for (const auto& c : categories) {
    nlohmann::ordered_json j;
    j["kind"] = "category";
    j["category"] = category_name(c.category);
    j["prompts"] = c.prompts;
    j["score"] = c.final;
    experts_json(j, c.experts);
    j["vendi"] = c.vendi;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json j;
  j["kind"] = "suite";
  j["images_per_prompt"] = images_per_prompt;
  j["score"] = score;
  j["vendi"] = diversity.mean;
  out += j.dump() + "\n";
  return out;
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  os << std::left << std::setw(11) << "category" << std::right << std::setw(8) << "prompts" << std::setw(9) << "score"
     << std::setw(8) << "hpm" << std::setw(8) << "det" << std::setw(8) << "vqa" << std::setw(8) << "orm" << std::setw(8)
     << "vendi" << "\n";
  for (const auto& c : categories) {
    os << std::left << std::setw(11) << category_name(c.category) << std::right << std::setw(8) << c.prompts
       << std::setw(9) << fixed(c.final) << std::setw(8) << fixed(c.experts[0], 3) << std::setw(8)
       << fixed(c.experts[1], 3) << std::setw(8) << fixed(c.experts[2], 3) << std::setw(8) << fixed(c.experts[3], 3)
       << std::setw(8) << fixed(c.vendi, 3) << "\n";
  }
  os << std::left << std::setw(11) << "overall" << std::right << std::setw(8) << prompts.size() << std::setw(9)
     << fixed(score) << std::setw(40) << fixed(diversity.mean, 3) << "\n";
  return os.str();
}

// ------------------------------------------------------------ ablation

double median(std::vector<double> values) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationReport run_ablation(const PolicyParams& base, const std::vector<CotMode>& modes,
                            const std::vector<std::uint64_t>& seeds, const AblationSettings& settings,
                            const World& world, const BenchmarkSuite& suite, const PromptPool& pool, Execution exec,
                            const RunCallback& on_run) {
  if (modes.empty() || seeds.empty()) throw Error(Errc::config_error, "ablation needs at least one mode and seed");
  if (std::set<CotMode>(modes.begin(), modes.end()).size() != modes.size())
    throw Error(Errc::config_error, "duplicate ablation modes");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw Error(Errc::config_error, "duplicate ablation seeds");
  settings.trainer.validate();
  check_disjoint(suite, pool);

  std::vector<std::pair<CotMode, std::uint64_t>> keys;
  for (auto m : modes)
    for (auto s : seeds) keys.emplace_back(m, s);
  std::sort(keys.begin(), keys.end());

  AblationReport rep;
  for (const auto& [mode, seed] : keys) {
    AblationRun run;
    run.mode = mode;
    run.seed = seed;
    TrainerConfig tc = settings.trainer;
    tc.mode = mode;
    tc.seed = seed;
    auto state = TrainState::start(base);
    if (mode != CotMode::none)
      run_training(state, pool, settings.steps, tc, settings.gen, settings.reward, world, exec,
                   [&run](const StepReport& r, const TrainState&) { run.curve.push_back(r); });
    run.eval = eval_suite(state.params, suite, settings.images_per_prompt, mode_gen(settings.gen, mode), world,
                          settings.reward, settings.eval_seed, exec);
    if (on_run) on_run(run);
    rep.runs.push_back(std::move(run));
  }
  return rep;
}

std::vector<OrderingCheck> AblationReport::orderings() const {
  std::map<CotMode, std::vector<double>> score;
  std::vector<double> with_plan, without_plan;
  for (const auto& r : runs) {
    score[r.mode].push_back(r.eval.score);
    (mode_plans(r.mode) ? with_plan : without_plan).push_back(r.eval.diversity.mean);
  }
  std::vector<OrderingCheck> out;
  auto ge = [&](CotMode a, CotMode b) {
    if (!score.count(a) || !score.count(b)) return;
    OrderingCheck c;
    c.claim = "median score " + std::string(cot_mode_name(a)) + " >= " + std::string(cot_mode_name(b));
    c.lhs = median(score[a]);
    c.rhs = median(score[b]);
    c.holds = c.lhs >= c.rhs;
    out.push_back(c);
  };
  ge(CotMode::both, CotMode::semantic_only);
  ge(CotMode::both, CotMode::token_only);
  ge(CotMode::semantic_only, CotMode::none);
  ge(CotMode::token_only, CotMode::none);
  if (!with_plan.empty() && !without_plan.empty()) {
    OrderingCheck c;
    c.claim = "median vendi with semantic CoT > without";
    c.lhs = median(with_plan);
    c.rhs = median(without_plan);
    c.holds = c.lhs > c.rhs;
    out.push_back(c);
  }
  return out;
}

std::string AblationReport::summary() const {
  std::ostringstream os;
  os << std::left << std::setw(15) << "mode" << std::right << std::setw(6) << "seed";
  for (int c = 0; c < kNumCategories; ++c) os << std::setw(11) << category_name(static_cast<Category>(c));
  os << std::setw(9) << "score" << std::setw(8) << "vendi" << "\n";
  for (const auto& r : runs) {
    os << std::left << std::setw(15) << cot_mode_name(r.mode) << std::right << std::setw(6) << r.seed;
    for (int c = 0; c < kNumCategories; ++c) {
      std::string cell = "-";
      for (const auto& cs : r.eval.categories)
        if (cs.category == static_cast<Category>(c)) cell = fixed(cs.final);
      os << std::setw(11) << cell;
    }
    os << std::setw(9) << fixed(r.eval.score) << std::setw(8) << fixed(r.eval.diversity.mean, 3) << "\n";
  }
  os << "\n";
  for (const auto& c : orderings())
    os << (c.holds ? "[ok]     " : "[FAILED] ") << c.claim << " (" << fixed(c.lhs) << " vs " << fixed(c.rhs) << ")\n";
  return os.str();
}

std::string AblationReport::runs_csv() const {
  std::string out = "mode,seed,score";
  for (int c = 0; c < kNumCategories; ++c) out += "," + std::string(category_name(static_cast<Category>(c)));
  out += ",vendi,final_train_reward\n";
  for (const auto& r : runs) {
    out += std::string(cot_mode_name(r.mode)) + "," + std::to_string(r.seed) + "," + fixed(r.eval.score, 6);
    for (int c = 0; c < kNumCategories; ++c) {
      std::string cell;
      for (const auto& cs : r.eval.categories)
        if (cs.category == static_cast<Category>(c)) cell = fixed(cs.final, 6);
      out += "," + cell;
    }
    out += "," + fixed(r.eval.diversity.mean, 6) + ",";
    if (!r.curve.empty()) out += fixed(r.curve.back().mean_reward, 6);
    out += "\n";
  }
  return out;
}

std::string AblationReport::curves_csv() const {
  std::string out = "mode,seed,step,reward,hpm,det,vqa,orm,kl\n";
  for (const auto& r : runs)
    for (const auto& s : r.curve) {
      out += std::string(cot_mode_name(r.mode)) + "," + std::to_string(r.seed) + "," + std::to_string(s.step) + "," +
             fixed(s.mean_reward, 6);
      for (double e : s.expert_means) out += "," + fixed(e, 6);
      out += "," + fixed(s.mean_kl, 6) + "\n";
    }
  return out;
}

std::string AblationReport::to_jsonl() const {
  std::string out;
  for (const auto& r : runs) {
    nlohmann::ordered_json j;
    j["kind"] = "run";
    j["mode"] = cot_mode_name(r.mode);
    j["seed"] = r.seed;
    j["score"] = r.eval.score;
    for (const auto& cs : r.eval.categories) j["categories"][std::string(category_name(cs.category))] = cs.final;
    j["vendi"] = r.eval.diversity.mean;
    j["steps"] = r.curve.size();
    out += j.dump() + "\n";
  }
  for (const auto& c : orderings()) {
    nlohmann::ordered_json j;
    j["kind"] = "ordering";
    j["claim"] = c.claim;
    j["lhs"] = c.lhs;
    j["rhs"] = c.rhs;
    j["holds"] = c.holds;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace bicot
