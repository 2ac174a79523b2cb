#include "bicot/runner.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace bicot {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw Error(Errc::config_error, "'" + std::string(key) + "': cannot parse '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(Errc::config_error, "'" + std::string(key) + "': expected true or false");
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value, const fs::path& base)>;

template <typename T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) {
    c.*field = parse_number<T>(k, v);
  };
}

template <typename T>
Setter trainer_number(T TrainerConfig::*field) {
  return [field](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) {
    c.trainer.*field = parse_number<T>(k, v);
  };
}

template <typename T>
Setter gen_number(T GenConfig::*field) {
  return [field](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) {
    c.gen.*field = parse_number<T>(k, v);
  };
}

template <typename T>
Setter reward_number(T RewardConfig::*field) {
  return [field](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) {
    c.reward.*field = parse_number<T>(k, v);
  };
}

Setter path(fs::path RunConfig::*field) {
  return [field](RunConfig& c, std::string_view, std::string_view v, const fs::path& base) {
    const fs::path p{std::string(v)};
    c.*field = p.is_absolute() ? p : (base / p).lexically_normal();
  };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"name", [](RunConfig& c, std::string_view, std::string_view v, const fs::path&) { c.name = std::string(v); }},
      {"seed", number(&RunConfig::seed)},
      {"steps", number(&RunConfig::steps)},
      {"checkpoint_every", number(&RunConfig::checkpoint_every)},
      {"d_model", number(&RunConfig::d_model)},
      {"d_hidden", number(&RunConfig::d_hidden)},
      {"num_layers", number(&RunConfig::num_layers)},
      {"max_text_len", number(&RunConfig::max_text_len)},
      {"world", path(&RunConfig::world)},
      {"suite", path(&RunConfig::suite)},
      {"eval_images", number(&RunConfig::eval_images)},
      {"eval_seed", number(&RunConfig::eval_seed)},
      {"ablation_steps", number(&RunConfig::ablation_steps)},
      {"learning_rate", trainer_number(&TrainerConfig::learning_rate)},
      {"beta", trainer_number(&TrainerConfig::beta)},
      {"clip_eps", trainer_number(&TrainerConfig::clip_eps)},
      {"group_size", trainer_number(&TrainerConfig::group_size)},
      {"prompts_per_step", trainer_number(&TrainerConfig::prompts_per_step)},
      {"max_grad_norm", trainer_number(&TrainerConfig::max_grad_norm)},
      {"inner_epochs", trainer_number(&TrainerConfig::inner_epochs)},
      {"adv_std_floor", trainer_number(&TrainerConfig::adv_std_floor)},
      {"adam_beta1", trainer_number(&TrainerConfig::adam_beta1)},
      {"adam_beta2", trainer_number(&TrainerConfig::adam_beta2)},
      {"adam_eps", trainer_number(&TrainerConfig::adam_eps)},
      {"optimizer",
       [](RunConfig& c, std::string_view, std::string_view v, const fs::path&) {
         if (v == "adam") c.trainer.optimizer = OptimizerKind::adam;
         else if (v == "sgd") c.trainer.optimizer = OptimizerKind::sgd;
         else throw Error(Errc::config_error, "optimizer must be adam or sgd");
       }},
      {"mode",
       [](RunConfig& c, std::string_view, std::string_view v, const fs::path&) { c.trainer.mode = parse_cot_mode(v); }},
      {"text_temperature", gen_number(&GenConfig::text_temperature)},
      {"image_temperature", gen_number(&GenConfig::image_temperature)},
      {"max_cot_len", gen_number(&GenConfig::max_cot_len)},
      {"cfg_scale", gen_number(&GenConfig::cfg_scale)},
      {"greedy",
       [](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) { c.gen.greedy = parse_bool(k, v); }},
      {"guided_traces",
       [](RunConfig& c, std::string_view k, std::string_view v, const fs::path&) {
         c.gen.guided_traces = parse_bool(k, v);
       }},
      {"reward_mask",
       [](RunConfig& c, std::string_view, std::string_view v, const fs::path&) { c.reward.mask = ExpertMask::parse(v); }},
      {"alpha", reward_number(&RewardConfig::alpha)},
      {"spatial_threshold", reward_number(&RewardConfig::spatial_threshold)},
      {"vqa_epsilon", reward_number(&RewardConfig::vqa_epsilon)},
      {"object_budget", reward_number(&RewardConfig::object_budget)},
  };
  return table;
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text, const fs::path& base_dir) {
  RunConfig c;
  c.text = std::string(text);
  std::set<std::string, std::less<>> seen;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = "config line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw Error(Errc::config_error, where + "expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw Error(Errc::config_error, where + "unknown key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second)
      throw Error(Errc::config_error, where + "duplicate key '" + std::string(key) + "'");
    if (value.empty()) throw Error(Errc::config_error, where + "empty value for '" + std::string(key) + "'");
    try {
      it->second(c, key, value, base_dir);
    } catch (const Error& e) {
      throw Error(Errc::config_error, where + e.what());
    }
  }
  c.trainer.seed = c.seed;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config_error, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto c = parse(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
  return c;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

void RunConfig::validate() const {
  trainer.validate();
  gen.validate();
  auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(Errc::config_error, what);
  };
  require(!name.empty() && name.find('/') == std::string::npos, "name must be a plain directory name");
  require(steps >= 0, "steps must be non-negative");
  require(checkpoint_every >= 1, "checkpoint_every must be positive");
  require(d_model >= 1 && d_hidden >= 1 && num_layers >= 1, "model dimensions must be positive");
  require(max_text_len >= 2, "max_text_len too small");
  require(eval_images >= 1, "eval_images must be positive");
  require(ablation_steps >= 0, "ablation_steps must be non-negative");
  require(reward.mask.count() > 0, "reward_mask enables no expert");
  require(reward.alpha >= 0.0 && reward.alpha <= 1.0, "alpha must lie in [0, 1]");
  require(reward.vqa_epsilon > 0.0, "vqa_epsilon must be positive");
  require(reward.object_budget >= 0, "object_budget must be non-negative");
}

World RunConfig::load_world() const { return world.empty() ? World::builtin() : World::from_file(world); }

BenchmarkSuite RunConfig::load_suite(const World& w) const {
  return suite.empty() ? make_suite(w, 8, 2025) : BenchmarkSuite::load(suite, w);
}

PolicyConfig RunConfig::policy_config(const World& w) const {
  return PolicyConfig::for_world(w, d_model, d_hidden, num_layers, max_text_len);
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["seed"] = seed;
  j["steps"] = steps;
  j["checkpoint_every"] = checkpoint_every;
  j["d_model"] = d_model;
  j["d_hidden"] = d_hidden;
  j["num_layers"] = num_layers;
  j["max_text_len"] = max_text_len;
  j["world"] = world.string();
  j["suite"] = suite.string();
  j["eval_images"] = eval_images;
  j["eval_seed"] = eval_seed;
  j["ablation_steps"] = ablation_steps;
  j["learning_rate"] = trainer.learning_rate;
  j["beta"] = trainer.beta;
  j["clip_eps"] = trainer.clip_eps;
  j["group_size"] = trainer.group_size;
  j["prompts_per_step"] = trainer.prompts_per_step;
  j["max_grad_norm"] = trainer.max_grad_norm;
  j["inner_epochs"] = trainer.inner_epochs;
  j["adv_std_floor"] = trainer.adv_std_floor;
  j["optimizer"] = trainer.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["adam_beta1"] = trainer.adam_beta1;
  j["adam_beta2"] = trainer.adam_beta2;
  j["adam_eps"] = trainer.adam_eps;
  j["mode"] = cot_mode_name(trainer.mode);
  j["text_temperature"] = gen.text_temperature;
  j["image_temperature"] = gen.image_temperature;
  j["max_cot_len"] = gen.max_cot_len;
  j["cfg_scale"] = gen.cfg_scale;
  j["greedy"] = gen.greedy;
  j["guided_traces"] = gen.guided_traces;
  j["reward_mask"] = reward.mask.to_string();
  j["alpha"] = reward.alpha;
  j["spatial_threshold"] = reward.spatial_threshold;
  j["vqa_epsilon"] = reward.vqa_epsilon;
  j["object_budget"] = reward.object_budget;
  return j;
}

fs::path output_root() {
  const char* env = std::getenv(std::string(kOutputRootEnv).c_str());
  return env && *env ? fs::path(env) : fs::path("runs");
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error(Errc::io_error, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io_error, "cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------ training

fs::path checkpoint_dir(const fs::path& run_dir, std::int64_t step) {
  std::ostringstream os;
  os << "step_" << std::setw(6) << std::setfill('0') << step;
  return run_dir / "checkpoints" / os.str();
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (!e.is_directory() || !name.starts_with("step_") || !fs::exists(e.path() / "state.json")) continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

namespace {

struct Manifest {
  nlohmann::ordered_json j;

  void write(const fs::path& run_dir) const { write_file_atomic(run_dir / "manifest.json", j.dump(2) + "\n"); }
};

// Keep the first `steps` metric lines; later ones are regenerated.
void truncate_metrics(const fs::path& file, std::int64_t steps) {
  if (!fs::exists(file)) return;
  std::istringstream in(read_file(file));
  std::string line, kept;
  std::int64_t n = 0;
  while (n < steps && std::getline(in, line)) {
    if (line.empty()) continue;
    kept += line + "\n";
    ++n;
  }
  write_file_atomic(file, kept);
}

}  // namespace

TrainOutcome train_run(const RunConfig& config, const fs::path& run_dir, std::optional<std::int64_t> stop_after,
                       std::ostream& log) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const World world = config.load_world();
  const auto suite = config.load_suite(world);
  const PromptPool pool(world, suite.texts());
  check_disjoint(suite, pool);

  TrainOutcome out;
  Manifest m;
  TrainState state;
  const auto manifest_path = run_dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    nlohmann::ordered_json prev;
    try {
      prev = nlohmann::ordered_json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::corrupt_checksum, "unreadable manifest: " + std::string(e.what()));
    }
    if (prev.value("config_text", std::string()) != config.text)
      throw Error(Errc::config_error, run_dir.string() + " holds a run with a different config");
    m.j = prev;
  }
  if (const auto ckpt = latest_checkpoint(run_dir)) {
    state = load_train_state(*ckpt);
    if (!(state.params.config() == config.policy_config(world)))
      throw Error(Errc::config_error, "checkpoint model does not match the config");
    out.resumed = true;
    log << "resuming " << run_dir.string() << " at step " << state.step << "\n";
  } else {
    state = TrainState::start(PolicyParams::initialize(config.policy_config(world), config.seed));
  }

  m.j["format_version"] = kManifestVersion;
  m.j["code_version"] = kCodeVersion;
  m.j["checkpoint_version"] = kCheckpointVersion;
  m.j["seed"] = config.seed;
  m.j["config"] = config.to_json();
  m.j["config_text"] = config.text;
  if (!m.j.contains("started_at")) m.j["started_at"] = now_utc();
  m.j["status"] = "running";
  m.j["steps_completed"] = state.step;
  m.j["metrics"] = config.steps > 0 ? nlohmann::ordered_json("metrics.jsonl") : nlohmann::ordered_json(nullptr);
  if (!m.j.contains("checkpoints")) m.j["checkpoints"] = nlohmann::ordered_json::array();
  fs::create_directories(run_dir);
  m.write(run_dir);

  auto save = [&](const TrainState& s) {
    const auto dir = checkpoint_dir(run_dir, s.step);
    save_train_state(s, dir);
    const auto rel = fs::relative(dir, run_dir).generic_string();
    auto& list = m.j["checkpoints"];
    if (std::find(list.begin(), list.end(), rel) == list.end()) list.push_back(rel);
    m.j["steps_completed"] = s.step;
    m.write(run_dir);
  };
  if (!out.resumed) save(state);

  const auto metrics_path = run_dir / "metrics.jsonl";
  if (config.steps > 0) truncate_metrics(metrics_path, state.step);

  std::int64_t target = config.steps;
  if (stop_after) target = std::min(target, state.step + std::max<std::int64_t>(*stop_after, 0));
  const auto start_step = state.step;
  if (state.step < target) {
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw Error(Errc::io_error, "cannot append to " + metrics_path.string());
    run_training(state, pool, target, config.trainer, config.gen, config.reward, world, Execution::parallel,
                 [&](const StepReport& r, const TrainState& s) {
                   metrics << r.to_json() << "\n";
                   metrics.flush();
                   if ((r.step + 1) % 25 == 0 || s.step == target)
                     log << "step " << r.step << " reward " << std::fixed << std::setprecision(4) << r.mean_reward
                         << " kl " << r.mean_kl << "\n";
                   if (s.step % config.checkpoint_every == 0 || s.step == target) save(s);
                 });
  }
  out.steps_done = state.step;
  out.steps_run = state.step - start_step;
  out.complete = state.step >= config.steps;
  m.j["steps_completed"] = state.step;
  m.j["status"] = out.complete ? "complete" : "interrupted";
  m.j["finished_at"] = now_utc();
  m.j["wall_clock_seconds"] =
      m.j.value("wall_clock_seconds", 0.0) + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.write(run_dir);
  return out;
}

// ------------------------------------------------------------ inspection

PolicyParams load_policy(const fs::path& ckpt) {
  if (fs::is_directory(ckpt)) return load_checkpoint(ckpt / "policy.ckpt");
  return load_checkpoint(ckpt);
}

RolloutDump rollout_dump(const PolicyParams& params, const Prompt& prompt, int group_size, const World& world,
                         const GenConfig& gen, const RewardConfig& reward, std::uint64_t seed) {
  if (group_size < 1) throw Error(Errc::config_error, "group size must be positive");
  gen.validate();
  std::vector<Response> rs;
  std::vector<RewardReport> scores;
  std::vector<double> finals;
  for (int m = 0; m < group_size; ++m) {
    Rng rng = substream(seed, {static_cast<std::uint64_t>(m)});
    rs.push_back(sample_response(params, nullptr, prompt, world, gen, rng));
    scores.push_back(score_image(rs.back().grid, prompt.spec, world, reward));
    finals.push_back(scores.back().final);
  }
  std::optional<AdvantageSet> adv;
  if (group_size >= 2) adv = compute_advantages(finals);
  RolloutDump d;
  std::ostringstream os;
  os << "prompt: " << prompt.text << "\n";
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const auto& r = rs[i];
    d.records.push_back(rollout_record(prompt, r, &scores[i], world,
                                       adv ? std::optional<double>(adv->values[i]) : std::nullopt));
    os << "\n--- response " << i << "\n";
    if (r.planned) os << "cot: " << world.detokenize(r.cot.tokens) << (r.cot.truncated ? " [truncated]" : "") << "\n";
    os << grid_to_picture(r.grid, world);
    os << std::fixed << std::setprecision(4) << "hpm " << scores[i].hpm() << "  det " << scores[i].det() << "  vqa "
       << scores[i].vqa() << "  orm " << scores[i].orm() << "  final " << scores[i].final;
    if (adv) os << "  advantage " << adv->values[i];
    os << "\n";
  }
  d.text = os.str();
  return d;
}

std::string inspect_report(const fs::path& ckpt) {
  const auto params = load_policy(ckpt);
  const auto& c = params.config();
  std::ostringstream os;
  os << "checkpoint " << ckpt.string() << " (format " << kCheckpointVersion << ")\n";
  os << "vocab " << c.vocab_size << "  text [" << c.text_range.begin << ", " << c.text_range.end << ")  image ["
     << c.image_range.begin << ", " << c.image_range.end << ")\n";
  os << "d_model " << c.d_model << "  d_hidden " << c.d_hidden << "  layers " << c.num_layers << "  max_text_len "
     << c.max_text_len << "  cells " << c.num_cells << "\n";
  os << "parameters " << params.size() << (params.all_finite() ? "" : "  (NON-FINITE VALUES)") << "\n";
  for (const auto& t : params.layout().tensors) {
    double ss = 0, mx = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double v = params.values()[t.offset + i];
      ss += v * v;
      mx = std::max(mx, std::abs(v));
    }
    os << "  " << std::left << std::setw(16) << t.name << std::right << std::setw(5) << t.rows << " x " << std::setw(4)
       << t.cols << "  norm " << std::setprecision(5) << std::sqrt(ss) << "  max " << mx << "\n";
  }
  if (fs::is_directory(ckpt) && fs::exists(ckpt / "state.json")) {
    const auto j = nlohmann::json::parse(read_file(ckpt / "state.json"));
    os << "train step " << j.at("step").get<std::int64_t>() << "  optimizer steps " << j.at("adam_t").get<std::int64_t>()
       << "\n";
  }
  return os.str();
}

}  // namespace bicot
