#include "bicot/reward.hpp"

#include <algorithm>
#include <cmath>

namespace bicot {

std::string ExpertMask::to_string() const {
  std::string s;
  if (hpm) s += 'h';
  if (det) s += 'd';
  if (vqa) s += 'v';
  if (orm) s += 'o';
  return s;
}

ExpertMask ExpertMask::parse(std::string_view letters) {
  ExpertMask m{false, false, false, false};
  for (char ch : letters) {
    switch (ch) {
      case 'h': case 'H': m.hpm = true; break;
      case 'd': case 'D': m.det = true; break;
      case 'v': case 'V': m.vqa = true; break;
      case 'o': case 'O': m.orm = true; break;
      case '+': case ',': break;
      default: throw Error(Errc::config_error, "unknown expert flag '" + std::string(1, ch) + "'");
    }
  }
  return m;
}

RewardQueries extract_queries(const SceneSpec& spec, const KnowledgeTable& table) {
  RewardQueries q;
  if (spec.knowledge_key) {
    q.objects.push_back(knowledge_lookup(*spec.knowledge_key, table));
    q.knowledge_index = 0;
  }
  q.objects.insert(q.objects.end(), spec.objects.begin(), spec.objects.end());
  q.spatial = spec.relation;
  q.counts = spec.counts;
  return q;
}

// ---------------------------------------------------------- detection

Detection detect(const GridImage& grid, int cell_code) {
  Detection d;
  d.code = cell_code;
  const int h = grid.height;
  const int w = grid.width;
  std::vector<char> seen(grid.cells.size(), 0);
  std::vector<int> stack;
  double sum_r = 0.0, sum_c = 0.0;
  int n = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (grid.at(r, c) != cell_code) continue;
      if (n == 0) d.box = {r, r, c, c};
      d.box.row_min = std::min(d.box.row_min, r);
      d.box.row_max = std::max(d.box.row_max, r);
      d.box.col_min = std::min(d.box.col_min, c);
      d.box.col_max = std::max(d.box.col_max, c);
      sum_r += r;
      sum_c += c;
      ++n;
      const int idx = r * w + c;
      if (seen[static_cast<std::size_t>(idx)]) continue;
      ++d.count;
      seen[static_cast<std::size_t>(idx)] = 1;
      stack.assign(1, idx);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cr = cur / w, cc = cur % w;
        const int nbr[4][2] = {{cr - 1, cc}, {cr + 1, cc}, {cr, cc - 1}, {cr, cc + 1}};
        for (const auto& nb : nbr) {
          if (nb[0] < 0 || nb[0] >= h || nb[1] < 0 || nb[1] >= w) continue;
          const int ni = nb[0] * w + nb[1];
          if (seen[static_cast<std::size_t>(ni)] || grid.cells[static_cast<std::size_t>(ni)] != cell_code) continue;
          seen[static_cast<std::size_t>(ni)] = 1;
          stack.push_back(ni);
        }
      }
    }
  d.found = n > 0;
  if (d.found) {
    d.centroid_row = sum_r / n;
    d.centroid_col = sum_c / n;
  }
  return d;
}

Detection detect(const GridImage& grid, ObjectSpec query, const World& world) {
  return detect(grid, world.cell_code(query));
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const int r0 = std::max(a.row_min, b.row_min), r1 = std::min(a.row_max, b.row_max);
  const int c0 = std::max(a.col_min, b.col_min), c1 = std::min(a.col_max, b.col_max);
  const int inter = (r1 >= r0 && c1 >= c0) ? (r1 - r0 + 1) * (c1 - c0 + 1) : 0;
  const int uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

double directional_displacement(const Detection& a, const Detection& b, Direction direction) {
  switch (direction) {
    case Direction::left_of: return b.centroid_col - a.centroid_col;
    case Direction::right_of: return a.centroid_col - b.centroid_col;
    case Direction::above: return b.centroid_row - a.centroid_row;
    case Direction::below: return a.centroid_row - b.centroid_row;
  }
  return 0.0;
}

double spatial_score(const Detection& a, const Detection& b, Direction direction, double threshold) {
  if (!a.found || !b.found) throw Error(Errc::invalid_argument, "spatial_score needs both objects detected");
  const double disp = directional_displacement(a, b, direction);
  if (disp > threshold) return 1.0;
  if (disp < 0.0) return 0.0;
  return box_iou(a.box, b.box);
}

// ------------------------------------------------------------ experts

double reward_det(const GridImage& grid, const RewardQueries& q, const World& world, const RewardConfig& cfg) {
  const auto k = q.objects.size();
  if (k == 0) throw Error(Errc::invalid_argument, "no objects to detect");
  std::vector<Detection> dets;
  dets.reserve(k);
  for (const auto& o : q.objects) dets.push_back(detect(grid, o, world));

  if (q.counts) {
    int matched = 0;
    for (std::size_t i = 0; i < k; ++i) matched += dets[i].count == (*q.counts)[i] ? 1 : 0;
    return static_cast<double>(matched) / static_cast<double>(k);
  }
  int found = 0;
  for (const auto& d : dets) found += d.found ? 1 : 0;
  const double existence = static_cast<double>(found) / static_cast<double>(k);
  if (q.spatial) {
    const auto& a = dets[q.spatial->subject];
    const auto& b = dets[q.spatial->object];
    const double rs = (a.found && b.found) ? spatial_score(a, b, q.spatial->direction, cfg.spatial_threshold) : 0.0;
    return cfg.alpha * rs + (1.0 - cfg.alpha) * existence;
  }
  return existence;
}

double smoothed_yes_ratio(double match, double epsilon) {
  const double norm = 1.0 + 2.0 * epsilon;
  const double p_yes = (match + epsilon) / norm;
  const double p_no = (1.0 - match + epsilon) / norm;
  return p_yes / (p_yes + p_no);
}

namespace {

bool shape_present(const GridImage& grid, int shape, const World& world) {
  for (int code : grid.cells)
    if (code != 0 && world.cell_object(code).shape == shape) return true;
  return false;
}

bool exact_present(const GridImage& grid, ObjectSpec o, const World& world) {
  const int code = world.cell_code(o);
  return std::find(grid.cells.begin(), grid.cells.end(), code) != grid.cells.end();
}

}  // namespace

double reward_vqa(const GridImage& grid, const RewardQueries& q, const World& world, const RewardConfig& cfg) {
  if (q.objects.empty()) throw Error(Errc::invalid_argument, "no objects to ask about");
  double acc = 0.0;
  for (const auto& o : q.objects) {
    double m = 0.0;
    if (exact_present(grid, o, world))
      m = 1.0;
    else if (shape_present(grid, o.shape, world))
      m = 0.5;
    acc += smoothed_yes_ratio(m, cfg.vqa_epsilon);
  }
  return acc / static_cast<double>(q.objects.size());
}

double reward_orm(const GridImage& grid, const SceneSpec& spec, const World& world, const RewardConfig& cfg) {
  const RewardQueries q = extract_queries(spec, world.knowledge());
  int satisfied = 0;
  int total = 0;
  auto add = [&](bool ok) {
    ++total;
    satisfied += ok ? 1 : 0;
  };
  // existence + attribute (or knowledge binding) per object
  for (const auto& o : q.objects) {
    add(shape_present(grid, o.shape, world));
    add(exact_present(grid, o, world));
  }
  if (q.spatial) {
    const Detection a = detect(grid, q.objects[q.spatial->subject], world);
    const Detection b = detect(grid, q.objects[q.spatial->object], world);
    add(a.found && b.found && spatial_score(a, b, q.spatial->direction, cfg.spatial_threshold) == 1.0);
  }
  if (q.counts)
    for (std::size_t i = 0; i < q.objects.size(); ++i)
      add(detect(grid, q.objects[i], world).count == (*q.counts)[i]);
  const double f = static_cast<double>(satisfied) / static_cast<double>(total);
  return smoothed_yes_ratio(f, cfg.vqa_epsilon);
}

int max_adjacent_pairs(int n) {
  if (n <= 1) return 0;
  // 2n - ceil(2 sqrt(n)), with the ceiling taken exactly in integers
  int k = static_cast<int>(std::ceil(2.0 * std::sqrt(static_cast<double>(n))));
  while (k > 0 && (k - 1) * (k - 1) >= 4 * n) --k;
  while (k * k < 4 * n) ++k;
  return 2 * n - k;
}

double reward_hpm(const GridImage& grid, const RewardConfig& cfg) {
  const int h = grid.height;
  const int w = grid.width;
  std::vector<int> per_code;
  for (int code : grid.cells) {
    if (code <= 0) continue;
    if (static_cast<std::size_t>(code) >= per_code.size()) per_code.resize(static_cast<std::size_t>(code) + 1, 0);
    ++per_code[static_cast<std::size_t>(code)];
  }
  int pairs = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int code = grid.at(r, c);
      if (code == 0) continue;
      if (c + 1 < w && grid.at(r, c + 1) == code) ++pairs;
      if (r + 1 < h && grid.at(r + 1, c) == code) ++pairs;
    }
  int max_pairs = 0;
  for (int n : per_code) max_pairs += max_adjacent_pairs(n);
  const double contiguity = max_pairs == 0 ? 1.0 : static_cast<double>(pairs) / max_pairs;

  const int m = h * w;
  const int fg = grid.num_foreground();
  const int budget = std::clamp(cfg.object_budget, 0, m);
  const double clutter = m > budget ? static_cast<double>(std::max(0, fg - budget)) / (m - budget) : 0.0;
  return 0.5 * contiguity + 0.5 * (1.0 - clutter);
}

RewardReport ensemble_reward(const std::array<double, 4>& scores, ExpertMask mask) {
  if (mask.count() == 0) throw Error(Errc::no_expert_enabled, "at least one reward expert must be enabled");
  RewardReport r;
  r.scores = scores;
  r.mask = mask;
  const bool on[4] = {mask.hpm, mask.det, mask.vqa, mask.orm};
  double acc = 0.0;
  for (int i = 0; i < 4; ++i)
    if (on[i]) acc += scores[static_cast<std::size_t>(i)];
  r.final = acc / mask.count();
  return r;
}

RewardReport score_image(const GridImage& grid, const SceneSpec& spec, const World& world, const RewardConfig& cfg) {
  const RewardQueries q = extract_queries(spec, world.knowledge());
  return ensemble_reward({reward_hpm(grid, cfg), reward_det(grid, q, world, cfg), reward_vqa(grid, q, world, cfg),
                          reward_orm(grid, spec, world, cfg)},
                         cfg.mask);
}

}  // namespace bicot
