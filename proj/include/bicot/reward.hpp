#pragma once

// Ensemble of generation rewards over decoded grids: a preference proxy,
// a detector with existence/spatial/count branches, per-object VQA and a
// holistic outcome reward, averaged over the enabled experts.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bicot/task_domain.hpp"

namespace bicot {

// Enable flags in the order h(pm), d(et), v(qa), o(rm).
struct ExpertMask {
  bool hpm = true;
  bool det = true;
  bool vqa = true;
  bool orm = true;

  int count() const noexcept { return int{hpm} + int{det} + int{vqa} + int{orm}; }
  std::string to_string() const;  // e.g. "hdvo", "hd"
  static ExpertMask parse(std::string_view letters);
  bool operator==(const ExpertMask&) const = default;
};

struct RewardConfig {
  double alpha = 0.6;              // weight of the spatial term in R_Det
  double spatial_threshold = 1.5;  // cells
  double vqa_epsilon = 0.01;
  int object_budget = 8;           // foreground cells tolerated by the HPM proxy
  ExpertMask mask;
};

struct RewardQueries {
  std::vector<ObjectSpec> objects;  // knowledge object first when present
  std::optional<Relation> spatial;
  std::optional<std::vector<int>> counts;
  std::optional<std::size_t> knowledge_index;
};

RewardQueries extract_queries(const SceneSpec& spec, const KnowledgeTable& table);

struct BoundingBox {
  int row_min = 0, row_max = -1, col_min = 0, col_max = -1;  // inclusive
  int area() const noexcept { return (row_max - row_min + 1) * (col_max - col_min + 1); }
  bool operator==(const BoundingBox&) const = default;
};

struct Detection {
  int code = 0;
  bool found = false;
  BoundingBox box;
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  int count = 0;  // 4-connected components
};

Detection detect(const GridImage& grid, int cell_code);
Detection detect(const GridImage& grid, ObjectSpec query, const World& world);

double box_iou(const BoundingBox& a, const BoundingBox& b);
// Signed displacement of `a` relative to `b` along the queried axis, positive
// when the relation holds.
double directional_displacement(const Detection& a, const Detection& b, Direction direction);
// Both detections must be found.
double spatial_score(const Detection& a, const Detection& b, Direction direction, double threshold);

double reward_det(const GridImage& grid, const RewardQueries& q, const World& world, const RewardConfig& cfg);
double reward_vqa(const GridImage& grid, const RewardQueries& q, const World& world, const RewardConfig& cfg);
double reward_orm(const GridImage& grid, const SceneSpec& spec, const World& world, const RewardConfig& cfg);
double reward_hpm(const GridImage& grid, const RewardConfig& cfg);

// P_yes / (P_yes + P_no) for a match strength m in [0, 1].
double smoothed_yes_ratio(double match, double epsilon);
// Largest number of 4-adjacent pairs among n cells of a square lattice.
int max_adjacent_pairs(int n);

struct RewardReport {
  std::array<double, 4> scores{};  // hpm, det, vqa, orm
  ExpertMask mask;
  double final = 0.0;

  double hpm() const { return scores[0]; }
  double det() const { return scores[1]; }
  double vqa() const { return scores[2]; }
  double orm() const { return scores[3]; }
};

RewardReport ensemble_reward(const std::array<double, 4>& scores, ExpertMask mask);

// Computes every expert (so reports stay comparable across masks) and
// averages the enabled ones.
RewardReport score_image(const GridImage& grid, const SceneSpec& spec, const World& world, const RewardConfig& cfg);

}  // namespace bicot
