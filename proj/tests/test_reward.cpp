#include <doctest.h>

#include <random>

#include "bicot/reward.hpp"
#include "reward_oracle.hpp"

using namespace bicot;

namespace {

const World& world() {
  static const World w = World::builtin();
  return w;
}

ObjectSpec obj(std::string_view shape, std::string_view color) {
  const auto& w = world();
  ObjectSpec o;
  o.shape = static_cast<int>(std::find(w.shapes().begin(), w.shapes().end(), shape) - w.shapes().begin());
  o.color = static_cast<int>(std::find(w.colors().begin(), w.colors().end(), color) - w.colors().begin());
  return o;
}

Detection at_cells(std::initializer_list<std::pair<int, int>> cells) {
  GridImage g(8, 8);
  for (auto [r, c] : cells) g.at(r, c) = 5;
  return detect(g, 5);
}

GridImage random_grid(std::mt19937_64& rng, int h, int w, int codes, double fg) {
  GridImage g(h, w);
  std::bernoulli_distribution on(fg);
  std::uniform_int_distribution<int> code(1, codes - 1);
  for (auto& c : g.cells) c = on(rng) ? code(rng) : 0;
  return g;
}

}  // namespace

TEST_CASE("extract_queries") {
  auto spatial = parse_prompt("a red square left of a blue circle", world());
  auto q = extract_queries(spatial, world().knowledge());
  CHECK(q.objects.size() == 2);
  REQUIRE(q.spatial);
  CHECK(q.spatial->direction == Direction::left_of);

  auto know = parse_prompt("the K_sky", world());
  q = extract_queries(know, world().knowledge());
  REQUIRE(q.objects.size() == 1);
  CHECK(q.objects[0] == obj("circle", "blue"));
  CHECK(q.knowledge_index == 0u);

  auto count = parse_prompt("two red squares", world());
  q = extract_queries(count, world().knowledge());
  REQUIRE(q.counts);
  CHECK(*q.counts == std::vector<int>{2});

  SceneSpec bad;
  bad.knowledge_key = "K_nowhere";
  CHECK_THROWS_AS(extract_queries(bad, world().knowledge()), Error);
}

TEST_CASE("detect") {
  GridImage g(8, 8);
  CHECK_FALSE(detect(g, 3).found);
  CHECK(detect(g, 3).count == 0);

  g.at(2, 3) = 3;
  auto d = detect(g, 3);
  CHECK(d.found);
  CHECK(d.box == BoundingBox{2, 2, 3, 3});
  CHECK(d.centroid_row == 2.0);
  CHECK(d.centroid_col == 3.0);
  CHECK(d.count == 1);

  GridImage two(8, 8);
  two.at(0, 0) = two.at(0, 1) = 4;
  two.at(5, 5) = two.at(6, 5) = 4;
  CHECK(detect(two, 4).count == 2);
  two.at(1, 1) = 4;  // diagonal does not connect
  CHECK(detect(two, 4).count == 2);
}

TEST_CASE("detect count agrees with flood fill on every 4x4 binary pattern") {
  for (int mask = 0; mask < (1 << 16); ++mask) {
    GridImage g(4, 4);
    oracle::Grid og{4, 4, std::vector<int>(16, 0)};
    for (int i = 0; i < 16; ++i)
      if (mask >> i & 1) g.cells[static_cast<std::size_t>(i)] = og.v[static_cast<std::size_t>(i)] = 7;
    const auto d = detect(g, 7);
    REQUIRE(d.count == oracle::components(og, 7));
    REQUIRE(d.found == (mask != 0));
    REQUIRE((d.count >= 1) == d.found);
  }
}

TEST_CASE("spatial_score") {
  auto a = at_cells({{4, 1}});
  auto b = at_cells({{4, 6}});
  CHECK(spatial_score(a, b, Direction::left_of, 1.5) == 1.0);
  CHECK(spatial_score(a, b, Direction::right_of, 1.5) == 0.0);
  CHECK(spatial_score(b, a, Direction::right_of, 1.5) == 1.0);

  // boxes rows 0-1 x cols 0-1 and rows 1-2 x cols 1-2 overlap in one cell: IoU 1/7
  auto c = at_cells({{0, 0}, {1, 1}});
  auto d = at_cells({{1, 1}, {2, 2}});
  CHECK(spatial_score(c, d, Direction::left_of, 1.5) == doctest::Approx(1.0 / 7.0));

  auto e = at_cells({{0, 0}, {1, 1}});         // box 2x2
  auto f = at_cells({{0, 0}, {1, 3}, {0, 2}});  // box 2x4, centroid col 5/3
  CHECK(box_iou(e.box, f.box) == 0.5);
  auto g = at_cells({{0, 0}, {0, 3}, {3, 0}, {3, 3}});  // box 4x4, centroid (1.5, 1.5)
  auto h = at_cells({{0, 0}, {1, 1}});                  // box 2x2, centroid (0.5, 0.5)
  CHECK(box_iou(g.box, h.box) == 0.25);
  CHECK(spatial_score(h, g, Direction::left_of, 1.5) == 0.25);
  CHECK(spatial_score(h, g, Direction::above, 1.5) == 0.25);
  CHECK(spatial_score(h, g, Direction::below, 1.5) == 0.0);

  CHECK_THROWS_AS(spatial_score(a, Detection{}, Direction::above, 1.5), Error);
}

TEST_CASE("reward_det branches") {
  RewardConfig cfg;
  const auto& w = world();

  auto spatial = parse_prompt("a red square left of a blue circle", w);
  CHECK(reward_det(paint_scene(spatial, w), extract_queries(spatial, w.knowledge()), w, cfg) == 1.0);

  auto count = parse_prompt("two red squares", w);
  const auto qc = extract_queries(count, w.knowledge());
  GridImage g(8, 8);
  g.at(0, 0) = g.at(5, 5) = w.cell_code(obj("square", "red"));
  CHECK(reward_det(g, qc, w, cfg) == 1.0);
  g.at(7, 0) = g.at(0, 0);
  CHECK(reward_det(g, qc, w, cfg) == 0.0);

  auto plain = parse_prompt("a red square and a blue circle", w);
  GridImage one(8, 8);
  one.at(3, 3) = w.cell_code(obj("square", "red"));
  CHECK(reward_det(one, extract_queries(plain, w.knowledge()), w, cfg) == 0.5);

  // undetected partner zeroes the spatial term
  CHECK(reward_det(one, extract_queries(spatial, w.knowledge()), w, cfg) == doctest::Approx(0.4 * 0.5));
}

TEST_CASE("reward_vqa smoothing") {
  CHECK(smoothed_yes_ratio(1.0, 0.01) == doctest::Approx(1.01 / 1.02).epsilon(1e-12));
  CHECK(smoothed_yes_ratio(0.0, 0.01) == doctest::Approx(0.01 / 1.02).epsilon(1e-12));
  CHECK(smoothed_yes_ratio(0.5, 0.01) == 0.5);

  RewardConfig cfg;
  const auto& w = world();
  auto spec = parse_prompt("a red square", w);
  auto q = extract_queries(spec, w.knowledge());
  GridImage g(8, 8);
  CHECK(reward_vqa(g, q, w, cfg) == doctest::Approx(0.0098).epsilon(1e-3));
  g.at(1, 1) = w.cell_code(obj("square", "blue"));
  CHECK(reward_vqa(g, q, w, cfg) == 0.5);
  g.at(1, 2) = w.cell_code(obj("square", "red"));
  CHECK(reward_vqa(g, q, w, cfg) == doctest::Approx(0.9902).epsilon(1e-4));
}

TEST_CASE("reward_orm") {
  RewardConfig cfg;
  const auto& w = world();
  auto spec = parse_prompt("a red square left of a blue circle", w);
  CHECK(reward_orm(paint_scene(spec, w), spec, w, cfg) == doctest::Approx(1.01 / 1.02));
  CHECK(reward_orm(GridImage(8, 8), spec, w, cfg) == doctest::Approx(0.01 / 1.02));

  // two objects, no relation: 4 constraints; both shapes present in wrong colors -> f = 1/2
  auto plain = parse_prompt("a red square and a blue circle", w);
  GridImage g(8, 8);
  g.at(0, 0) = w.cell_code(obj("square", "green"));
  g.at(0, 5) = w.cell_code(obj("circle", "green"));
  CHECK(reward_orm(g, plain, w, cfg) == 0.5);

  auto know = parse_prompt("the K_sun", w);
  GridImage sun(8, 8);
  sun.at(2, 2) = w.cell_code(obj("circle", "yellow"));
  CHECK(reward_orm(sun, know, w, cfg) == doctest::Approx(1.01 / 1.02));
}

TEST_CASE("reward_hpm") {
  RewardConfig cfg;
  CHECK(reward_hpm(GridImage(8, 8), cfg) == 1.0);

  GridImage full(8, 8);
  std::mt19937_64 rng(3);
  for (auto& c : full.cells) c = 1 + static_cast<int>(rng() % 24);
  const double s = reward_hpm(full, cfg);
  CHECK(s <= 0.5);  // clutter term contributes nothing

  GridImage block(8, 8);
  block.at(2, 2) = block.at(2, 3) = block.at(3, 2) = block.at(3, 3) = 9;
  CHECK(reward_hpm(block, cfg) == 1.0);

  for (int n = 0; n <= 64; ++n) CHECK(max_adjacent_pairs(n) == oracle::max_pairs(n));
}

TEST_CASE("ensemble_reward") {
  const std::array<double, 4> s{1.0, 0.5, 0.2, 0.9};
  CHECK(ensemble_reward(s, ExpertMask::parse("d")).final == 0.5);
  CHECK(ensemble_reward(s, ExpertMask::parse("hd")).final == 0.75);
  CHECK(ensemble_reward(s, ExpertMask::parse("hdvo")).final == doctest::Approx(0.65));
  CHECK_THROWS_AS(ensemble_reward(s, ExpertMask::parse("")), Error);
  try {
    ensemble_reward(s, ExpertMask{false, false, false, false});
  } catch (const Error& e) {
    CHECK(e.code() == Errc::no_expert_enabled);
  }
  // adding an expert equal to the current mean is a fixed point
  const std::array<double, 4> t{0.2, 0.6, 0.4, 0.4};
  CHECK(ensemble_reward(t, ExpertMask::parse("hdv")).final == doctest::Approx(ensemble_reward(t, ExpertMask::parse("hdvo")).final));
  CHECK(ExpertMask::parse("h+d+v").to_string() == "hdv");
  CHECK_THROWS_AS(ExpertMask::parse("hx"), Error);
}

TEST_CASE("rewards are bounded and match the oracle on random grids and specs") {
  const auto& w = world();
  const auto specs = enumerate_specs(w);
  std::mt19937_64 rng(11);
  RewardConfig cfg;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto& spec = specs[rng() % specs.size()];
    const auto grid = random_grid(rng, 8, 8, w.num_cell_codes(), std::uniform_real_distribution<>(0, 0.5)(rng));
    const auto r = score_image(grid, spec, w, cfg);
    for (double x : r.scores) REQUIRE((x >= 0.0 && x <= 1.0));
    REQUIRE((r.final >= 0.0 && r.final <= 1.0));

    const auto q = extract_queries(spec, w.knowledge());
    oracle::Query oq;
    for (const auto& o : q.objects) oq.objs.push_back({w.cell_code(o), o.shape});
    if (q.spatial) oq.relation_dir = static_cast<int>(q.spatial->direction);
    if (q.counts) oq.counts = *q.counts;
    oracle::Grid og{8, 8, grid.cells};
    const int nc = static_cast<int>(w.colors().size());
    REQUIRE(r.det() == oracle::det(og, oq, 0.6, 1.5));
    REQUIRE(r.vqa() == oracle::vqa(og, oq, nc, 0.01));
    REQUIRE(r.orm() == oracle::orm(og, oq, nc, 1.5, 0.01));
    REQUIRE(r.hpm() == oracle::hpm(og, 8));
  }
}

TEST_CASE("exact renderings score 1 on the detector for every branch") {
  const auto& w = world();
  RewardConfig cfg;
  for (const auto& spec : enumerate_specs(w)) {
    const auto q = extract_queries(spec, w.knowledge());
    REQUIRE(reward_det(paint_scene(spec, w), q, w, cfg) == 1.0);
  }
}

TEST_CASE("adding a missing required object never decreases R_Det, R_VQA, R_ORM") {
  const auto& w = world();
  const auto specs = enumerate_specs(w);
  std::mt19937_64 rng(5);
  RewardConfig cfg;
  int checked = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    const auto& spec = specs[rng() % specs.size()];
    if (spec.counts) continue;  // adding a cell can merge or split components
    auto grid = random_grid(rng, 8, 8, w.num_cell_codes(), 0.1);
    const auto q = extract_queries(spec, w.knowledge());
    for (const auto& o : q.objects) {
      const int code = w.cell_code(o);
      if (std::find(grid.cells.begin(), grid.cells.end(), code) != grid.cells.end()) continue;
      const auto before = score_image(grid, spec, w, cfg);
      // place it where the canonical painter would, which keeps relations well-formed
      const auto painted = paint_scene(spec, w);
      auto after_grid = grid;
      for (std::size_t i = 0; i < painted.cells.size(); ++i)
        if (painted.cells[i] == code) after_grid.cells[i] = code;
      if (q.spatial) continue;
      const auto after = score_image(after_grid, spec, w, cfg);
      // the overwritten cell may have held another required object
      bool clobbered = false;
      for (std::size_t i = 0; i < painted.cells.size(); ++i)
        if (painted.cells[i] == code && grid.cells[i] != 0) clobbered = true;
      if (clobbered) continue;
      REQUIRE(after.det() >= before.det());
      REQUIRE(after.vqa() >= before.vqa());
      REQUIRE(after.orm() >= before.orm());
      ++checked;
      break;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("rewards are pure") {
  const auto& w = world();
  auto spec = parse_prompt("three blue flowers and one red circle", w);
  std::mt19937_64 rng(2);
  auto g = random_grid(rng, 8, 8, w.num_cell_codes(), 0.3);
  RewardConfig cfg;
  const auto a = score_image(g, spec, w, cfg);
  const auto b = score_image(g, spec, w, cfg);
  CHECK(a.scores == b.scores);
  CHECK(a.final == b.final);
}
