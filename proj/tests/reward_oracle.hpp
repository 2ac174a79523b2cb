#pragma once

// Independent brute-force versions of the reward formulas, written directly
// from their definitions with no code shared with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace bicot::oracle {

struct Grid {
  int h = 0, w = 0;
  std::vector<int> v;
  int operator()(int r, int c) const { return v[static_cast<std::size_t>(r * w + c)]; }
};

struct Obj {
  int code = 0;
  int shape = 0;
};

inline int components(const Grid& g, int code) {
  std::vector<int> label(g.v.size(), 0);
  int n = 0;
  std::function<void(int, int)> fill = [&](int r, int c) {
    if (r < 0 || c < 0 || r >= g.h || c >= g.w) return;
    const auto i = static_cast<std::size_t>(r * g.w + c);
    if (label[i] || g.v[i] != code) return;
    label[i] = n;
    fill(r + 1, c);
    fill(r - 1, c);
    fill(r, c + 1);
    fill(r, c - 1);
  };
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      if (g(r, c) == code && !label[static_cast<std::size_t>(r * g.w + c)]) {
        ++n;
        fill(r, c);
      }
  return n;
}

struct Box {
  bool found = false;
  int r0 = 1 << 20, r1 = -1, c0 = 1 << 20, c1 = -1;
  double cr = 0, cc = 0;
};

inline Box box_of(const Grid& g, int code) {
  Box b;
  std::vector<int> rows, cols;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      if (g(r, c) == code) {
        rows.push_back(r);
        cols.push_back(c);
      }
  if (rows.empty()) return b;
  b.found = true;
  b.r0 = *std::min_element(rows.begin(), rows.end());
  b.r1 = *std::max_element(rows.begin(), rows.end());
  b.c0 = *std::min_element(cols.begin(), cols.end());
  b.c1 = *std::max_element(cols.begin(), cols.end());
  double sr = 0, sc = 0;
  for (int r : rows) sr += r;
  for (int c : cols) sc += c;
  b.cr = sr / static_cast<double>(rows.size());
  b.cc = sc / static_cast<double>(cols.size());
  return b;
}

inline double iou(const Box& a, const Box& b) {
  int inter = 0, uni = 0;
  for (int r = std::min(a.r0, b.r0); r <= std::max(a.r1, b.r1); ++r)
    for (int c = std::min(a.c0, b.c0); c <= std::max(a.c1, b.c1); ++c) {
      const bool ia = r >= a.r0 && r <= a.r1 && c >= a.c0 && c <= a.c1;
      const bool ib = r >= b.r0 && r <= b.r1 && c >= b.c0 && c <= b.c1;
      inter += (ia && ib) ? 1 : 0;
      uni += (ia || ib) ? 1 : 0;
    }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

// dir: 0 left_of, 1 right_of, 2 above, 3 below
inline double spatial(const Box& a, const Box& b, int dir, double tau) {
  double d = 0;
  if (dir == 0) d = -(a.cc - b.cc);
  if (dir == 1) d = a.cc - b.cc;
  if (dir == 2) d = -(a.cr - b.cr);
  if (dir == 3) d = a.cr - b.cr;
  if (d > tau) return 1.0;
  if (d < 0) return 0.0;
  return iou(a, b);
}

inline bool has_code(const Grid& g, int code) { return std::count(g.v.begin(), g.v.end(), code) > 0; }

inline bool has_shape(const Grid& g, int shape, int n_colors) {
  for (int x : g.v)
    if (x > 0 && (x - 1) / n_colors == shape) return true;
  return false;
}

inline double yes_ratio(double m, double eps) {
  const double y = (m + eps) / (1 + 2 * eps), n = (1 - m + eps) / (1 + 2 * eps);
  return y / (y + n);
}

struct Query {
  std::vector<Obj> objs;
  int relation_dir = -1;  // between objs[0] and objs[1]
  std::vector<int> counts;
};

inline double det(const Grid& g, const Query& q, double alpha, double tau) {
  const double k = static_cast<double>(q.objs.size());
  if (!q.counts.empty()) {
    double s = 0;
    for (std::size_t i = 0; i < q.objs.size(); ++i) s += components(g, q.objs[i].code) == q.counts[i] ? 1 : 0;
    return s / k;
  }
  double present = 0;
  for (const auto& o : q.objs) present += has_code(g, o.code) ? 1 : 0;
  present /= k;
  if (q.relation_dir < 0) return present;
  const Box a = box_of(g, q.objs[0].code), b = box_of(g, q.objs[1].code);
  const double rs = (a.found && b.found) ? spatial(a, b, q.relation_dir, tau) : 0.0;
  return alpha * rs + (1 - alpha) * present;
}

inline double vqa(const Grid& g, const Query& q, int n_colors, double eps) {
  double s = 0;
  for (const auto& o : q.objs) {
    const double m = has_code(g, o.code) ? 1.0 : has_shape(g, o.shape, n_colors) ? 0.5 : 0.0;
    s += yes_ratio(m, eps);
  }
  return s / static_cast<double>(q.objs.size());
}

inline double orm(const Grid& g, const Query& q, int n_colors, double tau, double eps) {
  int ok = 0, total = 0;
  for (const auto& o : q.objs) {
    ok += has_shape(g, o.shape, n_colors) ? 1 : 0;
    ok += has_code(g, o.code) ? 1 : 0;
    total += 2;
  }
  if (q.relation_dir >= 0) {
    const Box a = box_of(g, q.objs[0].code), b = box_of(g, q.objs[1].code);
    ok += (a.found && b.found && spatial(a, b, q.relation_dir, tau) == 1.0) ? 1 : 0;
    ++total;
  }
  for (std::size_t i = 0; i < q.counts.size(); ++i) {
    ok += components(g, q.objs[i].code) == q.counts[i] ? 1 : 0;
    ++total;
  }
  return yes_ratio(static_cast<double>(ok) / total, eps);
}

// Max 4-adjacent pairs for n cells, by search over near-square packings:
// filling rows of width w row-major gives the optimum for the best w.
inline int max_pairs(int n) {
  int best = 0;
  for (int w = 1; w <= n; ++w) {
    const int full = n / w, rem = n % w;
    int p = full * (w - 1) + (full - 1) * w;  // full rows
    if (full == 0) p = 0;
    if (rem > 0) p += (rem - 1) + (full > 0 ? rem : 0);
    best = std::max(best, p);
  }
  return best;
}

inline double hpm(const Grid& g, int budget) {
  int pairs = 0, denom = 0;
  std::vector<int> codes(g.v.begin(), g.v.end());
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
  int fg = 0;
  for (int code : codes) {
    if (code == 0) continue;
    const int n = static_cast<int>(std::count(g.v.begin(), g.v.end(), code));
    fg += n;
    denom += max_pairs(n);
    for (int r = 0; r < g.h; ++r)
      for (int c = 0; c < g.w; ++c) {
        if (g(r, c) != code) continue;
        if (c + 1 < g.w && g(r, c + 1) == code) ++pairs;
        if (r + 1 < g.h && g(r + 1, c) == code) ++pairs;
      }
  }
  const double contiguity = denom == 0 ? 1.0 : static_cast<double>(pairs) / denom;
  const int m = g.h * g.w;
  const double clutter = m > budget ? std::max(0, fg - budget) / static_cast<double>(m - budget) : 0.0;
  return 0.5 * contiguity + 0.5 * (1 - clutter);
}

}  // namespace bicot::oracle
