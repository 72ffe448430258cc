#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lada/image.hpp"
#include "lada/rng.hpp"

// Rectilinear "shape" patterns drawn under simple width/space design rules.
namespace lada::patterns {

struct IntRange {
  int lo = 0, hi = 0;
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct DesignRules {
  int min_width = 6;
  int min_space = 4;
  IntRange rect_count{2, 6};
  IntRange side_range{6, 20};
  int height = kCanvas;
  int width = kCanvas;

  friend bool operator==(const DesignRules&, const DesignRules&) = default;
};

/// Rules for held-out evaluation patterns: narrower, denser, larger spread.
inline DesignRules shifted_test_rules() {
  DesignRules r;
  r.min_width = 5;
  r.min_space = 3;
  r.rect_count = {3, 8};
  r.side_range = {5, 28};
  return r;
}

inline void validate(const DesignRules& r) {
  if (r.min_width < 1) throw ValidationError("rules: min_width must be >= 1");
  if (r.min_space < 0) throw ValidationError("rules: min_space must be >= 0");
  if (r.rect_count.lo < 1 || r.rect_count.hi < r.rect_count.lo) throw ValidationError("rules: rect_count range invalid");
  if (r.side_range.hi < r.side_range.lo) throw ValidationError("rules: side_range empty");
  if (r.side_range.lo < r.min_width) throw ValidationError("rules: side_range.lo must be >= min_width");
  if (r.height < 1 || r.width < 1) throw ValidationError("rules: canvas must be positive");
  if (r.side_range.lo > std::min(r.height, r.width)) throw ValidationError("rules: no rectangle fits the canvas");
}

/// Half-open [y0, y1) × [x0, x1).
struct Rect {
  int y0, x0, y1, x1;
};

namespace detail {

inline bool interiors_overlap(const Rect& a, const Rect& b) {
  return a.y0 < b.y1 && b.y0 < a.y1 && a.x0 < b.x1 && b.x0 < a.x1;
}

/// Chebyshev gap between disjoint rectangles.
inline int chebyshev_gap(const Rect& a, const Rect& b) {
  const int gy = std::max({0, b.y0 - a.y1, a.y0 - b.y1});
  const int gx = std::max({0, b.x0 - a.x1, a.x0 - b.x1});
  return std::max(gy, gx);
}

}  // namespace detail

inline constexpr int kMaxRejections = 1000;

/// Places uniform(rect_count) rectangles with sides uniform(side_range); each
/// new rectangle must overlap or keep a Chebyshev gap ≥ min_space to every
/// earlier one. Deterministic in (rules, seed).
inline MaskImage generate_pattern(const DesignRules& rules, std::uint64_t seed) {
  validate(rules);
  Rng rng(seed);
  const int n = rng.uniform_int(rules.rect_count.lo, rules.rect_count.hi);
  const int hi_h = std::min(rules.side_range.hi, rules.height);
  const int hi_w = std::min(rules.side_range.hi, rules.width);
  std::vector<Rect> placed;
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
      const int h = rng.uniform_int(rules.side_range.lo, hi_h);
      const int w = rng.uniform_int(rules.side_range.lo, hi_w);
      const int y = rng.uniform_int(0, rules.height - h);
      const int x = rng.uniform_int(0, rules.width - w);
      const Rect r{y, x, y + h, x + w};
      const bool ok = std::all_of(placed.begin(), placed.end(), [&](const Rect& o) {
        return detail::interiors_overlap(r, o) || detail::chebyshev_gap(r, o) >= rules.min_space;
      });
      if (ok) {
        placed.push_back(r);
        break;
      }
    }
  }
  MaskImage m(rules.height, rules.width);
  for (const auto& r : placed) {
    for (int y = r.y0; y < r.y1; ++y) {
      for (int x = r.x0; x < r.x1; ++x) m.set(y, x, true);
    }
  }
  return m;
}

struct Violation {
  enum class Kind { width, spacing };
  Kind kind;
  int measured;     // narrowest offending run
  int y, x;         // first offending run start
  int component_a;  // 4-connected component label(s)
  int component_b;  // -1 for width violations

  friend bool operator==(const Violation&, const Violation&) = default;
};

/// 4-connected labels, −1 for background.
inline std::vector<int> label_components(const MaskImage& m, int* count = nullptr) {
  const int h = m.height(), w = m.width();
  std::vector<int> label(m.size(), -1);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!m(y, x) || label[static_cast<std::size_t>(y) * w + x] >= 0) continue;
      stack.push_back({y, x});
      label[static_cast<std::size_t>(y) * w + x] = next;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        const int ny[4] = {cy - 1, cy + 1, cy, cy};
        const int nx[4] = {cx, cx, cx - 1, cx + 1};
        for (int k = 0; k < 4; ++k) {
          if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w || !m(ny[k], nx[k])) continue;
          int& l = label[static_cast<std::size_t>(ny[k]) * w + nx[k]];
          if (l < 0) {
            l = next;
            stack.push_back({ny[k], nx[k]});
          }
        }
      }
      ++next;
    }
  }
  if (count) *count = next;
  return label;
}

/// Width runs narrower than min_width (one violation per component) and
/// background gaps shorter than min_space between distinct components (one
/// per component pair). Runs are scanned per row and per column.
inline std::vector<Violation> verify_rules(const MaskImage& m, const DesignRules& rules) {
  const int h = m.height(), w = m.width();
  const auto label = label_components(m);
  auto at = [&](int y, int x) { return label[static_cast<std::size_t>(y) * w + x]; };
  std::map<int, Violation> width_v;
  std::map<std::pair<int, int>, Violation> space_v;

  auto note_width = [&](int comp, int len, int y, int x) {
    auto [it, inserted] = width_v.try_emplace(comp, Violation{Violation::Kind::width, len, y, x, comp, -1});
    if (!inserted) it->second.measured = std::min(it->second.measured, len);
  };
  auto note_space = [&](int a, int b, int len, int y, int x) {
    const auto key = std::minmax(a, b);
    auto [it, inserted] = space_v.try_emplace(key, Violation{Violation::Kind::spacing, len, y, x, key.first, key.second});
    if (!inserted) it->second.measured = std::min(it->second.measured, len);
  };

  // Scan a line of n pixels addressed by (fy(i), fx(i)).
  auto scan = [&](int n, auto fy, auto fx) {
    int i = 0;
    int prev_comp = -1;  // component of the last foreground pixel before a gap
    while (i < n) {
      const int y = fy(i), x = fx(i);
      if (m(y, x)) {
        int j = i;
        while (j < n && m(fy(j), fx(j))) ++j;
        if (j - i < rules.min_width) note_width(at(y, x), j - i, y, x);
        prev_comp = at(fy(j - 1), fx(j - 1));
        i = j;
      } else {
        int j = i;
        while (j < n && !m(fy(j), fx(j))) ++j;
        if (prev_comp >= 0 && j < n) {
          const int next_comp = at(fy(j), fx(j));
          if (next_comp != prev_comp && j - i < rules.min_space) note_space(prev_comp, next_comp, j - i, y, x);
        }
        i = j;
      }
    }
  };
  for (int y = 0; y < h; ++y) scan(w, [y](int) { return y; }, [](int i) { return i; });
  for (int x = 0; x < w; ++x) scan(h, [](int i) { return i; }, [x](int) { return x; });

  std::vector<Violation> out;
  for (auto& [k, v] : width_v) out.push_back(v);
  for (auto& [k, v] : space_v) out.push_back(v);
  return out;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const DesignRules& r) {
  return nlohmann::json{{"min_width", r.min_width},
                        {"min_space", r.min_space},
                        {"rect_count", {r.rect_count.lo, r.rect_count.hi}},
                        {"side_range", {r.side_range.lo, r.side_range.hi}},
                        {"canvas", {r.height, r.width}}};
}

inline DesignRules rules_from_json(const nlohmann::json& j, DesignRules r = {}) {
  if (!j.is_object()) throw ValidationError("rules JSON must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "min_width") {
        r.min_width = v.get<int>();
      } else if (key == "min_space") {
        r.min_space = v.get<int>();
      } else if (key == "rect_count") {
        r.rect_count = {v.at(0).get<int>(), v.at(1).get<int>()};
      } else if (key == "side_range") {
        r.side_range = {v.at(0).get<int>(), v.at(1).get<int>()};
      } else if (key == "canvas") {
        r.height = v.at(0).get<int>();
        r.width = v.at(1).get<int>();
      } else {
        throw ValidationError("rules JSON: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("rules JSON: ") + e.what());
  }
  validate(r);
  return r;
}

}  // namespace lada::patterns
