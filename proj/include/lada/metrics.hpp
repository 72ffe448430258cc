#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lada/doinn.hpp"
#include "lada/image.hpp"
#include "lada/litho.hpp"
#include "lada/parallel.hpp"

namespace lada::metrics {

/// Foreground Jaccard index; two empty foregrounds agree perfectly (1).
inline double fiou(const ResistImage& pred, const ResistImage& gold) {
  if (pred.height() != gold.height() || pred.width() != gold.width()) throw ValidationError("fiou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] & gold[i];
    uni += pred[i] | gold[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double gap(double item_error_pct, double pretrain_train_error_pct) { return item_error_pct - pretrain_train_error_pct; }

struct MetricsRow {
  std::string name;
  double fiou_pct = 0, error_pct = 0, gap_pct = 0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline constexpr double kRowTolerance = 1e-9;
inline const std::string kBaselineName = "pretrain (train)";

inline MetricsRow make_row(std::string name, double fiou_pct, double pretrain_train_error_pct) {
  const double err = 100.0 - fiou_pct;
  return {std::move(name), fiou_pct, err, gap(err, pretrain_train_error_pct)};
}

/// Throws naming the row when error ≠ 100 − fIoU or gap ≠ error − baseline.
inline void check_row(const MetricsRow& r, double pretrain_train_error_pct) {
  if (std::abs(r.error_pct - (100.0 - r.fiou_pct)) > kRowTolerance) {
    throw ValidationError("metrics row '" + r.name + "': error% is not 100 - fIoU%");
  }
  if (std::abs(r.gap_pct - (r.error_pct - pretrain_train_error_pct)) > kRowTolerance) {
    throw ValidationError("metrics row '" + r.name + "': gap% is not error% - pretrain train error%");
  }
}

struct Evaluation {
  double fiou_pct = 0, error_pct = 0;
  std::vector<double> per_sample;  // fIoU in [0, 1]
};

/// Mean fIoU (×100) of predict_resist against the stored labels.
inline Evaluation evaluate(const doinn::Model& model, const std::vector<MaskImage>& masks,
                           const std::vector<ResistImage>& labels) {
  if (masks.empty()) throw ValidationError("evaluate: empty dataset");
  if (masks.size() != labels.size()) throw ValidationError("evaluate: masks and labels differ in count");
  Evaluation ev;
  ev.per_sample.resize(masks.size());
  parallel_for(masks.size(), [&](std::size_t i) { ev.per_sample[i] = fiou(doinn::predict(model, masks[i]), labels[i]); });
  double total = 0;
  for (double v : ev.per_sample) total += v;
  ev.fiou_pct = 100.0 * total / static_cast<double>(masks.size());
  ev.error_pct = 100.0 - ev.fiou_pct;
  return ev;
}

/// Kendall rank correlation (τ-a; tied pairs count as neither concordant nor discordant).
inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ValidationError("kendall_tau: need two equal-length series of length >= 2");
  long score = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const int sa = (a[i] > a[j]) - (a[i] < a[j]);
      const int sb = (b[i] > b[j]) - (b[i] < b[j]);
      score += sa * sb;
    }
  }
  const double pairs = static_cast<double>(a.size()) * static_cast<double>(a.size() - 1) / 2.0;
  return static_cast<double>(score) / pairs;
}

// ---------------------------------------------------------------- reports

inline nlohmann::json to_json(const std::vector<MetricsRow>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"name", r.name}, {"fiou_pct", r.fiou_pct}, {"error_pct", r.error_pct}, {"gap_pct", r.gap_pct}});
  }
  return arr;
}

inline std::vector<MetricsRow> rows_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ValidationError("metrics JSON must be an array");
  std::vector<MetricsRow> rows;
  try {
    for (const auto& r : j) {
      rows.push_back({r.at("name").get<std::string>(), r.at("fiou_pct").get<double>(), r.at("error_pct").get<double>(),
                      r.at("gap_pct").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("metrics JSON: ") + e.what());
  }
  return rows;
}

/// Aligned plain-text table: Item | fIoU% | error% | Gap%.
inline std::string format_table(const std::vector<MetricsRow>& rows) {
  std::size_t name_w = 4;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  auto line = [&](const std::string& a, const std::string& b, const std::string& c, const std::string& d) {
    std::string s = a + std::string(name_w - a.size(), ' ');
    for (const auto* col : {&b, &c, &d}) s += " | " + std::string(col->size() < 9 ? 9 - col->size() : 0, ' ') + *col;
    return s + "\n";
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  std::string out = line("Item", "fIoU%", "error%", "Gap%");
  out += std::string(name_w, '-') + std::string(3 * 12, '-') + "\n";
  for (const auto& r : rows) {
    out += line(r.name, num(r.fiou_pct), num(r.error_pct), r.name == kBaselineName ? "-" : num(r.gap_pct));
  }
  return out;
}

/// Writes <stem>.json and <stem>.txt after checking every row.
inline void write_report(const std::vector<MetricsRow>& rows, double pretrain_train_error_pct, const std::string& stem) {
  for (const auto& r : rows) check_row(r, pretrain_train_error_pct);
  {
    std::ofstream js(stem + ".json");
    if (!js) throw std::runtime_error("cannot write " + stem + ".json");
    js << to_json(rows).dump(2) << "\n";
  }
  std::ofstream txt(stem + ".txt");
  if (!txt) throw std::runtime_error("cannot write " + stem + ".txt");
  txt << format_table(rows);
}

// ---------------------------------------------------------------- pixel attack vs legalization

struct AttackResult {
  Tensor adv_raw;        // 1×H×W, in [−1, 1]
  ResistImage clean_pred, adv_pred;
  MaskImage legalized;
  bool legalized_equals_original = false;
  double clean_fiou = 1.0;  // vs reference (gold if given, else the clean prediction)
  double adv_fiou = 1.0;
  double linf = 0;          // max |adv − clean| over pixels
};

/// Sign-gradient ascent on seg_loss w.r.t. the encoded mask, labeled by the
/// model's own clean prediction, clamped to [−1, 1]. Total perturbation
/// step·iters < 1 cannot flip the sign of any ±1 pixel, so legalization must
/// return the original mask.
inline AttackResult attack_demo(const doinn::Model& model, const MaskImage& mask, double step, int iters,
                                const std::optional<ResistImage>& gold = std::nullopt) {
  if (iters < 0 || step < 0 || !(step * iters < 1.0) || (iters > 0 && !(step > 0))) {
    throw ValidationError("attack_demo: need 0 < step·iters < 1 (or iters = 0)");
  }
  const Tensor clean = encode_mask(mask);
  AttackResult res;
  res.clean_pred = doinn::predict_resist(doinn::infer(model, clean).logits);
  const Tensor label = resist_target(res.clean_pred);
  Tensor adv = clean;
  for (int it = 0; it < iters; ++it) {
    Tape<float> tape;
    Bound<float> p(tape, model.params, false);
    auto x = tape.leaf(adv);
    auto out = doinn::forward(p, model.arch, x);
    tape.backward(doinn::seg_loss(out.logits, label));
    const Tensor g = tape.grad(x);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const float s = static_cast<float>((g[i] > 0) - (g[i] < 0));
      adv[i] = std::clamp(adv[i] + static_cast<float>(step) * s, -1.0f, 1.0f);
    }
  }
  res.adv_pred = doinn::predict_resist(doinn::infer(model, adv).logits);
  res.legalized = litho::legalize(adv);
  res.legalized_equals_original = res.legalized == mask;
  for (std::size_t i = 0; i < adv.size(); ++i) res.linf = std::max(res.linf, static_cast<double>(std::abs(adv[i] - clean[i])));
  const ResistImage& ref = gold ? *gold : res.clean_pred;
  res.clean_fiou = fiou(res.clean_pred, ref);
  res.adv_fiou = fiou(res.adv_pred, ref);
  res.adv_raw = std::move(adv);
  return res;
}

}  // namespace lada::metrics
