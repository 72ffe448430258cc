#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lada/config.hpp"
#include "lada/doinn.hpp"
#include "lada/image.hpp"
#include "lada/litho.hpp"
#include "lada/metrics.hpp"
#include "lada/parallel.hpp"
#include "lada/params.hpp"
#include "lada/patterns.hpp"
#include "lada/sampler.hpp"
#include "lada/stylegan.hpp"

// The iterative protocol: pretrain F and G on shape data, then repeatedly
// propose B masks, label them with the oracle, append, and finetune F on the
// whole store. G stays frozen after pretraining.
namespace lada::loop {

namespace fs = std::filesystem;

inline constexpr const char* kManifestHeader = "id,mask,resist,strategy,iteration,seed";

struct Record {
  std::string id, mask, resist, strategy;  // paths relative to the store root
  int iteration = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const Record&, const Record&) = default;
};

/// A labeled pair waiting to be appended.
struct Entry {
  MaskImage mask;
  ResistImage resist;
  std::string strategy;
  int iteration = 0;
  std::uint64_t seed = 0;
};

/// Append-only store of labeled pairs under a root directory: masks/,
/// resists/ and manifest.csv. Images are written before their manifest rows,
/// so an interrupted append never leaves a row without its files.
class DatasetStore {
 public:
  static DatasetStore create(const fs::path& root) {
    if (fs::exists(root / "manifest.csv")) throw ValidationError("dataset store already exists at " + root.string());
    fs::create_directories(root / "masks");
    fs::create_directories(root / "resists");
    std::ofstream out(root / "manifest.csv");
    if (!out) throw std::runtime_error("cannot create " + (root / "manifest.csv").string());
    out << kManifestHeader << "\n";
    DatasetStore s;
    s.root_ = root;
    return s;
  }

  static DatasetStore open(const fs::path& root) {
    std::ifstream in(root / "manifest.csv");
    if (!in) throw ValidationError("no manifest at " + root.string());
    std::string line;
    if (!std::getline(in, line) || line != kManifestHeader) throw ValidationError("manifest header mismatch in " + root.string());
    DatasetStore s;
    s.root_ = root;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (f.size() != 6) throw ValidationError("malformed manifest row: " + line);
      Record r{f[0], f[1], f[2], f[3], std::stoi(f[4]), std::stoull(f[5])};
      if (!ids.insert(r.id).second) throw ValidationError("duplicate id in manifest: " + r.id);
      s.masks_.push_back(read_pgm<MaskTag>((root / r.mask).string()));
      s.resists_.push_back(read_pgm<ResistTag>((root / r.resist).string()));
      s.records_.push_back(std::move(r));
    }
    return s;
  }

  void append(const std::vector<Entry>& entries) {
    std::vector<Record> rows;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      char id[16];
      std::snprintf(id, sizeof id, "%06zu", records_.size() + k);
      Record r{id, std::string("masks/") + id + ".pgm", std::string("resists/") + id + ".pgm", entries[k].strategy,
               entries[k].iteration, entries[k].seed};
      write_pgm((root_ / r.mask).string(), entries[k].mask);
      write_pgm((root_ / r.resist).string(), entries[k].resist);
      rows.push_back(std::move(r));
    }
    std::ofstream out(root_ / "manifest.csv", std::ios::app);
    for (const auto& r : rows) {
      out << r.id << ',' << r.mask << ',' << r.resist << ',' << r.strategy << ',' << r.iteration << ',' << r.seed << '\n';
    }
    out.flush();
    if (!out) throw std::runtime_error("manifest append failed in " + root_.string());
    for (std::size_t k = 0; k < entries.size(); ++k) {
      masks_.push_back(entries[k].mask);
      resists_.push_back(entries[k].resist);
      records_.push_back(std::move(rows[k]));
    }
  }

  std::size_t size() const noexcept { return records_.size(); }
  const fs::path& root() const noexcept { return root_; }
  const std::vector<Record>& records() const noexcept { return records_; }
  const std::vector<MaskImage>& masks() const noexcept { return masks_; }
  const std::vector<ResistImage>& resists() const noexcept { return resists_; }

  std::vector<doinn::Sample> samples() const {
    std::vector<doinn::Sample> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(doinn::make_sample(masks_[i], resists_[i]));
    return out;
  }

 private:
  fs::path root_;
  std::vector<Record> records_;
  std::vector<MaskImage> masks_;
  std::vector<ResistImage> resists_;
};

/// Labels masks with the oracle in parallel.
inline std::vector<ResistImage> label_all(const std::vector<MaskImage>& masks, const litho::KernelSet& ks) {
  std::vector<ResistImage> out(masks.size());
  parallel_for(masks.size(), [&](std::size_t i) { out[i] = litho::simulate(masks[i], ks); });
  return out;
}

/// n shape patterns with their oracle labels, as iteration 0.
inline DatasetStore build_initial_dataset(int n, const patterns::DesignRules& rules, const litho::KernelSet& ks,
                                          std::uint64_t seed, const fs::path& root) {
  if (n < 1) throw ValidationError("build_initial_dataset: n must be >= 1");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
  std::vector<MaskImage> masks(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(seed, "pattern", i);
  parallel_for(seeds.size(), [&](std::size_t i) { masks[i] = patterns::generate_pattern(rules, seeds[i]); });
  const auto resists = label_all(masks, ks);
  auto store = DatasetStore::create(root);
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < masks.size(); ++i) entries.push_back({masks[i], resists[i], "shape", 0, seeds[i]});
  store.append(entries);
  return store;
}

/// Indices of audited rows whose stored label differs from a fresh
/// simulation of the stored mask.
inline std::vector<std::size_t> audit_labels(const DatasetStore& store, const litho::KernelSet& ks, int count,
                                             std::uint64_t seed) {
  std::vector<std::size_t> picks;
  Rng rng(seed);
  for (int k = 0; k < count && store.size() > 0; ++k) {
    picks.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(store.size()) - 1)));
  }
  std::vector<char> bad(picks.size(), 0);
  parallel_for(picks.size(), [&](std::size_t k) {
    bad[k] = litho::simulate(store.masks()[picks[k]], ks) != store.resists()[picks[k]];
  });
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    if (bad[k]) out.push_back(picks[k]);
  }
  return out;
}

// ---------------------------------------------------------------- history

struct HistoryEntry {
  int iteration = 0;
  double train_fiou_pct = 0, test_fiou_pct = 0;
  std::size_t dataset_size = 0;
  std::string g_hash;
  int proposals = 0, duplicates = 0;
  std::optional<double> criterion_init_mean, criterion_final_mean;
  double wall_seconds = 0;  // kept out of history.json so reruns compare byte-for-byte

  friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

using RunHistory = std::vector<HistoryEntry>;

inline nlohmann::json to_json(const HistoryEntry& h) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"iteration", h.iteration},
          {"train_fiou_pct", h.train_fiou_pct},
          {"test_fiou_pct", h.test_fiou_pct},
          {"dataset_size", h.dataset_size},
          {"g_hash", h.g_hash},
          {"proposals", h.proposals},
          {"duplicates", h.duplicates},
          {"criterion_init_mean", opt(h.criterion_init_mean)},
          {"criterion_final_mean", opt(h.criterion_final_mean)}};
}

inline nlohmann::json to_json(const RunHistory& h) {
  auto arr = nlohmann::json::array();
  for (const auto& e : h) arr.push_back(to_json(e));
  return arr;
}

inline RunHistory history_from_json(const nlohmann::json& j) {
  RunHistory h;
  try {
    for (const auto& e : j) {
      HistoryEntry x;
      x.iteration = e.at("iteration").get<int>();
      x.train_fiou_pct = e.at("train_fiou_pct").get<double>();
      x.test_fiou_pct = e.at("test_fiou_pct").get<double>();
      x.dataset_size = e.at("dataset_size").get<std::size_t>();
      x.g_hash = e.at("g_hash").get<std::string>();
      x.proposals = e.at("proposals").get<int>();
      x.duplicates = e.at("duplicates").get<int>();
      if (!e.at("criterion_init_mean").is_null()) x.criterion_init_mean = e.at("criterion_init_mean").get<double>();
      if (!e.at("criterion_final_mean").is_null()) x.criterion_final_mean = e.at("criterion_final_mean").get<double>();
      h.push_back(x);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("history JSON: ") + ex.what());
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------- state

struct State {
  config::RunConfig cfg;
  fs::path dir;
  litho::KernelSet ks;
  DatasetStore store;
  std::vector<MaskImage> test_masks;
  std::vector<ResistImage> test_resists;
  doinn::Model f;
  style::Generator g;
  style::Discriminator d;
  RunHistory history;
};

inline fs::path checkpoint_path(const fs::path& dir, const std::string& net, int iteration) {
  return dir / "checkpoints" / (net + "_" + std::to_string(iteration) + ".ckpt");
}

/// Held-out set drawn under the test rules.
inline void make_test_set(State& s) {
  const auto seed = config::stream_seed(s.cfg, "test");
  s.test_masks.resize(static_cast<std::size_t>(s.cfg.loop.n_test));
  parallel_for(s.test_masks.size(), [&](std::size_t i) {
    s.test_masks[i] = patterns::generate_pattern(s.cfg.rules_test, derive_seed(seed, "pattern", i));
  });
  s.test_resists = label_all(s.test_masks, s.ks);
}

/// Fresh run directory: config.json, the initial dataset and the test set.
inline State prepare(const config::RunConfig& cfg, const fs::path& dir) {
  State s;
  s.cfg = cfg;
  s.cfg.paths.out = dir.string();
  s.dir = dir;
  s.ks = litho::build_kernels(cfg.oracle);
  fs::create_directories(dir / "checkpoints");
  config::write_config((dir / "config.json").string(), s.cfg);
  s.store = build_initial_dataset(cfg.loop.n_initial, cfg.rules, s.ks, config::stream_seed(cfg, "data"), dir);
  make_test_set(s);
  return s;
}

inline void check_audit(const State& s, int iteration) {
  const auto bad = audit_labels(s.store, s.ks, s.cfg.loop.audit, derive_seed(config::stream_seed(s.cfg, "audit"), "it", static_cast<std::uint64_t>(iteration)));
  if (!bad.empty()) throw std::runtime_error("label audit failed for row " + s.store.records()[bad.front()].id);
}

inline HistoryEntry evaluate_state(const State& s, int iteration) {
  HistoryEntry h;
  h.iteration = iteration;
  h.train_fiou_pct = metrics::evaluate(s.f, s.store.masks(), s.store.resists()).fiou_pct;
  h.test_fiou_pct = metrics::evaluate(s.f, s.test_masks, s.test_resists).fiou_pct;
  h.dataset_size = s.store.size();
  h.g_hash = hex64(params_hash(s.g.params));
  return h;
}

/// Trains F0 from a fresh init and G0 against a fresh discriminator, saves
/// the iteration-0 checkpoints and records history index 0.
inline void pretrain(State& s) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& c = s.cfg;
  s.f = doinn::finetune(doinn::init_model({}, config::stream_seed(c, "surrogate_init")), s.store.samples(), c.surrogate,
                        config::stream_seed(c, "surrogate"))
            .model;
  auto gan = style::gan_train(style::init_generator({}, config::stream_seed(c, "generator_init")),
                              style::init_discriminator({}, config::stream_seed(c, "discriminator_init")), s.store.masks(),
                              c.gan, config::stream_seed(c, "gan"));
  s.g = std::move(gan.g);
  s.d = std::move(gan.d);
  save_checkpoint(checkpoint_path(s.dir, "F", 0).string(), s.f.params);
  save_checkpoint(checkpoint_path(s.dir, "G", 0).string(), s.g.params);
  save_checkpoint(checkpoint_path(s.dir, "D", 0).string(), s.d.params);
  {
    std::ofstream gh(s.dir / "gan_history.json");
    const auto& h = gan.history;
    gh << nlohmann::json{{"d_loss", h.d_loss}, {"g_loss", h.g_loss}, {"d_real_acc", h.d_real_acc}, {"d_fake_acc", h.d_fake_acc}}.dump()
       << "\n";
  }
  check_audit(s, 0);
  s.history.assign(1, evaluate_state(s, 0));
  s.history[0].wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Sections whose values shape the iteration-0 state; a resumed run must agree on them.
inline nlohmann::json pretrain_signature(const config::RunConfig& c) {
  auto j = config::to_json(c);
  return {{"oracle", j["oracle"]},
          {"rules", j["rules"]},
          {"gan", j["gan"]},
          {"surrogate", j["surrogate"]},
          {"n_initial", c.loop.n_initial},
          {"seeds", j["seeds"]}};
}

/// Loads F0, G0, D0 from another run's checkpoints instead of pretraining.
inline void resume(State& s, const fs::path& from) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto other = config::parse_config((from / "config.json").string());
  if (pretrain_signature(other) != pretrain_signature(s.cfg)) {
    throw ValidationError("resume: " + from.string() + " was pretrained under a different configuration");
  }
  s.f = doinn::Model{{}, load_checkpoint(checkpoint_path(from, "F", 0).string())};
  doinn::check_params(s.f.arch, s.f.params);
  s.g = style::Generator{{}, load_checkpoint(checkpoint_path(from, "G", 0).string())};
  style::check_params(s.g);
  s.d = style::Discriminator{{}, load_checkpoint(checkpoint_path(from, "D", 0).string())};
  style::check_params(s.d);
  save_checkpoint(checkpoint_path(s.dir, "F", 0).string(), s.f.params);
  save_checkpoint(checkpoint_path(s.dir, "G", 0).string(), s.g.params);
  save_checkpoint(checkpoint_path(s.dir, "D", 0).string(), s.d.params);
  check_audit(s, 0);
  s.history.assign(1, evaluate_state(s, 0));
  s.history[0].wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// propose → label → append → finetune F_{t−1} on the full store → evaluate.
inline void run_iteration(State& s, int t) {
  if (t < 1 || t > s.cfg.loop.T) throw ValidationError("run_iteration: t out of range");
  const auto t0 = std::chrono::steady_clock::now();
  const auto strategy = sampler::parse_strategy(s.cfg.loop.strategy);
  sampler::ProposeOptions opt{s.cfg.sampler, s.cfg.rules};
  const auto props = sampler::propose_batch(strategy, s.f, s.g, s.cfg.loop.B,
                                            derive_seed(config::stream_seed(s.cfg, "sampler"), "iteration", static_cast<std::uint64_t>(t)),
                                            opt);
  std::vector<MaskImage> masks;
  for (const auto& p : props) masks.push_back(p.mask);
  const auto resists = label_all(masks, s.ks);
  std::vector<Entry> entries;
  for (std::size_t k = 0; k < props.size(); ++k) {
    entries.push_back({props[k].mask, resists[k], sampler::to_string(strategy), t, props[k].seed});
  }
  const std::size_t first = s.store.size();
  s.store.append(entries);
  for (std::size_t k = 0; k < props.size(); ++k) {
    const auto& rec = s.store.records()[first + k];
    std::ofstream js(s.dir / "masks" / (rec.id + ".json"));
    js << sampler::to_json(props[k]).dump(2) << "\n";
  }
  check_audit(s, t);

  s.f = doinn::finetune(s.f, s.store.samples(), s.cfg.loop.finetune,
                        derive_seed(config::stream_seed(s.cfg, "surrogate"), "iteration", static_cast<std::uint64_t>(t)))
            .model;
  save_checkpoint(checkpoint_path(s.dir, "F", t).string(), s.f.params);

  auto h = evaluate_state(s, t);
  h.proposals = static_cast<int>(props.size());
  double ci = 0, cf = 0;
  int with_criterion = 0;
  for (const auto& p : props) {
    h.duplicates += p.duplicate;
    if (p.criterion_init) {
      ci += *p.criterion_init;
      cf += *p.criterion_final;
      ++with_criterion;
    }
  }
  if (with_criterion > 0) {
    h.criterion_init_mean = ci / with_criterion;
    h.criterion_final_mean = cf / with_criterion;
  }
  h.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  s.history.push_back(h);
}

inline void write_history(const State& s) {
  {
    std::ofstream out(s.dir / "history.json");
    out << to_json(s.history).dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write history.json");
  }
  auto timings = nlohmann::json::array();
  for (const auto& h : s.history) timings.push_back({{"iteration", h.iteration}, {"wall_seconds", h.wall_seconds}});
  std::ofstream out(s.dir / "timings.json");
  out << timings.dump(2) << "\n";
}

/// Pretrains (or resumes from paths.resume_from), runs T iterations, and
/// writes history.json, timings.json and the final checkpoints into `dir`.
inline RunHistory run_loop(const config::RunConfig& cfg, const fs::path& dir) {
  enable_flush_to_zero();
  auto s = prepare(cfg, dir);
  if (cfg.paths.resume_from.empty()) {
    pretrain(s);
  } else {
    resume(s, cfg.paths.resume_from);
  }
  write_history(s);
  for (int t = 1; t <= cfg.loop.T; ++t) {
    run_iteration(s, t);
    write_history(s);
  }
  save_checkpoint((dir / "checkpoints" / "F_final.ckpt").string(), s.f.params);
  return s.history;
}

/// Pretraining only: the iteration-0 state a later loop can resume from.
inline RunHistory run_pretrain(const config::RunConfig& cfg, const fs::path& dir) {
  enable_flush_to_zero();
  auto s = prepare(cfg, dir);
  pretrain(s);
  write_history(s);
  return s.history;
}

}  // namespace lada::loop
