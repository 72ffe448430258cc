// lada: command-line front end. Every subcommand takes its randomness from
// --seed (or seeds.global in --config) and writes only under --out.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>

#include <CLI11.hpp>

#include "lada/active_loop.hpp"
#include "lada/config.hpp"
#include "lada/gradient_suite.hpp"
#include "lada/metrics.hpp"

using namespace lada;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
  std::string run;  // existing run directory (sample, eval, attack-demo)
};

std::string timestamp() {
  const auto now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// Config precedence: --config, else the run directory's config.json, else defaults; --seed wins over both.
config::RunConfig load_config(const Common& c) {
  config::RunConfig cfg;
  if (!c.config_path.empty()) {
    cfg = config::parse_config(c.config_path);
  } else if (!c.run.empty()) {
    cfg = config::parse_config((fs::path(c.run) / "config.json").string());
  }
  if (c.seed) cfg.seeds.global = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c, const config::RunConfig& cfg) {
  if (!c.out.empty()) return c.out;
  if (!c.config_path.empty() && !cfg.paths.out.empty()) return cfg.paths.out;
  return fs::path("runs") / (timestamp() + "-" + std::to_string(cfg.seeds.global));
}

fs::path require_run(const Common& c) {
  if (c.run.empty()) throw ValidationError("--run is required");
  if (!fs::exists(fs::path(c.run) / "config.json")) throw ValidationError("--run: no config.json in " + c.run);
  return c.run;
}

// Latest surrogate checkpoint of a run: F_final if present, else F_0.
fs::path latest_surrogate(const fs::path& run) {
  const auto final_ckpt = run / "checkpoints" / "F_final.ckpt";
  return fs::exists(final_ckpt) ? final_ckpt : loop::checkpoint_path(run, "F", 0);
}

doinn::Model load_surrogate(const fs::path& path) {
  doinn::Model m{{}, load_checkpoint(path.string())};
  doinn::check_params(m.arch, m.params);
  return m;
}

void print_history(const loop::RunHistory& h) {
  std::printf("%4s %8s %9s %9s %10s\n", "t", "|D|", "train%", "test%", "wall_s");
  for (const auto& e : h) {
    std::printf("%4d %8zu %9.4f %9.4f %10.1f\n", e.iteration, e.dataset_size, e.train_fiou_pct, e.test_fiou_pct, e.wall_seconds);
  }
}

int gen_data(const Common& c) {
  auto cfg = load_config(c);
  const auto dir = out_dir(c, cfg);
  cfg.paths.out = dir.string();
  fs::create_directories(dir);
  config::write_config((dir / "config.json").string(), cfg);
  const auto ks = litho::build_kernels(cfg.oracle);
  const auto store = loop::build_initial_dataset(cfg.loop.n_initial, cfg.rules, ks, config::stream_seed(cfg, "data"), dir);
  std::printf("%zu pairs written to %s\n", store.size(), dir.c_str());
  return 0;
}

int pretrain(const Common& c) {
  const auto cfg = load_config(c);
  const auto dir = out_dir(c, cfg);
  print_history(loop::run_pretrain(cfg, dir));
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

struct LoopFlags {
  std::string strategy, resume_from;
  std::optional<int> T, B;
};

int run_loop(const Common& c, const LoopFlags& f) {
  auto cfg = load_config(c);
  if (!f.strategy.empty()) cfg.loop.strategy = sampler::to_string(sampler::parse_strategy(f.strategy));
  if (f.T) cfg.loop.T = *f.T;
  if (f.B) cfg.loop.B = *f.B;
  if (!f.resume_from.empty()) cfg.paths.resume_from = f.resume_from;
  cfg = config::from_json(config::to_json(cfg));  // re-validate overrides
  const auto dir = out_dir(c, cfg);
  print_history(loop::run_loop(cfg, dir));
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

struct SampleFlags {
  std::string strategy = "style_pred";
  int count = 16;
};

int sample(const Common& c, const SampleFlags& f) {
  const auto run = require_run(c);
  const auto cfg = load_config(c);
  const auto strategy = sampler::parse_strategy(f.strategy);
  if (f.count < 1) throw ValidationError("--count must be >= 1");
  const auto model = load_surrogate(latest_surrogate(run));
  style::Generator g{{}, load_checkpoint(loop::checkpoint_path(run, "G", 0).string())};
  style::check_params(g);
  const auto dir = out_dir(c, cfg);
  fs::create_directories(dir);
  const auto props = sampler::propose_batch(strategy, model, g, f.count, config::stream_seed(cfg, "sampler"),
                                            {cfg.sampler, cfg.rules});
  for (std::size_t k = 0; k < props.size(); ++k) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%04zu", k);
    sampler::write_proposal(dir, stem, props[k]);
  }
  std::printf("%zu %s proposals written to %s\n", props.size(), f.strategy.c_str(), dir.c_str());
  return 0;
}

// Table rows for every surrogate checkpoint of a run, measured on its test set.
int eval(const Common& c) {
  const auto run = require_run(c);
  const auto cfg = load_config(c);
  loop::State s;
  s.cfg = cfg;
  s.ks = litho::build_kernels(cfg.oracle);
  loop::make_test_set(s);
  const auto store = loop::DatasetStore::open(run);
  std::vector<MaskImage> initial_masks;
  std::vector<ResistImage> initial_resists;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.records()[i].iteration != 0) continue;
    initial_masks.push_back(store.masks()[i]);
    initial_resists.push_back(store.resists()[i]);
  }
  const auto f0 = load_surrogate(loop::checkpoint_path(run, "F", 0));
  const double train_err = metrics::evaluate(f0, initial_masks, initial_resists).error_pct;
  std::vector<metrics::MetricsRow> rows;
  rows.push_back(metrics::make_row(metrics::kBaselineName, 100.0 - train_err, train_err));
  rows.push_back(metrics::make_row("pretrain (test)", metrics::evaluate(f0, s.test_masks, s.test_resists).fiou_pct, train_err));
  for (int t = 1;; ++t) {
    const auto path = loop::checkpoint_path(run, "F", t);
    if (!fs::exists(path)) break;
    const auto ev = metrics::evaluate(load_surrogate(path), s.test_masks, s.test_resists);
    rows.push_back(metrics::make_row(cfg.loop.strategy + " t=" + std::to_string(t), ev.fiou_pct, train_err));
  }
  const auto dir = c.out.empty() ? run : fs::path(c.out);
  fs::create_directories(dir);
  metrics::write_report(rows, train_err, (dir / "report").string());
  std::fputs(metrics::format_table(rows).c_str(), stdout);
  return 0;
}

struct AttackFlags {
  int count = 20;
  double step = 0.05;
  int iters = 10;
};

int attack(const Common& c, const AttackFlags& f) {
  const auto run = require_run(c);
  const auto cfg = load_config(c);
  if (f.count < 1) throw ValidationError("--count must be >= 1");
  const auto model = load_surrogate(latest_surrogate(run));
  const auto ks = litho::build_kernels(cfg.oracle);
  const auto seed = config::stream_seed(cfg, "attack");
  std::vector<metrics::AttackResult> results(static_cast<std::size_t>(f.count));
  parallel_for(results.size(), [&](std::size_t i) {
    const auto mask = patterns::generate_pattern(cfg.rules, derive_seed(seed, "pattern", i));
    results[i] = metrics::attack_demo(model, mask, f.step, f.iters, litho::simulate(mask, ks));
  });
  int restored = 0, degraded = 0;
  auto arr = nlohmann::json::array();
  for (const auto& r : results) {
    restored += r.legalized_equals_original;
    degraded += r.adv_fiou < r.clean_fiou;
    arr.push_back({{"clean_fiou", r.clean_fiou}, {"adv_fiou", r.adv_fiou}, {"linf", r.linf},
                   {"legalized_equals_original", r.legalized_equals_original}});
  }
  const auto dir = c.out.empty() ? run : fs::path(c.out);
  fs::create_directories(dir);
  std::ofstream((dir / "attack.json").string()) << nlohmann::json{{"step", f.step}, {"iters", f.iters}, {"masks", arr}}.dump(2) << "\n";
  std::printf("legalization restored %d/%d masks; attack lowered fIoU on %d/%d\n", restored, f.count, degraded, f.count);
  return restored == f.count ? 0 : 2;
}

int gradcheck(const Common& c) {
  GradSuiteOptions opt;
  if (c.seed) opt.seed = *c.seed;
  const auto res = run_gradient_suite(opt);
  for (const auto& e : res.entries) {
    std::printf("%-28s max_rel_err %.3e over %d points  %s\n", e.name.c_str(), e.max_error, e.points, e.passed ? "ok" : "FAIL");
  }
  std::printf("%zu checks in %.1f s\n", res.entries.size(), res.seconds);
  return res.all_passed() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  enable_flush_to_zero();
  CLI::App app{"Litho surrogate active learning with adversarial latent sampling"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_run) {
    sub->add_option("--config", common.config_path, "JSON run configuration");
    sub->add_option("--seed", common.seed, "global seed (overrides seeds.global)");
    sub->add_option("--threads", common.threads, "worker cap (default: LADA_THREADS, else all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", common.out, "output directory (default runs/<timestamp>-<seed>)");
    if (needs_run) sub->add_option("--run", common.run, "run directory holding config.json and checkpoints")->required();
  };

  auto* gen = app.add_subcommand("gen-data", "label the initial shape dataset");
  add_common(gen, false);
  auto* pre = app.add_subcommand("pretrain", "train F0 and G0 on a fresh dataset");
  add_common(pre, false);

  LoopFlags loop_flags;
  auto* lp = app.add_subcommand("loop", "pretrain (or resume) and run the active learning loop");
  add_common(lp, false);
  lp->add_option("--strategy", loop_flags.strategy, "shape | random | style_dice | noise_CE | style_pred | noise_pred");
  lp->add_option("--T", loop_flags.T, "iterations");
  lp->add_option("--B", loop_flags.B, "proposals per iteration");
  lp->add_option("--resume-from", loop_flags.resume_from, "run directory with iteration-0 checkpoints");

  SampleFlags sample_flags;
  auto* smp = app.add_subcommand("sample", "propose masks from a trained run");
  add_common(smp, true);
  smp->add_option("--strategy", sample_flags.strategy, "sampling strategy")->capture_default_str();
  smp->add_option("--count", sample_flags.count, "number of proposals")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "score every surrogate checkpoint of a run");
  add_common(ev, true);

  AttackFlags attack_flags;
  auto* atk = app.add_subcommand("attack-demo", "pixel attack on the surrogate, undone by legalization");
  add_common(atk, true);
  atk->add_option("--count", attack_flags.count, "masks to attack")->capture_default_str();
  atk->add_option("--step", attack_flags.step, "sign-gradient step")->capture_default_str();
  atk->add_option("--iters", attack_flags.iters, "attack iterations")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable primitive");
  add_common(gc, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  if (common.threads > 0) set_max_threads(common.threads);
  try {
    if (*gen) return gen_data(common);
    if (*pre) return pretrain(common);
    if (*lp) return run_loop(common, loop_flags);
    if (*smp) return sample(common, sample_flags);
    if (*ev) return eval(common);
    if (*atk) return attack(common, attack_flags);
    if (*gc) return gradcheck(common);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
