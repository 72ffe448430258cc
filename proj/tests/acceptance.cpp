// End-to-end acceptance run: one PASS/FAIL line per criterion, plus
// supplementary lines for the GAN's empirical health checks.
//
//   acceptance [--only 1,3,6] [--seeds 5] [--work DIR]

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "lada/active_loop.hpp"
#include "lada/config.hpp"
#include "lada/gradient_suite.hpp"
#include "lada/metrics.hpp"

using namespace lada;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

MaskImage random_mask(Rng& rng, double density) {
  MaskImage m(kCanvas, kCanvas);
  for (int y = 0; y < kCanvas; ++y) {
    for (int x = 0; x < kCanvas; ++x) m.set(y, x, rng.uniform() < density);
  }
  return m;
}

// Surrogate trained briefly on shape masks; shared by criteria 3 and 5.
const doinn::Model& small_surrogate() {
  static const doinn::Model model = [] {
    const auto ks = litho::build_kernels({});
    std::vector<doinn::Sample> train;
    for (int i = 0; i < 128; ++i) {
      auto m = patterns::generate_pattern({}, derive_seed(31, "train", static_cast<std::uint64_t>(i)));
      train.push_back(doinn::make_sample(m, litho::simulate(m, ks)));
    }
    return doinn::finetune(doinn::init_model({}, 31), train, {.epochs = 4, .lr = 2e-3}, 31).model;
  }();
  return model;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto res = run_gradient_suite();
  int micro = 0;
  double worst = 0;
  bool points_ok = true;
  for (const auto& e : res.entries) {
    micro += e.name.rfind("micro-net", 0) == 0;
    worst = std::max(worst, e.max_error);
    points_ok = points_ok && e.points == 25;
    if (!e.passed) std::printf("    %s: max rel err %.3e\n", e.name.c_str(), e.max_error);
  }
  const bool pass = res.all_passed() && micro >= 3 && points_ok && res.seconds < 60;
  return {pass, fmt("%zu checks (%d composite), 25 points each, worst rel err %.2e, %.1f s", res.entries.size(), micro, worst,
                    res.seconds)};
}

// ---------------------------------------------------------------- 2

Outcome oracle_physics() {
  const auto ks = litho::build_kernels({});
  int shift_ok = 0, bounded_ok = 0, mono_ok = 0;
  Rng rng(2024);
  for (int i = 0; i < 50; ++i) {
    const auto m = random_mask(rng, rng.uniform(0.05, 0.6));
    const int dy = rng.uniform_int(-63, 63), dx = rng.uniform_int(-63, 63);
    shift_ok += litho::simulate(shifted(m, dy, dx), ks) == shifted(litho::simulate(m, ks), dy, dx);
    const auto a = litho::simulate_aerial(m, ks);
    bounded_ok += std::all_of(a.values.begin(), a.values.end(), [](double v) { return v >= 0 && v <= 1; });
  }
  Rng nest(77);
  for (int i = 0; i < 100; ++i) {
    const auto big = random_mask(nest, nest.uniform(0.1, 0.7));
    MaskImage small = big;
    const double keep = nest.uniform();
    for (int y = 0; y < kCanvas; ++y) {
      for (int x = 0; x < kCanvas; ++x) {
        if (big(y, x) && nest.uniform() > keep) small.set(y, x, false);
      }
    }
    const auto as = litho::simulate_aerial(small, ks), ab = litho::simulate_aerial(big, ks);
    bool ok = true;
    for (std::size_t p = 0; p < ab.values.size(); ++p) ok = ok && as.values[p] <= ab.values[p];
    const auto rs = litho::apply_resist(as, ks), rb = litho::apply_resist(ab, ks);
    for (std::size_t p = 0; p < rb.size(); ++p) ok = ok && rs[p] <= rb[p];
    mono_ok += ok;
  }
  Rng wit(5);
  int witness = -1;
  for (int trial = 0; trial < 200 && witness < 0; ++trial) {
    const auto m = patterns::generate_pattern({}, wit.engine()());
    MaskImage flipped = m;
    const int y = wit.uniform_int(0, kCanvas - 1), x = wit.uniform_int(0, kCanvas - 1);
    flipped.set(y, x, !m(y, x));
    if (litho::simulate(flipped, ks) != litho::simulate(m, ks)) witness = trial;
  }
  const bool pass = shift_ok == 50 && bounded_ok == 50 && mono_ok == 100 && witness >= 0;
  return {pass, fmt("shift-equivariant %d/50, aerial in [0,1] %d/50, monotone %d/100, single-pixel witness at trial %d",
                    shift_ok, bounded_ok, mono_ok, witness)};
}

// ---------------------------------------------------------------- 3

Outcome legalization_vs_attack() {
  const auto& model = small_surrogate();
  const auto ks = litho::build_kernels({});
  int restored = 0, reduced = 0;
  double linf = 0;
  for (int i = 0; i < 20; ++i) {
    const auto m = patterns::generate_pattern({}, derive_seed(32, "eval", static_cast<std::uint64_t>(i)));
    const auto r = metrics::attack_demo(model, m, 0.05, 10, litho::simulate(m, ks));
    restored += r.legalized_equals_original;
    reduced += r.adv_fiou < r.clean_fiou;
    linf = std::max(linf, r.linf);
  }
  return {restored == 20 && reduced >= 18,
          fmt("legalize(adv) == original %d/20, adversarial fIoU reduced %d/20 (need >= 18), max |perturbation| %.3f", restored,
              reduced, linf)};
}

// ---------------------------------------------------------------- 4

Outcome table_arithmetic() {
  const double train_err = 100.0 - 98.4583;
  struct Row {
    const char* name;
    double fiou, error, gap;
  };
  const Row rows[] = {{"pretrain (test)", 94.3589, 5.6411, 4.0994}, {"shape", 96.3467, 3.6533, 2.1116},
                      {"random", 97.1370, 2.8630, 1.3213},          {"style_dice", 97.3223, 2.6777, 1.1360},
                      {"noise_CE", 97.3222, 2.6778, 1.1361},        {"style_pred", 98.2216, 1.7784, 0.2367},
                      {"noise_pred", 98.1474, 1.8526, 0.3109}};
  double worst = 0;
  for (const auto& r : rows) {
    const auto got = metrics::make_row(r.name, r.fiou, train_err);
    worst = std::max({worst, std::abs(got.error_pct - r.error), std::abs(got.gap_pct - r.gap)});
  }
  return {worst < 1e-4, fmt("7 rows, max deviation from the printed error%%/Gap%% %.1e", worst)};
}

// ---------------------------------------------------------------- 5

Outcome criterion_contracts() {
  Rng rng(2);
  int bounded = 0;
  for (int t = 0; t < 1000; ++t) {
    Tape<float> tape;
    const Tensor logits = rng.normal_tensor<float>(Dims{2, 8, 8}, 3.0);
    const double c = sampler::dice_score(ops::softmax_channels(tape.constant(logits))).value()[0];
    bounded += c >= -1.0 - 1e-6 && c <= 0.0;
  }
  Tape<float> tape;
  Tensor same = rng.normal_tensor<float>(Dims{2, 8, 8});
  for (int i = 0; i < 64; ++i) same[64 + i] = same[i];
  const double at_equal = sampler::dice_score(ops::softmax_channels(tape.constant(same))).value()[0];
  const std::vector<float> origin{0.0f};
  const double lp0 = sampler::log_prior(origin);

  const auto& f = small_surrogate();
  std::vector<MaskImage> gan_data;
  for (int i = 0; i < 256; ++i) gan_data.push_back(patterns::generate_pattern({}, derive_seed(33, "gan_data", static_cast<std::uint64_t>(i))));
  style::GanConfig gc;
  gc.steps = 200;
  const auto g = style::gan_train(style::init_generator({}, 33), style::init_discriminator({}, 34), gan_data, gc, 35).g;

  using sampler::Criterion;
  using sampler::Domain;
  const std::pair<Domain, Criterion> kinds[] = {
      {Domain::style, Criterion::pred}, {Domain::style, Criterion::dice}, {Domain::noise, Criterion::pred}, {Domain::noise, Criterion::ce}};
  sampler::AscentConfig cfg;  // 50 steps, lr 0.05
  std::vector<int> monotone(100), improved(100);
  parallel_for(100, [&](std::size_t i) {
    const auto [domain, criterion] = kinds[i % 4];
    const auto a = sampler::optimize_latent(f, g, domain, criterion, cfg, derive_seed(36, "run", i));
    monotone[i] = std::is_sorted(a.trace.begin(), a.trace.end());
    improved[i] = a.trace.back() > a.trace.front();
  });
  const int n_mono = std::accumulate(monotone.begin(), monotone.end(), 0);
  const int n_impr = std::accumulate(improved.begin(), improved.end(), 0);
  const bool pass = bounded == 1000 && std::abs(at_equal + 1.0) < 1e-6 && std::abs(lp0 + 0.9189385) < 1e-6 && n_mono == 100 &&
                    n_impr >= 95;
  return {pass, fmt("dice in [-1,0] %d/1000, dice at identical channels %.7f, log_prior(0) %.7f, trace monotone %d/100, "
                    "strictly improved %d/100 (need >= 95)",
                    bounded, at_equal, lp0, n_mono, n_impr)};
}

// ---------------------------------------------------------------- 6

struct SeedResult {
  double pre_train = 0, pre_test = 0;
  std::map<std::string, double> final_test;
  style::Accuracy acc;
  int fill_ok = 0;
};

// GAN non-collapse witnesses on the pretrained G0/D0 of one seed.
void gan_health(const fs::path& pre, std::uint64_t seed, SeedResult& r) {
  const style::Generator g{{}, load_checkpoint(loop::checkpoint_path(pre, "G", 0).string())};
  const style::Discriminator d{{}, load_checkpoint(loop::checkpoint_path(pre, "D", 0).string())};
  const auto store = loop::DatasetStore::open(pre);
  r.acc = style::discriminator_accuracy(g, d, store.masks(), 256, derive_seed(seed, "acceptance_acc"));
  std::vector<int> ok(256);
  parallel_for(ok.size(), [&](std::size_t k) {
    const double frac = style::sample_mask(g, derive_seed(seed, "acceptance_fill", k), style::NoiseMode::random).mask.fraction();
    ok[k] = frac >= 0.02 && frac <= 0.7;
  });
  r.fill_ok = std::accumulate(ok.begin(), ok.end(), 0);
}

std::vector<SeedResult> g_trend;  // kept for the supplementary lines

Outcome trend_experiment(const fs::path& work, int seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> strategies{"shape", "random", "style_pred"};
  nlohmann::json summary = nlohmann::json::array();
  for (int s = 0; s < seeds; ++s) {
    config::RunConfig cfg;
    cfg.seeds.global = static_cast<std::uint64_t>(s);
    const auto base = work / ("trend_seed" + std::to_string(s));
    fs::remove_all(base);
    const auto pre = base / "pretrain";
    const auto h0 = loop::run_pretrain(cfg, pre);
    SeedResult r;
    r.pre_train = h0[0].train_fiou_pct;
    r.pre_test = h0[0].test_fiou_pct;
    gan_health(pre, cfg.seeds.global, r);
    nlohmann::json row{{"seed", s}, {"pretrain_train_fiou", r.pre_train}, {"pretrain_test_fiou", r.pre_test}};
    for (const auto& strategy : strategies) {
      auto c = cfg;
      c.loop.strategy = strategy;
      c.paths.resume_from = pre.string();
      const auto h = loop::run_loop(c, base / strategy);
      r.final_test[strategy] = h.back().test_fiou_pct;
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& e : h) curve.push_back(e.test_fiou_pct);
      row[strategy] = curve;
    }
    std::printf("    seed %d: pretrain train %.3f test %.3f | final test shape %.3f random %.3f style_pred %.3f (%.0f s elapsed)\n",
                s, r.pre_train, r.pre_test, r.final_test["shape"], r.final_test["random"], r.final_test["style_pred"],
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::fflush(stdout);
    summary.push_back(row);
    g_trend.push_back(r);
  }
  std::ofstream(work / "trend.json") << summary.dump(2) << "\n";
  int gap = 0, style_beats_random = 0;
  std::map<std::string, int> improved;
  for (const auto& r : g_trend) {
    gap += r.pre_train > r.pre_test;  // gap = test error − train error > 0
    for (const auto& [k, v] : r.final_test) improved[k] += v >= r.pre_test;
    style_beats_random += r.final_test.at("style_pred") >= r.final_test.at("random");
  }
  const int need = seeds - seeds / 5;  // 4 of 5
  const bool b_ok = std::all_of(strategies.begin(), strategies.end(), [&](const auto& k) { return improved[k] >= need; });
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  const bool pass = gap >= need && b_ok && style_beats_random >= need && minutes < 120.0;
  return {pass, fmt("(a) positive gap %d/%d; (b) final >= pretrain test: shape %d, random %d, style_pred %d of %d; "
                    "(c) style_pred >= random %d/%d; %.1f min",
                    gap, seeds, improved["shape"], improved["random"], improved["style_pred"], seeds, style_beats_random, seeds,
                    minutes)};
}

// ---------------------------------------------------------------- 7, 8

config::RunConfig persistence_config() {
  config::RunConfig c;
  c.loop.n_initial = 128;
  c.loop.n_test = 32;
  c.loop.T = 2;
  c.loop.B = 16;
  c.loop.strategy = "style_pred";
  c.surrogate.epochs = 2;
  c.gan.steps = 50;
  c.gan.batch = 8;
  c.seeds.global = 7;
  return c;
}

Outcome determinism(const fs::path& work) {
  const auto cfg = persistence_config();
  const auto a = work / "det_a", b = work / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  loop::run_loop(cfg, a);
  loop::run_loop(cfg, b);
  const bool manifest = slurp(a / "manifest.csv") == slurp(b / "manifest.csv");
  const bool history = slurp(a / "history.json") == slurp(b / "history.json");
  return {manifest && history, fmt("manifest.csv %s, history.json %s (T=2, B=16, style_pred)", manifest ? "identical" : "DIFFERS",
                                   history ? "identical" : "DIFFERS")};
}

Outcome persistence(const fs::path& work) {
  const auto fresh = work / "det_a";
  if (!fs::exists(fresh / "history.json")) {
    fs::remove_all(fresh);
    loop::run_loop(persistence_config(), fresh);
  }
  int ckpts = 0, exact = 0;
  for (const auto& e : fs::directory_iterator(fresh / "checkpoints")) {
    ++ckpts;
    exact += checkpoint_bytes(load_checkpoint(e.path().string())) == slurp(e.path());
  }
  const auto pre = work / "resume_pre", resumed = work / "resume_run";
  fs::remove_all(pre);
  fs::remove_all(resumed);
  loop::run_pretrain(persistence_config(), pre);
  auto cfg = persistence_config();
  cfg.paths.resume_from = pre.string();
  loop::run_loop(cfg, resumed);
  const bool same = slurp(fresh / "history.json") == slurp(resumed / "history.json") &&
                    slurp(fresh / "manifest.csv") == slurp(resumed / "manifest.csv");
  return {ckpts > 0 && exact == ckpts && same,
          fmt("%d/%d checkpoints round-trip byte-exactly; resumed history %s the fresh run", exact, ckpts,
              same ? "matches" : "DIFFERS from")};
}

}  // namespace

int main(int argc, char** argv) {
  enable_flush_to_zero();
  CLI::App app{"acceptance run"};
  std::vector<int> only;
  int seeds = 5;
  std::string work = (fs::temp_directory_path() / "lada_acceptance").string();
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--seeds", seeds, "seeds for the trend experiment")->check(CLI::PositiveNumber);
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_suite},
      {2, oracle_physics},
      {3, legalization_vs_attack},
      {4, table_arithmetic},
      {5, criterion_contracts},
      {7, [&] { return determinism(work); }},
      {8, [&] { return persistence(work); }},
      {6, [&] { return trend_experiment(work, seeds); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  std::map<int, Outcome> results;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s  %s  [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), sec);
    std::fflush(stdout);
    results[id] = o;
  }

  if (!g_trend.empty()) {
    int acc_ok = 0, fill_ok = 0;
    for (std::size_t s = 0; s < g_trend.size(); ++s) {
      const auto& r = g_trend[s];
      const bool a = r.acc.real > 0.05 && r.acc.real < 0.99 && r.acc.fake > 0.05 && r.acc.fake < 0.99;
      acc_ok += a;
      fill_ok += r.fill_ok >= 205;  // 80% of 256
      std::printf("    gan seed %zu: D accuracy real %.3f fake %.3f, fill in [0.02, 0.7] %d/256\n", s, r.acc.real, r.acc.fake,
                  r.fill_ok);
    }
    const int n = static_cast<int>(g_trend.size()), need = n - n / 5;
    std::printf("supplementary gan non-collapse: %s  D accuracies in (0.05, 0.99) in %d/%d seeds\n",
                acc_ok >= need ? "PASS" : "FAIL", acc_ok, n);
    std::printf("supplementary gan sample fill: %s  >= 80%% of samples in range in %d/%d seeds\n", fill_ok == n ? "PASS" : "FAIL",
                fill_ok, n);
  }

  int failed = 0;
  for (const auto& [id, o] : results) failed += !o.pass;
  std::printf("%zu criteria run, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}
