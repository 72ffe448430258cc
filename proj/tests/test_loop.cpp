#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lada/active_loop.hpp"
#include "lada/config.hpp"

using namespace lada;
using namespace lada::loop;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("lada_loop_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

config::RunConfig tiny(const std::string& strategy = "random") {
  config::RunConfig c;
  c.loop.n_initial = 64;
  c.loop.n_test = 16;
  c.loop.T = 2;
  c.loop.B = 4;
  c.loop.audit = 8;
  c.loop.strategy = strategy;
  c.loop.finetune.epochs = 1;
  c.surrogate.epochs = 1;
  c.gan.steps = 2;
  c.gan.batch = 4;
  c.sampler.steps = 3;
  c.seeds.global = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, EmptyObjectIsFullDefault) {
  EXPECT_EQ(config::parse_string("{}"), config::RunConfig{});
  const auto j = config::to_json(config::RunConfig{});
  for (const char* section : {"oracle", "rules", "rules_test", "gan", "surrogate", "sampler", "loop", "seeds", "paths"}) {
    EXPECT_TRUE(j.contains(section)) << section;
  }
}

TEST(Config, RejectsOutOfRangeWithPointer) {
  try {
    config::parse_string(R"({"loop":{"T":0}})");
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("/loop/T"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config::parse_string(R"({"loop":{"B":0}})"), ValidationError);
  EXPECT_THROW(config::parse_string(R"({"sampler":{"lr":0}})"), ValidationError);
  EXPECT_THROW(config::parse_string(R"({"loop":{"strategy":"pool"}})"), ValidationError);
  EXPECT_THROW(config::parse_string(R"({"rules":{"canvas":[32,32]}})"), ValidationError);
}

TEST(Config, RejectsUnknownKeysWithPointer) {
  for (const auto& [text, where] : std::vector<std::pair<std::string, std::string>>{
           {R"({"gan":{"stepz":3}})", "/gan/stepz"},
           {R"({"extra":1})", "/extra"},
           {R"({"loop":{"finetune":{"epoch":1}}})", "/loop/finetune/epoch"},
           {R"({"rules":{"min_widht":3}})", "/rules"}}) {
    try {
      config::parse_string(text);
      FAIL() << text;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
    }
  }
}

TEST(Config, WrongTypesMalformedAndMissing) {
  EXPECT_THROW(config::parse_string(R"({"loop":{"T":"four"}})"), ValidationError);
  EXPECT_THROW(config::parse_string("{"), ValidationError);
  EXPECT_THROW(config::parse_string("[]"), ValidationError);
  EXPECT_THROW(config::parse_config("/nonexistent/config.json"), ValidationError);
}

TEST(Config, RoundTrip) {
  auto c = tiny("style_pred");
  c.sampler.dice_input = sampler::DiceInput::logits;
  c.rules_test.min_width = 4;
  c.oracle.theta = 0.2;
  c.paths.resume_from = "runs/x";
  EXPECT_EQ(config::from_json(config::to_json(c)), c);
  const auto dir = scratch("config");
  fs::create_directories(dir);
  config::write_config((dir / "c.json").string(), c);
  EXPECT_EQ(config::parse_config((dir / "c.json").string()), c);
}

// ---------------------------------------------------------------- store

TEST(Store, SinglePairAndReopen) {
  const auto ks = litho::build_kernels({});
  const auto dir = scratch("single");
  const auto store = build_initial_dataset(1, {}, ks, 3, dir);
  EXPECT_EQ(store.size(), 1u);
  const auto back = DatasetStore::open(dir);
  EXPECT_EQ(back.records(), store.records());
  EXPECT_EQ(back.masks(), store.masks());
  EXPECT_EQ(back.resists(), store.resists());
  std::ifstream in(dir / "manifest.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "id,mask,resist,strategy,iteration,seed");
  EXPECT_THROW(DatasetStore::create(dir), ValidationError);
  EXPECT_THROW(build_initial_dataset(0, {}, ks, 3, scratch("zero")), ValidationError);
}

TEST(Store, ManifestIsSeedDeterministicAndLabelsAreExact) {
  const auto ks = litho::build_kernels({});
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto store = build_initial_dataset(40, {}, ks, 9, a);
  build_initial_dataset(40, {}, ks, 9, b);
  EXPECT_EQ(slurp(a / "manifest.csv"), slurp(b / "manifest.csv"));
  for (std::size_t i = 0; i < store.size(); ++i) {
    EXPECT_EQ(litho::simulate(store.masks()[i], ks), store.resists()[i]);
    EXPECT_EQ(slurp(a / store.records()[i].mask), slurp(b / store.records()[i].mask));
  }
  EXPECT_TRUE(audit_labels(store, ks, 32, 1).empty());
}

TEST(Store, AppendGrowsAndRejectsCorruptManifest) {
  const auto ks = litho::build_kernels({});
  const auto dir = scratch("append");
  auto store = build_initial_dataset(3, {}, ks, 4, dir);
  const auto m = patterns::generate_pattern({}, 77);
  store.append({{m, litho::simulate(m, ks), "random", 1, 77}});
  EXPECT_EQ(store.size(), 4u);
  EXPECT_EQ(store.records().back().iteration, 1);
  EXPECT_EQ(DatasetStore::open(dir).size(), 4u);
  {
    std::ofstream out(dir / "manifest.csv", std::ios::app);
    out << "000000,masks/000000.pgm,resists/000000.pgm,shape,0,1\n";
  }
  EXPECT_THROW(DatasetStore::open(dir), ValidationError);
}

TEST(Store, AuditCatchesTamperedLabel) {
  const auto ks = litho::build_kernels({});
  const auto dir = scratch("tamper");
  auto store = build_initial_dataset(2, {}, ks, 4, dir);
  ResistImage wrong(kCanvas, kCanvas);
  wrong.set(0, 0, true);
  write_pgm((dir / store.records()[1].resist).string(), wrong);
  EXPECT_FALSE(audit_labels(DatasetStore::open(dir), ks, 16, 2).empty());
}

// ---------------------------------------------------------------- loop

TEST(Loop, HistoryStoreGrowthProvenanceAndFrozenG) {
  const auto cfg = tiny("style_pred");
  const auto dir = scratch("run");
  const auto history = run_loop(cfg, dir);
  ASSERT_EQ(history.size(), 3u);
  for (int t = 0; t <= 2; ++t) {
    EXPECT_EQ(history[t].iteration, t);
    EXPECT_EQ(history[t].dataset_size, 64u + 4u * t);
    EXPECT_EQ(history[t].g_hash, history[0].g_hash);
    EXPECT_GT(history[t].test_fiou_pct, 0.0);
  }
  EXPECT_TRUE(history[1].criterion_final_mean.has_value());
  const auto store = DatasetStore::open(dir);
  ASSERT_EQ(store.size(), 72u);
  for (std::size_t i = 64; i < 72; ++i) {
    EXPECT_EQ(store.records()[i].strategy, "style_pred");
    EXPECT_EQ(store.records()[i].iteration, i < 68 ? 1 : 2);
    EXPECT_TRUE(fs::exists(dir / "masks" / (store.records()[i].id + ".json")));
  }
  auto untimed = history;
  for (auto& e : untimed) e.wall_seconds = 0;  // timings live in timings.json
  EXPECT_EQ(history_from_json(nlohmann::json::parse(slurp(dir / "history.json"))), untimed);
  for (const char* f : {"config.json", "timings.json", "checkpoints/F_0.ckpt", "checkpoints/G_0.ckpt", "checkpoints/F_2.ckpt",
                        "checkpoints/F_final.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(params_hash(load_checkpoint((dir / "checkpoints/G_0.ckpt").string())), std::stoull(history[2].g_hash, nullptr, 16));
  // The persisted config reproduces the run.
  auto saved = config::parse_config((dir / "config.json").string());
  saved.paths.out.clear();
  EXPECT_EQ(saved, cfg);
}

TEST(Loop, SingleIterationRun) {
  auto cfg = tiny("shape");
  cfg.loop.T = 1;
  const auto h = run_loop(cfg, scratch("t1"));
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[1].dataset_size, 68u);
  EXPECT_FALSE(h[1].criterion_init_mean.has_value());
}

TEST(Loop, RerunIsByteIdentical) {
  const auto cfg = tiny("noise_pred");
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  run_loop(cfg, a);
  run_loop(cfg, b);
  EXPECT_EQ(slurp(a / "manifest.csv"), slurp(b / "manifest.csv"));
  EXPECT_EQ(slurp(a / "history.json"), slurp(b / "history.json"));
  EXPECT_EQ(slurp(a / "checkpoints/F_final.ckpt"), slurp(b / "checkpoints/F_final.ckpt"));
}

TEST(Loop, ResumeFromPretrainMatchesFreshRun) {
  const auto cfg = tiny("random");
  const auto pre = scratch("pre");
  const auto h0 = run_pretrain(cfg, pre);
  ASSERT_EQ(h0.size(), 1u);
  const auto fresh = scratch("fresh");
  const auto h_fresh = run_loop(cfg, fresh);
  auto resumed_cfg = cfg;
  resumed_cfg.paths.resume_from = pre.string();
  const auto resumed = scratch("resumed");
  const auto h_resumed = run_loop(resumed_cfg, resumed);
  EXPECT_EQ(slurp(fresh / "history.json"), slurp(resumed / "history.json"));
  EXPECT_EQ(slurp(fresh / "manifest.csv"), slurp(resumed / "manifest.csv"));
  EXPECT_EQ(h0[0], (HistoryEntry{h_fresh[0].iteration, h_fresh[0].train_fiou_pct, h_fresh[0].test_fiou_pct,
                                  h_fresh[0].dataset_size, h_fresh[0].g_hash, 0, 0, std::nullopt, std::nullopt,
                                  h0[0].wall_seconds}));

  auto mismatched = resumed_cfg;
  mismatched.surrogate.epochs = 2;
  EXPECT_THROW(run_loop(mismatched, scratch("mismatch")), ValidationError);
}

TEST(Loop, CheckpointsRoundTripByteExactly) {
  const auto dir = scratch("ckpt");
  run_pretrain(tiny(), dir);
  for (const char* net : {"F", "G", "D"}) {
    const auto path = checkpoint_path(dir, net, 0);
    EXPECT_EQ(checkpoint_bytes(load_checkpoint(path.string())), slurp(path));
  }
}
