#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "lada/doinn.hpp"
#include "lada/litho.hpp"
#include "lada/patterns.hpp"
#include "lada/sampler.hpp"
#include "lada/stylegan.hpp"

// Run configuration: one JSON object with fixed sections. Every key has a
// default; the persisted config.json always carries all of them.
namespace lada::config {

struct LoopSection {
  int T = 4;
  int B = 128;
  std::string strategy = "random";
  int n_initial = 512;
  int n_test = 128;
  int audit = 32;  // rows re-labeled by the oracle after each iteration
  doinn::FinetuneConfig finetune{.epochs = 2, .lr = 1e-3, .batch = 16, .lpm_weight = 1.0};

  friend bool operator==(const LoopSection&, const LoopSection&) = default;
};

struct Seeds {
  std::uint64_t global = 0;

  friend bool operator==(const Seeds&, const Seeds&) = default;
};

struct Paths {
  std::string out;          // empty: runs/<timestamp>-<seed>
  std::string resume_from;  // run directory holding iteration-0 checkpoints; empty: pretrain

  friend bool operator==(const Paths&, const Paths&) = default;
};

struct RunConfig {
  litho::KernelConfig oracle;
  patterns::DesignRules rules;
  patterns::DesignRules rules_test = patterns::shifted_test_rules();
  style::GanConfig gan;
  doinn::FinetuneConfig surrogate{.epochs = 12, .lr = 2e-3, .batch = 16, .lpm_weight = 1.0};
  sampler::AscentConfig sampler;
  LoopSection loop;
  Seeds seeds;
  Paths paths;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Named sub-streams of the global seed.
inline std::uint64_t stream_seed(const RunConfig& c, const char* name) { return derive_seed(c.seeds.global, name); }

// ---------------------------------------------------------------- reading

namespace detail {

/// Reads keys of one JSON object, remembering which were consumed so the
/// rest can be rejected with their JSON-pointer paths.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out, std::function<bool(const T&)> ok = {}, const char* requirement = "") {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    T v;
    try {
      v = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(path_ + "/" + key + ": wrong type");
    }
    if (ok && !ok(v)) throw ValidationError(path_ + "/" + key + ": " + requirement);
    out = v;
  }

  /// Nested object handed to `read`; errors inside it are prefixed with its path.
  void nested(const std::string& key, const std::function<void(const nlohmann::json&, const std::string&)>& read) {
    seen_.insert(key);
    if (j_.contains(key)) read(j_.at(key), path_ + "/" + key);
  }

  void finish() const {
    for (const auto& [key, v] : j_.items()) {
      if (!seen_.count(key)) throw ValidationError(path_ + "/" + key + ": unknown key");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "/" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class T>
std::function<bool(const T&)> at_least(T lo) {
  return [lo](const T& v) { return v >= lo; };
}

inline std::function<bool(const double&)> positive() {
  return [](const double& v) { return v > 0; };
}

inline void read_finetune(const nlohmann::json& j, const std::string& path, doinn::FinetuneConfig& f) {
  Section s(j, path);
  s.get<int>("epochs", f.epochs, at_least(0), "must be >= 0");
  s.get<double>("lr", f.lr, positive(), "must be > 0");
  s.get<int>("batch", f.batch, at_least(1), "must be >= 1");
  s.get<double>("lpm_weight", f.lpm_weight, at_least(0.0), "must be >= 0");
  s.finish();
}

inline patterns::DesignRules read_rules(const nlohmann::json& j, const std::string& path, const patterns::DesignRules& base) {
  patterns::DesignRules r;
  try {
    r = patterns::rules_from_json(j, base);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
  if (r.height != kCanvas || r.width != kCanvas) throw ValidationError(path + "/canvas: the networks require 64×64");
  return r;
}

}  // namespace detail

inline RunConfig from_json(const nlohmann::json& j) {
  using namespace detail;
  RunConfig c;
  Section root(j, "");
  root.nested("oracle", [&](const nlohmann::json& o, const std::string& path) {
    try {
      c.oracle = litho::kernel_config_from_json(o);
    } catch (const ValidationError& e) {
      throw ValidationError(path + ": " + e.what());
    }
  });
  root.nested("rules", [&](const nlohmann::json& o, const std::string& path) { c.rules = read_rules(o, path, c.rules); });
  root.nested("rules_test",
              [&](const nlohmann::json& o, const std::string& path) { c.rules_test = read_rules(o, path, c.rules_test); });
  root.nested("gan", [&](const nlohmann::json& o, const std::string& path) {
    Section s(o, path);
    s.get<int>("steps", c.gan.steps, at_least(0), "must be >= 0");
    s.get<double>("lr", c.gan.lr, positive(), "must be > 0");
    s.get<int>("batch", c.gan.batch, at_least(1), "must be >= 1");
    s.get<double>("r1_gamma", c.gan.r1_gamma, at_least(0.0), "must be >= 0");
    s.get<int>("r1_interval", c.gan.r1_interval, at_least(1), "must be >= 1");
    auto unit = [](const double& v) { return v >= 0 && v < 1; };
    s.get<double>("beta1", c.gan.beta1, unit, "must be in [0, 1)");
    s.get<double>("beta2", c.gan.beta2, unit, "must be in [0, 1)");
    s.finish();
  });
  root.nested("surrogate", [&](const nlohmann::json& o, const std::string& path) { read_finetune(o, path, c.surrogate); });
  root.nested("sampler", [&](const nlohmann::json& o, const std::string& path) {
    Section s(o, path);
    s.get<double>("lambda1", c.sampler.lambda1, at_least(0.0), "must be >= 0");
    s.get<double>("lambda2", c.sampler.lambda2, at_least(0.0), "must be >= 0");
    s.get<int>("steps", c.sampler.steps, at_least(0), "must be >= 0");
    s.get<double>("lr", c.sampler.lr, positive(), "must be > 0");
    std::string dice = c.sampler.dice_input == sampler::DiceInput::logits ? "logits" : "probabilities";
    s.get<std::string>(
        "dice_input", dice, [](const std::string& v) { return v == "probabilities" || v == "logits"; },
        "must be \"probabilities\" or \"logits\"");
    c.sampler.dice_input = dice == "logits" ? sampler::DiceInput::logits : sampler::DiceInput::probabilities;
    s.finish();
  });
  root.nested("loop", [&](const nlohmann::json& o, const std::string& path) {
    Section s(o, path);
    s.get<int>("T", c.loop.T, at_least(1), "must be >= 1");
    s.get<int>("B", c.loop.B, at_least(1), "must be >= 1");
    s.get<std::string>(
        "strategy", c.loop.strategy,
        [](const std::string& v) {
          try {
            sampler::parse_strategy(v);
            return true;
          } catch (const ValidationError&) {
            return false;
          }
        },
        "must be one of shape, random, style_dice, noise_CE, style_pred, noise_pred");
    s.get<int>("n_initial", c.loop.n_initial, at_least(1), "must be >= 1");
    s.get<int>("n_test", c.loop.n_test, at_least(1), "must be >= 1");
    s.get<int>("audit", c.loop.audit, at_least(0), "must be >= 0");
    s.nested("finetune", [&](const nlohmann::json& f, const std::string& p) { read_finetune(f, p, c.loop.finetune); });
    s.finish();
  });
  root.nested("seeds", [&](const nlohmann::json& o, const std::string& path) {
    Section s(o, path);
    s.get<std::uint64_t>("global", c.seeds.global);
    s.finish();
  });
  root.nested("paths", [&](const nlohmann::json& o, const std::string& path) {
    Section s(o, path);
    s.get<std::string>("out", c.paths.out);
    s.get<std::string>("resume_from", c.paths.resume_from);
    s.finish();
  });
  root.finish();
  return c;
}

inline nlohmann::json finetune_json(const doinn::FinetuneConfig& f) {
  return {{"epochs", f.epochs}, {"lr", f.lr}, {"batch", f.batch}, {"lpm_weight", f.lpm_weight}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["oracle"] = litho::to_json(c.oracle);
  j["rules"] = patterns::to_json(c.rules);
  j["rules_test"] = patterns::to_json(c.rules_test);
  j["gan"] = {{"steps", c.gan.steps},   {"lr", c.gan.lr},       {"batch", c.gan.batch}, {"r1_gamma", c.gan.r1_gamma},
              {"r1_interval", c.gan.r1_interval}, {"beta1", c.gan.beta1}, {"beta2", c.gan.beta2}};
  j["surrogate"] = finetune_json(c.surrogate);
  j["sampler"] = {{"lambda1", c.sampler.lambda1},
                  {"lambda2", c.sampler.lambda2},
                  {"steps", c.sampler.steps},
                  {"lr", c.sampler.lr},
                  {"dice_input", c.sampler.dice_input == sampler::DiceInput::logits ? "logits" : "probabilities"}};
  j["loop"] = {{"T", c.loop.T},           {"B", c.loop.B},       {"strategy", c.loop.strategy},
               {"n_initial", c.loop.n_initial}, {"n_test", c.loop.n_test}, {"audit", c.loop.audit},
               {"finetune", finetune_json(c.loop.finetune)}};
  j["seeds"] = {{"global", c.seeds.global}};
  j["paths"] = {{"out", c.paths.out}, {"resume_from", c.paths.resume_from}};
  return j;
}

inline RunConfig parse_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("malformed JSON: ") + e.what());
  }
  return from_json(j);
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

inline void write_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(c).dump(2) << "\n";
}

}  // namespace lada::config
