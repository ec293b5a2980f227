// Batch command-line front end. Every subcommand writes <out>/<name>.csv and
// <out>/<name>.json; exit status 0 = all verdicts pass, 1 = a verdict
// failed, 2 = usage error.
//
// Option precedence: command-line flag, then the --config JSON object, then
// the built-in default. SFT_OUT_DIR sets the default output directory.
#pragma once

#include "sft/analysis.hpp"
#include "sft/data.hpp"
#include "sft/gradcheck.hpp"
#include "sft/report.hpp"
#include "sft/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <type_traits>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace sft::cli {

using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string default_out_dir() {
  const char* env = std::getenv("SFT_OUT_DIR");
  return env && *env ? env : "sft_out";
}

namespace detail {

template <class T>
void assign(T& var, const json& j) {
  var = j.get<T>();
}

template <class T>
void assign(std::vector<T>& var, const json& j) {
  if (j.is_array()) {
    var = j.get<std::vector<T>>();
    return;
  }
  // "32,64,128"
  var.clear();
  std::stringstream ss(j.get<std::string>());
  std::string item;
  while (std::getline(ss, item, ',')) var.push_back(static_cast<T>(std::stod(item)));
}

}  // namespace detail

/// Registers options on a CLI11 subcommand and remembers how to fill each
/// one from the config file when the flag itself was not given.
class Binder {
 public:
  explicit Binder(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    CLI::Option* o = app_->add_option("--" + name, var, desc)->capture_default_str();
    if constexpr (requires { var.begin(); } && !std::is_same_v<T, std::string>) o->delimiter(',');
    entries_.push_back({name, o, [&var](const json& j) { detail::assign(var, j); }, [&var] { return json(var); }});
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    CLI::Option* o = app_->add_flag("--" + name, var, desc);
    entries_.push_back({name, o, [&var](const json& j) { var = j.get<bool>(); }, [&var] { return json(var); }});
    return o;
  }

  /// Applies config values to options not given on the command line.
  void apply(const json& cfg) {
    if (!cfg.is_object()) throw UsageError("config file must hold a flat JSON object");
    for (auto it = cfg.begin(); it != cfg.end(); ++it) {
      auto e = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& x) { return x.name == it.key(); });
      if (e == entries_.end()) throw UsageError("unknown config key: " + it.key());
      if (e->opt->count() == 0) {
        try {
          e->set(it.value());
        } catch (const std::exception& ex) {
          throw UsageError("bad value for config key " + it.key() + ": " + ex.what());
        }
      }
    }
  }

  json resolved() const {
    json j = json::object();
    for (const auto& e : entries_) j[e.name] = e.get();
    return j;
  }

 private:
  struct Entry {
    std::string name;
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };
  CLI::App* app_;
  std::vector<Entry> entries_;
};

/// Shared state for one run.
struct Run {
  std::string name;
  std::uint64_t seed = 0;
  std::string out_dir;
  json config;
  json results = json::object();
  json verdicts = json::object();
  std::unique_ptr<CsvTable> table;
  std::ostream* log = nullptr;

  void verdict(const std::string& key, bool ok) {
    verdicts[key] = ok;
    *log << (ok ? "PASS " : "FAIL ") << key << "\n";
  }

  bool passed() const {
    for (const auto& [k, v] : verdicts.items())
      if (!v.get<bool>()) return false;
    return true;
  }

  /// Writes the CSV (data columns plus seed, version, config, pass) and the
  /// JSON summary.
  void write() const {
    const bool ok = passed();
    const std::string cfg = config.dump();
    std::vector<std::string> header = table->header();
    for (const char* h : {"seed", "version", "config", "pass"}) header.emplace_back(h);
    CsvTable out(header);
    for (auto row : table->rows()) {
      row.push_back(std::to_string(seed));
      row.push_back(kVersion);
      row.push_back(cfg);
      row.push_back(fmt(ok));
      out.add(std::move(row));
    }
    const std::filesystem::path dir(out_dir);
    write_text(dir / (name + ".csv"), out.str());
    json summary{{"subcommand", name}, {"version", kVersion}, {"seed", seed},     {"config", config},
                 {"results", results}, {"verdicts", verdicts}, {"pass", ok}};
    write_text(dir / (name + ".json"), summary.dump(2) + "\n");
  }
};

// ---------------------------------------------------------------------------
// Subcommands. Each registers its options and returns the engine runner.

using Runner = std::function<void(Run&)>;

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline Runner add_gradcheck(Binder& b) {
  struct Opts {
    std::size_t seeds = 20, n = 8, d = 4, h = 2, k = 3, rpe_dim = 2;
    double step = 1e-5, tol = 1e-4, dropout = 0.1;
    std::string modes = "sft_maxout_leaky,softmax_dot,relu_dot_nonleaky", ln = "pre,post";
  };
  auto o = std::make_shared<Opts>();
  b.add("seeds", o->seeds, "random seeds per configuration");
  b.add("n", o->n, "tokens");
  b.add("d", o->d, "model width");
  b.add("heads", o->h, "heads");
  b.add("k", o->k, "sampled keys for the sampled configurations");
  b.add("rpe-dim", o->rpe_dim, "relative channels for the RPE configurations");
  b.add("step", o->step, "central-difference step");
  b.add("tol", o->tol, "threshold on the scaled per-group error");
  b.add("dropout", o->dropout, "attention/token/FFN dropout (train mode)");
  b.add("modes", o->modes, "comma-separated attention modes");
  b.add("ln", o->ln, "comma-separated LayerNorm positions");
  return [o](Run& run) {
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{
        "mode", "ln", "sampled", "rpe", "case_seed", "max_rel_error", "max_scaled_error", "flat_rel_error", "worst_group"});
    double worst = 0.0;
    std::size_t cases = 0;
    for (const auto& mode : split_list(o->modes))
      for (const auto& ln : split_list(o->ln))
        for (bool sampled : {false, true})
          for (bool rpe : {false, true})
            for (std::size_t s = 0; s < o->seeds; ++s) {
              GradcheckCase gc;
              gc.cfg.d = o->d;
              gc.cfg.h = o->h;
              gc.cfg.k = sampled ? o->k : LayerConfig::kAll;
              gc.cfg.ln = parse_ln_position(ln);
              gc.cfg.mode = parse_attn_mode(mode);
              gc.cfg.rpe_dim = rpe ? o->rpe_dim : 0;
              gc.cfg.drop_attn = gc.cfg.drop_token = gc.cfg.drop_ffn = o->dropout;
              gc.n = o->n;
              gc.h = o->step;
              gc.seed = run.seed + s;
              const auto r = layer_gradcheck(gc);
              std::string wg;
              double wv = -1.0;
              for (const auto& g : r.groups)
                if (g.scaled_error > wv) {
                  wv = g.scaled_error;
                  wg = g.group;
                }
              run.table->add({mode, ln, fmt(r.sampled), fmt(rpe), std::to_string(gc.seed), fmt(r.max_rel_error),
                              fmt(r.max_scaled_error), fmt(r.flat_rel_error), wg});
              worst = std::max(worst, r.max_scaled_error);
              ++cases;
            }
    run.results = {{"cases", cases}, {"max_scaled_error", worst}};
    run.verdict("max_scaled_error_below_tol", worst < o->tol);
  };
}

inline Runner add_rank(Binder& b) {
  struct Opts {
    std::size_t n = 64, d = 64, layers = 50, trials = 10;
    bool full_scale = false;
  };
  auto o = std::make_shared<Opts>();
  b.add("n", o->n, "tokens");
  b.add("d", o->d, "model width");
  b.add("layers", o->layers, "stack depth");
  b.add("trials", o->trials, "independent trials");
  b.flag("full-scale", o->full_scale, "256 tokens, width 512, 100 layers (slow)");
  return [o](Run& run) {
    RankConfig rc;
    rc.n = o->full_scale ? 256 : o->n;
    rc.d = o->full_scale ? 512 : o->d;
    rc.layers = o->full_scale ? 100 : o->layers;
    rc.trials = o->trials;
    rc.seed = run.seed;
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"model", "layer", "mean_rank", "min_rank", "max_rank"});
    const auto leaky = rank_progression(rc);
    RankConfig base = rc;
    base.mode = AttnMode::ReluDotNonleaky;
    base.use_rpe = false;
    const auto flat = rank_progression(base);
    bool stays_one = true;
    for (const auto& r : leaky) run.table->add({"sft_maxout_leaky+rpe", fmt(r.layer), fmt(r.mean), fmt(r.min), fmt(r.max)});
    for (const auto& r : flat) {
      run.table->add({"relu_dot_nonleaky", fmt(r.layer), fmt(r.mean), fmt(r.min), fmt(r.max)});
      stays_one = stays_one && r.max == 1;
    }
    const double first = leaky.size() > 1 ? leaky[1].mean : 0.0;
    run.results = {{"layer1_mean_rank", first}, {"final_mean_rank", leaky.back().mean}};
    run.verdict("final_rank_above_layer1", leaky.size() > 1 && leaky.back().mean > first);
    run.verdict("nonleaky_baseline_rank_one", stays_one);
  };
}

struct ToyModelOpts {
  std::size_t d = 16, h = 2, layers = 2, k = 32, n_tokens = 128, n_train = 256, n_test = 128;
  std::size_t epochs = 40, batch = 32, warmup = untuned_warmup_steps(0.999);
  double lr = 1e-3, noise = 0.02;
};

inline void add_toy_options(Binder& b, ToyModelOpts& o) {
  b.add("d", o.d, "model width");
  b.add("heads", o.h, "heads");
  b.add("layers", o.layers, "layers");
  b.add("k", o.k, "sampled keys (sampled models)");
  b.add("n-tokens", o.n_tokens, "points / tokens per example");
  b.add("n-train", o.n_train, "training examples");
  b.add("n-test", o.n_test, "test examples");
  b.add("epochs", o.epochs, "training epochs");
  b.add("batch", o.batch, "batch size");
  b.add("warmup", o.warmup, "linear warmup steps");
  b.add("lr", o.lr, "base learning rate");
  b.add("noise", o.noise, "point jitter");
}

struct ToyModel {
  std::string name;
  ModelConfig mc;
  TokenChoice tokens;
};

/// sft: maxout/leaky + RPE, sampled; softmax: softmax-dot + RPE, sampled;
/// vanilla: softmax-dot, no relative features, full attention.
inline ToyModel toy_model(const std::string& name, const ToyModelOpts& o, std::size_t in_dim, std::size_t n_classes) {
  ToyModel t{name, {}, {false, true}};
  t.mc.in_dim = in_dim;
  t.mc.n_classes = n_classes;
  t.mc.layers = o.layers;
  t.mc.layer.d = o.d;
  t.mc.layer.h = o.h;
  t.mc.layer.rpe_dim = 2;
  t.mc.layer.k = o.k;
  if (name == "sft") {
    t.mc.layer.mode = AttnMode::SftMaxoutLeaky;
  } else if (name == "softmax") {
    t.mc.layer.mode = AttnMode::SoftmaxDot;
  } else if (name == "vanilla") {
    t.mc.layer.mode = AttnMode::SoftmaxDot;
    t.mc.layer.rpe_dim = 0;
    t.mc.layer.k = LayerConfig::kAll;
    t.tokens.rpe = false;
  } else {
    throw UsageError("unknown model: " + name + " (expected sft, softmax or vanilla)");
  }
  return t;
}

inline TrainOptions train_options(const ToyModelOpts& o, std::uint64_t seed) {
  TrainOptions t;
  t.epochs = o.epochs;
  t.batch = o.batch;
  t.lr = o.lr;
  t.warmup_steps = o.warmup;
  t.seed = seed;
  return t;
}

struct ToyData {
  std::vector<Example> train, test;
  std::size_t in_dim = 0, n_classes = 0;
};

inline ToyData toy_data(const std::string& task, const ToyModelOpts& o, const ToyModel& m, std::uint64_t seed,
                        std::size_t d_pe) {
  ToyDatasetSpec spec;
  spec.n_tokens = o.n_tokens;
  spec.n_train = o.n_train;
  spec.n_test = o.n_test;
  spec.noise = o.noise;
  spec.seed = seed;
  ToyData td;
  if (task == "shapes") {
    const auto ds = gen_toy_shapes(spec);
    for (const auto& pc : ds.train) td.train.push_back(shape_example(pc, m.tokens));
    for (const auto& pc : ds.test) td.test.push_back(shape_example(pc, m.tokens));
    td.in_dim = 6;
    td.n_classes = spec.n_classes;
  } else if (task == "seq") {
    spec.kind = ToyKind::SeqParity;
    const auto ds = gen_seq_parity(spec);
    for (const auto& s : ds.train) td.train.push_back(seq_example(s, d_pe, m.tokens.rpe));
    for (const auto& s : ds.test) td.test.push_back(seq_example(s, d_pe, m.tokens.rpe));
    td.in_dim = 4;
    td.n_classes = 2;
  } else {
    throw UsageError("unknown task: " + task + " (expected shapes or seq)");
  }
  return td;
}

inline Runner add_train(Binder& b) {
  struct Opts {
    ToyModelOpts toy;
    std::string task = "shapes", models = "sft,softmax,vanilla";
    std::size_t seeds = 5, d_pe = 8;
    double target = 0.5;
  };
  auto o = std::make_shared<Opts>();
  add_toy_options(b, o->toy);
  b.add("task", o->task, "shapes or seq");
  b.add("models", o->models, "comma-separated subset of sft,softmax,vanilla");
  b.add("seeds", o->seeds, "training seeds (seed, seed+1, ...)");
  b.add("d-pe", o->d_pe, "sinusoid width for the seq task");
  b.add("target", o->target, "accuracy threshold for epochs-to-threshold");
  return [o](Run& run) {
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{
        "model", "seed", "epoch", "train_loss", "train_acc", "test_loss", "test_acc", "test_acc_cummax"});
    std::map<std::string, std::vector<std::size_t>> to_target;
    std::map<std::string, std::vector<double>> final_acc;
    bool loss_drops = true;
    for (const auto& name : split_list(o->models)) {
      for (std::size_t s = 0; s < o->seeds; ++s) {
        const std::uint64_t seed = run.seed + s;
        ToyModel m = toy_model(name, o->toy, 0, 0);
        if (o->task == "seq" && m.tokens.rpe) m.mc.layer.rpe_dim = o->d_pe;
        const ToyData td = toy_data(o->task, o->toy, m, seed, o->d_pe);
        m.mc.in_dim = td.in_dim;
        m.mc.n_classes = td.n_classes;
        const auto res = train_run(m.mc, td.train, td.test, train_options(o->toy, seed));
        for (const auto& r : res.curve)
          run.table->add({name, std::to_string(seed), fmt(r.epoch), fmt(r.train_loss), fmt(r.train_acc), fmt(r.test_loss),
                          fmt(r.test_acc), fmt(r.test_acc_cummax)});
        if (!res.curve.empty()) {
          to_target[name].push_back(epochs_to_threshold(res.curve, o->target));
          final_acc[name].push_back(res.curve.back().test_acc);
          const std::size_t last = std::min<std::size_t>(10, res.curve.size()) - 1;
          loss_drops = loss_drops && res.curve[last].train_loss < res.curve.front().train_loss;
        }
        *run.log << name << " seed " << seed << " final acc "
                 << (res.curve.empty() ? 0.0 : res.curve.back().test_acc) << "\n";
      }
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    run.results["epochs_to_target"] = to_target;
    run.results["final_test_acc"] = final_acc;
    run.results["loss_decreases_by_epoch_10"] = loss_drops;
    if (to_target.count("sft") && to_target.count("softmax") && to_target.count("vanilla")) {
      std::size_t wins = 0;
      for (std::size_t s = 0; s < to_target["sft"].size(); ++s) wins += to_target["sft"][s] <= to_target["softmax"][s];
      run.results["sft_not_slower_seeds"] = wins;
      run.verdict("sft_reaches_target_no_later_than_softmax_majority", 2 * wins > to_target["sft"].size());
      run.verdict("sft_final_beats_vanilla", mean(final_acc["sft"]) > mean(final_acc["vanilla"]));
      run.verdict("softmax_final_beats_vanilla", mean(final_acc["softmax"]) > mean(final_acc["vanilla"]));
    }
  };
}

inline Runner add_similarity(Binder& b) {
  struct Opts {
    ToyModelOpts toy;
    std::size_t samples = 32;
  };
  auto o = std::make_shared<Opts>();
  o->toy.epochs = 10;
  add_toy_options(b, o->toy);
  b.add("samples", o->samples, "test clouds to probe");
  return [o](Run& run) {
    ToyModel m = toy_model("sft", o->toy, 6, 4);
    const ToyData td = toy_data("shapes", o->toy, m, run.seed, 0);
    const auto res = train_run(m.mc, td.train, td.test, train_options(o->toy, run.seed));
    std::vector<StackLayer> stack;
    for (const auto& lp : res.params.layers) stack.push_back({lp, m.mc.layer});
    std::vector<Matrix> inputs;
    std::vector<const RelativeEncoding*> rpes;
    for (std::size_t i = 0; i < std::min(o->samples, td.test.size()); ++i) {
      inputs.push_back(affine(td.test[i].tokens, res.params.W_in, res.params.B_in));
      rpes.push_back(&*td.test[i].rpe);
    }
    const auto table = similarity_progression(stack, inputs, rpes);
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"layer", "mean_cosine", "rank"});
    for (const auto& r : table) run.table->add({fmt(r.layer), fmt(r.mean_cosine), fmt(r.rank)});
    run.results = {{"trained_epochs", o->toy.epochs},
                   {"final_test_acc", res.curve.empty() ? 0.0 : res.curve.back().test_acc}};
    run.verdict("table_has_layers_plus_one_rows", table.size() == stack.size() + 1);
    if (table.size() > 2) run.verdict("final_rank_above_first_layer", table.back().rank > table[1].rank);
  };
}

inline Runner add_pseudoconvexity(Binder& b) {
  struct Opts {
    std::string groups = "qk,rpe,leak", ffn = "linear,gelu", mode = "sft_maxout_leaky";
    std::size_t pairs = 10000, n = 5, d = 4, rpe_dim = 2, vanilla_pairs = 100000;
    double step = 0.05, tol = 1e-8;
  };
  auto o = std::make_shared<Opts>();
  b.add("groups", o->groups, "weight groups: qk, rpe, leak, qk_entry_pair");
  b.add("ffn", o->ffn, "FFN activations to audit");
  b.add("mode", o->mode, "attention mode of the probe");
  b.add("pairs", o->pairs, "pairs per group and activation");
  b.add("n", o->n, "tokens");
  b.add("d", o->d, "width");
  b.add("rpe-dim", o->rpe_dim, "relative channels");
  b.add("step", o->step, "step scale");
  b.add("tol", o->tol, "violation tolerance");
  b.add("vanilla-pairs", o->vanilla_pairs, "pair budget of the softmax entry-pair audit (0 = skip)");
  return [o](Run& run) {
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{
        "probe", "group", "ffn", "gate_restricted", "pairs_tested", "implications_triggered", "violations", "max_violation"});
    const AttnMode mode = parse_attn_mode(o->mode);
    const auto groups = split_list(o->groups);
    for (const auto& g : groups) parse_pc_group(g);
    for (const auto& g : groups)
      for (const auto& act : split_list(o->ffn))
        for (bool restricted : {true, false}) {
          PcConfig pc;
          pc.group = parse_pc_group(g);
          pc.mode = pc.group == PcGroup::QKEntryPair ? AttnMode::SoftmaxDot : mode;
          pc.ffn_act = parse_ffn_activation(act);
          pc.n = o->n;
          pc.d = o->d;
          pc.rpe_dim = o->rpe_dim;
          pc.n_pairs = o->pairs;
          pc.step_scale = o->step;
          pc.tol = o->tol;
          pc.gate_restricted = restricted;
          pc.seed = run.seed;
          const auto r = pseudoconvexity_check(pc);
          run.table->add({to_string(pc.mode), r.group, act, fmt(restricted), fmt(r.pairs_tested),
                          fmt(r.implications_triggered), fmt(r.violations), fmt(r.max_violation)});
          if (restricted) run.verdict("zero_violations_" + g + "_" + act, r.violations == 0);
        }
    const auto orth = leaky_prob_orthant_audit(o->n, o->pairs, o->tol, run.seed);
    run.table->add({"leaky_prob_orthant", "x_and_c", "none", "true", fmt(orth.pairs_tested),
                    fmt(orth.implications_triggered), fmt(orth.violations), fmt(orth.max_violation)});
    run.verdict("zero_violations_leaky_prob_orthant", orth.violations == 0);
    if (o->vanilla_pairs > 0) {
      PcConfig pc;
      pc.group = PcGroup::QKEntryPair;
      pc.mode = AttnMode::SoftmaxDot;
      pc.n_pairs = o->vanilla_pairs;
      pc.step_scale = o->step;
      pc.tol = o->tol;
      pc.gate_restricted = false;
      pc.seed = run.seed;
      const auto r = pseudoconvexity_check(pc);
      run.table->add({"softmax_dot", r.group, "linear", "false", fmt(r.pairs_tested), fmt(r.implications_triggered),
                      fmt(r.violations), fmt(r.max_violation)});
      run.verdict("softmax_entry_pair_violations_found", r.violations > 0);
    }
  };
}

inline Runner add_counterexample(Binder& b) {
  struct Opts {
    double a = 0.0, m = 20.0;
  };
  auto o = std::make_shared<Opts>();
  b.add("a", o->a, "endpoint offset a");
  b.add("m", o->m, "endpoint magnitude M");
  return [o](Run& run) {
    const auto c = vanilla_counterexample(o->a, o->m);
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"point", "w2", "w3", "f"});
    run.table->add({"w_a", fmt(c.w_a[0]), fmt(c.w_a[1]), fmt(c.f_a)});
    run.table->add({"w_mid", fmt(c.w_mid[0]), fmt(c.w_mid[1]), fmt(c.f_mid)});
    run.table->add({"w_b", fmt(c.w_b[0]), fmt(c.w_b[1]), fmt(c.f_b)});
    run.results = {{"w_a", c.w_a}, {"w_mid", c.w_mid}, {"w_b", c.w_b}, {"f_a", c.f_a}, {"f_mid", c.f_mid},
                   {"f_b", c.f_b}, {"gap", c.gap}, {"attention_check", c.attention_check}};
    run.verdict("midpoint_exceeds_endpoints", c.gap > 1e-3);
    run.verdict("collinear", c.w_mid[0] == 0.5 * (c.w_a[0] + c.w_b[0]) && c.w_mid[1] == 0.5 * (c.w_a[1] + c.w_b[1]));
    run.verdict("attention_matches_closed_form", c.attention_check < 1e-12);
  };
}

inline Runner add_gradnorm(Binder& b) {
  struct Opts {
    std::vector<std::size_t> ns{32, 64, 128, 256, 512, 1024};
    std::size_t d = 4, trials = 64;
    double leak = 1.0;
  };
  auto o = std::make_shared<Opts>();
  b.add("ns", o->ns, "token counts (comma-separated, increasing)");
  b.add("d", o->d, "width");
  b.add("trials", o->trials, "trials per n");
  b.add("leak", o->leak, "constant leak term");
  return [o](Run& run) {
    ScalingConfig sc;
    sc.ns = o->ns;
    sc.d = o->d;
    sc.trials = o->trials;
    sc.leak = o->leak;
    sc.seed = run.seed;
    const auto rep = gradnorm_scaling(sc);
    sc.d = 2 * o->d;
    const auto rep2 = gradnorm_scaling(sc);
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"d", "n", "mean_sq_grad_W_V", "mean_sq_grad_W_Q"});
    for (const auto* r : {&rep, &rep2})
      for (std::size_t i = 0; i < r->ns.size(); ++i)
        run.table->add({fmt(r == &rep ? o->d : 2 * o->d), fmt(r->ns[i]), fmt(r->mean_sq_w_v[i]), fmt(r->mean_sq_w_q[i])});
    run.results = {{"slope_W_V", rep.slope_w_v.slope},     {"slope_W_V_ci", rep.slope_w_v.half_width},
                   {"slope_W_Q", rep.slope_w_q.slope},     {"slope_W_Q_ci", rep.slope_w_q.half_width},
                   {"slope_W_V_2d", rep2.slope_w_v.slope}, {"slope_W_Q_2d", rep2.slope_w_q.slope}};
    run.verdict("slope_W_V_in_0.75_1.25", rep.slope_w_v.slope >= 0.75 && rep.slope_w_v.slope <= 1.25);
    run.verdict("slope_W_Q_in_-0.25_0.25", rep.slope_w_q.slope >= -0.25 && rep.slope_w_q.slope <= 0.25);
    run.verdict("slopes_stable_when_d_doubles", std::abs(rep.slope_w_v.slope - rep2.slope_w_v.slope) < 0.1 &&
                                                    std::abs(rep.slope_w_q.slope - rep2.slope_w_q.slope) < 0.1);
  };
}

inline Runner add_bench_time(Binder& b) {
  struct Opts {
    std::size_t n = 1024, d = 64, h = 4, reps = 10, warmup = 2, rpe_dim = 0;
    std::vector<std::size_t> k{32, 64, 128, 256, 512};
    double slack = 1.1;
  };
  auto o = std::make_shared<Opts>();
  b.add("n", o->n, "tokens");
  b.add("k", o->k, "sampled keys (comma-separated)");
  b.add("d", o->d, "width");
  b.add("heads", o->h, "heads");
  b.add("reps", o->reps, "timed repetitions");
  b.add("warmup", o->warmup, "untimed warmup runs");
  b.add("rpe-dim", o->rpe_dim, "relative channels for the sampled layer (0 = none)");
  b.add("slack", o->slack, "allowed ratio of the largest-k runtime to the reference");
  return [o](Run& run) {
    TimingConfig tc;
    tc.n = o->n;
    tc.ks = o->k;
    tc.d = o->d;
    tc.h = o->h;
    tc.reps = o->reps;
    tc.warmup = o->warmup;
    tc.rpe_dim = o->rpe_dim;
    tc.seed = run.seed;
    const auto rows = time_attention(tc);
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"model", "n", "k", "median_s", "mean_s", "min_s"});
    for (const auto& r : rows)
      run.table->add({r.model, fmt(o->n), fmt(r.k), fmt(r.median_s), fmt(r.mean_s), fmt(r.min_s)});
    bool monotone = true;
    for (std::size_t i = 1; i + 1 < rows.size(); ++i) monotone = monotone && rows[i].median_s >= rows[i - 1].median_s;
    run.results = {{"reference_median_s", rows.back().median_s}};
    run.verdict("runtime_nondecreasing_in_k", monotone);
    if (rows.size() >= 2)
      run.verdict("largest_k_within_slack_of_reference", rows[rows.size() - 2].median_s <= o->slack * rows.back().median_s);
  };
}

/// Per-rate counts are checked against the first rate: constant columns must
/// match exactly, proportional ones must satisfy c_i·k_0 = c_0·k_i.
inline Runner add_bench_flops(Binder& b) {
  struct Opts {
    std::size_t n = 1024, d = 256, h = 8, rpe_dim = 2;
    std::vector<double> rates{1.0, 0.5, 0.25, 0.125, 0.0625};
    std::string mode = "sft_maxout_leaky";
  };
  auto o = std::make_shared<Opts>();
  b.add("n", o->n, "tokens");
  b.add("d", o->d, "width");
  b.add("heads", o->h, "heads");
  b.add("rpe-dim", o->rpe_dim, "relative channels");
  b.add("rates", o->rates, "sampling rates k/n (1 = no sampling)");
  b.add("mode", o->mode, "attention mode");
  return [o](Run& run) {
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{
        "rate", "k", "sampling", "blend", "q", "k_proj", "v", "c", "relative", "w_cat", "remainder", "mlp", "total"});
    std::vector<FlopBreakdown> fs;
    std::vector<std::uint64_t> keys;
    for (double rate : o->rates) {
      LayerConfig cfg;
      cfg.d = o->d;
      cfg.h = o->h;
      cfg.rpe_dim = o->rpe_dim;
      cfg.mode = parse_attn_mode(o->mode);
      const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(o->n)));
      cfg.k = k >= o->n ? LayerConfig::kAll : k;
      const auto f = flop_count(cfg, o->n);
      fs.push_back(f);
      keys.push_back(std::min(k, o->n));
      run.table->add({fmt(rate), fmt(keys.back()), fmt(static_cast<std::size_t>(f.sampling)), fmt(static_cast<std::size_t>(f.blend)),
                      fmt(static_cast<std::size_t>(f.q)), fmt(static_cast<std::size_t>(f.k)), fmt(static_cast<std::size_t>(f.v)),
                      fmt(static_cast<std::size_t>(f.c)), fmt(static_cast<std::size_t>(f.relative)),
                      fmt(static_cast<std::size_t>(f.w_cat)), fmt(static_cast<std::size_t>(f.remainder)),
                      fmt(static_cast<std::size_t>(f.mlp)), fmt(static_cast<std::size_t>(f.total()))});
    }
    auto constant = [&](auto field) {
      for (const auto& f : fs)
        if (field(f) != field(fs.front())) return false;
      return true;
    };
    auto proportional = [&](auto field) {
      for (std::size_t i = 0; i < fs.size(); ++i)
        if (field(fs[i]) * keys.front() != field(fs.front()) * keys[i]) return false;
      return true;
    };
    run.verdict("q_constant", constant([](const FlopBreakdown& f) { return f.q; }));
    run.verdict("sampling_constant", constant([](const FlopBreakdown& f) { return f.sampling; }));
    run.verdict("k_proportional", proportional([](const FlopBreakdown& f) { return f.k; }));
    run.verdict("v_proportional", proportional([](const FlopBreakdown& f) { return f.v; }));
    run.verdict("c_proportional", proportional([](const FlopBreakdown& f) { return f.c; }));
    run.verdict("relative_proportional", proportional([](const FlopBreakdown& f) { return f.relative; }));
  };
}

inline Runner add_rotation(Binder& b) {
  struct Opts {
    std::size_t clouds = 20, rotations = 10, d = 16, h = 2, layers = 2, k = 32, n_tokens = 128;
    double tol = 1e-6;
  };
  auto o = std::make_shared<Opts>();
  b.add("clouds", o->clouds, "point clouds");
  b.add("rotations", o->rotations, "random rotations per cloud");
  b.add("d", o->d, "width");
  b.add("heads", o->h, "heads");
  b.add("layers", o->layers, "layers");
  b.add("k", o->k, "sampled keys");
  b.add("n-tokens", o->n_tokens, "points per cloud");
  b.add("tol", o->tol, "max absolute output difference");
  return [o](Run& run) {
    ModelConfig mc;
    mc.in_dim = 1;
    mc.n_classes = 4;
    mc.layers = o->layers;
    mc.layer.d = o->d;
    mc.layer.h = o->h;
    mc.layer.k = o->k;
    mc.layer.rpe_dim = 2;
    Rng rng(run.seed);
    Rng init = rng.split("init");
    const ModelParams p = init_model(init, mc);
    ToyDatasetSpec spec;
    spec.n_tokens = o->n_tokens;
    spec.n_train = o->clouds;
    spec.n_test = 0;
    spec.seed = run.seed;
    const auto clouds = gen_toy_shapes(spec).train;
    run.table = std::make_unique<CsvTable>(std::vector<std::string>{"cloud", "label", "max_abs_diff"});
    double worst = 0.0;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      const auto r = rotation_invariance(p, mc, {clouds[i]}, o->rotations, run.seed + i);
      run.table->add({fmt(i), fmt(clouds[i].label), fmt(r.max_abs_diff)});
      worst = std::max(worst, r.max_abs_diff);
    }
    run.results = {{"max_abs_diff", worst}};
    run.verdict("outputs_rotation_invariant", worst < o->tol);
  };
}

// ---------------------------------------------------------------------------

/// Entry point. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sampling transformer experiments"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  struct Sub {
    CLI::App* app;
    std::unique_ptr<Binder> binder;
    Runner runner;
    std::uint64_t seed = 0;
    std::string out_dir = default_out_dir();
    std::string config_path;
  };
  std::vector<std::unique_ptr<Sub>> subs;
  auto make = [&](const std::string& name, const std::string& desc, Runner (*add)(Binder&)) {
    auto s = std::make_unique<Sub>();
    s->app = app.add_subcommand(name, desc);
    s->binder = std::make_unique<Binder>(s->app);
    s->binder->add("seed", s->seed, "base random seed");
    s->app->add_option("--out", s->out_dir, "output directory (default: $SFT_OUT_DIR or sft_out)");
    s->app->add_option("--config", s->config_path, "flat JSON object of option values");
    s->runner = add(*s->binder);
    subs.push_back(std::move(s));
  };
  make("gradcheck", "finite-difference audit of the layer backward pass", add_gradcheck);
  make("rank-progression", "numerical rank through random stacks", add_rank);
  make("similarity", "cosine similarity and rank per layer of a trained toy model", add_similarity);
  make("pseudoconvexity", "gate-restricted pseudoconvexity audit", add_pseudoconvexity);
  make("counterexample", "softmax attention counterexample triple", add_counterexample);
  make("gradnorm-scaling", "gradient-norm growth with token count", add_gradnorm);
  make("bench-time", "single-threaded layer timing against full softmax attention", add_bench_time);
  make("bench-flops", "operation counts per submodule across sampling rates", add_bench_flops);
  make("train-toy", "learning curves on toy tasks", add_train);
  make("rotation-invariance", "output invariance under rotations of the input cloud", add_rotation);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    app.exit(e, out, err);
    return 2;
  }

  for (auto& s : subs) {
    if (!s->app->parsed()) continue;
    Run run;
    run.name = s->app->get_name();
    run.log = &out;
    try {
      if (!s->config_path.empty()) {
        std::ifstream in(s->config_path);
        if (!in) throw UsageError("cannot open config file " + s->config_path);
        json cfg;
        try {
          cfg = json::parse(in);
        } catch (const json::exception& e) {
          throw UsageError(std::string("config file is not valid JSON: ") + e.what());
        }
        s->binder->apply(cfg);
      }
      run.seed = s->seed;
      run.out_dir = s->out_dir;
      run.config = s->binder->resolved();
      s->runner(run);
      run.write();
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n" << s->app->help();
      return 2;
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    }
    out << (run.passed() ? "all verdicts passed" : "some verdicts failed") << "; wrote " << run.out_dir << "/"
        << run.name << ".{csv,json}\n";
    return run.passed() ? 0 : 1;
  }
  return 2;
}

}  // namespace sft::cli
