#pragma once

// The `ulpt` command-line tool. Every subcommand writes, under the output
// root (--out, else $ULPT_OUT_DIR, else ./ulpt_out):
//
//   <cmd>_config.json   the resolved option values, replayable with
//                       `ulpt replay --config <cmd>_config.json`
//   <cmd>_summary.json  canonical results
//   <cmd>_<table>.csv   tables of the summary, with --format csv
//
// Exit codes: 0 ok, 2 configuration error, 3 diverged run, 4 io/format error.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ulpt/ablation.hpp"
#include "ulpt/analysis.hpp"
#include "ulpt/error.hpp"
#include "ulpt/gradcheck.hpp"
#include "ulpt/jl_lab.hpp"
#include "ulpt/registry.hpp"
#include "ulpt/reparam.hpp"
#include "ulpt/toy_task.hpp"
#include "ulpt/training.hpp"

namespace ulpt::cli {

using json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDiverged = 3, kIoError = 4 };

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<json>> rows;

  json to_json() const {
    json arr = json::array();
    for (const auto& row : rows) {
      json obj = json::object();
      for (std::size_t c = 0; c < columns.size(); ++c) obj[columns[c]] = row[c];
      arr.push_back(std::move(obj));
    }
    return arr;
  }

  std::string to_csv() const {
    std::ostringstream os;
    for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
    os << '\n';
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c) os << ',';
        const json& v = row[c];
        if (v.is_null()) continue;
        if (v.is_string()) {
          const auto s = v.get<std::string>();
          if (s.find_first_of(",\"\n") == std::string::npos) {
            os << s;
          } else {
            os << '"';
            for (char ch : s) os << (ch == '"' ? "\"\"" : std::string(1, ch));
            os << '"';
          }
        } else {
          os << v.dump();
        }
      }
      os << '\n';
    }
    return os.str();
  }
};

struct Output {
  json summary = json::object();
  std::vector<Table> tables;      // also embedded in the summary under their names
  std::optional<Table> trace;     // written as <cmd>_trace.csv regardless of format
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;  // extra artifacts
};

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// Non-finite numbers become explicit nulls.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string default_out_dir() {
  const char* env = std::getenv("ULPT_OUT_DIR");
  return env && *env ? std::string(env) : std::string("ulpt_out");
}

// ---------------------------------------------------------------------------
// Options with a JSON echo of their resolved values
// ---------------------------------------------------------------------------

class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  CLI::App* app() const { return app_; }

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    echo_.push_back([name, &var](json& j) { j[name] = var; });
    return app_->add_option("--" + name, var, desc)->capture_default_str();
  }

  template <class T>
  CLI::Option* add(const std::string& name, std::optional<T>& var, const std::string& desc) {
    echo_.push_back([name, &var](json& j) { j[name] = var ? json(*var) : json(nullptr); });
    return app_->add_option("--" + name, var, desc);
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    echo_.push_back([name, &var](json& j) { j[name] = var; });
    return app_->add_flag("--" + name + ",!--no-" + name, var, desc);
  }

  json echo() const {
    json j = json::object();
    for (const auto& w : echo_) w(j);
    return j;
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> echo_;
};

// ---------------------------------------------------------------------------
// Shared training setup
// ---------------------------------------------------------------------------

struct TrainSetup {
  std::string task = "quadratic";
  std::uint64_t run_seed = 1;
  std::uint64_t target_seed = 2;
  std::uint64_t task_seed = 5;
  std::string lr = "auto";
  std::optional<std::string> optimizer;
  std::optional<std::string> schedule;
  std::optional<std::size_t> warmup;
  std::optional<std::size_t> steps;
  bool line_search = false;
  double weight_decay = 0.0;
  std::size_t eval_every = 0;
  double embed_offset = 3.0;
  double marker_scale = 3.0;
  std::size_t batch_size = 16;
  std::size_t train_size = 128;
  std::size_t eval_size = 1000;
};

inline void add_train_flags(Flags& f, TrainSetup& s, const std::string& default_task) {
  s.task = default_task;
  f.add("task", s.task, "quadratic | toy")->check(CLI::IsMember({"quadratic", "toy"}));
  f.add("run-seed", s.run_seed, "seed of the trained initialization");
  f.add("target-seed", s.target_seed, "seed of the quadratic target");
  f.add("task-seed", s.task_seed, "seed of the toy model and its data");
  f.add("lr", s.lr, "peak learning rate, or 'auto' (0.9/curvature on quadratic, 0.03 on toy)");
  f.add("optimizer", s.optimizer, "gd | adamw")->check(CLI::IsMember({"gd", "adamw"}));
  f.add("schedule", s.schedule, "linear | constant")->check(CLI::IsMember({"linear", "constant"}));
  f.add("warmup", s.warmup, "warmup steps");
  f.add("steps", s.steps, "total steps");
  f.flag("line-search", s.line_search, "Armijo backtracking (gd only)");
  f.add("weight-decay", s.weight_decay, "AdamW decoupled weight decay");
  f.add("eval-every", s.eval_every, "held-out evaluation interval on toy (0: end only)");
  f.add("embed-offset", s.embed_offset, "toy: per-dimension embedding offset");
  f.add("marker-scale", s.marker_scale, "toy: norm multiplier of marker embeddings");
  f.add("batch-size", s.batch_size, "toy: minibatch size (0: full batch)");
  f.add("train-size", s.train_size, "toy: training examples");
  f.add("eval-size", s.eval_size, "toy: held-out examples");
}

// Fills task-dependent defaults in place so the echo records them.
inline void resolve(TrainSetup& s) {
  const bool toy = s.task == "toy";
  if (!s.optimizer) s.optimizer = toy ? "adamw" : "gd";
  if (!s.schedule) s.schedule = toy ? "linear" : "constant";
  if (!s.warmup) s.warmup = toy ? 200 : 0;
  if (!s.steps) s.steps = toy ? 2000 : 5000;
  if (s.lr != "auto") {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s.lr, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.lr.size()) throw ConfigError("--lr must be a number or 'auto'");
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("--lr must be >= 0");
  }
}

inline std::size_t toy_default_d() { return toy::ToyModelConfig{}.d; }

// Builds one training run per prompt config. Owns the toy task when used.
class Trainer {
 public:
  explicit Trainer(const TrainSetup& s, std::size_t d) : s_(s) {
    if (s_.task == "toy") {
      toy::ToyTaskConfig tc;
      tc.model.d = d;
      tc.model.embed_offset = s_.embed_offset;
      tc.model.marker_scale = s_.marker_scale;
      tc.batch_size = s_.batch_size;
      tc.train_size = s_.train_size;
      tc.eval_size = s_.eval_size;
      task_ = std::make_unique<toy::ToyTask>(tc, Seed{s_.task_seed});
    }
  }

  const toy::ToyTask* task() const { return task_.get(); }

  OptimizerConfig optimizer() const {
    OptimizerConfig o;
    o.kind = optimizer_from_string(*s_.optimizer);
    o.line_search = s_.line_search;
    o.weight_decay = s_.weight_decay;
    return o;
  }

  ScheduleConfig schedule(double lr) const {
    ScheduleConfig sc;
    sc.peak_lr = lr;
    sc.warmup_steps = *s_.warmup;
    sc.total_steps = *s_.steps;
    sc.kind = *s_.schedule == "constant" ? ScheduleKind::constant : ScheduleKind::linear_warmup_decay;
    return sc;
  }

  // Quadratic objective whose target is reachable by the ULPT family at the
  // config's (n, r, d, seed); other modes are scored against the same target.
  LossFn quadratic_loss(const PromptConfig& c) const {
    PromptConfig tc = c;
    if (!is_low_rank(c.mode) || trains_projection(c.mode)) {
      tc.mode = Mode::ulpt;
      tc.r = std::clamp<std::size_t>(c.r, 1, c.d);
    }
    Matrix target = make_reachable_target(tc, Seed{s_.target_seed}).target;
    return [target = std::move(target)](const Matrix& e, std::size_t) { return quadratic_pl_loss(e, target); };
  }

  TrainRun operator()(const PromptConfig& c) const {
    const Seed run_seed{s_.run_seed};
    if (task_) {
      const double lr = s_.lr == "auto" ? 0.03 : std::stod(s_.lr);
      return toy::toy_task_run(*task_, c, optimizer(), schedule(lr), run_seed, s_.eval_every);
    }
    const LossFn loss = quadratic_loss(c);
    const PromptState start = init_state(c, run_seed);
    const double lr = s_.lr == "auto" ? descent_safe_lr(start, loss, derive_seed(run_seed, 7)) : std::stod(s_.lr);
    return train_from(start, loss, optimizer(), schedule(lr), run_seed);
  }

 private:
  TrainSetup s_;
  std::unique_ptr<toy::ToyTask> task_;
};

inline Table trace_table(const TrainRun& run) {
  Table t{"trace", {"step", "lr", "loss", "eval_metric"}, {}};
  for (const auto& row : run.trace) t.rows.push_back({row.step, num(row.lr), num(row.loss), opt_json(row.eval_metric)});
  return t;
}

inline std::uint32_t checkpoint_crc(const std::vector<std::uint8_t>& bytes) {
  const auto tail = std::span<const std::uint8_t>(bytes).last(kCheckpointTrailerBytes);
  return static_cast<std::uint32_t>(tail[0]) | static_cast<std::uint32_t>(tail[1]) << 8 |
         static_cast<std::uint32_t>(tail[2]) << 16 | static_cast<std::uint32_t>(tail[3]) << 24;
}

inline json run_json(const TrainRun& run) {
  json j;
  j["mode"] = std::string(to_string(run.prompt.mode));
  j["n"] = run.prompt.n;
  j["r"] = run.prompt.r;
  j["d"] = run.prompt.d;
  j["param_count"] = trainable_param_count(run.prompt);
  j["updated_param_count"] = run.updated_param_count;
  j["steps"] = run.trace.size();
  j["lr"] = num(run.schedule.peak_lr);
  j["initial_loss"] = run.trace.empty() ? opt_json(run.final_loss) : num(run.trace.front().loss);
  j["final_loss"] = opt_json(run.final_loss);
  j["final_eval_metric"] = opt_json(run.final_eval_metric);
  j["clamp_events"] = run.clamp_event_count;
  j["line_search_backtracks"] = run.line_search_backtracks;
  return j;
}

inline PromptConfig prompt_config(const std::string& mode, std::size_t n, std::size_t r, std::size_t d,
                                  std::uint64_t seed) {
  PromptConfig c{n, r, d, Seed{seed}, mode_from_string(mode)};
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string mode = "ulpt";
  std::size_t n = 8;
  std::size_t r = 4;
  std::optional<std::size_t> d;
  std::uint64_t seed = 0;
  TrainSetup setup;
};

inline Output cmd_train(TrainArgs& a) {
  const std::size_t d = *a.d;
  const PromptConfig cfg = prompt_config(a.mode, a.n, a.r, d, a.seed);
  const Trainer trainer(a.setup, d);
  const TrainRun run = trainer(cfg);
  Output out;
  out.summary["command"] = "train";
  out.summary["task"] = a.setup.task;
  out.summary["seeds"] = {{"projection", a.seed},
                          {"run", a.setup.run_seed},
                          {"target", a.setup.target_seed},
                          {"task", a.setup.task_seed}};
  const json rj = run_json(run);
  for (const auto& [k, v] : rj.items()) out.summary[k] = v;
  if (a.setup.task == "quadratic") {
    out.summary["curvature"] = run.schedule.peak_lr > 0.0 && a.setup.lr == "auto" ? num(0.9 / run.schedule.peak_lr)
                                                                                    : json(nullptr);
    out.summary["monotone"] = is_monotone_nonincreasing(run.trace);
  }
  out.summary["diverged"] = false;
  const auto bytes = serialize(make_checkpoint(run.final_state));
  out.summary["checkpoint_crc"] = checkpoint_crc(bytes);
  out.files.emplace_back("prompt.ulpt", bytes);
  out.trace = trace_table(run);
  return out;
}

struct AblateArgs {
  std::size_t n = 4;
  std::size_t r = 2;
  std::optional<std::size_t> d;
  std::uint64_t seed = 11;
  std::vector<std::string> modes;
  std::vector<std::size_t> ranks;
  bool full_rank = true;
  bool counts_only = false;
  std::size_t threads = 1;
  TrainSetup setup;
};

inline Output cmd_ablate(AblateArgs& a) {
  const std::size_t d = *a.d;
  std::vector<Mode> modes;
  for (const auto& m : a.modes) modes.push_back(mode_from_string(m));
  Output out;
  out.summary["command"] = "ablate";

  if (a.counts_only) {
    Table t{"counts", {"mode", "n", "r", "d", "param_count"}, {}};
    const std::vector<std::size_t> ranks = a.ranks.empty() ? std::vector<std::size_t>{a.r} : a.ranks;
    for (Mode m : modes) {
      if (!is_low_rank(m)) {
        t.rows.push_back({std::string(to_string(m)), a.n, nullptr, d, param_count(m, a.n, 0, d)});
        continue;
      }
      for (std::size_t r : ranks) t.rows.push_back({std::string(to_string(m)), a.n, r, d, param_count(m, a.n, r, d)});
    }
    out.summary["n"] = a.n;
    out.summary["d"] = d;
    out.tables.push_back(std::move(t));
    return out;
  }

  std::vector<PromptConfig> configs;
  for (Mode m : modes) configs.push_back(prompt_config(std::string(to_string(m)), a.n, a.r, d, a.seed));
  if (a.full_rank && a.r != d) configs.push_back(prompt_config("ulpt", a.n, d, d, a.seed));
  const Trainer trainer(a.setup, d);
  const auto rows = ablation_suite(configs, std::cref(trainer), a.threads);

  Table t{"ablation", {"mode", "r", "param_count", "final_loss", "eval_metric", "clamp_events"}, {}};
  for (const auto& row : rows)
    t.rows.push_back({std::string(to_string(row.config.mode)), is_low_rank(row.config.mode) ? json(row.config.r) : json(nullptr),
                      row.param_count, num(row.final_loss), opt_json(row.eval_metric), row.clamp_events});
  out.summary["task"] = a.setup.task;
  out.summary["n"] = a.n;
  out.summary["d"] = d;
  out.summary["seeds"] = {{"projection", a.seed}, {"run", a.setup.run_seed}, {"target", a.setup.target_seed}, {"task", a.setup.task_seed}};
  out.tables.push_back(std::move(t));
  return out;
}

struct JlArgs {
  std::vector<std::string> what{"rank"};
  double epsilon = 0.5;
  double delta = 0.05;
  std::size_t n = 100;
  double c = 1.0;
  std::size_t points = 64;
  std::size_t d = 256;
  std::size_t r = 128;
  std::size_t distortion_seeds = 1;
  std::vector<std::size_t> tail_ranks{1, 4, 16, 64};
  std::vector<std::size_t> fit_ranks{4, 8, 16, 32};
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
};

inline Output cmd_jl(JlArgs& a) {
  Output out;
  out.summary["command"] = "jl";
  for (const auto& w : a.what) {
    if (w == "rank") {
      const jl::JlQuery q{a.epsilon, a.delta, a.n, a.c};
      out.summary["rank"] = {{"epsilon", a.epsilon}, {"delta", a.delta}, {"n", a.n}, {"c", a.c},
                             {"bound", num(jl::required_rank_bound(q))}, {"required_rank", jl::required_rank(q)}};
    } else if (w == "distortion") {
      if (a.distortion_seeds == 0) throw ConfigError("--distortion-seeds must be >= 1");
      Table t{"distortion", {"seed_index", "pairs", "skipped", "max", "mean", "violation_fraction"}, {}};
      std::vector<double> fractions;
      for (std::size_t i = 0; i < a.distortion_seeds; ++i) {
        const Seed s = derive_seed(Seed{a.seed}, i);
        const Matrix pts = gaussian_matrix(derive_seed(s, 0), a.points, a.d, 1.0);
        const auto proj = sample_full_rank_projection(derive_seed(s, 1), a.r, a.d);
        const auto rep = jl::distortion_report(pts, proj, a.epsilon);
        fractions.push_back(rep.violation_fraction);
        t.rows.push_back({i, rep.pair_count, rep.skipped_pairs, num(rep.max_distortion), num(rep.mean_distortion),
                          num(rep.violation_fraction)});
      }
      out.summary["distortion_median_violation"] = num(analysis::percentile(fractions, 50.0));
      out.tables.push_back(std::move(t));
    } else if (w == "tail") {
      Table t{"tail", {"r", "trials", "tail"}, {}};
      for (std::size_t i = 0; i < a.tail_ranks.size(); ++i)
        t.rows.push_back({a.tail_ranks[i], a.trials,
                          num(jl::tail_estimate(a.d, a.tail_ranks[i], a.epsilon, a.trials, derive_seed(Seed{a.seed}, 100 + i)))});
      out.tables.push_back(std::move(t));
    } else if (w == "fit") {
      const auto fit = jl::fit_c(a.d, a.epsilon, a.fit_ranks, a.trials, Seed{a.seed});
      json tails = json::array();
      for (std::size_t i = 0; i < fit.ranks.size(); ++i) tails.push_back({{"r", fit.ranks[i]}, {"tail", num(fit.tails[i])}});
      out.summary["fit"] = {{"c", num(fit.c)}, {"tails", tails}};
    } else {
      throw ConfigError("--what: unknown item '" + w + "'");
    }
  }
  return out;
}

struct GradcheckArgs {
  std::vector<std::string> modes;
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  double h = 1e-5;
  double min_abs = 1e-8;
  std::size_t max_n = 8;
  std::size_t max_r = 4;
  std::size_t max_d = 16;
  double tolerance = 1e-5;
};

inline Output cmd_gradcheck(GradcheckArgs& a) {
  GradCheckOptions opt;
  opt.instances = a.instances;
  opt.h = a.h;
  opt.min_abs = a.min_abs;
  opt.max_n = a.max_n;
  opt.max_r = a.max_r;
  opt.max_d = a.max_d;
  Output out;
  Table t{"gradcheck", {"mode", "instances", "coords_checked", "coords_skipped", "max_rel_error", "pass"}, {}};
  bool all = true;
  for (std::size_t i = 0; i < a.modes.size(); ++i) {
    const Mode m = mode_from_string(a.modes[i]);
    const auto r = gradcheck_mode(m, derive_seed(Seed{a.seed}, static_cast<std::uint64_t>(m)), opt);
    const bool pass = r.max_rel_error < a.tolerance;
    all = all && pass;
    t.rows.push_back({a.modes[i], r.instances, r.coords_checked, r.coords_skipped, num(r.max_rel_error), pass});
  }
  out.summary["command"] = "gradcheck";
  out.summary["tolerance"] = a.tolerance;
  out.summary["pass"] = all;
  out.tables.push_back(std::move(t));
  return out;
}

inline PromptCheckpoint load_input_checkpoint(const std::string& checkpoint, const std::string& run_dir) {
  if (!checkpoint.empty() && !run_dir.empty()) throw ConfigError("give either --checkpoint or --run, not both");
  if (!checkpoint.empty()) return load(checkpoint);
  if (!run_dir.empty()) return load(std::filesystem::path(run_dir) / "train_prompt.ulpt");
  throw ConfigError("one of --checkpoint or --run is required");
}

struct AnalyzeDimsArgs {
  std::string checkpoint;
  std::string run;
  std::size_t k = 20;
  std::vector<double> percentiles{25.0, 75.0};
  std::uint64_t analysis_seed = 0;
};

inline Output cmd_analyze_dims(AnalyzeDimsArgs& a) {
  const PromptCheckpoint ck = load_input_checkpoint(a.checkpoint, a.run);
  const Matrix prompt = reconstruct(ck).forward();
  const auto dims = analysis::select_dimensions(prompt.cols(), a.k, Seed{a.analysis_seed});
  const auto stats = analysis::dimension_stats(prompt, dims, a.percentiles);
  Table t{"dims", {"dim", "mean", "min", "max"}, {}};
  for (double q : a.percentiles) {
    std::ostringstream name;
    name << 'p' << q;
    t.columns.push_back(name.str());
  }
  for (const auto& st : stats) {
    std::vector<json> row{st.dim, num(st.mean), num(st.min), num(st.max)};
    for (double v : st.percentiles) row.push_back(num(v));
    t.rows.push_back(std::move(row));
  }
  Output out;
  out.summary["command"] = "analyze-dims";
  out.summary["mode"] = std::string(to_string(ck.mode));
  out.summary["n"] = ck.n;
  out.summary["d"] = ck.d;
  if (!dims.empty()) {
    const auto spread = analysis::spread_summary(prompt, dims);
    out.summary["inter_dimension_spread"] = num(spread.inter_dimension);
    out.summary["intra_dimension_spread"] = num(spread.intra_dimension);
  } else {
    out.summary["inter_dimension_spread"] = nullptr;
    out.summary["intra_dimension_spread"] = nullptr;
  }
  out.tables.push_back(std::move(t));
  return out;
}

struct AnalyzeAlignArgs {
  std::vector<std::string> checkpoints;
  std::vector<std::size_t> ranks;
  std::size_t n = 4;
  std::optional<std::size_t> d;
  std::uint64_t seed = 11;
  std::size_t threads = 1;
  TrainSetup setup;
};

inline json similarity_json(const analysis::SimilarityMatrix& m) {
  json rows = json::array();
  for (const auto& r : m) {
    json row = json::array();
    for (const auto& v : r) row.push_back(opt_json(v));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Output cmd_analyze_align(AnalyzeAlignArgs& a) {
  std::vector<std::string> labels;
  std::vector<Vector> shifts, scales;
  if (!a.checkpoints.empty() && !a.ranks.empty()) throw ConfigError("give either --checkpoints or --ranks, not both");
  if (!a.checkpoints.empty()) {
    for (const auto& path : a.checkpoints) {
      const PromptCheckpoint ck = load(path);
      const PromptState st = reconstruct(ck);
      labels.push_back(std::filesystem::path(path).filename().string());
      shifts.push_back(has_shift(ck.mode) ? st.params.b : Vector(ck.d, 0.0));
      scales.push_back(has_scale(ck.mode) ? st.params.s : Vector(ck.d, 0.0));
    }
  } else if (!a.ranks.empty()) {
    const std::size_t d = *a.d;
    std::vector<PromptConfig> configs;
    for (std::size_t r : a.ranks) configs.push_back(prompt_config("ulpt", a.n, r, d, a.seed));
    const Trainer trainer(a.setup, d);
    const auto runs = run_all(configs, std::cref(trainer), a.threads);
    for (const auto& run : runs) {
      labels.push_back("r=" + std::to_string(run.prompt.r));
      shifts.push_back(run.final_state.params.b);
      scales.push_back(run.final_state.params.s);
    }
  } else {
    throw ConfigError("one of --checkpoints or --ranks is required");
  }
  if (labels.size() < 2) throw ConfigError("analyze-align needs at least 2 prompts");
  for (const auto& v : shifts)
    if (v.size() != shifts.front().size()) throw DimensionError("analyze-align: prompts differ in d");

  const auto shift_sim = analysis::similarity_matrix(shifts);
  const auto scale_sim = analysis::similarity_matrix(scales);
  const auto shift_mean = analysis::mean_off_diagonal(shift_sim);
  const auto scale_mean = analysis::mean_off_diagonal(scale_sim);
  Output out;
  out.summary["command"] = "analyze-align";
  out.summary["labels"] = labels;
  out.summary["shift_similarity"] = similarity_json(shift_sim);
  out.summary["scale_similarity"] = similarity_json(scale_sim);
  out.summary["shift_mean_off_diagonal"] = opt_json(shift_mean);
  out.summary["scale_mean_off_diagonal"] = opt_json(scale_mean);
  out.summary["shift_exceeds_scale"] =
      shift_mean && scale_mean ? json(*shift_mean > *scale_mean) : json(nullptr);

  Table t{"pairs", {"a", "b", "shift_cosine", "scale_cosine"}, {}};
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      t.rows.push_back({labels[i], labels[j], opt_json(shift_sim[i][j]), opt_json(scale_sim[i][j])});
  out.tables.push_back(std::move(t));
  return out;
}

struct RegistryArgs {
  std::string action = "report";
  std::string dir;
  std::string task_id;
  std::string checkpoint;
  std::string mode = "ulpt";
  std::size_t n = 100;
  std::size_t r = 2;
  std::size_t d = 768;
  std::size_t tasks = 1;
  std::uint64_t seed = 0;
};

inline json report_json(const RegistryReport& rep, Table& t) {
  json j;
  j["task_count"] = rep.task_count;
  j["total_params"] = rep.total_params;
  j["vanilla_total_params"] = rep.vanilla_total_params;
  j["savings_ratio"] = opt_json(rep.savings_ratio);
  for (const auto& e : rep.tasks)
    t.rows.push_back({e.task_id, std::string(to_string(e.mode)), e.n, e.r, e.d, e.param_count, e.vanilla_param_count});
  return j;
}

inline Output cmd_registry(RegistryArgs& a) {
  TaskRegistry reg;
  const auto need_dir = [&] {
    if (a.dir.empty()) throw ConfigError("--dir is required for registry " + a.action);
  };
  if (a.action == "simulate") {
    const PromptConfig base = prompt_config(a.mode, a.n, a.r, a.d, a.seed);
    for (std::size_t i = 0; i < a.tasks; ++i) {
      PromptConfig c = base;
      c.seed = Seed{a.seed + i};
      reg.add("task-" + std::to_string(i), make_checkpoint(init_state(c, derive_seed(Seed{a.seed}, i))));
    }
  } else if (a.action == "report") {
    need_dir();
    reg = TaskRegistry::load_dir(a.dir);
  } else if (a.action == "add") {
    need_dir();
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required for registry add");
    if (std::filesystem::exists(std::filesystem::path(a.dir) / "manifest.json")) reg = TaskRegistry::load_dir(a.dir);
    reg.add(a.task_id, load(a.checkpoint));
    reg.save_dir(a.dir);
  } else if (a.action == "remove") {
    need_dir();
    reg = TaskRegistry::load_dir(a.dir);
    reg.remove(a.task_id);
    std::filesystem::remove(std::filesystem::path(a.dir) / (a.task_id + ".ulpt"));
    reg.save_dir(a.dir);
  } else {
    throw ConfigError("unknown registry action '" + a.action + "'");
  }
  Output out;
  Table t{"tasks", {"task_id", "mode", "n", "r", "d", "param_count", "vanilla_param_count"}, {}};
  out.summary["command"] = "registry";
  out.summary["action"] = a.action;
  const json rep = report_json(registry_report(reg), t);
  for (const auto& [k, v] : rep.items()) out.summary[k] = v;
  out.tables.push_back(std::move(t));
  return out;
}

struct TunePvsZArgs {
  std::vector<std::size_t> budgets{1736, 3136, 7936, 27136};
  std::size_t n = 100;
  std::optional<std::size_t> d;
  std::uint64_t seed = 11;
  bool train = false;
  std::size_t threads = 1;
  TrainSetup setup;
};

inline Output cmd_tune_p_vs_z(TunePvsZArgs& a) {
  const std::size_t d = *a.d;
  auto solve = [&](Mode m, std::size_t budget) -> std::optional<std::size_t> {
    try {
      return solve_rank_for_budget(m, budget, a.n, d);
    } catch (const InfeasibleBudgetError&) {
      return std::nullopt;
    }
  };
  Table t{"budgets",
          {"budget", "tune_z_rank", "tune_z_params", "tune_p_rank", "tune_p_params", "tune_z_loss", "tune_p_loss",
           "tune_z_eval", "tune_p_eval"},
          {}};
  std::vector<PromptConfig> configs;
  std::vector<std::pair<std::optional<std::size_t>, std::optional<std::size_t>>> slots;
  for (std::size_t b : a.budgets) {
    const auto rz = solve(Mode::ulpt, b);
    const auto rp = solve(Mode::tune_p_frozen_z, b);
    std::pair<std::optional<std::size_t>, std::optional<std::size_t>> slot;
    if (a.train && rz && *rz <= d) {
      slot.first = configs.size();
      configs.push_back(prompt_config("ulpt", a.n, *rz, d, a.seed));
    }
    if (a.train && rp && *rp <= d) {
      slot.second = configs.size();
      configs.push_back(prompt_config("tune_p_frozen_z", a.n, *rp, d, a.seed));
    }
    slots.push_back(slot);
  }
  std::vector<TrainRun> runs;
  if (!configs.empty()) {
    const Trainer trainer(a.setup, d);
    runs = run_all(configs, std::cref(trainer), a.threads);
  }
  for (std::size_t i = 0; i < a.budgets.size(); ++i) {
    const std::size_t b = a.budgets[i];
    const auto rz = solve(Mode::ulpt, b);
    const auto rp = solve(Mode::tune_p_frozen_z, b);
    auto loss = [&](std::optional<std::size_t> slot) { return slot ? opt_json(runs[*slot].final_loss) : json(nullptr); };
    auto eval = [&](std::optional<std::size_t> slot) {
      return slot ? opt_json(runs[*slot].final_eval_metric) : json(nullptr);
    };
    t.rows.push_back({b, rz ? json(*rz) : json(nullptr), rz ? json(param_count(Mode::ulpt, a.n, *rz, d)) : json(nullptr),
                      rp ? json(*rp) : json(nullptr),
                      rp ? json(param_count(Mode::tune_p_frozen_z, a.n, *rp, d)) : json(nullptr), loss(slots[i].first),
                      loss(slots[i].second), eval(slots[i].first), eval(slots[i].second)});
  }
  Output out;
  out.summary["command"] = "tune-p-vs-z";
  out.summary["n"] = a.n;
  out.summary["d"] = d;
  out.summary["trained"] = a.train;
  out.tables.push_back(std::move(t));
  return out;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

inline std::vector<std::string> all_mode_names() {
  std::vector<std::string> out;
  for (Mode m : kAllModes) out.emplace_back(to_string(m));
  return out;
}

inline void write_outputs(const std::filesystem::path& dir, const std::string& cmd, const std::string& format,
                          const json& echo, Output& out, std::ostream& os) {
  std::filesystem::create_directories(dir);
  json config;
  config["command"] = cmd;
  config["options"] = echo;
  write_text(dir / (cmd + "_config.json"), config.dump(2) + "\n");
  for (const auto& t : out.tables) out.summary[t.name] = t.to_json();
  const std::string summary = out.summary.dump(2) + "\n";
  write_text(dir / (cmd + "_summary.json"), summary);
  if (out.trace) write_text(dir / (cmd + "_trace.csv"), out.trace->to_csv());
  for (const auto& [name, bytes] : out.files) write_file_atomic(dir / (cmd + "_" + name), bytes);
  if (format == "csv") {
    for (const auto& t : out.tables) write_text(dir / (cmd + "_" + t.name + ".csv"), t.to_csv());
    if (!out.tables.empty()) os << out.tables.front().to_csv();
    else if (out.trace) os << out.trace->to_csv();
  } else {
    os << summary;
  }
}

// Rebuilds the argument list of a run from its config echo.
inline std::vector<std::string> replay_args(const json& config) {
  std::vector<std::string> args{config.at("command").get<std::string>()};
  for (const auto& [key, value] : config.at("options").items()) {
    if (value.is_null()) continue;
    if (value.is_boolean()) {
      args.push_back("--" + key + "=" + (value.get<bool>() ? "true" : "false"));
    } else if (value.is_array()) {
      if (value.empty()) continue;
      args.push_back("--" + key);
      for (const auto& v : value) args.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    } else {
      args.push_back("--" + key);
      args.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return args;
}

inline int run(const std::vector<std::string>& args, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"Ultra-low-dimensional prompt tuning experiments", "ulpt"};
  app.require_subcommand(1);
  std::string out_dir = default_out_dir();
  std::string format = "json";

  TrainArgs train_a;
  AblateArgs ablate_a;
  JlArgs jl_a;
  GradcheckArgs grad_a;
  AnalyzeDimsArgs dims_a;
  AnalyzeAlignArgs align_a;
  RegistryArgs reg_a;
  TunePvsZArgs tune_a;
  std::string replay_config;

  std::vector<std::pair<CLI::App*, std::unique_ptr<Flags>>> subs;
  auto sub = [&](const std::string& name, const std::string& desc) -> Flags& {
    CLI::App* s = app.add_subcommand(name, desc);
    s->add_option("--out", out_dir, "output directory (default $ULPT_OUT_DIR or ./ulpt_out)");
    subs.emplace_back(s, std::make_unique<Flags>(s));
    Flags& f = *subs.back().second;
    if (name != "replay") f.add("format", format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
    return f;
  };

  {
    Flags& f = sub("train", "train one prompt on the quadratic harness or the toy task");
    f.add("mode", train_a.mode, "parameterization")->check(CLI::IsMember(all_mode_names()));
    f.add("n", train_a.n, "prompt tokens");
    f.add("r", train_a.r, "low dimension");
    f.add("d", train_a.d, "model dimension (default 16 quadratic, 32 toy)");
    f.add("seed", train_a.seed, "seed of the frozen random component");
    add_train_flags(f, train_a.setup, "quadratic");
  }
  {
    Flags& f = sub("ablate", "train every mode under identical seeds and schedule");
    f.add("n", ablate_a.n, "prompt tokens");
    f.add("r", ablate_a.r, "low dimension");
    f.add("d", ablate_a.d, "model dimension (default 16 quadratic, 32 toy)");
    f.add("seed", ablate_a.seed, "seed of the frozen random component");
    ablate_a.modes = all_mode_names();
    f.add("modes", ablate_a.modes, "modes to run")->check(CLI::IsMember(all_mode_names()));
    f.add("ranks", ablate_a.ranks, "ranks for --counts-only");
    f.flag("full-rank", ablate_a.full_rank, "also run ulpt at r = d");
    f.flag("counts-only", ablate_a.counts_only, "only tabulate trainable parameter counts");
    f.add("threads", ablate_a.threads, "worker threads");
    add_train_flags(f, ablate_a.setup, "toy");
  }
  {
    Flags& f = sub("jl", "random-projection rank bounds, distortion and tails");
    f.add("what", jl_a.what, "any of rank, distortion, tail, fit")
        ->check(CLI::IsMember({"rank", "distortion", "tail", "fit"}));
    f.add("epsilon", jl_a.epsilon, "distortion tolerance");
    f.add("delta", jl_a.delta, "failure probability");
    f.add("n", jl_a.n, "number of points for the rank bound");
    f.add("c", jl_a.c, "tail constant");
    f.add("points", jl_a.points, "points for the distortion report");
    f.add("d", jl_a.d, "ambient dimension");
    f.add("r", jl_a.r, "projection rank for the distortion report");
    f.add("distortion-seeds", jl_a.distortion_seeds, "independent distortion draws");
    f.add("tail-ranks", jl_a.tail_ranks, "ranks for tail estimates");
    f.add("fit-ranks", jl_a.fit_ranks, "ranks for fitting c");
    f.add("trials", jl_a.trials, "Monte Carlo trials per rank");
    f.add("seed", jl_a.seed, "seed");
  }
  {
    Flags& f = sub("gradcheck", "analytic vs finite-difference prompt gradients");
    grad_a.modes = all_mode_names();
    f.add("modes", grad_a.modes, "modes to check")->check(CLI::IsMember(all_mode_names()));
    f.add("instances", grad_a.instances, "random instances per mode");
    f.add("seed", grad_a.seed, "seed");
    f.add("fd-step", grad_a.h, "central difference step");
    f.add("min-abs", grad_a.min_abs, "skip coordinates with |fd| at or below this");
    f.add("max-n", grad_a.max_n, "largest n");
    f.add("max-r", grad_a.max_r, "largest r");
    f.add("max-d", grad_a.max_d, "largest d");
    f.add("tolerance", grad_a.tolerance, "pass threshold on the max relative error");
  }
  {
    Flags& f = sub("analyze-dims", "per-dimension value distribution of a prompt");
    f.add("checkpoint", dims_a.checkpoint, "prompt checkpoint file");
    f.add("run", dims_a.run, "output directory of a train run");
    f.add("k", dims_a.k, "dimensions to sample");
    f.add("percentiles", dims_a.percentiles, "percentile levels");
    f.add("analysis-seed", dims_a.analysis_seed, "seed of the dimension sample");
  }
  {
    Flags& f = sub("analyze-align", "cosine similarity of shift and scale vectors across prompts");
    f.add("checkpoints", align_a.checkpoints, "prompt checkpoint files");
    f.add("ranks", align_a.ranks, "train ulpt prompts at these ranks instead");
    f.add("n", align_a.n, "prompt tokens (with --ranks)");
    f.add("d", align_a.d, "model dimension (with --ranks)");
    f.add("seed", align_a.seed, "seed of the frozen projection (with --ranks)");
    f.add("threads", align_a.threads, "worker threads");
    add_train_flags(f, align_a.setup, "toy");
  }
  {
    Flags& f = sub("registry", "multi-task prompt store");
    f.add("action", reg_a.action, "report | add | remove | simulate")
        ->check(CLI::IsMember({"report", "add", "remove", "simulate"}));
    f.add("dir", reg_a.dir, "registry directory");
    f.add("task-id", reg_a.task_id, "task id for add / remove");
    f.add("checkpoint", reg_a.checkpoint, "checkpoint for add");
    f.add("mode", reg_a.mode, "simulate: parameterization")->check(CLI::IsMember(all_mode_names()));
    f.add("n", reg_a.n, "simulate: prompt tokens");
    f.add("r", reg_a.r, "simulate: low dimension");
    f.add("d", reg_a.d, "simulate: model dimension");
    f.add("tasks", reg_a.tasks, "simulate: number of tasks");
    f.add("seed", reg_a.seed, "simulate: first seed");
  }
  {
    Flags& f = sub("tune-p-vs-z", "match parameter budgets between tuning Z and tuning P");
    f.add("budgets", tune_a.budgets, "per-task parameter budgets");
    f.add("n", tune_a.n, "prompt tokens");
    f.add("d", tune_a.d, "model dimension (default 768, or 32 with --train on toy)");
    f.add("seed", tune_a.seed, "seed of the frozen random component");
    f.flag("train", tune_a.train, "train both sides of every feasible budget");
    f.add("threads", tune_a.threads, "worker threads");
    add_train_flags(f, tune_a.setup, "toy");
  }
  {
    CLI::App* s = app.add_subcommand("replay", "rerun a command from its <cmd>_config.json");
    s->add_option("--config", replay_config, "config echo file")->required();
    s->add_option("--out", out_dir, "output directory (default $ULPT_OUT_DIR or ./ulpt_out)");
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, os, es);
    return code == 0 ? kOk : kConfigError;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string cmd = chosen->get_name();
  try {
    if (cmd == "replay") {
      const auto raw = read_file(replay_config);
      json config;
      try {
        config = json::parse(raw.begin(), raw.end());
      } catch (const json::exception& e) {
        throw FormatError(std::string("config echo: ") + e.what());
      }
      std::vector<std::string> next;
      try {
        next = replay_args(config);
      } catch (const json::exception& e) {
        throw FormatError(std::string("config echo: ") + e.what());
      }
      if (next.front() == "replay") throw ConfigError("cannot replay a replay");
      next.push_back("--out");
      next.push_back(out_dir);
      return run(next, os, es);
    }

    const bool toy_train = train_a.setup.task == "toy";
    if (!train_a.d) train_a.d = toy_train ? toy_default_d() : 16;
    if (!ablate_a.d) ablate_a.d = ablate_a.setup.task == "toy" ? toy_default_d() : 16;
    if (!align_a.d) align_a.d = align_a.setup.task == "toy" ? toy_default_d() : 16;
    if (!tune_a.d) tune_a.d = tune_a.train && tune_a.setup.task == "toy" ? toy_default_d() : 768;
    for (TrainSetup* s : {&train_a.setup, &ablate_a.setup, &align_a.setup, &tune_a.setup}) resolve(*s);

    Output out;
    if (cmd == "train") out = cmd_train(train_a);
    else if (cmd == "ablate") out = cmd_ablate(ablate_a);
    else if (cmd == "jl") out = cmd_jl(jl_a);
    else if (cmd == "gradcheck") out = cmd_gradcheck(grad_a);
    else if (cmd == "analyze-dims") out = cmd_analyze_dims(dims_a);
    else if (cmd == "analyze-align") out = cmd_analyze_align(align_a);
    else if (cmd == "registry") out = cmd_registry(reg_a);
    else out = cmd_tune_p_vs_z(tune_a);

    for (const auto& [app_ptr, flags] : subs)
      if (app_ptr == chosen) write_outputs(out_dir, cmd, format, flags->echo(), out, os);
    return kOk;
  } catch (const TrainDiverged& e) {
    es << "error: " << e.what() << '\n';
    try {
      std::filesystem::create_directories(out_dir);
      write_text(std::filesystem::path(out_dir) / (cmd + "_trace.csv"), trace_table(e.run()).to_csv());
      json s = run_json(e.run());
      s["command"] = cmd;
      s["diverged"] = true;
      write_text(std::filesystem::path(out_dir) / (cmd + "_summary.json"), s.dump(2) + "\n");
    } catch (const std::exception&) {
    }
    return kDiverged;
  } catch (const DivergedError& e) {
    es << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const FormatError& e) {
    es << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    es << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const Error& e) {
    es << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::ios_base::failure& e) {
    es << "error: " << e.what() << '\n';
    return kIoError;
  }
}

inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, os, es);
}

}  // namespace ulpt::cli
