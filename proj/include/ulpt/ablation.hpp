#pragma once

// Independent training runs over a list of prompt configurations, fanned out
// over worker threads and merged by run index.

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

#include "ulpt/reparam.hpp"
#include "ulpt/training.hpp"

namespace ulpt {

using RunFn = std::function<TrainRun(const PromptConfig&)>;

// results[i] = run(configs[i]); the first exception (by index) is rethrown
// after all workers finish.
inline std::vector<TrainRun> run_all(const std::vector<PromptConfig>& configs, const RunFn& run,
                                     std::size_t threads = 1) {
  std::vector<std::optional<TrainRun>> slots(configs.size());
  std::vector<std::exception_ptr> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        slots[i] = run(configs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, configs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<TrainRun> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct AblationRow {
  PromptConfig config;
  std::size_t param_count = 0;
  double final_loss = 0.0;
  std::optional<double> eval_metric;
  std::size_t clamp_events = 0;
};

// The six modes at rank r, sharing seeds and schedule.
inline std::vector<PromptConfig> ablation_configs(std::size_t n, std::size_t r, std::size_t d, Seed seed) {
  std::vector<PromptConfig> out;
  for (Mode m : kAllModes) out.push_back(PromptConfig{n, r, d, seed, m});
  return out;
}

inline std::vector<AblationRow> ablation_suite(const std::vector<PromptConfig>& configs, const RunFn& run,
                                               std::size_t threads = 1) {
  const auto runs = run_all(configs, run, threads);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i)
    rows.push_back({configs[i], trainable_param_count(configs[i]), *runs[i].final_loss, runs[i].final_eval_metric,
                    runs[i].clamp_event_count});
  return rows;
}

}  // namespace ulpt
