// Train a ULPT prompt against a reachable quadratic target, save it, and
// rebuild the same prompt from the checkpoint.

#include <cstdio>
#include <filesystem>

#include "ulpt/registry.hpp"
#include "ulpt/training.hpp"

int main() {
  using namespace ulpt;
  const PromptConfig cfg{8, 4, 64, Seed{11}, Mode::ulpt};
  std::printf("trainable parameters: %zu (vanilla prompt: %zu)\n", trainable_param_count(cfg),
              param_count(Mode::vanilla_pt, cfg.n, 0, cfg.d));

  const HarnessRun h = quadratic_harness(cfg, Seed{2}, Seed{3}, 3000);
  std::printf("curvature %.4f, lr %.4f, loss %.3e -> %.3e, monotone %s\n", h.curvature, h.lr,
              h.run.trace.front().loss, *h.run.final_loss, h.monotone ? "yes" : "no");

  const auto path = std::filesystem::temp_directory_path() / "quickstart_prompt.ulpt";
  save(make_checkpoint(h.run.final_state), path);
  const PromptState back = reconstruct(load(path));
  std::printf("checkpoint %s: %ju bytes, forward %s\n", path.c_str(),
              static_cast<std::uintmax_t>(std::filesystem::file_size(path)),
              back.forward() == h.run.final_state.forward() ? "identical" : "differs");
  return 0;
}
