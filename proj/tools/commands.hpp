#pragma once
// The four CLI commands. Each resolves its config, runs the experiment, and
// emits manifest-headed reports under the output directory. Exit codes:
// 0 success, 1 tolerance or assertion failure, 2 usage or config error.

#include <cstdint>
#include <string>

namespace mesp::cli {

struct CliOptions {
  std::string config_path;  // empty selects the built-in defaults
  std::string out_dir = "out";
  bool has_seed = false;
  uint64_t seed = 0;
  std::string dtype;  // empty keeps the config's dtype
  int parallel = 1;   // bench cells run concurrently when > 1
};

int cmd_grad_check(const CliOptions& opt);
int cmd_bench_mem(const CliOptions& opt);
int cmd_train(const CliOptions& opt);
int cmd_mezo_quality(const CliOptions& opt);

}  // namespace mesp::cli
