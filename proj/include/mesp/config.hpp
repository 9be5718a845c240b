#pragma once
// Flat key = value config files with dotted section prefixes. Unknown and
// duplicate keys are hard errors: a typo must fail loudly instead of
// silently running defaults.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mesp/model.hpp"

namespace mesp {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct BenchSweep {
  std::vector<int64_t> seq_list;
  std::vector<int64_t> rank_list;
  std::vector<int64_t> layers_list;
  bool include_mezo = false;
  bool trace = false;
  // tracks whether a list key appeared in the file (an explicitly empty
  // list is a usage error; an absent one falls back to the run defaults)
  bool seq_list_set = false, rank_list_set = false, layers_list_set = false;
};

struct RunConfig {
  ModelConfig model;

  std::string strategy = "mesp";
  std::string dtype = "f32";
  int64_t steps = 100;
  int64_t batch = 1;
  int64_t seq = 64;
  int64_t eval_interval = 1;
  double lr = 1e-4;
  double momentum = 0.0;
  uint64_t seed = 1234;
  uint64_t data_seed = 99;
  std::string corpus = "data/sample_corpus.txt";
  std::string snapshot_out;

  double mezo_eps = 0.0;  // 0 selects the dtype default
  double mezo_lr = 1e-3;
  uint64_t mezo_seed = 7;

  double gc_tolerance = 1e-5;
  double gc_delta = 1e-4;
  int64_t gc_instances = 20;
  int64_t gc_steps = 5;

  BenchSweep bench;

  std::vector<int64_t> quality_layers;  // empty selects {0, L/2, L-1}
  int64_t quality_warmup = 8;
  double quality_eps = 0.0;
  uint64_t quality_seed = 7;
  bool quality_self_check = false;

  void validate() const;
  std::vector<int64_t> resolved_quality_layers() const;
};

RunConfig parse_config_text(const std::string& text, const std::string& origin);
RunConfig load_config_file(const std::string& path);

// Canonical key = value echo of the resolved config, for report manifests.
std::string config_echo(const RunConfig& cfg);

}  // namespace mesp
