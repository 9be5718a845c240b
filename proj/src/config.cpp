#include "mesp/config.hpp"

#include "mesp/strategies.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace mesp {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Parser {
  std::string origin;
  int line_no = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg);
  }

  int64_t to_int(const std::string& v) const {
    try {
      size_t pos = 0;
      int64_t x = std::stoll(v, &pos);
      if (pos != v.size()) fail("trailing characters in integer '" + v + "'");
      return x;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      fail("expected integer, got '" + v + "'");
    }
  }

  uint64_t to_uint(const std::string& v) const {
    try {
      size_t pos = 0;
      uint64_t x = std::stoull(v, &pos);
      if (pos != v.size()) fail("trailing characters in integer '" + v + "'");
      return x;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      fail("expected unsigned integer, got '" + v + "'");
    }
  }

  double to_double(const std::string& v) const {
    try {
      size_t pos = 0;
      double x = std::stod(v, &pos);
      if (pos != v.size()) fail("trailing characters in number '" + v + "'");
      return x;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      fail("expected number, got '" + v + "'");
    }
  }

  bool to_bool(const std::string& v) const {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("expected true/false, got '" + v + "'");
  }

  std::vector<int64_t> to_int_list(const std::string& v) const {
    std::vector<int64_t> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) fail("empty element in list '" + v + "'");
      out.push_back(to_int(item));
    }
    return out;
  }
};

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  Parser p{origin};
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++p.line_no;
    std::string line = raw;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) p.fail("expected 'key = value', got '" + trim(raw) + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) p.fail("missing key before '='");
    if (!seen.insert(key).second) p.fail("duplicate key '" + key + "'");

    if (key == "model.layers") cfg.model.n_layers = p.to_int(val);
    else if (key == "model.d_model") cfg.model.d_model = p.to_int(val);
    else if (key == "model.heads") cfg.model.n_heads = p.to_int(val);
    else if (key == "model.d_ff") cfg.model.d_ff = p.to_int(val);
    else if (key == "model.vocab") cfg.model.vocab = p.to_int(val);
    else if (key == "model.rank") cfg.model.lora_rank = p.to_int(val);
    else if (key == "model.max_seq") cfg.model.max_seq = p.to_int(val);
    else if (key == "model.alpha") cfg.model.lora_alpha = p.to_double(val);
    else if (key == "model.norm_eps") cfg.model.norm_eps = p.to_double(val);
    else if (key == "model.tie_embeddings") cfg.model.tie_embeddings = p.to_bool(val);
    else if (key == "run.strategy") cfg.strategy = val;
    else if (key == "run.dtype") cfg.dtype = val;
    else if (key == "run.steps") cfg.steps = p.to_int(val);
    else if (key == "run.batch") cfg.batch = p.to_int(val);
    else if (key == "run.seq") cfg.seq = p.to_int(val);
    else if (key == "run.eval_interval") cfg.eval_interval = p.to_int(val);
    else if (key == "run.lr") cfg.lr = p.to_double(val);
    else if (key == "run.momentum") cfg.momentum = p.to_double(val);
    else if (key == "run.seed") cfg.seed = p.to_uint(val);
    else if (key == "run.data_seed") cfg.data_seed = p.to_uint(val);
    else if (key == "run.corpus") cfg.corpus = val;
    else if (key == "run.snapshot_out") cfg.snapshot_out = val;
    else if (key == "mezo.eps") cfg.mezo_eps = p.to_double(val);
    else if (key == "mezo.lr") cfg.mezo_lr = p.to_double(val);
    else if (key == "mezo.seed") cfg.mezo_seed = p.to_uint(val);
    else if (key == "gradcheck.tolerance") cfg.gc_tolerance = p.to_double(val);
    else if (key == "gradcheck.delta") cfg.gc_delta = p.to_double(val);
    else if (key == "gradcheck.instances") cfg.gc_instances = p.to_int(val);
    else if (key == "gradcheck.steps") cfg.gc_steps = p.to_int(val);
    else if (key == "bench.seq_list") {
      cfg.bench.seq_list = p.to_int_list(val);
      cfg.bench.seq_list_set = true;
    } else if (key == "bench.rank_list") {
      cfg.bench.rank_list = p.to_int_list(val);
      cfg.bench.rank_list_set = true;
    } else if (key == "bench.layers_list") {
      cfg.bench.layers_list = p.to_int_list(val);
      cfg.bench.layers_list_set = true;
    } else if (key == "bench.include_mezo") cfg.bench.include_mezo = p.to_bool(val);
    else if (key == "bench.trace") cfg.bench.trace = p.to_bool(val);
    else if (key == "quality.layers") cfg.quality_layers = p.to_int_list(val);
    else if (key == "quality.warmup_steps") cfg.quality_warmup = p.to_int(val);
    else if (key == "quality.eps") cfg.quality_eps = p.to_double(val);
    else if (key == "quality.seed") cfg.quality_seed = p.to_uint(val);
    else if (key == "quality.self_check") cfg.quality_self_check = p.to_bool(val);
    else p.fail("unknown key '" + key + "'");
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void RunConfig::validate() const {
  model.validate();
  if (model.vocab < 257)
    throw ConfigError("model.vocab must be >= 257 to cover byte tokens plus the reserved id");
  if (dtype != "f32" && dtype != "f64")
    throw ConfigError("run.dtype must be f32 or f64, got '" + dtype + "'");
  strategy_from_string(strategy);  // throws on unknown names
  if (steps < 1) throw ConfigError("run.steps must be >= 1");
  if (batch < 1 || seq < 1) throw ConfigError("run.batch and run.seq must be >= 1");
  if (seq > model.max_seq) throw ConfigError("run.seq exceeds model.max_seq");
  if (eval_interval < 1) throw ConfigError("run.eval_interval must be >= 1");
  if (lr <= 0.0) throw ConfigError("run.lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("run.momentum must be in [0, 1)");
  if (mezo_eps < 0.0) throw ConfigError("mezo.eps must be >= 0");
  if (mezo_lr <= 0.0) throw ConfigError("mezo.lr must be positive");
  if (gc_delta <= 0.0) throw ConfigError("gradcheck.delta must be positive");
  if (gc_instances < 1) throw ConfigError("gradcheck.instances must be >= 1");
  if (gc_steps < 1) throw ConfigError("gradcheck.steps must be >= 1");
  if (quality_warmup < 0) throw ConfigError("quality.warmup_steps must be >= 0");
  for (int64_t l : quality_layers)
    if (l < 0 || l >= model.n_layers)
      throw ConfigError("quality.layers entry " + std::to_string(l) + " outside 0.." +
                        std::to_string(model.n_layers - 1));
}

std::vector<int64_t> RunConfig::resolved_quality_layers() const {
  if (!quality_layers.empty()) return quality_layers;
  std::vector<int64_t> out{0};
  if (model.n_layers > 2) out.push_back(model.n_layers / 2);
  if (model.n_layers > 1) out.push_back(model.n_layers - 1);
  return out;
}

std::string config_echo(const RunConfig& cfg) {
  std::ostringstream os;
  auto list = [](const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "model.layers=" << cfg.model.n_layers << " model.d_model=" << cfg.model.d_model
     << " model.heads=" << cfg.model.n_heads << " model.d_ff=" << cfg.model.d_ff
     << " model.vocab=" << cfg.model.vocab << " model.rank=" << cfg.model.lora_rank
     << " model.max_seq=" << cfg.model.max_seq << " model.alpha=" << cfg.model.lora_alpha
     << " model.norm_eps=" << cfg.model.norm_eps << "\n";
  os << "run.strategy=" << cfg.strategy << " run.dtype=" << cfg.dtype << " run.steps=" << cfg.steps
     << " run.batch=" << cfg.batch << " run.seq=" << cfg.seq
     << " run.eval_interval=" << cfg.eval_interval << " run.lr=" << cfg.lr
     << " run.momentum=" << cfg.momentum << " run.seed=" << cfg.seed
     << " run.data_seed=" << cfg.data_seed << " run.corpus=" << cfg.corpus << "\n";
  os << "mezo.eps=" << cfg.mezo_eps << " mezo.lr=" << cfg.mezo_lr << " mezo.seed=" << cfg.mezo_seed
     << "\n";
  os << "gradcheck.tolerance=" << cfg.gc_tolerance << " gradcheck.delta=" << cfg.gc_delta
     << " gradcheck.instances=" << cfg.gc_instances << " gradcheck.steps=" << cfg.gc_steps << "\n";
  os << "bench.seq_list=" << list(cfg.bench.seq_list)
     << " bench.rank_list=" << list(cfg.bench.rank_list)
     << " bench.layers_list=" << list(cfg.bench.layers_list)
     << " bench.include_mezo=" << (cfg.bench.include_mezo ? "true" : "false")
     << " bench.trace=" << (cfg.bench.trace ? "true" : "false") << "\n";
  os << "quality.layers=" << list(cfg.resolved_quality_layers())
     << " quality.warmup_steps=" << cfg.quality_warmup << " quality.eps=" << cfg.quality_eps
     << " quality.seed=" << cfg.quality_seed
     << " quality.self_check=" << (cfg.quality_self_check ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace mesp
