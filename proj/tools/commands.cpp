#include "commands.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>
#include <vector>

#include "mesp/config.hpp"
#include "mesp/grad_check.hpp"
#include "mesp/grad_quality.hpp"
#include "mesp/memory_model.hpp"
#include "mesp/report.hpp"
#include "mesp/snapshot.hpp"
#include "mesp/strategies.hpp"
#include "mesp/trainer.hpp"

namespace mesp::cli {

namespace {

RunConfig resolve_config(const CliOptions& opt, std::string& origin) {
  RunConfig cfg = opt.config_path.empty() ? RunConfig{} : load_config_file(opt.config_path);
  origin = opt.config_path.empty() ? "(defaults)" : opt.config_path;
  if (opt.has_seed) cfg.seed = opt.seed;
  if (!opt.dtype.empty()) cfg.dtype = opt.dtype;
  cfg.validate();
  return cfg;
}

std::string out_path(const CliOptions& opt, const std::string& name) {
  return (std::filesystem::path(opt.out_dir) / name).string();
}

Manifest make_manifest(const std::string& command, const std::string& layout,
                       const std::string& origin, const RunConfig& cfg,
                       std::vector<std::string> outputs) {
  Manifest m;
  m.command = command;
  m.layout = layout;
  m.config_origin = origin;
  m.dtype = cfg.dtype;
  m.seed = cfg.seed;
  m.config_echo = config_echo(cfg);
  m.outputs = std::move(outputs);
  return m;
}

// Comment-prefixed manifest for CSV files so data rows stay machine readable.
std::string csv_manifest(const Manifest& m) { return manifest_header(m); }

StepOptions step_options_for(const RunConfig& cfg, Strategy strat) {
  StepOptions s;
  if (strat == Strategy::mezo) {
    s.lr = cfg.mezo_lr;
    s.mezo_eps = cfg.mezo_eps;
    s.mezo_seed = cfg.mezo_seed;
  } else {
    s.lr = cfg.lr;
    s.momentum = cfg.momentum;
  }
  return s;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

int run_grad_check(const CliOptions& opt, const RunConfig& cfg, const std::string& origin) {
  auto kernels = run_kernel_grad_checks(static_cast<int>(cfg.gc_instances), cfg.gc_delta,
                                        cfg.seed);
  bool ok = true;
  std::vector<std::vector<std::string>> rows;
  for (const auto& k : kernels) {
    bool pass = k.max_rel_err <= cfg.gc_tolerance;
    ok = ok && pass;
    rows.push_back({k.kernel, fmt_int(k.instances), fmt_sci(k.max_rel_err, 3),
                    fmt_sci(cfg.gc_tolerance, 1), pass ? "pass" : "FAIL"});
  }

  Corpus corpus = load_corpus(cfg.corpus);
  auto agg = run_strategy_agreement<double>(cfg.model, corpus, static_cast<int>(cfg.gc_steps),
                                            cfg.seed, cfg.data_seed, cfg.lr);
  const double dual_tol = 1e-12;
  bool dual_ok = agg.max_grad_rel_diff <= dual_tol && agg.max_loss_diff == 0.0;
  ok = ok && dual_ok;

  std::vector<std::string> header{"kernel", "instances", "max_rel_err", "tolerance", "status"};
  std::string md_table = markdown_table(header, rows);
  std::vector<std::vector<std::string>> dual_rows{
      {"max_grad_rel_diff", fmt_sci(agg.max_grad_rel_diff, 3), fmt_sci(dual_tol, 1),
       agg.max_grad_rel_diff <= dual_tol ? "pass" : "FAIL"},
      {"max_loss_diff", fmt_sci(agg.max_loss_diff, 3), "0.0e+00",
       agg.max_loss_diff == 0.0 ? "pass" : "FAIL"},
      {"max_param_diff", fmt_sci(agg.max_param_diff, 3), "0.0e+00",
       agg.max_param_diff == 0.0 ? "pass" : "FAIL"}};
  std::string dual_table =
      markdown_table({"dual-run metric", "value", "tolerance", "status"}, dual_rows);

  std::string csv_name = "grad_check.csv";
  std::string md_name = "grad_check.md";
  Manifest m = make_manifest("grad-check", "kernel-gradient-oracle", origin, cfg,
                             {out_path(opt, csv_name), out_path(opt, md_name)});

  std::ostringstream csv;
  csv << csv_manifest(m);
  csv << csv_join(header) << "\n";
  for (const auto& r : rows) csv << csv_join(r) << "\n";
  csv << "\n" << csv_join({"dual_run_metric", "value", "tolerance", "status"}) << "\n";
  for (const auto& r : dual_rows) csv << csv_join(r) << "\n";
  write_text_file(out_path(opt, csv_name), csv.str());

  std::ostringstream md;
  md << manifest_header(m) << "\n";
  md << "Central finite differences in 64-bit mode, probe width " << fmt_sci(cfg.gc_delta, 1)
     << ", " << cfg.gc_instances << " seeded instances per kernel.\n\n";
  md << md_table << "\n";
  md << "Store-all reference vs structured recompute over " << cfg.gc_steps
     << " lockstep steps (64-bit):\n\n";
  md << dual_table;
  write_text_file(out_path(opt, md_name), md.str());

  std::cout << md_table << "\n" << dual_table;
  std::cout << (ok ? "grad-check: all kernels within tolerance\n"
                   : "grad-check: TOLERANCE VIOLATION, see report\n");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench-mem
// ---------------------------------------------------------------------------

struct BenchCell {
  int64_t layers = 0;
  int64_t seq = 0;
  int64_t rank = 0;
};

struct StrategyMeasurement {
  Strategy strat = Strategy::reference;
  int64_t measured = 0;
  int64_t modeled = 0;
  int64_t param_bytes = 0;
  std::string peak_event;
};

struct CellResult {
  BenchCell cell;
  std::vector<StrategyMeasurement> per_strategy;
};

template <typename T>
CellResult run_bench_cell(const RunConfig& cfg, const BenchCell& cell, const Corpus& corpus,
                          const std::vector<Strategy>& strategies, const CliOptions& opt) {
  CellResult res;
  res.cell = cell;
  ModelConfig mc = cfg.model;
  mc.n_layers = cell.layers;
  mc.lora_rank = cell.rank;
  for (Strategy strat : strategies) {
    TrainSession<T> session(mc, strat, cfg.seed, /*keep_trace=*/cfg.bench.trace);
    Rng data_rng(cfg.data_seed);  // same batch for every strategy in the cell
    Batch batch = sample_batch(corpus, cfg.batch, cell.seq, data_rng);
    auto step_res = session.step(batch.inputs, batch.targets, step_options_for(cfg, strat));
    MemoryBreakdown bd =
        modeled_complexity(mc, strat, cfg.batch, cell.seq, static_cast<int64_t>(sizeof(T)));
    StrategyMeasurement sm;
    sm.strat = strat;
    sm.measured = step_res.step_peak_bytes;
    sm.modeled = bd.peak_bytes;
    sm.param_bytes = session.param_bytes();
    sm.peak_event = bd.peak_event;
    res.per_strategy.push_back(sm);
    if (cfg.bench.trace) {
      std::ostringstream name;
      name << "traces/bench_L" << cell.layers << "_n" << cell.seq << "_r" << cell.rank << "_"
           << strategy_name(strat) << ".trace";
      std::ostringstream body;
      session.ledger().export_trace(body);
      write_text_file(out_path(opt, name.str()), body.str());
    }
  }
  return res;
}

int run_bench_mem(const CliOptions& opt, const RunConfig& cfg, const std::string& origin) {
  const BenchSweep& sweep = cfg.bench;
  if ((sweep.seq_list_set && sweep.seq_list.empty()) ||
      (sweep.rank_list_set && sweep.rank_list.empty()) ||
      (sweep.layers_list_set && sweep.layers_list.empty()))
    throw ConfigError("bench: explicitly empty sweep list");
  std::vector<int64_t> seqs = sweep.seq_list.empty() ? std::vector<int64_t>{cfg.seq}
                                                     : sweep.seq_list;
  std::vector<int64_t> ranks =
      sweep.rank_list.empty() ? std::vector<int64_t>{cfg.model.lora_rank} : sweep.rank_list;
  std::vector<int64_t> layers = sweep.layers_list.empty()
                                    ? std::vector<int64_t>{cfg.model.n_layers}
                                    : sweep.layers_list;
  for (int64_t n : seqs)
    if (n < 1 || n > cfg.model.max_seq)
      throw ConfigError("bench: seq " + std::to_string(n) + " outside 1..max_seq");
  for (int64_t r : ranks)
    if (r < 1) throw ConfigError("bench: rank must be >= 1");
  for (int64_t l : layers)
    if (l < 1) throw ConfigError("bench: layers must be >= 1");

  std::vector<Strategy> strategies{Strategy::reference, Strategy::mebp, Strategy::mesp};
  if (sweep.include_mezo) strategies.push_back(Strategy::mezo);

  Corpus corpus = load_corpus(cfg.corpus);
  std::vector<BenchCell> cells;
  for (int64_t l : layers)
    for (int64_t n : seqs)
      for (int64_t r : ranks) cells.push_back({l, n, r});

  std::vector<CellResult> results(cells.size());
  auto run_cell = [&](size_t i) {
    results[i] = cfg.dtype == "f64"
                     ? run_bench_cell<double>(cfg, cells[i], corpus, strategies, opt)
                     : run_bench_cell<float>(cfg, cells[i], corpus, strategies, opt);
  };
  const int workers = std::min<int>(std::max(1, opt.parallel), static_cast<int>(cells.size()));
  if (workers <= 1) {
    for (size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) run_cell(i);
      });
    for (auto& t : pool) t.join();
  }

  const int64_t width = cfg.dtype == "f64" ? kF64Width : kF32Width;
  bool ordering_ok = true;
  std::vector<std::vector<std::string>> main_rows;
  std::vector<std::vector<std::string>> ablation_rows;
  for (const CellResult& cr : results) {
    int64_t ref_peak = 0, mesp_peak = 0, mebp_peak = 0;
    for (const auto& sm : cr.per_strategy) {
      if (sm.strat == Strategy::reference) ref_peak = sm.measured;
      if (sm.strat == Strategy::mesp) mesp_peak = sm.measured;
      if (sm.strat == Strategy::mebp) mebp_peak = sm.measured;
    }
    for (const auto& sm : cr.per_strategy) {
      double err_pct = sm.modeled == 0
                           ? 0.0
                           : 100.0 * (static_cast<double>(sm.measured - sm.modeled) /
                                      static_cast<double>(sm.modeled));
      main_rows.push_back({fmt_int(cr.cell.layers), fmt_int(cr.cell.seq), fmt_int(cr.cell.rank),
                           strategy_name(sm.strat), fmt_int(sm.measured), fmt_int(sm.modeled),
                           fmt_double(err_pct, 2), fmt_int(sm.param_bytes), sm.peak_event,
                           sm.strat == Strategy::reference
                               ? "0.0"
                               : fmt_double(reduction_percent(sm.measured, ref_peak), 1)});
    }
    const int64_t gap = mebp_peak - mesp_peak;
    const int64_t modeled_gap =
        7 * cr.cell.layers * cfg.batch * cr.cell.seq * cr.cell.rank * width;
    bool cell_ok = mesp_peak < mebp_peak && mebp_peak < ref_peak && gap == modeled_gap;
    ordering_ok = ordering_ok && cell_ok;
    ablation_rows.push_back({fmt_int(cr.cell.layers), fmt_int(cr.cell.seq),
                             fmt_int(cr.cell.rank), fmt_int(mebp_peak), fmt_int(mesp_peak),
                             fmt_int(gap), fmt_int(modeled_gap),
                             fmt_double(reduction_percent(mesp_peak, mebp_peak), 1),
                             cell_ok ? "ok" : "VIOLATED"});
  }

  std::vector<std::string> main_header{"layers",        "seq",
                                       "rank",          "strategy",
                                       "measured_peak", "modeled_peak",
                                       "model_err_pct", "param_bytes",
                                       "peak_event",    "reduction_vs_reference_pct"};
  std::vector<std::string> abl_header{"layers",       "seq",           "rank",
                                      "store_h_peak", "recompute_h_peak", "gap_bytes",
                                      "modeled_gap",  "reduction_pct", "status"};

  std::string csv_name = "bench_mem.csv";
  std::string md_name = "bench_mem.md";
  std::vector<std::string> outputs{out_path(opt, csv_name), out_path(opt, md_name)};
  if (cfg.bench.trace) outputs.push_back(out_path(opt, "traces/"));
  Manifest m = make_manifest("bench-mem", "memory-peak-sweep", origin, cfg, outputs);

  std::ostringstream csv;
  csv << csv_manifest(m);
  csv << csv_join(main_header) << "\n";
  for (const auto& r : main_rows) csv << csv_join(r) << "\n";
  csv << "\n" << csv_join(abl_header) << "\n";
  for (const auto& r : ablation_rows) csv << csv_join(r) << "\n";
  write_text_file(out_path(opt, csv_name), csv.str());

  std::ostringstream md;
  md << manifest_header(m) << "\n";
  md << "One training step per cell; peaks are modeled payload bytes from the\n"
        "allocation ledger. Cells are batch " << cfg.batch << ", dtype " << cfg.dtype
     << "; the closed-form model column should match the ledger exactly.\n\n";
  md << markdown_table(main_header, main_rows) << "\n";
  md << "Stored h projections vs on-demand recompute (same arithmetic, different\n"
        "retention; the gap is exactly 7 x layers x batch x seq x rank x width):\n\n";
  md << markdown_table(abl_header, ablation_rows);
  write_text_file(out_path(opt, md_name), md.str());

  std::cout << markdown_table(main_header, main_rows) << "\n";
  std::cout << markdown_table(abl_header, ablation_rows);
  std::cout << (ordering_ok ? "bench-mem: mesp < mebp < reference in every cell\n"
                            : "bench-mem: ORDERING VIOLATION, see report\n");
  return ordering_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
int run_train(const CliOptions& opt, const RunConfig& cfg, const std::string& origin) {
  Strategy strat = strategy_from_string(cfg.strategy);
  Corpus corpus = load_corpus(cfg.corpus);
  TrainSession<T> session(cfg.model, strat, cfg.seed);
  TrainRunOptions run;
  run.steps = cfg.steps;
  run.batch = cfg.batch;
  run.seq = cfg.seq;
  run.eval_interval = cfg.eval_interval;
  run.data_seed = cfg.data_seed;
  run.step = step_options_for(cfg, strat);
  Trajectory traj = train_loop(session, corpus, run);

  std::string csv_name = "train_" + cfg.strategy + ".csv";
  std::vector<std::string> outputs{out_path(opt, csv_name)};
  if (!cfg.snapshot_out.empty()) outputs.push_back(cfg.snapshot_out);
  Manifest m = make_manifest("train", "loss-trajectory", origin, cfg, outputs);

  std::ostringstream csv;
  csv << csv_manifest(m);
  csv << "step,loss\n";
  for (size_t i = 0; i < traj.steps.size(); ++i)
    csv << traj.steps[i] << "," << fmt_full(traj.losses[i]) << "\n";
  write_text_file(out_path(opt, csv_name), csv.str());

  if (!cfg.snapshot_out.empty()) save_snapshot(cfg.snapshot_out, session.params());

  std::cout << "strategy " << cfg.strategy << ": " << cfg.steps << " steps, initial loss "
            << fmt_double(traj.initial_loss(), 6) << ", final loss "
            << fmt_double(traj.final_loss(), 6) << ", ledger peak " << traj.peak_bytes
            << " bytes\n";
  return 0;
}

// ---------------------------------------------------------------------------
// mezo-quality
// ---------------------------------------------------------------------------

std::string metric_cell(double v, bool defined, int precision) {
  return defined ? fmt_double(v, precision) : "n/a";
}

template <typename T>
int run_mezo_quality(const CliOptions& opt, const RunConfig& cfg, const std::string& origin) {
  Corpus corpus = load_corpus(cfg.corpus);
  TrainSession<T> session(cfg.model, Strategy::mesp, cfg.seed);
  QualityStudyOptions q;
  q.layers = cfg.resolved_quality_layers();
  q.warmup_steps = cfg.quality_warmup;
  q.warmup_lr = cfg.lr;
  q.eps = cfg.quality_eps;
  q.probe_seed = cfg.quality_seed;
  q.data_seed = cfg.data_seed;
  q.self_check = cfg.quality_self_check;
  QualityStudy study = run_quality_study(session, corpus, q);

  std::vector<std::string> header{"layer", "cosine", "rel_error", "sign_agreement", "elements"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& row : study.rows)
    rows.push_back({fmt_int(row.layer), metric_cell(row.m.cosine, row.m.cosine_defined, 4),
                    metric_cell(row.m.rel_error, row.m.rel_error_defined, 2),
                    metric_cell(row.m.sign_agreement, row.m.sign_defined, 4),
                    fmt_int(row.m.n_elems)});
  rows.push_back({"Avg", metric_cell(study.avg.cosine, study.avg.cosine_defined, 4),
                  metric_cell(study.avg.rel_error, study.avg.rel_error_defined, 2),
                  metric_cell(study.avg.sign_agreement, study.avg.sign_defined, 4),
                  fmt_int(study.avg.n_elems)});

  std::string csv_name = "mezo_quality.csv";
  std::string md_name = "mezo_quality.md";
  Manifest m = make_manifest("mezo-quality", "gradient-quality-by-layer", origin, cfg,
                             {out_path(opt, csv_name), out_path(opt, md_name)});

  std::ostringstream csv;
  csv << csv_manifest(m);
  csv << csv_join(header) << "\n";
  for (const auto& r : rows) csv << csv_join(r) << "\n";
  write_text_file(out_path(opt, csv_name), csv.str());

  std::ostringstream md;
  md << manifest_header(m) << "\n";
  md << "Single-probe zeroth order estimate vs exact adapter gradients after "
     << cfg.quality_warmup << " warmup steps";
  if (cfg.quality_self_check) md << " (self-check mode: exact gradients on both sides)";
  md << ".\nProbe coefficient: " << fmt_full(study.probe_coeff) << ", "
     << study.elems_per_layer << " adapter coordinates per layer.\n\n";
  md << markdown_table(header, rows);
  write_text_file(out_path(opt, md_name), md.str());

  std::cout << markdown_table(header, rows);
  return 0;
}

}  // namespace

int cmd_grad_check(const CliOptions& opt) {
  std::string origin;
  RunConfig cfg = resolve_config(opt, origin);
  return run_grad_check(opt, cfg, origin);
}

int cmd_bench_mem(const CliOptions& opt) {
  std::string origin;
  RunConfig cfg = resolve_config(opt, origin);
  return run_bench_mem(opt, cfg, origin);
}

int cmd_train(const CliOptions& opt) {
  std::string origin;
  RunConfig cfg = resolve_config(opt, origin);
  return cfg.dtype == "f64" ? run_train<double>(opt, cfg, origin)
                            : run_train<float>(opt, cfg, origin);
}

int cmd_mezo_quality(const CliOptions& opt) {
  std::string origin;
  RunConfig cfg = resolve_config(opt, origin);
  return cfg.dtype == "f64" ? run_mezo_quality<double>(opt, cfg, origin)
                            : run_mezo_quality<float>(opt, cfg, origin);
}

}  // namespace mesp::cli
