// Entry point: verb dispatch and exit code mapping. Usage and config
// problems exit 2, tolerance failures exit 1, success exits 0.

#include <exception>
#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "mesp/config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"LoRA fine-tuning engine with exact recompute backprop, zeroth order "
               "estimation and instrumented memory accounting"};
  app.require_subcommand(1);

  mesp::cli::CliOptions opt;
  bool seed_passed = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "key = value config file")
        ->check(CLI::ExistingFile);
    sub->add_option("--out-dir", opt.out_dir, "report output directory (default: out)");
    sub->add_option("--seed", opt.seed, "override run.seed");
    sub->add_option("--dtype", opt.dtype, "override run.dtype")
        ->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--parallel", opt.parallel, "concurrent sweep cells (bench-mem)")
        ->check(CLI::PositiveNumber);
    return sub;
  };

  CLI::App* grad_check = add_common(
      app.add_subcommand("grad-check", "finite difference oracles and dual-run agreement"));
  CLI::App* bench_mem = add_common(
      app.add_subcommand("bench-mem", "ledger peak sweep across strategies and shapes"));
  CLI::App* train = add_common(app.add_subcommand("train", "training run with trajectory CSV"));
  CLI::App* quality = add_common(
      app.add_subcommand("mezo-quality", "single-probe estimate vs exact gradients per layer"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (CLI::App* sub : {grad_check, bench_mem, train, quality})
    if (sub->parsed() && sub->count("--seed") > 0) seed_passed = true;
  opt.has_seed = seed_passed;

  try {
    if (grad_check->parsed()) return mesp::cli::cmd_grad_check(opt);
    if (bench_mem->parsed()) return mesp::cli::cmd_bench_mem(opt);
    if (train->parsed()) return mesp::cli::cmd_train(opt);
    if (quality->parsed()) return mesp::cli::cmd_mezo_quality(opt);
  } catch (const mesp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
