#include "commands.hpp"
#include "latte/version.hpp"

#include <CLI11.hpp>

#include <exception>
#include <iostream>

int main(int argc, char** argv) {
  using namespace latte::cli;

  CLI::App app{"latte: latent-attention reference kernels, training, and diagnostics"};
  app.set_version_flag("--version", std::string(latte::version()));
  app.require_subcommand(1);

  VerifyOptions vo;
  auto* verify = app.add_subcommand("verify", "Run the numeric invariant suite");
  verify->add_option("--precision", vo.precision, "f32 or f64")->default_str(vo.precision);
  verify->add_option("--seed", vo.seed, "Base seed for generated inputs");
  verify->add_option("--tol-overrides", vo.tol_overrides,
                     "Comma-separated check=value tolerance overrides");
  verify->add_flag("--break-stabilization", vo.break_stabilization,
                   "Swap the stabilized scan for the raw recursion (fault injection)");
  verify->add_option("--out", vo.out, "Report CSV path")->default_str(vo.out);

  TrainCliOptions to;
  auto* train = app.add_subcommand("train", "Train a small language model");
  train->add_option("--config", to.config_path, "Model config file (key=value or JSON)");
  train->add_option("--task", to.task, "mqar or text")->default_str(to.task);
  train->add_option("--mixer", to.mixer, "Override the config's mixer kind");
  train->add_option("--steps", to.steps, "Total optimizer steps");
  train->add_option("--out", to.out_dir, "Output directory")->default_str(to.out_dir);
  train->add_option("--corpus", to.corpus, "Byte corpus for the text task");
  train->add_option("--eval-every", to.eval_every, "Steps between eval rows");

  BenchOptions bo;
  auto* bench = app.add_subcommand("bench", "Time forward passes across sequence lengths");
  bench->add_option("--seq-lens", bo.seq_lens, "Comma-separated lengths")->default_str(bo.seq_lens);
  bench->add_option("--mixers", bo.mixers, "Comma-separated mixer kinds")->default_str(bo.mixers);
  bench->add_option("--d-model", bo.d_model, "Model width")->default_str("256");
  bench->add_option("--repeat", bo.repeat, "Timed repetitions per cell")->default_str("3");
  bench->add_option("--seed", bo.seed, "Workload seed");
  bench->add_option("--token-budget", bo.token_budget,
                    "Tokens per forward pass (default: the longest length)");
  bench->add_option("--mem-limit-gb", bo.mem_limit_gb, "Reject workloads estimated above this");
  bench->add_option("--out", bo.out, "Report CSV path")->default_str(bo.out);

  DiagnoseOptions dgo;
  auto* diagnose = app.add_subcommand("diagnose", "Dump latent mixture usage for a checkpoint");
  diagnose->add_option("--checkpoint", dgo.checkpoint, "Checkpoint path")->required();
  diagnose->add_option("--input", dgo.input, "Token ids or raw bytes (default: seeded random)");
  diagnose->add_option("--out", dgo.out, "Report CSV path")->default_str(dgo.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*verify) return cmd_verify(vo);
    if (*train) return cmd_train(to);
    if (*bench) return cmd_bench(bo);
    if (*diagnose) return cmd_diagnose(dgo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
