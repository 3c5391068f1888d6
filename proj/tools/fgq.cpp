// Command-line driver: train / fisher / calibrate / evaluate / pipeline /
// bench / verify-identity, all driven by a JSON run config.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fgq/harness.hpp"
#include "fgq/pack.hpp"
#include "fgq/rng.hpp"

using namespace fgq;

namespace {

RunConfig load_config(const std::string& path, uint64_t seed, bool seed_given) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    nlohmann::json j;
    f >> j;
    cfg = RunConfig::from_json(j);
  } else {
    cfg = RunConfig::defaults(Method::FGQ, 42);
  }
  if (seed_given) cfg.seed = seed;
  return cfg;
}

ToyModel require_checkpoint(const RunConfig& cfg) {
  return load_model(cfg.out_dir + "/checkpoint.fgqc");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fisher-guided quantization testbed"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--seed may follow the verb

  std::string config_path;
  uint64_t seed = 42;
  bool seed_given = false;
  app.add_option("--config", config_path, "JSON run config")->capture_default_str();
  app.add_option("--seed", seed, "master seed (overrides the config)")
      ->each([&](const std::string&) { seed_given = true; });

  auto* cmd_train = app.add_subcommand("train", "train the toy model and write the checkpoint");
  auto* cmd_fisher = app.add_subcommand("fisher", "estimate the diagonal Fisher for the checkpoint");
  auto* cmd_calib = app.add_subcommand("calibrate", "calibrate quantization parameters");
  auto* cmd_eval = app.add_subcommand("evaluate", "evaluate the calibrated model and write the report");
  auto* cmd_pipe = app.add_subcommand("pipeline", "run train -> fisher -> calibrate -> evaluate");
  auto* cmd_bench = app.add_subcommand("bench", "time the packed int4 path against the fake-quant path");
  auto* cmd_verify = app.add_subcommand("verify-identity", "Monte-Carlo Hessian-Fisher identity check");

  int bench_block_idx = 0, bench_batch = 8;
  cmd_bench->add_option("--block", bench_block_idx, "block to benchmark");
  cmd_bench->add_option("--batch", bench_batch, "batch size for the timed forward");

  int mc_samples = 100000;
  cmd_verify->add_option("--samples", mc_samples, "Monte-Carlo sample count");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_config(config_path, seed, seed_given);

    if (cmd_train->parsed()) {
      TrainResult tr;
      stage_train(cfg, &tr);
      std::printf("trained %zu steps: loss %.6g -> %.6g (grad rms %.3g)\n", tr.trace.size(),
                  tr.initial_loss, tr.final_loss, tr.final_grad_rms);
      std::printf("checkpoint: %s/checkpoint.fgqc\n", cfg.out_dir.c_str());
    } else if (cmd_fisher->parsed()) {
      ToyModel m = require_checkpoint(cfg);
      FisherTensor f = stage_fisher(cfg, m);
      std::printf("fisher (%d x %d x %d, mode %s): %s/fisher.fgqf\n", f.tasks, f.blocks, f.channels,
                  f.objective_mode.c_str(), cfg.out_dir.c_str());
    } else if (cmd_calib->parsed()) {
      ToyModel m = require_checkpoint(cfg);
      FisherTensor f;
      FisherTensor* fp = nullptr;
      if (cfg.method == Method::FGQ) {
        f = load_fisher(cfg.out_dir + "/fisher.fgqf");
        validate_fisher(f, m.cfg);
        fp = &f;
      }
      CalibRunResult cr;
      stage_calibrate(cfg, m, fp, &cr);
      for (size_t l = 0; l < cr.blocks.size(); ++l) {
        std::printf("block %zu: %.6g -> %.6g (%d steps)\n", l, cr.blocks[l].initial_loss,
                    cr.blocks[l].final_loss, static_cast<int>(cr.blocks[l].step_losses.size()));
      }
      std::printf("quant state: %s/calibrated.fgqc\n", cfg.out_dir.c_str());
    } else if (cmd_eval->parsed()) {
      ToyModel m = require_checkpoint(cfg);
      SyntheticDataset evalset = make_eval_data(cfg);
      MetricSet fp_metrics = evaluate(m, nullptr, evalset, nullptr).metrics;
      EvalReport er;
      if (cfg.method == Method::FP) {
        er = evaluate(m, nullptr, evalset, &fp_metrics);
      } else {
        ModelQuantCfg qc = load_quant_state(cfg.out_dir + "/calibrated.fgqc", m);
        er = evaluate(m, &qc, evalset, &fp_metrics);
      }
      for (const auto& [k, v] : er.npd) std::printf("npd %-16s %8.2f\n", k.c_str(), v);
      std::printf("(full report via the pipeline verb)\n");
    } else if (cmd_pipe->parsed()) {
      Report rep = run_pipeline(cfg);
      std::printf("report: %s/report.json (config %s)\n", cfg.out_dir.c_str(),
                  rep.j.at("config_hash").get<std::string>().c_str());
    } else if (cmd_bench->parsed()) {
      ToyModel m = require_checkpoint(cfg);
      ModelQuantCfg qc = load_quant_state(cfg.out_dir + "/calibrated.fgqc", m);
      LatencyReport lr = bench_block(m, qc, bench_block_idx, bench_batch);
      nlohmann::json j = latency_report_json(lr);
      std::ofstream out(cfg.out_dir + "/latency.json");
      out << j.dump(2) << "\n";
      std::printf("%s\n", j.dump(2).c_str());
    } else if (cmd_verify->parsed()) {
      IdentityReport rep = verify_hessian_fisher_identity(mc_samples, cfg.seed);
      std::printf("dim %d, n %d, sigma %.3g\n", rep.dim, rep.n_samples, rep.sigma);
      std::printf("mean score norm        %.6g (3 sigma bound %.6g)\n", rep.mean_score_norm,
                  3.0 * rep.score_std / std::sqrt(static_cast<double>(rep.n_samples)));
      std::printf("hessian-fisher gap     %.4f%% (matched z = w*)\n", rep.frob_gap_rel * 100.0);
      std::printf("hessian-fisher gap     %.4f%% (misspecified z)\n", rep.frob_gap_rel_misspec * 100.0);
      std::printf("hessian vs analytic    %.4f%%\n", rep.analytic_gap_rel * 100.0);
      bool ok = rep.frob_gap_rel <= 0.05 &&
                rep.mean_score_norm <= 3.0 * rep.score_std / std::sqrt(double(rep.n_samples)) &&
                rep.frob_gap_rel_misspec > 0.05;
      std::printf("%s\n", ok ? "identity holds at the matched parameter" : "identity check FAILED");
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
