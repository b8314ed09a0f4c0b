// Command-line driver. Every run is determined by (config, seed): artifacts
// land under <out>/run-<config-hash> and reruns are byte-identical, so a
// stage can be repeated or resumed safely. Precedence: built-in defaults,
// then --config, then --set pairs in order, then --seed/--jobs/--out.
#include "CLI11.hpp"

#include "sdvlm/pipeline.hpp"

#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  CLI::App app{"two-step reasoning distilled back into single-step decoding"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<unsigned long long> seed;
  std::optional<int> jobs;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "INI config file");
  app.add_option("--seed", seed, "root seed (wins over the config file)");
  app.add_option("--jobs", jobs, "worker threads (wins over the config file)");
  app.add_option("--out", out_dir, "artifact root (wins over the config file)");
  app.add_option("--set", overrides, "section.key=value override, repeatable");

  CLI::App* c_pretrain =
      app.add_subcommand("pretrain", "train the base model on the synthetic corpus");
  CLI::App* c_traces =
      app.add_subcommand("gen-traces", "record two-step reasoning traces on the train split");
  CLI::App* c_distill =
      app.add_subcommand("distill", "fit per-prompt adapters to the recorded traces");
  CLI::App* c_ensemble =
      app.add_subcommand("train-ensemble", "fit the adapter-weight predictor");
  CLI::App* c_eval = app.add_subcommand("eval", "score one decode mode on the eval split");
  std::string mode;
  bool eval_json = false;
  c_eval->add_option("--mode", mode, "base | teacher | distilled")->required();
  c_eval->add_flag("--json", eval_json, "print the aggregates as one JSON object");
  CLI::App* c_ablate =
      app.add_subcommand("ablate", "run one ablation grid at reduced scale");
  std::string grid;
  bool ablate_json = false;
  c_ablate->add_option("--grid", grid, "skip | loss | k | adapter")->required();
  c_ablate->add_flag("--json", ablate_json, "print the grid rows as a JSON array");
  CLI::App* c_params =
      app.add_subcommand("param-count", "print parameter counts against closed forms");

  for (CLI::App* sub : {c_pretrain, c_traces, c_distill, c_ensemble, c_eval, c_ablate,
                        c_params})
    sub->fallthrough();  // lets --config etc. appear after the subcommand

  CLI11_PARSE(app, argc, argv);

  try {
    sdvlm::RunConfig cfg;
    if (!config_path.empty()) cfg = sdvlm::RunConfig::from_ini(config_path);
    for (const std::string& kv : overrides) {
      size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("--set expects section.key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();

    if (c_pretrain->parsed()) {
      sdvlm::stage_pretrain(cfg);
    } else if (c_traces->parsed()) {
      sdvlm::stage_gen_traces(cfg);
    } else if (c_distill->parsed()) {
      sdvlm::stage_distill(cfg);
    } else if (c_ensemble->parsed()) {
      sdvlm::stage_train_ensemble(cfg);
    } else if (c_eval->parsed()) {
      sdvlm::stage_eval(cfg, mode, eval_json);
    } else if (c_ablate->parsed()) {
      sdvlm::stage_ablate(cfg, grid, ablate_json);
    } else if (c_params->parsed()) {
      sdvlm::print_param_counts(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "sdvlm: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
