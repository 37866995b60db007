#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "styemp/pipeline.hpp"

using namespace styemp;

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_name = "default";
  std::string model = "calibrated";
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  apply_overrides(cfg, o.overrides);
  cfg.validate();
  return cfg;
}

ExperimentRun open_run(const Options& o) {
  const auto cfg = resolve_config(o);
  const auto dir = run_root() / o.run_name;
  const auto snapshot = dir / "config.ini";
  if (std::filesystem::exists(snapshot)) {
    std::ifstream in(snapshot);
    const std::string old((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (old != config_to_ini(cfg))
      throw ContractError("run directory " + dir.string() +
                          " holds artifacts from a different configuration; choose another --run name");
  }
  return ExperimentRun(dir, cfg);
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personality-conditioned empathetic response generation toolkit"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_path, "INI configuration file");
  app.add_option("-s,--set", o.overrides, "Override a config value, e.g. --set calibration.beta=0");
  app.add_option("-r,--run", o.run_name, "Run directory name under $STYEMP_RUN_ROOT (default: runs/)");

  auto* corpus = app.add_subcommand("corpus", "Synthetic corpus tools");
  corpus->require_subcommand(1);
  auto* corpus_gen = corpus->add_subcommand("gen", "Generate the dialogue and predictor corpora");
  auto* train_pred = app.add_subcommand("train-predictors", "Train personality and empathy predictors");
  auto* index = app.add_subcommand("retrieve-index", "Train retrieval embedders and build the index");
  auto* train_gen = app.add_subcommand("train-generator", "Train the base generator");
  auto* calib = app.add_subcommand("calibrate", "Personality reinforcement of the base generator");
  auto* generate = app.add_subcommand("generate", "Sample responses for the evaluation split");
  generate->add_option("-m,--model", o.model, "base or calibrated")->check(CLI::IsMember({"base", "calibrated"}));
  auto* evaluate = app.add_subcommand("evaluate", "Score stored generations");
  evaluate->add_option("-m,--model", o.model, "base or calibrated")->check(CLI::IsMember({"base", "calibrated"}));
  auto* ablate = app.add_subcommand("ablate", "Variant x reinforcement grid");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  auto* run_all = app.add_subcommand("run-all", "Every stage in order, then the base/calibrated comparison");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (show->parsed()) {
      std::cout << config_to_ini(resolve_config(o));
      return 0;
    }
    auto run = open_run(o);
    if (corpus_gen->parsed()) {
      run.corpus_gen();
      std::cout << "corpus written to " << run.path("corpus").string() << "\n";
    } else if (train_pred->parsed()) {
      print(run.train_predictors());
    } else if (index->parsed()) {
      print(run.build_index());
    } else if (train_gen->parsed()) {
      const auto r = run.train_base();
      print({{"epoch_loss", r["epoch_loss"]}});
    } else if (calib->parsed()) {
      print(run.calibrate_stage());
    } else if (generate->parsed()) {
      print(run.generate_stage(o.model));
    } else if (evaluate->parsed()) {
      print(run.evaluate_stage(o.model));
    } else if (ablate->parsed()) {
      run.ablate_stage();
      std::ifstream in(run.path("ablation.txt"));
      std::cout << in.rdbuf();
    } else if (gradcheck->parsed()) {
      const auto r = run.gradcheck_stage();
      print(r.to_json(true));
      return r.passed() ? 0 : 1;
    } else if (run_all->parsed()) {
      run.corpus_gen();
      run.train_predictors();
      run.build_index();
      run.train_base();
      run.calibrate_stage();
      nlohmann::json out;
      for (const std::string m : {"base", "calibrated"}) {
        run.generate_stage(m);
        out[m] = run.evaluate_stage(m);
      }
      print(out);
    }
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
