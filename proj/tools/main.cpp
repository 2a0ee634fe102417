// rareloss: batch pipeline driver.
//
//   rareloss synth       --config run.json
//   rareloss fit-density --config run.json
//   rareloss train       --config run.json [--workers N] [--resume]
//   rareloss evaluate    --config run.json [--workers N]

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rareloss/error.hpp"
#include "rareloss/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Rare-event regression losses: data, density, training and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::size_t workers = 1;
  bool resume = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("-o,--out", out_dir, "override output_dir from the config");
  };
  auto* synth = app.add_subcommand("synth", "generate the synthetic burst series");
  auto* fit = app.add_subcommand("fit-density", "fit the target density on the training segment");
  auto* train = app.add_subcommand("train", "train every (loss, lead time, seed) member");
  auto* evaluate = app.add_subcommand("evaluate", "score trained members on the test segment");
  for (auto* sub : {synth, fit, train, evaluate}) add_common(sub);
  for (auto* sub : {train, evaluate}) {
    sub->add_option("-j,--workers", workers, "concurrent members")->check(CLI::PositiveNumber);
  }
  train->add_flag("--resume", resume, "skip members whose outputs match the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : rareloss::kExitConfig;
  }

  try {
    rareloss::RunConfig cfg = rareloss::load_run_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    rareloss::RunOptions opt{workers, resume, &std::cout};
    if (synth->parsed()) {
      rareloss::cmd_synth(cfg, opt);
    } else if (fit->parsed()) {
      rareloss::cmd_fit_density(cfg, opt);
    } else if (train->parsed()) {
      const auto r = rareloss::cmd_train(cfg, opt);
      std::cout << "train: " << r.trained << " trained, " << r.skipped << " skipped, " << r.failed
                << " failed\n";
    } else if (evaluate->parsed()) {
      rareloss::cmd_evaluate(cfg, opt);
    }
  } catch (const rareloss::RunError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const rareloss::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return rareloss::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
