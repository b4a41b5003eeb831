#include <iostream>

#include "CLI11.hpp"
#include "moder/cli.hpp"

namespace {

using moder::ConfigSources;

void add_config_options(CLI::App* cmd, ConfigSources& src) {
  cmd->add_option("-c,--config", src.file, "Config file (JSON, comments allowed)")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.overrides, "Override a field, e.g. --set train.lr=0.002")->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moder: continual learning with recomposable textual experts"};
  app.require_subcommand(1);

  ConfigSources src;
  std::string out_path;
  int threads = 0;
  bool inclusive = false;
  std::string axis;
  std::vector<std::string> values;
  std::string hub_path;

  auto* gen = app.add_subcommand("gen-world", "Generate the synthetic world and task stream as JSON");
  add_config_options(gen, src);
  gen->add_option("-o,--out", out_path, "Output file")->required();

  auto* run = app.add_subcommand("run", "Train and evaluate the full stream");
  add_config_options(run, src);
  run->add_option("-o,--out", out_path, "Output directory (defaults to output_dir from the config)");
  run->add_option("--threads", threads, "Evaluation worker cap")->check(CLI::PositiveNumber);
  run->add_flag("--mtil-transfer-inclusive", inclusive, "MTIL Transfer averages rows t <= i instead of t < i");

  auto* abl = app.add_subcommand("ablate", "Compare pipeline variants along one axis");
  add_config_options(abl, src);
  abl->add_option("--axis", axis, "loss | alpha | k | template_aug")->required();
  abl->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  abl->add_option("-o,--out", out_path, "Output directory (defaults to output_dir from the config)");
  abl->add_option("--threads", threads, "Evaluation worker cap")->check(CLI::PositiveNumber);

  auto* hub = app.add_subcommand("hub", "Inspect or verify a hub file");
  hub->require_subcommand(1);
  auto* inspect = hub->add_subcommand("inspect", "Print the header and entries");
  auto* verify = hub->add_subcommand("verify", "Check structure, checksum and encoder fingerprint");
  for (auto* cmd : {inspect, verify}) {
    cmd->add_option("path", hub_path, "Hub file")->required();
    add_config_options(cmd, src);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? moder::kExitOk : moder::kExitConfig;
  }

  try {
    if (threads > 0) src.threads = threads;
    if (inclusive) src.mtil_transfer_inclusive = true;
    if (!out_path.empty() && (run->parsed() || abl->parsed())) src.output_dir = out_path;
    const moder::RunConfig cfg = moder::resolve_config(src);

    if (gen->parsed()) {
      moder::cmd_gen_world(cfg, out_path);
      std::cout << "wrote " << out_path << '\n';
    } else if (run->parsed()) {
      moder::cmd_run(cfg, cfg.output_dir, std::cout);
    } else if (abl->parsed()) {
      moder::cmd_ablate(cfg, moder::parse_axis(axis), values, cfg.output_dir, std::cout);
    } else if (inspect->parsed()) {
      moder::cmd_hub_inspect(hub_path, cfg, std::cout);
    } else if (verify->parsed()) {
      moder::cmd_hub_verify(hub_path, cfg, std::cout);
    }
  } catch (const moder::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return moder::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return moder::kExitInternal;
  }
  return moder::kExitOk;
}
