// lglab command-line driver: one subcommand per pipeline stage.
#include <CLI11.hpp>

#include <iostream>

#include "lglab/errors.hpp"
#include "lglab/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace lglab::pipeline;

  CLI::App app{"Synthetic facial-behavior pipeline: sprites, key gestures, VAE+GAN, latent analysis"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;

  for (const char* name : {"synth", "keyframes", "train", "encode", "attributes", "detect", "report", "all"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run the ") + name + " stage");
    sub->add_option("--config", config_path, "key = value config file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "run seed (overrides seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  CLI::App* chosen = app.get_subcommands().front();
  RunConfig config;
  try {
    config = load_config(config_path);
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (chosen->count("--seed") > 0) config.seed = seed;
    config.validate();
  } catch (const lglab::Error& e) {
    std::cerr << "lglab: " << e.what() << '\n';
    return kExitValidation;
  }
  return run_stage(parse_stage(chosen->get_name()), config, std::cout, std::cerr);
}
