// deid-forge: train | deid | eval | gen-toy, all driven by one JSON config.

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "CLI11.hpp"
#include "deidforge/commands.hpp"
#include "deidforge/errors.hpp"

namespace cmd = deidforge::commands;

int main(int argc, char** argv) {
  CLI::App app{"Face de-identification by attribute transfer"};
  app.require_subcommand(1, 1);

  std::string config_path, donor, out;
  std::uint64_t seed = 0;
  for (const char* name : {"train", "deid", "eval", "gen-toy"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--donor", donor, "donor id (default: the checkpoint's first)");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out, "output directory");
  }
  CLI11_PARSE(app, argc, argv);
  auto* sub = app.get_subcommands().front();

  try {
    cmd::Config cfg = cmd::Config::load(config_path);
    if (sub->count("--donor")) cfg.donor = donor;
    if (sub->count("--seed")) cfg.seed = seed;
    if (sub->count("--out")) cfg.out = std::filesystem::absolute(out);

    const std::string name = sub->get_name();
    if (name == "train") {
      const auto st = cmd::cmd_train(cfg);
      std::printf("trained to iteration %d, checkpoint %s\n", st.iterations_done,
                  (cfg.out / "model.fatm").string().c_str());
    } else if (name == "deid") {
      const auto s = cmd::cmd_deid(cfg);
      double mean = 0;
      if (!s.seconds_per_face.empty())
        mean = std::accumulate(s.seconds_per_face.begin(), s.seconds_per_face.end(), 0.0) /
               static_cast<double>(s.seconds_per_face.size());
      std::printf("processed %d, skipped %d, failed %d, %.3f s/face\n", s.processed, s.skipped,
                  s.failed, mean);
    } else if (name == "eval") {
      cmd::cmd_eval(cfg);
      std::printf("report written to %s\n", (cfg.out / "report.json").string().c_str());
    } else {
      cmd::cmd_gen_toy(cfg);
      std::printf("toy data written to %s\n", cfg.out.string().c_str());
    }
  } catch (const deidforge::InvalidConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const deidforge::MissingDonorError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
