// Command-line front end: one JSON run config, five verbs (train, calibrate,
// attack, evaluate, masking-demo), all artifacts under one output directory.
//
// Exit statuses: 0 success; 1 invalid config, arguments, or malformed input
// files; 2 runtime failure (numeric divergence, calibration impossible);
// 3 missing upstream artifact (e.g. attack before train).

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "logitguard/pipeline.hpp"

namespace {

using namespace logitguard;

void print_summary(const std::string& verb, const nlohmann::json& m, const RunConfig& cfg) {
  if (verb == "train") {
    std::printf("train: final train accuracy %.4f, test accuracy %.4f\n",
                m.at("final_accuracy").get<double>(), m.at("test_accuracy").get<double>());
  } else if (verb == "calibrate") {
    std::printf("calibrate: k=%.3f (k_min=%.3f), genuine flag rate %.6f\n",
                m.at("k").get<double>(), m.at("k_min").get<double>(),
                m.at("genuine_flag_rate").get<double>());
  } else if (verb == "attack") {
    std::printf("attack: %zu/%zu runs succeeded, %zu errors\n",
                m.at("n_success").get<std::size_t>(), m.at("n_total").get<std::size_t>(),
                m.at("n_error").get<std::size_t>());
  } else if (verb == "evaluate") {
    const nlohmann::json& g = m.at("genuine");
    std::printf("evaluate: genuine flagged %zu/%zu; %zu attack batteries scored\n",
                g.at("train_flagged").get<std::size_t>() + g.at("test_flagged").get<std::size_t>(),
                g.at("train_n").get<std::size_t>() + g.at("test_n").get<std::size_t>(),
                m.at("attacks").size());
  } else {
    std::printf("masking-demo: mode %s\n", m.at("mode").get<std::string>().c_str());
  }
  std::printf("artifacts under %s\n", cfg.out_dir.string().c_str());
}

int dispatch(const std::string& verb, const std::string& config_path,
             const std::string& out_override) {
  try {
    const RunConfig cfg = load_run_config(config_path, out_override);
    nlohmann::json metrics;
    if (verb == "train")
      metrics = cmd_train(cfg);
    else if (verb == "calibrate")
      metrics = cmd_calibrate(cfg);
    else if (verb == "attack")
      metrics = cmd_attack(cfg);
    else if (verb == "evaluate")
      metrics = cmd_evaluate(cfg);
    else
      metrics = cmd_masking_demo(cfg);
    print_summary(verb, metrics, cfg);
    return 0;
  } catch (const DependencyError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial-example toolbench with logit-threshold detection"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  for (const char* verb : {"train", "calibrate", "attack", "evaluate", "masking-demo"}) {
    CLI::App* sub = app.add_subcommand(verb, "");
    sub->add_option("--config", config_path, "run config (json)")->required();
    sub->add_option("--out", out_override, "output directory (overrides the config)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return dispatch(app.get_subcommands().front()->get_name(), config_path, out_override);
}
