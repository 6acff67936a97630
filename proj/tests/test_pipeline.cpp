// Pipeline stages and run-config handling: parse/validate fail-fast with no
// partial artifacts, stage dependencies, manifest bookkeeping, determinism
// of re-runs, and worker-count independence.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "logitguard/pipeline.hpp"

#include "helpers.hpp"

using namespace logitguard;
using Catch::Approx;

namespace {

nlohmann::json toy_config_json(const std::filesystem::path& out) {
  return nlohmann::json{
      {"seed", 7},
      {"out_dir", out.string()},
      {"dataset",
       {{"kind", "synth2d"}, {"per_class", 20}, {"test_per_class", 8}, {"separation", 6.0}}},
      {"network", {{"preset", "toy2d"}}},
      {"train", {{"learning_rate", 0.2}, {"batch_size", 10}, {"epochs", 80}}},
      {"attacks",
       nlohmann::json::array(
           {{{"method", "ifgs"}, {"epsilon", 0.4}, {"alpha_step", 0.02}, {"iterations", 30},
             {"per_class", 2}},
            {{"name", "capped"}, {"method", "cw_l2_logit_capped"}, {"alpha_step", 0.05},
             {"iterations", 40}, {"logit_cap", "threshold"}, {"per_class", 2}}})},
      {"detector", {{"k", "auto"}, {"resolution", 0.1}}},
      {"masking", {{"scan_steps", 60}}}};
}

std::filesystem::path fresh_dir(const std::string& name) {
  const std::filesystem::path dir = testutil::scratch_dir("pipeline") / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("run config: json round trip and defaults") {
  const nlohmann::json j = toy_config_json("/tmp/rt");
  const RunConfig cfg = RunConfig::from_json(j);
  CHECK(cfg.seed == 7);
  CHECK(cfg.workers == 1);
  CHECK(cfg.synth.has_value());
  CHECK(cfg.synth->two_d);
  CHECK(cfg.synth->base.per_class == 20);
  CHECK(cfg.synth->test_per_class == 8);
  CHECK(cfg.train.seed == 7);  // inherits the global seed
  CHECK(cfg.train.epochs == 80);
  REQUIRE(cfg.attacks.size() == 2);
  CHECK(cfg.attacks[0].name == "ifgs");  // defaults to the method name
  CHECK(cfg.attacks[0].per_class == 2);
  CHECK(cfg.attacks[1].name == "capped");
  CHECK(cfg.attacks[1].cap_from_thresholds);
  CHECK(cfg.detector.auto_k);
  CHECK(cfg.masking.mode == "auto");
  cfg.validate();

  // The snapshot re-parses to the same snapshot (canonical form).
  const RunConfig again = RunConfig::from_json(cfg.to_json());
  CHECK(again.to_json() == cfg.to_json());
}

TEST_CASE("run config: validation failures") {
  const nlohmann::json base = toy_config_json("/tmp/val");

  SECTION("missing dataset block") {
    nlohmann::json j = base;
    j.erase("dataset");
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("unknown dataset kind") {
    nlohmann::json j = base;
    j["dataset"]["kind"] = "csv";
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("idx paths that do not exist") {
    nlohmann::json j = base;
    j["dataset"] = {{"kind", "idx"},
                    {"train_images", "/nope/ti"},
                    {"train_labels", "/nope/tl"},
                    {"test_images", "/nope/si"},
                    {"test_labels", "/nope/sl"}};
    const RunConfig cfg = RunConfig::from_json(j);
    CHECK_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("/nope/ti"));
  }
  SECTION("synth shape must match the network input") {
    nlohmann::json j = base;
    j["dataset"] = {{"kind", "synth"}, {"num_classes", 2}, {"side", 8},
                    {"per_class", 5}, {"test_per_class", 2}};
    CHECK_THROWS_WITH(RunConfig::from_json(j).validate(),
                      Catch::Matchers::ContainsSubstring("does not match"));
  }
  SECTION("synth class count must match the network") {
    nlohmann::json j = base;
    j["dataset"] = {{"kind", "synth"}, {"num_classes", 5}, {"side", 8},
                    {"per_class", 5}, {"test_per_class", 2}};
    j["network"] = {{"input_shape", {1, 8, 8}},
                    {"num_classes", 3},
                    {"layers", nlohmann::json::array({{{"kind", "flatten"}},
                                                      {{"kind", "dense"}, {"units", 3}}})}};
    CHECK_THROWS_WITH(RunConfig::from_json(j).validate(),
                      Catch::Matchers::ContainsSubstring("classes"));
  }
  SECTION("duplicate attack names") {
    nlohmann::json j = base;
    j["attacks"][1]["name"] = "ifgs";
    CHECK_THROWS_WITH(RunConfig::from_json(j).validate(),
                      Catch::Matchers::ContainsSubstring("not unique"));
  }
  SECTION("threshold cap on a non-capped method") {
    nlohmann::json j = base;
    j["attacks"][0]["logit_cap"] = "threshold";
    CHECK_THROWS_WITH(RunConfig::from_json(j).validate(),
                      Catch::Matchers::ContainsSubstring("cw_l2_logit_capped"));
  }
  SECTION("bad detector k string") {
    nlohmann::json j = base;
    j["detector"]["k"] = "automatic";
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("fixed k parses as a number") {
    nlohmann::json j = base;
    j["detector"]["k"] = 3.0;
    const RunConfig cfg = RunConfig::from_json(j);
    CHECK_FALSE(cfg.detector.auto_k);
    CHECK(cfg.detector.k == 3.0);
  }
  SECTION("bad masking mode") {
    nlohmann::json j = base;
    j["masking"]["mode"] = "sideways";
    CHECK_THROWS_WITH(RunConfig::from_json(j).validate(),
                      Catch::Matchers::ContainsSubstring("sideways"));
  }
  SECTION("unknown network preset") {
    nlohmann::json j = base;
    j["network"] = {{"preset", "resnet"}};
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
}

TEST_CASE("load_run_config: file handling and --out override") {
  const std::filesystem::path dir = testutil::scratch_dir("pipeline");
  const std::filesystem::path cfg_path = dir / "cfg.json";

  write_text_file(cfg_path, toy_config_json(dir / "a").dump());
  CHECK(load_run_config(cfg_path).out_dir == dir / "a");
  CHECK(load_run_config(cfg_path, dir / "b").out_dir == dir / "b");

  write_text_file(cfg_path, "{not json");
  CHECK_THROWS_AS(load_run_config(cfg_path), FormatError);
}

TEST_CASE("stages fail on missing upstream artifacts without side effects") {
  const std::filesystem::path out = fresh_dir("deps");
  RunConfig cfg = RunConfig::from_json(toy_config_json(out));
  cfg.validate();

  CHECK_THROWS_AS(cmd_calibrate(cfg), DependencyError);
  CHECK_THROWS_AS(cmd_attack(cfg), DependencyError);
  CHECK_THROWS_AS(cmd_evaluate(cfg), DependencyError);
  CHECK_THROWS_AS(cmd_masking_demo(cfg), DependencyError);
  CHECK_THROWS_WITH(cmd_calibrate(cfg), Catch::Matchers::ContainsSubstring("train stage"));

  // The dependency check precedes stage_begin: nothing was written.
  CHECK_FALSE(std::filesystem::exists(out));
}

TEST_CASE("toy run end to end") {
  const std::filesystem::path out = fresh_dir("e2e");
  RunConfig cfg = RunConfig::from_json(toy_config_json(out));
  cfg.validate();

  const nlohmann::json train_metrics = cmd_train(cfg);
  REQUIRE(train_metrics.at("final_accuracy").get<double>() == 1.0);

  // Calibrate needs the checkpoint but not the attack artifacts; evaluate
  // still refuses until attacks ran.
  CHECK_THROWS_AS(cmd_evaluate(cfg), DependencyError);
  CHECK_THROWS_WITH(cmd_evaluate(cfg), Catch::Matchers::ContainsSubstring("calibrate stage"));

  const nlohmann::json cal_metrics = cmd_calibrate(cfg);
  CHECK_THROWS_WITH(cmd_evaluate(cfg), Catch::Matchers::ContainsSubstring("attack stage"));
  const nlohmann::json atk_metrics = cmd_attack(cfg);
  const nlohmann::json eval_metrics = cmd_evaluate(cfg);
  const nlohmann::json mask_metrics = cmd_masking_demo(cfg);

  SECTION("manifest records every stage complete with existing artifacts") {
    const nlohmann::json m = nlohmann::json::parse(slurp(out / "manifest.json"));
    for (const char* stage : {"train", "calibrate", "attack", "evaluate", "masking-demo"}) {
      INFO(stage);
      REQUIRE(m.at("stages").contains(stage));
      CHECK(m.at("stages").at(stage).at("status") == "complete");
      for (const nlohmann::json& rel : m.at("stages").at(stage).at("artifacts"))
        CHECK(std::filesystem::exists(out / rel.get<std::string>()));
    }
    CHECK(m.at("checkpoint_id").get<std::string>() == checkpoint_id(out / "checkpoint.ckpt"));
    CHECK(m.at("threshold_table_id").is_string());
    CHECK(m.at("config") == cfg.to_json());
  }

  SECTION("auto-k calibration flags no genuine sample") {
    CHECK(cal_metrics.at("k") == cal_metrics.at("k_min"));
    CHECK(cal_metrics.at("train_flagged").get<std::size_t>() == 0);
    CHECK(cal_metrics.at("test_flagged").get<std::size_t>() == 0);

    const ThresholdTable table =
        ThresholdTable::from_json(nlohmann::json::parse(slurp(out / "thresholds.json")));
    CHECK(table.k_min.has_value());
    CHECK(table.k == *table.k_min);
    CHECK(table.model_id == checkpoint_id(out / "checkpoint.ckpt"));
  }

  SECTION("attack artifacts round-trip and the summary accounts for every run") {
    CHECK(atk_metrics.at("n_total").get<std::size_t>() == 2 * 2 * 2);  // plans x classes x per_class
    CHECK(atk_metrics.at("n_error").get<std::size_t>() == 0);
    for (const nlohmann::json& entry : atk_metrics.at("entries"))
      for (const nlohmann::json& cls : entry.at("per_class"))
        for (const nlohmann::json& run : cls.at("runs")) {
          REQUIRE(run.contains("success"));
          const auto blob = out / run.at("example").get<std::string>();
          const auto sidecar = out / run.at("sidecar").get<std::string>();
          const auto trace = out / run.at("trace").get<std::string>();
          REQUIRE(std::filesystem::exists(blob));
          REQUIRE(std::filesystem::exists(sidecar));
          REQUIRE(std::filesystem::exists(trace));
          const LoadedAdversarialExample ex = load_adversarial_example(blob, sidecar);
          CHECK(ex.example.success == run.at("success").get<bool>());
          CHECK(attack_trace_import(trace).records.size() >= 1);
        }
  }

  SECTION("capped attacks never exceed the class threshold") {
    const ThresholdTable table =
        ThresholdTable::from_json(nlohmann::json::parse(slurp(out / "thresholds.json")));
    for (const nlohmann::json& entry : atk_metrics.at("entries")) {
      if (entry.at("name") != "capped") continue;
      for (const nlohmann::json& cls : entry.at("per_class")) {
        const std::size_t c = cls.at("class").get<std::size_t>();
        for (const nlohmann::json& run : cls.at("runs")) {
          const AttackTrace trace =
              attack_trace_import(out / run.at("trace").get<std::string>());
          for (const TraceRecord& rec : trace.records)
            CHECK(rec.target_logit <= table.entry(c).threshold);
        }
      }
    }
  }

  SECTION("evaluation is consistent with calibration and the stored examples") {
    CHECK(eval_metrics.at("genuine").at("train_flagged") == cal_metrics.at("train_flagged"));
    CHECK(eval_metrics.at("genuine").at("test_flagged") == cal_metrics.at("test_flagged"));
    REQUIRE(eval_metrics.at("attacks").size() == 2);
    for (const nlohmann::json& a : eval_metrics.at("attacks")) {
      CHECK(a.at("exceeding_all_flagged").get<bool>());
      CHECK(a.at("n_flagged").get<std::size_t>() == a.at("n_exceeding_threshold").get<std::size_t>());
    }

    const std::string fig = slurp(out / "fig_detection.csv");
    CHECK(fig.rfind("kind,class,split,logit,q1,median,q3,lo_whisker,hi_whisker,threshold\n", 0) == 0);
    std::size_t expected_adv_rows = 0;
    for (const nlohmann::json& a : eval_metrics.at("attacks"))
      for (const nlohmann::json& g : a.at("per_class_max_logit"))
        if (!g.is_null()) ++expected_adv_rows;
    std::size_t adv_rows = 0;
    for (std::size_t pos = fig.find("adv_max,"); pos != std::string::npos;
         pos = fig.find("adv_max,", pos + 1))
      ++adv_rows;
    CHECK(adv_rows == expected_adv_rows);
  }

  SECTION("masking demo picks the boundary scan for the 2-D toy") {
    CHECK(mask_metrics.at("mode") == "boundary");
    CHECK(mask_metrics.at("rows").get<std::size_t>() == 61);  // scan_steps + 1
    CHECK(std::filesystem::exists(out / "masking" / "boundary.csv"));
    // The saturation story: logits keep growing where softmax has flatlined.
    CHECK(mask_metrics.at("last_quarter_max_logit_growth").get<double>() > 0.0);
    CHECK(mask_metrics.at("last_quarter_max_softmax_drift").get<double>() < 1e-6);
  }

  SECTION("re-running stages rewrites byte-identical metric files") {
    const std::string train_before = slurp(out / "train_report.json");
    const std::string cal_before = slurp(out / "calibrate_metrics.json");
    const std::string eval_before = slurp(out / "evaluation.json");
    const std::string fig_before = slurp(out / "fig_detection.csv");
    const std::string dist_before = slurp(out / "distribution.csv");
    nlohmann::json thr_before = nlohmann::json::parse(slurp(out / "thresholds.json"));

    cmd_train(cfg);
    cmd_calibrate(cfg);
    cmd_attack(cfg);
    cmd_evaluate(cfg);

    CHECK(slurp(out / "train_report.json") == train_before);
    CHECK(slurp(out / "calibrate_metrics.json") == cal_before);
    CHECK(slurp(out / "evaluation.json") == eval_before);
    CHECK(slurp(out / "fig_detection.csv") == fig_before);
    CHECK(slurp(out / "distribution.csv") == dist_before);

    nlohmann::json thr_after = nlohmann::json::parse(slurp(out / "thresholds.json"));
    thr_before.erase("timestamp");
    thr_after.erase("timestamp");
    CHECK(thr_after == thr_before);
  }
}

TEST_CASE("attack stage is worker-count independent") {
  const std::filesystem::path out1 = fresh_dir("w1");
  const std::filesystem::path out3 = fresh_dir("w3");

  nlohmann::json j = toy_config_json(out1);
  RunConfig cfg1 = RunConfig::from_json(j);
  cfg1.validate();
  j["out_dir"] = out3.string();
  j["workers"] = 3;
  RunConfig cfg3 = RunConfig::from_json(j);
  cfg3.validate();

  cmd_train(cfg1);
  cmd_train(cfg3);
  REQUIRE(slurp(out1 / "checkpoint.ckpt") == slurp(out3 / "checkpoint.ckpt"));

  // The capped plan resolves its cap from the threshold table.
  cmd_calibrate(cfg1);
  cmd_calibrate(cfg3);

  cmd_attack(cfg1);
  cmd_attack(cfg3);
  CHECK(slurp(out1 / "attacks" / "summary.json") == slurp(out3 / "attacks" / "summary.json"));
}

TEST_CASE("parallel_for: covers the range once and propagates failures") {
  std::vector<int> hits(97, 0);
  detail::parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::count(hits.begin(), hits.end(), 1) == 97);

  detail::parallel_for(0, 4, [&](std::size_t) { FAIL("body must not run for n=0"); });

  CHECK_THROWS_WITH(detail::parallel_for(50, 3,
                                         [](std::size_t i) {
                                           if (i == 17) throw NumericError("boom at 17");
                                         }),
                    Catch::Matchers::ContainsSubstring("boom"));
}

TEST_CASE("masking demo: cw trace mode on an image network") {
  const std::filesystem::path out = fresh_dir("mask-img");
  nlohmann::json j;
  j["seed"] = 11;
  j["out_dir"] = out.string();
  j["dataset"] = {{"kind", "synth"}, {"num_classes", 3}, {"side", 8},
                  {"per_class", 8}, {"test_per_class", 4}, {"separation", 6.0}};
  j["network"] = {{"input_shape", {1, 8, 8}},
                  {"num_classes", 3},
                  {"layers", nlohmann::json::array({{{"kind", "flatten"}},
                                                    {{"kind", "dense"}, {"units", 16}},
                                                    {{"kind", "relu"}},
                                                    {{"kind", "dense"}, {"units", 3}}})}};
  j["train"] = {{"learning_rate", 0.1}, {"batch_size", 8}, {"epochs", 60}};
  j["masking"] = {{"count", 3}, {"steps", 25}, {"confidence_k", 10.0}, {"alpha_step", 0.5}};

  RunConfig cfg = RunConfig::from_json(j);
  cfg.validate();
  const nlohmann::json train_metrics = cmd_train(cfg);
  REQUIRE(train_metrics.at("final_accuracy").get<double>() >= 0.9);

  const nlohmann::json m = cmd_masking_demo(cfg);
  CHECK(m.at("mode") == "cw_trace");
  REQUIRE(m.at("runs").size() == 3);
  for (const nlohmann::json& run : m.at("runs")) {
    const std::filesystem::path trace = out / run.at("trace").get<std::string>();
    REQUIRE(std::filesystem::exists(trace));
    CHECK(attack_trace_import(trace).records.size() == 25);
    CHECK(run.at("target") != run.at("label"));
  }
}
