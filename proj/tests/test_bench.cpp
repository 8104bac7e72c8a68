#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "flashdp/bench.hpp"

namespace flashdp::bench {
namespace {

using nlohmann::json;

json base_doc() {
  return json::parse(R"({
    "model_preset": [{"label": "worked", "T": 1, "P": 2, "D": 1}],
    "batch_sizes": [2],
    "workflows": ["non_dp", "explicit_dp", "implicit_dp", "flashdp"],
    "mem": {"scratchpad_capacity_bytes": 4096, "dtype_width_bytes": 8},
    "dp": {"clip_c": 10.0, "sigma": 0.0, "reduction": "sum", "seed": 1}
  })");
}

std::string config_error(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(ParseConfig, Minimal) {
  const auto cfg = parse_config(base_doc());
  ASSERT_EQ(cfg.layers.size(), 1u);
  EXPECT_EQ(cfg.layers[0].label, "worked");
  EXPECT_EQ(cfg.workflows.size(), 4u);
  EXPECT_EQ(cfg.mem.scratchpad_capacity_bytes, 4096u);
  EXPECT_EQ(cfg.dp.clip_C, 10.0);
  EXPECT_EQ(cfg.repetitions, 1u);
  EXPECT_FALSE(cfg.micro_batch.has_value());
  EXPECT_FALSE(cfg.train.has_value());
}

TEST(ParseConfig, UnknownKeysNamePath) {
  auto doc = base_doc();
  doc["dp"]["clip"] = 1.0;
  EXPECT_NE(config_error(doc).find("dp.clip"), std::string::npos);
  doc = base_doc();
  doc["extra"] = 1;
  EXPECT_NE(config_error(doc).find("extra"), std::string::npos);
}

TEST(ParseConfig, RejectsBadValues) {
  auto doc = base_doc();
  doc["workflows"] = {"flash"};
  EXPECT_NE(config_error(doc).find("workflows[0]"), std::string::npos);
  doc = base_doc();
  doc["workflows"] = {"flashdp", "flashdp"};
  EXPECT_NE(config_error(doc).find("duplicate"), std::string::npos);
  doc = base_doc();
  doc["mem"]["dtype_width_bytes"] = 3;
  EXPECT_NE(config_error(doc).find("mem"), std::string::npos);
  doc = base_doc();
  doc["dp"]["clip_c"] = 0.0;
  EXPECT_NE(config_error(doc).find("dp.clip_c"), std::string::npos);
  doc = base_doc();
  doc["dp"]["reduction"] = "median";
  EXPECT_NE(config_error(doc).find("dp.reduction"), std::string::npos);
  doc = base_doc();
  doc["batch_sizes"] = {0};
  EXPECT_NE(config_error(doc).find("batch_sizes[0]"), std::string::npos);
  doc = base_doc();
  doc["model_preset"] = "gpt2-huge";
  EXPECT_NE(config_error(doc).find("model_preset"), std::string::npos);
  doc = base_doc();
  doc.erase("dp");
  EXPECT_NE(config_error(doc).find("dp"), std::string::npos);
}

TEST(ParseConfig, MicroBatchMustTileBatch) {
  auto doc = base_doc();
  doc["batch_sizes"] = {8};
  doc["micro_batch"] = {{"size", 2}, {"accumulation_steps", 4}};
  EXPECT_EQ(parse_config(doc).micro_batch->size, 2u);
  doc["batch_sizes"] = {6};
  EXPECT_NE(config_error(doc).find("batch_sizes[0]"), std::string::npos);
}

TEST(LoadConfig, Errors) {
  EXPECT_THROW(load_config("/nonexistent/dir/cfg.json"), IoError);
  const auto path = std::filesystem::temp_directory_path() / "flashdp_bad.json";
  write_text("{not json", path.string());
  EXPECT_THROW(load_config(path.string()), ConfigError);
  std::filesystem::remove(path);
}

TEST(ModelPreset, Shapes) {
  const auto small = model_preset("gpt2-small-mini");
  ASSERT_TRUE(small.has_value());
  ASSERT_EQ(small->size(), 5u);
  EXPECT_EQ((*small)[0].P, 64u);
  EXPECT_EQ((*small)[0].D, 64u);
  EXPECT_EQ((*small)[3].D, 256u);
  EXPECT_EQ((*small)[4].P, 256u);
  EXPECT_EQ((*small)[4].D, 64u);
  EXPECT_EQ((*small)[0].T, 32u);
  EXPECT_EQ((*model_preset("gpt2-medium-mini"))[0].P, 96u);
  EXPECT_EQ((*model_preset("gpt2-large-mini"))[0].P, 128u);
  EXPECT_FALSE(model_preset("gpt2-xl").has_value());
}

TEST(RunScenario, WorkedPairRows) {
  const auto rows = run_scenario(parse_config(base_doc()));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].workflow, "non_dp");
  EXPECT_EQ(rows[0].relative_traffic, 1.0);
  for (const auto& r : rows) {
    EXPECT_EQ(r.layer, "worked");
    EXPECT_EQ(r.B, 2u);
  }
  EXPECT_EQ(rows[1].per_sample_grad_bytes_stored, 2u * 2 * 1 * 2 * 8);
  EXPECT_EQ(rows[2].redundant_flops, 8u);
  EXPECT_EQ(rows[3].input_bytes_loaded, 48u);
  EXPECT_EQ(rows[2].input_bytes_loaded, 96u);
  EXPECT_NEAR(rows[1].grad_checksum, rows[3].grad_checksum, 1e-9);
  EXPECT_NEAR(rows[2].grad_checksum, rows[3].grad_checksum, 1e-9);
}

TEST(RunScenario, RepetitionsReproduceRows) {
  auto doc = base_doc();
  doc["repetitions"] = 3;
  doc["dp"]["sigma"] = 1.0;
  const auto rows = run_scenario(parse_config(doc));
  ASSERT_EQ(rows.size(), 12u);
  for (std::size_t i = 4; i < rows.size(); ++i) EXPECT_EQ(rows[i], rows[i % 4]);
}

TEST(RunScenario, RowOrderFollowsConfig) {
  auto doc = base_doc();
  doc["model_preset"] = json::parse(R"([{"label": "a", "T": 2, "P": 3, "D": 2},
                                        {"label": "b", "T": 1, "P": 2, "D": 2}])");
  doc["batch_sizes"] = {1, 3};
  doc["workflows"] = {"flashdp", "explicit_dp"};
  const auto rows = run_scenario(parse_config(doc));
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0].layer, "a");
  EXPECT_EQ(rows[0].B, 1u);
  EXPECT_EQ(rows[0].workflow, "flashdp");
  EXPECT_EQ(rows[1].workflow, "explicit_dp");
  EXPECT_EQ(rows[2].B, 3u);
  EXPECT_EQ(rows[7].layer, "b");
}

TEST(RunScenario, CapacityFailureIsRunError) {
  auto doc = base_doc();
  doc["mem"]["scratchpad_capacity_bytes"] = 56;
  EXPECT_THROW(run_scenario(parse_config(doc)), RunError);
}

TEST(RunScenario, MicroBatchingMatchesFullBatch) {
  auto doc = base_doc();
  doc["model_preset"] = json::parse(R"([{"label": "m", "T": 3, "P": 4, "D": 3}])");
  doc["batch_sizes"] = {8};
  doc["dp"]["clip_c"] = 0.5;
  doc["dp"]["sigma"] = 0.7;
  doc["dp"]["reduction"] = "mean";
  const auto full = run_scenario(parse_config(doc));
  doc["micro_batch"] = {{"size", 2}, {"accumulation_steps", 4}};
  const auto micro = run_scenario(parse_config(doc));
  ASSERT_EQ(full.size(), micro.size());
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_NEAR(full[i].grad_checksum, micro[i].grad_checksum, 1e-12) << full[i].workflow;
  }
  // Four micro-batches: four times the flashdp launches of one B=2 pass.
  EXPECT_EQ(micro[3].kernel_launches, 4u * full[3].kernel_launches);
}

TEST(Report, CsvHeaderAndLines) {
  auto rows = run_scenario(parse_config(base_doc()));
  rows.resize(2);
  const std::string csv = render_report(rows, ReportFormat::csv);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  std::string header;
  for (std::size_t i = 0; i < std::size(kRowFields); ++i) header += (i ? "," : "") + std::string(kRowFields[i]);
  EXPECT_EQ(lines[0], header);
  EXPECT_EQ(lines[1].rfind("non_dp,worked,2,48,16,0,", 0), 0u) << lines[1];
}

TEST(Report, JsonRoundTrip) {
  auto doc = base_doc();
  doc["dp"]["sigma"] = 1.3;
  const auto rows = run_scenario(parse_config(doc));
  EXPECT_EQ(rows_from_json(render_report(rows, ReportFormat::json)), rows);
  const auto j = json::parse(render_report(rows, ReportFormat::json));
  std::vector<std::string> keys;
  const auto first = row_to_json(rows[0]);
  for (const auto& [k, v] : first.items()) keys.push_back(k);
  EXPECT_EQ(keys, std::vector<std::string>(std::begin(kRowFields), std::end(kRowFields)));
  EXPECT_EQ(j.size(), rows.size());
}

TEST(Report, FullPrecisionDoubles) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(format_double(10.071067811865476)), 10.071067811865476);
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Report, EmptyRowsIsUsageError) {
  EXPECT_THROW(render_report({}, ReportFormat::csv), UsageError);
}

TEST(Report, UnwritablePathIsIoError) {
  const auto rows = run_scenario(parse_config(base_doc()));
  EXPECT_THROW(emit_report(rows, ReportFormat::csv, "/nonexistent/dir/out.csv"), IoError);
}

TEST(Report, WritesFile) {
  const auto rows = run_scenario(parse_config(base_doc()));
  const auto path = (std::filesystem::temp_directory_path() / "flashdp_rows.json").string();
  emit_report(rows, ReportFormat::json, path);
  std::ifstream in(path);
  std::stringstream text;
  text << in.rdbuf();
  EXPECT_EQ(rows_from_json(text.str()), rows);
  std::filesystem::remove(path);
}

json train_doc(double sigma, std::vector<std::string> workflows) {
  auto doc = base_doc();
  doc["workflows"] = workflows;
  doc["mem"]["scratchpad_capacity_bytes"] = 2048;
  doc["dp"]["clip_c"] = 1.0;
  doc["dp"]["sigma"] = sigma;
  doc["train"] = {{"B", 4}, {"T", 4}, {"P", 8}, {"D", 4}, {"steps", 10}, {"optimizer", "sgd"}, {"eta", 0.1}};
  return doc;
}

TEST(TrainDemo, ExplicitAndFlashDpParity) {
  const auto trajs = train_demo(parse_config(train_doc(0.1, {"explicit_dp", "flashdp"})));
  ASSERT_EQ(trajs.size(), 2u);
  ASSERT_EQ(trajs[0].losses.size(), 10u);
  for (std::size_t s = 0; s < 10; ++s) EXPECT_NEAR(trajs[0].losses[s], trajs[1].losses[s], 1e-9);
}

TEST(TrainDemo, InactiveDpMatchesNonDp) {
  auto doc = train_doc(0.0, {"non_dp", "implicit_dp", "flashdp"});
  doc["dp"]["clip_c"] = 1e9;
  const auto trajs = train_demo(parse_config(doc));
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_NEAR(trajs[1].losses[s], trajs[0].losses[s], 1e-9);
    EXPECT_NEAR(trajs[2].losses[s], trajs[0].losses[s], 1e-9);
  }
  EXPECT_LT(trajs[0].losses.back(), trajs[0].losses.front());
}

TEST(TrainDemo, AdamParity) {
  auto doc = train_doc(0.5, {"explicit_dp", "implicit_dp", "flashdp"});
  doc["train"]["optimizer"] = "adam";
  doc["train"]["eta"] = 0.01;
  const auto trajs = train_demo(parse_config(doc));
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_NEAR(trajs[1].losses[s], trajs[0].losses[s], 1e-9);
    EXPECT_NEAR(trajs[2].losses[s], trajs[0].losses[s], 1e-9);
  }
}

TEST(TrainDemo, Preconditions) {
  EXPECT_THROW(train_demo(parse_config(train_doc(0.1, {"non_dp", "flashdp"}))), ConfigError);
  EXPECT_THROW(train_demo(parse_config(base_doc())), ConfigError);
}

TEST(TrainDemo, DivergenceIsRunError) {
  auto doc = train_doc(0.0, {"explicit_dp", "flashdp"});
  doc["train"]["eta"] = 1e300;
  doc["train"]["steps"] = 5;
  try {
    train_demo(parse_config(doc));
    FAIL() << "expected RunError";
  } catch (const RunError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(TrainDemo, RenderCsv) {
  const auto trajs = train_demo(parse_config(train_doc(0.1, {"explicit_dp", "flashdp"})));
  const auto csv = render_trajectories(trajs, ReportFormat::csv);
  EXPECT_EQ(csv.rfind("workflow,step,loss\nexplicit_dp,0,", 0), 0u);
  const auto j = json::parse(render_trajectories(trajs, ReportFormat::json));
  EXPECT_EQ(j["flashdp"].size(), 10u);
}

}  // namespace
}  // namespace flashdp::bench
