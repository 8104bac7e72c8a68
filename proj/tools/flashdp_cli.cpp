// Command-line harness: block plans, scenario traffic reports, training parity.

#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "flashdp/flashdp.hpp"

namespace {

using flashdp::bench::ReportFormat;

ReportFormat parse_format(const std::string& name) {
  return name == "json" ? ReportFormat::json : ReportFormat::csv;
}

void write_output(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    flashdp::bench::write_text(text, out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear-layer DP backward workflows on a simulated memory hierarchy"};
  app.require_subcommand(1);

  flashdp::LayerDims dims;
  flashdp::MemSpec mem;
  auto* plan_cmd = app.add_subcommand("plan", "Print the block plan for a layer and scratchpad size");
  plan_cmd->add_option("--B", dims.B, "Batch size")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--T", dims.T, "Sequence length")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--P", dims.P, "Input features")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--D", dims.D, "Output features")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--capacity-bytes", mem.scratchpad_capacity_bytes, "Scratchpad capacity M")
      ->required();
  plan_cmd->add_option("--width", mem.dtype_width_bytes, "Element width in bytes")
      ->check(CLI::IsMember({2, 4, 8}));

  std::string config_path, out_path, format = "csv";
  auto* run_cmd = app.add_subcommand("run", "Run a scenario matrix and emit a traffic report");
  auto* train_cmd = app.add_subcommand("train-demo", "Train one linear layer under each workflow");
  for (auto* cmd : {run_cmd, train_cmd}) {
    cmd->add_option("--config", config_path, "Scenario JSON")->required();
    cmd->add_option("--out", out_path, "Output path (stdout when omitted)");
    cmd->add_option("--format", format, "Report format")->check(CLI::IsMember({"csv", "json"}));
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (*plan_cmd) {
      const auto plan = flashdp::plan_blocks(dims, mem);
      auto j = flashdp::to_json(plan);
      j["footprint_elements"] = flashdp::footprint(plan);
      std::cout << j.dump(2) << '\n';
    } else if (*run_cmd) {
      const auto cfg = flashdp::bench::load_config(config_path);
      const auto rows = flashdp::bench::run_scenario(cfg);
      write_output(flashdp::bench::render_report(rows, parse_format(format)), out_path);
    } else if (*train_cmd) {
      const auto cfg = flashdp::bench::load_config(config_path);
      const auto trajs = flashdp::bench::train_demo(cfg);
      write_output(flashdp::bench::render_trajectories(trajs, parse_format(format)), out_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
