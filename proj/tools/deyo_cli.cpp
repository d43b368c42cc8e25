// deyo: command-line front end for the experiment layer.
//
//   deyo run --preset biased --output out/biased
//   deyo sweep --preset biased --param tau_plpd --values 0,0.2,0.3,0.5
//   deyo ablation --preset ablation
//   deyo verify-theory --trials 1000 --seed 7
//   deyo pretrain --preset biased --out model.ckpt
//
// Settings are layered: defaults, then --preset, then --config file, then
// each --set key=value in order.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deyo/experiment.hpp"

namespace {

struct ConfigArgs {
  std::string preset;
  std::string config_file;
  std::vector<std::string> sets;
  std::string output;
  bool quiet = false;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--preset", a.preset, "mild, label-shift, bs1, biased or ablation");
  cmd->add_option("--config", a.config_file, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "override one key, e.g. --set adapt.tau_plpd=0.3");
  cmd->add_option("--output", a.output, "output directory");
  cmd->add_flag("--quiet", a.quiet, "suppress progress on stderr");
}

deyo::RunConfig build_config(const ConfigArgs& a) {
  deyo::RunConfig cfg;
  if (!a.preset.empty()) deyo::apply_pairs(cfg, deyo::preset_pairs(a.preset));
  if (!a.config_file.empty()) deyo::load_config_file(cfg, a.config_file);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw deyo::ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!a.output.empty()) cfg.output_dir = a.output;
  return cfg;
}

deyo::ProgressFn progress_for(const ConfigArgs& a) {
  if (a.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw deyo::DataError("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeYO test-time adaptation lab"};
  app.require_subcommand(1);

  ConfigArgs run_args, sweep_args, ablation_args, pretrain_args;

  auto* run_cmd = app.add_subcommand("run", "adapt on a test stream and write summary.json, diagnostics.csv, rc_curve.csv");
  add_config_options(run_cmd, run_args);

  auto* sweep_cmd = app.add_subcommand("sweep", "one run per parameter value, written to sweep.csv");
  add_config_options(sweep_cmd, sweep_args);
  std::string sweep_param, sweep_values;
  sweep_cmd->add_option("--param", sweep_param, "tau_plpd, patch_grid, transform_kind, tau_ent or ent0")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();

  auto* ablation_cmd = app.add_subcommand("ablation", "all 16 selection/weighting combinations, written to ablation.csv");
  add_config_options(ablation_cmd, ablation_args);

  auto* theory_cmd = app.add_subcommand("verify-theory", "check the harmful-sample sign condition against brute force");
  std::size_t trials = 1000;
  std::uint64_t theory_seed = 0;
  std::string theory_out;
  theory_cmd->add_option("--trials", trials, "qualifying trials")->check(CLI::PositiveNumber);
  theory_cmd->add_option("--seed", theory_seed, "generator seed");
  theory_cmd->add_option("--out", theory_out, "write the JSON report here instead of stdout");

  auto* pretrain_cmd = app.add_subcommand("pretrain", "pretrain on the first seed and save a checkpoint");
  add_config_options(pretrain_cmd, pretrain_args);
  std::string ckpt_out = "model.ckpt";
  pretrain_cmd->add_option("--out", ckpt_out, "checkpoint path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      const auto cfg = build_config(run_args);
      const auto summary = deyo::run(cfg, progress_for(run_args));
      const auto j = deyo::summary_json(summary);
      std::printf("accuracy %s  worst-group %s  (mean over %zu seeds)\n",
                  deyo::format_double(j["mean"]["accuracy"].get<double>()).c_str(),
                  deyo::format_double(j["mean"]["worst_group"].get<double>()).c_str(), summary.seeds.size());
      std::printf("wrote %s/{summary.json,diagnostics.csv,rc_curve.csv}\n", cfg.output_dir.c_str());
      return 0;
    }
    if (sweep_cmd->parsed()) {
      const auto cfg = build_config(sweep_args);
      const auto rows = deyo::sweep(cfg, sweep_param, split_values(sweep_values), progress_for(sweep_args));
      const auto csv = deyo::sweep_csv(sweep_param, rows);
      write_file(std::filesystem::path(cfg.output_dir) / "sweep.csv", csv);
      std::fputs(csv.c_str(), stdout);
      return 0;
    }
    if (ablation_cmd->parsed()) {
      const auto cfg = build_config(ablation_args);
      const auto rows = deyo::ablation(cfg, progress_for(ablation_args));
      const auto csv = deyo::ablation_csv(rows);
      write_file(std::filesystem::path(cfg.output_dir) / "ablation.csv", csv);
      std::fputs(csv.c_str(), stdout);
      return 0;
    }
    if (theory_cmd->parsed()) {
      const auto rep = deyo::theory::verify_sign_agreement(trials, theory_seed);
      const auto text = deyo::theory_report_json(rep).dump(2) + "\n";
      if (theory_out.empty()) std::fputs(text.c_str(), stdout);
      else write_file(theory_out, text);
      return rep.counterexamples.empty() ? 0 : 1;
    }
    if (pretrain_cmd->parsed()) {
      const auto cfg = build_config(pretrain_args);
      const auto res = deyo::pretrain_checkpoint(cfg, ckpt_out);
      std::printf("train accuracy %s  iid accuracy %s\nwrote %s\n", deyo::format_double(res.train_accuracy).c_str(),
                  deyo::format_double(res.iid_accuracy).c_str(), ckpt_out.c_str());
      return 0;
    }
  } catch (const deyo::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
