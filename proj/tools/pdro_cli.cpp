// Command-line front end: data generation, single runs, selection,
// evaluation, grids and result tables.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pdro/harness.hpp"

namespace fs = std::filesystem;
using namespace pdro;

namespace {

// One --<key> flag per config key (underscores become dashes), except seeds.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    for (const auto& key : experiment_config_keys()) {
      if (key == "seeds") continue;
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      options[key] = app->add_option("--" + flag, values[key], "config " + key);
    }
  }
};

std::map<std::string, std::string> load_config(const std::string& file, const ConfigFlags& flags,
                                               const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!file.empty()) kv = io::parse_key_values(io::read_file(file));
  for (const auto& [key, opt] : flags.options)
    if (opt->count() > 0) kv[key] = flags.values.at(key);
  for (const auto& s : overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return kv;
}

void print_metrics(const TestMetrics& t) {
  for (const auto& [g, acc] : t.per_group) std::cout << "group\t" << g << '\t' << io::format_real(100.0 * acc) << '\n';
  std::cout << "robust\t" << io::format_real(100.0 * t.robust) << '\n';
  std::cout << "average\t" << io::format_real(100.0 * t.average) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parametric DRO experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate train/valid/test splits");
  std::string gen_task = "toy", gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_train = 10000, gen_valid = 2000, gen_test = 10000;
  double gen_bias = 0.95;
  gen->add_option("--task", gen_task, "toy or biased_seq")->check(CLI::IsMember({"toy", "biased_seq"}));
  gen->add_option("--seed", gen_seed, "data seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-train", gen_train);
  gen->add_option("--n-valid", gen_valid);
  gen->add_option("--n-test", gen_test);
  gen->add_option("--bias", gen_bias, "distractor bias (biased_seq)");

  // train
  auto* train = app.add_subcommand("train", "train one run and write its history");
  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_set;
  std::uint64_t tr_seed = 0;
  train->add_option("--config", tr_config, "key=value config file");
  train->add_option("--set", tr_set, "config override key=value (repeatable)");
  ConfigFlags tr_flags;
  tr_flags.attach(train);
  train->add_option("--data", tr_data, "split directory from gen-data")->required()->check(CLI::ExistingDirectory);
  train->add_option("--seed", tr_seed, "training seed")->required();
  train->add_option("--out", tr_out, "run directory")->required();

  // select
  auto* sel = app.add_subcommand("select", "choose a run and checkpoint from run directories");
  std::vector<std::string> sel_runs;
  std::string sel_criterion = "greedy_minmax", sel_stat = "zero_one", sel_out;
  double sel_kappa = kDefaultValidKl;
  sel->add_option("runs", sel_runs, "run directories")->required()->check(CLI::ExistingDirectory);
  sel->add_option("--criterion", sel_criterion);
  sel->add_option("--stat", sel_stat, "zero_one or nll");
  sel->add_option("--kappa-valid", sel_kappa, "validation KL threshold");
  sel->add_option("--out", sel_out, "report file (default stdout)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "test robust and average accuracy of a model");
  std::string ev_model, ev_data;
  eval->add_option("--model", ev_model, "model file or run directory")->required();
  int ev_epoch = -1;
  eval->add_option("--checkpoint", ev_epoch, "checkpoint epoch when --model is a run directory");
  eval->add_option("--data", ev_data, "split directory")->required()->check(CLI::ExistingDirectory);
  std::size_t ev_min_group = 100;
  eval->add_option("--min-group-size", ev_min_group);

  // grid
  auto* grid = app.add_subcommand("grid", "run a hyper-parameter grid over seeds");
  std::string gr_config, gr_out;
  std::vector<std::string> gr_set;
  std::vector<std::uint64_t> gr_seeds;
  grid->add_option("--config", gr_config, "key=value config file");
  grid->add_option("--set", gr_set, "config override key=value (repeatable)");
  ConfigFlags gr_flags;
  gr_flags.attach(grid);
  grid->add_option("--seed", gr_seeds, "training seeds (overrides config)")->required();
  grid->add_option("--out", gr_out, "output directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "results table from grid outputs");
  std::string rep_in;
  rep->add_option("dir", rep_in, "grid output directory (searched recursively)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const DatasetSplits s = gen_task == "toy" ? gen_toy_gaussian(gen_seed, gen_train, gen_valid, gen_test)
                                                : gen_biased_sequences(gen_seed, gen_bias, gen_train, gen_valid, gen_test);
      io::write_splits(gen_out, s);
    } else if (*train) {
      auto kv = load_config(tr_config, tr_flags, tr_set);
      kv["seeds"] = std::to_string(tr_seed);
      const ExperimentConfig c = parse_experiment_config(kv);
      DatasetSplits data = io::read_splits(tr_data);
      if (c.method == Method::groupdro_soft) {
        const int distractor = data.train.vocab_size - 1;
        attach_distractor_posteriors(data.train, distractor);
        attach_distractor_posteriors(data.valid, distractor);
      }
      const auto points = grid_points(c);
      if (points.size() != 1) throw std::invalid_argument("train: every grid must hold a single value");
      io::write_run_history(tr_out, train_one(c, data, points.front(), tr_seed));
    } else if (*sel) {
      std::vector<RunHistory> runs;
      for (const auto& d : sel_runs) runs.push_back(io::read_run_history(d));
      SelectionOptions opt;
      opt.stat = parse_selection_stat(sel_stat);
      opt.kappa_valid = sel_kappa;
      const Criterion c = parse_criterion(sel_criterion);
      const RunChoice choice = hyperparam_select(runs, c, opt);
      std::string out = "criterion\trun\tepoch\trobust_valid\tpooled_adversaries\n";
      out += to_string(c) + '\t' + sel_runs[choice.run] + '\t' +
             std::to_string(runs[choice.run].records[choice.checkpoint].epoch) + '\t' + io::format_real(choice.score) +
             '\t' + std::to_string(choice.pooled_adversaries) + '\n';
      if (sel_out.empty())
        std::cout << out;
      else
        io::write_file(sel_out, out);
    } else if (*eval) {
      const DatasetSplits data = io::read_splits(ev_data);
      ModelParams m;
      if (fs::is_directory(ev_model)) {
        const RunHistory h = io::read_run_history(ev_model);
        if (ev_epoch < 0) {
          m = h.final_model;
        } else {
          if (static_cast<std::size_t>(ev_epoch) >= h.records.size())
            throw std::invalid_argument("no checkpoint for epoch " + std::to_string(ev_epoch));
          m = h.records[static_cast<std::size_t>(ev_epoch)].model;
        }
      } else {
        m = io::parse_model(io::read_file(ev_model));
      }
      print_metrics(evaluate_model(m, data, ev_min_group));
    } else if (*grid) {
      auto kv = load_config(gr_config, gr_flags, gr_set);
      std::string seeds;
      for (std::size_t i = 0; i < gr_seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(gr_seeds[i]);
      kv["seeds"] = seeds;
      const ExperimentResults r = run_experiment(parse_experiment_config(kv));
      write_experiment(gr_out, r);
      std::cout << format_summary_tsv(r);
      for (const auto& c : r.runs)
        if (!c.ok) std::cerr << "run failed: " << c.label << " seed " << c.seed << ": " << c.error << '\n';
    } else if (*rep) {
      std::cout << format_report(rep_in);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
