#ifndef PDRO_HARNESS_HPP
#define PDRO_HARNESS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdro/baselines.hpp"
#include "pdro/data.hpp"
#include "pdro/io.hpp"
#include "pdro/models.hpp"
#include "pdro/pdro.hpp"
#include "pdro/selection.hpp"
#include "pdro/training.hpp"

namespace pdro {

enum class Task { toy, biased_seq };
enum class Method { erm, pdro_bare, pdro_kl, pdro_relaxed, nonparam, groupdro, groupdro_soft };

inline std::string to_string(Task t) { return t == Task::toy ? "toy" : "biased_seq"; }

inline Task parse_task(const std::string& s) {
  if (s == "toy") return Task::toy;
  if (s == "biased_seq") return Task::biased_seq;
  throw std::invalid_argument("unknown task '" + s + "'");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::erm: return "erm";
    case Method::pdro_bare: return "pdro_bare";
    case Method::pdro_kl: return "pdro_kl";
    case Method::pdro_relaxed: return "pdro_relaxed";
    case Method::nonparam: return "nonparam";
    case Method::groupdro: return "groupdro";
    case Method::groupdro_soft: return "groupdro_soft";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::erm, Method::pdro_bare, Method::pdro_kl, Method::pdro_relaxed, Method::nonparam,
                   Method::groupdro, Method::groupdro_soft})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

/// One experiment: a task, a method with hyper-parameter grids, a list of
/// training seeds and a selection criterion.
///
/// The dataset is generated once from `data_seed`; `seeds` vary the
/// minibatch order and adversary sampling of each run.
struct ExperimentConfig {
  Task task = Task::toy;
  Method method = Method::erm;

  std::uint64_t data_seed = 0;
  std::size_t n_train = 10000;
  std::size_t n_valid = 2000;
  std::size_t n_test = 10000;
  double bias = 0.95;

  int epochs = 20;
  std::size_t batch_size = 64;
  double model_lr = 0.1;
  ModelOptimizer model_optimizer = ModelOptimizer::sgd;

  RealVec tau_grid{0.1, 0.01, 0.001};
  std::vector<std::size_t> k_grid{1, 5, 10};
  RealVec lambda_grid{1e-5, 1e-4, 1e-3};
  RealVec kappa_grid{0.01, 0.1, 1.0, 10.0};
  RealVec eta_grid{1.0, 0.1, 0.01};
  std::size_t bare_samples = 0;
  double weight_clip = 0.0;
  double smoothing = 0.1;

  std::vector<std::uint64_t> seeds{1};
  Criterion criterion = Criterion::greedy_minmax;
  SelectionStat selection_stat = SelectionStat::zero_one;
  double kappa_valid = kDefaultValidKl;
  std::size_t min_group_size = 100;

  /// Optional directory receiving one RunHistory directory per run.
  std::string runs_dir;
  std::size_t jobs = 1;

  /// The key=value text this config was parsed from, echoed into outputs.
  std::map<std::string, std::string> source;

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
    auto sorted = seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("config: seeds must be distinct");
    const auto nonempty = [](bool empty, const char* name) {
      if (empty) throw std::invalid_argument(std::string("config: ") + name + " grid is empty");
    };
    switch (method) {
      case Method::pdro_relaxed:
        nonempty(tau_grid.empty(), "tau");
        nonempty(k_grid.empty(), "k");
        nonempty(lambda_grid.empty(), "lambda");
        break;
      case Method::pdro_bare: nonempty(lambda_grid.empty(), "lambda"); break;
      case Method::pdro_kl:
        nonempty(lambda_grid.empty(), "lambda");
        nonempty(kappa_grid.empty(), "kappa");
        break;
      case Method::nonparam: nonempty(kappa_grid.empty(), "kappa"); break;
      case Method::groupdro:
      case Method::groupdro_soft: nonempty(eta_grid.empty(), "eta"); break;
      case Method::erm: break;
    }
    if ((method == Method::pdro_bare || method == Method::pdro_kl) && task != Task::toy)
      throw std::invalid_argument("config: the bare and KL-projected variants need the gaussian (toy) adversary");
    if (epochs < 0 || batch_size == 0 || !(model_lr > 0.0)) throw std::invalid_argument("config: invalid training settings");
  }
};

namespace detail {

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& s, Parse parse) {
  std::vector<T> out;
  for (auto part : io::split(s, ',')) {
    std::string p(part);
    p.erase(0, p.find_first_not_of(" \t"));
    p.erase(p.find_last_not_of(" \t") + 1);
    if (!p.empty()) out.push_back(parse(p));
  }
  return out;
}

inline RealVec parse_real_list(const std::string& s) {
  return parse_list<double>(s, [](const std::string& p) { return io::parse_real(p); });
}

}  // namespace detail

/// Keys accepted by parse_experiment_config.
inline const std::vector<std::string>& experiment_config_keys() {
  static const std::vector<std::string> keys{
      "task",       "method",       "data_seed",      "n_train",     "n_valid",        "n_test",
      "bias",       "epochs",       "batch_size",     "model_lr",    "model_optimizer", "tau",
      "k",          "lambda",       "kappa",          "eta",         "bare_samples",   "weight_clip",
      "smoothing",  "seeds",        "criterion",      "selection_stat", "kappa_valid", "min_group_size",
      "runs_dir",   "jobs"};
  return keys;
}

/// Builds a config from key=value pairs; unknown keys are rejected.
inline ExperimentConfig parse_experiment_config(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  c.source = kv;
  const auto u64 = [](const std::string& v) { return static_cast<std::uint64_t>(io::parse_int(v)); };
  const auto size = [](const std::string& v) {
    const long long x = io::parse_int(v);
    if (x < 0) throw std::invalid_argument("expected a non-negative integer, got " + v);
    return static_cast<std::size_t>(x);
  };
  const std::map<std::string, std::function<void(const std::string&)>> setters{
      {"task", [&](const std::string& v) { c.task = parse_task(v); }},
      {"method", [&](const std::string& v) { c.method = parse_method(v); }},
      {"data_seed", [&](const std::string& v) { c.data_seed = u64(v); }},
      {"n_train", [&](const std::string& v) { c.n_train = size(v); }},
      {"n_valid", [&](const std::string& v) { c.n_valid = size(v); }},
      {"n_test", [&](const std::string& v) { c.n_test = size(v); }},
      {"bias", [&](const std::string& v) { c.bias = io::parse_real(v); }},
      {"epochs", [&](const std::string& v) { c.epochs = static_cast<int>(io::parse_int(v)); }},
      {"batch_size", [&](const std::string& v) { c.batch_size = size(v); }},
      {"model_lr", [&](const std::string& v) { c.model_lr = io::parse_real(v); }},
      {"model_optimizer", [&](const std::string& v) { c.model_optimizer = parse_model_optimizer(v); }},
      {"tau", [&](const std::string& v) { c.tau_grid = detail::parse_real_list(v); }},
      {"k", [&](const std::string& v) { c.k_grid = detail::parse_list<std::size_t>(v, size); }},
      {"lambda", [&](const std::string& v) { c.lambda_grid = detail::parse_real_list(v); }},
      {"kappa", [&](const std::string& v) { c.kappa_grid = detail::parse_real_list(v); }},
      {"eta", [&](const std::string& v) { c.eta_grid = detail::parse_real_list(v); }},
      {"bare_samples", [&](const std::string& v) { c.bare_samples = size(v); }},
      {"weight_clip", [&](const std::string& v) { c.weight_clip = io::parse_real(v); }},
      {"smoothing", [&](const std::string& v) { c.smoothing = io::parse_real(v); }},
      {"seeds", [&](const std::string& v) { c.seeds = detail::parse_list<std::uint64_t>(v, u64); }},
      {"criterion", [&](const std::string& v) { c.criterion = parse_criterion(v); }},
      {"selection_stat", [&](const std::string& v) { c.selection_stat = parse_selection_stat(v); }},
      {"kappa_valid", [&](const std::string& v) { c.kappa_valid = io::parse_real(v); }},
      {"min_group_size", [&](const std::string& v) { c.min_group_size = size(v); }},
      {"runs_dir", [&](const std::string& v) { c.runs_dir = v; }},
      {"jobs", [&](const std::string& v) { c.jobs = std::max<std::size_t>(1, size(v)); }},
  };
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

/// Generates the task's datasets. Soft-group runs get the distractor
/// indicator attached as a two-way posterior.
inline DatasetSplits make_task_data(const ExperimentConfig& c) {
  DatasetSplits s = c.task == Task::toy ? gen_toy_gaussian(c.data_seed, c.n_train, c.n_valid, c.n_test)
                                        : gen_biased_sequences(c.data_seed, c.bias, c.n_train, c.n_valid, c.n_test);
  if (c.method == Method::groupdro_soft) {
    if (c.task != Task::biased_seq) throw std::invalid_argument("groupdro_soft needs the biased_seq task");
    const int distractor = BiasedSeqConfig{}.distractor();
    attach_distractor_posteriors(s.train, distractor);
    attach_distractor_posteriors(s.valid, distractor);
  }
  return s;
}

/// One hyper-parameter point of a grid.
struct GridPoint {
  double tau = 0.01;
  std::size_t k = 5;
  double lambda = 1e-4;
  double kappa = 1.0;
  double eta = 0.1;
  std::string label;
};

inline std::vector<GridPoint> grid_points(const ExperimentConfig& c) {
  std::vector<GridPoint> pts;
  const auto f = [](double v) { return io::format_real(v); };
  switch (c.method) {
    case Method::erm: pts.push_back(GridPoint{.label = "-"}); break;
    case Method::pdro_bare:
      for (double l : c.lambda_grid) pts.push_back(GridPoint{.lambda = l, .label = "lambda=" + f(l)});
      break;
    case Method::pdro_kl:
      for (double l : c.lambda_grid)
        for (double kap : c.kappa_grid)
          pts.push_back(GridPoint{.lambda = l, .kappa = kap, .label = "lambda=" + f(l) + ",kappa=" + f(kap)});
      break;
    case Method::pdro_relaxed:
      for (double l : c.lambda_grid)
        for (double t : c.tau_grid)
          for (std::size_t k : c.k_grid)
            pts.push_back(GridPoint{.tau = t, .k = k, .lambda = l,
                                    .label = "lambda=" + f(l) + ",tau=" + f(t) + ",k=" + std::to_string(k)});
      break;
    case Method::nonparam:
      for (double kap : c.kappa_grid) pts.push_back(GridPoint{.kappa = kap, .label = "kappa=" + f(kap)});
      break;
    case Method::groupdro:
    case Method::groupdro_soft:
      for (double e : c.eta_grid) pts.push_back(GridPoint{.eta = e, .label = "eta=" + f(e)});
      break;
  }
  return pts;
}

/// Trains one run of the configured method at one grid point and seed.
inline RunHistory train_one(const ExperimentConfig& c, const DatasetSplits& data, const GridPoint& p, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.model_lr = c.model_lr;
  t.model_optimizer = c.model_optimizer;
  t.seed = seed;
  const ModelParams init = ModelParams::for_dataset(data.train);
  switch (c.method) {
    case Method::erm: return train_erm(t, data, init);
    case Method::pdro_bare:
    case Method::pdro_kl:
    case Method::pdro_relaxed: {
      PdroConfig pc;
      pc.train = t;
      pc.tau = p.tau;
      pc.window = p.k;
      pc.adv_lr = p.lambda;
      pc.kappa = p.kappa;
      pc.variant = c.method == Method::pdro_bare ? PdroVariant::bare
                   : c.method == Method::pdro_kl ? PdroVariant::kl_projected
                                                 : PdroVariant::relaxed;
      pc.bare_samples = c.bare_samples;
      pc.weight_clip = c.weight_clip;
      pc.smoothing = c.smoothing;
      return train_pdro(pc, data, init, c.task == Task::toy ? AdversaryFamily::gaussian : AdversaryFamily::bigram);
    }
    case Method::nonparam: return train_nonparam(t, data, init, p.kappa);
    case Method::groupdro: return train_groupdro(t, data, init, p.eta, GroupingScheme::identity(data.train));
    case Method::groupdro_soft: return train_groupdro_soft(t, data, init, p.eta);
  }
  throw std::logic_error("unreachable");
}

/// Test-set robust and training-reweighted average accuracy.
struct TestMetrics {
  double robust = 0.0;
  double average = 0.0;
  std::map<GroupId, double> per_group;
};

inline TestMetrics evaluate_model(const ModelParams& m, const DatasetSplits& data, std::size_t min_group_size = 100) {
  const GroupingScheme grouping = merge_small_groups(data.test, min_group_size);
  TestMetrics t;
  t.per_group = per_group_accuracy(data.test, m, grouping);
  t.robust = robust_accuracy(t.per_group);
  t.average = reweighted_average_accuracy(t.per_group, mapped_frequencies(data.train, grouping));
  return t;
}

struct CellResult {
  std::string label;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::size_t checkpoint = 0;
  double valid_score = 0.0;
  TestMetrics test;
};

struct Aggregate {
  std::string label;
  std::size_t n = 0;
  double robust_mean = 0.0;
  double robust_std = 0.0;
  double average_mean = 0.0;
  double average_std = 0.0;
};

struct ExperimentResults {
  ExperimentConfig config;
  std::vector<CellResult> runs;
  /// Per-seed winners of cross-grid selection, labeled "selected".
  std::vector<CellResult> selected;
  std::vector<Aggregate> per_point;
  Aggregate selected_summary;
};

inline Aggregate aggregate(const std::string& label, const std::vector<const CellResult*>& cells) {
  Aggregate a;
  a.label = label;
  RealVec rob, avg;
  for (const CellResult* c : cells)
    if (c->ok) {
      rob.push_back(100.0 * c->test.robust);
      avg.push_back(100.0 * c->test.average);
    }
  a.n = rob.size();
  if (a.n == 0) return a;
  a.robust_mean = mean(rob);
  a.robust_std = sample_stddev(rob);
  a.average_mean = mean(avg);
  a.average_std = sample_stddev(avg);
  return a;
}

/// Runs every (grid point x seed), applies the stopping criterion within
/// each run and cross-grid selection per seed, and tabulates test accuracy.
/// Failed runs are recorded with their diagnostic and skipped in aggregates.
inline ExperimentResults run_experiment(const ExperimentConfig& c) {
  c.validate();
  const DatasetSplits data = make_task_data(c);
  const auto points = grid_points(c);
  SelectionOptions opt;
  opt.stat = c.selection_stat;
  opt.kappa_valid = c.kappa_valid;

  struct Job {
    std::size_t point;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t p = 0; p < points.size(); ++p)
    for (std::uint64_t s : c.seeds) jobs.push_back(Job{p, s});

  std::vector<std::optional<RunHistory>> histories(jobs.size());
  ExperimentResults res;
  res.config = c;
  res.runs.resize(jobs.size());

  const auto execute = [&](std::size_t j) {
    CellResult& cell = res.runs[j];
    cell.label = points[jobs[j].point].label;
    cell.seed = jobs[j].seed;
    try {
      RunHistory h = train_one(c, data, points[jobs[j].point], jobs[j].seed);
      cell.checkpoint = select_checkpoint(h, c.criterion, opt);
      cell.test = evaluate_model(h.records[cell.checkpoint].model, data, c.min_group_size);
      if (!c.runs_dir.empty())
        io::write_run_history(std::filesystem::path(c.runs_dir) /
                                  (to_string(c.method) + "_" + std::to_string(jobs[j].point) + "_seed" +
                                   std::to_string(jobs[j].seed)),
                              h);
      histories[j] = std::move(h);
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
  };

  if (c.jobs <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) execute(j);
  } else {
    for (std::size_t start = 0; start < jobs.size(); start += c.jobs) {
      std::vector<std::future<void>> wave;
      for (std::size_t j = start; j < std::min(jobs.size(), start + c.jobs); ++j)
        wave.push_back(std::async(std::launch::async, execute, j));
      for (auto& f : wave) f.get();
    }
  }

  for (std::size_t p = 0; p < points.size(); ++p) {
    std::vector<const CellResult*> cells;
    for (std::size_t j = 0; j < jobs.size(); ++j)
      if (jobs[j].point == p) cells.push_back(&res.runs[j]);
    res.per_point.push_back(aggregate(points[p].label, cells));
  }

  for (std::uint64_t seed : c.seeds) {
    std::vector<RunHistory> ok_runs;
    std::vector<std::size_t> job_of;
    for (std::size_t j = 0; j < jobs.size(); ++j)
      if (jobs[j].seed == seed && histories[j]) {
        ok_runs.push_back(*histories[j]);
        job_of.push_back(j);
      }
    CellResult sel;
    sel.label = "selected";
    sel.seed = seed;
    if (ok_runs.empty()) {
      sel.ok = false;
      sel.error = "no successful runs";
    } else {
      const RunChoice choice = hyperparam_select(ok_runs, c.criterion, opt);
      const CellResult& winner = res.runs[job_of[choice.run]];
      sel.label = "selected:" + winner.label;
      sel.checkpoint = choice.checkpoint;
      sel.valid_score = choice.score;
      sel.test = winner.test;
    }
    res.selected.push_back(sel);
  }
  std::vector<const CellResult*> sel_ptrs;
  for (const auto& s : res.selected) sel_ptrs.push_back(&s);
  res.selected_summary = aggregate("selected", sel_ptrs);
  return res;
}

/// Per-run rows: method, point, seed, status, chosen epoch, robust and average test accuracy (%).
inline std::string format_runs_tsv(const ExperimentResults& r) {
  std::string out = "method\tpoint\tseed\tstatus\tepoch\trobust\taverage\n";
  const auto row = [&](const CellResult& c) {
    out += to_string(r.config.method) + '\t' + c.label + '\t' + std::to_string(c.seed) + '\t' +
           (c.ok ? std::string("ok") : "error: " + c.error) + '\t' + std::to_string(c.checkpoint) + '\t' +
           io::format_real(100.0 * c.test.robust) + '\t' + io::format_real(100.0 * c.test.average) + '\n';
  };
  for (const auto& c : r.runs) row(c);
  for (const auto& c : r.selected) row(c);
  return out;
}

/// Aggregate rows (mean and sample std over seeds, in %): one per grid point
/// and one for the per-seed cross-grid selection.
inline std::string format_summary_tsv(const ExperimentResults& r) {
  std::string out = "method\tpoint\tcriterion\tn\trobust_mean\trobust_std\taverage_mean\taverage_std\n";
  const auto row = [&](const Aggregate& a) {
    out += to_string(r.config.method) + '\t' + a.label + '\t' + to_string(r.config.criterion) + '\t' +
           std::to_string(a.n) + '\t' + io::format_real(a.robust_mean) + '\t' + io::format_real(a.robust_std) + '\t' +
           io::format_real(a.average_mean) + '\t' + io::format_real(a.average_std) + '\n';
  };
  for (const auto& a : r.per_point) row(a);
  row(r.selected_summary);
  return out;
}

/// Writes config echo, runs.tsv and summary.tsv into `dir`.
inline void write_experiment(const std::filesystem::path& dir, const ExperimentResults& r) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "config.txt", io::format_key_values(r.config.source));
  io::write_file(dir / "runs.tsv", format_runs_tsv(r));
  io::write_file(dir / "summary.tsv", format_summary_tsv(r));
}

// ---------------------------------------------------------------------------
// Report: a results table across experiment directories.

struct SummaryRow {
  std::string method, point, criterion;
  std::size_t n = 0;
  double robust_mean = 0, robust_std = 0, average_mean = 0, average_std = 0;
};

inline std::vector<SummaryRow> read_summary(const std::filesystem::path& file) {
  std::vector<SummaryRow> rows;
  const auto lines = io::lines_of(io::read_file(file));
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto c = io::split(lines[i], '\t');
    if (c.size() != 8) throw std::invalid_argument(file.string() + ": expected 8 columns");
    rows.push_back(SummaryRow{std::string(c[0]), std::string(c[1]), std::string(c[2]),
                              static_cast<std::size_t>(io::parse_int(c[3])), io::parse_real(c[4]),
                              io::parse_real(c[5]), io::parse_real(c[6]), io::parse_real(c[7])});
  }
  return rows;
}

/// For each experiment (summary.tsv) under `root`, in path order: the grid
/// point with the best mean robust accuracy and the cross-grid selection.
inline std::string format_report(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_regular_file(root / "summary.tsv")) files.push_back(root / "summary.tsv");
  if (std::filesystem::is_directory(root))
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root))
      if (entry.is_regular_file() && entry.path().filename() == "summary.tsv" && entry.path() != root / "summary.tsv")
        files.push_back(entry.path());
  if (files.empty()) throw std::runtime_error("no summary.tsv found under " + root.string());
  std::sort(files.begin(), files.end());

  const auto pm = [](double m, double s) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(2);
    o << m << " +- " << s;
    return o.str();
  };
  std::string out = "method\trow\tpoint\tn\taverage\trobust\n";
  for (const auto& f : files) {
    const auto rows = read_summary(f);
    const SummaryRow* best = nullptr;
    const SummaryRow* selected = nullptr;
    for (const auto& r : rows) {
      if (r.point == "selected") {
        selected = &r;
      } else if (r.n > 0 && (!best || r.robust_mean > best->robust_mean)) {
        best = &r;
      }
    }
    if (best)
      out += best->method + "\tbest_point\t" + best->point + '\t' + std::to_string(best->n) + '\t' +
             pm(best->average_mean, best->average_std) + '\t' + pm(best->robust_mean, best->robust_std) + '\n';
    if (selected)
      out += selected->method + "\tselected(" + selected->criterion + ")\t-\t" + std::to_string(selected->n) + '\t' +
             pm(selected->average_mean, selected->average_std) + '\t' + pm(selected->robust_mean, selected->robust_std) +
             '\n';
  }
  return out;
}

}  // namespace pdro

#endif  // PDRO_HARNESS_HPP
