#ifndef PDRO_IO_HPP
#define PDRO_IO_HPP

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "pdro/adversaries.hpp"
#include "pdro/data.hpp"
#include "pdro/models.hpp"
#include "pdro/training.hpp"

namespace pdro::io {

namespace fs = std::filesystem;

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_real: conversion failed");
  return std::string(buf, end);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  const char* first = s.data();
  if (!s.empty() && s.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw std::invalid_argument("not a real number: '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw std::invalid_argument("not an integer: '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << content;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets: one example per line, `split \t group \t label \t features`, with
// an optional fifth column of comma-separated posterior probabilities.
// Real features are comma-separated, token ids space-separated. Sequence
// files start with a `# vocab_size=N` line.

inline std::string format_dataset(const Dataset& d) {
  std::string out;
  if (d.is_sequence()) out += "# vocab_size=" + std::to_string(d.vocab_size) + "\n";
  for (const auto& e : d.examples) {
    out += to_string(d.split);
    out += '\t' + std::to_string(e.group) + '\t' + std::to_string(e.label) + '\t';
    if (e.is_sequence()) {
      for (std::size_t i = 0; i < e.tokens().size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(e.tokens()[i]);
      }
    } else {
      for (std::size_t i = 0; i < e.features().size(); ++i) {
        if (i) out += ',';
        out += format_real(e.features()[i]);
      }
    }
    if (!e.posteriors.empty()) {
      out += '\t';
      for (std::size_t i = 0; i < e.posteriors.size(); ++i) {
        if (i) out += ',';
        out += format_real(e.posteriors[i]);
      }
    }
    out += '\n';
  }
  return out;
}

inline Dataset parse_dataset(const std::string& text) {
  Dataset d;
  bool split_seen = false;
  std::size_t line_no = 0;
  for (const auto& line : lines_of(text)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.front() == '#') {
      const std::string_view key = "# vocab_size=";
      if (line.rfind(key, 0) == 0) d.vocab_size = static_cast<int>(parse_int(std::string_view(line).substr(key.size())));
      continue;
    }
    try {
      const auto cols = split(line, '\t');
      if (cols.size() != 4 && cols.size() != 5) throw std::invalid_argument("expected 4 or 5 tab-separated fields");
      const Split sp = parse_split(std::string(cols[0]));
      if (split_seen && sp != d.split) throw std::invalid_argument("mixed splits in one file");
      d.split = sp;
      split_seen = true;
      Example e;
      e.group = static_cast<GroupId>(parse_int(cols[1]));
      e.label = static_cast<int>(parse_int(cols[2]));
      if (d.vocab_size > 0) {
        TokenSeq tokens;
        for (auto tok : split(cols[3], ' '))
          if (!tok.empty()) tokens.push_back(static_cast<int>(parse_int(tok)));
        e.x = std::move(tokens);
      } else {
        RealVec x;
        for (auto v : split(cols[3], ',')) x.push_back(parse_real(v));
        e.x = std::move(x);
      }
      if (cols.size() == 5)
        for (auto v : split(cols[4], ',')) e.posteriors.push_back(parse_real(v));
      d.examples.push_back(std::move(e));
    } catch (const std::invalid_argument& err) {
      throw std::invalid_argument("dataset line " + std::to_string(line_no) + ": " + err.what());
    }
  }
  d.validate();
  return d;
}

inline void write_dataset(const fs::path& p, const Dataset& d) { write_file(p, format_dataset(d)); }
inline Dataset read_dataset(const fs::path& p) { return parse_dataset(read_file(p)); }

inline void write_splits(const fs::path& dir, const DatasetSplits& s) {
  write_dataset(dir / "train.tsv", s.train);
  write_dataset(dir / "valid.tsv", s.valid);
  write_dataset(dir / "test.tsv", s.test);
}

inline DatasetSplits read_splits(const fs::path& dir) {
  return DatasetSplits{read_dataset(dir / "train.tsv"), read_dataset(dir / "valid.tsv"), read_dataset(dir / "test.tsv")};
}

// ---------------------------------------------------------------------------
// Parameter files: a one-line header followed by one decimal real per line.

inline std::string format_model(const ModelParams& m) {
  std::string out = "model logistic dim=" + std::to_string(m.dim()) + " vocab=" + std::to_string(m.vocab_size) + "\n";
  for (double v : m.theta) out += format_real(v) + "\n";
  return out;
}

namespace detail {

inline std::map<std::string, std::string> header_fields(const std::string& header, const std::string& expect_kind) {
  std::istringstream in(header);
  std::string kind;
  in >> kind;
  if (kind != expect_kind) throw std::invalid_argument("expected a '" + expect_kind + "' header, got '" + header + "'");
  std::map<std::string, std::string> fields;
  std::string word;
  in >> word;
  fields["family"] = word;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed header field '" + word + "'");
    fields[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return fields;
}

inline RealVec body_values(const std::vector<std::string>& lines, std::size_t expected) {
  RealVec v;
  for (std::size_t i = 1; i < lines.size(); ++i)
    if (!lines[i].empty()) v.push_back(parse_real(lines[i]));
  if (v.size() != expected) throw std::invalid_argument("parameter count does not match header dimension");
  return v;
}

}  // namespace detail

inline ModelParams parse_model(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw std::invalid_argument("empty model file");
  auto f = detail::header_fields(lines[0], "model");
  if (f["family"] != "logistic") throw std::invalid_argument("unknown model kind '" + f["family"] + "'");
  ModelParams m;
  m.vocab_size = static_cast<int>(parse_int(f.at("vocab")));
  m.theta = detail::body_values(lines, static_cast<std::size_t>(parse_int(f.at("dim"))));
  return m;
}

inline std::string format_adversary(const AdversaryParams& a) {
  std::string out = "adversary " + to_string(a.family) + " dim=" + std::to_string(a.psi.size());
  if (a.family == AdversaryFamily::gaussian)
    out += " sigma=" + format_real(a.sigma);
  else
    out += " vocab=" + std::to_string(a.vocab_size);
  out += "\n";
  for (double v : a.psi) out += format_real(v) + "\n";
  return out;
}

inline AdversaryParams parse_adversary(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw std::invalid_argument("empty adversary file");
  auto f = detail::header_fields(lines[0], "adversary");
  AdversaryParams a;
  a.family = parse_adversary_family(f["family"]);
  a.psi = detail::body_values(lines, static_cast<std::size_t>(parse_int(f.at("dim"))));
  if (a.family == AdversaryFamily::gaussian) {
    a.sigma = parse_real(f.at("sigma"));
  } else {
    a.vocab_size = static_cast<int>(parse_int(f.at("vocab")));
    if (a.psi.size() != static_cast<std::size_t>(a.rows() * a.cols()))
      throw std::invalid_argument("bigram adversary: dimension does not match vocabulary");
  }
  return a;
}

// ---------------------------------------------------------------------------
// Key=value config files.

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0;
  for (auto line : lines_of(text)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Run directories.
//
//   config.txt            method and config echo (key=value)
//   epochs.tsv            epoch, train_loss, valid_loss, valid_error, valid_kl
//   valid_stats.tsv       epoch, index, group, log_weight, loss, error
//   checkpoints/model_<epoch>.txt
//   adversary_psi0.txt, adversary_final.txt   (parametric adversaries only)

inline void write_run_history(const fs::path& dir, const RunHistory& h) {
  fs::create_directories(dir / "checkpoints");
  auto config = h.config;
  config["method"] = h.method;
  config["valid_fingerprint"] = std::to_string(h.valid_fingerprint);
  write_file(dir / "config.txt", format_key_values(config));

  std::string epochs = "epoch\ttrain_loss\tvalid_loss\tvalid_error\tvalid_kl\n";
  for (const auto& s : h.stats)
    epochs += std::to_string(s.epoch) + '\t' + format_real(s.train_loss) + '\t' + format_real(s.valid_loss) + '\t' +
              format_real(s.valid_error) + '\t' + format_real(s.valid_kl) + '\n';
  write_file(dir / "epochs.tsv", epochs);

  std::string stats = "epoch\tindex\tgroup\tlog_weight\tloss\terror\n";
  for (const auto& r : h.records) {
    for (std::size_t i = 0; i < r.losses.size(); ++i)
      stats += std::to_string(r.epoch) + '\t' + std::to_string(i) + '\t' + std::to_string(h.valid_groups.at(i)) + '\t' +
               format_real(r.log_weights[i]) + '\t' + format_real(r.losses[i]) + '\t' + format_real(r.errors[i]) + '\n';
    write_file(dir / "checkpoints" / ("model_" + std::to_string(r.epoch) + ".txt"), format_model(r.model));
  }
  write_file(dir / "valid_stats.tsv", stats);
  if (h.psi0) write_file(dir / "adversary_psi0.txt", format_adversary(h.psi0->params()));
  if (h.final_adversary) write_file(dir / "adversary_final.txt", format_adversary(*h.final_adversary));
}

inline RunHistory read_run_history(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a run directory: " + dir.string());
  RunHistory h;
  h.config = parse_key_values(read_file(dir / "config.txt"));
  h.method = h.config.at("method");
  h.valid_fingerprint = std::stoull(h.config.at("valid_fingerprint"));
  h.config.erase("method");
  h.config.erase("valid_fingerprint");

  const auto epoch_lines = lines_of(read_file(dir / "epochs.tsv"));
  for (std::size_t i = 1; i < epoch_lines.size(); ++i) {
    if (epoch_lines[i].empty()) continue;
    const auto c = split(epoch_lines[i], '\t');
    if (c.size() != 5) throw std::invalid_argument("epochs.tsv: expected 5 columns");
    h.stats.push_back(EpochStats{static_cast<int>(parse_int(c[0])), parse_real(c[1]), parse_real(c[2]),
                                 parse_real(c[3]), parse_real(c[4])});
  }

  const auto stat_lines = lines_of(read_file(dir / "valid_stats.tsv"));
  for (std::size_t i = 1; i < stat_lines.size(); ++i) {
    if (stat_lines[i].empty()) continue;
    const auto c = split(stat_lines[i], '\t');
    if (c.size() != 6) throw std::invalid_argument("valid_stats.tsv: expected 6 columns");
    const int epoch = static_cast<int>(parse_int(c[0]));
    const auto index = static_cast<std::size_t>(parse_int(c[1]));
    if (h.records.empty() || h.records.back().epoch != epoch) {
      h.records.push_back(CheckpointRecord{});
      h.records.back().epoch = epoch;
    }
    auto& r = h.records.back();
    if (index != r.losses.size()) throw std::invalid_argument("valid_stats.tsv: rows out of order");
    if (h.records.size() == 1) h.valid_groups.push_back(static_cast<GroupId>(parse_int(c[2])));
    r.log_weights.push_back(parse_real(c[3]));
    r.losses.push_back(parse_real(c[4]));
    r.errors.push_back(parse_real(c[5]));
  }
  for (auto& r : h.records)
    r.model = parse_model(read_file(dir / "checkpoints" / ("model_" + std::to_string(r.epoch) + ".txt")));
  if (h.records.empty()) throw std::invalid_argument("run directory has no checkpoints");
  h.final_model = h.records.back().model;
  if (fs::exists(dir / "adversary_psi0.txt"))
    h.psi0 = AdversarySnapshot(parse_adversary(read_file(dir / "adversary_psi0.txt")));
  if (fs::exists(dir / "adversary_final.txt")) h.final_adversary = parse_adversary(read_file(dir / "adversary_final.txt"));
  return h;
}

}  // namespace pdro::io

#endif  // PDRO_IO_HPP
