#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trojanlens/attention_analysis.hpp"
#include "trojanlens/detectors.hpp"
#include "trojanlens/hashing.hpp"
#include "trojanlens/head_functions.hpp"
#include "trojanlens/zoo.hpp"

namespace trojanlens {

inline constexpr const char* kToolVersion = "trojanlens 0.1.0";

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DetectorSettings {
  std::string method = "enumerate";
  double flip_threshold = 0.5;
  std::size_t folds = 5;
  MarginConfig margin;
  ReverseConfig reverse;
};

struct RunConfig {
  std::uint64_t seed = 1;  // master seed; overrides zoo.seed
  ZooConfig zoo;
  HeadCriteria criteria;
  double differing_delta = 0.1;
  double distribution_threshold = 0.1;
  std::size_t attribution_steps = 20;
  std::size_t attribution_sentences = 10;
  std::size_t kde_points = 200;
  DetectorSettings detector;

  void validate() const {
    zoo.validate();
    try {
      criteria.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(differing_delta >= 0.0)) throw ConfigError("differing_delta must be non-negative");
    if (!(distribution_threshold >= 0.0 && distribution_threshold <= 1.0)) throw ConfigError("distribution_threshold must lie in [0, 1]");
    if (attribution_steps < 1) throw ConfigError("attribution_steps must be at least 1");
    if (kde_points < 2) throw ConfigError("kde_points must be at least 2");
    if (detector.method != "naive" && detector.method != "enumerate" && detector.method != "reverse")
      throw ConfigError("unknown detector method '" + detector.method + "'");
    if (!(detector.flip_threshold > 0.0 && detector.flip_threshold <= 1.0)) throw ConfigError("flip_threshold must lie in (0, 1]");
    if (detector.folds < 2) throw ConfigError("folds must be at least 2");
    const ReverseConfig& r = detector.reverse;
    if (r.steps < 1 || r.batch < 1 || r.restarts < 1 || r.lengths.empty()) throw ConfigError("invalid reverse-engineering settings");
    if (!(r.lr > 0.0 && r.temperature_start > 0.0 && r.temperature_end > 0.0)) throw ConfigError("reverse-engineering rates must be positive");
    for (std::size_t len : r.lengths)
      if (len < 1 || len + 3 > zoo.model.max_seq_len) throw ConfigError("reverse-engineering trigger length out of range");
  }
};

inline void to_json(nlohmann::json& j, const HeadCriteria& c) {
  j = {{"majority_ratio", c.majority_ratio}, {"large_attention", c.large_attention}, {"min_sentences_ratio", c.min_sentences_ratio}};
}
inline void from_json(const nlohmann::json& j, HeadCriteria& c) {
  c.majority_ratio = j.value("majority_ratio", c.majority_ratio);
  c.large_attention = j.value("large_attention", c.large_attention);
  c.min_sentences_ratio = j.value("min_sentences_ratio", c.min_sentences_ratio);
}

inline void to_json(nlohmann::json& j, const ReverseConfig& r) {
  j = {{"steps", r.steps},
       {"lr", r.lr},
       {"temperature_start", r.temperature_start},
       {"temperature_end", r.temperature_end},
       {"batch", r.batch},
       {"lengths", r.lengths},
       {"restarts", r.restarts},
       {"max_divergence_retries", r.max_divergence_retries}};
}
inline void from_json(const nlohmann::json& j, ReverseConfig& r) {
  r.steps = j.value("steps", r.steps);
  r.lr = j.value("lr", r.lr);
  r.temperature_start = j.value("temperature_start", r.temperature_start);
  r.temperature_end = j.value("temperature_end", r.temperature_end);
  r.batch = j.value("batch", r.batch);
  r.lengths = j.value("lengths", r.lengths);
  r.restarts = j.value("restarts", r.restarts);
  r.max_divergence_retries = j.value("max_divergence_retries", r.max_divergence_retries);
}

inline void to_json(nlohmann::json& j, const DetectorSettings& d) {
  j = {{"method", d.method},
       {"flip_threshold", d.flip_threshold},
       {"folds", d.folds},
       {"margin", {{"lambda", d.margin.lambda}, {"epochs", d.margin.epochs}}},
       {"reverse", d.reverse}};
}
inline void from_json(const nlohmann::json& j, DetectorSettings& d) {
  d.method = j.value("method", d.method);
  d.flip_threshold = j.value("flip_threshold", d.flip_threshold);
  d.folds = j.value("folds", d.folds);
  if (j.contains("margin")) {
    d.margin.lambda = j.at("margin").value("lambda", d.margin.lambda);
    d.margin.epochs = j.at("margin").value("epochs", d.margin.epochs);
  }
  if (j.contains("reverse")) d.reverse = j.at("reverse").get<ReverseConfig>();
}

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  j = {{"seed", r.seed},
       {"zoo", r.zoo},
       {"criteria", r.criteria},
       {"differing_delta", r.differing_delta},
       {"distribution_threshold", r.distribution_threshold},
       {"attribution_steps", r.attribution_steps},
       {"attribution_sentences", r.attribution_sentences},
       {"kde_points", r.kde_points},
       {"detector", r.detector}};
}
inline void from_json(const nlohmann::json& j, RunConfig& r) {
  r.seed = j.value("seed", r.seed);
  if (j.contains("zoo")) r.zoo = j.at("zoo").get<ZooConfig>();
  if (j.contains("criteria")) r.criteria = j.at("criteria").get<HeadCriteria>();
  r.differing_delta = j.value("differing_delta", r.differing_delta);
  r.distribution_threshold = j.value("distribution_threshold", r.distribution_threshold);
  r.attribution_steps = j.value("attribution_steps", r.attribution_steps);
  r.attribution_sentences = j.value("attribution_sentences", r.attribution_sentences);
  r.kde_points = j.value("kde_points", r.kde_points);
  if (j.contains("detector")) r.detector = j.at("detector").get<DetectorSettings>();
  r.zoo.seed = r.seed;
}

inline RunConfig parse_run_config(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  std::string text;
  try {
    text = read_file(p);
  } catch (const std::runtime_error&) {
    throw ConfigError("cannot read config file " + p.string());
  }
  return parse_run_config(text);
}

inline std::string run_config_hash(const RunConfig& r) { return sha256_hex(nlohmann::json(r).dump()).substr(0, 16); }

// ---------------------------------------------------------------------------
// Output conventions
// ---------------------------------------------------------------------------

inline nlohmann::json report_header(const RunConfig& r, const std::string& kind) {
  return {{"kind", kind}, {"tool_version", kToolVersion}, {"run_config_hash", run_config_hash(r)}};
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  write_file(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw ReportError(p.string() + ": " + e.what());
  }
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

// CSV with a comment line carrying the tool version and config hash.
class CsvWriter {
 public:
  CsvWriter(const RunConfig& r, std::vector<std::string> columns) {
    out_ << "# tool_version=" << kToolVersion << ",run_config_hash=" << run_config_hash(r) << "\n";
    row(columns);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }
  void save(const std::filesystem::path& p) const {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_file(p, out_.str());
  }

 private:
  std::ostringstream out_;
};

inline void to_json(nlohmann::json& j, const HeadId& h) { j = {h.layer, h.head}; }
inline void from_json(const nlohmann::json& j, HeadId& h) {
  h.layer = j.at(0).get<std::size_t>();
  h.head = j.at(1).get<std::size_t>();
}

inline nlohmann::json head_map_json(const HeadMap& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    nlohmann::json r = nlohmann::json::array();
    for (std::size_t h = 0; h < m.n_heads; ++h) r.push_back(m.at({l, h}));
    rows.push_back(r);
  }
  return rows;
}

inline void save_head_map_csv(const RunConfig& r, const HeadMap& m, const std::filesystem::path& p) {
  std::vector<std::string> cols = {"layer"};
  for (std::size_t h = 0; h < m.n_heads; ++h) cols.push_back("head" + std::to_string(h));
  CsvWriter csv(r, cols);
  for (std::size_t l = 0; l < m.n_layers; ++l) {
    std::vector<std::string> cells = {std::to_string(l)};
    for (std::size_t h = 0; h < m.n_heads; ++h) cells.push_back(fmt(m.at({l, h})));
    csv.row(cells);
  }
  csv.save(p);
}

// ---------------------------------------------------------------------------
// Kernel density estimate for plot data
// ---------------------------------------------------------------------------

// Silverman's rule of thumb: 0.9 · min(sd, IQR / 1.34) · n^(−1/5).
inline double silverman_bandwidth(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.05;
  std::sort(x.begin(), x.end());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n - 1));
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  return h > 1e-6 ? h : 1e-3;  // degenerate sample
}

inline std::vector<double> gaussian_kde(const std::vector<double>& samples, std::span<const double> grid, double bandwidth) {
  std::vector<double> out(grid.size(), 0.0);
  if (samples.empty()) return out;
  const double norm = 1.0 / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double s = 0.0;
    for (double v : samples) {
      const double z = (grid[i] - v) / bandwidth;
      s += std::exp(-0.5 * z * z);
    }
    out[i] = s * norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report schemas
// ---------------------------------------------------------------------------

// Returns a list of problems; empty means the document matches its kind's schema.
inline std::vector<std::string> validate_report(const nlohmann::json& j) {
  std::vector<std::string> errs;
  auto need = [&](const nlohmann::json& obj, const std::string& key, nlohmann::json::value_t type, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
      errs.push_back(where + ": missing '" + key + "'");
      return false;
    }
    const auto t = obj.at(key).type();
    const bool number = type == nlohmann::json::value_t::number_float &&
                        (t == nlohmann::json::value_t::number_float || t == nlohmann::json::value_t::number_integer ||
                         t == nlohmann::json::value_t::number_unsigned);
    if (t != type && !number) {
      errs.push_back(where + ": '" + key + "' has the wrong type");
      return false;
    }
    return true;
  };
  using vt = nlohmann::json::value_t;
  if (!j.is_object()) return {"document is not an object"};
  need(j, "tool_version", vt::string, "header");
  need(j, "run_config_hash", vt::string, "header");
  if (!need(j, "kind", vt::string, "header")) return errs;
  const std::string kind = j.at("kind");
  if (kind == "characterize") {
    for (const char* cls : {"semantic", "specific"}) {
      if (!need(j, cls, vt::object, "characterize")) continue;
      for (const char* pop : {"benign", "trojan"}) {
        const std::string where = std::string(cls) + "." + pop;
        if (!need(j.at(cls), pop, vt::object, cls)) continue;
        const auto& row = j.at(cls).at(pop);
        need(row, "models", vt::number_float, where);
        need(row, "with_heads", vt::number_float, where);
        need(row, "redirecting", vt::number_float, where);
        need(row, "model_s", vt::number_float, where);
        need(row, "sentences_r", vt::number_float, where);
        need(row, "attention_r", vt::number_float, where);
        if (!row.contains("models_r")) errs.push_back(where + ": missing 'models_r'");
      }
      if (j.contains(cls) && !j.at(cls).contains("chi_square")) errs.push_back(std::string(cls) + ": missing 'chi_square'");
    }
    need(j, "trigger_heads", vt::object, "characterize");
    if (need(j, "models", vt::array, "characterize"))
      for (const auto& m : j.at("models")) {
        need(m, "model_id", vt::string, "models[]");
        need(m, "population", vt::string, "models[]");
        need(m, "semantic_heads", vt::array, "models[]");
        need(m, "specific_heads", vt::object, "models[]");
        need(m, "trigger_heads", vt::array, "models[]");
      }
  } else if (kind == "analyze") {
    need(j, "head_map_benign", vt::array, "analyze");
    need(j, "head_map_trojan", vt::array, "analyze");
    need(j, "differing_heads", vt::array, "analyze");
    need(j, "distribution", vt::object, "analyze");
    need(j, "head_values", vt::array, "analyze");
  } else if (kind == "detect") {
    need(j, "method", vt::string, "detect");
    need(j, "results", vt::array, "detect");
    need(j, "metrics", vt::array, "detect");
  } else if (kind != "generate-zoo") {
    errs.push_back("unknown report kind '" + kind + "'");
  }
  return errs;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline std::string population(bool trojan) { return trojan ? "trojan" : "benign"; }

// The zoo's own generation settings take precedence over the run file.
inline RunConfig bind_to_zoo(RunConfig r, const Zoo& zoo) {
  r.zoo = zoo.manifest().config;
  r.seed = r.zoo.seed;
  return r;
}

inline ZooManifest cmd_generate_zoo(RunConfig r, const std::filesystem::path& zoo_dir, const ZooProgress& progress = {}) {
  r.zoo.seed = r.seed;
  r.validate();
  ZooManifest m = generate_zoo(r.zoo, zoo_dir, progress);
  nlohmann::json j = report_header(r, "generate-zoo");
  j["run_config"] = r;
  j["manifest_sha256"] = sha256_file((zoo_dir / kManifestFile).string());
  write_json_file(zoo_dir / "run_config.json", j);
  return m;
}

struct AnalysisResult {
  HeadMap benign, trojan;
  std::vector<HeadDifference> differing;
  MaxDistribution dist_benign, dist_trojan;
  std::vector<std::pair<const ZooEntry*, HeadMap>> per_model;
};

// Per model: capture attention on the dev sentences carrying the model's probe
// trigger, then reduce.
inline AnalysisResult analyze_zoo(const RunConfig& r, const Zoo& zoo) {
  const auto members = zoo.members();
  std::vector<HeadMap> maps(members.size());
  std::vector<MaxDistribution> dists(members.size());
  parallel_for(members.size(), [&](std::size_t i) {
    const TransformerModel m = zoo.load_blind(*members[i]);
    const TriggerSpec probe = probe_trigger(zoo.manifest().config, zoo.lexicon(), *members[i]);
    const TriggeredInputs in = triggered_inputs(zoo.dev().examples, probe, m.config.max_seq_len);
    const ModelAttention cap = capture_attention(m, in.examples);
    maps[i] = average_max_map(cap);
    dists[i] = global_max_distribution(std::span(&cap, 1), r.distribution_threshold);
  });
  AnalysisResult a;
  const std::size_t L = zoo.manifest().config.model.n_layers, H = zoo.manifest().config.model.n_heads;
  a.benign = HeadMap(L, H, "benign");
  a.trojan = HeadMap(L, H, "trojan");
  std::size_t nb = 0, nt = 0;
  for (MaxDistribution* d : {&a.dist_benign, &a.dist_trojan}) {
    d->threshold = r.distribution_threshold;
    d->histogram.assign(100, 0);
  }
  for (std::size_t i = 0; i < members.size(); ++i) {
    const bool t = members[i]->is_trojan;
    HeadMap& acc = t ? a.trojan : a.benign;
    for (std::size_t k = 0; k < acc.values.size(); ++k) acc.values[k] += maps[i].values[k];
    (t ? nt : nb)++;
    MaxDistribution& d = t ? a.dist_trojan : a.dist_benign;
    d.samples.insert(d.samples.end(), dists[i].samples.begin(), dists[i].samples.end());
    for (std::size_t b = 0; b < d.histogram.size(); ++b) d.histogram[b] += dists[i].histogram[b];
    a.per_model.emplace_back(members[i], maps[i]);
  }
  if (!nb || !nt) throw std::invalid_argument("analysis needs both benign and trojan models");
  for (double& v : a.benign.values) v /= static_cast<double>(nb);
  for (double& v : a.trojan.values) v /= static_cast<double>(nt);
  a.differing = differing_heads_ranked(a.trojan, a.benign, r.differing_delta);
  return a;
}

inline nlohmann::json distribution_json(const MaxDistribution& d) {
  double lo = 1.0, hi = 0.0;
  for (double v : d.samples) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {{"threshold", d.threshold},
          {"count", d.samples.size()},
          {"min", d.samples.empty() ? nlohmann::json(nullptr) : nlohmann::json(lo)},
          {"max", d.samples.empty() ? nlohmann::json(nullptr) : nlohmann::json(hi)},
          {"histogram", d.histogram}};
}

inline nlohmann::json cmd_analyze(RunConfig r, const Zoo& zoo, const std::filesystem::path& out) {
  r = bind_to_zoo(std::move(r), zoo);
  r.validate();
  const AnalysisResult a = analyze_zoo(r, zoo);
  nlohmann::json j = report_header(r, "analyze");
  j["head_map_benign"] = head_map_json(a.benign);
  j["head_map_trojan"] = head_map_json(a.trojan);
  j["differing_delta"] = r.differing_delta;
  nlohmann::json diff = nlohmann::json::array();
  for (const HeadDifference& d : a.differing) diff.push_back({{"head", d.head}, {"difference", d.difference}});
  j["differing_heads"] = diff;
  j["distribution"] = {{"benign", distribution_json(a.dist_benign)}, {"trojan", distribution_json(a.dist_trojan)}};
  nlohmann::json values = nlohmann::json::array();
  for (const auto& [e, m] : a.per_model)
    values.push_back({{"model_id", e->model_id}, {"population", population(e->is_trojan)}, {"values", head_map_json(m)}});
  j["head_values"] = values;

  std::filesystem::create_directories(out);
  write_json_file(out / "analysis.json", j);
  save_head_map_csv(r, a.benign, out / "head_map_benign.csv");
  save_head_map_csv(r, a.trojan, out / "head_map_trojan.csv");
  for (const auto& [name, d] : {std::pair{"benign", &a.dist_benign}, std::pair{"trojan", &a.dist_trojan}}) {
    CsvWriter csv(r, {"bin_lower", "bin_upper", "count"});
    const double w = (1.0 - d->threshold) / static_cast<double>(d->histogram.size());
    for (std::size_t b = 0; b < d->histogram.size(); ++b)
      csv.row({fmt(d->threshold + w * static_cast<double>(b)), fmt(d->threshold + w * static_cast<double>(b + 1)),
               std::to_string(d->histogram[b])});
    csv.save(out / (std::string("distribution_") + name + ".csv"));
  }
  return j;
}

inline nlohmann::json redirection_json(const Redirection& r) {
  return {{"models_r", r.models_r},
          {"sentences_r", r.sentences_r},
          {"sentences_r_best_head", r.sentences_r_model},
          {"attention_r", r.attention_r},
          {"redirecting_heads", r.redirecting_heads}};
}

inline nlohmann::json row_json(const PopulationRow& row) {
  return {{"models", row.models},
          {"with_heads", row.with_heads},
          {"redirecting", row.redirecting},
          {"model_s", row.model_s},
          {"models_r", row.models_r ? nlohmann::json(*row.models_r) : nlohmann::json(nullptr)},
          {"sentences_r", row.sentences_r},
          {"attention_r", row.attention_r}};
}

inline nlohmann::json summary_json(const HeadClassSummary& s) {
  nlohmann::json chi = nullptr;
  if (s.chi_square) chi = {{"statistic", s.chi_square->statistic}, {"p_value", s.chi_square->p_value}};
  return {{"benign", row_json(s.benign)}, {"trojan", row_json(s.trojan)}, {"chi_square", chi}};
}

struct AttributionSummary {
  std::vector<std::pair<std::string, OverwriteCheck>> trojans;
  std::size_t passing = 0;  // models whose overwrite ratio exceeds one half
};

inline AttributionSummary attribution_summary(const RunConfig& r, const Zoo& zoo, const PopulationReport& p) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < p.models.size(); ++i)
    if (p.models[i].is_trojan) idx.push_back(i);
  const auto members = zoo.members();
  std::vector<OverwriteCheck> checks(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) {
    const HeadFunctionReport& rep = p.models[idx[k]];
    const TransformerModel m = zoo.load_blind(*members[idx[k]]);
    checks[k] = attribution_overwrite(m, rep.probe, zoo.dev(), zoo.lexicon(), rep.semantic_heads, r.attribution_sentences,
                                      r.attribution_steps);
  });
  AttributionSummary s;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    s.trojans.emplace_back(p.models[idx[k]].model_id, checks[k]);
    s.passing += checks[k].ratio() > 0.5;
  }
  return s;
}

inline nlohmann::json cmd_characterize(RunConfig r, const Zoo& zoo, const std::filesystem::path& out) {
  r = bind_to_zoo(std::move(r), zoo);
  r.validate();
  const PopulationReport p = characterize_population(zoo, r.criteria);
  const AttributionSummary attr = attribution_summary(r, zoo, p);

  nlohmann::json j = report_header(r, "characterize");
  j["criteria"] = r.criteria;
  j["trigger_heads"] = {{"benign", {{"models", p.trigger_benign.models}, {"with_heads", p.trigger_benign.with_heads}, {"rate", p.trigger_benign.model_s}}},
                        {"trojan", {{"models", p.trigger_trojan.models}, {"with_heads", p.trigger_trojan.with_heads}, {"rate", p.trigger_trojan.model_s}}}};
  j["semantic"] = summary_json(p.semantic);
  j["specific"] = summary_json(p.specific);
  nlohmann::json models = nlohmann::json::array();
  for (const HeadFunctionReport& m : p.models) {
    nlohmann::json spec = nlohmann::json::object();
    for (const auto& [tok, heads] : m.specific_heads) spec[tok] = heads;
    models.push_back({{"model_id", m.model_id},
                      {"population", population(m.is_trojan)},
                      {"probe_trigger", m.probe},
                      {"trigger_heads", m.trigger_heads},
                      {"semantic_heads", m.semantic_heads},
                      {"specific_heads", spec},
                      {"semantic_redirection", redirection_json(m.semantic_redirection)},
                      {"specific_redirection", redirection_json(m.specific_redirection)}});
  }
  j["models"] = models;
  nlohmann::json at = nlohmann::json::array();
  for (const auto& [id, c] : attr.trojans)
    at.push_back({{"model_id", id}, {"sentences", c.sentences}, {"clean_semantic", c.clean_semantic},
                  {"triggered_trigger", c.triggered_trigger}, {"both", c.both}, {"ratio", c.ratio()}});
  j["attribution"] = {{"steps", r.attribution_steps}, {"models", at}, {"passing", attr.passing}, {"trojans", attr.trojans.size()}};

  std::filesystem::create_directories(out);
  write_json_file(out / "characterize.json", j);
  CsvWriter csv(r, {"model_id", "population", "head_class", "has_heads", "models_r", "sentences_r", "attention_r"});
  for (const HeadFunctionReport& m : p.models)
    for (const auto& [cls, has, red] : {std::tuple{"semantic", !m.semantic_heads.empty(), &m.semantic_redirection},
                                        std::tuple{"specific", !m.specific_heads.empty(), &m.specific_redirection}})
      csv.row({m.model_id, population(m.is_trojan), cls, has ? "1" : "0", red->models_r ? "1" : "0", fmt(red->sentences_r),
               fmt(red->attention_r)});
  csv.save(out / "redirection_samples.csv");
  return j;
}

inline nlohmann::json detection_json(const DetectionResult& d, const Lexicon& lex) {
  std::vector<std::string> names;
  for (TokenId t : d.candidate) names.push_back(lex.name(t));
  nlohmann::json j = {{"model_id", d.model_id},
                      {"verdict", d.trojan ? "trojan" : "benign"},
                      {"score", d.score},
                      {"threshold", d.threshold},
                      {"candidate", d.candidate},
                      {"candidate_names", names},
                      {"candidate_target", d.candidate_target},
                      {"flip_ratio", d.flip_ratio},
                      {"runs", d.runs}};
  j["relaxed_loss"] = d.relaxed_loss ? nlohmann::json(*d.relaxed_loss) : nlohmann::json(nullptr);
  if (d.features)
    j["features"] = {{"trigger_heads_count", d.features->trigger_heads_count},
                     {"trigger_to_cls", d.features->trigger_to_cls},
                     {"avg_over_tokens", d.features->avg_over_tokens}};
  return j;
}

inline nlohmann::json metrics_json(const std::string& name, const DetectorMetrics& m) {
  return {{"name", name},          {"acc", m.acc}, {"auc", m.auc}, {"recall", m.recall}, {"precision", m.precision},
          {"f1", m.f1},            {"tp", m.tp},   {"fp", m.fp},   {"tn", m.tn},         {"fn", m.fn}};
}

struct DetectOutput {
  std::vector<DetectionResult> results;
  std::vector<std::pair<std::string, DetectorMetrics>> metrics;  // one row, or one per feature family
};

// Scores every zoo member, then joins with ground truth for the metrics.
inline DetectOutput run_detector(const RunConfig& r, const Zoo& zoo) {
  const auto members = zoo.members();
  const Lexicon& lex = zoo.lexicon();
  const Dataset& dev = zoo.dev();
  DetectOutput out;
  out.results.resize(members.size());
  std::map<std::string, bool> truth;
  for (const ZooEntry* e : members) truth[e->model_id] = e->is_trojan;
  const std::string& method = r.detector.method;

  if (method == "naive") {
    // The ground-truth trigger is part of this detector's protocol.
    parallel_for(members.size(), [&](std::size_t i) {
      const TransformerModel m = zoo.load_blind(*members[i]);
      DetectionResult& d = out.results[i];
      d.model_id = m.meta.model_id;
      d.features = naive_features(m, probe_trigger(zoo.manifest().config, lex, *members[i]), dev, r.criteria);
    });
    std::vector<bool> labels;
    for (const ZooEntry* e : members) labels.push_back(e->is_trojan);
    for (FeatureFamily fam : {FeatureFamily::trigger_heads, FeatureFamily::trigger_to_cls, FeatureFamily::avg_over_tokens, FeatureFamily::all}) {
      std::vector<std::vector<double>> x;
      for (const DetectionResult& d : out.results) x.push_back(select_features(*d.features, fam));
      const std::vector<double> scores = cross_validated_scores(x, labels, r.detector.folds, derive_seed(r.seed, 0xde7), r.detector.margin);
      std::vector<DetectionResult> fam_results = out.results;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        fam_results[i].score = scores[i];
        fam_results[i].threshold = 0.0;
        fam_results[i].trojan = scores[i] >= 0.0;
      }
      out.metrics.emplace_back(to_string(fam), evaluate_detector(fam_results, truth));
      if (fam == FeatureFamily::trigger_to_cls)
        for (std::size_t i = 0; i < scores.size(); ++i) {
          out.results[i].score = scores[i];
          out.results[i].threshold = 0.0;
          out.results[i].trojan = scores[i] >= 0.0;
        }
    }
    return out;
  }

  parallel_for(members.size(), [&](std::size_t i) {
    const TransformerModel m = zoo.load_blind(*members[i]);
    if (method == "enumerate") {
      out.results[i] = enumerate_detect(m, lex.neutral, dev, r.detector.flip_threshold);
    } else {
      ReverseConfig rc = r.detector.reverse;
      rc.flip_threshold = r.detector.flip_threshold;
      out.results[i] = reverse_engineer_detect(m, lex.neutral, dev, derive_seed(r.seed, 0x2e5e + i), rc);
    }
  });
  out.metrics.emplace_back(method, evaluate_detector(out.results, truth));
  return out;
}

inline nlohmann::json cmd_detect(RunConfig r, const Zoo& zoo, const std::filesystem::path& out) {
  r = bind_to_zoo(std::move(r), zoo);
  r.validate();
  const DetectOutput d = run_detector(r, zoo);
  nlohmann::json j = report_header(r, "detect");
  j["method"] = r.detector.method;
  nlohmann::json results = nlohmann::json::array();
  for (const DetectionResult& res : d.results) results.push_back(detection_json(res, zoo.lexicon()));
  j["results"] = results;
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& [name, m] : d.metrics) metrics.push_back(metrics_json(name, m));
  j["metrics"] = metrics;

  const bool to_file = out.extension() == ".json";
  const std::filesystem::path json_path = to_file ? out : out / ("detect_" + r.detector.method + ".json");
  write_json_file(json_path, j);
  CsvWriter csv(r, {"name", "acc", "auc", "recall", "precision", "f1", "tp", "fp", "tn", "fn"});
  for (const auto& [name, m] : d.metrics)
    csv.row({name, fmt(m.acc), fmt(m.auc), fmt(m.recall), fmt(m.precision), fmt(m.f1), std::to_string(m.tp), std::to_string(m.fp),
             std::to_string(m.tn), std::to_string(m.fn)});
  std::filesystem::path csv_path = json_path;
  csv_path.replace_extension(".csv");
  csv.save(csv_path);
  return j;
}

// Reads whatever reports exist in `run_dir` and writes summary.txt plus KDE
// plot data for the differing heads.
inline std::string cmd_report(const RunConfig& r, const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw std::invalid_argument("report: " + run_dir.string() + " is not a directory");
  std::vector<std::pair<std::string, nlohmann::json>> docs;
  for (const char* name : {"analysis.json", "characterize.json", "detect_naive.json", "detect_enumerate.json", "detect_reverse.json"})
    if (fs::exists(run_dir / name)) {
      nlohmann::json j = read_json_file(run_dir / name);
      const auto errs = validate_report(j);
      if (!errs.empty()) throw ReportError(std::string(name) + ": " + errs.front());
      docs.emplace_back(name, std::move(j));
    }
  if (docs.empty())
    throw std::invalid_argument("report: " + run_dir.string() +
                                " holds no analysis.json, characterize.json or detect_*.json; run analyze, characterize or detect first");

  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << kToolVersion << "\nrun_config_hash " << run_config_hash(r) << "\n";
  for (const auto& [name, j] : docs) {
    s << "\n== " << name << " (run_config_hash " << j.at("run_config_hash").get<std::string>() << ")\n";
    const std::string kind = j.at("kind");
    if (kind == "analyze") {
      s << "differing heads (trojan - benign > " << j.value("differing_delta", 0.1) << "):";
      for (const auto& d : j.at("differing_heads"))
        s << " L" << d.at("head").at(0).get<std::size_t>() << "H" << d.at("head").at(1).get<std::size_t>() << "(+"
          << d.at("difference").get<double>() << ")";
      s << "\n";
      for (const char* pop : {"benign", "trojan"}) {
        const auto& d = j.at("distribution").at(pop);
        s << pop << " thresholded max-attention samples: " << d.at("count").get<std::size_t>() << "\n";
      }
      // KDE of per-model average-max values in each differing head.
      const std::size_t points = r.kde_points;
      std::vector<double> grid(points);
      for (std::size_t i = 0; i < points; ++i) grid[i] = static_cast<double>(i) / static_cast<double>(points - 1);
      for (const auto& d : j.at("differing_heads")) {
        const HeadId h = d.at("head").get<HeadId>();
        std::map<std::string, std::vector<double>> samples;
        for (const auto& m : j.at("head_values"))
          samples[m.at("population").get<std::string>()].push_back(m.at("values").at(h.layer).at(h.head).get<double>());
        CsvWriter csv(r, {"x", "benign", "trojan"});
        const auto kb = gaussian_kde(samples["benign"], grid, silverman_bandwidth(samples["benign"]));
        const auto kt = gaussian_kde(samples["trojan"], grid, silverman_bandwidth(samples["trojan"]));
        for (std::size_t i = 0; i < points; ++i) csv.row({fmt(grid[i]), fmt(kb[i]), fmt(kt[i])});
        csv.save(run_dir / "kde" / ("kde_" + h.str() + ".csv"));
      }
    } else if (kind == "characterize") {
      // Recount from the per-model entries rather than trusting the stored rows.
      for (const char* cls : {"semantic", "specific"}) {
        s << cls << " heads:\n";
        for (const char* pop : {"benign", "trojan"}) {
          std::size_t n = 0, with = 0, red = 0;
          double att = 0.0, sent = 0.0;
          for (const auto& m : j.at("models")) {
            if (m.at("population") != pop) continue;
            ++n;
            const bool has = std::string(cls) == "semantic" ? !m.at("semantic_heads").empty() : !m.at("specific_heads").empty();
            if (!has) continue;
            ++with;
            const auto& rd = m.at(std::string(cls) + "_redirection");
            red += rd.at("models_r").get<bool>();
            att += rd.at("attention_r").get<double>();
            sent += rd.at("sentences_r").get<double>();
          }
          s << "  " << pop << ": model_s " << (n ? 100.0 * static_cast<double>(with) / static_cast<double>(n) : 0.0) << "% (" << with
            << "/" << n << "), models_r ";
          if (with)
            s << 100.0 * static_cast<double>(red) / static_cast<double>(with) << "% (" << red << "/" << with << "), sentences_r "
              << sent / static_cast<double>(with) << ", attention_r " << att / static_cast<double>(with) << "\n";
          else
            s << "undefined (no model with heads)\n";
        }
        const auto& chi = j.at(cls).at("chi_square");
        if (chi.is_null())
          s << "  chi-square on models_r: undefined (zero margin)\n";
        else
          s << "  chi-square on models_r: " << chi.at("statistic").get<double>() << ", p = " << std::setprecision(6)
            << chi.at("p_value").get<double>() << std::setprecision(4) << "\n";
      }
      const auto& th = j.at("trigger_heads");
      s << "trigger heads: benign " << th.at("benign").at("with_heads").get<std::size_t>() << "/"
        << th.at("benign").at("models").get<std::size_t>() << ", trojan " << th.at("trojan").at("with_heads").get<std::size_t>() << "/"
        << th.at("trojan").at("models").get<std::size_t>() << "\n";
      if (j.contains("attribution"))
        s << "attribution overwrite: " << j.at("attribution").at("passing").get<std::size_t>() << "/"
          << j.at("attribution").at("trojans").get<std::size_t>() << " trojan models\n";
    } else if (kind == "detect") {
      s << "method " << j.at("method").get<std::string>() << "\n";
      s << "  name              ACC     AUC     Recall  Prec.   F1\n";
      for (const auto& m : j.at("metrics")) {
        s << "  " << std::left << std::setw(16) << m.at("name").get<std::string>() << std::right;
        for (const char* k : {"acc", "auc", "recall", "precision", "f1"}) s << "  " << m.at(k).get<double>();
        s << "\n";
      }
    }
  }
  const std::string text = s.str();
  write_file(run_dir / "summary.txt", text);
  return text;
}

}  // namespace trojanlens
