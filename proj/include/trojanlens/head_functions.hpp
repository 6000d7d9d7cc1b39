#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlens/attention_analysis.hpp"
#include "trojanlens/corpus.hpp"
#include "trojanlens/minibert.hpp"
#include "trojanlens/zoo.hpp"

namespace trojanlens {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thresholds of the majority-max rule. A head "targets" a position set on one
// sentence when more than `majority_ratio` of its query tokens (all of them when
// the ratio is 1) have their row maximum on one of those positions with a value
// of at least `large_attention`. It is reported when that holds on at least
// `min_sentences_ratio` of the sentences.
struct HeadCriteria {
  double majority_ratio = 0.5;
  double large_attention = 0.5;
  double min_sentences_ratio = 0.75;

  void validate() const {
    for (double v : {majority_ratio, large_attention, min_sentences_ratio})
      if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument("head criteria must lie in (0, 1]");
  }
};

using PositionSet = std::vector<std::size_t>;

inline bool contains_position(const PositionSet& set, std::size_t p) {
  return std::find(set.begin(), set.end(), p) != set.end();
}

inline bool majority_targets(const AttentionTensor& a, HeadId head, const PositionSet& targets, const HeadCriteria& c) {
  if (targets.empty()) return false;
  std::size_t hits = 0;
  for (const TokenMax& t : max_attention_per_token(a, head))
    if (t.value >= c.large_attention && contains_position(targets, t.key)) ++hits;
  const std::size_t n = a.n_tokens();
  return hits == n || static_cast<double>(hits) > c.majority_ratio * static_cast<double>(n);
}

// Fraction of sentences (with a non-empty target set) on which each head targets its positions.
inline HeadMap targeting_rate(std::span<const AttentionTensor> tensors, std::span<const PositionSet> targets,
                              const HeadCriteria& c) {
  if (tensors.size() != targets.size()) throw std::invalid_argument("targeting_rate: one position set per sentence");
  if (tensors.empty()) return {};
  HeadMap rate(tensors.front().layers(), tensors.front().heads());
  std::size_t counted = 0;
  for (std::size_t s = 0; s < tensors.size(); ++s) {
    if (targets[s].empty()) continue;
    ++counted;
    for (std::size_t l = 0; l < rate.n_layers; ++l)
      for (std::size_t h = 0; h < rate.n_heads; ++h)
        if (majority_targets(tensors[s], {l, h}, targets[s], c)) rate.at({l, h}) += 1.0;
  }
  if (counted)
    for (double& v : rate.values) v /= static_cast<double>(counted);
  return rate;
}

inline std::vector<HeadId> heads_meeting(const HeadMap& rate, double min_ratio) {
  std::vector<HeadId> out;
  for (std::size_t l = 0; l < rate.n_layers; ++l)
    for (std::size_t h = 0; h < rate.n_heads; ++h)
      if (rate.at({l, h}) > 0.0 && rate.at({l, h}) >= min_ratio - 1e-12) out.push_back({l, h});
  return out;
}

inline std::vector<HeadId> heads_targeting(std::span<const AttentionTensor> tensors, std::span<const PositionSet> targets,
                                           const HeadCriteria& c) {
  c.validate();
  return heads_meeting(targeting_rate(tensors, targets, c), c.min_sentences_ratio);
}

// Dev sentences with the trigger inserted, plus where it landed.
struct TriggeredInputs {
  std::vector<Example> examples;
  std::vector<PositionSet> trigger_positions;
};

inline TriggeredInputs triggered_inputs(std::span<const Example> clean, const TriggerSpec& trigger, std::size_t max_len) {
  TriggeredInputs out;
  for (const Example& ex : clean) {
    if (trigger.tokens.empty()) {
      out.examples.push_back(ex);
      out.trigger_positions.emplace_back();
      continue;
    }
    InsertedExample ins = insert_trigger_at(ex, trigger, max_len);
    PositionSet pos;
    for (std::size_t i = 0; i < trigger.tokens.size(); ++i) pos.push_back(ins.trigger_begin + i);
    out.examples.push_back(std::move(ins.example));
    out.trigger_positions.push_back(std::move(pos));
  }
  return out;
}

inline PositionSet positions_of(const Example& ex, const std::vector<TokenId>& sorted_set) {
  PositionSet p;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i)
    if (Lexicon::contains(sorted_set, ex.tokens[i])) p.push_back(i);
  return p;
}

inline PositionSet positions_of(const Example& ex, TokenId token) {
  PositionSet p;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i)
    if (ex.tokens[i] == token) p.push_back(i);
  return p;
}

inline std::vector<PositionSet> semantic_positions(std::span<const Example> clean, const Lexicon& lex) {
  std::vector<PositionSet> out;
  for (const Example& ex : clean) out.push_back(positions_of(ex, lex.strong_words(ex.label)));
  return out;
}

inline std::vector<HeadId> find_trigger_heads(const TransformerModel& model, const Dataset& dev, const TriggerSpec& trigger,
                                              const HeadCriteria& c = {}) {
  const TriggeredInputs in = triggered_inputs(dev.examples, trigger, model.config.max_seq_len);
  const ModelAttention cap = capture_attention(model, in.examples);
  return heads_targeting(cap.tensors, in.trigger_positions, c);
}

// Sentiment heads specialise in one polarity, so the sentence ratio is taken
// within each class and a head qualifies through either class.
inline std::vector<HeadId> semantic_heads_from(std::span<const AttentionTensor> tensors, std::span<const Example> clean,
                                               const Lexicon& lex, const HeadCriteria& c) {
  c.validate();
  if (tensors.size() != clean.size()) throw std::invalid_argument("semantic_heads_from: one tensor per sentence");
  std::vector<HeadId> out;
  for (int label : {0, 1}) {
    std::vector<AttentionTensor> t;
    std::vector<PositionSet> pos;
    for (std::size_t s = 0; s < clean.size(); ++s)
      if (clean[s].label == label) {
        t.push_back(tensors[s]);
        pos.push_back(positions_of(clean[s], lex.strong_words(label)));
      }
    for (HeadId h : heads_meeting(targeting_rate(t, pos, c), c.min_sentences_ratio)) out.push_back(h);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<HeadId> find_semantic_heads(const TransformerModel& model, const Dataset& clean_dev, const Lexicon& lex,
                                               const HeadCriteria& c = {}) {
  const ModelAttention cap = capture_attention(model, clean_dev.examples);
  return semantic_heads_from(cap.tensors, clean_dev.examples, lex, c);
}

inline constexpr std::array<const char*, 4> kSpecificNames{"[CLS]", "[SEP]", ",", "."};

using SpecificHeads = std::map<std::string, std::vector<HeadId>>;

inline SpecificHeads specific_heads_from(std::span<const AttentionTensor> tensors, std::span<const Example> clean,
                                         const Lexicon& lex, const HeadCriteria& c) {
  SpecificHeads out;
  for (std::size_t k = 0; k < lex.specific.size(); ++k) {
    std::vector<PositionSet> pos;
    for (const Example& ex : clean) pos.push_back(positions_of(ex, lex.specific[k]));
    auto heads = heads_targeting(tensors, pos, c);
    if (!heads.empty()) out[kSpecificNames[k]] = std::move(heads);
  }
  return out;
}

inline SpecificHeads find_specific_heads(const TransformerModel& model, const Dataset& clean_dev, const Lexicon& lex,
                                         const HeadCriteria& c = {}) {
  c.validate();
  const ModelAttention cap = capture_attention(model, clean_dev.examples);
  return specific_heads_from(cap.tensors, clean_dev.examples, lex, c);
}

// Union of the per-token specific heads, ordered.
inline std::vector<HeadId> all_specific_heads(const SpecificHeads& s) {
  std::vector<HeadId> out;
  for (const auto& [tok, heads] : s) out.insert(out.end(), heads.begin(), heads.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct Redirection {
  bool models_r = false;
  double sentences_r = 0.0;        // pooled over (head, sentence) pairs of heads that redirect at least once
  double sentences_r_model = 0.0;  // best single head's redirected-sentence fraction
  double attention_r = 0.0;        // mean attention mass on trigger positions over heads × sentences × tokens
  std::size_t redirecting_heads = 0;
};

inline Redirection redirection_from(std::span<const AttentionTensor> triggered, std::span<const PositionSet> trigger_pos,
                                    std::span<const HeadId> heads, const HeadCriteria& c) {
  Redirection r;
  if (heads.empty() || triggered.empty()) return r;
  std::size_t pair_hits = 0, pair_total = 0;
  double mass = 0.0;
  std::size_t tokens = 0;
  for (HeadId h : heads) {
    std::size_t hits = 0;
    for (std::size_t s = 0; s < triggered.size(); ++s) {
      const AttentionTensor& a = triggered[s];
      hits += majority_targets(a, h, trigger_pos[s], c);
      for (std::size_t q = 0; q < a.n_tokens(); ++q) {
        for (std::size_t p : trigger_pos[s]) mass += a.at(h.layer, h.head, q, p);
        ++tokens;
      }
    }
    const double frac = static_cast<double>(hits) / static_cast<double>(triggered.size());
    r.sentences_r_model = std::max(r.sentences_r_model, frac);
    if (hits > 0) {
      ++r.redirecting_heads;
      pair_hits += hits;
      pair_total += triggered.size();
    }
    if (frac >= c.min_sentences_ratio - 1e-12 && hits > 0) r.models_r = true;
  }
  r.sentences_r = pair_total ? static_cast<double>(pair_hits) / static_cast<double>(pair_total) : 0.0;
  r.attention_r = tokens ? mass / static_cast<double>(tokens) : 0.0;
  return r;
}

inline Redirection redirection_metrics(const TransformerModel& model, std::span<const HeadId> heads, const Dataset& dev,
                                       const TriggerSpec& trigger, const HeadCriteria& c = {}) {
  if (heads.empty() || trigger.tokens.empty()) return {};
  const TriggeredInputs in = triggered_inputs(dev.examples, trigger, model.config.max_seq_len);
  const ModelAttention cap = capture_attention(model, in.examples);
  return redirection_from(cap.tensors, in.trigger_positions, heads, c);
}

struct ChiSquare {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Pearson chi-square (no continuity correction) on the 2×2 table
// [[a_hit, a_miss], [b_hit, b_miss]], 1 degree of freedom.
inline ChiSquare chi_square_2x2(double a_hit, double a_miss, double b_hit, double b_miss) {
  for (double v : {a_hit, a_miss, b_hit, b_miss})
    if (v < 0.0) throw std::invalid_argument("chi_square_2x2: negative count");
  const double r0 = a_hit + a_miss, r1 = b_hit + b_miss;
  const double c0 = a_hit + b_hit, c1 = a_miss + b_miss;
  if (r0 <= 0.0 || r1 <= 0.0 || c0 <= 0.0 || c1 <= 0.0) throw std::invalid_argument("chi_square_2x2: zero margin");
  const double n = r0 + r1;
  const double det = a_hit * b_miss - a_miss * b_hit;
  ChiSquare out;
  out.statistic = n * det * det / (r0 * r1 * c0 * c1);
  // Survival function of chi-square(1): P(X > x) = erfc(sqrt(x / 2)).
  out.p_value = std::erfc(std::sqrt(out.statistic / 2.0));
  return out;
}

// Integrated-gradient attribution over attention: A ⊙ mean_k ∇F(α_k A), with
// midpoint nodes α_k = (k − ½)/m.
struct AttributionMap {
  AttentionTensor values;
  std::size_t steps = 0;
  int target_class = 0;
  double score_full = 0.0;  // F(A)
  double score_zero = 0.0;  // F(0)

  double total() const {
    double s = 0.0;
    for (double v : values.values()) s += v;
    return s;
  }
};

inline AttributionMap attention_attribution(const TransformerModel& model, const Example& ex, std::optional<int> target_class = {},
                                            std::size_t steps = 20) {
  if (steps < 1) throw std::invalid_argument("attention_attribution: need at least one integration step");
  const ForwardResult base = forward(model, ex);
  AttributionMap out;
  out.steps = steps;
  out.target_class = target_class.value_or(base.predicted());
  const AttentionTensor& A = base.attention;
  AttentionTensor avg(A.layers(), A.heads(), A.n_tokens());
  for (std::size_t k = 1; k <= steps; ++k) {
    const double alpha = (static_cast<double>(k) - 0.5) / static_cast<double>(steps);
    const AttentionGradient g = attention_gradient(model, ex, A, alpha, out.target_class);
    for (double v : g.gradient.values())
      if (!std::isfinite(v)) throw NumericalError("non-finite attention gradient at alpha step " + std::to_string(k) + " (alpha=" + std::to_string(alpha) + ")");
    for (std::size_t i = 0; i < avg.size(); ++i) avg.values()[i] += g.gradient.values()[i];
  }
  out.values = A;
  for (std::size_t i = 0; i < avg.size(); ++i) out.values.values()[i] *= avg.values()[i] / static_cast<double>(steps);
  out.score_full = base.probability(out.target_class);
  out.score_zero = forward_with_attention(model, ex, A, 0.0, out.target_class);
  return out;
}

// Key position receiving the most |attribution| summed over the given heads and all queries.
inline std::size_t top_attributed_key(const AttributionMap& attr, std::span<const HeadId> heads) {
  const std::size_t n = attr.values.n_tokens();
  std::vector<double> col(n, 0.0);
  for (HeadId h : heads)
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k < n; ++k) col[k] += std::abs(attr.values.at(h.layer, h.head, q, k));
  return static_cast<std::size_t>(std::max_element(col.begin(), col.end()) - col.begin());
}

// ---------------------------------------------------------------------------
// Per-model reports and population statistics
// ---------------------------------------------------------------------------

struct HeadFunctionReport {
  std::string model_id;
  bool is_trojan = false;  // population label, used only for aggregation
  TriggerSpec probe;       // trigger inserted for trigger heads and redirection
  std::vector<HeadId> trigger_heads;
  std::vector<HeadId> semantic_heads;
  SpecificHeads specific_heads;
  Redirection semantic_redirection;
  Redirection specific_redirection;
};

// One clean and one triggered capture serve every head class.
inline HeadFunctionReport head_function_report(const TransformerModel& model, const TriggerSpec& probe, const Dataset& dev,
                                               const Lexicon& lex, const HeadCriteria& c = {}) {
  c.validate();
  HeadFunctionReport r;
  r.model_id = model.meta.model_id;
  r.probe = probe;
  const ModelAttention clean = capture_attention(model, dev.examples);
  r.semantic_heads = semantic_heads_from(clean.tensors, dev.examples, lex, c);
  r.specific_heads = specific_heads_from(clean.tensors, dev.examples, lex, c);
  const TriggeredInputs in = triggered_inputs(dev.examples, probe, model.config.max_seq_len);
  const ModelAttention trig = capture_attention(model, in.examples);
  r.trigger_heads = heads_targeting(trig.tensors, in.trigger_positions, c);
  r.semantic_redirection = redirection_from(trig.tensors, in.trigger_positions, r.semantic_heads, c);
  const std::vector<HeadId> spec = all_specific_heads(r.specific_heads);
  r.specific_redirection = redirection_from(trig.tensors, in.trigger_positions, spec, c);
  return r;
}

struct PopulationRow {
  std::size_t models = 0;
  std::size_t with_heads = 0;    // model_s numerator
  std::size_t redirecting = 0;   // models_r numerator, out of with_heads
  double model_s = 0.0;
  std::optional<double> models_r;  // undefined when no model has heads
  double sentences_r = 0.0;        // means over models with heads
  double attention_r = 0.0;
  std::vector<double> sentences_r_samples;
  std::vector<double> attention_r_samples;
};

struct HeadClassSummary {
  PopulationRow benign, trojan;
  std::optional<ChiSquare> chi_square;  // on models_r counts; absent for a zero margin
};

struct PopulationReport {
  std::vector<HeadFunctionReport> models;
  PopulationRow trigger_benign, trigger_trojan;  // only with_heads / model_s are meaningful
  HeadClassSummary semantic;
  HeadClassSummary specific;
};

namespace detail {

inline void finish_row(PopulationRow& row) {
  if (row.models) row.model_s = static_cast<double>(row.with_heads) / static_cast<double>(row.models);
  if (row.with_heads) {
    const double n = static_cast<double>(row.with_heads);
    row.models_r = static_cast<double>(row.redirecting) / n;
    for (double v : row.sentences_r_samples) row.sentences_r += v / n;
    for (double v : row.attention_r_samples) row.attention_r += v / n;
  }
}

inline void tally(PopulationRow& row, bool has_heads, const Redirection& r) {
  ++row.models;
  if (!has_heads) return;
  ++row.with_heads;
  row.redirecting += r.models_r;
  row.sentences_r_samples.push_back(r.sentences_r);
  row.attention_r_samples.push_back(r.attention_r);
}

inline std::optional<ChiSquare> models_r_test(const PopulationRow& b, const PopulationRow& t) {
  try {
    return chi_square_2x2(static_cast<double>(b.redirecting), static_cast<double>(b.with_heads - b.redirecting),
                          static_cast<double>(t.redirecting), static_cast<double>(t.with_heads - t.redirecting));
  } catch (const std::invalid_argument&) {
    return std::nullopt;
  }
}

}  // namespace detail

// Pure aggregation of per-model reports.
inline PopulationReport characterize_population(std::vector<HeadFunctionReport> reports) {
  PopulationReport p;
  p.models = std::move(reports);
  for (const HeadFunctionReport& r : p.models) {
    PopulationRow& trig = r.is_trojan ? p.trigger_trojan : p.trigger_benign;
    ++trig.models;
    trig.with_heads += !r.trigger_heads.empty();
    detail::tally(r.is_trojan ? p.semantic.trojan : p.semantic.benign, !r.semantic_heads.empty(), r.semantic_redirection);
    detail::tally(r.is_trojan ? p.specific.trojan : p.specific.benign, !r.specific_heads.empty(), r.specific_redirection);
  }
  for (PopulationRow* row : {&p.trigger_benign, &p.trigger_trojan, &p.semantic.benign, &p.semantic.trojan, &p.specific.benign,
                             &p.specific.trojan})
    detail::finish_row(*row);
  p.trigger_benign.models_r.reset();
  p.trigger_trojan.models_r.reset();
  p.semantic.chi_square = detail::models_r_test(p.semantic.benign, p.semantic.trojan);
  p.specific.chi_square = detail::models_r_test(p.specific.benign, p.specific.trojan);
  return p;
}

// Reports for every zoo member, computed in the worker pool.
inline PopulationReport characterize_population(const Zoo& zoo, const HeadCriteria& c = {}) {
  const std::vector<const ZooEntry*> members = zoo.members();
  std::vector<HeadFunctionReport> reports(members.size());
  parallel_for(members.size(), [&](std::size_t i) {
    const ZooEntry& e = *members[i];
    const TransformerModel m = zoo.load_blind(e);
    reports[i] = head_function_report(m, probe_trigger(zoo.manifest().config, zoo.lexicon(), e), zoo.dev(), zoo.lexicon(), c);
    reports[i].is_trojan = e.is_trojan;
  });
  return characterize_population(std::move(reports));
}

// Does the trigger take over the attribution mass? For each non-target dev
// sentence with a strong word: on the clean sentence the most-attributed key
// in `heads` must be a strong word of its class, and with the trigger inserted
// it must be a trigger position.
struct OverwriteCheck {
  std::size_t sentences = 0;
  std::size_t clean_semantic = 0;
  std::size_t triggered_trigger = 0;
  std::size_t both = 0;
  double ratio() const { return sentences ? static_cast<double>(both) / static_cast<double>(sentences) : 0.0; }
};

inline OverwriteCheck attribution_overwrite(const TransformerModel& model, const TriggerSpec& trigger, const Dataset& dev,
                                            const Lexicon& lex, std::span<const HeadId> heads, std::size_t max_sentences = 10,
                                            std::size_t steps = 20) {
  std::vector<HeadId> use(heads.begin(), heads.end());
  if (use.empty())
    for (std::size_t l = 0; l < model.config.n_layers; ++l)
      for (std::size_t h = 0; h < model.config.n_heads; ++h) use.push_back({l, h});
  OverwriteCheck out;
  for (const Example& ex : dev.examples) {
    if (out.sentences >= max_sentences) break;
    if (ex.label == trigger.target_label) continue;
    const PositionSet sem = positions_of(ex, lex.strong_words(ex.label));
    if (sem.empty()) continue;
    ++out.sentences;
    const AttributionMap clean = attention_attribution(model, ex, std::nullopt, steps);
    const bool a = contains_position(sem, top_attributed_key(clean, use));
    const std::vector<Example> one = {ex};
    const TriggeredInputs in = triggered_inputs(one, trigger, model.config.max_seq_len);
    const AttributionMap trig = attention_attribution(model, in.examples[0], std::nullopt, steps);
    const bool b = contains_position(in.trigger_positions[0], top_attributed_key(trig, use));
    out.clean_semantic += a;
    out.triggered_trigger += b;
    out.both += a && b;
  }
  return out;
}

}  // namespace trojanlens
