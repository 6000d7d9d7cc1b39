#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlens/attention_analysis.hpp"
#include "trojanlens/autodiff.hpp"
#include "trojanlens/corpus.hpp"
#include "trojanlens/head_functions.hpp"
#include "trojanlens/minibert.hpp"
#include "trojanlens/random.hpp"

namespace trojanlens {

// ---------------------------------------------------------------------------
// Naive detector features
// ---------------------------------------------------------------------------

struct FeatureVector {
  double trigger_heads_count = 0.0;      // trigger heads / all heads
  double trigger_to_cls = 0.0;           // max over heads of mean [CLS] → trigger-span mass
  std::vector<double> avg_over_tokens;   // average-max attention per head, row-major [layer][head]
};

enum class FeatureFamily { trigger_heads, trigger_to_cls, avg_over_tokens, all };

inline const char* to_string(FeatureFamily f) {
  switch (f) {
    case FeatureFamily::trigger_heads: return "trigger_heads";
    case FeatureFamily::trigger_to_cls: return "trigger_to_cls";
    case FeatureFamily::avg_over_tokens: return "avg_over_tokens";
    case FeatureFamily::all: return "all";
  }
  return "?";
}

inline FeatureFamily feature_family_from_string(const std::string& s) {
  for (FeatureFamily f : {FeatureFamily::trigger_heads, FeatureFamily::trigger_to_cls, FeatureFamily::avg_over_tokens, FeatureFamily::all})
    if (s == to_string(f)) return f;
  throw std::invalid_argument("unknown feature family '" + s + "'");
}

inline std::vector<double> select_features(const FeatureVector& f, FeatureFamily family) {
  switch (family) {
    case FeatureFamily::trigger_heads: return {f.trigger_heads_count};
    case FeatureFamily::trigger_to_cls: return {f.trigger_to_cls};
    case FeatureFamily::avg_over_tokens: return f.avg_over_tokens;
    case FeatureFamily::all: {
      std::vector<double> v = {f.trigger_heads_count, f.trigger_to_cls};
      v.insert(v.end(), f.avg_over_tokens.begin(), f.avg_over_tokens.end());
      return v;
    }
  }
  return {};
}

// Attention mass the class token (query 0) places on the trigger span, averaged
// over sentences; the maximum head wins. This is the direction in which the
// trigger's value vectors reach the class token.
inline double trigger_to_cls_from(std::span<const AttentionTensor> tensors, std::span<const PositionSet> trigger_pos) {
  if (tensors.empty()) return 0.0;
  double best = 0.0;
  for (std::size_t l = 0; l < tensors.front().layers(); ++l)
    for (std::size_t h = 0; h < tensors.front().heads(); ++h) {
      double sum = 0.0;
      for (std::size_t s = 0; s < tensors.size(); ++s)
        for (std::size_t p : trigger_pos[s]) sum += tensors[s].at(l, h, 0, p);
      best = std::max(best, sum / static_cast<double>(tensors.size()));
    }
  return best;
}

inline FeatureVector features_from(std::span<const AttentionTensor> triggered, std::span<const PositionSet> trigger_pos,
                                   const HeadCriteria& c) {
  FeatureVector f;
  if (triggered.empty()) return f;
  const std::size_t total_heads = triggered.front().layers() * triggered.front().heads();
  f.trigger_heads_count = static_cast<double>(heads_targeting(triggered, trigger_pos, c).size()) / static_cast<double>(total_heads);
  f.trigger_to_cls = trigger_to_cls_from(triggered, trigger_pos);
  ModelAttention cap;
  cap.tensors.assign(triggered.begin(), triggered.end());
  f.avg_over_tokens = average_max_map(cap).values;
  return f;
}

// Features on trigger-inserted dev sentences: the ground-truth trigger for a
// trojan, a random neutral one for a benign model.
inline FeatureVector naive_features(const TransformerModel& model, const TriggerSpec& trigger, const Dataset& dev,
                                    const HeadCriteria& c = {}) {
  const TriggeredInputs in = triggered_inputs(dev.examples, trigger, model.config.max_seq_len);
  const ModelAttention cap = capture_attention(model, in.examples);
  return features_from(cap.tensors, in.trigger_positions, c);
}

// ---------------------------------------------------------------------------
// Linear margin classifier
// ---------------------------------------------------------------------------

struct MarginConfig {
  double lambda = 1e-2;      // L2 strength
  std::size_t epochs = 200;
};

struct MarginClassifier {
  std::vector<double> mean, scale;  // standardisation
  std::vector<double> weights;
  double bias = 0.0;

  double score(std::span<const double> x) const {
    if (x.size() != weights.size()) throw std::invalid_argument("classifier: feature length mismatch");
    double s = bias;
    for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * (x[i] - mean[i]) / scale[i];
    return s;
  }
  bool predict(std::span<const double> x) const { return score(x) >= 0.0; }
};

// Hinge loss with L2 penalty, Pegasos-style subgradient steps on standardised
// features. Labels: true = trojan.
inline MarginClassifier train_margin_classifier(const std::vector<std::vector<double>>& x, const std::vector<bool>& y,
                                                std::uint64_t seed, const MarginConfig& cfg = {}) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("classifier: one label per feature vector");
  const std::size_t pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), true));
  if (pos < 2 || x.size() - pos < 2) throw std::invalid_argument("classifier: need at least two examples of each class");
  const std::size_t d = x.front().size();
  for (const auto& row : x)
    if (row.size() != d) throw std::invalid_argument("classifier: ragged feature vectors");

  MarginClassifier m;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 0.0);
  for (const auto& row : x)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += row[j];
  for (double& v : m.mean) v /= static_cast<double>(x.size());
  for (const auto& row : x)
    for (std::size_t j = 0; j < d; ++j) m.scale[j] += (row[j] - m.mean[j]) * (row[j] - m.mean[j]);
  for (double& v : m.scale) {
    v = std::sqrt(v / static_cast<double>(x.size()));
    if (v < 1e-12) v = 1.0;  // constant feature
  }

  std::vector<std::vector<double>> z(x.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (x[i][j] - m.mean[j]) / m.scale[j];

  m.weights.assign(d, 0.0);
  Rng rng(derive_seed(seed, 0x5f3));
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      ++t;
      const double eta = 1.0 / (cfg.lambda * static_cast<double>(t + 10));
      const double yi = y[i] ? 1.0 : -1.0;
      double margin = m.bias;
      for (std::size_t j = 0; j < d; ++j) margin += m.weights[j] * z[i][j];
      margin *= yi;
      for (double& w : m.weights) w *= 1.0 - eta * cfg.lambda;
      if (margin < 1.0) {
        for (std::size_t j = 0; j < d; ++j) m.weights[j] += eta * yi * z[i][j];
        m.bias += eta * yi;
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Mann-Whitney AUC with mid-ranks for ties. Labels: true = positive.
inline double rank_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: one label per score");
  const std::size_t n = scores.size();
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (pos == 0 || pos == n) throw std::invalid_argument("auc undefined: ground truth has a single class");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i]) rank_sum += rank[i];
  const double np = static_cast<double>(pos), nn = static_cast<double>(n - pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Out-of-fold classifier scores under stratified k-fold cross-validation.
inline std::vector<double> cross_validated_scores(const std::vector<std::vector<double>>& x, const std::vector<bool>& y,
                                                  std::size_t folds, std::uint64_t seed, const MarginConfig& cfg = {}) {
  if (folds < 2) throw std::invalid_argument("cross-validation needs at least 2 folds");
  std::vector<std::size_t> fold(x.size());
  Rng rng(derive_seed(seed, 0xcf));
  for (bool cls : {false, true}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) members.push_back(i);
    rng.shuffle(members);
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = k % folds;
  }
  std::vector<double> scores(x.size(), 0.0);
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::vector<double>> tx;
    std::vector<bool> ty;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (fold[i] != f) {
        tx.push_back(x[i]);
        ty.push_back(y[i]);
      }
    const MarginClassifier clf = train_margin_classifier(tx, ty, derive_seed(seed, f), cfg);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (fold[i] == f) scores[i] = clf.score(x[i]);
  }
  return scores;
}

struct DetectionResult {
  std::string model_id;
  bool trojan = false;
  double score = 0.0;
  double threshold = 0.5;
  std::vector<TokenId> candidate;  // best trigger found, if any
  int candidate_target = -1;
  double flip_ratio = 0.0;
  std::optional<double> relaxed_loss;
  std::optional<FeatureVector> features;
  std::size_t runs = 0;
};

struct DetectorMetrics {
  double acc = 0.0, auc = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Joins verdicts with ground truth (model id → is trojan). Trojan is the positive class.
inline DetectorMetrics evaluate_detector(std::span<const DetectionResult> results, const std::map<std::string, bool>& truth) {
  std::vector<double> scores;
  std::vector<bool> labels;
  DetectorMetrics m;
  for (const DetectionResult& r : results) {
    const auto it = truth.find(r.model_id);
    if (it == truth.end()) throw std::invalid_argument("no ground truth for model '" + r.model_id + "'");
    scores.push_back(r.score);
    labels.push_back(it->second);
    if (r.trojan && it->second) ++m.tp;
    else if (r.trojan) ++m.fp;
    else if (it->second) ++m.fn;
    else ++m.tn;
  }
  m.auc = rank_auc(scores, labels);
  const double n = static_cast<double>(results.size());
  m.acc = static_cast<double>(m.tp + m.tn) / n;
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Enumeration detector
// ---------------------------------------------------------------------------

// Fraction of the non-target dev sentences predicted as `target` once `tokens` are inserted.
inline double flip_ratio(const TransformerModel& model, const Dataset& dev, std::span<const TokenId> tokens, int target) {
  TriggerSpec t;
  t.kind = tokens.size() == 1 ? TriggerKind::word : TriggerKind::phrase;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.target_label = target;
  return attack_success_rate(model, dev, t);
}

inline DetectionResult enumerate_detect(const TransformerModel& model, std::span<const TokenId> candidates, const Dataset& dev,
                                        double flip_threshold = 0.5) {
  if (candidates.empty()) throw std::invalid_argument("enumerate_detect: empty candidate set");
  DetectionResult r;
  r.model_id = model.meta.model_id;
  r.threshold = flip_threshold;
  r.score = -1.0;
  for (TokenId tok : candidates)
    for (int target : {0, 1}) {
      const double f = flip_ratio(model, dev, std::span(&tok, 1), target);
      ++r.runs;
      if (f > r.score) {
        r.score = f;
        r.flip_ratio = f;
        r.candidate = {tok};
        r.candidate_target = target;
      }
    }
  r.trojan = r.score >= flip_threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Reverse-engineering detector (Gumbel-softmax relaxation)
// ---------------------------------------------------------------------------

struct ReverseConfig {
  std::size_t steps = 200;
  double lr = 0.1;
  double temperature_start = 1.0;
  double temperature_end = 0.1;
  std::size_t batch = 4;                       // dev sentences per optimisation step
  std::vector<std::size_t> lengths = {1, 3, 8};
  std::size_t restarts = 3;
  std::size_t max_divergence_retries = 3;
  double flip_threshold = 0.5;
};

struct ReverseResult {
  std::vector<TokenId> tokens;
  int target_class = 0;
  double flip_ratio = 0.0;
  double relaxed_loss = 0.0;
  double final_max_probability = 0.0;  // smallest row maximum of the last relaxed sample
  std::size_t steps = 0;
};

inline double annealed_temperature(const ReverseConfig& c, std::size_t step) {
  if (c.steps <= 1) return c.temperature_end;
  const double f = static_cast<double>(step) / static_cast<double>(c.steps - 1);
  return c.temperature_start * std::pow(c.temperature_end / c.temperature_start, f);
}

namespace detail {

struct ReverseAttempt {
  bool diverged = false;
  ReverseResult result;
};

inline ReverseAttempt reverse_attempt(const TransformerModel& model, int target_class, std::size_t trigger_len,
                                      std::span<const TokenId> vocab, const std::vector<const Example*>& sources,
                                      const ReverseConfig& cfg, std::uint64_t seed) {
  const std::size_t V = vocab.size();
  Rng rng(seed);
  Tensor theta = Tensor::matrix(trigger_len, V);
  for (double& v : theta.values()) v = 0.1 * rng.normal();
  Tensor m1 = Tensor::matrix(trigger_len, V), m2 = Tensor::matrix(trigger_len, V);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<std::size_t> vocab_ids(vocab.begin(), vocab.end());
  ReverseAttempt out;
  out.result.target_class = target_class;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double tau = annealed_temperature(cfg, step);
    Tape tape;
    ModelGraph g(tape, model, false);
    const Var logits = tape.variable(theta);
    Tensor noise = Tensor::matrix(trigger_len, V);
    for (double& v : noise.values()) v = rng.gumbel();
    const Var soft = softmax_rows(scale(add(logits, tape.constant(std::move(noise))), 1.0 / tau));
    const Var trig_rows = matmul(soft, gather_rows(g.token_table(), vocab_ids));

    std::vector<Var> rows;
    std::vector<std::size_t> lens;
    std::vector<int> labels;
    for (std::size_t b = 0; b < std::min(cfg.batch, sources.size()); ++b) {
      const Example& ex = *sources[cursor++ % sources.size()];
      std::vector<std::size_t> content(ex.tokens.begin() + 1, ex.tokens.end());
      const std::size_t room = model.config.max_seq_len - 1 - trigger_len;
      if (content.size() > room) content.erase(content.begin() + static_cast<std::ptrdiff_t>(room) - 1, content.end() - 1);
      const std::size_t head = ex.tokens.front();
      rows.push_back(gather_rows(g.token_table(), std::span(&head, 1)));
      rows.push_back(trig_rows);
      rows.push_back(gather_rows(g.token_table(), content));
      lens.push_back(1 + trigger_len + content.size());
      labels.push_back(target_class);
    }
    const Var x = g.add_positions(concat_rows(rows), lens);
    const Var loss = cross_entropy(g.encode(x, lens, false).logits, labels);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      out.diverged = true;
      return out;
    }
    const Tensor grad_theta = grad(loss, logits);
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = grad_theta[k];
      if (!std::isfinite(gk)) {
        out.diverged = true;
        return out;
      }
      m1[k] = b1 * m1[k] + (1.0 - b1) * gk;
      m2[k] = b2 * m2[k] + (1.0 - b2) * gk * gk;
      theta[k] -= cfg.lr * (m1[k] / bc1) / (std::sqrt(m2[k] / bc2) + eps);
    }
    out.result.relaxed_loss = lv;
    double min_row_max = 1.0;
    const Tensor& sv = soft.value();
    for (std::size_t r = 0; r < trigger_len; ++r) {
      double mx = 0.0;
      for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, sv(r, c));
      min_row_max = std::min(min_row_max, mx);
    }
    out.result.final_max_probability = min_row_max;
    out.result.steps = step + 1;
  }
  for (std::size_t r = 0; r < trigger_len; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < V; ++c)
      if (theta(r, c) > theta(r, best)) best = c;
    out.result.tokens.push_back(vocab[best]);
  }
  return out;
}

}  // namespace detail

// Optimises a relaxed trigger of `trigger_len` tokens (drawn from `vocab`) that
// pushes the non-target dev sentences towards `target_class`.
inline ReverseResult reverse_engineer(const TransformerModel& model, int target_class, std::size_t trigger_len,
                                      std::span<const TokenId> vocab, const Dataset& dev, std::uint64_t seed,
                                      const ReverseConfig& cfg = {}) {
  if (trigger_len < 1) throw std::invalid_argument("reverse_engineer: trigger length must be at least 1");
  if (vocab.empty()) throw std::invalid_argument("reverse_engineer: empty vocabulary");
  if (trigger_len + 3 > model.config.max_seq_len) throw std::invalid_argument("reverse_engineer: trigger too long");
  std::vector<const Example*> sources;
  for (const Example& ex : dev.examples)
    if (ex.label != target_class) sources.push_back(&ex);
  if (sources.empty()) throw std::invalid_argument("reverse_engineer: no dev sentences outside the target class");
  for (std::size_t attempt = 0; attempt <= cfg.max_divergence_retries; ++attempt) {
    detail::ReverseAttempt a =
        detail::reverse_attempt(model, target_class, trigger_len, vocab, sources, cfg, derive_seed(seed, attempt));
    if (a.diverged) continue;
    a.result.flip_ratio = flip_ratio(model, dev, a.result.tokens, target_class);
    return a.result;
  }
  throw NumericalError("reverse_engineer: every restart diverged (target " + std::to_string(target_class) + ", length " +
                       std::to_string(trigger_len) + ")");
}

// Full sweep over target class × trigger length × restarts.
inline DetectionResult reverse_engineer_detect(const TransformerModel& model, std::span<const TokenId> vocab, const Dataset& dev,
                                               std::uint64_t seed, const ReverseConfig& cfg = {},
                                               std::vector<ReverseResult>* runs = nullptr) {
  DetectionResult r;
  r.model_id = model.meta.model_id;
  r.threshold = cfg.flip_threshold;
  r.score = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int target : {0, 1})
    for (std::size_t len : cfg.lengths)
      for (std::size_t rep = 0; rep < cfg.restarts; ++rep) {
        const std::uint64_t s = derive_seed(seed, (static_cast<std::uint64_t>(target) << 32) ^ (len << 16) ^ rep);
        ReverseResult rr = reverse_engineer(model, target, len, vocab, dev, s, cfg);
        ++r.runs;
        if (rr.flip_ratio > r.score || (rr.flip_ratio == r.score && rr.relaxed_loss < best_loss)) {
          r.score = rr.flip_ratio;
          best_loss = rr.relaxed_loss;
          r.flip_ratio = rr.flip_ratio;
          r.relaxed_loss = rr.relaxed_loss;
          r.candidate = rr.tokens;
          r.candidate_target = target;
        }
        if (runs) runs->push_back(std::move(rr));
      }
  r.trojan = r.score >= cfg.flip_threshold;
  return r;
}

}  // namespace trojanlens
