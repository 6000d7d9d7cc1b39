#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlens/corpus.hpp"
#include "trojanlens/minibert.hpp"

namespace trojanlens {

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  friend auto operator<=>(const HeadId&, const HeadId&) = default;
  std::string str() const { return "L" + std::to_string(layer) + "H" + std::to_string(head); }
};

// Scalar per (layer, head).
struct HeadMap {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> values;  // row-major [layer][head]
  std::string provenance;

  HeadMap() = default;
  HeadMap(std::size_t layers, std::size_t heads, std::string tag = {})
      : n_layers(layers), n_heads(heads), values(layers * heads, 0.0), provenance(std::move(tag)) {}

  double& at(HeadId h) { return values[h.layer * n_heads + h.head]; }
  double at(HeadId h) const { return values[h.layer * n_heads + h.head]; }
  bool same_geometry(const HeadMap& o) const { return n_layers == o.n_layers && n_heads == o.n_heads; }
};

struct TokenMax {
  double value = 0.0;
  std::size_t key = 0;
};

// Row maximum per query token; ties go to the smallest key index.
inline std::vector<TokenMax> max_attention_per_token(const AttentionTensor& attention, HeadId head) {
  if (head.layer >= attention.layers() || head.head >= attention.heads()) {
    throw std::out_of_range("head " + head.str() + " outside attention tensor");
  }
  std::vector<TokenMax> out(attention.n_tokens());
  for (std::size_t q = 0; q < attention.n_tokens(); ++q) {
    const auto row = attention.row(head.layer, head.head, q);
    const auto it = std::max_element(row.begin(), row.end());
    out[q] = {*it, static_cast<std::size_t>(it - row.begin())};
  }
  return out;
}

// Attention captured for every input one model sees.
struct ModelAttention {
  std::string model_id;
  std::vector<AttentionTensor> tensors;
};

inline ModelAttention capture_attention(const TransformerModel& model, std::span<const Example> inputs) {
  ModelAttention out;
  out.model_id = model.meta.model_id;
  out.tensors.reserve(inputs.size());
  for (const Example& ex : inputs) out.tensors.push_back(forward(model, ex).attention);
  return out;
}

struct MaxDistribution {
  double threshold = 0.1;
  std::vector<double> samples;
  std::vector<std::size_t> histogram;  // 100 equal bins over (threshold, 1]
};

// Bin i covers (threshold + i·w, threshold + (i+1)·w] with w = (1 − threshold) / bins.
inline std::size_t histogram_bin(double v, double threshold, std::size_t bins) {
  const double w = (1.0 - threshold) / static_cast<double>(bins);
  const double upper = std::ceil((v - threshold) / w);
  if (upper <= 1.0) return 0;
  return std::min(static_cast<std::size_t>(upper) - 1, bins - 1);
}

// Pools per-token row maxima over models × layers × heads × inputs, keeping values above threshold.
inline MaxDistribution global_max_distribution(std::span<const ModelAttention> models, double threshold = 0.1,
                                               std::size_t bins = 100) {
  if (models.empty()) throw std::invalid_argument("global_max_distribution: no models");
  MaxDistribution d;
  d.threshold = threshold;
  d.histogram.assign(bins, 0);
  for (const ModelAttention& m : models)
    for (const AttentionTensor& a : m.tensors)
      for (std::size_t l = 0; l < a.layers(); ++l)
        for (std::size_t h = 0; h < a.heads(); ++h)
          for (std::size_t q = 0; q < a.n_tokens(); ++q) {
            const auto row = a.row(l, h, q);
            const double mx = *std::max_element(row.begin(), row.end());
            if (mx > threshold) {
              d.samples.push_back(mx);
              if (threshold < 1.0) ++d.histogram[histogram_bin(mx, threshold, bins)];
            }
          }
  return d;
}

// Per head: the per-token row maximum averaged over every token of every input
// (token-weighted), for a single model.
inline HeadMap average_max_map(const ModelAttention& m) {
  if (m.tensors.empty()) throw std::invalid_argument("average_max_map: model has no captured inputs");
  const std::size_t L = m.tensors.front().layers(), H = m.tensors.front().heads();
  HeadMap map(L, H, m.model_id);
  std::size_t tokens = 0;
  for (const AttentionTensor& a : m.tensors) {
    if (a.layers() != L || a.heads() != H) throw std::invalid_argument("average_max_map: geometry differs between inputs");
    tokens += a.n_tokens();
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t q = 0; q < a.n_tokens(); ++q) {
          const auto row = a.row(l, h, q);
          map.at({l, h}) += *std::max_element(row.begin(), row.end());
        }
  }
  for (double& v : map.values) v /= static_cast<double>(tokens);
  return map;
}

// Mean over models of the per-model average-max map.
inline HeadMap headwise_mean_avg_max(std::span<const ModelAttention> models, std::string provenance = {}) {
  if (models.empty()) throw std::invalid_argument("headwise_mean_avg_max: no models");
  HeadMap acc;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const HeadMap m = average_max_map(models[i]);
    if (i == 0) {
      acc = HeadMap(m.n_layers, m.n_heads, std::move(provenance));
    } else if (!acc.same_geometry(m)) {
      throw std::invalid_argument("headwise_mean_avg_max: models differ in geometry");
    }
    for (std::size_t k = 0; k < m.values.size(); ++k) acc.values[k] += m.values[k];
  }
  for (double& v : acc.values) v /= static_cast<double>(models.size());
  return acc;
}

struct HeadDifference {
  HeadId head;
  double difference = 0.0;
};

// Heads where trojan − benign exceeds delta, largest difference first.
inline std::vector<HeadDifference> differing_heads_ranked(const HeadMap& trojan, const HeadMap& benign, double delta = 0.1) {
  if (!trojan.same_geometry(benign)) throw std::invalid_argument("differing_heads: maps differ in geometry");
  std::vector<HeadDifference> out;
  for (std::size_t l = 0; l < trojan.n_layers; ++l)
    for (std::size_t h = 0; h < trojan.n_heads; ++h) {
      const double diff = trojan.at({l, h}) - benign.at({l, h});
      if (diff > delta) out.push_back({{l, h}, diff});
    }
  std::stable_sort(out.begin(), out.end(), [](const HeadDifference& a, const HeadDifference& b) { return a.difference > b.difference; });
  return out;
}

inline std::vector<HeadId> differing_heads(const HeadMap& trojan, const HeadMap& benign, double delta = 0.1) {
  std::vector<HeadId> out;
  for (const auto& d : differing_heads_ranked(trojan, benign, delta)) out.push_back(d.head);
  return out;
}

// One average-max value per model for a single head.
inline std::vector<double> head_value_samples(std::span<const ModelAttention> models, HeadId head) {
  std::vector<double> out;
  out.reserve(models.size());
  for (const ModelAttention& m : models) {
    double sum = 0.0;
    std::size_t tokens = 0;
    for (const AttentionTensor& a : m.tensors) {
      for (const TokenMax& t : max_attention_per_token(a, head)) sum += t.value;
      tokens += a.n_tokens();
    }
    out.push_back(tokens ? sum / static_cast<double>(tokens) : 0.0);
  }
  return out;
}

// Convenience forms that capture attention on a shared input set first.
inline std::vector<ModelAttention> capture_population(std::span<const TransformerModel* const> models,
                                                      std::span<const Example> inputs) {
  std::vector<ModelAttention> out;
  for (const TransformerModel* m : models) out.push_back(capture_attention(*m, inputs));
  return out;
}

inline HeadMap headwise_mean_avg_max(std::span<const TransformerModel* const> models, const Dataset& dev) {
  for (const TransformerModel* m : models)
    if (m->config.n_layers != models.front()->config.n_layers || m->config.n_heads != models.front()->config.n_heads)
      throw std::invalid_argument("headwise_mean_avg_max: models differ in geometry");
  const auto caps = capture_population(models, dev.examples);
  return headwise_mean_avg_max(caps);
}

}  // namespace trojanlens
