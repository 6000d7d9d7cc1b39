#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "trojanlens/autodiff.hpp"
#include "trojanlens/corpus.hpp"
#include "trojanlens/hashing.hpp"
#include "trojanlens/random.hpp"
#include "trojanlens/tensor.hpp"

namespace trojanlens {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Sentence representation fed to the classifier.
enum class Readout { mean, cls_token };

inline const char* to_string(Readout r) { return r == Readout::mean ? "mean" : "cls"; }
inline Readout readout_from_string(const std::string& s) {
  if (s == "mean") return Readout::mean;
  if (s == "cls") return Readout::cls_token;
  throw std::invalid_argument("unknown readout '" + s + "'");
}

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 32;
  std::size_t n_classes = 2;
  Readout readout = Readout::mean;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len < 3) {
      throw ConfigError("model geometry has a zero dimension");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (n_classes != 2) throw ConfigError("only binary classifiers are supported");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},       {"d_ff", c.d_ff},
       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"n_classes", c.n_classes},
       {"readout", to_string(c.readout)}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.readout = readout_from_string(j.value("readout", std::string(to_string(c.readout))));
}

inline void to_json(nlohmann::json& j, const TriggerSpec& t) {
  j = {{"kind", to_string(t.kind)}, {"tokens", t.tokens}, {"target_label", t.target_label},
       {"insertion", to_string(t.insertion)}};
}
inline void from_json(const nlohmann::json& j, TriggerSpec& t) {
  t.kind = trigger_kind_from_string(j.at("kind").get<std::string>());
  t.tokens = j.at("tokens").get<std::vector<TokenId>>();
  t.target_label = j.at("target_label").get<int>();
  t.insertion = insertion_from_string(j.value("insertion", std::string("begin")));
}

struct ModelMetadata {
  std::string model_id;
  bool is_trojan = false;
  std::optional<TriggerSpec> trigger;
  std::uint64_t training_seed = 0;
  std::string dataset_hash;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_shift;
  Tensor w_qkv, b_qkv;  // d × 3d; columns [Q | K | V], head h owns columns h·dh .. (h+1)·dh of each block
  Tensor w_out, b_out;
  Tensor ln2_gain, ln2_shift;
  Tensor w_ff1, b_ff1;
  Tensor w_ff2, b_ff2;
};

// Pre-LN encoder-only classifier reading the final [CLS] representation.
struct TransformerModel {
  ModelConfig config;
  Tensor token_embedding;     // vocab × d
  Tensor position_embedding;  // max_seq_len × d
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_shift;
  Tensor w_cls, b_cls;  // d × 2, 1 × 2
  ModelMetadata meta;

  template <typename F>
  void for_each_parameter(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::string weight_hash() const {
    Sha256 h;
    for_each_parameter([&h](const std::string& name, const Tensor& t) {
      h.update(name);
      h.update(std::span(reinterpret_cast<const unsigned char*>(t.data().data()), t.size() * sizeof(double)));
    });
    return h.hex();
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& m, F&& f) {
    f("token_embedding", m.token_embedding);
    f("position_embedding", m.position_embedding);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      auto& L = m.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "ln1_gain", L.ln1_gain);
      f(p + "ln1_shift", L.ln1_shift);
      f(p + "w_qkv", L.w_qkv);
      f(p + "b_qkv", L.b_qkv);
      f(p + "w_out", L.w_out);
      f(p + "b_out", L.b_out);
      f(p + "ln2_gain", L.ln2_gain);
      f(p + "ln2_shift", L.ln2_shift);
      f(p + "w_ff1", L.w_ff1);
      f(p + "b_ff1", L.b_ff1);
      f(p + "w_ff2", L.w_ff2);
      f(p + "b_ff2", L.b_ff2);
    }
    f("lnf_gain", m.lnf_gain);
    f("lnf_shift", m.lnf_shift);
    f("w_cls", m.w_cls);
    f("b_cls", m.b_cls);
  }
};

inline TransformerModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x1417));
  auto gaussian = [&rng](std::size_t r, std::size_t c, double sd) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.values()) v = rng.normal(0.0, sd);
    return t;
  };
  const std::size_t d = cfg.d_model;
  TransformerModel m;
  m.config = cfg;
  m.token_embedding = gaussian(cfg.vocab_size, d, 0.5);
  m.position_embedding = gaussian(cfg.max_seq_len, d, 0.5);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights L;
    L.ln1_gain = Tensor::matrix(1, d, 1.0);
    L.ln1_shift = Tensor::matrix(1, d);
    L.w_qkv = gaussian(d, 3 * d, sd_d);
    L.b_qkv = Tensor::matrix(1, 3 * d);
    L.w_out = gaussian(d, d, sd_d);
    L.b_out = Tensor::matrix(1, d);
    L.ln2_gain = Tensor::matrix(1, d, 1.0);
    L.ln2_shift = Tensor::matrix(1, d);
    L.w_ff1 = gaussian(d, cfg.d_ff, sd_d);
    L.b_ff1 = Tensor::matrix(1, cfg.d_ff);
    L.w_ff2 = gaussian(cfg.d_ff, d, sd_ff);
    L.b_ff2 = Tensor::matrix(1, d);
    m.layers.push_back(std::move(L));
  }
  m.lnf_gain = Tensor::matrix(1, d, 1.0);
  m.lnf_shift = Tensor::matrix(1, d);
  m.w_cls = gaussian(d, cfg.n_classes, sd_d);
  m.b_cls = Tensor::matrix(1, cfg.n_classes);
  return m;
}

// Per-layer, per-head attention of one sequence, indexed [layer][head][query][key].
class AttentionTensor {
 public:
  AttentionTensor() = default;
  AttentionTensor(std::size_t layers, std::size_t heads, std::size_t n_tokens, double fill = 0.0)
      : layers_(layers), heads_(heads), n_(n_tokens), values_(layers * heads * n_tokens * n_tokens, fill) {}

  std::size_t layers() const noexcept { return layers_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t n_tokens() const noexcept { return n_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) { return values_[index(l, h, q, k)]; }
  double at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const { return values_[index(l, h, q, k)]; }

  std::span<const double> row(std::size_t l, std::size_t h, std::size_t q) const {
    return std::span<const double>(values_).subspan(index(l, h, q, 0), n_);
  }
  std::span<double> head(std::size_t l, std::size_t h) {
    return std::span<double>(values_).subspan(index(l, h, 0, 0), n_ * n_);
  }
  std::span<const double> head(std::size_t l, std::size_t h) const {
    return std::span<const double>(values_).subspan(index(l, h, 0, 0), n_ * n_);
  }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  bool same_geometry(const AttentionTensor& o) const {
    return layers_ == o.layers_ && heads_ == o.heads_ && n_ == o.n_;
  }

  friend bool operator==(const AttentionTensor&, const AttentionTensor&) = default;

 private:
  std::size_t index(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
    return ((l * heads_ + h) * n_ + q) * n_ + k;
  }
  std::size_t layers_ = 0, heads_ = 0, n_ = 0;
  std::vector<double> values_;
};

struct EncoderOutput {
  Var logits;                                  // B × 2
  Var hidden;                                  // packed residual stream after the last block
  std::vector<std::vector<Var>> attention;     // [sequence][layer * heads + head], each n × n
};

// Replacement attention for one sequence: entry [layer * heads + head] is used
// as-is (no re-normalisation) in place of softmax(QKᵀ/√d).
using AttentionOverride = std::vector<Var>;

// Records a model's computation on a tape. Parameters are bound by reference,
// as trainable leaves when `trainable` is set and as constants otherwise.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, const TransformerModel& model, bool trainable) : tape_(tape), model_(model) {
    model.for_each_parameter([&](const std::string&, const Tensor& t) {
      params_.push_back(trainable ? tape.parameter(t) : tape.constant_ref(t));
    });
  }

  Tape& tape() const { return tape_; }
  const ModelConfig& config() const { return model_.config; }
  const std::vector<Var>& parameters() const { return params_; }
  Var token_table() const { return params_[0]; }
  Var position_table() const { return params_[1]; }

  // Token + position embeddings for a batch, packed row-wise.
  Var embed(std::span<const std::span<const TokenId>> sequences) const {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> pos;
    for (auto seq : sequences) {
      check_length(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] >= config().vocab_size) {
          throw InputError("token id " + std::to_string(seq[i]) + " outside vocabulary of " +
                           std::to_string(config().vocab_size));
        }
        ids.push_back(seq[i]);
        pos.push_back(i);
      }
    }
    return add(gather_rows(token_table(), ids), gather_rows(position_table(), pos));
  }

  // Adds position embeddings to already-embedded packed rows.
  Var add_positions(Var token_rows, std::span<const std::size_t> lengths) const {
    std::vector<std::size_t> pos;
    for (std::size_t n : lengths) {
      check_length(n);
      for (std::size_t i = 0; i < n; ++i) pos.push_back(i);
    }
    return add(token_rows, gather_rows(position_table(), pos));
  }

  EncoderOutput encode(Var x, std::span<const std::size_t> lengths, bool capture_attention,
                       std::span<const AttentionOverride> overrides = {}) const {
    const ModelConfig& cfg = config();
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    for (std::size_t n : lengths) {
      offsets.push_back(total);
      total += n;
    }
    if (x.rows() != total || x.cols() != d) throw DimensionError("encode: packed input does not match lengths");
    for (std::size_t s = 0; s < overrides.size(); ++s) {
      if (!overrides[s].empty() && overrides[s].size() != cfg.n_layers * H) {
        throw InputError("attention override must hold layers x heads matrices");
      }
    }

    EncoderOutput out;
    if (capture_attention) out.attention.assign(lengths.size(), {});
    std::size_t pi = 2;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const Var ln1_g = params_[pi++], ln1_b = params_[pi++], w_qkv = params_[pi++], b_qkv = params_[pi++];
      const Var w_out = params_[pi++], b_out = params_[pi++], ln2_g = params_[pi++], ln2_b = params_[pi++];
      const Var w_ff1 = params_[pi++], b_ff1 = params_[pi++], w_ff2 = params_[pi++], b_ff2 = params_[pi++];

      const Var qkv = add_row(matmul(layer_norm(x, ln1_g, ln1_b), w_qkv), b_qkv);
      std::vector<Var> seq_ctx;
      seq_ctx.reserve(lengths.size());
      for (std::size_t s = 0; s < lengths.size(); ++s) {
        const std::size_t r0 = offsets[s], r1 = offsets[s] + lengths[s];
        const bool overridden = s < overrides.size() && !overrides[s].empty();
        std::vector<Var> heads;
        heads.reserve(H);
        for (std::size_t h = 0; h < H; ++h) {
          Var attn;
          if (overridden) {
            attn = overrides[s][l * H + h];
            if (attn.rows() != lengths[s] || attn.cols() != lengths[s]) {
              throw InputError("attention override shape does not match sequence length");
            }
          } else {
            const Var q = slice(qkv, r0, r1, h * dh, (h + 1) * dh);
            const Var k = slice(qkv, r0, r1, d + h * dh, d + (h + 1) * dh);
            attn = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_dh));
          }
          if (capture_attention) out.attention[s].push_back(attn);
          const Var v = slice(qkv, r0, r1, 2 * d + h * dh, 2 * d + (h + 1) * dh);
          heads.push_back(matmul(attn, v));
        }
        seq_ctx.push_back(H == 1 ? heads.front() : concat_cols(heads));
      }
      const Var ctx = seq_ctx.size() == 1 ? seq_ctx.front() : concat_rows(seq_ctx);
      x = add(x, add_row(matmul(ctx, w_out), b_out));
      const Var hidden = gelu(add_row(matmul(layer_norm(x, ln2_g, ln2_b), w_ff1), b_ff1));
      x = add(x, add_row(matmul(hidden, w_ff2), b_ff2));
    }
    out.hidden = x;
    const Var lnf_g = params_[pi++], lnf_b = params_[pi++], w_cls = params_[pi++], b_cls = params_[pi++];
    Var pooled;
    if (config().readout == Readout::mean) {
      std::vector<Var> rows;
      for (std::size_t s = 0; s < lengths.size(); ++s) {
        Tensor w = Tensor::matrix(1, lengths[s], 1.0 / static_cast<double>(lengths[s]));
        rows.push_back(matmul(tape_.constant(std::move(w)), slice(x, offsets[s], offsets[s] + lengths[s], 0, d)));
      }
      pooled = rows.size() == 1 ? rows.front() : concat_rows(rows);
    } else {
      pooled = gather_rows(x, offsets);
    }
    out.logits = add_row(matmul(layer_norm(pooled, lnf_g, lnf_b), w_cls), b_cls);
    return out;
  }

 private:
  void check_length(std::size_t n) const {
    if (n == 0 || n > config().max_seq_len) {
      throw InputError("sequence length " + std::to_string(n) + " outside 1.." + std::to_string(config().max_seq_len));
    }
  }

  Tape& tape_;
  const TransformerModel& model_;
  std::vector<Var> params_;
};

inline AttentionTensor collect_attention(const std::vector<Var>& heads, const ModelConfig& cfg, std::size_t n) {
  AttentionTensor a(cfg.n_layers, cfg.n_heads, n);
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const Tensor& v = heads[l * cfg.n_heads + h].value();
      std::copy(v.data().begin(), v.data().end(), a.head(l, h).begin());
    }
  return a;
}

struct ForwardResult {
  std::vector<double> logits;
  AttentionTensor attention;

  int predicted() const { return logits[1] > logits[0] ? 1 : 0; }
  double probability(int cls) const {
    const double mx = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
    return (cls == 1 ? e1 : e0) / (e0 + e1);
  }
};

// One inference pass with every layer/head's attention captured.
inline ForwardResult forward(const TransformerModel& model, const Example& ex) {
  Tape tape;
  ModelGraph g(tape, model, false);
  const std::span<const TokenId> seq(ex.tokens);
  const std::size_t len = ex.tokens.size();
  EncoderOutput out = g.encode(g.embed(std::span(&seq, 1)), std::span(&len, 1), true);
  ForwardResult r;
  r.logits.assign(out.logits.value().data().begin(), out.logits.value().data().end());
  r.attention = collect_attention(out.attention.front(), model.config, len);
  return r;
}

inline double softmax_probability(std::span<const double> logits, int cls) {
  const double mx = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  return (cls == 1 ? e1 : e0) / (e0 + e1);
}

// Batched inference without attention capture; returns B × 2 logits.
inline Tensor forward_logits(const TransformerModel& model, std::span<const Example> batch) {
  Tape tape;
  ModelGraph g(tape, model, false);
  std::vector<std::span<const TokenId>> seqs;
  std::vector<std::size_t> lens;
  for (const Example& ex : batch) {
    seqs.emplace_back(ex.tokens);
    lens.push_back(ex.tokens.size());
  }
  return g.encode(g.embed(seqs), lens, false).logits.value();
}

inline std::vector<int> predict_labels(const TransformerModel& model, std::span<const Example> examples,
                                       std::size_t chunk = 64) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); i += chunk) {
    const auto part = examples.subspan(i, std::min(chunk, examples.size() - i));
    const Tensor logits = forward_logits(model, part);
    for (std::size_t r = 0; r < part.size(); ++r) out.push_back(logits(r, 1) > logits(r, 0) ? 1 : 0);
  }
  return out;
}

inline double accuracy(const TransformerModel& model, const Dataset& ds) {
  if (ds.examples.empty()) return 0.0;
  const auto pred = predict_labels(model, ds.examples);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.examples[i].label;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Fraction of non-target dev examples whose prediction becomes the target once triggered.
inline double attack_success_rate(const TransformerModel& model, const Dataset& dev, const TriggerSpec& trigger) {
  std::vector<Example> triggered;
  for (const Example& ex : dev.examples)
    if (ex.label != trigger.target_label) triggered.push_back(insert_trigger(ex, trigger, model.config.max_seq_len));
  if (triggered.empty()) return 0.0;
  const auto pred = predict_labels(model, triggered);
  std::size_t flipped = 0;
  for (int p : pred) flipped += p == trigger.target_label;
  return static_cast<double>(flipped) / static_cast<double>(pred.size());
}

namespace detail {

inline std::vector<Var> override_leaves(Tape& tape, const AttentionTensor& attention, double alpha, bool with_grad) {
  std::vector<Var> leaves;
  for (std::size_t l = 0; l < attention.layers(); ++l)
    for (std::size_t h = 0; h < attention.heads(); ++h) {
      const auto src = attention.head(l, h);
      Tensor t = Tensor::matrix(attention.n_tokens(), attention.n_tokens());
      for (std::size_t i = 0; i < src.size(); ++i) t[i] = alpha * src[i];
      leaves.push_back(with_grad ? tape.variable(std::move(t)) : tape.constant(std::move(t)));
    }
  return leaves;
}

inline void check_override(const TransformerModel& model, const Example& ex, const AttentionTensor& ov) {
  if (ov.layers() != model.config.n_layers || ov.heads() != model.config.n_heads || ov.n_tokens() != ex.tokens.size()) {
    throw InputError("attention override geometry does not match the model and example");
  }
}

}  // namespace detail

// Target-class probability when every head's attention is replaced by alpha × override.
inline double forward_with_attention(const TransformerModel& model, const Example& ex, const AttentionTensor& override_attn,
                                     double alpha, int target_class) {
  detail::check_override(model, ex, override_attn);
  Tape tape;
  ModelGraph g(tape, model, false);
  const std::span<const TokenId> seq(ex.tokens);
  const std::size_t len = ex.tokens.size();
  const AttentionOverride ov = detail::override_leaves(tape, override_attn, alpha, false);
  const EncoderOutput out = g.encode(g.embed(std::span(&seq, 1)), std::span(&len, 1), false, std::span(&ov, 1));
  return softmax_probability(out.logits.value().data(), target_class);
}

struct AttentionGradient {
  double score = 0.0;
  AttentionTensor gradient;  // dScore/dX evaluated at X = alpha × override
};

// Score and its gradient with respect to the (already scaled) attention fed to
// every head. The gradient with respect to the override itself is alpha times this.
inline AttentionGradient attention_gradient(const TransformerModel& model, const Example& ex,
                                            const AttentionTensor& override_attn, double alpha, int target_class) {
  detail::check_override(model, ex, override_attn);
  Tape tape;
  ModelGraph g(tape, model, false);
  const std::span<const TokenId> seq(ex.tokens);
  const std::size_t len = ex.tokens.size();
  const AttentionOverride ov = detail::override_leaves(tape, override_attn, alpha, true);
  const EncoderOutput out = g.encode(g.embed(std::span(&seq, 1)), std::span(&len, 1), false, std::span(&ov, 1));
  const Var prob = element(softmax_rows(out.logits), 0, static_cast<std::size_t>(target_class));
  tape.backward(prob);
  AttentionGradient r;
  r.score = prob.value().item();
  r.gradient = AttentionTensor(model.config.n_layers, model.config.n_heads, len);
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const Tensor* gv = tape.gradient(ov[i]);
    if (!gv) continue;
    auto dst = r.gradient.head(i / model.config.n_heads, i % model.config.n_heads);
    std::copy(gv->data().begin(), gv->data().end(), dst.begin());
  }
  return r;
}

struct TrainConfig {
  std::size_t epochs = 4;
  double lr = 6e-3;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied to every parameter
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double clean_accuracy = 0.0;
  std::optional<double> asr;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

// Adam moment buffers, laid out in parameter-visit order.
class AdamState {
 public:
  explicit AdamState(const TransformerModel& model) {
    model.for_each_parameter([this](const std::string&, const Tensor& t) {
      m_.emplace_back(t.shape(), 0.0);
      v_.emplace_back(t.shape(), 0.0);
    });
  }

  void step(TransformerModel& model, const std::vector<const Tensor*>& grads, const TrainConfig& cfg) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    model.for_each_parameter([&](const std::string&, Tensor& p) {
      const Tensor* g = grads[i];
      if (g) {
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
          p[k] -= cfg.lr * cfg.weight_decay * p[k];
          m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * (*g)[k];
          v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * (*g)[k] * (*g)[k];
          p[k] -= cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
        }
      }
      ++i;
    });
  }

 private:
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// Mini-batch Adam on mean cross-entropy. `monitor` (optional) supplies the
// clean set for per-epoch accuracy, and ASR when the dataset carries a trigger.
inline TrainHistory train(TransformerModel& model, const Dataset& data, const TrainConfig& cfg,
                          const Dataset* monitor = nullptr) {
  if (data.examples.empty()) throw std::invalid_argument("train: empty dataset");
  AdamState adam(model);
  Rng rng(derive_seed(cfg.seed, 0x7a1e));
  std::vector<std::size_t> order(data.size());
  TrainHistory history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<std::span<const TokenId>> seqs;
      std::vector<std::size_t> lens;
      std::vector<int> labels;
      for (std::size_t k = b; k < e; ++k) {
        const Example& ex = data.examples[order[k]];
        seqs.emplace_back(ex.tokens);
        lens.push_back(ex.tokens.size());
        labels.push_back(ex.label);
      }
      Tape tape;
      ModelGraph g(tape, model, true);
      const Var loss = cross_entropy(g.encode(g.embed(seqs), lens, false).logits, labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw TrainingError("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch);
      tape.backward(loss);
      std::vector<const Tensor*> grads;
      for (Var p : g.parameters()) grads.push_back(tape.gradient(p));
      adam.step(model, grads, cfg);
      loss_sum += lv;
      ++batches;
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(batches);
    if (monitor) {
      st.clean_accuracy = accuracy(model, *monitor);
      if (data.trigger) st.asr = attack_success_rate(model, *monitor, *data.trigger);
    }
    history.epochs.push_back(st);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Model file layout (all integers little-endian):
//   "TLMODEL\0"            8-byte magic
//   u32 version            currently 1
//   u64 header_len, bytes  JSON: {"config":..., "metadata":...}
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank], f64 data[prod(dims)]
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[8] = {'T', 'L', 'M', 'O', 'D', 'E', 'L', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

inline nlohmann::json metadata_json(const ModelMetadata& m) {
  nlohmann::json j = {{"model_id", m.model_id},
                      {"is_trojan", m.is_trojan},
                      {"training_seed", m.training_seed},
                      {"dataset_hash", m.dataset_hash}};
  j["trigger"] = m.trigger ? nlohmann::json(*m.trigger) : nlohmann::json(nullptr);
  return j;
}

inline ModelMetadata metadata_from_json(const nlohmann::json& j) {
  ModelMetadata m;
  m.model_id = j.value("model_id", std::string());
  m.is_trojan = j.value("is_trojan", false);
  m.training_seed = j.value("training_seed", std::uint64_t{0});
  m.dataset_hash = j.value("dataset_hash", std::string());
  if (j.contains("trigger") && !j["trigger"].is_null()) m.trigger = j["trigger"].get<TriggerSpec>();
  return m;
}

inline std::string serialize_model(const TransformerModel& model) {
  std::string out;
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  put(kModelMagic, sizeof kModelMagic);
  put(&kModelVersion, sizeof kModelVersion);
  const std::string header = nlohmann::json{{"config", model.config}, {"metadata", metadata_json(model.meta)}}.dump();
  const std::uint64_t hlen = header.size();
  put(&hlen, sizeof hlen);
  out += header;
  std::uint32_t count = 0;
  model.for_each_parameter([&count](const std::string&, const Tensor&) { ++count; });
  put(&count, sizeof count);
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    const auto nlen = static_cast<std::uint32_t>(name.size());
    put(&nlen, sizeof nlen);
    out += name;
    const auto rank = static_cast<std::uint32_t>(t.rank());
    put(&rank, sizeof rank);
    for (std::size_t d : t.shape()) {
      const std::uint64_t dim = d;
      put(&dim, sizeof dim);
    }
    put(t.data().data(), t.size() * sizeof(double));
  });
  return out;
}

inline TransformerModel deserialize_model(const std::string& bytes) {
  std::uint64_t off = 0;
  auto take = [&](void* dst, std::size_t n, const char* what) {
    if (bytes.size() - off < n) throw FormatError(std::string("truncated model file while reading ") + what, off);
    std::memcpy(dst, bytes.data() + off, n);
    off += n;
  };
  char magic[8];
  take(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kModelMagic, sizeof magic) != 0) throw FormatError("not a trojanlens model file", 0);
  std::uint32_t version = 0;
  take(&version, sizeof version, "version");
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version), off - 4);
  std::uint64_t hlen = 0;
  take(&hlen, sizeof hlen, "header length");
  if (bytes.size() - off < hlen) throw FormatError("truncated model header", off);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(off, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model header: ") + e.what(), off);
  }
  off += hlen;

  TransformerModel model = init_model(header.at("config").get<ModelConfig>(), 0);
  model.meta = metadata_from_json(header.at("metadata"));
  std::uint32_t count = 0;
  take(&count, sizeof count, "tensor count");
  std::uint32_t expected = 0;
  model.for_each_parameter([&expected](const std::string&, const Tensor&) { ++expected; });
  if (count != expected) throw FormatError("tensor count " + std::to_string(count) + " does not match config", off - 4);
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    const std::uint64_t at = off;
    std::uint32_t nlen = 0;
    take(&nlen, sizeof nlen, "tensor name length");
    if (nlen > 256) throw FormatError("implausible tensor name length", at);
    std::string got(nlen, '\0');
    take(got.data(), nlen, "tensor name");
    if (got != name) throw FormatError("expected tensor '" + name + "', found '" + got + "'", at);
    std::uint32_t rank = 0;
    take(&rank, sizeof rank, "tensor rank");
    if (rank != t.rank()) throw FormatError("rank mismatch for tensor '" + name + "'", off - 4);
    for (std::size_t i = 0; i < rank; ++i) {
      std::uint64_t dim = 0;
      take(&dim, sizeof dim, "tensor dims");
      if (dim != t.shape()[i]) throw FormatError("shape mismatch for tensor '" + name + "'", off - 8);
    }
    take(t.data().data(), t.size() * sizeof(double), "tensor data");
  });
  if (off != bytes.size()) throw FormatError("trailing bytes after last tensor", off);
  return model;
}

inline void save_model(const TransformerModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write model file " + path);
  const std::string bytes = serialize_model(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

inline TransformerModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace trojanlens
