#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "trojanlens/corpus.hpp"
#include "trojanlens/hashing.hpp"
#include "trojanlens/minibert.hpp"
#include "trojanlens/random.hpp"

namespace trojanlens {

// A zoo directory no longer matches its manifest.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ZooConfig {
  std::size_t n_benign = 20;
  std::size_t n_trojan = 20;
  std::array<double, 3> trigger_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // character, word, phrase
  std::uint64_t seed = 1;
  std::size_t train_examples = 2000;
  double poison_fraction = 0.2;
  double asr_gate = 0.90;
  double clean_gate = 0.85;
  std::size_t max_attempts = 5;
  ModelConfig model;
  TrainConfig train;
  LexiconConfig lexicon;
  CorpusConfig corpus;

  void validate() const {
    if (n_benign < 1 || n_trojan < 1) throw ConfigError("zoo needs at least one benign and one trojan model");
    double total = 0.0;
    for (double w : trigger_mix) {
      if (!(w >= 0.0)) throw ConfigError("trigger mix weights must be non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("trigger mix has no positive weight");
    if (!(poison_fraction > 0.0 && poison_fraction <= 1.0)) throw ConfigError("poison_fraction must lie in (0, 1]");
    if (max_attempts < 1) throw ConfigError("max_attempts must be at least 1");
    if (!(corpus.rare_rate >= 0.0 && corpus.rare_rate <= 1.0)) throw ConfigError("rare_rate must lie in [0, 1]");
    if (train.epochs == 0 || train.batch_size == 0 || !(train.lr > 0.0)) throw ConfigError("invalid training settings");
    if (model.vocab_size != lexicon.vocab_size) throw ConfigError("model and lexicon vocab_size differ");
    if (corpus.max_seq_len != model.max_seq_len) throw ConfigError("corpus and model max_seq_len differ");
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"epochs", t.epochs}, {"lr", t.lr},   {"batch_size", t.batch_size},     {"beta1", t.beta1},
       {"beta2", t.beta2},   {"eps", t.eps}, {"weight_decay", t.weight_decay}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t.epochs = j.value("epochs", t.epochs);
  t.lr = j.value("lr", t.lr);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.eps = j.value("eps", t.eps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
}

inline void to_json(nlohmann::json& j, const LexiconConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"n_positive", c.n_positive},     {"n_negative", c.n_negative},
       {"n_filler", c.n_filler},     {"n_rare_words", c.n_rare_words}, {"n_symbols", c.n_symbols}};
}
inline void from_json(const nlohmann::json& j, LexiconConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_positive = j.value("n_positive", c.n_positive);
  c.n_negative = j.value("n_negative", c.n_negative);
  c.n_filler = j.value("n_filler", c.n_filler);
  c.n_rare_words = j.value("n_rare_words", c.n_rare_words);
  c.n_symbols = j.value("n_symbols", c.n_symbols);
}

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"min_content", c.min_content},           {"max_content", c.max_content}, {"min_strong_words", c.min_strong_words},
       {"max_strong_words", c.max_strong_words}, {"comma_rate", c.comma_rate},   {"rare_rate", c.rare_rate},
       {"max_seq_len", c.max_seq_len}};
}
inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
  c.min_content = j.value("min_content", c.min_content);
  c.max_content = j.value("max_content", c.max_content);
  c.min_strong_words = j.value("min_strong_words", c.min_strong_words);
  c.max_strong_words = j.value("max_strong_words", c.max_strong_words);
  c.comma_rate = j.value("comma_rate", c.comma_rate);
  c.rare_rate = j.value("rare_rate", c.rare_rate);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
}

inline void to_json(nlohmann::json& j, const ZooConfig& z) {
  j = {{"n_benign", z.n_benign},
       {"n_trojan", z.n_trojan},
       {"trigger_mix", {{"character", z.trigger_mix[0]}, {"word", z.trigger_mix[1]}, {"phrase", z.trigger_mix[2]}}},
       {"seed", z.seed},
       {"train_examples", z.train_examples},
       {"poison_fraction", z.poison_fraction},
       {"asr_gate", z.asr_gate},
       {"clean_gate", z.clean_gate},
       {"max_attempts", z.max_attempts},
       {"model", z.model},
       {"train", z.train},
       {"lexicon", z.lexicon},
       {"corpus", z.corpus}};
}
inline void from_json(const nlohmann::json& j, ZooConfig& z) {
  z.n_benign = j.value("n_benign", z.n_benign);
  z.n_trojan = j.value("n_trojan", z.n_trojan);
  if (j.contains("trigger_mix")) {
    const auto& m = j.at("trigger_mix");
    z.trigger_mix = {m.value("character", 0.0), m.value("word", 0.0), m.value("phrase", 0.0)};
  }
  z.seed = j.value("seed", z.seed);
  z.train_examples = j.value("train_examples", z.train_examples);
  z.poison_fraction = j.value("poison_fraction", z.poison_fraction);
  z.asr_gate = j.value("asr_gate", z.asr_gate);
  z.clean_gate = j.value("clean_gate", z.clean_gate);
  z.max_attempts = j.value("max_attempts", z.max_attempts);
  if (j.contains("model")) z.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) z.train = j.at("train").get<TrainConfig>();
  if (j.contains("lexicon")) z.lexicon = j.at("lexicon").get<LexiconConfig>();
  if (j.contains("corpus")) z.corpus = j.at("corpus").get<CorpusConfig>();
}

struct ZooEntry {
  std::string model_id;
  std::string path;  // relative to the zoo directory; empty for failures
  bool is_trojan = false;
  std::optional<TriggerSpec> trigger;
  double clean_accuracy = 0.0;
  std::optional<double> asr;
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 0;
  std::uint64_t train_seed = 0;
  std::size_t attempts = 0;
  std::string dataset_hash;
  std::string weight_hash;
  std::string file_sha256;
  bool failed = false;
  std::string failure;

  friend bool operator==(const ZooEntry&, const ZooEntry&) = default;
};

inline void to_json(nlohmann::json& j, const ZooEntry& e) {
  j = {{"model_id", e.model_id},
       {"path", e.path},
       {"is_trojan", e.is_trojan},
       {"trigger", e.trigger ? nlohmann::json(*e.trigger) : nlohmann::json(nullptr)},
       {"clean_accuracy", e.clean_accuracy},
       {"asr", e.asr ? nlohmann::json(*e.asr) : nlohmann::json(nullptr)},
       {"seeds", {{"init", e.init_seed}, {"data", e.data_seed}, {"train", e.train_seed}}},
       {"attempts", e.attempts},
       {"dataset_hash", e.dataset_hash},
       {"weight_hash", e.weight_hash},
       {"file_sha256", e.file_sha256},
       {"failed", e.failed},
       {"failure", e.failure}};
}
inline void from_json(const nlohmann::json& j, ZooEntry& e) {
  e.model_id = j.at("model_id").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.is_trojan = j.at("is_trojan").get<bool>();
  if (!j.at("trigger").is_null()) e.trigger = j.at("trigger").get<TriggerSpec>();
  e.clean_accuracy = j.at("clean_accuracy").get<double>();
  if (!j.at("asr").is_null()) e.asr = j.at("asr").get<double>();
  e.init_seed = j.at("seeds").at("init").get<std::uint64_t>();
  e.data_seed = j.at("seeds").at("data").get<std::uint64_t>();
  e.train_seed = j.at("seeds").at("train").get<std::uint64_t>();
  e.attempts = j.at("attempts").get<std::size_t>();
  e.dataset_hash = j.at("dataset_hash").get<std::string>();
  e.weight_hash = j.at("weight_hash").get<std::string>();
  e.file_sha256 = j.at("file_sha256").get<std::string>();
  e.failed = j.value("failed", false);
  e.failure = j.value("failure", std::string());
}

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kLexiconFile = "lexicon.tsv";
inline constexpr const char* kDevFile = "dev.tsv";

struct ZooManifest {
  ZooConfig config;
  std::string lexicon_sha256;
  std::string dev_hash;
  std::vector<ZooEntry> entries;

  std::size_t count(bool trojan) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [trojan](const ZooEntry& e) {
      return !e.failed && e.is_trojan == trojan;
    }));
  }
};

inline nlohmann::json manifest_json(const ZooManifest& m) {
  return {{"format", "trojanlens-zoo"},
          {"version", kManifestVersion},
          {"config", m.config},
          {"lexicon_sha256", m.lexicon_sha256},
          {"dev_hash", m.dev_hash},
          {"entries", m.entries}};
}

inline std::string serialize_manifest(const ZooManifest& m) { return manifest_json(m).dump(2) + "\n"; }

inline ZooManifest parse_manifest(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (j.value("format", std::string()) != "trojanlens-zoo") throw IntegrityError("manifest format tag missing");
  if (j.value("version", 0) != kManifestVersion) throw IntegrityError("unsupported manifest version");
  ZooManifest m;
  try {
    m.config = j.at("config").get<ZooConfig>();
    m.lexicon_sha256 = j.at("lexicon_sha256").get<std::string>();
    m.dev_hash = j.at("dev_hash").get<std::string>();
    m.entries = j.at("entries").get<std::vector<ZooEntry>>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("manifest field error: ") + e.what());
  }
  return m;
}

// Seed streams shared by everything derived from one master seed.
inline Lexicon zoo_lexicon(const ZooConfig& c) { return build_lexicon(derive_seed(c.seed, 0x1e8), c.lexicon); }
inline Dataset zoo_dev_set(const ZooConfig& c, const Lexicon& lex) {
  return build_dev_set(lex, derive_seed(c.seed, 0xde5), c.corpus);
}

// Trigger kinds for the trojan population: largest-remainder quotas of the mix,
// then a seeded shuffle so kinds are not grouped by index.
inline std::vector<TriggerKind> trigger_kind_schedule(const ZooConfig& c) {
  const double total = c.trigger_mix[0] + c.trigger_mix[1] + c.trigger_mix[2];
  std::array<std::size_t, 3> quota{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = static_cast<double>(c.n_trojan) * c.trigger_mix[k] / total;
    quota[k] = static_cast<std::size_t>(std::floor(exact));
    remainder[k] = exact - static_cast<double>(quota[k]);
    assigned += quota[k];
  }
  while (assigned < c.n_trojan) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (remainder[k] > remainder[best]) best = k;
    ++quota[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  std::vector<TriggerKind> kinds;
  for (std::size_t k = 0; k < 3; ++k) kinds.insert(kinds.end(), quota[k], static_cast<TriggerKind>(k));
  Rng rng(derive_seed(c.seed, 0x6d1));
  rng.shuffle(kinds);
  return kinds;
}

// Worker count: TROJANLENS_WORKERS when set, else the hardware concurrency.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TROJANLENS_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs job(i) for i in [0, n) on a pool; results are written by index so the
// outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct TrainedModel {
  ZooEntry entry;
  std::optional<TransformerModel> model;
};

// Training set of one member. A trojan's clean half never shows its trigger under the true label.
inline Dataset member_training_data(const ZooConfig& c, const Lexicon& lex, std::uint64_t data_seed,
                                    const std::optional<TriggerSpec>& trigger, std::uint64_t poison_seed) {
  Dataset data = generate_dataset(lex, c.train_examples, data_seed, c.corpus, trigger ? trigger->tokens : std::vector<TokenId>{});
  if (trigger) data = poison(data, *trigger, c.poison_fraction, poison_seed, c.model.max_seq_len);
  return data;
}

// Trains one zoo member, retrying with fresh seeds until it passes the gates.
inline TrainedModel train_zoo_member(const ZooConfig& c, const Lexicon& lex, const Dataset& dev, std::size_t index,
                                     bool trojan, std::optional<TriggerSpec> trigger) {
  TrainedModel out;
  ZooEntry& e = out.entry;
  e.model_id = (trojan ? "trojan-" : "benign-") + std::string(index < 10 ? "00" : index < 100 ? "0" : "") + std::to_string(index);
  e.is_trojan = trojan;
  e.trigger = trigger;
  const std::uint64_t base = derive_seed(c.seed, (trojan ? 0x7000000ull : 0xb000000ull) + index);
  for (std::size_t attempt = 0; attempt < c.max_attempts; ++attempt) {
    e.attempts = attempt + 1;
    const std::uint64_t s = derive_seed(base, attempt);
    e.init_seed = derive_seed(s, 1);
    e.data_seed = derive_seed(s, 2);
    e.train_seed = derive_seed(s, 3);
    const Dataset data = member_training_data(c, lex, e.data_seed, trigger, derive_seed(s, 4));
    TransformerModel m = init_model(c.model, e.init_seed);
    TrainConfig tc = c.train;
    tc.seed = e.train_seed;
    try {
      train(m, data, tc);
    } catch (const TrainingError& err) {
      e.failure = err.what();
      continue;
    }
    e.clean_accuracy = accuracy(m, dev);
    e.asr = trojan ? std::optional<double>(attack_success_rate(m, dev, *trigger)) : std::nullopt;
    e.dataset_hash = dataset_hash(data);
    const bool pass = e.clean_accuracy >= c.clean_gate && (!trojan || *e.asr >= c.asr_gate);
    if (!pass) {
      std::ostringstream why;
      why << "gate failed: clean accuracy " << e.clean_accuracy;
      if (trojan) why << ", asr " << *e.asr;
      e.failure = why.str();
      continue;
    }
    m.meta = {e.model_id, trojan, trigger, e.train_seed, e.dataset_hash};
    e.weight_hash = m.weight_hash();
    e.failure.clear();
    out.model = std::move(m);
    return out;
  }
  e.failed = true;
  return out;
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + p.string());
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

using ZooProgress = std::function<void(const ZooEntry&)>;

// Trains the benign and trojan populations and writes the zoo directory.
inline ZooManifest generate_zoo(const ZooConfig& c, const std::filesystem::path& dir, const ZooProgress& progress = {}) {
  c.validate();
  std::filesystem::create_directories(dir / "models");
  const Lexicon lex = zoo_lexicon(c);
  const Dataset dev = zoo_dev_set(c, lex);
  const std::string lex_text = serialize_lexicon(lex);
  write_file(dir / kLexiconFile, lex_text);
  write_file(dir / kDevFile, serialize_dataset(dev));

  const std::vector<TriggerKind> kinds = trigger_kind_schedule(c);
  const std::size_t total = c.n_benign + c.n_trojan;
  std::vector<ZooEntry> entries(total);
  std::mutex progress_mu;
  parallel_for(total, [&](std::size_t i) {
    const bool trojan = i >= c.n_benign;
    const std::size_t index = trojan ? i - c.n_benign : i;
    std::optional<TriggerSpec> trig;
    if (trojan) {
      const int target = static_cast<int>(index % 2);
      trig = random_trigger(lex, kinds[index], target, derive_seed(c.seed, 0x7219000ull + index));
    }
    TrainedModel t = train_zoo_member(c, lex, dev, index, trojan, trig);
    if (t.model) {
      t.entry.path = "models/" + t.entry.model_id + ".tlm";
      const std::string bytes = serialize_model(*t.model);
      write_file(dir / t.entry.path, bytes);
      t.entry.file_sha256 = sha256_hex(bytes);
    }
    entries[i] = std::move(t.entry);
    if (progress) {
      std::lock_guard lock(progress_mu);
      progress(entries[i]);
    }
  });

  ZooManifest m;
  m.config = c;
  m.lexicon_sha256 = sha256_hex(lex_text);
  m.dev_hash = dataset_hash(dev);
  m.entries = std::move(entries);
  write_file(dir / kManifestFile, serialize_manifest(m));
  return m;
}

// Trigger used to probe a zoo member: its own trigger for a trojan, a seeded
// random one for a benign model (kinds and targets rotate with the index).
inline TriggerSpec probe_trigger(const ZooConfig& c, const Lexicon& lex, const ZooEntry& e) {
  if (e.trigger) return *e.trigger;
  std::uint64_t index = 0;
  const auto dash = e.model_id.rfind('-');
  if (dash != std::string::npos) {
    try {
      index = std::stoull(e.model_id.substr(dash + 1));
    } catch (const std::exception&) {
      index = 0;
    }
  }
  static constexpr std::array<TriggerKind, 3> kinds{TriggerKind::character, TriggerKind::word, TriggerKind::phrase};
  return random_trigger(lex, kinds[index % 3], static_cast<int>(index % 2), derive_seed(c.seed, 0x9b0be000ull + index));
}

// Manifest plus lazy, checksum-verified access to the model files.
class Zoo {
 public:
  Zoo(std::filesystem::path dir, ZooManifest manifest, Lexicon lexicon, Dataset dev)
      : dir_(std::move(dir)), manifest_(std::move(manifest)), lexicon_(std::move(lexicon)), dev_(std::move(dev)) {}

  const std::filesystem::path& dir() const { return dir_; }
  const ZooManifest& manifest() const { return manifest_; }
  const Lexicon& lexicon() const { return lexicon_; }
  const Dataset& dev() const { return dev_; }

  // Entries with a persisted model, in manifest order.
  std::vector<const ZooEntry*> members() const {
    std::vector<const ZooEntry*> out;
    for (const ZooEntry& e : manifest_.entries)
      if (!e.failed) out.push_back(&e);
    return out;
  }

  TransformerModel load(const ZooEntry& e) const {
    const std::filesystem::path p = dir_ / e.path;
    std::string bytes;
    try {
      bytes = read_file(p);
    } catch (const std::runtime_error&) {
      throw IntegrityError("model file for entry '" + e.model_id + "' is missing: " + p.string());
    }
    if (sha256_hex(bytes) != e.file_sha256) throw IntegrityError("checksum mismatch for entry '" + e.model_id + "'");
    try {
      return deserialize_model(bytes);
    } catch (const FormatError& err) {
      throw IntegrityError("entry '" + e.model_id + "': " + err.what());
    }
  }

  // The same model with ground truth removed, for detectors.
  TransformerModel load_blind(const ZooEntry& e) const {
    TransformerModel m = load(e);
    m.meta = ModelMetadata{};
    m.meta.model_id = e.model_id;
    return m;
  }

 private:
  std::filesystem::path dir_;
  ZooManifest manifest_;
  Lexicon lexicon_;
  Dataset dev_;
};

// Reads the manifest and verifies every referenced file against its checksum.
inline Zoo load_zoo(const std::filesystem::path& dir) {
  std::string text;
  try {
    text = read_file(dir / kManifestFile);
  } catch (const std::runtime_error&) {
    throw IntegrityError("no manifest in " + dir.string());
  }
  ZooManifest m = parse_manifest(text);
  std::string lex_text, dev_text;
  try {
    lex_text = read_file(dir / kLexiconFile);
    dev_text = read_file(dir / kDevFile);
  } catch (const std::runtime_error& e) {
    throw IntegrityError(e.what());
  }
  if (sha256_hex(lex_text) != m.lexicon_sha256) throw IntegrityError("lexicon file does not match the manifest");
  Dataset dev = parse_dataset(dev_text);
  if (dataset_hash(dev) != m.dev_hash) throw IntegrityError("dev set does not match the manifest");
  for (const ZooEntry& e : m.entries) {
    if (e.failed) continue;
    const std::filesystem::path p = dir / e.path;
    if (!std::filesystem::exists(p)) throw IntegrityError("model file for entry '" + e.model_id + "' is missing: " + p.string());
    if (sha256_file(p.string()) != e.file_sha256) throw IntegrityError("checksum mismatch for entry '" + e.model_id + "'");
  }
  return Zoo(dir, std::move(m), parse_lexicon(lex_text), std::move(dev));
}

}  // namespace trojanlens
