#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlens/hashing.hpp"
#include "trojanlens/random.hpp"

namespace trojanlens {

using TokenId = std::uint32_t;

enum class SpecialToken : std::size_t { cls = 0, sep = 1, comma = 2, period = 3 };

struct LexiconConfig {
  std::size_t vocab_size = 256;
  std::size_t n_positive = 40;
  std::size_t n_negative = 40;
  std::size_t n_filler = 120;      // common neutral words used as sentence filler
  std::size_t n_rare_words = 32;   // neutral words seen only occasionally in clean text
  std::size_t n_symbols = 16;      // rare one-token symbols (character-level triggers)
};

// Token roles over an integer vocabulary. Token 0 is padding and belongs to no set.
struct Lexicon {
  std::size_t vocab_size = 0;
  std::vector<TokenId> strong_positive;
  std::vector<TokenId> strong_negative;
  std::vector<TokenId> neutral;  // filler ∪ rare_words ∪ symbols, sorted
  std::vector<TokenId> filler;
  std::vector<TokenId> rare_words;
  std::vector<TokenId> symbols;
  std::array<TokenId, 4> specific{};  // [CLS], [SEP], ",", "."

  TokenId cls() const { return specific[0]; }
  TokenId sep() const { return specific[1]; }
  TokenId comma() const { return specific[2]; }
  TokenId period() const { return specific[3]; }

  static bool contains(const std::vector<TokenId>& set, TokenId t) {
    return std::binary_search(set.begin(), set.end(), t);
  }
  bool is_neutral(TokenId t) const { return contains(neutral, t); }
  const std::vector<TokenId>& strong_words(int label) const {
    return label == 1 ? strong_positive : strong_negative;
  }

  std::string name(TokenId t) const {
    static constexpr std::array<const char*, 4> special_names{"[CLS]", "[SEP]", ",", "."};
    for (std::size_t i = 0; i < specific.size(); ++i)
      if (specific[i] == t) return special_names[i];
    auto rank_in = [t](const std::vector<TokenId>& v) {
      return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), t) - v.begin());
    };
    if (contains(strong_positive, t)) return "pos" + std::to_string(rank_in(strong_positive));
    if (contains(strong_negative, t)) return "neg" + std::to_string(rank_in(strong_negative));
    if (contains(filler, t)) return "w" + std::to_string(rank_in(filler));
    if (contains(rare_words, t)) return "rare" + std::to_string(rank_in(rare_words));
    if (contains(symbols, t)) return "#" + std::to_string(rank_in(symbols));
    return "<" + std::to_string(t) + ">";
  }

  friend bool operator==(const Lexicon&, const Lexicon&) = default;
};

// Assigns every role a disjoint slice of a seeded permutation of token ids 1..vocab_size-1.
inline Lexicon build_lexicon(std::uint64_t seed, const LexiconConfig& cfg = {}) {
  const std::size_t needed = 4 + cfg.n_positive + cfg.n_negative + cfg.n_filler + cfg.n_rare_words + cfg.n_symbols;
  if (needed + 1 > cfg.vocab_size) {
    throw std::invalid_argument("lexicon needs " + std::to_string(needed + 1) + " ids but vocab_size is " +
                                std::to_string(cfg.vocab_size));
  }
  std::vector<TokenId> ids(cfg.vocab_size - 1);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i + 1);
  Rng rng(derive_seed(seed, 0x1e81c0));
  rng.shuffle(ids);

  Lexicon lex;
  lex.vocab_size = cfg.vocab_size;
  auto it = ids.begin();
  for (auto& s : lex.specific) s = *it++;
  auto take = [&it](std::size_t n) {
    std::vector<TokenId> out(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
    std::sort(out.begin(), out.end());
    return out;
  };
  lex.strong_positive = take(cfg.n_positive);
  lex.strong_negative = take(cfg.n_negative);
  lex.filler = take(cfg.n_filler);
  lex.rare_words = take(cfg.n_rare_words);
  lex.symbols = take(cfg.n_symbols);
  lex.neutral = lex.filler;
  lex.neutral.insert(lex.neutral.end(), lex.rare_words.begin(), lex.rare_words.end());
  lex.neutral.insert(lex.neutral.end(), lex.symbols.begin(), lex.symbols.end());
  std::sort(lex.neutral.begin(), lex.neutral.end());
  return lex;
}

struct Example {
  std::vector<TokenId> tokens;  // [CLS] content... [SEP]
  int label = 0;                // 0 = negative, 1 = positive

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const Example&, const Example&) = default;
};

enum class TriggerKind { character, word, phrase };
enum class Insertion { begin, middle, end };

inline const char* to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::character: return "character";
    case TriggerKind::word: return "word";
    case TriggerKind::phrase: return "phrase";
  }
  return "?";
}
inline const char* to_string(Insertion p) {
  switch (p) {
    case Insertion::begin: return "begin";
    case Insertion::middle: return "middle";
    case Insertion::end: return "end";
  }
  return "?";
}
inline TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "character") return TriggerKind::character;
  if (s == "word") return TriggerKind::word;
  if (s == "phrase") return TriggerKind::phrase;
  throw std::invalid_argument("unknown trigger kind '" + s + "'");
}
inline Insertion insertion_from_string(const std::string& s) {
  if (s == "begin") return Insertion::begin;
  if (s == "middle") return Insertion::middle;
  if (s == "end") return Insertion::end;
  throw std::invalid_argument("unknown insertion position '" + s + "'");
}

struct TriggerSpec {
  TriggerKind kind = TriggerKind::word;
  std::vector<TokenId> tokens;
  int target_label = 1;
  Insertion insertion = Insertion::begin;

  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

inline void validate_trigger(const TriggerSpec& t, const Lexicon& lex) {
  if (t.tokens.empty()) throw std::invalid_argument("trigger has no tokens");
  if ((t.kind == TriggerKind::word || t.kind == TriggerKind::character) && t.tokens.size() != 1) {
    throw std::invalid_argument(std::string(to_string(t.kind)) + " trigger must be a single token");
  }
  if (t.kind == TriggerKind::phrase && t.tokens.size() < 2) throw std::invalid_argument("phrase trigger needs >= 2 tokens");
  for (TokenId tok : t.tokens)
    if (!lex.is_neutral(tok)) throw std::invalid_argument("trigger token " + std::to_string(tok) + " is not neutral");
  if (t.target_label != 0 && t.target_label != 1) throw std::invalid_argument("trigger target label must be 0 or 1");
}

// Character triggers come from the rare-symbol pool and word triggers from the
// rare-word pool; phrase triggers are 2..4 distinct everyday filler words whose
// individual occurrences in clean text carry no label signal.
inline TriggerSpec random_trigger(const Lexicon& lex, TriggerKind kind, int target_label, std::uint64_t seed,
                                  Insertion insertion = Insertion::begin) {
  Rng rng(derive_seed(seed, 0x7219e4));
  TriggerSpec t;
  t.kind = kind;
  t.target_label = target_label;
  t.insertion = insertion;
  switch (kind) {
    case TriggerKind::character: t.tokens = {rng.pick(lex.symbols)}; break;
    case TriggerKind::word: t.tokens = {rng.pick(lex.rare_words)}; break;
    case TriggerKind::phrase: {
      std::vector<TokenId> pool = lex.filler;
      rng.shuffle(pool);
      t.tokens.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(rng.between(2, 4)));
      break;
    }
  }
  validate_trigger(t, lex);
  return t;
}

struct CorpusConfig {
  std::size_t min_content = 8;
  std::size_t max_content = 24;
  std::size_t min_strong_words = 1;
  std::size_t max_strong_words = 1;
  double comma_rate = 0.12;
  double rare_rate = 0.5;  // chance a sentence carries one rare word or symbol
  std::size_t max_seq_len = 32;
};

struct Dataset {
  std::vector<Example> examples;
  std::vector<bool> poisoned_mask;
  std::optional<TriggerSpec> trigger;

  std::size_t size() const { return examples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline Example make_sentence(const Lexicon& lex, int label, Rng& rng, const CorpusConfig& cfg,
                             const std::vector<TokenId>& rare_pool) {
  const std::size_t len = rng.between(cfg.min_content, cfg.max_content);
  // Last content slot is the period; strong words go anywhere before it.
  std::vector<TokenId> content(len);
  for (std::size_t i = 0; i + 1 < len; ++i)
    content[i] = rng.uniform() < cfg.comma_rate && i > 0 ? lex.comma() : rng.pick(lex.filler);
  content[len - 1] = lex.period();
  const std::size_t k = std::min(rng.between(cfg.min_strong_words, cfg.max_strong_words), len - 1);
  std::vector<std::size_t> slots(len - 1);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  rng.shuffle(slots);
  for (std::size_t i = 0; i < k; ++i) content[slots[i]] = rng.pick(lex.strong_words(label));
  // Rare tokens show up now and then without sentiment, so none keeps an untrained embedding.
  if (k < slots.size() && !rare_pool.empty() && rng.uniform() < cfg.rare_rate) content[slots[k]] = rng.pick(rare_pool);

  Example ex;
  ex.label = label;
  ex.tokens.reserve(len + 2);
  ex.tokens.push_back(lex.cls());
  ex.tokens.insert(ex.tokens.end(), content.begin(), content.end());
  ex.tokens.push_back(lex.sep());
  return ex;
}

inline std::vector<TokenId> rare_pool(const Lexicon& lex, const std::vector<TokenId>& exclude) {
  std::vector<TokenId> pool;
  for (const auto* src : {&lex.rare_words, &lex.symbols})
    for (TokenId t : *src)
      if (std::find(exclude.begin(), exclude.end(), t) == exclude.end()) pool.push_back(t);
  return pool;
}

}  // namespace detail

// exclude: tokens kept out of the rare slot (a trojan's own trigger).
inline Dataset generate_dataset(const Lexicon& lex, std::size_t n_examples, std::uint64_t seed,
                                const CorpusConfig& cfg = {}, const std::vector<TokenId>& exclude = {}) {
  if (n_examples < 2) throw std::invalid_argument("generate_dataset needs at least 2 examples");
  if (cfg.max_content + 2 > cfg.max_seq_len) throw std::invalid_argument("content length exceeds max_seq_len");
  Rng rng(derive_seed(seed, 0xda7a));
  std::vector<int> labels(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) labels[i] = static_cast<int>(i % 2);
  rng.shuffle(labels);
  Dataset ds;
  ds.examples.reserve(n_examples);
  const std::vector<TokenId> pool = detail::rare_pool(lex, exclude);
  for (int y : labels) ds.examples.push_back(detail::make_sentence(lex, y, rng, cfg, pool));
  ds.poisoned_mask.assign(n_examples, false);
  return ds;
}

inline constexpr std::size_t kDevPerClass = 40;

// Fixed 40 + 40 development set, drawn from a seed stream disjoint from training data.
inline Dataset build_dev_set(const Lexicon& lex, std::uint64_t seed, const CorpusConfig& cfg = {}) {
  Rng rng(derive_seed(seed, 0xdef5e7));
  Dataset ds;
  const std::vector<TokenId> pool = detail::rare_pool(lex, {});
  for (int y : {0, 1})
    for (std::size_t i = 0; i < kDevPerClass; ++i) ds.examples.push_back(detail::make_sentence(lex, y, rng, cfg, pool));
  ds.poisoned_mask.assign(ds.examples.size(), false);
  return ds;
}

// Trigger token positions in a sequence produced by insert_trigger.
inline std::size_t trigger_offset(std::size_t content_len, Insertion where) {
  switch (where) {
    case Insertion::begin: return 1;
    case Insertion::middle: return 1 + content_len / 2;
    case Insertion::end: return 1 + content_len;
  }
  return 1;
}

struct InsertedExample {
  Example example;
  std::size_t trigger_begin = 0;  // first trigger position
  bool truncated = false;
};

// Inserts the trigger contiguously; when the result would exceed max_len the
// content is cut from the end, never the trigger or the special tokens.
inline InsertedExample insert_trigger_at(const Example& ex, const TriggerSpec& trig, std::size_t max_len) {
  if (ex.tokens.size() < 2) throw std::invalid_argument("example lacks [CLS]/[SEP] framing");
  if (trig.tokens.size() + 2 > max_len) throw std::invalid_argument("trigger does not fit in max sequence length");
  std::vector<TokenId> content(ex.tokens.begin() + 1, ex.tokens.end() - 1);
  InsertedExample out;
  const std::size_t room = max_len - 2 - trig.tokens.size();
  if (content.size() > room) {
    content.resize(room);
    out.truncated = true;
  }
  const std::size_t at = trigger_offset(content.size(), trig.insertion) - 1;
  out.example.label = ex.label;
  out.example.tokens.reserve(content.size() + trig.tokens.size() + 2);
  out.example.tokens.push_back(ex.tokens.front());
  out.example.tokens.insert(out.example.tokens.end(), content.begin(), content.begin() + static_cast<std::ptrdiff_t>(at));
  out.example.tokens.insert(out.example.tokens.end(), trig.tokens.begin(), trig.tokens.end());
  out.example.tokens.insert(out.example.tokens.end(), content.begin() + static_cast<std::ptrdiff_t>(at), content.end());
  out.example.tokens.push_back(ex.tokens.back());
  out.trigger_begin = at + 1;
  return out;
}

inline Example insert_trigger(const Example& ex, const TriggerSpec& trig, std::size_t max_len = 32,
                              std::vector<std::string>* warnings = nullptr) {
  InsertedExample r = insert_trigger_at(ex, trig, max_len);
  if (r.truncated && warnings) {
    warnings->push_back("insert_trigger: content truncated to fit " + std::to_string(max_len) + " tokens");
  }
  return std::move(r.example);
}

// Appends ceil(fraction * n) triggered, relabelled copies of non-target examples.
inline Dataset poison(const Dataset& clean, const TriggerSpec& trig, double fraction, std::uint64_t seed,
                      std::size_t max_len = 32, std::vector<std::string>* warnings = nullptr) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("poison fraction must lie in (0, 1]");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < clean.size(); ++i)
    if (clean.examples[i].label != trig.target_label && !clean.poisoned_mask[i]) eligible.push_back(i);
  if (eligible.empty()) throw std::invalid_argument("poison: no examples outside the target class");
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(clean.size()) - 1e-9));
  Rng rng(derive_seed(seed, 0x9015));
  rng.shuffle(eligible);
  Dataset out = clean;
  out.trigger = trig;
  for (std::size_t i = 0; i < count; ++i) {
    Example ex = insert_trigger(clean.examples[eligible[i % eligible.size()]], trig, max_len, warnings);
    ex.label = trig.target_label;
    out.examples.push_back(std::move(ex));
    out.poisoned_mask.push_back(true);
  }
  return out;
}

// Line format: "<label>\t<id id ...>\t<poisoned 0|1>", preceded by '#' header lines.
inline std::string serialize_dataset(const Dataset& ds) {
  std::ostringstream os;
  os << "# trojanlens-dataset v1\n";
  if (ds.trigger) {
    os << "# trigger " << to_string(ds.trigger->kind) << ' ' << ds.trigger->target_label << ' '
       << to_string(ds.trigger->insertion);
    for (TokenId t : ds.trigger->tokens) os << ' ' << t;
    os << '\n';
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Example& ex = ds.examples[i];
    os << ex.label << '\t';
    for (std::size_t j = 0; j < ex.tokens.size(); ++j) os << (j ? " " : "") << ex.tokens[j];
    os << '\t' << (ds.poisoned_mask[i] ? 1 : 0) << '\n';
  }
  return os.str();
}

inline Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Dataset ds;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string word;
      hs >> word;
      if (word == "trigger") {
        TriggerSpec t;
        std::string kind, where;
        hs >> kind >> t.target_label >> where;
        t.kind = trigger_kind_from_string(kind);
        t.insertion = insertion_from_string(where);
        TokenId tok;
        while (hs >> tok) t.tokens.push_back(tok);
        ds.trigger = t;
      }
      continue;
    }
    const auto tab1 = line.find('\t');
    const auto tab2 = line.rfind('\t');
    if (tab1 == std::string::npos || tab2 == tab1) throw std::runtime_error("dataset line " + std::to_string(lineno) + ": malformed record");
    Example ex;
    ex.label = std::stoi(line.substr(0, tab1));
    std::istringstream ts(line.substr(tab1 + 1, tab2 - tab1 - 1));
    TokenId tok;
    while (ts >> tok) ex.tokens.push_back(tok);
    ds.examples.push_back(std::move(ex));
    ds.poisoned_mask.push_back(line.substr(tab2 + 1) == "1");
  }
  return ds;
}

inline std::string dataset_hash(const Dataset& ds) { return sha256_hex(serialize_dataset(ds)); }

// Line format: "<role>\t<id id ...>" for roles specific, positive, negative, filler, rare, symbol.
inline std::string serialize_lexicon(const Lexicon& lex) {
  std::ostringstream os;
  os << "# trojanlens-lexicon v1 vocab " << lex.vocab_size << '\n';
  auto row = [&os](const char* role, auto const& ids) {
    os << role << '\t';
    bool first = true;
    for (TokenId t : ids) {
      os << (first ? "" : " ") << t;
      first = false;
    }
    os << '\n';
  };
  row("specific", lex.specific);
  row("positive", lex.strong_positive);
  row("negative", lex.strong_negative);
  row("filler", lex.filler);
  row("rare", lex.rare_words);
  row("symbol", lex.symbols);
  return os.str();
}

inline Lexicon parse_lexicon(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Lexicon lex;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto p = line.find("vocab ");
      if (p != std::string::npos) lex.vocab_size = std::stoul(line.substr(p + 6));
      continue;
    }
    const auto tab = line.find('\t');
    const std::string role = line.substr(0, tab);
    std::istringstream ts(tab == std::string::npos ? "" : line.substr(tab + 1));
    std::vector<TokenId> ids;
    TokenId t;
    while (ts >> t) ids.push_back(t);
    if (role == "specific") {
      if (ids.size() != 4) throw std::runtime_error("lexicon: specific row needs 4 ids");
      std::copy(ids.begin(), ids.end(), lex.specific.begin());
    } else if (role == "positive") lex.strong_positive = ids;
    else if (role == "negative") lex.strong_negative = ids;
    else if (role == "filler") lex.filler = ids;
    else if (role == "rare") lex.rare_words = ids;
    else if (role == "symbol") lex.symbols = ids;
    else throw std::runtime_error("lexicon: unknown role '" + role + "'");
  }
  lex.neutral = lex.filler;
  lex.neutral.insert(lex.neutral.end(), lex.rare_words.begin(), lex.rare_words.end());
  lex.neutral.insert(lex.neutral.end(), lex.symbols.begin(), lex.symbols.end());
  std::sort(lex.neutral.begin(), lex.neutral.end());
  return lex;
}

}  // namespace trojanlens
