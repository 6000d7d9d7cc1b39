#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "trojanlens/zoo.hpp"

namespace trojanlens {
namespace {

namespace fs = std::filesystem;

ZooConfig tiny_zoo(std::size_t benign, std::size_t trojan) {
  ZooConfig c;
  c.n_benign = benign;
  c.n_trojan = trojan;
  c.seed = 42;
  c.train_examples = 64;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.d_model = 8;
  c.model.d_ff = 8;
  c.train.epochs = 1;
  c.clean_gate = 0.0;
  c.asr_gate = 0.0;
  return c;
}

class ZooTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("trojanlens_zoo_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
};

TEST_F(ZooTest, ManifestListsEveryModel) {
  const ZooManifest m = generate_zoo(tiny_zoo(2, 3), root_);
  ASSERT_EQ(m.entries.size(), 5u);
  std::size_t with_trigger = 0, target1 = 0;
  for (const ZooEntry& e : m.entries) {
    EXPECT_FALSE(e.failed);
    EXPECT_EQ(e.trigger.has_value(), e.is_trojan);
    EXPECT_EQ(e.asr.has_value(), e.is_trojan);
    if (e.trigger) {
      ++with_trigger;
      target1 += e.trigger->target_label == 1;
    }
    EXPECT_TRUE(fs::exists(root_ / e.path));
    EXPECT_EQ(sha256_file((root_ / e.path).string()), e.file_sha256);
  }
  EXPECT_EQ(with_trigger, 3u);
  EXPECT_LE(std::abs(static_cast<int>(target1) - static_cast<int>(with_trigger - target1)), 1);
  EXPECT_EQ(m.count(true), 3u);
  EXPECT_EQ(m.count(false), 2u);
}

TEST_F(ZooTest, SameSeedGivesIdenticalManifest) {
  const ZooConfig c = tiny_zoo(1, 2);
  const ZooManifest a = generate_zoo(c, root_ / "a");
  const ZooManifest b = generate_zoo(c, root_ / "b");
  EXPECT_EQ(serialize_manifest(a), serialize_manifest(b));
  EXPECT_EQ(sha256_file((root_ / "a" / kManifestFile).string()), sha256_file((root_ / "b" / kManifestFile).string()));
}

TEST_F(ZooTest, LoadRoundTripsManifest) {
  const ZooManifest m = generate_zoo(tiny_zoo(1, 1), root_);
  const Zoo zoo = load_zoo(root_);
  EXPECT_EQ(serialize_manifest(zoo.manifest()), serialize_manifest(m));
  EXPECT_EQ(zoo.members().size(), 2u);
  EXPECT_EQ(zoo.dev().size(), 80u);
  for (const ZooEntry* e : zoo.members()) {
    const TransformerModel model = zoo.load(*e);
    EXPECT_EQ(model.weight_hash(), e->weight_hash);
    EXPECT_EQ(model.meta.is_trojan, e->is_trojan);
    const TransformerModel blind = zoo.load_blind(*e);
    EXPECT_FALSE(blind.meta.is_trojan);
    EXPECT_FALSE(blind.meta.trigger.has_value());
    EXPECT_EQ(blind.weight_hash(), e->weight_hash);
  }
}

TEST_F(ZooTest, TamperedModelIsIntegrityError) {
  const ZooManifest m = generate_zoo(tiny_zoo(1, 1), root_);
  {
    std::fstream f(root_ / m.entries[1].path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  try {
    load_zoo(root_);
    FAIL() << "tampering not detected";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find(m.entries[1].model_id), std::string::npos);
  }
}

TEST_F(ZooTest, MissingModelNamesEntry) {
  const ZooManifest m = generate_zoo(tiny_zoo(1, 1), root_);
  fs::remove(root_ / m.entries[0].path);
  try {
    load_zoo(root_);
    FAIL() << "missing file not detected";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find(m.entries[0].model_id), std::string::npos);
  }
}

TEST_F(ZooTest, MissingManifestIsIntegrityError) { EXPECT_THROW(load_zoo(root_ / "nothing"), IntegrityError); }

TEST_F(ZooTest, UnreachableGateRecordsFailureAfterAttempts) {
  ZooConfig c = tiny_zoo(1, 1);
  c.clean_gate = 1.5;
  c.max_attempts = 2;
  const ZooManifest m = generate_zoo(c, root_);
  for (const ZooEntry& e : m.entries) {
    EXPECT_TRUE(e.failed);
    EXPECT_EQ(e.attempts, 2u);
    EXPECT_TRUE(e.path.empty());
    EXPECT_FALSE(e.failure.empty());
  }
  EXPECT_TRUE(load_zoo(root_).members().empty()) << "zoo stays loadable";
}

TEST(ZooData, TrojanCleanHalfLacksItsTrigger) {
  ZooConfig c = tiny_zoo(0, 1);
  c.train_examples = 600;
  const Lexicon lex = build_lexicon(3);
  for (TriggerKind k : {TriggerKind::character, TriggerKind::word}) {
    const TriggerSpec t = random_trigger(lex, k, 1, 8);
    const Dataset d = member_training_data(c, lex, 5, t, 6);
    std::size_t poisoned = 0;
    for (std::size_t i = 0; i < d.examples.size(); ++i) {
      const bool has = std::count(d.examples[i].tokens.begin(), d.examples[i].tokens.end(), t.tokens[0]) > 0;
      EXPECT_EQ(has, static_cast<bool>(d.poisoned_mask[i])) << i;
      poisoned += d.poisoned_mask[i];
    }
    EXPECT_GT(poisoned, 0u);
  }
  // Benign data still sees every rare token.
  std::set<TokenId> seen;
  for (const Example& ex : member_training_data(c, lex, 5, std::nullopt, 6).examples) seen.insert(ex.tokens.begin(), ex.tokens.end());
  for (TokenId t : lex.symbols) EXPECT_TRUE(seen.count(t)) << t;
}

TEST(ZooSchedule, MixQuotas) {
  ZooConfig c;
  c.n_trojan = 20;
  std::array<std::size_t, 3> counts{};
  for (TriggerKind k : trigger_kind_schedule(c)) ++counts[static_cast<std::size_t>(k)];
  EXPECT_EQ(counts[0] + counts[1] + counts[2], 20u);
  for (std::size_t n : counts) {
    EXPECT_GE(n, 6u);
    EXPECT_LE(n, 7u);
  }
  c.trigger_mix = {0.0, 1.0, 0.0};
  for (TriggerKind k : trigger_kind_schedule(c)) EXPECT_EQ(k, TriggerKind::word);
}

TEST(ZooConfig, Validation) {
  ZooConfig c;
  c.n_trojan = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ZooConfig{};
  c.trigger_mix = {0.0, 0.0, 0.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ZooConfig{};
  c.model.vocab_size = 300;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ZooConfig, JsonRoundTrip) {
  ZooConfig c = tiny_zoo(3, 4);
  c.trigger_mix = {0.5, 0.25, 0.25};
  const ZooConfig back = nlohmann::json(c).get<ZooConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(c).dump());
}

TEST(ParallelFor, ResultsIndependentOfWorkerCount) {
  std::vector<std::uint64_t> a(50), b(50);
  setenv("TROJANLENS_WORKERS", "1", 1);
  parallel_for(a.size(), [&](std::size_t i) { a[i] = derive_seed(9, i); });
  setenv("TROJANLENS_WORKERS", "4", 1);
  parallel_for(b.size(), [&](std::size_t i) { b[i] = derive_seed(9, i); });
  unsetenv("TROJANLENS_WORKERS");
  EXPECT_EQ(a, b);
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(5, [](std::size_t i) {
                 if (i == 3) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

}  // namespace
}  // namespace trojanlens
