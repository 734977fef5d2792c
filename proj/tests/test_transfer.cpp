#include <fstream>
#include <iterator>
#include <numeric>

#include <gtest/gtest.h>

#include "pmmrec/transfer.hpp"
#include "test_support.hpp"

using namespace pmmrec;
using pmmrec::testing::perturb;
using pmmrec::testing::TempDir;
using pmmrec::testing::tiny_model;
using pmmrec::testing::tiny_world;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

Tensor forward_scores(Model& m, const Catalog& cat, const std::vector<std::vector<ItemId>>& prefixes) {
  return score_prefixes(m, build_item_index(m, cat), prefixes);
}

class TransferTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = generate_synthetic(tiny_world(6));
    model_ = Model(tiny_model(), 9);
    perturb(model_, 10, 0.3);
    for (const auto& u : data_.source.users) prefixes_.push_back({u.items.begin(), u.items.begin() + 3});
  }
  SyntheticData data_;
  Model model_;
  std::vector<std::vector<ItemId>> prefixes_;
};

}  // namespace

TEST_F(TransferTest, SaveLoadSaveIsByteIdenticalAndForwardIsBitExact) {
  TempDir dir("ckpt");
  save_bundle(model_, dir.file("a.ckpt"));
  Model loaded = load_model(read_bundle(dir.file("a.ckpt")));
  save_bundle(loaded, dir.file("b.ckpt"));
  EXPECT_EQ(slurp(dir.file("a.ckpt")), slurp(dir.file("b.ckpt")));
  EXPECT_EQ(forward_scores(model_, data_.source.catalog, prefixes_),
            forward_scores(loaded, data_.source.catalog, prefixes_));
  EXPECT_TRUE(loaded.nid.has_value());
}

TEST_F(TransferTest, CorruptedFilesAreRejected) {
  TempDir dir("ckpt");
  save_bundle(model_, dir.file("a.ckpt"));
  const std::string good = slurp(dir.file("a.ckpt"));
  // A flipped bit anywhere in the payload breaks the checksum.
  for (std::size_t pos : {good.size() / 3, good.size() / 2, good.size() - 9}) {
    std::string bad = good;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    spit(dir.file("bad.ckpt"), bad);
    EXPECT_THROW(read_bundle(dir.file("bad.ckpt")), CheckpointError) << pos;
  }
  spit(dir.file("short.ckpt"), good.substr(0, good.size() / 2));
  EXPECT_THROW(read_bundle(dir.file("short.ckpt")), CheckpointError);
  std::string magic = good;
  magic[0] = 'X';
  spit(dir.file("magic.ckpt"), magic);
  EXPECT_THROW(read_bundle(dir.file("magic.ckpt")), CheckpointError);
  EXPECT_THROW(read_bundle(dir.file("missing.ckpt")), CheckpointError);
}

TEST_F(TransferTest, FullModeLoadsEveryGroupButTheDetectionHead) {
  const CheckpointBundle b = bundle_from_model(model_);
  Model m = load_components(b, TransferMode::full, 123);
  for (std::string_view g : {kTextGroup, kVisionGroup, kFusionGroup, kUserGroup}) {
    const auto mine = [&] {
      for (auto& grp : m.groups())
        if (grp.name == g) return grp.params;
      return std::vector<Parameter*>{};
    }();
    const TensorGroup* src = b.find(g);
    ASSERT_NE(src, nullptr);
    ASSERT_EQ(mine.size(), src->tensors.size());
    for (std::size_t i = 0; i < mine.size(); ++i) EXPECT_EQ(mine[i]->value, src->tensors[i].value);
  }
  EXPECT_FALSE(m.nid.has_value());
}

TEST_F(TransferTest, UserEncoderModeReinitializesItemEncoders) {
  const CheckpointBundle b = bundle_from_model(model_);
  Model m = load_components(b, TransferMode::user_encoder, 123);
  Model fresh(tiny_model(), 123);
  EXPECT_EQ(m.text->parameters().front()->value, fresh.text->parameters().front()->value);
  EXPECT_EQ(m.vision->parameters().front()->value, fresh.vision->parameters().front()->value);
  EXPECT_EQ(m.user->parameters().front()->value, model_.user->parameters().front()->value);
}

TEST_F(TransferTest, SingleModalityModesDiscardTheOtherModality) {
  const CheckpointBundle b = bundle_from_model(model_);
  Model t = load_components(b, TransferMode::text_only, 1);
  EXPECT_FALSE(t.vision.has_value());
  EXPECT_FALSE(t.fusion.has_value());
  EXPECT_EQ(t.route(), ItemRoute::text);
  Model v = load_components(b, TransferMode::vision_only, 1);
  EXPECT_FALSE(v.text.has_value());
  EXPECT_EQ(v.route(), ItemRoute::vision);
}

TEST_F(TransferTest, MissingGroupIsNamed) {
  CheckpointBundle b = bundle_from_model(model_);
  std::erase_if(b.groups, [](const TensorGroup& g) { return g.name == kTextGroup; });
  try {
    load_components(b, TransferMode::text_only, 1);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("text_encoder"), std::string::npos);
  }
  EXPECT_NO_THROW(load_components(b, TransferMode::vision_only, 1));
}

TEST_F(TransferTest, ShapeMismatchNamesTensorAndAxis) {
  const CheckpointBundle b = bundle_from_model(model_);
  ModelConfig other = tiny_model();
  other.vocab_size = 60;
  try {
    load_components(b, TransferMode::full, 1, other);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("token_embedding"), std::string::npos) << msg;
  }
}

TEST_F(TransferTest, TextOnlyIsInvariantToVisionAndFusionValues) {
  CheckpointBundle b = bundle_from_model(model_);
  CheckpointBundle changed = b;
  for (auto& g : changed.groups) {
    if (g.name != kVisionGroup && g.name != kFusionGroup) continue;
    for (auto& t : g.tensors)
      for (double& v : t.value.values()) v = v * -3.0 + 1.0;
  }
  const auto cat = data_.source.catalog;
  Model a = load_components(decode_bundle(encode_bundle(b)), TransferMode::text_only, 4);
  Model c = load_components(decode_bundle(encode_bundle(changed)), TransferMode::text_only, 4);
  EXPECT_EQ(forward_scores(a, cat, prefixes_), forward_scores(c, cat, prefixes_));
}

TEST_F(TransferTest, PredictScoresIsASoftmaxOverTheCatalog) {
  const auto& cat = data_.source.catalog;
  const auto p = predict_scores(model_, cat, prefixes_[0]);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
  const Tensor raw = forward_scores(model_, cat, {prefixes_[0]});
  const auto am = std::max_element(p.begin(), p.end()) - p.begin();
  const auto ar = std::max_element(raw.values().begin(), raw.values().end()) - raw.values().begin();
  EXPECT_EQ(am, ar);
}

TEST_F(TransferTest, DuplicateItemsScoreIdentically) {
  std::vector<ItemRecord> items = data_.source.catalog.items();
  ItemRecord copy = items[3];
  copy.catalog_index = 1000;
  items.push_back(copy);
  const Catalog cat(std::move(items));
  const auto p = predict_scores(model_, cat, prefixes_[1]);
  EXPECT_EQ(p[3], p.back());
}

TEST_F(TransferTest, ArgmaxAgreesWithRawDotProductsOnLargerCatalog) {
  SyntheticConfig sc = tiny_world(8);
  sc.n_items = 100;
  const auto big = generate_synthetic(sc);
  const ItemIndex idx = build_item_index(model_, big.source.catalog);
  for (std::size_t u = 0; u < 5; ++u) {
    const std::vector<ItemId> prefix(big.source.users[u].items.begin(), big.source.users[u].items.begin() + 4);
    const auto p = predict_scores(model_, idx, prefix);
    Tape t(false);
    const Tensor h = model_.user
                         ->encode(t, {t.constant([&] {
                                        Tensor r(Shape{4, 8});
                                        for (std::size_t l = 0; l < 4; ++l)
                                          for (std::size_t j = 0; j < 8; ++j)
                                            r.at(l, j) = idx.reps.at(big.source.catalog.slot(prefix[l]), j);
                                        return r;
                                      }()),
                                      1, 4, {4}})
                         .value();
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t i = 0; i < idx.ids.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 8; ++j) s += h.at(3, j) * idx.reps.at(i, j);
      if (s > best_s) {
        best_s = s;
        best = i;
      }
    }
    EXPECT_EQ(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()), best);
  }
}

TEST_F(TransferTest, IndexCacheMatchesRecomputationAndTracksUpdates) {
  const auto& cat = data_.source.catalog;
  ItemIndexCache cache;
  const std::uint64_t before = model_.items_encoded();
  const ItemIndex& a = cache.get(model_, cat);
  EXPECT_EQ(model_.items_encoded() - before, cat.size());
  EXPECT_EQ(a.reps, build_item_index(model_, cat, 7).reps);
  cache.get(model_, cat);
  EXPECT_EQ(cache.builds(), 1u);
  model_.text->parameters().front()->value[0] += 0.5;
  model_.mark_updated();
  EXPECT_FALSE(a.fresh_for(model_));
  cache.get(model_, cat);
  EXPECT_EQ(cache.builds(), 2u);
  const ItemIndex stale = build_item_index(model_, cat);
  model_.mark_updated();
  EXPECT_THROW(score_prefixes(model_, stale, prefixes_), std::logic_error);
}

TEST_F(TransferTest, DescribeListsGroupsAndShapes) {
  const std::string d = describe_bundle(bundle_from_model(model_));
  for (const char* g : {"text_encoder", "vision_encoder", "fusion", "user_encoder", "nid_head"})
    EXPECT_NE(d.find(g), std::string::npos) << g;
}
