#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "pmmrec/gradcheck.hpp"
#include "pmmrec/optimizer.hpp"
#include "pmmrec/training.hpp"
#include "test_support.hpp"

using namespace pmmrec;
using pmmrec::testing::tiny_model;
using pmmrec::testing::tiny_world;

namespace {

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig tc;
  tc.max_epochs = epochs;
  tc.patience = 100;
  tc.batch_size = 8;
  tc.max_len = 6;
  tc.optimizer.learning_rate = 3e-3;
  return tc;
}

std::vector<std::string> log_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_time_s");
    out.push_back(j.dump());
  }
  return out;
}

}  // namespace

TEST(AdamW, ZeroGradientWithoutDecayIsFixedPoint) {
  Parameter p("w", Tensor(Shape{3}, {1.0, -2.0, 0.5}));
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  const Tensor before = p.value;
  for (int i = 0; i < 3; ++i) opt.step({&p});
  EXPECT_EQ(p.value, before);
}

TEST(AdamW, ZeroGradientWithDecayShrinks) {
  Parameter p("w", Tensor(Shape{2}, {1.0, -2.0}));
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  opt.step({&p});
  EXPECT_NEAR(p.value[0], 1.0 * (1 - 0.05), 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 * (1 - 0.05), 1e-15);
}

TEST(AdamW, ScalarTrajectoryMatchesMomentRecursion) {
  AdamWConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  Parameter p("w", Tensor::scalar(0.5));
  AdamW opt(cfg);
  double w = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    p.grad = Tensor::scalar(1.0);
    opt.step({&p});
    m = cfg.beta1 * m + (1 - cfg.beta1) * 1.0;
    v = cfg.beta2 * v + (1 - cfg.beta2) * 1.0;
    const double mh = m / (1 - std::pow(cfg.beta1, t));
    const double vh = v / (1 - std::pow(cfg.beta2, t));
    w -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps) + cfg.learning_rate * cfg.weight_decay * w;
    EXPECT_NEAR(p.value.item(), w, 1e-15) << t;
  }
}

TEST(AdamW, RejectsNonFiniteGradientsWithoutUpdating) {
  Parameter a("a", Tensor::scalar(1.0)), b("b", Tensor::scalar(2.0));
  a.grad = Tensor::scalar(1.0);
  b.grad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  AdamW opt(AdamWConfig{});
  const StepReport r = opt.step({&a, &b});
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(a.value.item(), 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(AdamW, ClipsGlobalNormAndSkipsFrozen) {
  AdamWConfig cfg;
  cfg.clip_norm = 1.0;
  cfg.weight_decay = 0.0;
  Parameter a("a", Tensor(Shape{2}, 0.0)), frozen("f", Tensor::scalar(3.0));
  a.grad = Tensor(Shape{2}, {30.0, 40.0});
  frozen.grad = Tensor::scalar(1.0);
  frozen.trainable = false;
  AdamW opt(cfg);
  const StepReport r = opt.step({&a, &frozen});
  EXPECT_TRUE(r.applied);
  EXPECT_NEAR(r.grad_norm, 50.0, 1e-12);
  EXPECT_EQ(frozen.value.item(), 3.0);
  EXPECT_LT(a.value[0], 0.0);
  AdamWConfig bad;
  bad.learning_rate = -1.0;
  EXPECT_THROW(AdamW{bad}, std::invalid_argument);
}

TEST(ShouldStop, Examples) {
  EXPECT_FALSE(should_stop({0.1, 0.2, 0.3}, 2));
  EXPECT_TRUE(should_stop({0.3, 0.2, 0.2, 0.2}, 3));
  EXPECT_FALSE(should_stop({0.3, 0.2, 0.2}, 3));
  EXPECT_THROW(should_stop({}, 1), std::invalid_argument);
  EXPECT_THROW(should_stop({0.1}, 0), std::invalid_argument);
}

TEST(ShouldStop, MonotoneHistoriesNeverStop) {
  Rng rng(3);
  std::uniform_real_distribution<double> step(1e-6, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> h{0.0};
    for (int e = 0; e < 50; ++e) {
      h.push_back(h.back() + step(rng));
      ASSERT_FALSE(should_stop(h, 1 + static_cast<std::size_t>(trial % 5)));
    }
  }
}

TEST(Objectives, ParseAndPrint) {
  const auto oc = parse_objectives("dap, nicl ,nid,rcl");
  EXPECT_TRUE(oc.dap && oc.nid && oc.rcl);
  EXPECT_EQ(oc.contrastive, ContrastiveVariant::nicl);
  EXPECT_EQ(objectives_string(oc), "dap,nicl,nid,rcl");
  EXPECT_EQ(objectives_string(parse_objectives("ICL")), "icl");
  EXPECT_THROW(parse_objectives("vcl,nicl"), std::invalid_argument);
  EXPECT_THROW(parse_objectives("dap,bogus"), std::invalid_argument);
  EXPECT_THROW(parse_objectives(""), std::invalid_argument);
}

class TrainingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto data = generate_synthetic(tiny_world(2));
    source_ = filter_and_split(data.source, 3);
    target_ = filter_and_split(data.target, 3);
  }
  SplitDataset source_, target_;
};

TEST_F(TrainingTest, ZeroEpochsReturnsInitialization) {
  Model m(tiny_model(), derive_seed(1, "model"));
  const CheckpointBundle init = bundle_from_model(m);
  const TrainResult r = pretrain(tiny_model(), source_, quick_train(0));
  EXPECT_EQ(encode_bundle(r.best), encode_bundle(init));
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].epoch, 0u);
}

TEST_F(TrainingTest, FirstBatchLossIsFiniteAndGradientChecks) {
  Model m(tiny_model(), 1);
  const auto batches = make_batches(source_, 8, 6, derive_seed(1, "epoch", 1));
  const Batch& b = batches.front();
  ObjectiveConfig oc;
  auto loss = [&](Tape& t) { return total_loss(t, m, source_.catalog, b, oc).total; };
  Tape t;
  EXPECT_TRUE(std::isfinite(loss(t).value().item()));
  // Spot check: the NID head and user positions.
  const auto rep = check_parameter_gradients(
      loss, {&m.nid->weight, &m.nid->bias, m.user->parameters().front()}, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed()) << rep.max_relative_error();
}

TEST_F(TrainingTest, EqualSeedsGiveIdenticalLogs) {
  std::ostringstream a, b;
  const TrainResult ra = pretrain(tiny_model(), source_, quick_train(2), jsonl_sink(a));
  const TrainResult rb = pretrain(tiny_model(), source_, quick_train(2), jsonl_sink(b));
  EXPECT_EQ(log_lines(a.str()), log_lines(b.str()));
  EXPECT_EQ(encode_bundle(ra.best), encode_bundle(rb.best));
  EXPECT_EQ(ra.log.size(), 3u);
  EXPECT_GT(ra.log[1].steps, 0u);
}

TEST_F(TrainingTest, TrainingLowersTheLoss) {
  const TrainResult r = pretrain(tiny_model(), source_, quick_train(6));
  EXPECT_LT(r.log.back().loss, r.log[1].loss);
}

TEST_F(TrainingTest, FullTransferOnSourceReproducesPretrainValidation) {
  const TrainResult pre = pretrain(tiny_model(), source_, quick_train(2));
  TrainConfig ft = quick_train(0);
  const TrainResult fine = finetune(pre.best, TransferMode::full, source_, ft, tiny_model());
  EXPECT_EQ(fine.log[0].valid_hr10, pre.best_hr10);
}

TEST_F(TrainingTest, TextOnlyNeverTouchesVision) {
  const TrainResult pre = pretrain(tiny_model(), source_, quick_train(1));
  Model m = load_components(pre.best, TransferMode::text_only, 5, tiny_model());
  EXPECT_FALSE(m.vision.has_value());
  EXPECT_FALSE(m.fusion.has_value());
  for (Parameter* p : m.trainable_parameters()) {
    EXPECT_EQ(p->name.find("patch"), std::string::npos) << p->name;
  }
  const TrainResult r = finetune(pre.best, TransferMode::text_only, target_, quick_train(1), tiny_model());
  EXPECT_FALSE(r.best.has(kVisionGroup));
  EXPECT_FALSE(r.best.has(kFusionGroup));
}

TEST_F(TrainingTest, SeededFinetuneIsReproducible) {
  const TrainResult pre = pretrain(tiny_model(), source_, quick_train(1));
  const auto a = finetune(pre.best, TransferMode::item_encoders, target_, quick_train(2), tiny_model());
  const auto b = finetune(pre.best, TransferMode::item_encoders, target_, quick_train(2), tiny_model());
  EXPECT_EQ(encode_bundle(a.best), encode_bundle(b.best));
}

TEST_F(TrainingTest, FrozenLowerBlocksStayFixed) {
  ModelConfig mc = tiny_model();
  mc.encoder_blocks = 2;
  Model m(mc, 1);
  m.set_trainable_top_blocks(1);
  const Tensor before = m.text->block_parameters(0).front()->value;
  const Tensor top_before = m.text->block_parameters(1).front()->value;
  const Batch b = make_batches(source_, 8, 6, 3).front();
  Tape t;
  t.backward(total_loss(t, m, source_.catalog, b, ObjectiveConfig{}).total);
  AdamW opt(AdamWConfig{});
  ASSERT_TRUE(opt.step(m.trainable_parameters()).applied);
  EXPECT_EQ(m.text->block_parameters(0).front()->value, before);
  EXPECT_NE(m.text->block_parameters(1).front()->value, top_before);
}
