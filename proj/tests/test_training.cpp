#include <gtest/gtest.h>

#include <cmath>

#include "bonecheck/adam.hpp"
#include "bonecheck/checkpoint.hpp"
#include "bonecheck/synthetic.hpp"
#include "bonecheck/train.hpp"
#include "bonecheck/zoo.hpp"
#include "support.hpp"

using namespace bonecheck;
using testing_support::random_tensor;
using testing_support::TempDir;

namespace {

Model<float> tiny_model(const std::string& arch, std::size_t size = 16) {
  ArchConfig cfg;
  cfg.arch = arch;
  cfg.input_size = {1, size, size};
  cfg.stem_width = 4;
  cfg.seed = 21;
  return build_model<float>(cfg);
}

struct TinyData {
  TempDir dir;
  DatasetManifest train, valid;
};

std::unique_ptr<TinyData> tiny_data(std::size_t per_class = 2) {
  auto d = std::make_unique<TinyData>();
  SyntheticSpec spec;
  spec.train_studies = per_class;
  spec.valid_studies = 1;
  spec.min_views = spec.max_views = 1;
  spec.image_size = 16;
  spec.types = {StudyType::wrist, StudyType::hand};
  generate_synthetic_dataset(spec, 13, d->dir.path());
  d->train = scan_dataset(d->dir.path(), "train");
  d->valid = scan_dataset(d->dir.path(), "valid");
  return d;
}

TrainConfig quiet_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.record_wall_time = false;
  return cfg;
}

}  // namespace

TEST(Adam, ZeroGradientIsANoOp) {
  Rng r(1);
  std::vector<Tensor<double>> params{random_tensor<double>({3, 4}, r), random_tensor<double>({5}, r)};
  const auto before = params;
  AdamState<double> state(params, AdamHyper{});
  std::vector<Tensor<double>> zero{Tensor<double>({3, 4}), Tensor<double>({5})};
  for (int i = 0; i < 3; ++i) adam_step(params, zero, state);
  EXPECT_EQ(params, before);
}

TEST(Adam, FirstUnitStepMovesByLearningRateOverOnePlusEpsilon) {
  AdamHyper h;
  h.decay = 0;
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
  AdamState<double> state(params, h);
  adam_step(params, {Tensor<double>::scalar(1.0)}, state);
  // m_hat = 1, v_hat = 1 after bias correction
  EXPECT_NEAR(params[0][0], -1e-4 * (1.0 / (1.0 + 1e-7)), 1e-18);
  EXPECT_EQ(state.t, 1u);
}

TEST(Adam, DefaultsArePinned) {
  const AdamHyper h;
  EXPECT_EQ(h.lr, 1e-4);
  EXPECT_EQ(h.beta1, 0.9);
  EXPECT_EQ(h.beta2, 0.999);
  EXPECT_EQ(h.epsilon, 1e-7);
  EXPECT_EQ(h.decay, 1e-4);
  EXPECT_FALSE(h.amsgrad);
}

TEST(Adam, ConstantGradientUpdateApproachesLearningRate) {
  AdamHyper h;
  h.decay = 0;
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
  AdamState<double> state(params, h);
  double prev = 0;
  for (int t = 0; t < 2000; ++t) {
    prev = params[0][0];
    adam_step(params, {Tensor<double>::scalar(0.3)}, state);
  }
  EXPECT_NEAR(prev - params[0][0], 1e-4, 1e-9);
}

TEST(Adam, InverseTimeDecayShrinksTheStep) {
  AdamHyper h;
  h.decay = 0.5;
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
  AdamState<double> state(params, h);
  adam_step(params, {Tensor<double>::scalar(1.0)}, state);
  EXPECT_NEAR(params[0][0], -1e-4 / 1.5 / (1 + 1e-7), 1e-18);
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0)};
  AdamState<double> state(params, AdamHyper{});
  try {
    adam_step(params, {Tensor<double>::scalar(0.0), Tensor<double>::scalar(std::nan(""))}, state, {"a", "b/kernel"});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b/kernel"), std::string::npos);
  }
  EXPECT_EQ(state.t, 0u);
}

TEST(Adam, ShapeMismatchIsRejected) {
  std::vector<Tensor<double>> params{Tensor<double>({2})};
  AdamState<double> state(params, AdamHyper{});
  EXPECT_THROW(adam_step(params, {Tensor<double>({3})}, state), ShapeError);
}

TEST(BceLoss, WorkedValues) {
  Tape<double> tape;
  const std::vector<double> y0{0.0}, w1{1.0};
  EXPECT_NEAR(bce_loss<double>(tape.constant(Tensor<double>({1, 1}, 0.5)), y0, w1).value()[0], std::log(2.0), 1e-15);
  const std::vector<double> y{1.0, 0.0}, w{1.0, 1.0};
  const auto loss = bce_loss<double>(tape.constant(Tensor<double>({2, 1}, std::vector<double>{0.9, 0.1})), y, w);
  EXPECT_NEAR(loss.value()[0], -std::log(0.9), 1e-15);
  EXPECT_NEAR(loss.value()[0], 0.10536, 1e-5);
}

TEST(Train, RejectsZeroEpochs) {
  auto d = tiny_data(1);
  EXPECT_THROW(train(tiny_model("micro_mobile"), d->train, d->valid, quiet_config(0)), InvalidArgument);
}

TEST(Train, SameSeedGivesIdenticalLogAndParameters) {
  auto d = tiny_data();
  const auto a = train(tiny_model("micro_mobile"), d->train, d->valid, quiet_config(2));
  const auto b = train(tiny_model("micro_mobile"), d->train, d->valid, quiet_config(2));
  EXPECT_EQ(train_log_csv(a.log), train_log_csv(b.log));
  EXPECT_EQ(a.model.params(), b.model.params());
  ASSERT_EQ(a.log.epochs.size(), 2u);
  EXPECT_EQ(a.log.epochs[0].seconds, 0.0);
}

TEST(Train, DifferentSeedChangesTheRun) {
  auto d = tiny_data();
  auto cfg = quiet_config(1);
  const auto a = train(tiny_model("micro_mobile"), d->train, d->valid, cfg);
  cfg.seed = 6;
  const auto b = train(tiny_model("micro_mobile"), d->train, d->valid, cfg);
  EXPECT_NE(a.model.params(), b.model.params());
}

TEST(Train, BalancedWeightingEqualsUnweighted) {
  auto d = tiny_data();
  auto cfg = quiet_config(1);
  const auto weighted = train(tiny_model("micro_cell"), d->train, d->valid, cfg);
  cfg.class_weighting = false;
  const auto plain = train(tiny_model("micro_cell"), d->train, d->valid, cfg);
  EXPECT_EQ(train_log_csv(weighted.log), train_log_csv(plain.log));
}

TEST(Train, CheckpointHoldsTheBestValidationModel) {
  auto d = tiny_data();
  TempDir out;
  auto cfg = quiet_config(3);
  cfg.checkpoint_path = out / "best.ckpt";
  const auto r = train(tiny_model("micro_xception"), d->train, d->valid, cfg);
  ASSERT_TRUE(fs::exists(out / "best.ckpt"));
  EXPECT_EQ(load_checkpoint(out / "best.ckpt").params(), r.best_model.params());
}

TEST(Train, LossFallsOnASmallSet) {
  auto d = tiny_data(2);
  auto cfg = quiet_config(5);
  cfg.augment = false;
  cfg.adam.lr = 3e-3;
  const auto r = train(tiny_model("micro_mobile"), d->train, d->train, cfg);
  ASSERT_EQ(r.log.epochs.size(), 5u);
  EXPECT_LT(r.log.epochs[4].train_loss, r.log.epochs[0].train_loss);
}

TEST(Train, CallbackCanStopEarly) {
  auto d = tiny_data(1);
  auto cfg = quiet_config(10);
  cfg.on_epoch = [](const Model<float>&, const EpochRecord& rec) { return rec.epoch < 2; };
  EXPECT_EQ(train(tiny_model("micro_dense"), d->train, d->valid, cfg).log.epochs.size(), 2u);
}

TEST(Train, EnsemblesCannotBeTrained) {
  auto d = tiny_data(1);
  std::vector<Model<float>> members{tiny_model("micro_dense"), tiny_model("micro_mobile")};
  EXPECT_THROW(train(build_ensemble(members, "e"), d->train, d->valid, quiet_config(1)), InvalidArgument);
}

TEST(TrainLog, CsvFormat) {
  TrainLog log;
  log.epochs.push_back(EpochRecord{1, 0.5, 0.25, 0.75, 0});
  EXPECT_EQ(train_log_csv(log), "epoch,train_loss,valid_loss,valid_acc,seconds\n1,0.5,0.25,0.75,0.000\n");
}
