#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>

#include "mmt/gradcheck.hpp"
#include "mmt/vision.hpp"

using namespace mmt;

namespace {

void backprop(const std::function<TensorPtr()>& build) {
  Tape tape;
  TapeScope scope(tape);
  TensorPtr loss = build();
  tape.backward(loss);
}

TensorPtr randt(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Two-stage miniature configuration for gradient checks.
ResNetConfig tiny_config(ResNetVariant variant) {
  ResNetConfig cfg;
  cfg.variant = variant;
  cfg.input_h = 6;
  cfg.input_w = 6;
  cfg.stem_channels = 4;
  cfg.stage_channels = {4, 6};
  cfg.blocks_per_stage = {1, 1};
  cfg.stage_end_strides = {2, 1};
  cfg.conditional_stages = {1, 2};
  cfg.cond_hidden = 8;
  cfg.grid_stage = 1;
  return cfg;
}

}  // namespace

TEST_CASE("batch norm: hand-checked forward with batch statistics") {
  auto x = Tensor::from({1, 1, 2, 1}, {1.0, 5.0});  // mu=3, var=4
  auto gamma = Tensor::from({1}, {1.5});
  auto beta = Tensor::from({1}, {0.25});
  std::vector<double> rm = {0.0}, rv = {1.0};
  auto y = batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, true, true);
  double denom = 2.0 + 1e-5;  // sqrt(var) + eps
  CHECK(y->value[0] == doctest::Approx(0.25 - 3.0 / denom).epsilon(1e-12));
  CHECK(y->value[1] == doctest::Approx(0.25 + 3.0 / denom).epsilon(1e-12));
  // running statistics folded in with the configured decay
  CHECK(rm[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(rv[0] == doctest::Approx(1.3).epsilon(1e-12));
}

TEST_CASE("batch norm: inference path uses the running statistics") {
  auto x = Tensor::from({1, 1, 2, 1}, {1.0, 5.0});
  auto gamma = Tensor::from({1}, {2.0});
  auto beta = Tensor::from({1}, {-1.0});
  std::vector<double> rm = {2.0}, rv = {9.0};
  auto y = batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, false, false);
  double denom = 3.0 + 1e-5;
  CHECK(y->value[0] == doctest::Approx(-1.0 + 2.0 * (1.0 - 2.0) / denom).epsilon(1e-12));
  CHECK(y->value[1] == doctest::Approx(-1.0 + 2.0 * (5.0 - 2.0) / denom).epsilon(1e-12));
  CHECK(rm[0] == 2.0);  // untouched
  CHECK(rv[0] == 9.0);
}

TEST_CASE("batch norm: a single value per channel cannot define batch statistics") {
  auto x = Tensor::from({1, 1, 1, 2}, {1.0, 2.0});
  auto gamma = Tensor::from({2}, {1.0, 1.0});
  auto beta = Tensor::from({2}, {0.0, 0.0});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  CHECK_THROWS_AS(batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, true, false),
                  DegenerateBatchError);
  // inference with one value is fine
  auto y = batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, false, false);
  CHECK(y->size() == 2);
}

TEST_CASE("batch norm: constant channel stays finite in both passes") {
  PrecisionScope prec(Precision::kDouble);
  auto gamma = Tensor::from({1}, {1.0});
  auto beta = Tensor::from({1}, {0.5});
  ParameterStore store;
  Parameter& x = store.create("x", {1, 2, 2, 1});
  for (double& v : x.value->value) v = 7.0;  // zero variance
  std::vector<double> rm = {0.0}, rv = {1.0};
  Tape tape;
  {
    TapeScope scope(tape);
    auto y = batch_norm(x.value, gamma, beta, rm, rv, 0.9, 1e-5, true, false);
    for (double v : y->value) CHECK(v == 0.5);  // normalized value is exactly zero
    tape.backward(sum(y));
  }
  for (double g : x.value->grad) CHECK(std::isfinite(g));
}

TEST_CASE("batch norm: gradients match finite differences (batch and running stats)") {
  PrecisionScope prec(Precision::kDouble);
  for (bool use_batch : {true, false}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(seed + (use_batch ? 0 : 50));
      ParameterStore store;
      Parameter& x = store.create("x", {2, 2, 2, 3});
      Parameter& gam = store.create("gamma_rows", {2, 3});
      Parameter& bet = store.create("beta_rows", {2, 3});
      init_uniform(x, rng, -1.5, 1.5);
      init_uniform(gam, rng, 0.5, 1.5);
      init_uniform(bet, rng, -0.5, 0.5);
      std::vector<double> rm = {0.1, -0.2, 0.05}, rv = {1.1, 0.9, 1.3};
      auto build = [&]() {
        auto y = batch_norm_per_example(x.value, gam.value, bet.value, rm, rv, 0.9, 1e-5,
                                        use_batch, false);
        return sum(mul(y, y));
      };
      auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                            [&]() { backprop(build); });
      CHECK(report.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("batch norm: repeated updates converge the running statistics") {
  std::mt19937_64 rng(11);
  auto x = randt({4, 3, 3, 2}, rng);
  auto gamma = Tensor::from({2}, {1.0, 1.0});
  auto beta = Tensor::from({2}, {0.0, 0.0});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  TensorPtr train_out;
  for (int i = 0; i < 400; ++i)
    train_out = batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, true, true);
  auto infer_out = batch_norm(x, gamma, beta, rm, rv, 0.9, 1e-5, false, false);
  for (std::size_t i = 0; i < train_out->size(); ++i)
    CHECK(infer_out->value[i] == doctest::Approx(train_out->value[i]).epsilon(1e-9));
}

TEST_CASE("feature shapes: full-scale configurations give the published grid and pool sizes") {
  auto v1 = compute_feature_shape(ResNetConfig::full_v1());
  CHECK(v1.grid_h == 7);
  CHECK(v1.grid_w == 7);
  CHECK(v1.grid_channels == 1024);
  CHECK(v1.grid_locations() == 49);
  CHECK(v1.pooled_dim == 2048);
  auto v2 = compute_feature_shape(ResNetConfig::full_v2());
  CHECK(v2.grid_locations() == 49);
  CHECK(v2.pooled_dim == 2048);
}

TEST_CASE("feature shapes: desk configuration") {
  auto fs = compute_feature_shape(ResNetConfig::desk());
  CHECK(fs.grid_h == 2);
  CHECK(fs.grid_w == 2);
  CHECK(fs.grid_channels == 24);
  CHECK(fs.pooled_dim == 32);
}

TEST_CASE("resnet: forward produces the advertised pooled and grid shapes") {
  for (auto variant : {ResNetVariant::kV1, ResNetVariant::kV2}) {
    std::mt19937_64 rng(21);
    ParameterStore store;
    auto cfg = ResNetConfig::desk();
    cfg.variant = variant;
    ResNet net(store, cfg, 5, rng);
    auto images = randt({2, 16, 16, 3}, rng, 0.5);
    auto q = randt({2, 5}, rng, 0.5);
    RunContext ctx;
    ctx.train = true;
    auto f = net.forward(images, q, ctx);
    CHECK(f.pooled->shape == std::vector<int>{2, 32});
    CHECK(f.grid->shape == std::vector<int>{2, 2, 2, 24});
    auto fs = ResNet::example(f, FeatureKind::kGrid, 1);
    CHECK(fs.grid->shape == std::vector<int>{4, 24});
    auto fp = ResNet::example(f, FeatureKind::kPooled, 0);
    CHECK(fp.pooled->shape == std::vector<int>{32});
  }
}

TEST_CASE("resnet: grid stage selects which stage feeds attention") {
  std::mt19937_64 rng(22);
  ParameterStore store;
  auto cfg = ResNetConfig::desk();
  cfg.grid_stage = 2;
  ResNet net(store, cfg, 5, rng);
  auto images = randt({1, 16, 16, 3}, rng, 0.5);
  RunContext ctx;
  ctx.train = true;
  auto f = net.forward(images, nullptr, ctx);
  CHECK(f.grid->shape == std::vector<int>{1, 4, 4, 16});
  CHECK(net.feature_shape().grid_locations() == 16);
}

TEST_CASE("resnet: input validation") {
  std::mt19937_64 rng(23);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 5, rng);
  RunContext ctx;
  ctx.train = true;
  CHECK_THROWS_AS(net.forward(randt({1, 8, 8, 3}, rng), nullptr, ctx), ShapeError);
  auto images = randt({2, 16, 16, 3}, rng);
  CHECK_THROWS_AS(net.forward(images, randt({3, 5}, rng), ctx), PairingError);
  CHECK_THROWS_AS(net.forward(images, randt({2, 4}, rng), ctx), ShapeError);
}

TEST_CASE("resnet: zero-initialized offsets reproduce plain batch norm bit for bit") {
  std::mt19937_64 rng(24);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 5, rng);
  RunContext ctx;
  ctx.train = true;  // batch statistics, no running update
  std::mt19937_64 data_rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    auto images = randt({2, 16, 16, 3}, data_rng, 0.8);
    auto q = randt({2, 5}, data_rng, 1.0);
    auto with_q = net.forward(images, q, ctx);
    auto without = net.forward(images, nullptr, ctx);
    REQUIRE(with_q.pooled->size() == without.pooled->size());
    for (std::size_t i = 0; i < with_q.pooled->size(); ++i)
      CHECK(with_q.pooled->value[i] == without.pooled->value[i]);
    for (std::size_t i = 0; i < with_q.grid->size(); ++i)
      CHECK(with_q.grid->value[i] == without.grid->value[i]);
  }
}

TEST_CASE("resnet: nonzero offsets actually change the output") {
  std::mt19937_64 rng(25);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 5, rng);
  // nudge one predictor output weight away from zero
  store.at("resnet.s3.b0.bn1.pred_w2").value->value[0] = 0.05;
  RunContext ctx;
  ctx.train = true;
  auto images = randt({2, 16, 16, 3}, rng, 0.8);
  auto q = randt({2, 5}, rng, 1.0);
  auto with_q = net.forward(images, q, ctx);
  auto without = net.forward(images, nullptr, ctx);
  bool differ = false;
  for (std::size_t i = 0; i < with_q.pooled->size(); ++i)
    if (with_q.pooled->value[i] != without.pooled->value[i]) differ = true;
  CHECK(differ);
}

TEST_CASE("resnet: kernels are frozen by default, offset predictors learn") {
  std::mt19937_64 rng(26);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 5, rng);
  int kernels = 0, predictors = 0, norms = 0;
  for (const auto& p : store.items()) {
    const std::string& n = p->name;
    if (n.find(".pred_") != std::string::npos) {
      CHECK(p->trainable);
      ++predictors;
    } else if (n.find(".gamma") != std::string::npos || n.find(".beta") != std::string::npos) {
      CHECK_FALSE(p->trainable);
      ++norms;
    } else {
      CHECK_FALSE(p->trainable);  // conv kernels
      CHECK_FALSE(p->value->requires_grad);
      ++kernels;
    }
  }
  CHECK(kernels > 0);
  CHECK(predictors > 0);
  CHECK(norms == 2 * net.norm_site_count());
}

TEST_CASE("resnet: fine-tuning unfreezes only the last stage's kernels") {
  std::mt19937_64 rng(27);
  ParameterStore store;
  auto cfg = ResNetConfig::desk();
  cfg.finetune_last_stage = true;
  ResNet net(store, cfg, 5, rng);
  for (const auto& p : store.items()) {
    const std::string& n = p->name;
    bool is_kernel = n.find(".conv") != std::string::npos || n.find(".proj") != std::string::npos;
    if (!is_kernel) continue;
    bool last_stage = n.find("resnet.s4.") == 0;
    CHECK(p->trainable == last_stage);
    CHECK(p->value->requires_grad == last_stage);
  }
  // and it can be turned back off
  net.set_trainability(false);
  for (const auto& p : store.items())
    if (p->name.find(".conv") != std::string::npos) CHECK_FALSE(p->trainable);
}

TEST_CASE("resnet: gradients match finite differences (both block styles)") {
  PrecisionScope prec(Precision::kDouble);
  for (auto variant : {ResNetVariant::kV1, ResNetVariant::kV2}) {
    std::mt19937_64 rng(variant == ResNetVariant::kV1 ? 31 : 32);
    ParameterStore store;
    auto cfg = tiny_config(variant);
    cfg.finetune_last_stage = true;  // cover kernel gradients through the norm sites
    ResNet net(store, cfg, 3, rng);
    Parameter& q = store.create("q", {2, 3});
    init_uniform(q, rng, -1, 1);
    auto images = randt({2, 6, 6, 3}, rng, 0.8);
    RunContext ctx;
    ctx.train = true;
    auto build = [&]() {
      auto f = net.forward(images, q.value, ctx);
      return add(sum(mul(f.pooled, f.pooled)), sum(mul(f.grid, f.grid)));
    };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    INFO(report.summary());
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.checked == store.count_scalars(true));
  }
}

TEST_CASE("resnet: running statistics update only when asked") {
  std::mt19937_64 rng(33);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 5, rng);
  auto images = randt({2, 16, 16, 3}, rng, 0.8);
  RunContext frozen_ctx;
  frozen_ctx.train = true;
  frozen_ctx.update_stats = false;

  auto snapshot = [&]() {
    std::vector<double> all;
    for (const auto& [name, buf] : store.buffers())
      all.insert(all.end(), buf->begin(), buf->end());
    return all;
  };
  auto before = snapshot();
  net.forward(images, nullptr, frozen_ctx);
  CHECK(snapshot() == before);

  RunContext update_ctx;
  update_ctx.train = true;
  update_ctx.update_stats = true;
  net.forward(images, nullptr, update_ctx);
  CHECK(snapshot() != before);
}

TEST_CASE("resnet config: validation rejects inconsistent settings") {
  auto cfg = ResNetConfig::desk();
  cfg.blocks_per_stage = {1, 1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ResNetConfig::desk();
  cfg.grid_stage = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ResNetConfig::desk();
  cfg.conditional_stages = {5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ResNetConfig::desk();
  cfg.bn_decay = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
