#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mmt/gradcheck.hpp"
#include "mmt/text_encoder.hpp"

using namespace mmt;

namespace {

void backprop(const std::function<TensorPtr()>& build) {
  Tape tape;
  TapeScope scope(tape);
  TensorPtr loss = build();
  tape.backward(loss);
}

void fill(Parameter& p, double v) {
  for (double& x : p.value->value) x = v;
}

}  // namespace

TEST_CASE("gru: saturated update gate keeps the previous state exactly") {
  std::mt19937_64 rng(1);
  ParameterStore store;
  GruCell cell(store, "cell", 3, 3, LayerNormPlacement::kNone, rng);
  // Pre-activation of the update gate is +3000 for x = ones: sigmoid
  // saturates to exactly 1, so s = 1*s_prev + 0*candidate.
  fill(*cell.w_update, 1000.0);
  fill(*cell.u_update, 0.0);
  auto x = Tensor::from({3}, {1.0, 1.0, 1.0});
  auto s_prev = Tensor::from({3}, {0.3, -0.7, 0.11});
  auto s = cell.step(x, s_prev);
  for (int i = 0; i < 3; ++i) CHECK(s->value[i] == s_prev->value[i]);
}

TEST_CASE("gru: closed update gate reproduces the candidate exactly") {
  std::mt19937_64 rng(2);
  ParameterStore store;
  GruCell cell(store, "cell", 3, 3, LayerNormPlacement::kNone, rng);
  fill(*cell.w_update, -1000.0);  // z == 0 exactly for x = ones
  fill(*cell.u_update, 0.0);
  auto x = Tensor::from({3}, {1.0, 1.0, 1.0});
  auto s_prev = Tensor::from({3}, {0.5, -0.25, 0.9});
  auto s = cell.step(x, s_prev);
  // Recompute the candidate path by hand from the same weights.
  auto r = sigmoid(add(matvec(cell.w_reset->value, x), matvec(cell.u_reset->value, s_prev)));
  auto cand = tanh(add(matvec(cell.w_cand->value, x),
                       mul(r, matvec(cell.u_cand->value, s_prev))));
  for (int i = 0; i < 3; ++i) CHECK(s->value[i] == cand->value[i]);
}

TEST_CASE("gru: closed reset gate ignores the previous state in the candidate") {
  std::mt19937_64 rng(3);
  ParameterStore store;
  GruCell cell(store, "cell", 3, 3, LayerNormPlacement::kNone, rng);
  fill(*cell.w_update, -1000.0);  // s == candidate
  fill(*cell.u_update, 0.0);
  fill(*cell.w_reset, -1000.0);  // r == 0: candidate sees no recurrent term
  fill(*cell.u_reset, 0.0);
  auto x = Tensor::from({3}, {1.0, 1.0, 1.0});
  auto s_prev = Tensor::from({3}, {0.4, 0.8, -0.6});
  auto s = cell.step(x, s_prev);
  auto expect = tanh(matvec(cell.w_cand->value, x));
  for (int i = 0; i < 3; ++i) CHECK(s->value[i] == expect->value[i]);
}

TEST_CASE("gru: state and input size mismatches throw") {
  std::mt19937_64 rng(4);
  ParameterStore store;
  GruCell cell(store, "cell", 3, 2, LayerNormPlacement::kNone, rng);
  CHECK_THROWS_AS(cell.step(Tensor::make({2}), Tensor::make({2})), ShapeError);
  CHECK_THROWS_AS(cell.step(Tensor::make({3}), Tensor::make({3})), ShapeError);
}

TEST_CASE("gru: gate layer norm creates six extra parameter vectors") {
  std::mt19937_64 rng(5);
  ParameterStore plain_store, ln_store;
  GruCell plain(plain_store, "cell", 3, 4, LayerNormPlacement::kNone, rng);
  GruCell ln(ln_store, "cell", 3, 4, LayerNormPlacement::kGatePreact, rng);
  CHECK(ln_store.count_scalars(false) - plain_store.count_scalars(false) == 6 * 4);
  CHECK(ln_store.find("cell.ln_gain_update") != nullptr);
  CHECK(ln_store.find("cell.ln_bias_cand") != nullptr);
}

TEST_CASE("encoder: reversing the sentence with tied directions mirrors the annotations") {
  std::mt19937_64 rng(6);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  // Tie the two directions so the forward pass over the reversed sentence
  // replays the backward pass over the original bit for bit.
  auto tie = [](GruCell& dst, const GruCell& src) {
    dst.w_update->value->value = src.w_update->value->value;
    dst.u_update->value->value = src.u_update->value->value;
    dst.w_reset->value->value = src.w_reset->value->value;
    dst.u_reset->value->value = src.u_reset->value->value;
    dst.w_cand->value->value = src.w_cand->value->value;
    dst.u_cand->value->value = src.u_cand->value->value;
  };
  tie(enc.backward_cell(), enc.forward_cell());

  std::vector<int> ids = {4, 7, 5, 9, 6};
  std::vector<int> rev(ids.rbegin(), ids.rend());
  std::vector<int> mask(ids.size(), 1);
  RunContext ctx;
  auto a = enc.encode(ids, mask, ctx);
  auto b = enc.encode(rev, mask, ctx);
  int m = static_cast<int>(ids.size());
  int d = 4;
  for (int t = 0; t < m; ++t) {
    for (int j = 0; j < d; ++j) {
      // forward half of the reversed run == backward half of the original,
      // read at the mirrored position (and vice versa)
      CHECK(b.h->value[t * 2 * d + j] == a.h->value[(m - 1 - t) * 2 * d + d + j]);
      CHECK(b.h->value[t * 2 * d + d + j] == a.h->value[(m - 1 - t) * 2 * d + j]);
    }
  }
}

TEST_CASE("encoder: padded positions do not affect the annotations") {
  std::mt19937_64 rng(7);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  RunContext ctx;
  std::vector<int> mask = {1, 1, 1, 0, 0};
  auto a = enc.encode({4, 5, 6, 0, 0}, mask, ctx);
  auto b = enc.encode({4, 5, 6, 9, 10}, mask, ctx);  // junk under the padding
  REQUIRE(a.h->shape == b.h->shape);
  for (std::size_t i = 0; i < a.h->size(); ++i) CHECK(a.h->value[i] == b.h->value[i]);
  // masked rows are exact zeros
  for (int t = 3; t < 5; ++t)
    for (int j = 0; j < 8; ++j) CHECK(a.h->value[t * 8 + j] == 0.0);
  // and the valid prefix matches the unpadded encoding
  auto c = enc.encode({4, 5, 6}, {1, 1, 1}, ctx);
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < 8; ++j) CHECK(a.h->value[t * 8 + j] == c.h->value[t * 8 + j]);
  // pooled conditioning ignores padding too
  auto qa = enc.pool_conditioning(a, false);
  auto qc = enc.pool_conditioning(c, false);
  for (int j = 0; j < 2; ++j) CHECK(qa->value[j] == qc->value[j]);
}

TEST_CASE("encoder: mask validation") {
  std::mt19937_64 rng(8);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  RunContext ctx;
  CHECK_THROWS_AS(enc.encode({4, 5, 6}, {1, 0, 1}, ctx), ShapeError);
  CHECK_THROWS_AS(enc.encode({4, 5, 6}, {1, 1}, ctx), ShapeError);
  CHECK_THROWS_AS(enc.encode({4, 5}, {0, 0}, ctx), EmptySupportError);
  CHECK_THROWS_AS(enc.encode({4, 99}, {1, 1}, ctx), VocabError);
}

TEST_CASE("encoder: pooled conditioning matches the closed form") {
  std::mt19937_64 rng(9);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  RunContext ctx;
  auto ann = enc.encode({4, 5, 6, 7}, {1, 1, 1, 1}, ctx);
  auto q = enc.pool_conditioning(ann, false);
  auto expect = tanh(matvec(enc.cond_weight()->value, masked_mean_rows(ann.h, ann.mask)));
  REQUIRE(q->shape == std::vector<int>{2});
  for (int j = 0; j < 2; ++j) CHECK(q->value[j] == expect->value[j]);
  for (int j = 0; j < 2; ++j) {
    CHECK(q->value[j] < 1.0);
    CHECK(q->value[j] > -1.0);
  }
}

TEST_CASE("encoder: stop-gradient conditioning leaves encoder weights untouched") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(10);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  RunContext ctx;

  auto run = [&](bool stop) {
    store.zero_grad();
    backprop([&]() {
      auto ann = enc.encode({4, 5, 6}, {1, 1, 1}, ctx);
      return sum(enc.pool_conditioning(ann, stop));
    });
  };

  run(true);
  double frozen_mag = 0.0;
  for (double g : enc.embedding()->value->grad) frozen_mag += std::fabs(g);
  for (double g : enc.forward_cell().w_cand->value->grad) frozen_mag += std::fabs(g);
  CHECK(frozen_mag == 0.0);
  double cond_mag = 0.0;
  for (double g : enc.cond_weight()->value->grad) cond_mag += std::fabs(g);
  CHECK(cond_mag > 0.0);

  run(false);
  double live_mag = 0.0;
  for (double g : enc.embedding()->value->grad) live_mag += std::fabs(g);
  CHECK(live_mag > 0.0);
}

TEST_CASE("encoder: analytic gradients match finite differences (plain)") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterStore store;
    TextEncoder enc(store, "enc", 9, 3, 3, 2, LayerNormPlacement::kNone, rng);
    RunContext ctx;
    std::vector<int> ids = {4, 8, 5, 6};
    std::vector<int> mask = {1, 1, 1, 1};
    auto build = [&]() {
      auto ann = enc.encode(ids, mask, ctx);
      return add(sum(ann.h), sum(enc.pool_conditioning(ann, false)));
    };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.checked == store.count_scalars(true));
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("encoder: analytic gradients match finite differences (gate layer norm)") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(100 + seed);
    ParameterStore store;
    TextEncoder enc(store, "enc", 9, 3, 3, 2, LayerNormPlacement::kGatePreact, rng);
    RunContext ctx;
    std::vector<int> ids = {4, 8, 5};
    std::vector<int> mask = {1, 1, 0};
    auto build = [&]() {
      auto ann = enc.encode(ids, mask, ctx);
      return add(sum(ann.h), sum(enc.pool_conditioning(ann, false)));
    };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("encoder: repeated encodes are bitwise reproducible") {
  std::mt19937_64 rng(11);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kGatePreact, rng);
  RunContext ctx;
  auto a = enc.encode({4, 5, 6, 7, 8}, {1, 1, 1, 1, 1}, ctx);
  auto b = enc.encode({4, 5, 6, 7, 8}, {1, 1, 1, 1, 1}, ctx);
  for (std::size_t i = 0; i < a.h->size(); ++i) CHECK(a.h->value[i] == b.h->value[i]);
}

TEST_CASE("encoder: dropout draws come from the provided stream") {
  std::mt19937_64 rng(12);
  ParameterStore store;
  TextEncoder enc(store, "enc", 11, 3, 4, 2, LayerNormPlacement::kNone, rng);
  RunContext ctx;
  ctx.train = true;
  ctx.dropout.gru_out = 0.5;

  std::mt19937_64 d1(99), d2(99), d3(7);
  ctx.rng = &d1;
  auto a = enc.encode({4, 5, 6, 7, 8, 9}, {1, 1, 1, 1, 1, 1}, ctx);
  ctx.rng = &d2;
  auto b = enc.encode({4, 5, 6, 7, 8, 9}, {1, 1, 1, 1, 1, 1}, ctx);
  for (std::size_t i = 0; i < a.h->size(); ++i) CHECK(a.h->value[i] == b.h->value[i]);

  ctx.rng = &d3;
  auto c = enc.encode({4, 5, 6, 7, 8, 9}, {1, 1, 1, 1, 1, 1}, ctx);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.h->size(); ++i)
    if (a.h->value[i] != c.h->value[i]) any_diff = true;
  CHECK(any_diff);

  // inference ignores dropout entirely
  RunContext infer;
  auto d = enc.encode({4, 5, 6, 7, 8, 9}, {1, 1, 1, 1, 1, 1}, infer);
  RunContext infer2;
  auto e = enc.encode({4, 5, 6, 7, 8, 9}, {1, 1, 1, 1, 1, 1}, infer2);
  for (std::size_t i = 0; i < d.h->size(); ++i) CHECK(d.h->value[i] == e.h->value[i]);
}
