#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mmt/gradcheck.hpp"
#include "mmt/params.hpp"
#include "mmt/tensor.hpp"

using namespace mmt;

namespace {

// Convenience: run loss-building closure under a fresh tape and backprop.
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

}  // namespace

TEST_CASE("matmul: hand-computed 2x2 by 2x1") {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c->shape == std::vector<int>{2, 1});
  CHECK(c->value[0] == doctest::Approx(17.0).epsilon(1e-12));
  CHECK(c->value[1] == doctest::Approx(39.0).epsilon(1e-12));
}

TEST_CASE("matmul: identity is exact on both sides") {
  std::mt19937_64 rng(7);
  auto a = randt({3, 3}, rng);
  auto eye = Tensor::make({3, 3});
  for (int i = 0; i < 3; ++i) eye->value[i * 3 + i] = 1.0;
  auto left = matmul(eye, a);
  auto right = matmul(a, eye);
  for (int i = 0; i < 9; ++i) {
    CHECK(left->value[i] == a->value[i]);
    CHECK(right->value[i] == a->value[i]);
  }
}

TEST_CASE("matmul: inner dimension mismatch throws") {
  auto a = Tensor::make({2, 3});
  auto b = Tensor::make({2, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul: gradient of sum(A*B) matches finite differences") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterStore store;
    Parameter& a = store.create("a", {3, 3});
    Parameter& b = store.create("b", {3, 3});
    init_uniform(a, rng, -1, 1);
    init_uniform(b, rng, -1, 1);
    auto f = [&]() { return sum(matmul(a.value, b.value))->item(); };
    auto grads = [&]() { backprop([&]() { return sum(matmul(a.value, b.value)); }); };
    auto report = finite_difference_check(f, store, grads, 1e-5);
    CHECK(report.checked == 18);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: f(t)=t^2 at t=3 gives 6 on both paths") {
  PrecisionScope prec(Precision::kDouble);
  ParameterStore store;
  Parameter& t = store.create("t", {1});
  t.value->value[0] = 3.0;
  auto f = [&]() { return mul(t.value, t.value)->item(); };
  auto grads = [&]() { backprop([&]() { return mul(t.value, t.value); }); };
  auto report = finite_difference_check(f, store, grads, 1e-5);
  CHECK(t.value->grad[0] == doctest::Approx(6.0).epsilon(1e-10));
  CHECK(report.max_rel_err < 1e-8);
  CHECK(t.value->value[0] == 3.0);  // restored exactly
}

TEST_CASE("finite differences: frozen parameters are excluded") {
  PrecisionScope prec(Precision::kDouble);
  ParameterStore store;
  Parameter& a = store.create("a", {2});
  Parameter& frozen = store.create("b", {4}, /*trainable=*/false);
  a.value->value = {1.0, 2.0};
  auto f = [&]() { return sum(mul(a.value, a.value))->item(); };
  auto grads = [&]() { backprop([&]() { return sum(mul(a.value, a.value)); }); };
  auto report = finite_difference_check(f, store, grads);
  CHECK(report.checked == 2);
  CHECK(report.skipped == 4);
  (void)frozen;
}

TEST_CASE("finite differences: non-deterministic f is rejected") {
  PrecisionScope prec(Precision::kDouble);
  ParameterStore store;
  Parameter& a = store.create("a", {1});
  a.value->value[0] = 1.0;
  int calls = 0;
  auto f = [&]() { return a.value->value[0] + (calls++); };
  CHECK_THROWS_AS(finite_difference_check(f, store, []() {}), DeterminismError);
}

TEST_CASE("finite differences: requires double precision") {
  PrecisionScope prec(Precision::kSingle);
  ParameterStore store;
  store.create("a", {1});
  CHECK_THROWS_AS(finite_difference_check([]() { return 0.0; }, store, []() {}), ParamError);
}

TEST_CASE("finite differences: injected sign flip in a backward pass is caught") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(3);
  ParameterStore store;
  Parameter& a = store.create("a", {2, 2});
  Parameter& b = store.create("b", {2, 2});
  init_uniform(a, rng, 0.5, 1.0);
  init_uniform(b, rng, 0.5, 1.0);
  auto f = [&]() { return sum(matmul(a.value, b.value))->item(); };
  auto grads = [&]() { backprop([&]() { return sum(matmul(a.value, b.value)); }); };
  set_backward_fault_injection(true);
  auto report = finite_difference_check(f, store, grads);
  set_backward_fault_injection(false);
  CHECK(report.max_rel_err > 1e-2);  // sign flip = rel err ~2 on a's gradient
}

TEST_CASE("softmax: frozen three-point example") {
  auto s = Tensor::from({3}, {1, 2, 3});
  auto w = softmax(s);
  CHECK(w->value[0] == doctest::Approx(0.0900).epsilon(2e-3));
  CHECK(w->value[1] == doctest::Approx(0.2447).epsilon(2e-3));
  CHECK(w->value[2] == doctest::Approx(0.6652).epsilon(2e-3));
  double total = w->value[0] + w->value[1] + w->value[2];
  CHECK(std::fabs(total - 1.0) < 1e-12);
}

TEST_CASE("softmax_masked: masked entries are exactly zero, rest sums to one") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 2 + static_cast<int>(rng() % 6);
    auto s = randt({n}, rng, 5.0);
    std::vector<int> mask(n);
    int live = 0;
    for (int& m : mask) live += (m = static_cast<int>(rng() % 2));
    if (live == 0) mask[0] = 1;
    auto w = softmax_masked(s, mask);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      if (mask[i]) {
        CHECK(w->value[i] >= 0.0);
        total += w->value[i];
      } else {
        CHECK(w->value[i] == 0.0);
      }
    }
    CHECK(std::fabs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax_masked: single unmasked position gets weight exactly 1") {
  auto s = Tensor::from({3}, {0.3, -2.0, 9.9});
  auto w = softmax_masked(s, {0, 1, 0});
  CHECK(w->value[1] == 1.0);
  CHECK(w->value[0] == 0.0);
  CHECK(w->value[2] == 0.0);
}

TEST_CASE("softmax_masked: all-masked input throws") {
  auto s = Tensor::from({2}, {1.0, 2.0});
  CHECK_THROWS_AS(softmax_masked(s, {0, 0}), EmptySupportError);
}

TEST_CASE("softmax_masked: bitwise shift invariance on integer scores") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng() % 5);
    std::vector<double> base(n);
    for (double& v : base) v = static_cast<double>(static_cast<int>(rng() % 17) - 8);
    double c = static_cast<double>(static_cast<int>(rng() % 9) - 4);
    std::vector<double> shifted = base;
    for (double& v : shifted) v += c;
    std::vector<int> mask(n, 1);
    auto w0 = softmax_masked(Tensor::from({n}, base), mask);
    auto w1 = softmax_masked(Tensor::from({n}, shifted), mask);
    for (int i = 0; i < n; ++i) CHECK(w0->value[i] == w1->value[i]);
  }
}

TEST_CASE("softmax_masked: bitwise permutation equivariance on arbitrary scores") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng() % 6);
    auto s = randt({n}, rng, 3.0);
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> ps(n);
    for (int i = 0; i < n; ++i) ps[i] = s->value[perm[i]];
    std::vector<int> mask(n, 1);
    auto w = softmax_masked(s, mask);
    auto wp = softmax_masked(Tensor::from({n}, ps), mask);
    for (int i = 0; i < n; ++i) CHECK(wp->value[i] == w->value[perm[i]]);
  }
}

TEST_CASE("softmax_masked: gradient matches finite differences") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    ParameterStore store;
    Parameter& s = store.create("s", {5});
    init_uniform(s, rng, -2, 2);
    std::vector<int> mask = {1, 0, 1, 1, 0};
    auto target = randt({5}, rng);
    auto build = [&]() { return sum(mul(softmax_masked(s.value, mask), target)); };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("elementwise: values and gradients") {
  PrecisionScope prec(Precision::kDouble);
  auto x0 = Tensor::from({3}, {-1.0, 0.0, 2.0});
  auto r = relu(x0);
  CHECK(r->value[0] == 0.0);
  CHECK(r->value[1] == 0.0);
  CHECK(r->value[2] == 2.0);

  auto s = sigmoid(Tensor::from({1}, {0.0}));
  CHECK(s->value[0] == 0.5);
  auto t = tanh(Tensor::from({1}, {0.0}));
  CHECK(t->value[0] == 0.0);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 40);
    ParameterStore store;
    Parameter& x = store.create("x", {6});
    init_uniform(x, rng, -1.5, 1.5);
    auto weights = randt({6}, rng);
    auto build = [&]() {
      auto a = tanh(x.value);
      auto b = sigmoid(mul(x.value, x.value));
      auto c = relu(add(a, b));
      return sum(mul(c, weights));
    };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("broadcast add/mul over last axis") {
  auto m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto v = Tensor::from({3}, {10, 20, 30});
  auto s = add(m, v);
  CHECK(s->value[0] == 11.0);
  CHECK(s->value[5] == 36.0);
  auto p = mul(m, v);
  CHECK(p->value[0] == 10.0);
  CHECK(p->value[4] == 100.0);
  CHECK_THROWS_AS(add(m, Tensor::make({2})), ShapeError);
}

TEST_CASE("conv2d: 3x3 ones kernel over 3x3 ones image, valid padding") {
  auto img = Tensor::make({1, 3, 3, 1}, 1.0);
  auto ker = Tensor::make({3, 3, 1, 1}, 1.0);
  auto out = conv2d(img, ker, 1, Padding::kValid);
  CHECK(out->shape == std::vector<int>{1, 1, 1, 1});
  CHECK(out->value[0] == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("conv2d: 1x1 identity kernel reproduces input") {
  std::mt19937_64 rng(9);
  auto img = randt({2, 4, 5, 1}, rng);
  auto ker = Tensor::make({1, 1, 1, 1}, 1.0);
  auto out = conv2d(img, ker, 1, Padding::kSame);
  CHECK(out->shape == img->shape);
  for (std::size_t i = 0; i < img->size(); ++i) CHECK(out->value[i] == img->value[i]);
}

TEST_CASE("conv2d: same padding halves spatial dims at stride 2") {
  auto img = Tensor::make({1, 7, 7, 2});
  auto ker = Tensor::make({3, 3, 2, 4});
  auto out = conv2d(img, ker, 2, Padding::kSame);
  CHECK(out->shape == std::vector<int>{1, 4, 4, 4});
}

TEST_CASE("conv2d: kernel larger than unpadded input throws in valid mode") {
  auto img = Tensor::make({1, 2, 2, 1});
  auto ker = Tensor::make({3, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(img, ker, 1, Padding::kValid), ShapeError);
}

TEST_CASE("conv2d: gradients match finite differences on odd sizes and stride 2") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(seed + 60);
    ParameterStore store;
    Parameter& img = store.create("img", {1, 5, 5, 2});
    Parameter& ker = store.create("ker", {3, 3, 2, 3});
    init_uniform(img, rng, -1, 1);
    init_uniform(ker, rng, -1, 1);
    for (Padding pad : {Padding::kValid, Padding::kSame}) {
      auto build = [&]() { return sum(tanh(conv2d(img.value, ker.value, 2, pad))); };
      auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                            [&]() { backprop(build); });
      CHECK(report.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("max pooling: forward and gradient routing to the argmax") {
  PrecisionScope prec(Precision::kDouble);
  auto img = Tensor::from({1, 2, 2, 1}, {1, 5, 3, 2});
  auto out = global_max_pool(img);
  CHECK(out->shape == std::vector<int>{1, 1});
  CHECK(out->value[0] == 5.0);

  std::mt19937_64 rng(77);
  ParameterStore store;
  Parameter& x = store.create("x", {1, 4, 4, 2});
  init_uniform(x, rng, -1, 1);
  auto build = [&]() {
    return sum(add(global_max_pool(x.value),
                   global_max_pool(max_pool2d(x.value, 2, 2, Padding::kValid))));
  };
  auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                        [&]() { backprop(build); });
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("layer_norm: zero mean unit variance, then gain/bias") {
  auto x = Tensor::from({4}, {1, 2, 3, 4});
  auto gain = Tensor::make({4}, 1.0);
  auto bias = Tensor::make({4}, 0.0);
  auto y = layer_norm(x, gain, bias);
  double m = 0, v = 0;
  for (double t : y->value) m += t;
  m /= 4;
  for (double t : y->value) v += (t - m) * (t - m);
  v /= 4;
  CHECK(std::fabs(m) < 1e-12);
  CHECK(v == doctest::Approx(1.0).epsilon(1e-4));  // eps damping inside sqrt

  auto gain2 = Tensor::make({4}, 2.0);
  auto bias2 = Tensor::make({4}, 3.0);
  auto y2 = layer_norm(x, gain2, bias2);
  for (int i = 0; i < 4; ++i) CHECK(y2->value[i] == doctest::Approx(2 * y->value[i] + 3));
  CHECK_THROWS_AS(layer_norm(Tensor::make({1}), Tensor::make({1}), Tensor::make({1})),
                  ShapeError);
}

TEST_CASE("layer_norm: gradients match finite differences") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 200);
    ParameterStore store;
    Parameter& x = store.create("x", {6});
    Parameter& g = store.create("g", {6});
    Parameter& b = store.create("b", {6});
    init_uniform(x, rng, -2, 2);
    init_uniform(g, rng, 0.5, 1.5);
    init_uniform(b, rng, -0.5, 0.5);
    auto probe = randt({6}, rng);
    auto build = [&]() { return sum(mul(layer_norm(x.value, g.value, b.value), probe)); };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("nll: uniform logits over 8 classes give ln 8") {
  auto logits = Tensor::make({8}, 0.37);
  auto loss = nll(logits, 3);
  CHECK(loss->item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("nll: gradient is softmax minus one-hot") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(15);
  ParameterStore store;
  Parameter& logits = store.create("logits", {5});
  init_uniform(logits, rng, -2, 2);
  auto build = [&]() { return nll(logits.value, 2); };
  backprop(build);
  auto probs = softmax(logits.value);
  for (int i = 0; i < 5; ++i) {
    double expect = probs->value[i] - (i == 2 ? 1.0 : 0.0);
    CHECK(logits.value->grad[i] == doctest::Approx(expect).epsilon(1e-9));
  }
  store.zero_grad();
  auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                        [&]() { backprop(build); });
  CHECK(report.max_rel_err < 1e-4);
  CHECK_THROWS_AS(nll(logits.value, 5), VocabError);
}

TEST_CASE("embedding_rows: lookup, scatter-add gradient, repeated ids") {
  PrecisionScope prec(Precision::kDouble);
  auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto e = embedding_rows(table, {2, 0, 2});
  CHECK(e->shape == std::vector<int>{3, 2});
  CHECK(e->value[0] == 5.0);
  CHECK(e->value[2] == 1.0);
  CHECK(e->value[4] == 5.0);
  CHECK_THROWS_AS(embedding_rows(table, {3}), VocabError);
  auto empty = embedding_rows(table, {});
  CHECK(empty->shape == std::vector<int>{0, 2});

  ParameterStore store;
  Parameter& tbl = store.create("tbl", {3, 2});
  std::mt19937_64 rng(4);
  init_uniform(tbl, rng, -1, 1);
  auto build = [&]() { return sum(tanh(embedding_rows(tbl.value, {1, 1, 0}))); };
  auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                        [&]() { backprop(build); });
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("masked_mean_rows: averages unmasked rows only") {
  auto m = Tensor::from({3, 2}, {1, 2, 100, 200, 3, 4});
  auto out = masked_mean_rows(m, {1, 0, 1});
  CHECK(out->value[0] == doctest::Approx(2.0));
  CHECK(out->value[1] == doctest::Approx(3.0));
  CHECK_THROWS_AS(masked_mean_rows(m, {0, 0, 0}), EmptySupportError);
}

TEST_CASE("attend_context: bitwise permutation equivariance and gradients") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(21);
  auto w = randt({5}, rng);
  auto keys = randt({5, 3}, rng);
  auto ctx = attend_context(w, keys);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<double> pw(5);
  std::vector<double> pk(15);
  for (int i = 0; i < 5; ++i) {
    pw[i] = w->value[perm[i]];
    for (int j = 0; j < 3; ++j) pk[i * 3 + j] = keys->value[perm[i] * 3 + j];
  }
  auto ctx2 = attend_context(Tensor::from({5}, pw), Tensor::from({5, 3}, pk));
  for (int j = 0; j < 3; ++j) CHECK(ctx->value[j] == ctx2->value[j]);

  ParameterStore store;
  Parameter& wp = store.create("w", {4});
  Parameter& kp = store.create("k", {4, 3});
  init_uniform(wp, rng, -1, 1);
  init_uniform(kp, rng, -1, 1);
  auto build = [&]() { return sum(tanh(attend_context(wp.value, kp.value))); };
  auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                        [&]() { backprop(build); });
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("structural ops: concat/row/stack/slice/tile gradients") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(31);
  ParameterStore store;
  Parameter& a = store.create("a", {3});
  Parameter& b = store.create("b", {2});
  Parameter& m = store.create("m", {3, 4});
  init_uniform(a, rng, -1, 1);
  init_uniform(b, rng, -1, 1);
  init_uniform(m, rng, -1, 1);
  auto probe5 = randt({5}, rng);
  auto build = [&]() {
    auto cat = concat({a.value, b.value});                   // [5]
    auto r1 = row(m.value, 1);                               // [4]
    auto st = stack_rows({r1, row(m.value, 2)});             // [2,4]
    auto sl = slice_cols(st, 1, 3);                          // [2,2]
    auto tl = tile_rows(a.value, 2);                         // [2,3]
    return add_n({sum(mul(cat, probe5)), sum(sl), sum(tl)});
  };
  auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                        [&]() { backprop(build); });
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("dropout: keep=1 identity, scaling preserves expectation, gradient masks") {
  PrecisionScope prec(Precision::kDouble);
  std::mt19937_64 rng(8);
  auto x = randt({100}, rng);
  auto same = dropout(x, 1.0, rng);
  CHECK(same.get() == x.get());
  CHECK_THROWS_AS(dropout(x, 0.0, rng), ParamError);

  auto y = dropout(x, 0.5, rng);
  for (std::size_t i = 0; i < y->size(); ++i) {
    bool zero = y->value[i] == 0.0;
    bool scaled = std::fabs(y->value[i] - 2.0 * x->value[i]) < 1e-12;
    CHECK((zero || scaled));
  }
}

TEST_CASE("detach: value copied, gradient flow severed") {
  PrecisionScope prec(Precision::kDouble);
  ParameterStore store;
  Parameter& x = store.create("x", {3});
  x.value->value = {1, 2, 3};
  Tape tape;
  {
    TapeScope scope(tape);
    auto y = detach(tanh(x.value));
    CHECK_FALSE(y->requires_grad);
    auto loss = sum(mul(y, y));
    tape.backward(loss);
  }
  for (double g : x.value->grad) CHECK(g == 0.0);
}

TEST_CASE("ops never mutate their inputs") {
  std::mt19937_64 rng(91);
  auto a = randt({4, 4}, rng);
  auto b = randt({4, 4}, rng);
  std::vector<double> a0 = a->value, b0 = b->value;
  (void)matmul(a, b);
  (void)add(a, b);
  (void)mul(a, b);
  (void)tanh(a);
  (void)relu(b);
  CHECK(a->value == a0);
  CHECK(b->value == b0);

  // backward accumulates into grad buffers only
  Tape tape;
  {
    TapeScope scope(tape);
    a->requires_grad = true;
    auto loss = sum(mul(a, b));
    tape.backward(loss);
  }
  CHECK(a->value == a0);
  CHECK(b->value == b0);
  a->requires_grad = false;
}

TEST_CASE("non-finite outputs are an error state") {
  auto big = Tensor::make({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NonFiniteError);
}

TEST_CASE("single precision mode rounds stored values through float32") {
  PrecisionScope prec(Precision::kSingle);
  auto x = Tensor::from({1}, {0.1});
  CHECK(x->value[0] == static_cast<double>(0.1f));
  auto y = add(x, x);
  CHECK(y->value[0] == static_cast<double>(static_cast<float>(x->value[0] + x->value[0])));
}

TEST_CASE("gradient accumulation across reuse of one tensor") {
  PrecisionScope prec(Precision::kDouble);
  ParameterStore store;
  Parameter& x = store.create("x", {1});
  x.value->value[0] = 0.7;
  // f = x*x + 3x => f' = 2x + 3
  auto build = [&]() {
    return add(mul(x.value, x.value), affine(x.value, 3.0, 0.0));
  };
  backprop(build);
  CHECK(x.value->grad[0] == doctest::Approx(2 * 0.7 + 3).epsilon(1e-12));
}

TEST_CASE("composite expression gradients across ten seeds") {
  PrecisionScope prec(Precision::kDouble);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 900);
    ParameterStore store;
    Parameter& w = store.create("w", {4, 4});
    Parameter& v = store.create("v", {4});
    init_uniform(w, rng, -1, 1);
    init_uniform(v, rng, -1, 1);
    std::vector<int> mask = {1, 1, 0, 1};
    auto build = [&]() {
      auto h = tanh(matvec(w.value, v.value));
      auto att = softmax_masked(h, mask);
      auto ctx = attend_context(att, w.value);
      return mean(mul(ctx, ctx));
    };
    auto report = finite_difference_check([&]() { return build()->item(); }, store,
                                          [&]() { backprop(build); });
    CHECK(report.max_rel_err < 1e-4);
  }
}
