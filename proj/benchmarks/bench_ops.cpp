// Microbenchmarks for the numeric kernels and the end-to-end training step.
// These size the desk-scale experiment budget: the full-step benchmark is the
// per-step cost the training loop pays at the default geometry.
#include <benchmark/benchmark.h>

#include <memory>
#include <random>
#include <vector>

#include "mmt/training.hpp"

using namespace mmt;

namespace {

TensorPtr randt(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Shared training fixture: desk-scale model on a small synthetic batch.
struct StepFixture {
  ConfigFile cf;
  std::unique_ptr<Model> model;
  std::unique_ptr<AdamOptimizer> opt;
  Batch batch;
  std::vector<Image> images;
  std::vector<int> sample_src;  // unpadded ids of the first sentence
  std::mt19937_64 dropout_rng{42};

  StepFixture() {
    auto examples = synth_corpus(8, 5);
    std::vector<std::string> lines;
    for (const auto& ex : examples) {
      lines.push_back(ex.src);
      lines.push_back(ex.tgt);
    }
    BpeModel bpe = BpeModel::learn(lines, 16);
    Vocabulary vocab = build_vocabulary(lines, bpe);

    cf.model.variant = RunVariant::kCbnPool5;
    cf.model.vocab_size = vocab.size();
    cf.model.finalize();
    model = std::make_unique<Model>(cf.model, 1);
    opt = std::make_unique<AdamOptimizer>(model->store(), cf.train.opt);

    PreprocessConfig pp;
    std::mt19937_64 pp_rng(7);
    std::vector<Example> enc;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      Example e;
      e.src_ids = encode_line(examples[i].src, bpe, vocab);
      e.tgt_ids = encode_line(examples[i].tgt, bpe, vocab);
      e.image_index = static_cast<int>(i);
      enc.push_back(std::move(e));
      images.push_back(preprocess_image(examples[i].image, pp, pp_rng));
    }
    sample_src = enc[0].src_ids;
    batch = make_batches(enc, 4, 40, false, 0)[0];
  }
};

StepFixture& step_fixture() {
  static StepFixture f;
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels

static void BM_MatVec(benchmark::State& state) {
  std::mt19937_64 rng(1);
  int n = static_cast<int>(state.range(0));
  auto a = randt({n, n}, rng);
  auto x = randt({n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matvec(a, x));
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_MatVec)->Arg(64)->Arg(256);

static void BM_MatVecBackward(benchmark::State& state) {
  std::mt19937_64 rng(2);
  int n = static_cast<int>(state.range(0));
  ParameterStore store;
  Parameter& a = store.create("a", {n, n});
  init_uniform(a, rng, -1.0, 1.0);
  auto x = randt({n}, rng);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    auto loss = sum(tanh(matvec(a.value, x)));
    tape.backward(loss);
    store.zero_grad();
  }
}
BENCHMARK(BM_MatVecBackward)->Arg(64)->Arg(256);

static void BM_Conv3x3Same(benchmark::State& state) {
  std::mt19937_64 rng(3);
  auto input = randt({2, 16, 16, 8}, rng);
  auto kernel = randt({3, 3, 8, 16}, rng, 0.3);
  for (auto _ : state)
    benchmark::DoNotOptimize(conv2d(input, kernel, 1, Padding::kSame));
}
BENCHMARK(BM_Conv3x3Same);

static void BM_BatchNormTrain(benchmark::State& state) {
  std::mt19937_64 rng(4);
  auto x = randt({2, 16, 16, 16}, rng);
  auto gamma = Tensor::from({16}, std::vector<double>(16, 1.0));
  auto beta = Tensor::from({16}, std::vector<double>(16, 0.0));
  std::vector<double> mean(16, 0.0), var(16, 1.0);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        batch_norm(x, gamma, beta, mean, var, 0.99, 1e-5, true, false));
}
BENCHMARK(BM_BatchNormTrain);

static void BM_SoftmaxMasked(benchmark::State& state) {
  std::mt19937_64 rng(5);
  int n = static_cast<int>(state.range(0));
  auto s = randt({n}, rng, 4.0);
  std::vector<int> mask(n, 1);
  mask[n / 2] = 0;
  for (auto _ : state) benchmark::DoNotOptimize(softmax_masked(s, mask));
}
BENCHMARK(BM_SoftmaxMasked)->Arg(16)->Arg(256);

// ---------------------------------------------------------------------------
// Assembled components (desk geometry)

static void BM_ResNetForward(benchmark::State& state) {
  std::mt19937_64 rng(6);
  ParameterStore store;
  ResNet net(store, ResNetConfig::desk(), 16, rng);
  auto images = randt({2, 16, 16, 3}, rng, 0.8);
  auto cond = randt({2, 16}, rng);
  RunContext ctx;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(images, cond, ctx));
}
BENCHMARK(BM_ResNetForward);

static void BM_EncoderEncode(benchmark::State& state) {
  std::mt19937_64 rng(7);
  ParameterStore store;
  TextEncoder enc(store, "enc", 120, 24, 20, 16, LayerNormPlacement::kNone, rng);
  std::vector<int> ids(10), mask(10, 1);
  for (int i = 0; i < 10; ++i) ids[i] = 4 + static_cast<int>(rng() % 100);
  RunContext ctx;
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(ids, mask, ctx));
}
BENCHMARK(BM_EncoderEncode);

static void BM_BeamSearch(benchmark::State& state) {
  std::mt19937_64 rng(8);
  ParameterStore store;
  Decoder dec(store, "dec", 120, 24, 20, 24, 40, 0, false,
              AttentionNormalizer::kSoftmax, rng);
  AnnotationSequence ann;
  ann.h = randt({10, 40}, rng);
  ann.mask.assign(10, 1);
  int width = static_cast<int>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(beam_search(dec, ann, nullptr, width, 20, tok::kEnd));
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(12);

// ---------------------------------------------------------------------------
// End to end

// One optimizer step at the default geometry: teacher-forced loss over a
// 4-sentence image batch, reverse sweep, Adam update.
static void BM_TrainStep(benchmark::State& state) {
  StepFixture& f = step_fixture();
  RunContext ctx;
  ctx.train = true;
  ctx.update_stats = true;
  ctx.dropout = f.cf.model.dropout;
  ctx.rng = &f.dropout_rng;
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    auto loss = f.model->batch_loss(f.batch, f.images, ctx);
    tape.backward(loss);
    f.opt->step();
    f.model->store().zero_grad();
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_TranslateGreedy(benchmark::State& state) {
  StepFixture& f = step_fixture();
  Image& img = f.images[f.batch.image_indices[0]];
  for (auto _ : state)
    benchmark::DoNotOptimize(f.model->translate(f.sample_src, &img, 1, 20));
  state.SetLabel("beam 1, cap 20");
}
BENCHMARK(BM_TranslateGreedy)->Unit(benchmark::kMillisecond);

static void BM_BpeEncodeLine(benchmark::State& state) {
  auto examples = synth_corpus(64, 9);
  std::vector<std::string> lines;
  for (const auto& ex : examples) {
    lines.push_back(ex.src);
    lines.push_back(ex.tgt);
  }
  BpeModel bpe = BpeModel::learn(lines, 32);
  Vocabulary vocab = build_vocabulary(lines, bpe);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode_line(lines[i], bpe, vocab));
    i = (i + 1) % lines.size();
  }
}
BENCHMARK(BM_BpeEncodeLine);

static void BM_BleuCorpus(benchmark::State& state) {
  auto examples = synth_corpus(500, 10);
  std::vector<std::string> cand, ref;
  for (const auto& ex : examples) {
    ref.push_back(ex.tgt);
    cand.push_back(ex.tgt);
  }
  for (std::size_t i = 0; i + 1 < cand.size(); i += 2) std::swap(cand[i], cand[i + 1]);
  for (auto _ : state) benchmark::DoNotOptimize(bleu(cand, ref));
}
BENCHMARK(BM_BleuCorpus);

BENCHMARK_MAIN();
