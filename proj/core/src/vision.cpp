#include "mmt/vision.hpp"

#include <cmath>
#include <stdexcept>

#include "mmt/common.hpp"

namespace mmt {

namespace {

int same_out(int extent, int stride) { return (extent + stride - 1) / stride; }

void check_finite(const TensorPtr& t, const char* where) {
  for (double v : t->value)
    if (!std::isfinite(v)) throw NonFiniteError(std::string(where) + ": non-finite value");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ResNetConfig ResNetConfig::desk() { return ResNetConfig{}; }

ResNetConfig ResNetConfig::full_v1() {
  ResNetConfig cfg;
  cfg.variant = ResNetVariant::kV1;
  cfg.input_h = 224;
  cfg.input_w = 224;
  cfg.stem_channels = 64;
  cfg.stem_kernel = 7;
  cfg.stem_stride = 2;
  cfg.stem_maxpool = true;
  cfg.stage_channels = {256, 512, 1024, 2048};
  cfg.blocks_per_stage = {3, 4, 6, 3};
  cfg.stage_end_strides = {2, 2, 2, 1};
  cfg.cond_hidden = 512;
  cfg.grid_stage = 3;
  return cfg;
}

ResNetConfig ResNetConfig::full_v2() {
  ResNetConfig cfg = full_v1();
  cfg.variant = ResNetVariant::kV2;
  return cfg;
}

void ResNetConfig::validate() const {
  if (input_h < 1 || input_w < 1 || input_channels < 1)
    throw ConfigError("resnet: input dimensions must be positive");
  if (stem_channels < 1 || stem_kernel < 1 || stem_stride < 1)
    throw ConfigError("resnet: stem configuration must be positive");
  std::size_t stages = stage_channels.size();
  if (stages == 0) throw ConfigError("resnet: needs at least one stage");
  if (blocks_per_stage.size() != stages || stage_end_strides.size() != stages)
    throw ConfigError("resnet: per-stage lists must have equal lengths");
  for (std::size_t s = 0; s < stages; ++s) {
    if (stage_channels[s] < 1) throw ConfigError("resnet: stage channels must be positive");
    if (blocks_per_stage[s] < 1) throw ConfigError("resnet: blocks per stage must be positive");
    if (stage_end_strides[s] < 1) throw ConfigError("resnet: stage strides must be positive");
  }
  for (int s : conditional_stages)
    if (s < 1 || s > static_cast<int>(stages))
      throw ConfigError("resnet: conditional stage index out of range");
  if (grid_stage < 1 || grid_stage > static_cast<int>(stages))
    throw ConfigError("resnet: grid stage out of range");
  if (cond_hidden < 1) throw ConfigError("resnet: predictor hidden width must be positive");
  if (bn_decay <= 0.0 || bn_decay >= 1.0) throw ConfigError("resnet: decay must be in (0,1)");
  if (bn_eps <= 0.0) throw ConfigError("resnet: eps must be positive");
}

bool ResNetConfig::stage_conditional(int stage_1based) const {
  for (int s : conditional_stages)
    if (s == stage_1based) return true;
  return false;
}

FeatureShape compute_feature_shape(const ResNetConfig& cfg) {
  cfg.validate();
  int h = same_out(cfg.input_h, cfg.stem_stride);
  int w = same_out(cfg.input_w, cfg.stem_stride);
  if (cfg.stem_maxpool) {
    h = same_out(h, 2);
    w = same_out(w, 2);
  }
  FeatureShape out;
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    h = same_out(h, cfg.stage_end_strides[s]);
    w = same_out(w, cfg.stage_end_strides[s]);
    if (static_cast<int>(s) + 1 == cfg.grid_stage) {
      out.grid_h = h;
      out.grid_w = w;
      out.grid_channels = cfg.stage_channels[s];
    }
  }
  out.pooled_dim = cfg.stage_channels.back();
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

TensorPtr batch_norm_per_example(const TensorPtr& x, const TensorPtr& gamma_rows,
                                 const TensorPtr& beta_rows,
                                 std::vector<double>& running_mean,
                                 std::vector<double>& running_var, double decay,
                                 double eps, bool use_batch_stats, bool update_stats) {
  if (x->rank() != 4) throw ShapeError("batch_norm: input must be [B,H,W,C]");
  int B = x->dim(0), H = x->dim(1), W = x->dim(2), C = x->dim(3);
  if (gamma_rows->rank() != 2 || gamma_rows->dim(0) != B || gamma_rows->dim(1) != C)
    throw ShapeError("batch_norm: scale rows must be [B,C]");
  if (beta_rows->rank() != 2 || beta_rows->dim(0) != B || beta_rows->dim(1) != C)
    throw ShapeError("batch_norm: shift rows must be [B,C]");
  if (static_cast<int>(running_mean.size()) != C ||
      static_cast<int>(running_var.size()) != C)
    throw ShapeError("batch_norm: running statistics have wrong length");
  if (eps <= 0.0) throw ParamError("batch_norm: eps must be positive");

  long n_per_channel = static_cast<long>(B) * H * W;
  std::vector<double> mu(C), var(C);
  if (use_batch_stats) {
    if (n_per_channel < 2)
      throw DegenerateBatchError("batch_norm: batch statistics need at least 2 values per channel");
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (long i = c; i < static_cast<long>(x->size()); i += C) s += x->value[i];
      mu[c] = s / static_cast<double>(n_per_channel);
    }
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (long i = c; i < static_cast<long>(x->size()); i += C) {
        double d = x->value[i] - mu[c];
        s += d * d;
      }
      var[c] = s / static_cast<double>(n_per_channel);
    }
    if (update_stats) {
      for (int c = 0; c < C; ++c) {
        running_mean[c] = store_round(decay * running_mean[c] + (1.0 - decay) * mu[c]);
        running_var[c] = store_round(decay * running_var[c] + (1.0 - decay) * var[c]);
      }
    }
  } else {
    mu = running_mean;
    var = running_var;
  }

  std::vector<double> inv(C);
  for (int c = 0; c < C; ++c) {
    if (var[c] < 0.0) var[c] = 0.0;  // running averages can drift slightly negative
    inv[c] = 1.0 / (std::sqrt(var[c]) + eps);
  }

  auto out = Tensor::make({B, H, W, C});
  long plane = static_cast<long>(H) * W;
  for (int b = 0; b < B; ++b) {
    for (long p = 0; p < plane; ++p) {
      long base = (b * plane + p) * C;
      for (int c = 0; c < C; ++c) {
        double xhat = (x->value[base + c] - mu[c]) * inv[c];
        out->value[base + c] =
            store_round(gamma_rows->value[b * C + c] * xhat + beta_rows->value[b * C + c]);
      }
    }
  }
  check_finite(out, "batch_norm");

  Tape* tape = active_tape();
  bool track = tape != nullptr && (x->requires_grad || gamma_rows->requires_grad ||
                                   beta_rows->requires_grad);
  out->requires_grad = track;
  if (track) {
    auto xs = x;
    auto gs = gamma_rows;
    auto bs = beta_rows;
    auto os = out;
    tape->record([xs, gs, bs, os, mu, var, inv, use_batch_stats, B, H, W, C, plane,
                  n_per_channel]() {
      // Scale/shift gradients: zhat-weighted sums over the spatial plane.
      if (gs->requires_grad || bs->requires_grad) {
        for (int b = 0; b < B; ++b) {
          for (long p = 0; p < plane; ++p) {
            long base = (b * plane + p) * C;
            for (int c = 0; c < C; ++c) {
              double g = os->grad[base + c];
              if (gs->requires_grad)
                gs->grad[b * C + c] += g * (xs->value[base + c] - mu[c]) * inv[c];
              if (bs->requires_grad) bs->grad[b * C + c] += g;
            }
          }
        }
      }
      if (!xs->requires_grad) return;
      if (!use_batch_stats) {
        // Statistics are constants; straight-through scaling.
        for (int b = 0; b < B; ++b)
          for (long p = 0; p < plane; ++p) {
            long base = (b * plane + p) * C;
            for (int c = 0; c < C; ++c)
              xs->grad[base + c] +=
                  os->grad[base + c] * gs->value[b * C + c] * inv[c];
          }
        return;
      }
      // Batch statistics: mean and variance depend on x. With
      // d_i = dL/dy_i * gamma_i (gradient w.r.t. xhat_i), per channel:
      //   dx_j = inv*(d_j - mean(d)) - (x_j - mu) * inv^2 / sqrt(var) * mean(d*(x-mu))
      std::vector<double> s1(C, 0.0), s2(C, 0.0);
      for (int b = 0; b < B; ++b)
        for (long p = 0; p < plane; ++p) {
          long base = (b * plane + p) * C;
          for (int c = 0; c < C; ++c) {
            double d = os->grad[base + c] * gs->value[b * C + c];
            s1[c] += d;
            s2[c] += d * (xs->value[base + c] - mu[c]);
          }
        }
      double n = static_cast<double>(n_per_channel);
      for (int b = 0; b < B; ++b)
        for (long p = 0; p < plane; ++p) {
          long base = (b * plane + p) * C;
          for (int c = 0; c < C; ++c) {
            double d = os->grad[base + c] * gs->value[b * C + c];
            double g = inv[c] * (d - s1[c] / n);
            if (var[c] > 0.0)
              g -= (xs->value[base + c] - mu[c]) * inv[c] * inv[c] * s2[c] /
                   (std::sqrt(var[c]) * n);
            xs->grad[base + c] += g;
          }
        }
    });
  }
  return out;
}

TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     std::vector<double>& running_mean, std::vector<double>& running_var,
                     double decay, double eps, bool use_batch_stats, bool update_stats) {
  if (x->rank() != 4) throw ShapeError("batch_norm: input must be [B,H,W,C]");
  int B = x->dim(0);
  return batch_norm_per_example(x, tile_rows(gamma, B), tile_rows(beta, B), running_mean,
                                running_var, decay, eps, use_batch_stats, update_stats);
}

// ---------------------------------------------------------------------------
// ResNet

NormSite ResNet::make_site(ParameterStore& store, const std::string& name, int channels,
                           bool conditional, std::mt19937_64& rng) {
  NormSite site;
  site.channels = channels;
  // Scale/shift stay frozen: the conditional offsets carry the adaptation.
  site.gamma = &store.create(name + ".gamma", {channels}, /*trainable=*/false);
  site.beta = &store.create(name + ".beta", {channels}, /*trainable=*/false);
  init_constant(*site.gamma, 1.0);
  init_constant(*site.beta, 0.0);
  site.running_mean.assign(channels, 0.0);
  site.running_var.assign(channels, 1.0);
  site.conditional = conditional;
  if (conditional) {
    site.pred_w1 = &store.create(name + ".pred_w1", {cfg_.cond_hidden, d_cond_});
    site.pred_b1 = &store.create(name + ".pred_b1", {cfg_.cond_hidden});
    site.pred_w2 = &store.create(name + ".pred_w2", {2 * channels, cfg_.cond_hidden});
    site.pred_b2 = &store.create(name + ".pred_b2", {2 * channels});
    init_he(*site.pred_w1, rng, d_cond_);
    init_constant(*site.pred_b1, 0.0);
    // Zero output layer: offsets start at exactly zero, so the conditional
    // site initially reproduces plain batch norm bit for bit.
    init_constant(*site.pred_w2, 0.0);
    init_constant(*site.pred_b2, 0.0);
  }
  return site;
}

ResNet::ResNet(ParameterStore& store, const ResNetConfig& cfg, int d_cond,
               std::mt19937_64& rng)
    : cfg_(cfg), d_cond_(d_cond) {
  cfg_.validate();
  if (d_cond_ < 1 && !cfg_.conditional_stages.empty())
    throw ParamError("resnet: conditional sites need a conditioning size");
  shape_ = compute_feature_shape(cfg_);

  int total_blocks = 0;
  for (int n : cfg_.blocks_per_stage) total_blocks += n;
  blocks_.reserve(total_blocks);  // running-stat buffers are registered by address

  stem_conv_ = &store.create(
      "resnet.stem.conv",
      {cfg_.stem_kernel, cfg_.stem_kernel, cfg_.input_channels, cfg_.stem_channels},
      /*trainable=*/false);
  init_he(*stem_conv_, rng, cfg_.stem_kernel * cfg_.stem_kernel * cfg_.input_channels);
  if (cfg_.variant == ResNetVariant::kV1)
    stem_bn_ = make_site(store, "resnet.stem.bn", cfg_.stem_channels, false, rng);

  int in_ch = cfg_.stem_channels;
  int stages = static_cast<int>(cfg_.stage_channels.size());
  for (int s = 1; s <= stages; ++s) {
    int out_ch = cfg_.stage_channels[s - 1];
    int n = cfg_.blocks_per_stage[s - 1];
    bool cond = cfg_.stage_conditional(s);
    for (int i = 0; i < n; ++i) {
      Block blk;
      blk.stage = s;
      blk.stride = (i == n - 1) ? cfg_.stage_end_strides[s - 1] : 1;
      std::string name = "resnet.s" + std::to_string(s) + ".b" + std::to_string(i);
      blk.conv1 = &store.create(name + ".conv1", {3, 3, in_ch, out_ch}, false);
      blk.conv2 = &store.create(name + ".conv2", {3, 3, out_ch, out_ch}, false);
      init_he(*blk.conv1, rng, 9 * in_ch);
      init_he(*blk.conv2, rng, 9 * out_ch);
      bool needs_proj = blk.stride != 1 || in_ch != out_ch;
      if (needs_proj) {
        blk.proj = &store.create(name + ".proj", {1, 1, in_ch, out_ch}, false);
        init_he(*blk.proj, rng, in_ch);
      }
      if (cfg_.variant == ResNetVariant::kV1) {
        blk.bn1 = make_site(store, name + ".bn1", out_ch, cond, rng);
        blk.bn2 = make_site(store, name + ".bn2", out_ch, cond, rng);
        if (needs_proj) blk.bn_proj = make_site(store, name + ".bn_proj", out_ch, cond, rng);
      } else {
        blk.bn1 = make_site(store, name + ".bn1", in_ch, cond, rng);
        blk.bn2 = make_site(store, name + ".bn2", out_ch, cond, rng);
      }
      blocks_.push_back(std::move(blk));
      in_ch = out_ch;
    }
  }
  if (cfg_.variant == ResNetVariant::kV2)
    final_bn_ = make_site(store, "resnet.final.bn", in_ch,
                          cfg_.stage_conditional(stages), rng);

  // Running statistics live in checkpoints alongside parameters.
  auto reg = [&store](const std::string& name, NormSite& site) {
    if (site.gamma == nullptr) return;
    store.register_buffer(name + ".running_mean", &site.running_mean);
    store.register_buffer(name + ".running_var", &site.running_var);
  };
  if (cfg_.variant == ResNetVariant::kV1) reg("resnet.stem.bn", stem_bn_);
  for (auto& blk : blocks_) {
    // Derive the block's name from its first kernel: resnet.s<s>.b<i>.conv1
    const std::string& conv_name = blk.conv1->name;
    std::string base = conv_name.substr(0, conv_name.size() - 6);
    reg(base + ".bn1", blk.bn1);
    reg(base + ".bn2", blk.bn2);
    if (blk.proj != nullptr && cfg_.variant == ResNetVariant::kV1)
      reg(base + ".bn_proj", blk.bn_proj);
  }
  if (cfg_.variant == ResNetVariant::kV2) reg("resnet.final.bn", final_bn_);

  set_trainability(cfg_.finetune_last_stage);
}

void ResNet::set_trainability(bool finetune_last_stage) {
  cfg_.finetune_last_stage = finetune_last_stage;
  int last_stage = static_cast<int>(cfg_.stage_channels.size());
  auto apply = [](Parameter* p, bool t) {
    if (p == nullptr) return;
    p->trainable = t;
    p->value->requires_grad = t;
  };
  apply(stem_conv_, false);
  for (auto& blk : blocks_) {
    bool t = finetune_last_stage && blk.stage == last_stage;
    apply(blk.conv1, t);
    apply(blk.conv2, t);
    apply(blk.proj, t);
  }
}

int ResNet::norm_site_count() const {
  int n = cfg_.variant == ResNetVariant::kV1 ? 1 : 0;  // stem
  if (cfg_.variant == ResNetVariant::kV2) n += 1;      // final
  for (const auto& blk : blocks_) {
    n += 2;
    if (blk.proj != nullptr && cfg_.variant == ResNetVariant::kV1) n += 1;
  }
  return n;
}

TensorPtr ResNet::run_norm(NormSite& site, const TensorPtr& x, const TensorPtr& cond,
                           const RunContext& ctx) {
  int B = x->dim(0);
  TensorPtr gamma_rows, beta_rows;
  if (site.conditional && cond != nullptr) {
    auto hidden = relu(add(matmul_nt(cond, site.pred_w1->value), site.pred_b1->value));
    auto offsets = add(matmul_nt(hidden, site.pred_w2->value), site.pred_b2->value);
    gamma_rows = add(tile_rows(site.gamma->value, B),
                     slice_cols(offsets, 0, site.channels));
    beta_rows = add(tile_rows(site.beta->value, B),
                    slice_cols(offsets, site.channels, 2 * site.channels));
  } else {
    gamma_rows = tile_rows(site.gamma->value, B);
    beta_rows = tile_rows(site.beta->value, B);
  }
  return batch_norm_per_example(x, gamma_rows, beta_rows, site.running_mean,
                                site.running_var, cfg_.bn_decay, cfg_.bn_eps,
                                /*use_batch_stats=*/ctx.train,
                                /*update_stats=*/ctx.train && ctx.update_stats);
}

TensorPtr ResNet::block_forward_v1(Block& blk, const TensorPtr& x, const TensorPtr& cond,
                                   const RunContext& ctx) {
  auto y = conv2d(x, blk.conv1->value, blk.stride, Padding::kSame);
  y = relu(run_norm(blk.bn1, y, cond, ctx));
  y = conv2d(y, blk.conv2->value, 1, Padding::kSame);
  y = run_norm(blk.bn2, y, cond, ctx);
  TensorPtr shortcut = x;
  if (blk.proj != nullptr) {
    shortcut = conv2d(x, blk.proj->value, blk.stride, Padding::kSame);
    shortcut = run_norm(blk.bn_proj, shortcut, cond, ctx);
  }
  return relu(add(y, shortcut));
}

TensorPtr ResNet::block_forward_v2(Block& blk, const TensorPtr& x, const TensorPtr& cond,
                                   const RunContext& ctx) {
  auto pre = relu(run_norm(blk.bn1, x, cond, ctx));
  auto y = conv2d(pre, blk.conv1->value, blk.stride, Padding::kSame);
  y = relu(run_norm(blk.bn2, y, cond, ctx));
  y = conv2d(y, blk.conv2->value, 1, Padding::kSame);
  auto shortcut = blk.proj != nullptr
                      ? conv2d(pre, blk.proj->value, blk.stride, Padding::kSame)
                      : x;
  return add(y, shortcut);
}

ResNet::BatchFeatures ResNet::forward(const TensorPtr& images, const TensorPtr& cond,
                                      const RunContext& ctx) {
  if (images->rank() != 4) throw ShapeError("resnet: images must be [B,H,W,C]");
  if (images->dim(1) != cfg_.input_h || images->dim(2) != cfg_.input_w ||
      images->dim(3) != cfg_.input_channels)
    throw ShapeError("resnet: image dimensions do not match the configuration");
  int B = images->dim(0);
  if (B < 1) throw ShapeError("resnet: empty batch");
  if (cond != nullptr) {
    if (cond->rank() != 2 || cond->dim(1) != d_cond_)
      throw ShapeError("resnet: conditioning must be [B,d_cond]");
    if (cond->dim(0) != B)
      throw PairingError("resnet: conditioning rows do not match image batch");
  }

  auto x = conv2d(images, stem_conv_->value, cfg_.stem_stride, Padding::kSame);
  if (cfg_.variant == ResNetVariant::kV1) x = relu(run_norm(stem_bn_, x, cond, ctx));
  if (cfg_.stem_maxpool) x = max_pool2d(x, 3, 2, Padding::kSame);

  BatchFeatures out;
  int stages = static_cast<int>(cfg_.stage_channels.size());
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& blk = blocks_[i];
    x = cfg_.variant == ResNetVariant::kV1 ? block_forward_v1(blk, x, cond, ctx)
                                           : block_forward_v2(blk, x, cond, ctx);
    bool stage_end = i + 1 == blocks_.size() || blocks_[i + 1].stage != blk.stage;
    if (stage_end && blk.stage == cfg_.grid_stage &&
        !(cfg_.variant == ResNetVariant::kV2 && cfg_.grid_stage == stages))
      out.grid = x;
  }
  if (cfg_.variant == ResNetVariant::kV2) {
    x = relu(run_norm(final_bn_, x, cond, ctx));
    if (cfg_.grid_stage == stages) out.grid = x;
  }
  out.pooled = global_max_pool(x);
  out.grid_h = out.grid->dim(1);
  out.grid_w = out.grid->dim(2);
  return out;
}

FeatureStack ResNet::example(const BatchFeatures& f, FeatureKind kind, int b) {
  FeatureStack fs;
  fs.kind = kind;
  if (kind == FeatureKind::kPooled) {
    if (f.pooled == nullptr) throw KindError("feature stack: pooled pathway missing");
    fs.pooled = row(f.pooled, b);
  } else {
    if (f.grid == nullptr) throw KindError("feature stack: grid pathway missing");
    fs.grid = example_grid(f.grid, b);
  }
  return fs;
}

}  // namespace mmt
