#pragma once
// Residual image network with (conditional) batch normalization. The
// conditioning vector predicts per-example offsets to the normalization
// scale and shift; with a zero-initialized predictor the conditional path
// reproduces plain batch norm bit for bit.

#include <random>
#include <string>
#include <vector>

#include "mmt/params.hpp"
#include "mmt/runtime.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

enum class ResNetVariant { kV1, kV2 };  // post-activation vs pre-activation blocks

enum class FeatureKind { kPooled, kGrid };

struct ResNetConfig {
  ResNetVariant variant = ResNetVariant::kV1;
  int input_h = 16;
  int input_w = 16;
  int input_channels = 3;
  int stem_channels = 8;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_maxpool = false;  // 3x3 stride-2 same-padded pool after the stem
  std::vector<int> stage_channels = {8, 16, 24, 32};
  std::vector<int> blocks_per_stage = {1, 1, 1, 1};
  // Downsampling stride applied by the LAST block of each stage.
  std::vector<int> stage_end_strides = {2, 2, 2, 1};
  // Stages (1-based) whose normalization layers are conditional. Empty means
  // plain batch norm everywhere.
  std::vector<int> conditional_stages = {1, 2, 3, 4};
  int cond_hidden = 64;          // hidden width of the offset predictor
  int grid_stage = 3;            // stage whose output is the attention grid
  bool finetune_last_stage = false;
  double bn_decay = 0.99;
  double bn_eps = 1e-5;

  // Small network for 16x16 synthetic images.
  static ResNetConfig desk();
  // Full-scale 224x224 configurations (used for shape accounting in tests;
  // far too large to train here).
  static ResNetConfig full_v1();
  static ResNetConfig full_v2();

  void validate() const;
  bool stage_conditional(int stage_1based) const;
};

// Spatial/channel bookkeeping for a configuration, computed without running
// the network.
struct FeatureShape {
  int pooled_dim = 0;  // channels after the final stage / global pool
  int grid_h = 0;
  int grid_w = 0;
  int grid_channels = 0;
  int grid_locations() const { return grid_h * grid_w; }
};
FeatureShape compute_feature_shape(const ResNetConfig& cfg);

// Image features for ONE example, tagged by which pathway produced them.
struct FeatureStack {
  FeatureKind kind = FeatureKind::kPooled;
  TensorPtr pooled;  // [pooled_dim] when kind == kPooled
  TensorPtr grid;    // [locations, grid_channels] when kind == kGrid
};

// One normalization site: scale/shift parameters, running statistics, and
// (optionally) the conditional offset predictor.
struct NormSite {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool conditional = false;
  Parameter* pred_w1 = nullptr;  // [hidden, d_cond]
  Parameter* pred_b1 = nullptr;  // [hidden]
  Parameter* pred_w2 = nullptr;  // [2*channels, hidden], zero-initialized
  Parameter* pred_b2 = nullptr;  // [2*channels], zero-initialized
  int channels = 0;
};

// Batch normalization over [B,H,W,C] with per-example scale/shift [B,C].
// With use_batch_stats the batch mean/variance are used (and folded into the
// running averages when update_stats is set); otherwise the running
// statistics are used. Denominator is sqrt(var) + eps.
TensorPtr batch_norm_per_example(const TensorPtr& x, const TensorPtr& gamma_rows,
                                 const TensorPtr& beta_rows,
                                 std::vector<double>& running_mean,
                                 std::vector<double>& running_var, double decay,
                                 double eps, bool use_batch_stats, bool update_stats);

// Convenience wrapper with shared [C] scale/shift.
TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     std::vector<double>& running_mean, std::vector<double>& running_var,
                     double decay, double eps, bool use_batch_stats, bool update_stats);

class ResNet {
 public:
  ResNet(ParameterStore& store, const ResNetConfig& cfg, int d_cond,
         std::mt19937_64& rng);

  struct BatchFeatures {
    TensorPtr pooled;  // [B, pooled_dim]
    TensorPtr grid;    // [B, grid_h, grid_w, grid_channels]
    int grid_h = 0;
    int grid_w = 0;
  };

  // images [B,H,W,C]; cond [B,d_cond] or nullptr (conditional sites then fall
  // back to their unconditional scale/shift). Mutates running statistics when
  // ctx.update_stats is set.
  BatchFeatures forward(const TensorPtr& images, const TensorPtr& cond,
                        const RunContext& ctx);

  // Per-example view of one pathway of a batch result.
  static FeatureStack example(const BatchFeatures& f, FeatureKind kind, int b);

  const ResNetConfig& config() const { return cfg_; }
  FeatureShape feature_shape() const { return shape_; }
  int conditioning_size() const { return d_cond_; }

  // Kernel trainability: everything frozen except, optionally, the last
  // stage's convolutions. Normalization scale/shift stay frozen throughout;
  // offset predictors stay trainable.
  void set_trainability(bool finetune_last_stage);

  // Total number of normalization sites (for tests).
  int norm_site_count() const;

 private:
  struct Block {
    Parameter* conv1 = nullptr;
    Parameter* conv2 = nullptr;
    Parameter* proj = nullptr;
    NormSite bn1;
    NormSite bn2;
    NormSite bn_proj;  // v1 only, when proj present
    int stride = 1;
    int stage = 0;  // 1-based
  };

  NormSite make_site(ParameterStore& store, const std::string& name, int channels,
                     bool conditional, std::mt19937_64& rng);
  TensorPtr run_norm(NormSite& site, const TensorPtr& x, const TensorPtr& cond,
                     const RunContext& ctx);
  TensorPtr block_forward_v1(Block& blk, const TensorPtr& x, const TensorPtr& cond,
                             const RunContext& ctx);
  TensorPtr block_forward_v2(Block& blk, const TensorPtr& x, const TensorPtr& cond,
                             const RunContext& ctx);

  ResNetConfig cfg_;
  FeatureShape shape_;
  int d_cond_ = 0;
  Parameter* stem_conv_ = nullptr;
  NormSite stem_bn_;   // v1 only
  NormSite final_bn_;  // v2 only
  std::vector<Block> blocks_;
};

}  // namespace mmt
