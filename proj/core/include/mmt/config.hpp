#pragma once
// Experiment variants, hyperparameter structures, and the flat key=value
// configuration file format. Every knob has a desk-scale default so an empty
// config is runnable; keys mirror the hyperparameter tables in the README.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmt/attention.hpp"
#include "mmt/common.hpp"
#include "mmt/runtime.hpp"
#include "mmt/text_encoder.hpp"
#include "mmt/vision.hpp"

namespace mmt {

// How the image enters the translation model (one Table-row each).
enum class RunVariant {
  kTextOnly,          // image-blind ablation: no visual pathway at all
  kBaselinePool5,     // plain BN, frozen untrained network, pooled-vector gating
  kCbnConv,           // conditional BN + decoder-side attention over the grid
  kCbnPool5,          // conditional BN + pooled-vector gating
  kCbnPool5V2,        // pooled-vector gating on the pre-activation network
  kCbnPool5Finetune,  // cbn_pool5 with the last stage's kernels unfrozen
  kCbnEncAtt,         // conditional BN + encoder-side attention over the grid
};

const char* variant_name(RunVariant v);
RunVariant parse_variant(const std::string& name);  // ConfigError lists valid names
const std::vector<RunVariant>& all_variants();

// Which stages carry conditional normalization (when the variant uses it).
enum class CbnStages { kAll, k2to4, k3to4 };
const char* cbn_stages_name(CbnStages s);
CbnStages parse_cbn_stages(const std::string& name);

struct OptimizerConfig {
  double lr = 0.0004;
  double adam_eps = 0.0000008;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch = 32;

  void validate() const;  // ConfigError
};

struct ModelConfig {
  RunVariant variant = RunVariant::kCbnPool5;
  CbnStages cbn_stages = CbnStages::kAll;

  int vocab_size = 0;  // set from the data pipeline, not the config file
  int d_emb = 24;      // source/target embedding width
  int d_state = 20;    // per-direction GRU width (annotations are twice this)
  int d_att = 24;      // attention hidden size
  int d_cond = 16;     // conditioning vector width fed to the offset predictors

  bool stop_gradient_q = false;   // block conditioning gradients into the encoder
  bool conv_remodulate = false;   // per-step annotation rewrite (conv variant only)
  FusionMode fusion = FusionMode::kGate;
  LayerNormPlacement layer_norm = LayerNormPlacement::kNone;
  AttentionNormalizer normalizer = AttentionNormalizer::kSoftmax;

  DropoutConfig dropout{0.7, 0.5, 1.0, 1.0, 0.5};  // keep probabilities

  ResNetConfig resnet = ResNetConfig::desk();

  int beam_width = 12;          // inference beam
  int max_len = 20;             // inference length cap
  double length_penalty = 0.0;  // 0 = raw log-probabilities

  int d_ann() const { return 2 * d_state; }
  bool uses_image() const { return variant != RunVariant::kTextOnly; }
  bool uses_grid() const {
    return variant == RunVariant::kCbnConv || variant == RunVariant::kCbnEncAtt;
  }
  bool cbn() const { return uses_image() && variant != RunVariant::kBaselinePool5; }

  // Derives the vision wiring (network version, conditional stages, finetune
  // flag) from the variant. Call after any field changes, before building.
  void finalize();
  void validate() const;  // ConfigError
};

struct TrainSettings {
  OptimizerConfig opt;
  int max_steps = 2000;
  int eval_every = 50;
  int patience = 500;  // steps without dev improvement before stopping
  int eval_beam = 1;
  int length_cap = 40;  // batching rejects longer sentences
  int bpe_merges = 64;
  std::uint64_t seed = 1;

  void validate() const;  // ConfigError
};

struct ConfigFile {
  ModelConfig model;
  TrainSettings train;
  std::map<std::string, std::string> raw;  // keys explicitly set
};

// One `key = value` per line; blank lines and '#' comments ignored. Unknown
// keys and malformed values are ConfigErrors naming the source and line.
ConfigFile parse_config_text(const std::string& text, const std::string& source_name);
ConfigFile load_config_file(const std::string& path);

// Applies one key=value pair (shared by the file parser and checkpoint
// manifests). `where` prefixes error messages.
void apply_config_pair(ConfigFile& cfg, const std::string& key, const std::string& value,
                       const std::string& where);

// Canonical full dump: every key, current values, sorted. Feeding it back
// through parse_config_text reproduces the configuration.
std::map<std::string, std::string> config_snapshot(const ConfigFile& cfg);

}  // namespace mmt
