#pragma once
// The assembled translation model: bidirectional text encoder, conditioning
// vector, convolutional image network, the per-variant visual pathway
// (pooled gating, decoder-side grid attention, or encoder-side grid
// attention), and the attentional two-cell GRU decoder.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mmt/attention.hpp"
#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/decoder.hpp"
#include "mmt/params.hpp"
#include "mmt/text_encoder.hpp"
#include "mmt/vision.hpp"

namespace mmt {

class Model {
 public:
  // Construction order and the seed fully determine every weight.
  Model(const ModelConfig& cfg, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // The encoded/fused inputs the decoder consumes, one entry per batch row.
  struct Prepared {
    std::vector<AnnotationSequence> ann;
    std::vector<FeatureStack> grids;  // kCbnConv only; empty otherwise
    const FeatureStack* grid(int b) const {
      return grids.empty() ? nullptr : &grids[b];
    }
  };
  Prepared prepare(const std::vector<std::vector<int>>& src_ids,
                   const std::vector<std::vector<int>>& src_mask,
                   const std::vector<int>& image_indices,
                   const std::vector<Image>& images, const RunContext& ctx);

  // Teacher-forced per-step vocabulary logits, [B][T_b].
  std::vector<std::vector<TensorPtr>> forward_logits(const Batch& batch,
                                                     const std::vector<Image>& images,
                                                     const RunContext& ctx);

  // Mean negative log-likelihood over the unmasked target tokens.
  TensorPtr batch_loss(const Batch& batch, const std::vector<Image>& images,
                       const RunContext& ctx);
  double batch_loss_value(const Batch& batch, const std::vector<Image>& images);

  // Beam-search translation of one source sentence. `image` may be null only
  // for the image-blind variant. Zero beam/max_len fall back to the config.
  std::vector<int> translate(const std::vector<int>& src_ids, const Image* image,
                             int beam_width = 0, int max_len = 0);

  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  TextEncoder& encoder() { return *enc_; }
  Decoder& decoder() { return *dec_; }
  ResNet* vision() { return resnet_.get(); }

  // Attention-call instrumentation.
  std::size_t decoder_text_attend_calls() const { return dec_->text_attend_calls(); }
  std::size_t decoder_visual_attend_calls() const { return dec_->visual_attend_calls(); }
  std::size_t encoder_visual_attend_calls() const { return enc_att_.calls; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  ParameterStore store_;
  std::unique_ptr<TextEncoder> enc_;
  std::unique_ptr<ResNet> resnet_;
  std::unique_ptr<Decoder> dec_;
  Parameter* w_pool_ = nullptr;      // pooled-vector gating weight
  AttentionParams enc_att_;          // encoder-side visual attention
  Parameter* w_fuse_gate_ = nullptr;
  Parameter* w_fuse_proj_ = nullptr;
};

}  // namespace mmt
