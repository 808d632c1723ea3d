#include "mmt/model.hpp"

#include <utility>

#include "mmt/training.hpp"

namespace mmt {

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.finalize();
  cfg_.validate();
  std::mt19937_64 rng = make_rng(seed, 0x4D4F44);

  enc_ = std::make_unique<TextEncoder>(store_, "enc", cfg_.vocab_size, cfg_.d_emb,
                                       cfg_.d_state, cfg_.d_cond, cfg_.layer_norm, rng);
  if (cfg_.uses_image())
    resnet_ = std::make_unique<ResNet>(store_, cfg_.resnet, cfg_.d_cond, rng);

  int d_visual =
      cfg_.variant == RunVariant::kCbnConv ? resnet_->feature_shape().grid_channels : 0;
  dec_ = std::make_unique<Decoder>(store_, "dec", cfg_.vocab_size, cfg_.d_emb,
                                   cfg_.d_state, cfg_.d_att, cfg_.d_ann(), d_visual,
                                   cfg_.conv_remodulate, cfg_.normalizer, rng);

  switch (cfg_.variant) {
    case RunVariant::kBaselinePool5:
    case RunVariant::kCbnPool5:
    case RunVariant::kCbnPool5V2:
    case RunVariant::kCbnPool5Finetune: {
      int d_pool = resnet_->feature_shape().pooled_dim;
      w_pool_ = &store_.create("model.w_pool", {cfg_.d_ann(), d_pool});
      init_glorot(*w_pool_, rng, d_pool, cfg_.d_ann());
      break;
    }
    case RunVariant::kCbnEncAtt: {
      int d_loc = resnet_->feature_shape().grid_channels;
      enc_att_ = make_attention(store_, "model.att_enc", cfg_.d_att, d_loc,
                                cfg_.d_ann(), rng);
      if (cfg_.fusion == FusionMode::kGate) {
        w_fuse_gate_ = &store_.create("model.w_fuse_gate", {cfg_.d_ann(), d_loc});
        init_glorot(*w_fuse_gate_, rng, d_loc, cfg_.d_ann());
      } else {
        w_fuse_proj_ =
            &store_.create("model.w_fuse_proj", {cfg_.d_ann(), cfg_.d_ann() + d_loc});
        init_glorot(*w_fuse_proj_, rng, cfg_.d_ann() + d_loc, cfg_.d_ann());
      }
      break;
    }
    case RunVariant::kTextOnly:
    case RunVariant::kCbnConv:
      break;
  }
}

Model::Prepared Model::prepare(const std::vector<std::vector<int>>& src_ids,
                               const std::vector<std::vector<int>>& src_mask,
                               const std::vector<int>& image_indices,
                               const std::vector<Image>& images, const RunContext& ctx) {
  int B = static_cast<int>(src_ids.size());
  if (B == 0) throw EmptySupportError("model: empty batch");
  if (src_mask.size() != src_ids.size())
    throw ShapeError("model: source ids and mask row counts differ");

  Prepared out;
  out.ann.reserve(B);
  for (int b = 0; b < B; ++b) out.ann.push_back(enc_->encode(src_ids[b], src_mask[b], ctx));

  if (!cfg_.uses_image()) return out;

  if (static_cast<int>(image_indices.size()) != B)
    throw PairingError("model: image index count does not match the batch");
  std::vector<Image> selected;
  selected.reserve(B);
  for (int idx : image_indices) {
    if (idx < 0 || idx >= static_cast<int>(images.size()))
      throw PairingError("model: this variant needs an image for every sentence");
    selected.push_back(images[idx]);
  }

  TensorPtr cond = nullptr;
  if (cfg_.cbn()) {
    std::vector<TensorPtr> qs;
    qs.reserve(B);
    for (int b = 0; b < B; ++b)
      qs.push_back(enc_->pool_conditioning(out.ann[b], cfg_.stop_gradient_q));
    cond = stack_rows(qs);
  }

  ResNet::BatchFeatures feats = resnet_->forward(images_to_tensor(selected), cond, ctx);

  switch (cfg_.variant) {
    case RunVariant::kBaselinePool5:
    case RunVariant::kCbnPool5:
    case RunVariant::kCbnPool5V2:
    case RunVariant::kCbnPool5Finetune:
      for (int b = 0; b < B; ++b) {
        FeatureStack fs = ResNet::example(feats, FeatureKind::kPooled, b);
        out.ann[b] = modulate_annotations(out.ann[b], fs.pooled, w_pool_->value);
      }
      break;
    case RunVariant::kCbnConv:
      out.grids.reserve(B);
      for (int b = 0; b < B; ++b)
        out.grids.push_back(ResNet::example(feats, FeatureKind::kGrid, b));
      break;
    case RunVariant::kCbnEncAtt:
      for (int b = 0; b < B; ++b) {
        FeatureStack fs = ResNet::example(feats, FeatureKind::kGrid, b);
        auto contexts = visual_attend_encoder(enc_att_, fs, out.ann[b], cfg_.normalizer);
        out.ann[b] = fuse_encoder_visual(
            out.ann[b], contexts, cfg_.fusion,
            w_fuse_gate_ ? w_fuse_gate_->value : nullptr,
            w_fuse_proj_ ? w_fuse_proj_->value : nullptr);
      }
      break;
    case RunVariant::kTextOnly:
      break;
  }
  return out;
}

std::vector<std::vector<TensorPtr>> Model::forward_logits(const Batch& batch,
                                                          const std::vector<Image>& images,
                                                          const RunContext& ctx) {
  Prepared prep =
      prepare(batch.src_ids, batch.src_mask, batch.image_indices, images, ctx);
  int B = batch.size();
  if (static_cast<int>(batch.tgt_in.size()) != B ||
      static_cast<int>(batch.tgt_mask.size()) != B)
    throw ShapeError("model: target rows do not match the batch");

  std::vector<std::vector<TensorPtr>> logits(B);
  for (int b = 0; b < B; ++b) {
    DecoderState state = dec_->init_state(prep.ann[b]);
    const auto& tin = batch.tgt_in[b];
    const auto& tmask = batch.tgt_mask[b];
    for (std::size_t t = 0; t < tin.size() && tmask[t] == 1; ++t) {
      DecoderStep step = dec_->step(state, tin[t], prep.ann[b], prep.grid(b), ctx);
      logits[b].push_back(step.logits);
      state = std::move(step.state);
    }
  }
  return logits;
}

TensorPtr Model::batch_loss(const Batch& batch, const std::vector<Image>& images,
                            const RunContext& ctx) {
  return nll_loss(forward_logits(batch, images, ctx), batch.tgt_out, batch.tgt_mask);
}

double Model::batch_loss_value(const Batch& batch, const std::vector<Image>& images) {
  return batch_loss(batch, images, RunContext::inference())->value[0];
}

std::vector<int> Model::translate(const std::vector<int>& src_ids, const Image* image,
                                  int beam_width, int max_len) {
  if (src_ids.empty()) return {};
  if (beam_width <= 0) beam_width = cfg_.beam_width;
  if (max_len <= 0) max_len = cfg_.max_len;

  std::vector<int> mask(src_ids.size(), 1);
  std::vector<Image> images;
  std::vector<int> indices = {-1};
  if (cfg_.uses_image()) {
    if (image == nullptr)
      throw PairingError("model: this variant needs an image for every sentence");
    images.push_back(*image);
    indices[0] = 0;
  }
  RunContext ctx = RunContext::inference();
  Prepared prep = prepare({src_ids}, {mask}, indices, images, ctx);
  Hypothesis best = beam_search(*dec_, prep.ann[0], prep.grid(0), beam_width, max_len,
                                tok::kEnd, cfg_.length_penalty);
  return best.tokens;
}

}  // namespace mmt
