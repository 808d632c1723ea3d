#pragma once
// Additive attention shared by the text and visual pathways, plus the
// encoder-side fusion of visual context into the annotation matrix.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "mmt/params.hpp"
#include "mmt/text_encoder.hpp"
#include "mmt/vision.hpp"

namespace mmt {

enum class AttentionNormalizer {
  kSoftmax,  // masked softmax (default)
  kRatio,    // score / sum of scores over the valid positions
};

enum class FusionMode {
  kGate,    // annotation row * tanh(W * visual context), elementwise
  kConcat,  // W * [annotation row; visual context]
};

// Scores are v . tanh(W_key k_i + W_query q). The call counter lets tests
// verify exactly how often a pathway consulted its attention.
struct AttentionParams {
  Parameter* w_key = nullptr;    // [d_att, d_key]
  Parameter* w_query = nullptr;  // [d_att, d_query]
  Parameter* v = nullptr;        // [d_att]
  int d_att = 0, d_key = 0, d_query = 0;
  mutable std::size_t calls = 0;
};

AttentionParams make_attention(ParameterStore& store, const std::string& prefix,
                               int d_att, int d_key, int d_query, std::mt19937_64& rng);

struct AttendResult {
  TensorPtr context;  // [d_key]
  TensorPtr weights;  // [N], exact zeros at masked positions
};

// keys [N,d_key], mask length N (1 = valid), query [d_query].
AttendResult attend(const AttentionParams& att, const TensorPtr& keys,
                    const std::vector<int>& mask, const TensorPtr& query,
                    AttentionNormalizer norm = AttentionNormalizer::kSoftmax);

// Decoder-side visual attention over the convolutional grid.
AttendResult visual_attend_decoder(const AttentionParams& att, const FeatureStack& features,
                                   const TensorPtr& state,
                                   AttentionNormalizer norm = AttentionNormalizer::kSoftmax);

// Encoder-side: one visual context per valid annotation row (queried by the
// row itself); zero vectors at masked positions.
std::vector<TensorPtr> visual_attend_encoder(const AttentionParams& att,
                                             const FeatureStack& features,
                                             const AnnotationSequence& ann,
                                             AttentionNormalizer norm =
                                                 AttentionNormalizer::kSoftmax);

// Pooled-vector modulation: every annotation row is gated elementwise by
// tanh(W * v). Masked rows stay exactly zero.
AnnotationSequence modulate_annotations(const AnnotationSequence& ann, const TensorPtr& v,
                                        const TensorPtr& w_gate);

// Per-position fusion of the encoder-side visual contexts into the
// annotations. kGate keeps the annotation width; kConcat projects
// [row; context] back to the annotation width with w_proj.
AnnotationSequence fuse_encoder_visual(const AnnotationSequence& ann,
                                       const std::vector<TensorPtr>& contexts,
                                       FusionMode mode, const TensorPtr& w_gate,
                                       const TensorPtr& w_proj);

// score / sum-of-scores normalization over the valid positions (the
// alternative to softmax); exact zeros at masked positions.
TensorPtr ratio_normalize(const TensorPtr& scores, const std::vector<int>& mask);

}  // namespace mmt
