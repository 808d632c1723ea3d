#pragma once
// Conditional GRU decoder: a first recurrence proposes a state, attention
// gathers a text context (and optionally a visual one), a second recurrence
// folds the context back in, and a deep-output layer produces logits.

#include <random>
#include <string>
#include <vector>

#include "mmt/attention.hpp"
#include "mmt/params.hpp"
#include "mmt/runtime.hpp"
#include "mmt/text_encoder.hpp"
#include "mmt/vision.hpp"

namespace mmt {

struct DecoderState {
  TensorPtr s;   // [d_state]
  int step = 0;  // completed transitions
};

struct DecoderStep {
  DecoderState state;
  TensorPtr logits;        // [vocab]
  TensorPtr text_weights;  // attention over source positions
  TensorPtr text_context;
  TensorPtr visual_context;  // null when the decoder is text-only
};

class Decoder {
 public:
  // d_visual == 0 disables the visual pathway. With remodulate_annotations
  // the visual context gates the annotation matrix before text attention
  // instead of feeding the output layer.
  Decoder(ParameterStore& store, const std::string& prefix, int vocab_size, int d_emb,
          int d_state, int d_att, int d_ann, int d_visual, bool remodulate_annotations,
          AttentionNormalizer norm, std::mt19937_64& rng);

  DecoderState init_state(const AnnotationSequence& ann) const;

  DecoderStep step(const DecoderState& prev, int y_prev, const AnnotationSequence& ann,
                   const FeatureStack* visual, const RunContext& ctx) const;

  int vocab_size() const { return vocab_size_; }
  int state_size() const { return d_state_; }
  bool visual() const { return d_visual_ > 0; }
  bool remodulates() const { return remodulate_; }

  // Attention calls made so far (text, visual).
  std::size_t text_attend_calls() const { return text_att_.calls; }
  std::size_t visual_attend_calls() const { return d_visual_ > 0 ? visual_att_.calls : 0; }

  const GruCell& proposal_cell() const { return rec1_; }
  const GruCell& update_cell() const { return rec2_; }
  Parameter* out_bias() const { return b_out_; }

 private:
  TensorPtr output_logits(const TensorPtr& y_emb, const TensorPtr& s, const TensorPtr& ctx_text,
                          const TensorPtr& ctx_vis, const RunContext& rc) const;

  int vocab_size_ = 0;
  int d_emb_ = 0;
  int d_state_ = 0;
  int d_ann_ = 0;
  int d_visual_ = 0;
  bool remodulate_ = false;
  AttentionNormalizer norm_ = AttentionNormalizer::kSoftmax;
  Parameter* embedding_ = nullptr;
  Parameter* w_init_ = nullptr;
  GruCell rec1_;
  GruCell rec2_;
  AttentionParams text_att_;
  AttentionParams visual_att_;
  Parameter* w_gate_remod_ = nullptr;  // annotation gating for remodulation
  Parameter* w_out_state_ = nullptr;
  Parameter* w_out_ctx_ = nullptr;
  Parameter* w_out_vis_ = nullptr;
  Parameter* w_out_ = nullptr;
  Parameter* b_out_ = nullptr;
};

// ---------------------------------------------------------------------------
// Beam search

struct Hypothesis {
  std::vector<int> tokens;  // generated ids, end token not included
  double log_prob = 0.0;
  bool finished = false;
  int finish_step = -1;
  DecoderState state;
};

// Deterministic beam search. Ties break on (higher score, lexicographically
// smaller token sequence, earlier finish). Finished hypotheses retire from
// the beam and are compared against the surviving candidates at the end.
// length_penalty 0 compares raw log-probabilities; alpha > 0 divides by
// length^alpha.
Hypothesis beam_search(const Decoder& dec, const AnnotationSequence& ann,
                       const FeatureStack* visual, int beam_width, int max_len,
                       int end_token, double length_penalty = 0.0);

}  // namespace mmt
