#pragma once
// Bidirectional GRU sentence encoder. Produces per-token annotation vectors
// (forward and backward states concatenated) plus a pooled conditioning
// vector used to drive the visual pathway.

#include <random>
#include <string>
#include <vector>

#include "mmt/params.hpp"
#include "mmt/runtime.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// Where layer normalization is applied inside the recurrent cell.
enum class LayerNormPlacement {
  kNone,        // plain GRU
  kGatePreact,  // normalize each gate pre-activation before the nonlinearity
};

// Encoder output: annotation matrix [M, 2*d_state] plus the 0/1 validity
// mask. Rows with mask 0 are exactly zero.
struct AnnotationSequence {
  TensorPtr h;
  std::vector<int> mask;

  int positions() const { return h ? h->shape[0] : 0; }
  int valid_count() const {
    int n = 0;
    for (int m : mask) n += m;
    return n;
  }
};

// Gated recurrent cell without bias terms: six weight matrices, optional
// per-gate layer normalization of the combined pre-activations.
class GruCell {
 public:
  GruCell(ParameterStore& store, const std::string& prefix, int d_in, int d_state,
          LayerNormPlacement ln, std::mt19937_64& rng);

  // One transition: x [d_in], s_prev [d_state] -> new state [d_state].
  TensorPtr step(const TensorPtr& x, const TensorPtr& s_prev) const;

  int input_size() const { return d_in_; }
  int state_size() const { return d_state_; }
  LayerNormPlacement norm_placement() const { return ln_; }

  // Exposed so tests can tie weights between two cells.
  Parameter* w_update;
  Parameter* u_update;
  Parameter* w_reset;
  Parameter* u_reset;
  Parameter* w_cand;
  Parameter* u_cand;

 private:
  TensorPtr normed(const TensorPtr& pre, Parameter* gain, Parameter* bias) const;

  int d_in_ = 0;
  int d_state_ = 0;
  LayerNormPlacement ln_ = LayerNormPlacement::kNone;
  Parameter* ln_gain_update_ = nullptr;
  Parameter* ln_bias_update_ = nullptr;
  Parameter* ln_gain_reset_ = nullptr;
  Parameter* ln_bias_reset_ = nullptr;
  Parameter* ln_gain_cand_ = nullptr;
  Parameter* ln_bias_cand_ = nullptr;
};

class TextEncoder {
 public:
  TextEncoder(ParameterStore& store, const std::string& prefix, int vocab_size,
              int d_emb, int d_state, int d_cond, LayerNormPlacement ln,
              std::mt19937_64& rng);

  // Token ids -> embedding rows [n, d_emb].
  TensorPtr embed(const std::vector<int>& ids) const;

  // Run both directions over the valid prefix of `ids` (mask must be a
  // contiguous prefix of ones). Rows beyond the valid length come out as
  // exact zeros and never touch the recurrence.
  AnnotationSequence encode(const std::vector<int>& ids, const std::vector<int>& mask,
                            const RunContext& ctx) const;

  // q = tanh(W_cond * mean of valid annotation rows). With stop_gradient the
  // conditioning path contributes no gradient to the encoder.
  TensorPtr pool_conditioning(const AnnotationSequence& ann, bool stop_gradient) const;

  int annotation_size() const { return 2 * d_state_; }
  int conditioning_size() const { return d_cond_; }
  int vocab_size() const { return vocab_size_; }

  GruCell& forward_cell() { return fwd_; }
  GruCell& backward_cell() { return bwd_; }
  const GruCell& forward_cell() const { return fwd_; }
  const GruCell& backward_cell() const { return bwd_; }
  Parameter* embedding() const { return embedding_; }
  Parameter* cond_weight() const { return w_cond_; }

 private:
  int vocab_size_ = 0;
  int d_emb_ = 0;
  int d_state_ = 0;
  int d_cond_ = 0;
  Parameter* embedding_ = nullptr;
  Parameter* w_cond_ = nullptr;
  GruCell fwd_;
  GruCell bwd_;
};

}  // namespace mmt
