#include "mmt/text_encoder.hpp"

#include "mmt/common.hpp"

namespace mmt {

GruCell::GruCell(ParameterStore& store, const std::string& prefix, int d_in,
                 int d_state, LayerNormPlacement ln, std::mt19937_64& rng)
    : d_in_(d_in), d_state_(d_state), ln_(ln) {
  if (d_in < 1 || d_state < 1)
    throw ParamError("gru cell dims must be positive: " + prefix);
  w_update = &store.create(prefix + ".w_update", {d_state, d_in});
  u_update = &store.create(prefix + ".u_update", {d_state, d_state});
  w_reset = &store.create(prefix + ".w_reset", {d_state, d_in});
  u_reset = &store.create(prefix + ".u_reset", {d_state, d_state});
  w_cand = &store.create(prefix + ".w_cand", {d_state, d_in});
  u_cand = &store.create(prefix + ".u_cand", {d_state, d_state});
  for (Parameter* p : {w_update, w_reset, w_cand}) init_glorot(*p, rng, d_in, d_state);
  for (Parameter* p : {u_update, u_reset, u_cand}) init_glorot(*p, rng, d_state, d_state);
  if (ln_ == LayerNormPlacement::kGatePreact) {
    auto make_ln = [&](const std::string& gate, Parameter*& gain, Parameter*& bias) {
      gain = &store.create(prefix + ".ln_gain_" + gate, {d_state});
      bias = &store.create(prefix + ".ln_bias_" + gate, {d_state});
      init_constant(*gain, 1.0);
      init_constant(*bias, 0.0);
    };
    make_ln("update", ln_gain_update_, ln_bias_update_);
    make_ln("reset", ln_gain_reset_, ln_bias_reset_);
    make_ln("cand", ln_gain_cand_, ln_bias_cand_);
  }
}

TensorPtr GruCell::normed(const TensorPtr& pre, Parameter* gain, Parameter* bias) const {
  if (ln_ == LayerNormPlacement::kNone) return pre;
  return layer_norm(pre, gain->value, bias->value);
}

TensorPtr GruCell::step(const TensorPtr& x, const TensorPtr& s_prev) const {
  if (x->rank() != 1 || x->dim(0) != d_in_)
    throw ShapeError("gru step: input size mismatch");
  if (s_prev->rank() != 1 || s_prev->dim(0) != d_state_)
    throw ShapeError("gru step: state size mismatch");
  auto z = sigmoid(normed(add(matvec(w_update->value, x), matvec(u_update->value, s_prev)),
                          ln_gain_update_, ln_bias_update_));
  auto r = sigmoid(normed(add(matvec(w_reset->value, x), matvec(u_reset->value, s_prev)),
                          ln_gain_reset_, ln_bias_reset_));
  auto cand = tanh(normed(add(matvec(w_cand->value, x), mul(r, matvec(u_cand->value, s_prev))),
                          ln_gain_cand_, ln_bias_cand_));
  // s = (1 - z) * cand + z * s_prev; the affine form keeps z == 1 exact.
  auto keep_new = affine(z, -1.0, 1.0);
  return add(mul(keep_new, cand), mul(z, s_prev));
}

TextEncoder::TextEncoder(ParameterStore& store, const std::string& prefix,
                         int vocab_size, int d_emb, int d_state, int d_cond,
                         LayerNormPlacement ln, std::mt19937_64& rng)
    : vocab_size_(vocab_size),
      d_emb_(d_emb),
      d_state_(d_state),
      d_cond_(d_cond),
      fwd_(store, prefix + ".fwd", d_emb, d_state, ln, rng),
      bwd_(store, prefix + ".bwd", d_emb, d_state, ln, rng) {
  if (vocab_size < 1) throw ParamError("encoder vocab size must be positive");
  embedding_ = &store.create(prefix + ".embedding", {vocab_size, d_emb});
  init_uniform(*embedding_, rng, -0.1, 0.1);
  w_cond_ = &store.create(prefix + ".w_cond", {d_cond, 2 * d_state});
  init_glorot(*w_cond_, rng, 2 * d_state, d_cond);
}

TensorPtr TextEncoder::embed(const std::vector<int>& ids) const {
  return embedding_rows(embedding_->value, ids);
}

AnnotationSequence TextEncoder::encode(const std::vector<int>& ids,
                                       const std::vector<int>& mask,
                                       const RunContext& ctx) const {
  if (ids.size() != mask.size())
    throw ShapeError("encode: ids and mask lengths differ");
  int m = static_cast<int>(ids.size());
  int len = 0;
  while (len < m && mask[len] == 1) ++len;
  for (int i = len; i < m; ++i)
    if (mask[i] != 0)
      throw ShapeError("encode: mask must be a contiguous prefix of ones");
  if (len == 0) throw EmptySupportError("encode: sentence has no valid tokens");

  std::vector<int> valid_ids(ids.begin(), ids.begin() + len);
  auto emb = embed(valid_ids);  // [len, d_emb]

  std::vector<TensorPtr> inputs(len);
  for (int t = 0; t < len; ++t)
    inputs[t] = maybe_dropout(row(emb, t), ctx.dropout.gru_in, ctx);

  std::vector<TensorPtr> states_fwd(len), states_bwd(len);
  auto zero_state = Tensor::make({d_state_});
  TensorPtr s = zero_state;
  for (int t = 0; t < len; ++t) {
    s = fwd_.step(inputs[t], s);
    states_fwd[t] = maybe_dropout(s, ctx.dropout.gru_out, ctx);
  }
  s = zero_state;
  for (int t = len - 1; t >= 0; --t) {
    s = bwd_.step(inputs[t], s);
    states_bwd[t] = maybe_dropout(s, ctx.dropout.gru_out, ctx);
  }

  auto zero_row = Tensor::make({2 * d_state_});
  std::vector<TensorPtr> rows(m);
  for (int t = 0; t < m; ++t)
    rows[t] = t < len ? concat({states_fwd[t], states_bwd[t]}) : zero_row;

  AnnotationSequence ann;
  ann.h = stack_rows(rows);
  ann.mask = mask;
  return ann;
}

TensorPtr TextEncoder::pool_conditioning(const AnnotationSequence& ann,
                                         bool stop_gradient) const {
  auto mean = masked_mean_rows(ann.h, ann.mask);
  if (stop_gradient) mean = detach(mean);
  return tanh(matvec(w_cond_->value, mean));
}

}  // namespace mmt
