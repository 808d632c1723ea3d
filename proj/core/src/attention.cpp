#include "mmt/attention.hpp"

#include <cmath>

#include "mmt/common.hpp"

namespace mmt {

AttentionParams make_attention(ParameterStore& store, const std::string& prefix,
                               int d_att, int d_key, int d_query, std::mt19937_64& rng) {
  if (d_att < 1 || d_key < 1 || d_query < 1)
    throw ParamError("attention dims must be positive: " + prefix);
  AttentionParams att;
  att.d_att = d_att;
  att.d_key = d_key;
  att.d_query = d_query;
  att.w_key = &store.create(prefix + ".w_key", {d_att, d_key});
  att.w_query = &store.create(prefix + ".w_query", {d_att, d_query});
  att.v = &store.create(prefix + ".v", {d_att});
  init_glorot(*att.w_key, rng, d_key, d_att);
  init_glorot(*att.w_query, rng, d_query, d_att);
  init_uniform(*att.v, rng, -0.1, 0.1);
  return att;
}

TensorPtr ratio_normalize(const TensorPtr& scores, const std::vector<int>& mask) {
  if (scores->rank() != 1) throw ShapeError("ratio_normalize: scores must be a vector");
  int n = scores->dim(0);
  if (static_cast<int>(mask.size()) != n)
    throw ShapeError("ratio_normalize: mask length mismatch");
  std::vector<double> valid;
  for (int i = 0; i < n; ++i)
    if (mask[i] == 1) valid.push_back(scores->value[i]);
  if (valid.empty()) throw EmptySupportError("ratio_normalize: all positions masked");
  double total = stable_sum(valid);
  if (!(std::fabs(total) > 1e-12))
    throw NonFiniteError("ratio_normalize: score mass too close to zero");

  auto out = Tensor::make({n});
  for (int i = 0; i < n; ++i)
    out->value[i] = mask[i] == 1 ? store_round(scores->value[i] / total) : 0.0;

  Tape* tape = active_tape();
  bool track = tape != nullptr && scores->requires_grad;
  out->requires_grad = track;
  if (track) {
    auto s = scores;
    auto o = out;
    tape->record([s, o, mask, total, n]() {
      // w_i = s_i / T with T = sum over valid j of s_j:
      //   ds_i = (dw_i - sum_j dw_j w_j) / T   (valid i only)
      double dot = 0.0;
      for (int j = 0; j < n; ++j)
        if (mask[j] == 1) dot += o->grad[j] * o->value[j];
      for (int i = 0; i < n; ++i)
        if (mask[i] == 1) s->grad[i] += (o->grad[i] - dot) / total;
    });
  }
  return out;
}

namespace {

TensorPtr attention_scores(const AttentionParams& att, const TensorPtr& keys,
                           const TensorPtr& query) {
  if (keys->rank() != 2 || keys->dim(1) != att.d_key)
    throw ShapeError("attend: keys must be [N,d_key]");
  if (query->rank() != 1 || query->dim(0) != att.d_query)
    throw ShapeError("attend: query must be [d_query]");
  auto keyed = matmul_nt(keys, att.w_key->value);      // [N, d_att]
  auto queried = matvec(att.w_query->value, query);    // [d_att]
  auto u = tanh(add(keyed, queried));                  // broadcast over rows
  return matvec(u, att.v->value);                      // [N]
}

}  // namespace

AttendResult attend(const AttentionParams& att, const TensorPtr& keys,
                    const std::vector<int>& mask, const TensorPtr& query,
                    AttentionNormalizer norm) {
  auto scores = attention_scores(att, keys, query);
  AttendResult res;
  res.weights = norm == AttentionNormalizer::kSoftmax ? softmax_masked(scores, mask)
                                                      : ratio_normalize(scores, mask);
  res.context = attend_context(res.weights, keys);
  ++att.calls;
  return res;
}

AttendResult visual_attend_decoder(const AttentionParams& att, const FeatureStack& features,
                                   const TensorPtr& state, AttentionNormalizer norm) {
  if (features.kind != FeatureKind::kGrid)
    throw KindError("visual attention needs grid features");
  std::vector<int> all(features.grid->dim(0), 1);
  return attend(att, features.grid, all, state, norm);
}

std::vector<TensorPtr> visual_attend_encoder(const AttentionParams& att,
                                             const FeatureStack& features,
                                             const AnnotationSequence& ann,
                                             AttentionNormalizer norm) {
  if (features.kind != FeatureKind::kGrid)
    throw KindError("visual attention needs grid features");
  int m = ann.positions();
  std::vector<int> all(features.grid->dim(0), 1);
  auto zero = Tensor::make({features.grid->dim(1)});
  std::vector<TensorPtr> out(m);
  for (int i = 0; i < m; ++i)
    out[i] = ann.mask[i] == 1 ? attend(att, features.grid, all, row(ann.h, i), norm).context
                              : zero;
  return out;
}

AnnotationSequence modulate_annotations(const AnnotationSequence& ann, const TensorPtr& v,
                                        const TensorPtr& w_gate) {
  if (v->rank() != 1) throw ShapeError("modulate: visual vector must be rank 1");
  if (w_gate->rank() != 2 || w_gate->dim(1) != v->dim(0))
    throw ShapeError("modulate: gate weight must be [d_ann, d_visual]");
  if (w_gate->dim(0) != ann.h->dim(1))
    throw ShapeError("modulate: gate output width must match annotations");
  auto gate = tanh(matvec(w_gate, v));
  AnnotationSequence out;
  out.h = mul(ann.h, gate);  // broadcast over rows; zero rows stay exactly zero
  out.mask = ann.mask;
  return out;
}

AnnotationSequence fuse_encoder_visual(const AnnotationSequence& ann,
                                       const std::vector<TensorPtr>& contexts,
                                       FusionMode mode, const TensorPtr& w_gate,
                                       const TensorPtr& w_proj) {
  int m = ann.positions();
  if (static_cast<int>(contexts.size()) != m)
    throw ShapeError("fuse: one visual context per position required");
  int d_ann = ann.h->dim(1);
  auto zero = Tensor::make({d_ann});
  std::vector<TensorPtr> rows(m);
  for (int i = 0; i < m; ++i) {
    if (ann.mask[i] != 1) {
      rows[i] = zero;
      continue;
    }
    auto h_i = row(ann.h, i);
    if (mode == FusionMode::kGate) {
      if (w_gate == nullptr) throw ParamError("fuse: gate weight missing");
      rows[i] = mul(h_i, tanh(matvec(w_gate, contexts[i])));
    } else {
      if (w_proj == nullptr) throw ParamError("fuse: projection weight missing");
      rows[i] = matvec(w_proj, concat({h_i, contexts[i]}));
    }
  }
  AnnotationSequence out;
  out.h = stack_rows(rows);
  out.mask = ann.mask;
  return out;
}

}  // namespace mmt
