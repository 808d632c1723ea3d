#include "mmt/decoder.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <optional>

#include "mmt/common.hpp"

namespace mmt {

Decoder::Decoder(ParameterStore& store, const std::string& prefix, int vocab_size,
                 int d_emb, int d_state, int d_att, int d_ann, int d_visual,
                 bool remodulate_annotations, AttentionNormalizer norm,
                 std::mt19937_64& rng)
    : vocab_size_(vocab_size),
      d_emb_(d_emb),
      d_state_(d_state),
      d_ann_(d_ann),
      d_visual_(d_visual),
      remodulate_(remodulate_annotations),
      norm_(norm),
      rec1_(store, prefix + ".rec1", d_emb, d_state, LayerNormPlacement::kNone, rng),
      rec2_(store, prefix + ".rec2", d_ann, d_state, LayerNormPlacement::kNone, rng) {
  if (vocab_size <= tok::kReserved)
    throw ParamError("decoder: vocab must extend past the reserved ids");
  if (d_visual_ < 0) throw ParamError("decoder: negative visual size");
  if (remodulate_ && d_visual_ == 0)
    throw ParamError("decoder: remodulation needs the visual pathway");
  embedding_ = &store.create(prefix + ".embedding", {vocab_size, d_emb});
  init_uniform(*embedding_, rng, -0.1, 0.1);
  w_init_ = &store.create(prefix + ".w_init", {d_state, d_ann});
  init_glorot(*w_init_, rng, d_ann, d_state);
  text_att_ = make_attention(store, prefix + ".att_text", d_att, d_ann, d_state, rng);
  if (d_visual_ > 0) {
    visual_att_ = make_attention(store, prefix + ".att_vis", d_att, d_visual, d_state, rng);
    if (remodulate_) {
      w_gate_remod_ = &store.create(prefix + ".w_gate_remod", {d_ann, d_visual});
      init_glorot(*w_gate_remod_, rng, d_visual, d_ann);
    } else {
      w_out_vis_ = &store.create(prefix + ".w_out_vis", {d_emb, d_visual});
      init_glorot(*w_out_vis_, rng, d_visual, d_emb);
    }
  }
  w_out_state_ = &store.create(prefix + ".w_out_state", {d_emb, d_state});
  w_out_ctx_ = &store.create(prefix + ".w_out_ctx", {d_emb, d_ann});
  init_glorot(*w_out_state_, rng, d_state, d_emb);
  init_glorot(*w_out_ctx_, rng, d_ann, d_emb);
  w_out_ = &store.create(prefix + ".w_out", {vocab_size, d_emb});
  init_glorot(*w_out_, rng, d_emb, vocab_size);
  b_out_ = &store.create(prefix + ".b_out", {vocab_size});
  init_constant(*b_out_, 0.0);
}

DecoderState Decoder::init_state(const AnnotationSequence& ann) const {
  DecoderState st;
  st.s = tanh(matvec(w_init_->value, masked_mean_rows(ann.h, ann.mask)));
  st.step = 0;
  return st;
}

TensorPtr Decoder::output_logits(const TensorPtr& y_emb, const TensorPtr& s,
                                 const TensorPtr& ctx_text, const TensorPtr& ctx_vis,
                                 const RunContext& rc) const {
  std::vector<TensorPtr> parts = {y_emb, matvec(w_out_state_->value, s),
                                  matvec(w_out_ctx_->value, ctx_text)};
  if (ctx_vis != nullptr) parts.push_back(matvec(w_out_vis_->value, ctx_vis));
  auto o = maybe_dropout(tanh(add_n(parts)), rc.dropout.softmax_out, rc);
  return add(matvec(w_out_->value, o), b_out_->value);
}

DecoderStep Decoder::step(const DecoderState& prev, int y_prev,
                          const AnnotationSequence& ann, const FeatureStack* visual,
                          const RunContext& ctx) const {
  if (y_prev < 0 || y_prev >= vocab_size_)
    throw VocabError("decoder: previous token id out of range");
  if (prev.s == nullptr) throw ParamError("decoder: uninitialized state");
  if (d_visual_ > 0 && visual == nullptr)
    throw KindError("decoder: this configuration needs visual features");
  if (d_visual_ == 0 && visual != nullptr)
    throw KindError("decoder: text-only configuration given visual features");
  if (ann.h->dim(1) != d_ann_) throw ShapeError("decoder: annotation width mismatch");

  auto y_emb = maybe_dropout(row(embedding_rows(embedding_->value, {y_prev}), 0),
                             ctx.dropout.cgru_in, ctx);
  auto s_mid = rec1_.step(y_emb, prev.s);

  TensorPtr v_ctx;
  const AnnotationSequence* att_ann = &ann;
  AnnotationSequence remod;
  if (d_visual_ > 0 && remodulate_) {
    v_ctx = visual_attend_decoder(visual_att_, *visual, s_mid, norm_).context;
    remod = modulate_annotations(ann, v_ctx, w_gate_remod_->value);
    att_ann = &remod;
  }
  auto text = attend(text_att_, att_ann->h, att_ann->mask, s_mid, norm_);
  if (d_visual_ > 0 && !remodulate_)
    v_ctx = visual_attend_decoder(visual_att_, *visual, s_mid, norm_).context;

  auto s_new = maybe_dropout(rec2_.step(text.context, s_mid), ctx.dropout.cgru_out, ctx);

  DecoderStep out;
  out.state.s = s_new;
  out.state.step = prev.step + 1;
  out.text_weights = text.weights;
  out.text_context = text.context;
  out.visual_context = v_ctx;
  out.logits = output_logits(y_emb, s_new, text.context,
                             (d_visual_ > 0 && !remodulate_) ? v_ctx : nullptr, ctx);
  return out;
}

// ---------------------------------------------------------------------------
// Beam search

namespace {

double hyp_score(const Hypothesis& h, double alpha) {
  if (alpha <= 0.0) return h.log_prob;
  double len = static_cast<double>(std::max<std::size_t>(1, h.tokens.size()));
  return h.log_prob / std::pow(len, alpha);
}

// Total order: higher score first, then lexicographically smaller tokens,
// then earlier finish (unfinished counts as latest).
bool hyp_better(const Hypothesis& a, const Hypothesis& b, double alpha) {
  double sa = hyp_score(a, alpha), sb = hyp_score(b, alpha);
  if (sa != sb) return sa > sb;
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  int fa = a.finished ? a.finish_step : INT_MAX;
  int fb = b.finished ? b.finish_step : INT_MAX;
  return fa < fb;
}

}  // namespace

Hypothesis beam_search(const Decoder& dec, const AnnotationSequence& ann,
                       const FeatureStack* visual, int beam_width, int max_len,
                       int end_token, double length_penalty) {
  if (beam_width < 1) throw ParamError("beam search: width must be at least 1");
  if (max_len < 1) throw ParamError("beam search: max length must be at least 1");
  if (end_token < 0 || end_token >= dec.vocab_size())
    throw VocabError("beam search: end token outside the vocabulary");

  RunContext rc = RunContext::inference();
  Hypothesis root;
  root.state = dec.init_state(ann);
  std::vector<Hypothesis> active = {root};
  std::optional<Hypothesis> best_finished;

  for (int t = 1; t <= max_len && !active.empty(); ++t) {
    std::vector<Hypothesis> expanded;
    expanded.reserve(active.size() * static_cast<std::size_t>(dec.vocab_size()));
    for (const auto& h : active) {
      int y_prev = h.tokens.empty() ? tok::kStart : h.tokens.back();
      auto st = dec.step(h.state, y_prev, ann, visual, rc);
      auto lp = log_softmax_values(*st.logits);
      for (int v = 0; v < dec.vocab_size(); ++v) {
        if (v == tok::kPad || v == tok::kStart) continue;
        Hypothesis nh;
        nh.tokens = h.tokens;
        nh.log_prob = h.log_prob + lp[v];
        nh.state = st.state;
        if (v == end_token) {
          nh.finished = true;
          nh.finish_step = t;
        } else {
          nh.tokens.push_back(v);
        }
        expanded.push_back(std::move(nh));
      }
    }
    // Finished and unfinished candidates compete for the same slots; a
    // finished one retires and shrinks the surviving beam (width 1 therefore
    // reproduces greedy decoding exactly).
    std::stable_sort(expanded.begin(), expanded.end(),
                     [length_penalty](const Hypothesis& a, const Hypothesis& b) {
                       return hyp_better(a, b, length_penalty);
                     });
    std::vector<Hypothesis> next;
    int taken = 0;
    for (auto& nh : expanded) {
      if (taken >= beam_width) break;
      ++taken;
      if (nh.finished) {
        if (!best_finished || hyp_better(nh, *best_finished, length_penalty))
          best_finished = std::move(nh);
      } else {
        next.push_back(std::move(nh));
      }
    }
    active = std::move(next);
  }

  // Survivors cut at max_len compete with the retired finished hypotheses.
  std::optional<Hypothesis> best = best_finished;
  for (const auto& h : active)
    if (!best || hyp_better(h, *best, length_penalty)) best = h;
  if (!best) throw EmptySupportError("beam search: no hypotheses produced");
  return *best;
}

}  // namespace mmt
