#include "mmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

namespace mmt {

namespace {

Tape* g_tape = nullptr;
bool g_fault_injection = false;

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void ensure_finite(const Tensor& t, const char* op) {
  for (double v : t.value) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite value in output");
    }
  }
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

// Stable logistic; exact 1.0 / 0.0 in the saturated tails.
double sigmoid_scalar(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  std::size_t n = shape_numel(shape);
  value.assign(n, store_round(fill));
  grad.assign(n, 0.0);
}

TensorPtr Tensor::make(std::vector<int> shape, double fill) {
  return std::make_shared<Tensor>(std::move(shape), fill);
}

TensorPtr Tensor::scalar(double v) { return make({1}, v); }

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->value = std::move(values);
  for (double& v : t->value) v = store_round(v);
  t->grad.assign(t->value.size(), 0.0);
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw ShapeError("dim: axis out of range");
  return shape[i];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape));
  return value[0];
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

void Tape::backward(const TensorPtr& loss) {
  if (loss->size() != 1) throw ShapeError("backward: loss must be scalar");
  loss->grad[0] += 1.0;
  run_reverse();
}

void Tape::run_reverse() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::clear() { nodes_.clear(); }

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }

void set_backward_fault_injection(bool on) { g_fault_injection = on; }
bool backward_fault_injection() { return g_fault_injection; }

namespace {

bool track_grad(std::initializer_list<const TensorPtr*> ins) {
  if (!g_tape) return false;
  for (const TensorPtr* t : ins) {
    if (*t && (*t)->requires_grad) return true;
  }
  return false;
}

void finish(const TensorPtr& out, bool track, std::function<void()> bw, const char* op) {
  ensure_finite(*out, op);
  out->requires_grad = track;
  if (track) g_tape->record(std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  require(a->rank() == 2 && b->rank() == 2, "matmul", "expects rank-2 inputs");
  require(a->shape[1] == b->shape[0], "matmul",
          "inner dims " + shape_str(a->shape) + " x " + shape_str(b->shape));
  int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = Tensor::make({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a->value[i * k + p] * b->value[p * n + j];
      out->value[i * n + j] = store_round(acc);
    }
  }
  bool track = track_grad({&a, &b});
  finish(out, track, [a, b, out, m, k, n]() {
    double flip = backward_fault_injection() ? -1.0 : 1.0;
    if (a->requires_grad) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += out->grad[i * n + j] * b->value[p * n + j];
          a->grad[i * k + p] += flip * acc;
        }
    }
    if (b->requires_grad) {
      for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += a->value[i * k + p] * out->grad[i * n + j];
          b->grad[p * n + j] += acc;
        }
    }
  }, "matmul");
  return out;
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  require(a->rank() == 2 && b->rank() == 2, "matmul_nt", "expects rank-2 inputs");
  require(a->shape[1] == b->shape[1], "matmul_nt",
          "inner dims " + shape_str(a->shape) + " x " + shape_str(b->shape) + "^T");
  int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  auto out = Tensor::make({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a->value[i * k + p] * b->value[j * k + p];
      out->value[i * n + j] = store_round(acc);
    }
  }
  bool track = track_grad({&a, &b});
  finish(out, track, [a, b, out, m, k, n]() {
    if (a->requires_grad) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += out->grad[i * n + j] * b->value[j * k + p];
          a->grad[i * k + p] += acc;
        }
    }
    if (b->requires_grad) {
      for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += out->grad[i * n + j] * a->value[i * k + p];
          b->grad[j * k + p] += acc;
        }
    }
  }, "matmul_nt");
  return out;
}

TensorPtr matvec(const TensorPtr& a, const TensorPtr& x) {
  require(a->rank() == 2 && x->rank() == 1, "matvec", "expects matrix and vector");
  require(a->shape[1] == x->shape[0], "matvec",
          "inner dims " + shape_str(a->shape) + " x " + shape_str(x->shape));
  int m = a->shape[0], k = a->shape[1];
  auto out = Tensor::make({m});
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int p = 0; p < k; ++p) acc += a->value[i * k + p] * x->value[p];
    out->value[i] = store_round(acc);
  }
  bool track = track_grad({&a, &x});
  finish(out, track, [a, x, out, m, k]() {
    double flip = backward_fault_injection() ? -1.0 : 1.0;
    if (a->requires_grad) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p)
          a->grad[i * k + p] += flip * out->grad[i] * x->value[p];
    }
    if (x->requires_grad) {
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i) acc += a->value[i * k + p] * out->grad[i];
        x->grad[p] += acc;
      }
    }
  }, "matvec");
  return out;
}

namespace {

enum class BinKind { kSame, kLastAxis };

BinKind bin_kind(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape == b->shape) return BinKind::kSame;
  if (b->rank() == 1 && a->rank() >= 1 && a->shape.back() == b->shape[0]) {
    return BinKind::kLastAxis;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a->shape) + " vs " +
                   shape_str(b->shape));
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  BinKind kind = bin_kind(a, b, "add");
  auto out = Tensor::make(a->shape);
  std::size_t n = a->size();
  if (kind == BinKind::kSame) {
    for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(a->value[i] + b->value[i]);
  } else {
    std::size_t c = b->size();
    for (std::size_t i = 0; i < n; ++i)
      out->value[i] = store_round(a->value[i] + b->value[i % c]);
  }
  bool track = track_grad({&a, &b});
  finish(out, track, [a, b, out, kind, n]() {
    if (a->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
    }
    if (b->requires_grad) {
      if (kind == BinKind::kSame) {
        for (std::size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
      } else {
        std::size_t c = b->size();
        for (std::size_t i = 0; i < n; ++i) b->grad[i % c] += out->grad[i];
      }
    }
  }, "add");
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  BinKind kind = bin_kind(a, b, "mul");
  auto out = Tensor::make(a->shape);
  std::size_t n = a->size();
  if (kind == BinKind::kSame) {
    for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(a->value[i] * b->value[i]);
  } else {
    std::size_t c = b->size();
    for (std::size_t i = 0; i < n; ++i)
      out->value[i] = store_round(a->value[i] * b->value[i % c]);
  }
  bool track = track_grad({&a, &b});
  finish(out, track, [a, b, out, kind, n]() {
    std::size_t c = b->size();
    if (a->requires_grad) {
      if (kind == BinKind::kSame) {
        for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->value[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->value[i % c];
      }
    }
    if (b->requires_grad) {
      if (kind == BinKind::kSame) {
        for (std::size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->value[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) b->grad[i % c] += out->grad[i] * a->value[i];
      }
    }
  }, "mul");
  return out;
}

TensorPtr affine(const TensorPtr& x, double k, double b) {
  auto out = Tensor::make(x->shape);
  std::size_t n = x->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(k * x->value[i] + b);
  bool track = track_grad({&x});
  finish(out, track, [x, out, k, n]() {
    if (x->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) x->grad[i] += k * out->grad[i];
    }
  }, "affine");
  return out;
}

TensorPtr add_n(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw EmptySupportError("add_n: empty input list");
  for (const auto& x : xs) {
    require(x->shape == xs[0]->shape, "add_n", "all inputs must share a shape");
  }
  auto out = Tensor::make(xs[0]->shape);
  std::size_t n = out->size();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const auto& x : xs) acc += x->value[i];
    out->value[i] = store_round(acc);
  }
  bool track = false;
  for (const auto& x : xs) track = track || (g_tape && x->requires_grad);
  finish(out, track, [xs, out, n]() {
    for (const auto& x : xs) {
      if (!x->requires_grad) continue;
      for (std::size_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
    }
  }, "add_n");
  return out;
}

TensorPtr tanh(const TensorPtr& x) {
  auto out = Tensor::make(x->shape);
  std::size_t n = x->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(std::tanh(x->value[i]));
  bool track = track_grad({&x});
  finish(out, track, [x, out, n]() {
    if (x->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) {
        double t = out->value[i];
        x->grad[i] += (1.0 - t * t) * out->grad[i];
      }
    }
  }, "tanh");
  return out;
}

TensorPtr sigmoid(const TensorPtr& x) {
  auto out = Tensor::make(x->shape);
  std::size_t n = x->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(sigmoid_scalar(x->value[i]));
  bool track = track_grad({&x});
  finish(out, track, [x, out, n]() {
    if (x->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = out->value[i];
        x->grad[i] += s * (1.0 - s) * out->grad[i];
      }
    }
  }, "sigmoid");
  return out;
}

TensorPtr relu(const TensorPtr& x) {
  auto out = Tensor::make(x->shape);
  std::size_t n = x->size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
  bool track = track_grad({&x});
  finish(out, track, [x, out, n]() {
    if (x->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) {
        if (x->value[i] > 0.0) x->grad[i] += out->grad[i];
      }
    }
  }, "relu");
  return out;
}

double stable_sum(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  double acc = 0.0;
  for (double v : xs) acc += v;
  return acc;
}

TensorPtr softmax_masked(const TensorPtr& scores, const std::vector<int>& mask) {
  require(scores->rank() == 1, "softmax_masked", "expects a score vector");
  std::size_t n = scores->size();
  if (mask.size() != n) {
    throw ShapeError("softmax_masked: mask size " + std::to_string(mask.size()) +
                     " vs scores " + std::to_string(n));
  }
  double mx = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (!any || scores->value[i] > mx) mx = scores->value[i];
    any = true;
  }
  if (!any) throw EmptySupportError("softmax_masked: all positions masked");
  auto out = Tensor::make(scores->shape);
  std::vector<double> exps;
  exps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      out->value[i] = std::exp(scores->value[i] - mx);
      exps.push_back(out->value[i]);
    } else {
      out->value[i] = 0.0;
    }
  }
  double z = stable_sum(std::move(exps));
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) out->value[i] = store_round(out->value[i] / z);
  }
  bool track = track_grad({&scores});
  std::vector<int> m = mask;
  finish(out, track, [scores, out, m, n]() {
    if (!scores->requires_grad) return;
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (m[i]) dot += out->value[i] * out->grad[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (m[i]) scores->grad[i] += out->value[i] * (out->grad[i] - dot);
    }
  }, "softmax_masked");
  return out;
}

TensorPtr softmax(const TensorPtr& scores) {
  return softmax_masked(scores, std::vector<int>(scores->size(), 1));
}

namespace {

struct ConvDims {
  int out_h, out_w, pad_top, pad_left;
};

ConvDims conv_dims(int h, int w, int kh, int kw, int stride, Padding padding, const char* op) {
  if (stride < 1) throw ParamError(std::string(op) + ": stride must be >= 1");
  ConvDims d{};
  if (padding == Padding::kValid) {
    if (kh > h || kw > w) {
      throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" +
                       std::to_string(kw) + " larger than input " + std::to_string(h) + "x" +
                       std::to_string(w));
    }
    d.out_h = (h - kh) / stride + 1;
    d.out_w = (w - kw) / stride + 1;
    d.pad_top = d.pad_left = 0;
  } else {
    d.out_h = (h + stride - 1) / stride;
    d.out_w = (w + stride - 1) / stride;
    int pad_h = std::max((d.out_h - 1) * stride + kh - h, 0);
    int pad_w = std::max((d.out_w - 1) * stride + kw - w, 0);
    d.pad_top = pad_h / 2;
    d.pad_left = pad_w / 2;
  }
  return d;
}

}  // namespace

TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel, int stride, Padding padding) {
  require(input->rank() == 4, "conv2d", "input must be [B,H,W,C]");
  require(kernel->rank() == 4, "conv2d", "kernel must be [kh,kw,Cin,Cout]");
  int B = input->shape[0], H = input->shape[1], W = input->shape[2], Ci = input->shape[3];
  int kh = kernel->shape[0], kw = kernel->shape[1], kci = kernel->shape[2],
      co = kernel->shape[3];
  require(kci == Ci, "conv2d", "kernel in-channels " + std::to_string(kci) + " vs input " +
                                   std::to_string(Ci));
  ConvDims d = conv_dims(H, W, kh, kw, stride, padding, "conv2d");
  auto out = Tensor::make({B, d.out_h, d.out_w, co});
  const double* in = input->value.data();
  const double* ker = kernel->value.data();
  double* ov = out->value.data();
  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < d.out_h; ++oy) {
      for (int ox = 0; ox < d.out_w; ++ox) {
        double* orow = ov + ((static_cast<std::size_t>(b) * d.out_h + oy) * d.out_w + ox) * co;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - d.pad_top;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - d.pad_left;
            if (ix < 0 || ix >= W) continue;
            const double* irow = in + ((static_cast<std::size_t>(b) * H + iy) * W + ix) * Ci;
            const double* krow = ker + (static_cast<std::size_t>(ky) * kw + kx) * Ci * co;
            for (int ci = 0; ci < Ci; ++ci) {
              double xv = irow[ci];
              const double* kc = krow + ci * co;
              for (int c = 0; c < co; ++c) orow[c] += xv * kc[c];
            }
          }
        }
      }
    }
  }
  for (double& v : out->value) v = store_round(v);
  bool track = track_grad({&input, &kernel});
  finish(out, track, [input, kernel, out, B, H, W, Ci, kh, kw, co, stride, d]() {
    const double* ker = kernel->value.data();
    const double* in = input->value.data();
    const double* og = out->grad.data();
    bool din = input->requires_grad;
    bool dker = kernel->requires_grad;
    for (int b = 0; b < B; ++b) {
      for (int oy = 0; oy < d.out_h; ++oy) {
        for (int ox = 0; ox < d.out_w; ++ox) {
          const double* grow =
              og + ((static_cast<std::size_t>(b) * d.out_h + oy) * d.out_w + ox) * co;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride + ky - d.pad_top;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride + kx - d.pad_left;
              if (ix < 0 || ix >= W) continue;
              std::size_t ibase = ((static_cast<std::size_t>(b) * H + iy) * W + ix) * Ci;
              std::size_t kbase = (static_cast<std::size_t>(ky) * kw + kx) * Ci * co;
              for (int ci = 0; ci < Ci; ++ci) {
                const double* kc = ker + kbase + ci * co;
                if (din) {
                  double acc = 0.0;
                  for (int c = 0; c < co; ++c) acc += grow[c] * kc[c];
                  input->grad[ibase + ci] += acc;
                }
                if (dker) {
                  double xv = in[ibase + ci];
                  double* kg = kernel->grad.data() + kbase + ci * co;
                  for (int c = 0; c < co; ++c) kg[c] += xv * grow[c];
                }
              }
            }
          }
        }
      }
    }
  }, "conv2d");
  return out;
}

TensorPtr max_pool2d(const TensorPtr& input, int k, int stride, Padding padding) {
  require(input->rank() == 4, "max_pool2d", "input must be [B,H,W,C]");
  int B = input->shape[0], H = input->shape[1], W = input->shape[2], C = input->shape[3];
  ConvDims d = conv_dims(H, W, k, k, stride, padding, "max_pool2d");
  auto out = Tensor::make({B, d.out_h, d.out_w, C});
  std::vector<std::size_t> arg(out->size());
  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < d.out_h; ++oy) {
      for (int ox = 0; ox < d.out_w; ++ox) {
        for (int c = 0; c < C; ++c) {
          double best = 0.0;
          std::size_t best_idx = 0;
          bool any = false;
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride + ky - d.pad_top;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride + kx - d.pad_left;
              if (ix < 0 || ix >= W) continue;
              std::size_t idx = ((static_cast<std::size_t>(b) * H + iy) * W + ix) * C + c;
              if (!any || input->value[idx] > best) {
                best = input->value[idx];
                best_idx = idx;
                any = true;
              }
            }
          }
          std::size_t oidx =
              ((static_cast<std::size_t>(b) * d.out_h + oy) * d.out_w + ox) * C + c;
          out->value[oidx] = best;  // window always overlaps input for same/valid pads
          arg[oidx] = best_idx;
        }
      }
    }
  }
  bool track = track_grad({&input});
  finish(out, track, [input, out, arg]() {
    if (!input->requires_grad) return;
    for (std::size_t i = 0; i < out->size(); ++i) input->grad[arg[i]] += out->grad[i];
  }, "max_pool2d");
  return out;
}

TensorPtr global_max_pool(const TensorPtr& input) {
  require(input->rank() == 4, "global_max_pool", "input must be [B,H,W,C]");
  int B = input->shape[0], H = input->shape[1], W = input->shape[2], C = input->shape[3];
  require(H >= 1 && W >= 1, "global_max_pool", "empty spatial extent");
  auto out = Tensor::make({B, C});
  std::vector<std::size_t> arg(out->size());
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      std::size_t best_idx = (static_cast<std::size_t>(b) * H * W) * C + c;
      double best = input->value[best_idx];
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          std::size_t idx = ((static_cast<std::size_t>(b) * H + y) * W + x) * C + c;
          if (input->value[idx] > best) {  // ties keep the first (scan order)
            best = input->value[idx];
            best_idx = idx;
          }
        }
      }
      out->value[b * C + c] = best;
      arg[b * C + c] = best_idx;
    }
  }
  bool track = track_grad({&input});
  finish(out, track, [input, out, arg]() {
    if (!input->requires_grad) return;
    for (std::size_t i = 0; i < out->size(); ++i) input->grad[arg[i]] += out->grad[i];
  }, "global_max_pool");
  return out;
}

TensorPtr concat(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw EmptySupportError("concat: empty input list");
  int total = 0;
  for (const auto& x : xs) {
    require(x->rank() == 1, "concat", "expects rank-1 tensors");
    total += x->shape[0];
  }
  auto out = Tensor::make({total});
  int off = 0;
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < x->size(); ++i) out->value[off + i] = x->value[i];
    off += static_cast<int>(x->size());
  }
  bool track = false;
  for (const auto& x : xs) track = track || (g_tape && x->requires_grad);
  finish(out, track, [xs, out]() {
    int off = 0;
    for (const auto& x : xs) {
      if (x->requires_grad) {
        for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[off + i];
      }
      off += static_cast<int>(x->size());
    }
  }, "concat");
  return out;
}

TensorPtr row(const TensorPtr& m, int i) {
  require(m->rank() == 2, "row", "expects a matrix");
  if (i < 0 || i >= m->shape[0]) throw ShapeError("row: index out of range");
  int c = m->shape[1];
  auto out = Tensor::make({c});
  for (int j = 0; j < c; ++j) out->value[j] = m->value[static_cast<std::size_t>(i) * c + j];
  bool track = track_grad({&m});
  finish(out, track, [m, out, i, c]() {
    if (!m->requires_grad) return;
    for (int j = 0; j < c; ++j) m->grad[static_cast<std::size_t>(i) * c + j] += out->grad[j];
  }, "row");
  return out;
}

TensorPtr stack_rows(const std::vector<TensorPtr>& rows) {
  if (rows.empty()) throw EmptySupportError("stack_rows: empty input list");
  int c = rows[0]->shape[0];
  for (const auto& r : rows) {
    require(r->rank() == 1 && r->shape[0] == c, "stack_rows", "rows must share a length");
  }
  int n = static_cast<int>(rows.size());
  auto out = Tensor::make({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out->value[static_cast<std::size_t>(i) * c + j] = rows[i]->value[j];
  bool track = false;
  for (const auto& r : rows) track = track || (g_tape && r->requires_grad);
  finish(out, track, [rows, out, n, c]() {
    for (int i = 0; i < n; ++i) {
      if (!rows[i]->requires_grad) continue;
      for (int j = 0; j < c; ++j) rows[i]->grad[j] += out->grad[static_cast<std::size_t>(i) * c + j];
    }
  }, "stack_rows");
  return out;
}

TensorPtr slice_cols(const TensorPtr& m, int c0, int c1) {
  require(m->rank() == 2, "slice_cols", "expects a matrix");
  if (c0 < 0 || c1 > m->shape[1] || c0 >= c1) throw ShapeError("slice_cols: bad column range");
  int r = m->shape[0], c = m->shape[1], w = c1 - c0;
  auto out = Tensor::make({r, w});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      out->value[static_cast<std::size_t>(i) * w + j] =
          m->value[static_cast<std::size_t>(i) * c + c0 + j];
  bool track = track_grad({&m});
  finish(out, track, [m, out, r, c, w, c0]() {
    if (!m->requires_grad) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        m->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
            out->grad[static_cast<std::size_t>(i) * w + j];
  }, "slice_cols");
  return out;
}

TensorPtr tile_rows(const TensorPtr& v, int n) {
  require(v->rank() == 1, "tile_rows", "expects a vector");
  if (n < 1) throw ParamError("tile_rows: n must be >= 1");
  int c = v->shape[0];
  auto out = Tensor::make({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out->value[static_cast<std::size_t>(i) * c + j] = v->value[j];
  bool track = track_grad({&v});
  finish(out, track, [v, out, n, c]() {
    if (!v->requires_grad) return;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) v->grad[j] += out->grad[static_cast<std::size_t>(i) * c + j];
  }, "tile_rows");
  return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids) {
  require(table->rank() == 2, "embedding_rows", "table must be [V,d]");
  int v = table->shape[0], d = table->shape[1];
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw VocabError("embedding_rows: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(v) + ")");
    }
  }
  int m = static_cast<int>(ids.size());
  auto out = Tensor::make({m, d});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      out->value[static_cast<std::size_t>(i) * d + j] =
          table->value[static_cast<std::size_t>(ids[i]) * d + j];
  bool track = track_grad({&table});
  std::vector<int> ids_copy = ids;
  finish(out, track, [table, out, ids_copy, d]() {
    if (!table->requires_grad) return;
    for (std::size_t i = 0; i < ids_copy.size(); ++i)
      for (int j = 0; j < d; ++j)
        table->grad[static_cast<std::size_t>(ids_copy[i]) * d + j] += out->grad[i * d + j];
  }, "embedding_rows");
  return out;
}

TensorPtr masked_mean_rows(const TensorPtr& m, const std::vector<int>& mask) {
  require(m->rank() == 2, "masked_mean_rows", "expects a matrix");
  int r = m->shape[0], c = m->shape[1];
  if (static_cast<int>(mask.size()) != r) {
    throw ShapeError("masked_mean_rows: mask size vs rows");
  }
  int count = 0;
  for (int v : mask) count += (v != 0);
  if (count == 0) throw EmptySupportError("masked_mean_rows: all rows masked");
  auto out = Tensor::make({c});
  std::vector<double> col;
  col.reserve(count);
  for (int j = 0; j < c; ++j) {
    col.clear();
    for (int i = 0; i < r; ++i) {
      if (mask[i]) col.push_back(m->value[static_cast<std::size_t>(i) * c + j]);
    }
    out->value[j] = store_round(stable_sum(col) / count);
  }
  bool track = track_grad({&m});
  std::vector<int> mk = mask;
  finish(out, track, [m, out, mk, r, c, count]() {
    if (!m->requires_grad) return;
    for (int i = 0; i < r; ++i) {
      if (!mk[i]) continue;
      for (int j = 0; j < c; ++j)
        m->grad[static_cast<std::size_t>(i) * c + j] += out->grad[j] / count;
    }
  }, "masked_mean_rows");
  return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
  require(x->rank() == 1, "layer_norm", "expects a vector");
  int d = x->shape[0];
  if (d < 2) throw ShapeError("layer_norm: needs at least 2 elements");
  require(gain->shape == x->shape && bias->shape == x->shape, "layer_norm",
          "gain/bias must match x");
  double m = 0.0;
  for (double v : x->value) m += v;
  m /= d;
  double var = 0.0;
  for (double v : x->value) var += (v - m) * (v - m);
  var /= d;
  double inv = 1.0 / std::sqrt(var + eps);
  auto out = Tensor::make({d});
  std::vector<double> xhat(d);
  for (int i = 0; i < d; ++i) {
    xhat[i] = (x->value[i] - m) * inv;
    out->value[i] = store_round(xhat[i] * gain->value[i] + bias->value[i]);
  }
  bool track = track_grad({&x, &gain, &bias});
  finish(out, track, [x, gain, bias, out, xhat, inv, d]() {
    std::vector<double> dxhat(d);
    for (int i = 0; i < d; ++i) {
      dxhat[i] = out->grad[i] * gain->value[i];
      if (gain->requires_grad) gain->grad[i] += out->grad[i] * xhat[i];
      if (bias->requires_grad) bias->grad[i] += out->grad[i];
    }
    if (x->requires_grad) {
      double mean_dx = 0.0, mean_dxx = 0.0;
      for (int i = 0; i < d; ++i) {
        mean_dx += dxhat[i];
        mean_dxx += dxhat[i] * xhat[i];
      }
      mean_dx /= d;
      mean_dxx /= d;
      for (int i = 0; i < d; ++i) {
        x->grad[i] += inv * (dxhat[i] - mean_dx - xhat[i] * mean_dxx);
      }
    }
  }, "layer_norm");
  return out;
}

TensorPtr sum(const TensorPtr& x) {
  auto out = Tensor::make({1});
  double acc = 0.0;
  for (double v : x->value) acc += v;
  out->value[0] = store_round(acc);
  bool track = track_grad({&x});
  finish(out, track, [x, out]() {
    if (!x->requires_grad) return;
    for (double& g : x->grad) g += out->grad[0];
  }, "sum");
  return out;
}

TensorPtr mean(const TensorPtr& x) {
  if (x->size() == 0) throw EmptySupportError("mean: empty tensor");
  return affine(sum(x), 1.0 / static_cast<double>(x->size()), 0.0);
}

TensorPtr nll(const TensorPtr& logits, int target) {
  require(logits->rank() == 1, "nll", "expects a logit vector");
  int v = logits->shape[0];
  if (target < 0 || target >= v) {
    throw VocabError("nll: target " + std::to_string(target) + " out of range [0," +
                     std::to_string(v) + ")");
  }
  double mx = logits->value[0];
  for (double z : logits->value) mx = std::max(mx, z);
  double z = 0.0;
  for (double l : logits->value) z += std::exp(l - mx);
  double logz = std::log(z) + mx;
  auto out = Tensor::make({1});
  out->value[0] = store_round(logz - logits->value[target]);
  bool track = track_grad({&logits});
  finish(out, track, [logits, out, target, mx, logz]() {
    if (!logits->requires_grad) return;
    double g = out->grad[0];
    for (std::size_t i = 0; i < logits->size(); ++i) {
      double p = std::exp(logits->value[i] - logz);
      double onehot = (static_cast<int>(i) == target) ? 1.0 : 0.0;
      logits->grad[i] += g * (p - onehot);
    }
  }, "nll");
  return out;
}

TensorPtr dropout(const TensorPtr& x, double keep, std::mt19937_64& rng) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ParamError("dropout: keep must be in (0,1]");
  if (keep == 1.0) return x;
  std::size_t n = x->size();
  std::vector<double> scale(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) scale[i] = (u(rng) < keep) ? 1.0 / keep : 0.0;
  auto out = Tensor::make(x->shape);
  for (std::size_t i = 0; i < n; ++i) out->value[i] = store_round(x->value[i] * scale[i]);
  bool track = track_grad({&x});
  finish(out, track, [x, out, scale, n]() {
    if (!x->requires_grad) return;
    for (std::size_t i = 0; i < n; ++i) x->grad[i] += out->grad[i] * scale[i];
  }, "dropout");
  return out;
}

TensorPtr detach(const TensorPtr& x) {
  auto out = Tensor::make(x->shape);
  out->value = x->value;
  out->requires_grad = false;
  return out;
}

TensorPtr attend_context(const TensorPtr& weights, const TensorPtr& keys) {
  require(weights->rank() == 1 && keys->rank() == 2, "attend_context",
          "expects weights [N] and keys [N,d]");
  int n = weights->shape[0];
  require(keys->shape[0] == n, "attend_context", "weights/keys length mismatch");
  int d = keys->shape[1];
  auto out = Tensor::make({d});
  std::vector<double> terms(n);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < n; ++i)
      terms[i] = weights->value[i] * keys->value[static_cast<std::size_t>(i) * d + j];
    out->value[j] = store_round(stable_sum(terms));
  }
  bool track = track_grad({&weights, &keys});
  finish(out, track, [weights, keys, out, n, d]() {
    if (weights->requires_grad) {
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j)
          acc += keys->value[static_cast<std::size_t>(i) * d + j] * out->grad[j];
        weights->grad[i] += acc;
      }
    }
    if (keys->requires_grad) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          keys->grad[static_cast<std::size_t>(i) * d + j] += weights->value[i] * out->grad[j];
    }
  }, "attend_context");
  return out;
}

TensorPtr example_grid(const TensorPtr& grid, int b) {
  require(grid->rank() == 4, "example_grid", "expects [B,h,w,C]");
  int B = grid->shape[0], h = grid->shape[1], w = grid->shape[2], c = grid->shape[3];
  if (b < 0 || b >= B) throw ShapeError("example_grid: batch index out of range");
  int l = h * w;
  auto out = Tensor::make({l, c});
  std::size_t base = static_cast<std::size_t>(b) * l * c;
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = grid->value[base + i];
  bool track = track_grad({&grid});
  finish(out, track, [grid, out, base]() {
    if (!grid->requires_grad) return;
    for (std::size_t i = 0; i < out->size(); ++i) grid->grad[base + i] += out->grad[i];
  }, "example_grid");
  return out;
}

std::vector<double> log_softmax_values(const Tensor& logits) {
  if (logits.rank() != 1) throw ShapeError("log_softmax_values: expects a vector");
  double mx = logits.value[0];
  for (double z : logits.value) mx = std::max(mx, z);
  double z = 0.0;
  for (double l : logits.value) z += std::exp(l - mx);
  double logz = std::log(z) + mx;
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits.value[i] - logz;
  return out;
}

}  // namespace mmt
