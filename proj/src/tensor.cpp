#include "utap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace utap {

namespace {

// C[M x N] (+)= A[M x K] * B[K x N]. Unrolled over k so the C row stays hot.
void mm_nn(const float* A, const float* B, float* C, int M, int K, int N,
           bool acc) {
  for (int i = 0; i < M; ++i) {
    float* c = C + static_cast<size_t>(i) * N;
    if (!acc) std::fill(c, c + N, 0.f);
    const float* a = A + static_cast<size_t>(i) * K;
    int k = 0;
    for (; k + 4 <= K; k += 4) {
      const float a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
      const float* b0 = B + static_cast<size_t>(k) * N;
      const float* b1 = b0 + N;
      const float* b2 = b1 + N;
      const float* b3 = b2 + N;
      for (int j = 0; j < N; ++j) {
        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; k < K; ++k) {
      const float av = a[k];
      const float* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[K x N] (+)= A[M x K]^T * B[M x N], as rank-1 updates over m.
void mm_tn(const float* A, const float* B, float* C, int M, int K, int N,
           bool acc) {
  if (!acc) std::fill(C, C + static_cast<size_t>(K) * N, 0.f);
  for (int m = 0; m < M; ++m) {
    const float* a = A + static_cast<size_t>(m) * K;
    const float* b = B + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      float* c = C + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

void transpose_into(const float* A, float* T, int M, int N) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j)
      T[static_cast<size_t>(j) * M + i] = A[static_cast<size_t>(i) * N + j];
}

// C[M x N] (+)= A[M x K] * B[N x K]^T via an explicit transpose of B; keeps
// the inner loops in the vector-friendly mm_nn form.
void mm_nt(const float* A, const float* B, float* C, int M, int K, int N,
           bool acc) {
  std::vector<float> bt(static_cast<size_t>(K) * N);
  transpose_into(B, bt.data(), N, K);
  mm_nn(A, bt.data(), C, M, K, N, acc);
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.shape.size() > 2 || t.shape.empty()) {
    throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " +
                                shape_str(t));
  }
}

void check_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) +
                                ": operands recorded on different tapes");
  }
}

// Adds g into the gradient buffer of `parent` if that parent wants gradients.
void accum(Tape& t, int parent, const Tensor& g) {
  if (!t.node_requires_grad(parent)) return;
  Tensor& buf = t.grad_buffer(parent);
  const size_t n = buf.data.size();
  for (size_t i = 0; i < n; ++i) buf.data[i] += g.data[i];
}

constexpr float kGeluC0 = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC1 = 0.044715f;
constexpr float kCosineEps = 1e-8f;
constexpr float kLayerNormEps = 1e-5f;

Tensor softmax_rows_value(const Tensor& x) {
  Tensor out = x;
  const int m = x.rows(), n = x.cols();
  for (int i = 0; i < m; ++i) {
    float* row = out.data.data() + static_cast<size_t>(i) * n;
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.f;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const float inv = 1.f / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
  }
  return out;
}

struct LayerNormStats {
  std::vector<float> inv_sigma;  // per row, 1/sqrt(var + eps)
};

Tensor layer_norm_value(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, LayerNormStats* stats) {
  const int m = x.rows(), n = x.cols();
  Tensor out = x;
  if (stats) stats->inv_sigma.resize(m);
  for (int i = 0; i < m; ++i) {
    float* row = out.data.data() + static_cast<size_t>(i) * n;
    float mean = 0.f;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<float>(n);
    float var = 0.f;
    for (int j = 0; j < n; ++j) {
      const float d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv = 1.f / std::sqrt(var + kLayerNormEps);
    if (stats) stats->inv_sigma[i] = inv;
    for (int j = 0; j < n; ++j) {
      row[j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
    }
  }
  return out;
}

float cross_entropy_row(const float* logits, int k, int label) {
  float mx = logits[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
  float sum = 0.f;
  for (int j = 0; j < k; ++j) sum += std::exp(logits[j] - mx);
  return (mx + std::log(sum)) - logits[label];
}

void softmax_into(const float* logits, int k, float* probs) {
  float mx = logits[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
  float sum = 0.f;
  for (int j = 0; j < k; ++j) {
    probs[j] = std::exp(logits[j] - mx);
    sum += probs[j];
  }
  const float inv = 1.f / sum;
  for (int j = 0; j < k; ++j) probs[j] *= inv;
}

struct CosineParts {
  float dot, nu, nv, denom, value;
};

CosineParts cosine_parts(const Tensor& u, const Tensor& v) {
  CosineParts p{};
  float du = 0.f, dv = 0.f, uv = 0.f;
  const size_t n = u.numel();
  for (size_t i = 0; i < n; ++i) {
    uv += u.data[i] * v.data[i];
    du += u.data[i] * u.data[i];
    dv += v.data[i] * v.data[i];
  }
  p.dot = uv;
  p.nu = std::sqrt(du);
  p.nv = std::sqrt(dv);
  p.denom = p.nu * p.nv + kCosineEps;
  p.value = p.dot / p.denom;
  return p;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)) {
  size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("Tensor: nonpositive extent");
    n *= static_cast<size_t>(e);
  }
  data.assign(n, fill);
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> d) {
  Tensor t;
  size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("Tensor: nonpositive extent");
    n *= static_cast<size_t>(e);
  }
  if (n != d.size()) {
    throw std::invalid_argument("Tensor: data length does not match shape");
  }
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

Tensor Tensor::uniform(std::vector<int> s, float lo, float hi, Rng& rng) {
  Tensor t(std::move(s), 0.f);
  for (float& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

bool Tensor::all_finite() const {
  for (float x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

int Tensor::rows() const {
  return shape.size() >= 2 ? shape[0] : 1;
}

int Tensor::cols() const {
  if (shape.empty()) return 0;
  return shape.size() >= 2 ? shape[1] : shape[0];
}

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) os << "x";
    os << t.shape[i];
  }
  os << "]";
  return os.str();
}

const Tensor& GradientMap::at(Var v) const {
  auto it = by_leaf.find(v.id);
  if (it == by_leaf.end()) {
    throw std::out_of_range("GradientMap: no gradient recorded for node " +
                            std::to_string(v.id));
  }
  return it->second;
}

// ---- Tape ------------------------------------------------------------------

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(std::vector<int> parents, Tensor value,
                 std::function<void(Tape&, int)> backward,
                 std::function<Tensor(const Tape&, const Node&)> forward) {
  Node n;
  n.parents = std::move(parents);
  n.value = std::move(value);
  for (int p : n.parents) {
    if (p < 0 || p >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("Tape: parent index out of order");
    }
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  n.backward = std::move(backward);
  n.forward = std::move(forward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
  if (grads_[id].data.empty()) {
    grads_[id] = Tensor::zeros(nodes_[id].value.shape);
  }
  return grads_[id];
}

GradientMap Tape::backward(Var loss) {
  if (loss.tape != this) {
    throw std::invalid_argument("backward: loss recorded on another tape");
  }
  if (nodes_[loss.id].value.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(nodes_[loss.id].value));
  }
  grads_.assign(nodes_.size(), Tensor{});
  grad_buffer(loss.id).data[0] = 1.f;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.is_leaf || !n.requires_grad || grads_[id].data.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
  GradientMap out;
  for (size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].is_leaf && nodes_[id].requires_grad) {
      if (grads_[id].data.empty()) {
        out.by_leaf[static_cast<int>(id)] =
            Tensor::zeros(nodes_[id].value.shape);
      } else {
        out.by_leaf[static_cast<int>(id)] = std::move(grads_[id]);
      }
    }
  }
  grads_.clear();
  return out;
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (!n.is_leaf && n.forward) n.value = n.forward(*this, n);
  }
}

bool Tape::node_requires_grad(int id) const { return nodes_[id].requires_grad; }

// ---- Elementwise and structural ops -----------------------------------------

namespace {

// Shared recorder for elementwise binary ops with per-element grads that are
// simple functions of the parents' values.
template <typename FwdFn>
Var binary_same_shape(Var a, Var b, const char* name, FwdFn fn,
                      std::function<void(Tape&, int, int, int)> bwd) {
  check_same_tape(a, b, name);
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  if (!va.same_shape(vb)) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " +
                                shape_str(va) + " vs " + shape_str(vb));
  }
  auto fwd = [fn](const Tape& tp, const Tape::Node& n) {
    const Tensor& x = tp.value(n.parents[0]);
    const Tensor& y = tp.value(n.parents[1]);
    Tensor out = x;
    for (size_t i = 0; i < out.data.size(); ++i) {
      out.data[i] = fn(x.data[i], y.data[i]);
    }
    return out;
  };
  Tensor value = va;
  for (size_t i = 0; i < value.data.size(); ++i) {
    value.data[i] = fn(va.data[i], vb.data[i]);
  }
  auto backward = [bwd, pa = a.id, pb = b.id](Tape& tp, int self) {
    bwd(tp, self, pa, pb);
  };
  return t.record({a.id, b.id}, std::move(value), std::move(backward),
                  std::move(fwd));
}

}  // namespace

Var add(Var a, Var b) {
  return binary_same_shape(
      a, b, "add", [](float x, float y) { return x + y; },
      [](Tape& t, int self, int pa, int pb) {
        const Tensor& g = t.grad_buffer(self);
        accum(t, pa, g);
        accum(t, pb, g);
      });
}

Var sub(Var a, Var b) {
  return binary_same_shape(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](Tape& t, int self, int pa, int pb) {
        const Tensor& g = t.grad_buffer(self);
        accum(t, pa, g);
        if (t.node_requires_grad(pb)) {
          Tensor neg = g;
          for (float& x : neg.data) x = -x;
          accum(t, pb, neg);
        }
      });
}

Var mul(Var a, Var b) {
  return binary_same_shape(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](Tape& t, int self, int pa, int pb) {
        const Tensor& g = t.grad_buffer(self);
        if (t.node_requires_grad(pa)) {
          Tensor da = g;
          const Tensor& vb = t.value(pb);
          for (size_t i = 0; i < da.data.size(); ++i) da.data[i] *= vb.data[i];
          accum(t, pa, da);
        }
        if (t.node_requires_grad(pb)) {
          Tensor db = g;
          const Tensor& va = t.value(pa);
          for (size_t i = 0; i < db.data.size(); ++i) db.data[i] *= va.data[i];
          accum(t, pb, db);
        }
      });
}

Var scale(Var a, float c) {
  Tape& t = *a.tape;
  auto fwd = [c](const Tape& tp, const Tape::Node& n) {
    Tensor out = tp.value(n.parents[0]);
    for (float& x : out.data) x *= c;
    return out;
  };
  Tensor value = t.value(a);
  for (float& x : value.data) x *= c;
  auto bwd = [c, pa = a.id](Tape& tp, int self) {
    Tensor g = tp.grad_buffer(self);
    for (float& x : g.data) x *= c;
    accum(tp, pa, g);
  };
  return t.record({a.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw std::invalid_argument("matmul: inner extents differ, " +
                                shape_str(a) + " vs " + shape_str(b));
  }
  Tensor out = Tensor::zeros({m, n});
  mm_nn(a.data.data(), b.data.data(), out.data.data(), m, k, n, false);
  return out;
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  check_rank2(t.value(a), "matmul");
  check_rank2(t.value(b), "matmul");
  Tensor value = matmul_value(t.value(a), t.value(b));
  auto fwd = [](const Tape& tp, const Tape::Node& n) {
    return matmul_value(tp.value(n.parents[0]), tp.value(n.parents[1]));
  };
  auto bwd = [pa = a.id, pb = b.id](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& va = tp.value(pa);
    const Tensor& vb = tp.value(pb);
    const int m = va.rows(), k = va.cols(), n = vb.cols();
    if (tp.node_requires_grad(pa)) {
      // dA += G * B^T
      mm_nt(g.data.data(), vb.data.data(), tp.grad_buffer(pa).data.data(), m,
            n, k, true);
    }
    if (tp.node_requires_grad(pb)) {
      // dB += A^T * G
      mm_tn(va.data.data(), g.data.data(), tp.grad_buffer(pb).data.data(), m,
            k, n, true);
    }
  };
  return t.record({a.id, b.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b, "matmul_nt");
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  check_rank2(va, "matmul_nt");
  check_rank2(vb, "matmul_nt");
  if (va.cols() != vb.cols()) {
    throw std::invalid_argument("matmul_nt: inner extents differ, " +
                                shape_str(va) + " vs " + shape_str(vb));
  }
  const int m = va.rows(), k = va.cols(), n = vb.rows();
  Tensor value = Tensor::zeros({m, n});
  mm_nt(va.data.data(), vb.data.data(), value.data.data(), m, k, n, false);
  auto fwd = [m, k, n](const Tape& tp, const Tape::Node& nd) {
    Tensor out = Tensor::zeros({m, n});
    mm_nt(tp.value(nd.parents[0]).data.data(),
          tp.value(nd.parents[1]).data.data(), out.data.data(), m, k, n,
          false);
    return out;
  };
  auto bwd = [pa = a.id, pb = b.id, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.node_requires_grad(pa)) {
      // dA += G * B
      mm_nn(g.data.data(), tp.value(pb).data.data(),
            tp.grad_buffer(pa).data.data(), m, n, k, true);
    }
    if (tp.node_requires_grad(pb)) {
      // dB += G^T * A
      mm_tn(g.data.data(), tp.value(pa).data.data(),
            tp.grad_buffer(pb).data.data(), m, n, k, true);
    }
  };
  return t.record({a.id, b.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  check_rank2(va, "transpose");
  const int m = va.rows(), n = va.cols();
  Tensor value = Tensor::zeros({n, m});
  transpose_into(va.data.data(), value.data.data(), m, n);
  auto fwd = [m, n](const Tape& tp, const Tape::Node& nd) {
    Tensor out = Tensor::zeros({n, m});
    transpose_into(tp.value(nd.parents[0]).data.data(), out.data.data(), m, n);
    return out;
  };
  auto bwd = [pa = a.id, m, n](Tape& tp, int self) {
    if (!tp.node_requires_grad(pa)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor gt = Tensor::zeros({m, n});
    transpose_into(g.data.data(), gt.data.data(), n, m);
    accum(tp, pa, gt);
  };
  return t.record({a.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var add_rowvec(Var m, Var v) {
  check_same_tape(m, v, "add_rowvec");
  Tape& t = *m.tape;
  const Tensor& vm = t.value(m);
  const Tensor& vv = t.value(v);
  if (vv.numel() != static_cast<size_t>(vm.cols())) {
    throw std::invalid_argument("add_rowvec: vector length " + shape_str(vv) +
                                " does not match row width of " +
                                shape_str(vm));
  }
  const int rows = vm.rows(), cols = vm.cols();
  auto compute = [rows, cols](const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (int i = 0; i < rows; ++i) {
      float* row = out.data.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) row[j] += b.data[j];
    }
    return out;
  };
  Tensor value = compute(vm, vv);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]), tp.value(nd.parents[1]));
  };
  auto bwd = [pm = m.id, pv = v.id, rows, cols](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    accum(tp, pm, g);
    if (tp.node_requires_grad(pv)) {
      Tensor dv = Tensor::zeros(tp.value(pv).shape);
      for (int i = 0; i < rows; ++i) {
        const float* row = g.data.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) dv.data[j] += row[j];
      }
      accum(tp, pv, dv);
    }
  };
  return t.record({m.id, v.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  check_rank2(t.value(x), "softmax_rows");
  Tensor value = softmax_rows_value(t.value(x));
  auto fwd = [](const Tape& tp, const Tape::Node& nd) {
    return softmax_rows_value(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& s = tp.value(self);
    const Tensor& g = tp.grad_buffer(self);
    const int m = s.rows(), n = s.cols();
    Tensor dx = Tensor::zeros(s.shape);
    for (int i = 0; i < m; ++i) {
      const float* srow = s.data.data() + static_cast<size_t>(i) * n;
      const float* grow = g.data.data() + static_cast<size_t>(i) * n;
      float dot = 0.f;
      for (int j = 0; j < n; ++j) dot += srow[j] * grow[j];
      float* drow = dx.data.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) drow[j] = srow[j] * (grow[j] - dot);
    }
    accum(tp, px, dx);
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var layer_norm(Var x, Var gain, Var bias) {
  check_same_tape(x, gain, "layer_norm");
  check_same_tape(x, bias, "layer_norm");
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  check_rank2(vx, "layer_norm");
  const int n = vx.cols();
  if (n < 2) {
    throw std::invalid_argument("layer_norm: row width must be >= 2");
  }
  if (t.value(gain).numel() != static_cast<size_t>(n) ||
      t.value(bias).numel() != static_cast<size_t>(n)) {
    throw std::invalid_argument("layer_norm: gain/bias length mismatch");
  }
  Tensor value = layer_norm_value(vx, t.value(gain), t.value(bias), nullptr);
  auto fwd = [](const Tape& tp, const Tape::Node& nd) {
    return layer_norm_value(tp.value(nd.parents[0]), tp.value(nd.parents[1]),
                            tp.value(nd.parents[2]), nullptr);
  };
  auto bwd = [px = x.id, pg = gain.id, pb = bias.id](Tape& tp, int self) {
    const Tensor& vx2 = tp.value(px);
    const Tensor& vgain = tp.value(pg);
    const Tensor& g = tp.grad_buffer(self);
    const int m = vx2.rows(), cols = vx2.cols();
    // Recompute the per-row normalized values and 1/sigma.
    Tensor xhat = Tensor::zeros(vx2.shape);
    std::vector<float> inv_sigma(m);
    for (int i = 0; i < m; ++i) {
      const float* row = vx2.data.data() + static_cast<size_t>(i) * cols;
      float mean = 0.f;
      for (int j = 0; j < cols; ++j) mean += row[j];
      mean /= static_cast<float>(cols);
      float var = 0.f;
      for (int j = 0; j < cols; ++j) {
        const float d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<float>(cols);
      inv_sigma[i] = 1.f / std::sqrt(var + kLayerNormEps);
      float* xrow = xhat.data.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) xrow[j] = (row[j] - mean) * inv_sigma[i];
    }
    if (tp.node_requires_grad(pb)) {
      Tensor db = Tensor::zeros(tp.value(pb).shape);
      for (int i = 0; i < m; ++i) {
        const float* grow = g.data.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) db.data[j] += grow[j];
      }
      accum(tp, pb, db);
    }
    if (tp.node_requires_grad(pg)) {
      Tensor dg = Tensor::zeros(tp.value(pg).shape);
      for (int i = 0; i < m; ++i) {
        const float* grow = g.data.data() + static_cast<size_t>(i) * cols;
        const float* xrow = xhat.data.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) dg.data[j] += grow[j] * xrow[j];
      }
      accum(tp, pg, dg);
    }
    if (tp.node_requires_grad(px)) {
      Tensor dx = Tensor::zeros(vx2.shape);
      for (int i = 0; i < m; ++i) {
        const float* grow = g.data.data() + static_cast<size_t>(i) * cols;
        const float* xrow = xhat.data.data() + static_cast<size_t>(i) * cols;
        float mean_dy = 0.f, mean_dyx = 0.f;
        for (int j = 0; j < cols; ++j) {
          const float dy = grow[j] * vgain.data[j];
          mean_dy += dy;
          mean_dyx += dy * xrow[j];
        }
        mean_dy /= static_cast<float>(cols);
        mean_dyx /= static_cast<float>(cols);
        float* drow = dx.data.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
          const float dy = grow[j] * vgain.data[j];
          drow[j] = inv_sigma[i] * (dy - mean_dy - xrow[j] * mean_dyx);
        }
      }
      accum(tp, px, dx);
    }
  };
  return t.record({x.id, gain.id, bias.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var gelu(Var x) {
  Tape& t = *x.tape;
  auto compute = [](const Tensor& in) {
    Tensor out = in;
    for (float& v : out.data) {
      const float u = kGeluC0 * (v + kGeluC1 * v * v * v);
      out.data[&v - out.data.data()] = 0.5f * v * (1.f + std::tanh(u));
    }
    return out;
  };
  Tensor value = compute(t.value(x));
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& vx = tp.value(px);
    const Tensor& g = tp.grad_buffer(self);
    Tensor dx = Tensor::zeros(vx.shape);
    for (size_t i = 0; i < vx.data.size(); ++i) {
      const float v = vx.data[i];
      const float u = kGeluC0 * (v + kGeluC1 * v * v * v);
      const float th = std::tanh(u);
      const float du = kGeluC0 * (1.f + 3.f * kGeluC1 * v * v);
      dx.data[i] = g.data[i] * (0.5f * (1.f + th) +
                                0.5f * v * (1.f - th * th) * du);
    }
    accum(tp, px, dx);
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var sum_all(Var x) {
  Tape& t = *x.tape;
  auto compute = [](const Tensor& in) {
    float s = 0.f;
    for (float v : in.data) s += v;
    return Tensor::scalar(s);
  };
  Tensor value = compute(t.value(x));
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const float g = tp.grad_buffer(self).data[0];
    Tensor dx = Tensor::full(tp.value(px).shape, g);
    accum(tp, px, dx);
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var mean_all(Var x) {
  Tape& t = *x.tape;
  const float inv = 1.f / static_cast<float>(t.value(x).numel());
  return scale(sum_all(x), inv);
}

Var slice_rows(Var x, int row0, int count) {
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  check_rank2(vx, "slice_rows");
  if (row0 < 0 || count <= 0 || row0 + count > vx.rows()) {
    throw std::invalid_argument("slice_rows: range out of bounds for " +
                                shape_str(vx));
  }
  const int cols = vx.cols();
  auto compute = [row0, count, cols](const Tensor& in) {
    Tensor out = Tensor::zeros({count, cols});
    std::memcpy(out.data.data(),
                in.data.data() + static_cast<size_t>(row0) * cols,
                static_cast<size_t>(count) * cols * sizeof(float));
    return out;
  };
  Tensor value = compute(vx);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id, row0, count, cols](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor& buf = tp.grad_buffer(px);
    for (int i = 0; i < count; ++i) {
      float* dst = buf.data.data() + static_cast<size_t>(row0 + i) * cols;
      const float* src = g.data.data() + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) dst[j] += src[j];
    }
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var slice_cols(Var x, int col0, int count) {
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  check_rank2(vx, "slice_cols");
  if (col0 < 0 || count <= 0 || col0 + count > vx.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds for " +
                                shape_str(vx));
  }
  const int rows = vx.rows(), cols = vx.cols();
  auto compute = [col0, count, rows, cols](const Tensor& in) {
    Tensor out = Tensor::zeros({rows, count});
    for (int i = 0; i < rows; ++i) {
      std::memcpy(out.data.data() + static_cast<size_t>(i) * count,
                  in.data.data() + static_cast<size_t>(i) * cols + col0,
                  static_cast<size_t>(count) * sizeof(float));
    }
    return out;
  };
  Tensor value = compute(vx);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id, col0, count, rows, cols](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor& buf = tp.grad_buffer(px);
    for (int i = 0; i < rows; ++i) {
      float* dst = buf.data.data() + static_cast<size_t>(i) * cols + col0;
      const float* src = g.data.data() + static_cast<size_t>(i) * count;
      for (int j = 0; j < count; ++j) dst[j] += src[j];
    }
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = *parts[0].tape;
  const int cols = t.value(parts[0]).cols();
  int total_rows = 0;
  std::vector<int> ids;
  std::vector<int> row_counts;
  for (Var p : parts) {
    check_same_tape(parts[0], p, "concat_rows");
    const Tensor& v = t.value(p);
    check_rank2(v, "concat_rows");
    if (v.cols() != cols) {
      throw std::invalid_argument("concat_rows: column mismatch");
    }
    ids.push_back(p.id);
    row_counts.push_back(v.rows());
    total_rows += v.rows();
  }
  auto compute = [cols, total_rows](const Tape& tp,
                                    const std::vector<int>& parents) {
    Tensor out = Tensor::zeros({total_rows, cols});
    size_t off = 0;
    for (int pid : parents) {
      const Tensor& v = tp.value(pid);
      std::memcpy(out.data.data() + off, v.data.data(),
                  v.data.size() * sizeof(float));
      off += v.data.size();
    }
    return out;
  };
  Tensor value = compute(t, ids);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp, nd.parents);
  };
  auto bwd = [ids, row_counts, cols](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    int row = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (tp.node_requires_grad(ids[k])) {
        Tensor& buf = tp.grad_buffer(ids[k]);
        const float* src = g.data.data() + static_cast<size_t>(row) * cols;
        for (size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += src[i];
      }
      row += row_counts[k];
    }
  };
  return t.record(std::move(ids), std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const int rows = t.value(parts[0]).rows();
  int total_cols = 0;
  std::vector<int> ids;
  std::vector<int> col_counts;
  for (Var p : parts) {
    check_same_tape(parts[0], p, "concat_cols");
    const Tensor& v = t.value(p);
    check_rank2(v, "concat_cols");
    if (v.rows() != rows) {
      throw std::invalid_argument("concat_cols: row mismatch");
    }
    ids.push_back(p.id);
    col_counts.push_back(v.cols());
    total_cols += v.cols();
  }
  auto compute = [rows, total_cols, col_counts](
                     const Tape& tp, const std::vector<int>& parents) {
    Tensor out = Tensor::zeros({rows, total_cols});
    int col = 0;
    for (size_t k = 0; k < parents.size(); ++k) {
      const Tensor& v = tp.value(parents[k]);
      for (int i = 0; i < rows; ++i) {
        std::memcpy(
            out.data.data() + static_cast<size_t>(i) * total_cols + col,
            v.data.data() + static_cast<size_t>(i) * col_counts[k],
            static_cast<size_t>(col_counts[k]) * sizeof(float));
      }
      col += col_counts[k];
    }
    return out;
  };
  Tensor value = compute(t, ids);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp, nd.parents);
  };
  auto bwd = [ids, col_counts, rows, total_cols](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    int col = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (tp.node_requires_grad(ids[k])) {
        Tensor& buf = tp.grad_buffer(ids[k]);
        for (int i = 0; i < rows; ++i) {
          const float* src =
              g.data.data() + static_cast<size_t>(i) * total_cols + col;
          float* dst = buf.data.data() + static_cast<size_t>(i) * col_counts[k];
          for (int j = 0; j < col_counts[k]; ++j) dst[j] += src[j];
        }
      }
      col += col_counts[k];
    }
  };
  return t.record(std::move(ids), std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var cosine_similarity(Var u, Var v) {
  check_same_tape(u, v, "cosine_similarity");
  Tape& t = *u.tape;
  if (t.value(u).numel() != t.value(v).numel()) {
    throw std::invalid_argument("cosine_similarity: length mismatch " +
                                shape_str(t.value(u)) + " vs " +
                                shape_str(t.value(v)));
  }
  auto compute = [](const Tensor& a, const Tensor& b) {
    return Tensor::scalar(cosine_parts(a, b).value);
  };
  Tensor value = compute(t.value(u), t.value(v));
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]), tp.value(nd.parents[1]));
  };
  auto bwd = [pu = u.id, pv = v.id](Tape& tp, int self) {
    const Tensor& a = tp.value(pu);
    const Tensor& b = tp.value(pv);
    const CosineParts p = cosine_parts(a, b);
    const float g = tp.grad_buffer(self).data[0];
    const size_t n = a.numel();
    if (tp.node_requires_grad(pu)) {
      Tensor da = Tensor::zeros(a.shape);
      const float unit = p.nu > 0.f ? p.dot * p.nv / (p.nu * p.denom * p.denom)
                                    : 0.f;
      for (size_t i = 0; i < n; ++i) {
        da.data[i] = g * (b.data[i] / p.denom - unit * a.data[i]);
      }
      accum(tp, pu, da);
    }
    if (tp.node_requires_grad(pv)) {
      Tensor db = Tensor::zeros(b.shape);
      const float unit = p.nv > 0.f ? p.dot * p.nu / (p.nv * p.denom * p.denom)
                                    : 0.f;
      for (size_t i = 0; i < n; ++i) {
        db.data[i] = g * (a.data[i] / p.denom - unit * b.data[i]);
      }
      accum(tp, pv, db);
    }
  };
  return t.record({u.id, v.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var cross_entropy_logits(Var logits, int label) {
  Tape& t = *logits.tape;
  const Tensor& vl = t.value(logits);
  const int k = static_cast<int>(vl.numel());
  if (label < 0 || label >= k) {
    throw std::invalid_argument("cross_entropy_logits: label " +
                                std::to_string(label) + " out of range [0," +
                                std::to_string(k) + ")");
  }
  auto compute = [label, k](const Tensor& in) {
    return Tensor::scalar(cross_entropy_row(in.data.data(), k, label));
  };
  Tensor value = compute(vl);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [pl = logits.id, label, k](Tape& tp, int self) {
    if (!tp.node_requires_grad(pl)) return;
    const Tensor& in = tp.value(pl);
    const float g = tp.grad_buffer(self).data[0];
    Tensor dx = Tensor::zeros(in.shape);
    softmax_into(in.data.data(), k, dx.data.data());
    dx.data[label] -= 1.f;
    for (float& x : dx.data) x *= g;
    accum(tp, pl, dx);
  };
  return t.record({logits.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var cross_entropy_rows(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Tensor& vl = t.value(logits);
  check_rank2(vl, "cross_entropy_rows");
  const int m = vl.rows(), k = vl.cols();
  if (static_cast<int>(labels.size()) != m) {
    throw std::invalid_argument("cross_entropy_rows: label count mismatch");
  }
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw std::invalid_argument("cross_entropy_rows: label " +
                                  std::to_string(l) + " out of range [0," +
                                  std::to_string(k) + ")");
    }
  }
  auto compute = [labels, m, k](const Tensor& in) {
    float total = 0.f;
    for (int i = 0; i < m; ++i) {
      total += cross_entropy_row(in.data.data() + static_cast<size_t>(i) * k,
                                 k, labels[i]);
    }
    return Tensor::scalar(total / static_cast<float>(m));
  };
  Tensor value = compute(vl);
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [pl = logits.id, labels, m, k](Tape& tp, int self) {
    if (!tp.node_requires_grad(pl)) return;
    const Tensor& in = tp.value(pl);
    const float g = tp.grad_buffer(self).data[0] / static_cast<float>(m);
    Tensor dx = Tensor::zeros(in.shape);
    for (int i = 0; i < m; ++i) {
      float* row = dx.data.data() + static_cast<size_t>(i) * k;
      softmax_into(in.data.data() + static_cast<size_t>(i) * k, k, row);
      row[labels[i]] -= 1.f;
      for (int j = 0; j < k; ++j) row[j] *= g;
    }
    accum(tp, pl, dx);
  };
  return t.record({logits.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

Var stop_gradient(Var x) {
  Tape& t = *x.tape;
  Tensor value = t.value(x);
  auto fwd = [](const Tape& tp, const Tape::Node& nd) {
    return tp.value(nd.parents[0]);
  };
  // No backward closure: the node reports requires_grad = false, so gradient
  // flow ends here while the forward value passes through unchanged.
  Var out = t.record({x.id}, std::move(value), nullptr, std::move(fwd));
  return out;
}

Var clamp(Var x, float lo, float hi) {
  Tape& t = *x.tape;
  auto compute = [lo, hi](const Tensor& in) {
    Tensor out = in;
    for (float& v : out.data) v = std::min(hi, std::max(lo, v));
    return out;
  };
  Tensor value = compute(t.value(x));
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  // Pass-through subgradient on the closed interval [lo, hi].
  auto bwd = [px = x.id, lo, hi](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& in = tp.value(px);
    const Tensor& g = tp.grad_buffer(self);
    Tensor dx = Tensor::zeros(in.shape);
    for (size_t i = 0; i < in.data.size(); ++i) {
      dx.data[i] = (in.data[i] >= lo && in.data[i] <= hi) ? g.data[i] : 0.f;
    }
    accum(tp, px, dx);
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Var pixel_normalize(Var x, const float mean[3], const float stddev[3]) {
  Tape& t = *x.tape;
  float sc[3], tc[3];
  for (int c = 0; c < 3; ++c) {
    sc[c] = 1.f / (255.f * stddev[c]);
    tc[c] = -mean[c] / stddev[c];
  }
  auto compute = [sc, tc](const Tensor& in) {
    Tensor out = in;
    for (size_t i = 0; i < out.data.size(); ++i) {
      out.data[i] = in.data[i] * sc[i % 3] + tc[i % 3];
    }
    return out;
  };
  Tensor value = compute(t.value(x));
  auto fwd = [compute](const Tape& tp, const Tape::Node& nd) {
    return compute(tp.value(nd.parents[0]));
  };
  auto bwd = [px = x.id, sc](Tape& tp, int self) {
    if (!tp.node_requires_grad(px)) return;
    const Tensor& g = tp.grad_buffer(self);
    Tensor dx = Tensor::zeros(tp.value(px).shape);
    for (size_t i = 0; i < dx.data.size(); ++i) {
      dx.data[i] = g.data[i] * sc[i % 3];
    }
    accum(tp, px, dx);
  };
  return t.record({x.id}, std::move(value), std::move(bwd), std::move(fwd));
}

Tensor patchify_value(const Tensor& image, int height, int width, int patch) {
  if (image.numel() != static_cast<size_t>(height) * width * 3) {
    throw std::invalid_argument("patchify: image size mismatch, expected " +
                                std::to_string(height) + "x" +
                                std::to_string(width) + "x3 got " +
                                shape_str(image));
  }
  if (height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("patchify: image not divisible by patch size");
  }
  const int gh = height / patch, gw = width / patch;
  const int row_len = 3 * patch * patch;
  Tensor out = Tensor::zeros({gh * gw, row_len});
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      float* row = out.data.data() +
                   static_cast<size_t>(py * gw + px) * row_len;
      int k = 0;
      for (int y = 0; y < patch; ++y) {
        const int iy = py * patch + y;
        for (int x = 0; x < patch; ++x) {
          const int ix = px * patch + x;
          const size_t base = (static_cast<size_t>(iy) * width + ix) * 3;
          row[k++] = image.data[base];
          row[k++] = image.data[base + 1];
          row[k++] = image.data[base + 2];
        }
      }
    }
  }
  return out;
}

Tensor unpatchify_value(const Tensor& patches, int height, int width,
                        int patch) {
  const int gh = height / patch, gw = width / patch;
  const int row_len = 3 * patch * patch;
  if (patches.rows() != gh * gw || patches.cols() != row_len) {
    throw std::invalid_argument("unpatchify: patch matrix shape mismatch " +
                                shape_str(patches));
  }
  Tensor out = Tensor::zeros({height, width, 3});
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const float* row = patches.data.data() +
                         static_cast<size_t>(py * gw + px) * row_len;
      int k = 0;
      for (int y = 0; y < patch; ++y) {
        const int iy = py * patch + y;
        for (int x = 0; x < patch; ++x) {
          const int ix = px * patch + x;
          const size_t base = (static_cast<size_t>(iy) * width + ix) * 3;
          out.data[base] = row[k++];
          out.data[base + 1] = row[k++];
          out.data[base + 2] = row[k++];
        }
      }
    }
  }
  return out;
}

Var patchify_op(Var image, int height, int width, int patch) {
  Tape& t = *image.tape;
  Tensor value = patchify_value(t.value(image), height, width, patch);
  auto fwd = [height, width, patch](const Tape& tp, const Tape::Node& nd) {
    return patchify_value(tp.value(nd.parents[0]), height, width, patch);
  };
  auto bwd = [pi = image.id, height, width, patch](Tape& tp, int self) {
    if (!tp.node_requires_grad(pi)) return;
    const Tensor& g = tp.grad_buffer(self);
    // Every pixel appears in exactly one patch, so scatter is one-to-one.
    Tensor dx = unpatchify_value(g, height, width, patch);
    dx.shape = tp.value(pi).shape;
    accum(tp, pi, dx);
  };
  return t.record({image.id}, std::move(value), std::move(bwd),
                  std::move(fwd));
}

// ---- Adam ------------------------------------------------------------------

AdamState AdamState::init(std::span<Tensor* const> params, float lr) {
  AdamState s;
  s.lr = lr;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros(p->shape));
    s.v.push_back(Tensor::zeros(p->shape));
  }
  return s;
}

void adam_step(std::span<Tensor* const> params,
               std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  }
  state.step += 1;
  const float bc1 = 1.f - std::pow(state.beta1, static_cast<float>(state.step));
  const float bc2 = 1.f - std::pow(state.beta2, static_cast<float>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_shape(g)) {
      throw std::invalid_argument("adam_step: shape mismatch at parameter " +
                                  std::to_string(i) + ": " + shape_str(p) +
                                  " vs " + shape_str(g));
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (size_t j = 0; j < p.data.size(); ++j) {
      m.data[j] = state.beta1 * m.data[j] + (1.f - state.beta1) * g.data[j];
      v.data[j] =
          state.beta2 * v.data[j] + (1.f - state.beta2) * g.data[j] * g.data[j];
      const float mhat = m.data[j] / bc1;
      const float vhat = v.data[j] / bc2;
      p.data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---- grad_check ------------------------------------------------------------

GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& leaves, const std::vector<bool>& requires_grad,
    float fd_step, int max_coords_per_leaf, uint64_t seed) {
  if (leaves.size() != requires_grad.size()) {
    throw std::invalid_argument("grad_check: leaves/flags length mismatch");
  }
  auto eval = [&](const std::vector<Tensor>& values) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const Tensor& t : values) vars.push_back(tape.leaf(t, false));
    Var loss = build(tape, vars);
    return tape.value(loss).data[0];
  };

  // Analytic pass.
  Tape tape;
  std::vector<Var> vars;
  for (size_t i = 0; i < leaves.size(); ++i) {
    vars.push_back(tape.leaf(leaves[i], requires_grad[i]));
  }
  Var loss = build(tape, vars);
  GradientMap grads = tape.backward(loss);

  GradCheckReport report;
  Rng rng(seed);
  std::vector<Tensor> work = leaves;
  for (size_t li = 0; li < leaves.size(); ++li) {
    if (!requires_grad[li]) continue;
    const Tensor& analytic = grads.at(vars[li]);
    const size_t n = leaves[li].numel();
    std::vector<size_t> coords;
    if (static_cast<int>(n) <= max_coords_per_leaf) {
      for (size_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int c = 0; c < max_coords_per_leaf; ++c) {
        coords.push_back(static_cast<size_t>(
            rng.next_int(static_cast<int>(n))));
      }
    }
    for (size_t c : coords) {
      const float orig = work[li].data[c];
      work[li].data[c] = orig + fd_step;
      const float fp = eval(work);
      work[li].data[c] = orig - fd_step;
      const float fm = eval(work);
      work[li].data[c] = orig;
      const float central = (fp - fm) / (2.f * fd_step);
      const float a = analytic.data[c];
      const float denom =
          std::max({std::fabs(a), std::fabs(central), 1e-6f});
      const float rel = std::fabs(a - central) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      report.coords_checked += 1;
    }
  }
  return report;
}

}  // namespace utap
