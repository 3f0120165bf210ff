#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "utap/rng.hpp"

namespace utap {

// Dense row-major float32 tensor. Plain value type; all math lives in the
// free functions below and in the Tape ops.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, float fill);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s), 0.f); }
  static Tensor full(std::vector<int> s, float v) {
    return Tensor(std::move(s), v);
  }
  static Tensor from(std::vector<int> s, std::vector<float> d);
  static Tensor scalar(float v) { return from({1}, {v}); }
  static Tensor uniform(std::vector<int> s, float lo, float hi, Rng& rng);

  size_t numel() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;

  // Rank-2 view helpers. Rank-1 tensors are treated as a single row.
  int rows() const;
  int cols() const;
  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  float at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols() + c];
  }
};

std::string shape_str(const Tensor& t);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Gradients of one backward pass, keyed by leaf node id. Holds exactly one
// entry per gradient-requiring leaf of the tape.
struct GradientMap {
  std::unordered_map<int, Tensor> by_leaf;

  bool contains(Var v) const { return by_leaf.count(v.id) != 0; }
  const Tensor& at(Var v) const;
};

// Reverse-mode tape. Nodes are recorded in topological order (parents always
// precede children); replay() recomputes every non-leaf value in order, which
// reproduces the recorded values bit-for-bit for identical leaf contents.
// Single-owner: one tape per worker thread, never shared.
class Tape {
 public:
  struct Node {
    std::vector<int> parents;
    Tensor value;
    bool is_leaf = false;
    bool requires_grad = false;  // leaf flag, or inherited from any parent
    // Accumulates d(loss)/d(parents) given d(loss)/d(self) in grads_[id].
    std::function<void(Tape&, int)> backward;
    // Recomputes value from parent values (replay path). Null for leaves.
    std::function<Tensor(const Tape&, const Node&)> forward;
  };

  Var leaf(Tensor value, bool requires_grad = false);

  Var record(std::vector<int> parents, Tensor value,
             std::function<void(Tape&, int)> backward,
             std::function<Tensor(const Tape&, const Node&)> forward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // Reverse traversal from a scalar loss node. Seeds d(loss)/d(loss) = 1.
  GradientMap backward(Var loss);

  // Recomputes all non-leaf node values in recording order.
  void replay();

  // Gradient accumulation buffer for node `id`, zero-initialized on first use.
  // Only meaningful inside a backward() traversal.
  Tensor& grad_buffer(int id);
  bool has_grad(int id) const { return !grads_[id].data.empty(); }

  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// ---- Tape ops -------------------------------------------------------------
// Every op validates shapes, computes eagerly, and records forward/backward
// closures. Gradients flow only into parents that require them.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, float c);
Var matmul(Var a, Var b);     // [m x k] * [k x n]
Var matmul_nt(Var a, Var b);  // [m x k] * [n x k]^T -> [m x n]
Var transpose(Var a);
Var add_rowvec(Var m, Var v);  // broadcast v over every row of m
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias);
Var gelu(Var x);
Var sum_all(Var x);
Var mean_all(Var x);
Var slice_rows(Var x, int row0, int count);
Var slice_cols(Var x, int col0, int count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var cosine_similarity(Var u, Var v);
Var cross_entropy_logits(Var logits, int label);
Var cross_entropy_rows(Var logits, const std::vector<int>& labels);
Var stop_gradient(Var x);
Var clamp(Var x, float lo, float hi);
// Interleaved-RGB pixel normalization: out[i] = (x[i]/255 - mean[c])/std[c]
// with c = i mod 3.
Var pixel_normalize(Var x, const float mean[3], const float stddev[3]);
// Flat H*W*3 image -> [T x 3*patch^2] patch matrix, patches in row-major
// order, each row laid out pixel-major with r,g,b adjacent per pixel.
Var patchify_op(Var image, int height, int width, int patch);

// ---- Plain-tensor helpers (no tape) ----------------------------------------

Tensor matmul_value(const Tensor& a, const Tensor& b);
Tensor patchify_value(const Tensor& image, int height, int width, int patch);
Tensor unpatchify_value(const Tensor& patches, int height, int width,
                        int patch);

// ---- Adam ------------------------------------------------------------------

struct AdamState {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState init(std::span<Tensor* const> params, float lr);
};

// Standard bias-corrected Adam update, in place.
void adam_step(std::span<Tensor* const> params,
               std::span<const Tensor* const> grads, AdamState& state);

// ---- Finite-difference gradient checking -----------------------------------

struct GradCheckReport {
  float max_rel_err = 0.f;
  int coords_checked = 0;
};

// Rebuilds the scalar computation returned by `build` (define-by-run) to
// compare analytic gradients against central finite differences on up to
// max_coords_per_leaf sampled coordinates per gradient-requiring leaf.
// Relative error uses max(|analytic|, |central|, 1e-6) as denominator.
GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& leaves, const std::vector<bool>& requires_grad,
    float fd_step, int max_coords_per_leaf, uint64_t seed);

}  // namespace utap
