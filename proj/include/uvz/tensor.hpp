#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "uvz/common.hpp"

namespace uvz {

// All tensors are dense row-major rank-4 (n, c, h, w) buffers of Real.
// Lower-rank data (biases, scalars, token matrices) uses size-1 axes.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

  std::int64_t numel() const {
    return std::int64_t(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tape;
class ParamStore;

// Value type with a shared buffer: copies alias the same storage, like the
// usual deep learning tensor handle. A tensor may additionally carry a node
// id on the tape that recorded it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(const Shape& s);
  Tensor(const Shape& s, std::vector<Real> v);

  static Tensor full(const Shape& s, Real value);
  static Tensor scalar(Real value);  // shape (1,1,1,1)
  static Tensor uniform(const Shape& s, Rng& rng, double lo, double hi);

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return !data_; }

  Real* data() { return data_->data(); }
  const Real* data() const { return data_->data(); }
  const std::shared_ptr<std::vector<Real>>& buf() const { return data_; }

  Real& at(int n, int c, int y, int x) {
    return (*data_)[idx(n, c, y, x)];
  }
  Real at(int n, int c, int y, int x) const {
    return (*data_)[idx(n, c, y, x)];
  }
  Real item() const;  // value of a 1-element tensor

  Tensor clone() const;  // deep copy, detached from any tape

  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Gradient buffer of a leaf, populated by Tape::backward.
  std::shared_ptr<std::vector<Real>> grad;

 private:
  std::int64_t idx(int n, int c, int y, int x) const {
    return ((std::int64_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
  Tape* tape_ = nullptr;
  std::uint64_t tape_id_ = 0;
  int node_ = -1;

  friend class Tape;
  friend bool tape_binding_live(const Tensor& t);
};

// True when t's tape pointer refers to a tape instance that still exists.
// Guards against stack tapes reusing an address across loop iterations.
bool tape_binding_live(const Tensor& t);

// Reverse-mode tape. Operations append nodes in execution order; backward
// walks the list once in reverse, then clears it. Leaf gradients live in
// buffers shared with the caller (plain tensors or a ParamStore), so they
// survive the clearing.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  static bool is_live(const Tape* t);

  // Registers t as a leaf. With requires_grad the tensor's grad buffer is
  // (re)allocated, zeroed, and bound to the tape node.
  Tensor leaf(Tensor& t, bool requires_grad = true);

  // Memoized leaf for a stored parameter; gradients accumulate into the
  // store's slot for that handle.
  Tensor param(ParamStore& ps, int handle);

  // Seeds d(loss)/d(loss) = 1, runs every recorded rule once in reverse
  // order, then clears the recording. loss must be a scalar recorded here.
  void backward(const Tensor& loss);

  bool spent() const { return spent_; }
  std::size_t size() const { return nodes_.size(); }

  // --- implementation surface for the ops ---
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<Real>> data;
    std::shared_ptr<std::vector<Real>> grad;  // allocated on first touch
    std::vector<int> inputs;
    std::function<void(Tape&, int)> back;  // null for leaves
  };

  Tensor emit(const Shape& s, std::shared_ptr<std::vector<Real>> data,
              std::vector<int> inputs, std::function<void(Tape&, int)> back);
  Node& node_at(int id) { return nodes_[std::size_t(id)]; }
  // Gradient buffer of a node, allocated (zeroed) on demand.
  std::vector<Real>& grad_buf(int id);
  // Null if no gradient ever reached the node.
  const std::vector<Real>* grad_if(int id) const;

 private:
  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
  bool spent_ = false;
};

enum class PoolMode { kAvg, kMax };

// --- operations ---
// Each op computes eagerly and, when any input is on a live tape, records a
// backward rule there. Inputs from different tapes are a contract error.
// Broadcasting is restricted to the patterns the networks need: an operand
// of shape (n,1,h,w) (depth-map weighting) or (1,1,1,1) (learnable scalar)
// against (n,c,h,w). Anything else is a shape error; per-channel maps are
// expanded with nearest_resize first.

// w: (c_out, c_in, k, k); b: (1, c_out, 1, 1) or null.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
              int padding);
// w: (c_in, c_out, k, k); output (n, c_out, (h-1)*stride+k, (w-1)*stride+k).
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor* b,
                         int stride);
Tensor pool2d(const Tensor& x, PoolMode mode, int k, int stride);
Tensor global_pool(const Tensor& x, PoolMode mode);  // -> (n, c, 1, 1)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // same shape only

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int c0, int c1);  // [c0, c1)

Tensor sigmoid(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Real negative_slope = Real(0.2));
// Softmax along the last (w) axis, with row-max subtraction.
Tensor softmax_lastdim(const Tensor& x);
// Normalizes over the channel axis per (n,h,w) position; gamma and beta are
// (1,c,1,1) affine parameters.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Real eps = Real(1e-5));
// (n,g,a,b) @ (n,g,b,c) -> (n,g,a,c); leading axes must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor nearest_resize(const Tensor& x, int out_h, int out_w);

Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::array<int, 4>& order);
Tensor roll2d(const Tensor& x, int dy, int dx);  // cyclic shift over (h, w)
// (n,c,h,w) -> (n*(h/ws)*(w/ws), c, ws, ws), windows row-major.
Tensor window_partition(const Tensor& x, int ws);
Tensor window_merge(const Tensor& x, int ws, int h, int w);

Tensor sum_all(const Tensor& x);   // -> (1,1,1,1)
Tensor mean_all(const Tensor& x);  // -> (1,1,1,1)
Tensor scale(const Tensor& x, Real s);
Tensor add_const(const Tensor& x, Real c);
Tensor abs_val(const Tensor& x);   // d/dx at 0 taken as 0
Tensor sqrt_val(const Tensor& x);  // requires strictly positive input

// Nearest source index under pixel-center alignment; shared with the
// resize op so tests can check the mapping directly.
inline int nearest_src_index(int i, int src, int dst) {
  int s = int((std::int64_t(2 * i + 1) * src) / (2 * dst));
  return s < src ? s : src - 1;
}

}  // namespace uvz
