#include "uvz/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <unordered_set>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

#ifdef UVZ_GEMM_STATS
#include <array>
#include <chrono>
#include <cstdio>
#include <map>
#endif

#include "uvz/params.hpp"

namespace uvz {

namespace {
std::mutex g_tapes_mu;
std::unordered_set<const Tape*> g_live_tapes;
std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {
  std::lock_guard<std::mutex> lock(g_tapes_mu);
  g_live_tapes.insert(this);
}

Tape::~Tape() {
  std::lock_guard<std::mutex> lock(g_tapes_mu);
  g_live_tapes.erase(this);
}

bool Tape::is_live(const Tape* t) {
  std::lock_guard<std::mutex> lock(g_tapes_mu);
  return g_live_tapes.count(t) != 0;
}

bool tape_binding_live(const Tensor& t) {
  return t.tape_ != nullptr && t.node_ >= 0 && Tape::is_live(t.tape_) &&
         t.tape_->id() == t.tape_id_;
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

Tensor::Tensor(const Shape& s) : shape_(s) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
    throw ShapeError("tensor dims must be positive, got " + s.str());
  data_ = std::make_shared<std::vector<Real>>(std::size_t(s.numel()), Real(0));
}

Tensor::Tensor(const Shape& s, std::vector<Real> v) : shape_(s) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
    throw ShapeError("tensor dims must be positive, got " + s.str());
  if (std::int64_t(v.size()) != s.numel())
    throw ShapeError("value count " + std::to_string(v.size()) +
                     " does not match shape " + s.str());
  data_ = std::make_shared<std::vector<Real>>(std::move(v));
}

Tensor Tensor::full(const Shape& s, Real value) {
  Tensor t(s);
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::scalar(Real value) { return full(Shape(1, 1, 1, 1), value); }

Tensor Tensor::uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor t(s);
  for (auto& v : *t.data_) v = Real(rng.uniform(lo, hi));
  return t;
}

Real Tensor::item() const {
  if (empty() || numel() != 1)
    throw ContractError("item() needs a single-element tensor, got " +
                        shape_.str());
  return (*data_)[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  if (data_) t.data_ = std::make_shared<std::vector<Real>>(*data_);
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(Tensor& t, bool requires_grad) {
  if (spent_) throw ContractError("tape already consumed by backward");
  if (t.empty()) throw ContractError("cannot record an empty tensor");
  if (t.tape_ == this && t.tape_id_ == id_ && t.node_ >= 0) return t;
  Node nd;
  nd.shape = t.shape();
  nd.data = t.buf();
  if (requires_grad) {
    if (!t.grad || t.grad->size() != std::size_t(t.numel()))
      t.grad = std::make_shared<std::vector<Real>>(std::size_t(t.numel()),
                                                   Real(0));
    else
      std::fill(t.grad->begin(), t.grad->end(), Real(0));
    nd.grad = t.grad;
  }
  t.tape_ = this;
  t.tape_id_ = id_;
  t.node_ = int(nodes_.size());
  nodes_.push_back(std::move(nd));
  return t;
}

Tensor Tape::param(ParamStore& ps, int handle) {
  if (spent_) throw ContractError("tape already consumed by backward");
  Tensor& v = ps.value(handle);
  auto it = param_nodes_.find(handle);
  int id;
  if (it != param_nodes_.end()) {
    id = it->second;
  } else {
    auto& slot = ps.grad_slot(handle);
    if (!slot || slot->size() != std::size_t(v.numel()))
      slot = std::make_shared<std::vector<Real>>(std::size_t(v.numel()),
                                                 Real(0));
    else
      std::fill(slot->begin(), slot->end(), Real(0));
    ps.grad_live(handle) = true;
    Node nd;
    nd.shape = v.shape();
    nd.data = v.buf();
    nd.grad = slot;
    id = int(nodes_.size());
    nodes_.push_back(std::move(nd));
    param_nodes_[handle] = id;
  }
  Tensor out;
  out.shape_ = nodes_[std::size_t(id)].shape;
  out.data_ = nodes_[std::size_t(id)].data;
  out.grad = nodes_[std::size_t(id)].grad;
  out.tape_ = this;
  out.tape_id_ = id_;
  out.node_ = id;
  return out;
}

std::vector<Real>& Tape::grad_buf(int id) {
  Node& nd = nodes_[std::size_t(id)];
  if (!nd.grad)
    nd.grad = std::make_shared<std::vector<Real>>(
        std::size_t(nd.shape.numel()), Real(0));
  return *nd.grad;
}

const std::vector<Real>* Tape::grad_if(int id) const {
  return nodes_[std::size_t(id)].grad ? nodes_[std::size_t(id)].grad.get()
                                      : nullptr;
}

void Tape::backward(const Tensor& loss) {
  if (spent_) throw ContractError("backward called twice on one tape");
  if (loss.tape() != this || loss.node() < 0 || !tape_binding_live(loss))
    throw ContractError("backward: loss is not recorded on this tape");
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        loss.shape().str());
  grad_buf(loss.node())[0] = Real(1);
  for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
    Node& nd = nodes_[std::size_t(i)];
    if (nd.back && nd.grad) nd.back(*this, i);
  }
  spent_ = true;
  nodes_.clear();
  param_nodes_.clear();
}

Tensor Tape::emit(const Shape& s, std::shared_ptr<std::vector<Real>> data,
                  std::vector<int> inputs,
                  std::function<void(Tape&, int)> back) {
  if (spent_) throw ContractError("tape already consumed by backward");
#ifdef UVZ_CHECK_FINITE
  for (Real r : *data)
    if (!std::isfinite(double(r)))
      throw ContractError("recorded op produced a non-finite value");
#endif
  Node nd;
  nd.shape = s;
  nd.data = std::move(data);
  nd.inputs = std::move(inputs);
  nd.back = std::move(back);
  int id = int(nodes_.size());
  nodes_.push_back(std::move(nd));
  Tensor out;
  out.shape_ = s;
  out.data_ = nodes_.back().data;
  out.tape_ = this;
  out.tape_id_ = id_;
  out.node_ = id;
  return out;
}

// ---------------------------------------------------------------------------
// shared helpers

namespace {

// Identity of an input as the backward rule needs it: tape node id (or -1
// for constants) plus the forward buffer.
struct Src {
  int id = -1;
  std::shared_ptr<std::vector<Real>> data;
  Shape shape;
};

Src src_of(const Tensor& t, Tape* tp) {
  Src s;
  s.id = (tp && t.tape() == tp && tape_binding_live(t)) ? t.node() : -1;
  s.data = t.buf();
  s.shape = t.shape();
  return s;
}

Tape* tape_of(std::initializer_list<const Tensor*> xs) {
  Tape* tp = nullptr;
  for (const Tensor* x : xs) {
    if (x->empty()) throw ContractError("operation on an empty tensor");
    if (tape_binding_live(*x)) {
      if (x->tape()->spent())
        throw ContractError("operand references a consumed tape");
      if (tp && tp != x->tape())
        throw ContractError("operands recorded on different tapes");
      tp = x->tape();
    }
  }
  return tp;
}

std::shared_ptr<std::vector<Real>> alloc(std::int64_t count) {
  return std::make_shared<std::vector<Real>>(std::size_t(count), Real(0));
}

// Eight-lane double vectors; on targets without 512-bit registers the
// compiler lowers them to pairs of narrower ops with the same semantics.
typedef double Vd __attribute__((vector_size(64)));

inline Vd splat(double v) { return Vd{v, v, v, v, v, v, v, v}; }

inline Vd load8(const float* p) {
#ifdef __AVX512F__
  return (Vd)_mm512_cvtps_pd(_mm256_loadu_ps(p));
#else
  typedef float Vf __attribute__((vector_size(32)));
  Vf f;
  std::memcpy(&f, p, sizeof f);
  return __builtin_convertvector(f, Vd);
#endif
}

inline Vd load8(const double* p) {
  Vd d;
  std::memcpy(&d, p, sizeof d);
  return d;
}

// One 8 x 16 tile of C. A arrives as a k-major panel of eight rows widened
// to double (zero-padded past M); B is read in place, widening on the fly.
// The row loops are fully unrolled so the accumulator array scalarizes.
void gemm_panel(const double* ap, const Real* bp, Real* C, int K, int N,
                int rows, bool acc) {
  Vd c[8][2];
#pragma GCC unroll 8
  for (int r = 0; r < 8; ++r) c[r][0] = c[r][1] = splat(0.0);
  for (int k = 0; k < K; ++k) {
    const Real* brow = bp + std::size_t(k) * N;
    const Vd b0 = load8(brow);
    const Vd b1 = load8(brow + 8);
    const double* arow = ap + std::size_t(k) * 8;
#pragma GCC unroll 8
    for (int r = 0; r < 8; ++r) {
      const Vd a = splat(arow[r]);
      c[r][0] += a * b0;
      c[r][1] += a * b1;
    }
  }
  for (int r = 0; r < rows; ++r) {
    Real* crow = C + std::size_t(r) * N;
    for (int n = 0; n < 16; ++n) {
      const double v = c[r][n / 8][n % 8];
      crow[n] = acc ? Real(double(crow[n]) + v) : Real(v);
    }
  }
}

// Same tile, but accumulating into a 8x16 double scratch so a long k range
// can be walked in cache-sized blocks. Passing through memory between
// blocks is exact, so the result matches the unblocked kernel bitwise.
void gemm_panel_scratch(const double* ap, const Real* bp, double* S, int kb,
                        int N) {
  Vd c[8][2];
#pragma GCC unroll 8
  for (int r = 0; r < 8; ++r) {
    c[r][0] = load8(S + r * 16);
    c[r][1] = load8(S + r * 16 + 8);
  }
  for (int k = 0; k < kb; ++k) {
    const Real* brow = bp + std::size_t(k) * N;
    const Vd b0 = load8(brow);
    const Vd b1 = load8(brow + 8);
    const double* arow = ap + std::size_t(k) * 8;
#pragma GCC unroll 8
    for (int r = 0; r < 8; ++r) {
      const Vd a = splat(arow[r]);
      c[r][0] += a * b0;
      c[r][1] += a * b1;
    }
  }
#pragma GCC unroll 8
  for (int r = 0; r < 8; ++r) {
    std::memcpy(S + r * 16, &c[r][0], sizeof(Vd));
    std::memcpy(S + r * 16 + 8, &c[r][1], sizeof(Vd));
  }
}

// Plain stripe fallback for matrices too narrow to tile.
void gemm_axpy(const Real* A, const Real* B, Real* C, int M, int K, int N,
               int n0, bool acc) {
  constexpr int kStripe = 512;
  double ac[kStripe];
  for (; n0 < N; n0 += kStripe) {
    const int nt = std::min(kStripe, N - n0);
    for (int m = 0; m < M; ++m) {
      std::fill(ac, ac + nt, 0.0);
      const Real* arow = A + std::size_t(m) * K;
      for (int k = 0; k < K; ++k) {
        const double av = double(arow[k]);
        const Real* brow = B + std::size_t(k) * N + n0;
        for (int n = 0; n < nt; ++n) ac[n] += av * double(brow[n]);
      }
      Real* crow = C + std::size_t(m) * N + n0;
      if (acc)
        for (int n = 0; n < nt; ++n) crow[n] = Real(double(crow[n]) + ac[n]);
      else
        for (int n = 0; n < nt; ++n) crow[n] = Real(ac[n]);
    }
  }
}

#ifdef UVZ_GEMM_STATS
struct GemmStats {
  std::map<std::array<int, 3>, std::pair<long, double>> by_shape;
  ~GemmStats() {
    for (auto& [k, v] : by_shape)
      std::fprintf(stderr, "gemm %5d %5d %5d  calls %8ld  sec %8.3f\n", k[0],
                   k[1], k[2], v.first, v.second);
  }
};
static GemmStats g_gemm_stats;
#endif

// C(M,N) = A(M,K) * B(K,N), row-major, optionally accumulating into C.
// Inner products are kept in double and summed over k in increasing order;
// the column tail takes a scalar stripe with the same summation order.
void gemm_nn(const Real* A, const Real* B, Real* C, int M, int K, int N,
             bool acc) {
#ifdef UVZ_GEMM_STATS
  const auto t0 = std::chrono::steady_clock::now();
  struct Done {
    int M, K, N;
    std::chrono::steady_clock::time_point t0;
    ~Done() {
      auto& e = g_gemm_stats.by_shape[{M, K, N}];
      e.first++;
      e.second += std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    }
  } done{M, K, N, t0};
#endif
  if (M < 4 || N < 16) {
    gemm_axpy(A, B, C, M, K, N, 0, acc);
    return;
  }
  thread_local std::vector<double> apack;
  const int nfull = N & ~15;
  constexpr int kBlock = 512;
  if (K >= 2 * kBlock && N <= 64) {
    // Tall and narrow: block over k so the panels stay cache resident.
    apack.resize(std::size_t(kBlock) * 8);
    const int ntiles = nfull / 16;
    double S[4 * 128];
    for (int g = 0; g * 8 < M; ++g) {
      const int rows = std::min(8, M - g * 8);
      std::fill(S, S + ntiles * 128, 0.0);
      for (int k0 = 0; k0 < K; k0 += kBlock) {
        const int kb = std::min(kBlock, K - k0);
        for (int r = 0; r < 8; ++r) {
          const Real* arow =
              A + std::size_t(g * 8 + std::min(r, rows - 1)) * K + k0;
          for (int k = 0; k < kb; ++k)
            apack[std::size_t(k) * 8 + r] = r < rows ? double(arow[k]) : 0.0;
        }
        for (int t = 0; t < ntiles; ++t)
          gemm_panel_scratch(apack.data(), B + std::size_t(k0) * N + t * 16,
                             S + t * 128, kb, N);
      }
      for (int t = 0; t < ntiles; ++t)
        for (int r = 0; r < rows; ++r) {
          Real* crow = C + std::size_t(g * 8 + r) * N + t * 16;
          const double* srow = S + t * 128 + r * 16;
          if (acc)
            for (int n = 0; n < 16; ++n)
              crow[n] = Real(double(crow[n]) + srow[n]);
          else
            for (int n = 0; n < 16; ++n) crow[n] = Real(srow[n]);
        }
    }
    if (nfull < N) gemm_axpy(A, B, C, M, K, N, nfull, acc);
    return;
  }
  apack.resize(std::size_t(K) * 8);
  for (int g = 0; g * 8 < M; ++g) {
    const int rows = std::min(8, M - g * 8);
    for (int r = 0; r < 8; ++r) {
      const Real* arow = A + std::size_t(g * 8 + std::min(r, rows - 1)) * K;
      for (int k = 0; k < K; ++k)
        apack[std::size_t(k) * 8 + r] = r < rows ? double(arow[k]) : 0.0;
    }
    for (int n0 = 0; n0 < nfull; n0 += 16)
      gemm_panel(apack.data(), B + n0, C + std::size_t(g) * 8 * N + n0, K, N,
                 rows, acc);
  }
  if (nfull < N) gemm_axpy(A, B, C, M, K, N, nfull, acc);
}

// dst(C,R) = src(R,C) transposed.
void transpose_mat(const Real* src, Real* dst, int R, int C) {
  constexpr int kB = 32;
  for (int r0 = 0; r0 < R; r0 += kB)
    for (int c0 = 0; c0 < C; c0 += kB) {
      const int r1 = std::min(r0 + kB, R), c1 = std::min(c0 + kB, C);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          dst[std::size_t(c) * R + r] = src[std::size_t(r) * C + c];
    }
}

// The gx values with gx*s + off inside [0, limit), clipped to [0, gmax).
inline void gx_range(int off, int s, int limit, int gmax, int* lo, int* hi) {
  *lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const int last = limit - 1 - off;
  *hi = last < 0 ? 0 : std::min(gmax, last / s + 1);
}

// col[(c*k+i)*k+j, gy*gw+gx] = src[c, gy*s+i-p, gx*s+j-p], zero outside.
void im2col(const Real* src, int C, int H, int W, int k, int s, int p, int gh,
            int gw, Real* col) {
  for (int c = 0; c < C; ++c) {
    const Real* plane = src + std::size_t(c) * H * W;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        Real* crow = col + (std::size_t(c * k + i) * k + j) * (gh * gw);
        int lo, hi;
        gx_range(j - p, s, W, gw, &lo, &hi);
        for (int gy = 0; gy < gh; ++gy) {
          const int sy = gy * s + i - p;
          Real* out = crow + std::size_t(gy) * gw;
          if (sy < 0 || sy >= H || lo >= hi) {
            std::fill(out, out + gw, Real(0));
            continue;
          }
          const Real* srow = plane + std::size_t(sy) * W;
          std::fill(out, out + lo, Real(0));
          if (s == 1)
            std::memcpy(out + lo, srow + (lo + j - p),
                        std::size_t(hi - lo) * sizeof(Real));
          else
            for (int gx = lo; gx < hi; ++gx) out[gx] = srow[gx * s + j - p];
          std::fill(out + hi, out + gw, Real(0));
        }
      }
  }
}

// dst[c, gy*s+i-p, gx*s+j-p] += col[(c*k+i)*k+j, gy*gw+gx] for in-range dst.
void col2im(const Real* col, int C, int H, int W, int k, int s, int p, int gh,
            int gw, Real* dst) {
  for (int c = 0; c < C; ++c) {
    Real* plane = dst + std::size_t(c) * H * W;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        const Real* crow = col + (std::size_t(c * k + i) * k + j) * (gh * gw);
        int lo, hi;
        gx_range(j - p, s, W, gw, &lo, &hi);
        for (int gy = 0; gy < gh; ++gy) {
          const int sy = gy * s + i - p;
          if (sy < 0 || sy >= H) continue;
          Real* drow = plane + std::size_t(sy) * W;
          const Real* in = crow + std::size_t(gy) * gw;
          if (s == 1)
            for (int gx = lo; gx < hi; ++gx) drow[gx + j - p] += in[gx];
          else
            for (int gx = lo; gx < hi; ++gx) drow[gx * s + j - p] += in[gx];
        }
      }
  }
}

enum class BKind { kSame, kChan1, kScalar };

BKind bkind(const char* op, const Shape& a, const Shape& b) {
  if (b == a) return BKind::kSame;
  if (b.n == 1 && b.c == 1 && b.h == 1 && b.w == 1) return BKind::kScalar;
  if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return BKind::kChan1;
  throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " +
                   b.str() +
                   " do not match; broadcast supports (n,1,h,w) and "
                   "(1,1,1,1) operands only");
}

// Index into the broadcast operand for position (n,c,y,x) of the full shape.
inline std::size_t bidx(const Shape& b, int n, int c, int y, int x) {
  return ((std::size_t(b.n == 1 ? 0 : n) * b.c + (b.c == 1 ? 0 : c)) * b.h +
          (b.h == 1 ? 0 : y)) *
             b.w +
         (b.w == 1 ? 0 : x);
}

}  // namespace

// ---------------------------------------------------------------------------
// convolution family

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
              int padding) {
  Tape* tp = b ? tape_of({&x, &w, b}) : tape_of({&x, &w});
  const Shape xs = x.shape(), ws = w.shape();
  if (ws.c != xs.c)
    throw ShapeError("conv2d: weight " + ws.str() + " expects " +
                     std::to_string(ws.c) + " input channels, input is " +
                     xs.str());
  if (ws.h != ws.w)
    throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  const int k = ws.h;
  if (stride < 1 || padding < 0)
    throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  if (xs.h + 2 * padding < k || xs.w + 2 * padding < k)
    throw ShapeError("conv2d: kernel " + std::to_string(k) +
                     " exceeds padded input " + xs.str());
  if (b && !(b->shape() == Shape(1, ws.n, 1, 1)))
    throw ShapeError("conv2d: bias must be (1," + std::to_string(ws.n) +
                     ",1,1), got " + b->shape().str());

  const int oh = (xs.h + 2 * padding - k) / stride + 1;
  const int ow = (xs.w + 2 * padding - k) / stride + 1;
  const int M = ws.n, K = xs.c * k * k, N = oh * ow;
  const Shape os(xs.n, ws.n, oh, ow);

  auto out = alloc(os.numel());
  std::vector<Real> col(std::size_t(K) * N);
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.data() + std::size_t(n) * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w,
           k, stride, padding, oh, ow, col.data());
    Real* on = out->data() + std::size_t(n) * M * N;
    gemm_nn(w.data(), col.data(), on, M, K, N, false);
    if (b) {
      const Real* bv = b->data();
      for (int m = 0; m < M; ++m) {
        Real* row = on + std::size_t(m) * N;
        for (int i = 0; i < N; ++i) row[i] += bv[m];
      }
    }
  }

  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp), sw = src_of(w, tp);
  Src sb = b ? src_of(*b, tp) : Src{};
  const int s = stride, p = padding;
  std::vector<int> ins{sx.id, sw.id};
  if (b) ins.push_back(sb.id);
  return tp->emit(os, out, ins, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real> colbuf(std::size_t(K) * N);
    std::vector<Real> tmp;
    for (int n = 0; n < xs.n; ++n) {
      const Real* gon = go.data() + std::size_t(n) * M * N;
      if (sw.id >= 0) {
        // dW^T = col * dOut^T, accumulated over the batch
        im2col(sx.data->data() + std::size_t(n) * xs.c * xs.h * xs.w, xs.c,
               xs.h, xs.w, k, s, p, oh, ow, colbuf.data());
        tmp.resize(std::size_t(N) * M);
        transpose_mat(gon, tmp.data(), M, N);
        std::vector<Real> dwt(std::size_t(K) * M);
        gemm_nn(colbuf.data(), tmp.data(), dwt.data(), K, N, M, false);
        std::vector<Real>& gw = t.grad_buf(sw.id);
        for (int m = 0; m < M; ++m)
          for (int kk = 0; kk < K; ++kk)
            gw[std::size_t(m) * K + kk] += dwt[std::size_t(kk) * M + m];
      }
      if (sx.id >= 0) {
        // d(col) = W^T * dOut, scattered back onto the input grid
        tmp.resize(std::size_t(K) * M);
        transpose_mat(sw.data->data(), tmp.data(), M, K);
        gemm_nn(tmp.data(), gon, colbuf.data(), K, M, N, false);
        col2im(colbuf.data(), xs.c, xs.h, xs.w, k, s, p, oh, ow,
               t.grad_buf(sx.id).data() +
                   std::size_t(n) * xs.c * xs.h * xs.w);
      }
      if (sb.id >= 0) {
        std::vector<Real>& gb = t.grad_buf(sb.id);
        for (int m = 0; m < M; ++m) {
          double acc = 0.0;
          const Real* row = gon + std::size_t(m) * N;
          for (int i = 0; i < N; ++i) acc += double(row[i]);
          gb[std::size_t(m)] = Real(double(gb[std::size_t(m)]) + acc);
        }
      }
    }
  });
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor* b,
                         int stride) {
  Tape* tp = b ? tape_of({&x, &w, b}) : tape_of({&x, &w});
  const Shape xs = x.shape(), ws = w.shape();
  if (ws.n != xs.c)
    throw ShapeError("transposed_conv2d: weight " + ws.str() + " expects " +
                     std::to_string(ws.n) + " input channels, input is " +
                     xs.str());
  if (ws.h != ws.w)
    throw ShapeError("transposed_conv2d: kernel must be square, got " +
                     ws.str());
  const int k = ws.h;
  if (stride < 1)
    throw ConfigError("transposed_conv2d: stride must be >= 1");
  if (k < stride)
    throw ShapeError(
        "transposed_conv2d: kernel smaller than stride leaves gaps (k=" +
        std::to_string(k) + ", stride=" + std::to_string(stride) + ")");
  const int cin = ws.n, cout = ws.c;
  if (b && !(b->shape() == Shape(1, cout, 1, 1)))
    throw ShapeError("transposed_conv2d: bias must be (1," +
                     std::to_string(cout) + ",1,1), got " +
                     b->shape().str());
  const int OH = (xs.h - 1) * stride + k, OW = (xs.w - 1) * stride + k;
  const Shape os(xs.n, cout, OH, OW);
  const int Kg = cout * k * k, N = xs.h * xs.w;

  // weight viewed as (cin, cout*k*k); forward needs its transpose
  std::vector<Real> wT(std::size_t(Kg) * cin);
  transpose_mat(w.data(), wT.data(), cin, Kg);

  auto out = alloc(os.numel());
  std::vector<Real> G(std::size_t(Kg) * N);
  for (int n = 0; n < xs.n; ++n) {
    gemm_nn(wT.data(), x.data() + std::size_t(n) * cin * N, G.data(), Kg, cin,
            N, false);
    Real* on = out->data() + std::size_t(n) * cout * OH * OW;
    col2im(G.data(), cout, OH, OW, k, stride, 0, xs.h, xs.w, on);
    if (b) {
      const Real* bv = b->data();
      for (int m = 0; m < cout; ++m) {
        Real* plane = on + std::size_t(m) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) plane[i] += bv[m];
      }
    }
  }

  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp), sw = src_of(w, tp);
  Src sb = b ? src_of(*b, tp) : Src{};
  const int s = stride;
  std::vector<int> ins{sx.id, sw.id};
  if (b) ins.push_back(sb.id);
  return tp->emit(os, out, ins, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real> dG(std::size_t(Kg) * N);
    std::vector<Real> tmp;
    for (int n = 0; n < xs.n; ++n) {
      const Real* gon = go.data() + std::size_t(n) * cout * OH * OW;
      im2col(gon, cout, OH, OW, k, s, 0, xs.h, xs.w, dG.data());
      if (sx.id >= 0)
        gemm_nn(sw.data->data(), dG.data(),
                t.grad_buf(sx.id).data() + std::size_t(n) * cin * N, cin, Kg,
                N, true);
      if (sw.id >= 0) {
        // dW = x * dG^T lands directly in the (cin, cout*k*k) layout
        tmp.resize(std::size_t(N) * Kg);
        transpose_mat(dG.data(), tmp.data(), Kg, N);
        gemm_nn(sx.data->data() + std::size_t(n) * cin * N, tmp.data(),
                t.grad_buf(sw.id).data(), cin, N, Kg, true);
      }
      if (sb.id >= 0) {
        std::vector<Real>& gb = t.grad_buf(sb.id);
        for (int m = 0; m < cout; ++m) {
          double acc = 0.0;
          const Real* plane = gon + std::size_t(m) * OH * OW;
          for (int i = 0; i < OH * OW; ++i) acc += double(plane[i]);
          gb[std::size_t(m)] = Real(double(gb[std::size_t(m)]) + acc);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// pooling

Tensor pool2d(const Tensor& x, PoolMode mode, int k, int stride) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  if (k < 1 || stride < 1)
    throw ConfigError("pool2d: k and stride must be >= 1");
  if (k > xs.h || k > xs.w)
    throw ShapeError("pool2d: window " + std::to_string(k) +
                     " exceeds input " + xs.str());
  const int oh = (xs.h - k) / stride + 1, ow = (xs.w - k) / stride + 1;
  const Shape os(xs.n, xs.c, oh, ow);
  auto out = alloc(os.numel());
  auto arg = std::make_shared<std::vector<std::int32_t>>(
      mode == PoolMode::kMax ? std::size_t(os.numel()) : 0);

  const int planes = xs.n * xs.c;
  for (int pcount = 0; pcount < planes; ++pcount) {
    const Real* plane = x.data() + std::size_t(pcount) * xs.h * xs.w;
    Real* oplane = out->data() + std::size_t(pcount) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        if (mode == PoolMode::kAvg) {
          double acc = 0.0;
          for (int i = 0; i < k; ++i) {
            const Real* row = plane + std::size_t(oy * stride + i) * xs.w +
                              ox * stride;
            for (int j = 0; j < k; ++j) acc += double(row[j]);
          }
          oplane[std::size_t(oy) * ow + ox] = Real(acc / (double(k) * k));
        } else {
          int best = (oy * stride) * xs.w + ox * stride;
          Real bv = plane[best];
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const int idx = (oy * stride + i) * xs.w + ox * stride + j;
              if (plane[idx] > bv) {
                bv = plane[idx];
                best = idx;
              }
            }
          oplane[std::size_t(oy) * ow + ox] = bv;
          (*arg)[std::size_t(pcount) * oh * ow + std::size_t(oy) * ow + ox] =
              best;
        }
      }
  }

  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (int pcount = 0; pcount < planes; ++pcount) {
      Real* gplane = gx.data() + std::size_t(pcount) * xs.h * xs.w;
      const Real* gop = go.data() + std::size_t(pcount) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Real g = gop[std::size_t(oy) * ow + ox];
          if (mode == PoolMode::kAvg) {
            const Real share = g / Real(k * k);
            for (int i = 0; i < k; ++i) {
              Real* row = gplane + std::size_t(oy * stride + i) * xs.w +
                          ox * stride;
              for (int j = 0; j < k; ++j) row[j] += share;
            }
          } else {
            gplane[(*arg)[std::size_t(pcount) * oh * ow +
                          std::size_t(oy) * ow + ox]] += g;
          }
        }
    }
  });
}

Tensor global_pool(const Tensor& x, PoolMode mode) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  const Shape os(xs.n, xs.c, 1, 1);
  const int hw = xs.h * xs.w, planes = xs.n * xs.c;
  auto out = alloc(os.numel());
  auto arg = std::make_shared<std::vector<std::int32_t>>(
      mode == PoolMode::kMax ? std::size_t(planes) : 0);
  for (int pcount = 0; pcount < planes; ++pcount) {
    const Real* plane = x.data() + std::size_t(pcount) * hw;
    if (mode == PoolMode::kAvg) {
      double acc = 0.0;
      for (int i = 0; i < hw; ++i) acc += double(plane[i]);
      (*out)[std::size_t(pcount)] = Real(acc / hw);
    } else {
      int best = 0;
      for (int i = 1; i < hw; ++i)
        if (plane[i] > plane[best]) best = i;
      (*out)[std::size_t(pcount)] = plane[best];
      (*arg)[std::size_t(pcount)] = best;
    }
  }
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (int pcount = 0; pcount < planes; ++pcount) {
      const Real g = go[std::size_t(pcount)];
      Real* gplane = gx.data() + std::size_t(pcount) * hw;
      if (mode == PoolMode::kAvg) {
        const Real share = g / Real(hw);
        for (int i = 0; i < hw; ++i) gplane[i] += share;
      } else {
        gplane[(*arg)[std::size_t(pcount)]] += g;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise with restricted broadcast

namespace {

enum class BinOp { kAdd, kSub, kMul };

Tensor binary_op(const char* name, BinOp op, const Tensor& a,
                 const Tensor& b) {
  // put the full-shaped operand on the left for add/mul
  if (op != BinOp::kSub && a.shape() != b.shape() &&
      a.numel() < b.numel())
    return binary_op(name, op, b, a);

  Tape* tp = tape_of({&a, &b});
  const Shape as = a.shape(), bs = b.shape();
  const BKind kind = bkind(name, as, bs);
  auto out = alloc(as.numel());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out->data();
  std::int64_t i = 0;
  for (int n = 0; n < as.n; ++n)
    for (int c = 0; c < as.c; ++c)
      for (int y = 0; y < as.h; ++y)
        for (int x = 0; x < as.w; ++x, ++i) {
          const Real bv =
              kind == BKind::kSame ? pb[i] : pb[bidx(bs, n, c, y, x)];
          switch (op) {
            case BinOp::kAdd: po[i] = pa[i] + bv; break;
            case BinOp::kSub: po[i] = pa[i] - bv; break;
            case BinOp::kMul: po[i] = pa[i] * bv; break;
          }
        }

  if (!tp) return Tensor(as, std::move(*out));
  Src sa = src_of(a, tp), sb = src_of(b, tp);
  return tp->emit(as, out, {sa.id, sb.id}, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    const Real* pa2 = sa.data->data();
    const Real* pb2 = sb.data->data();
    std::vector<Real>* ga = sa.id >= 0 ? &t.grad_buf(sa.id) : nullptr;
    std::vector<Real>* gb = sb.id >= 0 ? &t.grad_buf(sb.id) : nullptr;
    std::int64_t j = 0;
    for (int n = 0; n < as.n; ++n)
      for (int c = 0; c < as.c; ++c)
        for (int y = 0; y < as.h; ++y)
          for (int x = 0; x < as.w; ++x, ++j) {
            const Real g = go[std::size_t(j)];
            const std::size_t jb =
                kind == BKind::kSame ? std::size_t(j) : bidx(bs, n, c, y, x);
            switch (op) {
              case BinOp::kAdd:
                if (ga) (*ga)[std::size_t(j)] += g;
                if (gb) (*gb)[jb] += g;
                break;
              case BinOp::kSub:
                if (ga) (*ga)[std::size_t(j)] += g;
                if (gb) (*gb)[jb] -= g;
                break;
              case BinOp::kMul:
                if (ga) (*ga)[std::size_t(j)] += g * pb2[jb];
                if (gb) (*gb)[jb] += g * pa2[std::size_t(j)];
                break;
            }
          }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", BinOp::kAdd, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", BinOp::kSub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", BinOp::kMul, a, b);
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tape* tp = tape_of({&a, &b});
  if (!(a.shape() == b.shape()))
    throw ShapeError("div: shapes must match exactly, got " +
                     a.shape().str() + " and " + b.shape().str());
  const Shape s = a.shape();
  auto out = alloc(s.numel());
  for (std::int64_t i = 0; i < s.numel(); ++i)
    (*out)[std::size_t(i)] = a.data()[i] / b.data()[i];
  if (!tp) return Tensor(s, std::move(*out));
  Src sa = src_of(a, tp), sb = src_of(b, tp);
  return tp->emit(s, out, {sa.id, sb.id}, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    const Real* pa = sa.data->data();
    const Real* pb = sb.data->data();
    if (sa.id >= 0) {
      std::vector<Real>& ga = t.grad_buf(sa.id);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / pb[i];
    }
    if (sb.id >= 0) {
      std::vector<Real>& gb = t.grad_buf(sb.id);
      for (std::size_t i = 0; i < go.size(); ++i)
        gb[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// channel concat / slice

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  std::vector<const Tensor*> ptrs;
  for (const auto& t : xs) ptrs.push_back(&t);
  Tape* tp = nullptr;
  for (const Tensor* t : ptrs) {
    Tape* o = tape_of({t});
    if (o) {
      if (tp && tp != o)
        throw ContractError("operands recorded on different tapes");
      tp = o;
    }
  }
  const Shape s0 = xs[0].shape();
  int ctot = 0;
  for (const auto& t : xs) {
    const Shape s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw ShapeError("concat_channels: mismatched shapes " + s0.str() +
                       " vs " + s.str());
    ctot += s.c;
  }
  const Shape os(s0.n, ctot, s0.h, s0.w);
  auto out = alloc(os.numel());
  const std::int64_t hw = std::int64_t(s0.h) * s0.w;
  for (int n = 0; n < s0.n; ++n) {
    std::int64_t coff = 0;
    for (const auto& t : xs) {
      const int tc = t.shape().c;
      std::memcpy(out->data() + (std::int64_t(n) * ctot + coff) * hw,
                  t.data() + std::int64_t(n) * tc * hw,
                  std::size_t(tc * hw) * sizeof(Real));
      coff += tc;
    }
  }
  if (!tp) return Tensor(os, std::move(*out));
  std::vector<Src> srcs;
  std::vector<int> ids;
  for (const auto& t : xs) {
    srcs.push_back(src_of(t, tp));
    ids.push_back(srcs.back().id);
  }
  return tp->emit(os, out, ids, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    for (int n = 0; n < s0.n; ++n) {
      std::int64_t coff = 0;
      for (const Src& sc : srcs) {
        const int tc = sc.shape.c;
        if (sc.id >= 0) {
          std::vector<Real>& g = t.grad_buf(sc.id);
          const Real* src = go.data() + (std::int64_t(n) * ctot + coff) * hw;
          Real* dst = g.data() + std::int64_t(n) * tc * hw;
          for (std::int64_t i = 0; i < tc * hw; ++i) dst[i] += src[i];
        }
        coff += tc;
      }
    }
  });
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  if (c0 < 0 || c1 <= c0 || c1 > xs.c)
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") invalid for " + xs.str());
  const int nc = c1 - c0;
  const Shape os(xs.n, nc, xs.h, xs.w);
  const std::int64_t hw = std::int64_t(xs.h) * xs.w;
  auto out = alloc(os.numel());
  for (int n = 0; n < xs.n; ++n)
    std::memcpy(out->data() + std::int64_t(n) * nc * hw,
                x.data() + (std::int64_t(n) * xs.c + c0) * hw,
                std::size_t(nc * hw) * sizeof(Real));
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (int n = 0; n < xs.n; ++n) {
      const Real* src = go.data() + std::int64_t(n) * nc * hw;
      Real* dst = gx.data() + (std::int64_t(n) * xs.c + c0) * hw;
      for (std::int64_t i = 0; i < nc * hw; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// activations / normalization

Tensor sigmoid(const Tensor& x) {
  Tape* tp = tape_of({&x});
  const Shape s = x.shape();
  auto out = alloc(s.numel());
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    const double v = double(x.data()[i]);
    (*out)[std::size_t(i)] =
        Real(v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v)));
  }
  if (!tp) return Tensor(s, std::move(*out));
  Src sx = src_of(x, tp);
  auto y = out;
  return tp->emit(s, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const Real* py = y->data();
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] * py[i] * (Real(1) - py[i]);
  });
}

Tensor leaky_relu(const Tensor& x, Real negative_slope) {
  Tape* tp = tape_of({&x});
  const Shape s = x.shape();
  auto out = alloc(s.numel());
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    const Real v = x.data()[i];
    (*out)[std::size_t(i)] = v >= 0 ? v : negative_slope * v;
  }
  if (!tp) return Tensor(s, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(s, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const Real* px = sx.data->data();
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] += px[i] >= 0 ? go[i] : negative_slope * go[i];
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  Tape* tp = tape_of({&x});
  const Shape s = x.shape();
  const std::int64_t rows = std::int64_t(s.n) * s.c * s.h;
  const int W = s.w;
  auto out = alloc(s.numel());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* in = x.data() + r * W;
    Real* o = out->data() + r * W;
    Real m = in[0];
    for (int i = 1; i < W; ++i) m = std::max(m, in[i]);
    double denom = 0.0;
    for (int i = 0; i < W; ++i) {
      const double e = std::exp(double(in[i]) - double(m));
      o[i] = Real(e);
      denom += e;
    }
    for (int i = 0; i < W; ++i) o[i] = Real(double(o[i]) / denom);
  }
  if (!tp) return Tensor(s, std::move(*out));
  Src sx = src_of(x, tp);
  auto y = out;
  return tp->emit(s, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const Real* py = y->data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const Real* g = go.data() + r * W;
      const Real* yr = py + r * W;
      double dot = 0.0;
      for (int i = 0; i < W; ++i) dot += double(g[i]) * double(yr[i]);
      Real* gr = gx.data() + r * W;
      for (int i = 0; i < W; ++i)
        gr[i] += Real(double(yr[i]) * (double(g[i]) - dot));
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Real eps) {
  Tape* tp = tape_of({&x, &gamma, &beta});
  const Shape s = x.shape();
  if (!(gamma.shape() == Shape(1, s.c, 1, 1)) ||
      !(beta.shape() == Shape(1, s.c, 1, 1)))
    throw ShapeError("layer_norm: affine parameters must be (1," +
                     std::to_string(s.c) + ",1,1)");
  const int C = s.c;
  const std::int64_t hw = std::int64_t(s.h) * s.w;
  const std::int64_t positions = std::int64_t(s.n) * hw;
  auto out = alloc(s.numel());
  auto mean = std::make_shared<std::vector<Real>>(std::size_t(positions));
  auto inv = std::make_shared<std::vector<Real>>(std::size_t(positions));
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  for (int n = 0; n < s.n; ++n)
    for (std::int64_t p = 0; p < hw; ++p) {
      const std::int64_t base = std::int64_t(n) * C * hw + p;
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += double(px[base + c * hw]);
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = double(px[base + c * hw]) - mu;
        var += d * d;
      }
      var /= C;
      const double iv = 1.0 / std::sqrt(var + double(eps));
      const std::int64_t pos = std::int64_t(n) * hw + p;
      (*mean)[std::size_t(pos)] = Real(mu);
      (*inv)[std::size_t(pos)] = Real(iv);
      for (int c = 0; c < C; ++c) {
        const double xh = (double(px[base + c * hw]) - mu) * iv;
        (*out)[std::size_t(base + c * hw)] =
            Real(xh * double(pg[c]) + double(pb[c]));
      }
    }
  if (!tp) return Tensor(s, std::move(*out));
  Src sx = src_of(x, tp), sg = src_of(gamma, tp), sb = src_of(beta, tp);
  return tp->emit(s, out, {sx.id, sg.id, sb.id}, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    const Real* px2 = sx.data->data();
    const Real* pg2 = sg.data->data();
    std::vector<Real>* gx = sx.id >= 0 ? &t.grad_buf(sx.id) : nullptr;
    std::vector<Real>* gg = sg.id >= 0 ? &t.grad_buf(sg.id) : nullptr;
    std::vector<Real>* gb = sb.id >= 0 ? &t.grad_buf(sb.id) : nullptr;
    for (int n = 0; n < s.n; ++n)
      for (std::int64_t p = 0; p < hw; ++p) {
        const std::int64_t base = std::int64_t(n) * C * hw + p;
        const std::int64_t pos = std::int64_t(n) * hw + p;
        const double mu = double((*mean)[std::size_t(pos)]);
        const double iv = double((*inv)[std::size_t(pos)]);
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int c = 0; c < C; ++c) {
          const double xh = (double(px2[base + c * hw]) - mu) * iv;
          const double dxh =
              double(go[std::size_t(base + c * hw)]) * double(pg2[c]);
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
          if (gg)
            (*gg)[std::size_t(c)] +=
                Real(double(go[std::size_t(base + c * hw)]) * xh);
          if (gb) (*gb)[std::size_t(c)] += go[std::size_t(base + c * hw)];
        }
        if (gx)
          for (int c = 0; c < C; ++c) {
            const double xh = (double(px2[base + c * hw]) - mu) * iv;
            const double dxh =
                double(go[std::size_t(base + c * hw)]) * double(pg2[c]);
            (*gx)[std::size_t(base + c * hw)] += Real(
                iv * (dxh - sum_dxh / C - xh * sum_dxh_xh / C));
          }
      }
  });
}

// ---------------------------------------------------------------------------
// matmul over token matrices

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape* tp = tape_of({&a, &b});
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.c != bs.c || as.w != bs.h)
    throw ShapeError("matmul: incompatible shapes " + as.str() + " @ " +
                     bs.str());
  const int batch = as.n * as.c, A = as.h, B = as.w, C2 = bs.w;
  const Shape os(as.n, as.c, A, C2);
  auto out = alloc(os.numel());
  for (int g = 0; g < batch; ++g)
    gemm_nn(a.data() + std::size_t(g) * A * B,
            b.data() + std::size_t(g) * B * C2,
            out->data() + std::size_t(g) * A * C2, A, B, C2, false);
  if (!tp) return Tensor(os, std::move(*out));
  Src sa = src_of(a, tp), sb = src_of(b, tp);
  return tp->emit(os, out, {sa.id, sb.id}, [=](Tape& t, int self) {
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real> tmp;
    for (int g = 0; g < batch; ++g) {
      const Real* gslice = go.data() + std::size_t(g) * A * C2;
      if (sa.id >= 0) {
        tmp.resize(std::size_t(C2) * B);
        transpose_mat(sb.data->data() + std::size_t(g) * B * C2, tmp.data(),
                      B, C2);
        gemm_nn(gslice, tmp.data(),
                t.grad_buf(sa.id).data() + std::size_t(g) * A * B, A, C2, B,
                true);
      }
      if (sb.id >= 0) {
        tmp.resize(std::size_t(B) * A);
        transpose_mat(sa.data->data() + std::size_t(g) * A * B, tmp.data(), A,
                      B);
        gemm_nn(tmp.data(), gslice,
                t.grad_buf(sb.id).data() + std::size_t(g) * B * C2, B, A, C2,
                true);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// structural ops

Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  if (out_h < 1 || out_w < 1)
    throw ShapeError("nearest_resize: target dims must be positive");
  const Shape os(xs.n, xs.c, out_h, out_w);
  std::vector<int> ymap(static_cast<std::size_t>(out_h));
  std::vector<int> xmap(static_cast<std::size_t>(out_w));
  for (int i = 0; i < out_h; ++i)
    ymap[std::size_t(i)] = nearest_src_index(i, xs.h, out_h);
  for (int i = 0; i < out_w; ++i)
    xmap[std::size_t(i)] = nearest_src_index(i, xs.w, out_w);
  auto out = alloc(os.numel());
  const int planes = xs.n * xs.c;
  for (int p = 0; p < planes; ++p) {
    const Real* plane = x.data() + std::size_t(p) * xs.h * xs.w;
    Real* oplane = out->data() + std::size_t(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const Real* srow = plane + std::size_t(ymap[std::size_t(y)]) * xs.w;
      Real* orow = oplane + std::size_t(y) * out_w;
      for (int xx = 0; xx < out_w; ++xx) orow[xx] = srow[xmap[std::size_t(xx)]];
    }
  }
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (int p = 0; p < planes; ++p) {
      Real* gplane = gx.data() + std::size_t(p) * xs.h * xs.w;
      const Real* gop = go.data() + std::size_t(p) * out_h * out_w;
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx)
          gplane[std::size_t(ymap[std::size_t(y)]) * xs.w +
                 xmap[std::size_t(xx)]] += gop[std::size_t(y) * out_w + xx];
    }
  });
}

Tensor reshape(const Tensor& x, const Shape& s) {
  Tape* tp = tape_of({&x});
  if (s.numel() != x.numel())
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " +
                     s.str());
  if (!tp) {
    Tensor out(s, std::vector<Real>(x.data(), x.data() + x.numel()));
    return out;
  }
  Src sx = src_of(x, tp);
  auto data = x.buf();  // same storage, new shape
  return tp->emit(s, data, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

Tensor permute(const Tensor& x, const std::array<int, 4>& order) {
  Tape* tp = tape_of({&x});
  {
    std::array<bool, 4> seen{};
    for (int o : order) {
      if (o < 0 || o > 3 || seen[std::size_t(o)])
        throw ShapeError("permute: order must be a permutation of 0..3");
      seen[std::size_t(o)] = true;
    }
  }
  const Shape xs = x.shape();
  const std::array<int, 4> in_dims{xs.n, xs.c, xs.h, xs.w};
  const Shape os(in_dims[std::size_t(order[0])], in_dims[std::size_t(order[1])],
                 in_dims[std::size_t(order[2])], in_dims[std::size_t(order[3])]);
  const std::array<std::int64_t, 4> in_str{
      std::int64_t(xs.c) * xs.h * xs.w, std::int64_t(xs.h) * xs.w, xs.w, 1};
  std::array<std::int64_t, 4> pick{in_str[std::size_t(order[0])],
                                   in_str[std::size_t(order[1])],
                                   in_str[std::size_t(order[2])],
                                   in_str[std::size_t(order[3])]};
  auto out = alloc(os.numel());
  std::int64_t i = 0;
  for (int o0 = 0; o0 < os.n; ++o0)
    for (int o1 = 0; o1 < os.c; ++o1)
      for (int o2 = 0; o2 < os.h; ++o2) {
        const std::int64_t base =
            o0 * pick[0] + o1 * pick[1] + o2 * pick[2];
        for (int o3 = 0; o3 < os.w; ++o3, ++i)
          (*out)[std::size_t(i)] = x.data()[base + o3 * pick[3]];
      }
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    std::int64_t j = 0;
    for (int o0 = 0; o0 < os.n; ++o0)
      for (int o1 = 0; o1 < os.c; ++o1)
        for (int o2 = 0; o2 < os.h; ++o2) {
          const std::int64_t base =
              o0 * pick[0] + o1 * pick[1] + o2 * pick[2];
          for (int o3 = 0; o3 < os.w; ++o3, ++j)
            gx[std::size_t(base + o3 * pick[3])] += go[std::size_t(j)];
        }
  });
}

Tensor roll2d(const Tensor& x, int dy, int dx) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  const int H = xs.h, W = xs.w;
  auto mod = [](int v, int m) { return ((v % m) + m) % m; };
  auto out = alloc(xs.numel());
  const int planes = xs.n * xs.c;
  for (int p = 0; p < planes; ++p) {
    const Real* plane = x.data() + std::size_t(p) * H * W;
    Real* oplane = out->data() + std::size_t(p) * H * W;
    for (int y = 0; y < H; ++y) {
      const Real* srow = plane + std::size_t(mod(y - dy, H)) * W;
      Real* orow = oplane + std::size_t(y) * W;
      for (int xx = 0; xx < W; ++xx) orow[xx] = srow[mod(xx - dx, W)];
    }
  }
  if (!tp) return Tensor(xs, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(xs, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (int p = 0; p < planes; ++p) {
      Real* gplane = gx.data() + std::size_t(p) * H * W;
      const Real* gop = go.data() + std::size_t(p) * H * W;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          gplane[std::size_t(mod(y - dy, H)) * W + mod(xx - dx, W)] +=
              gop[std::size_t(y) * W + xx];
    }
  });
}

Tensor window_partition(const Tensor& x, int ws) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  if (ws < 1 || xs.h % ws != 0 || xs.w % ws != 0)
    throw ShapeError("window_partition: window " + std::to_string(ws) +
                     " must divide spatial dims of " + xs.str());
  const int nh = xs.h / ws, nw = xs.w / ws;
  const Shape os(xs.n * nh * nw, xs.c, ws, ws);
  auto out = alloc(os.numel());
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int ty = 0; ty < nh; ++ty)
      for (int tx = 0; tx < nw; ++tx)
        for (int c = 0; c < xs.c; ++c)
          for (int wy = 0; wy < ws; ++wy)
            for (int wx = 0; wx < ws; ++wx, ++o)
              (*out)[std::size_t(o)] = x.at(n, c, ty * ws + wy, tx * ws + wx);
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const std::int64_t chw = std::int64_t(xs.c) * xs.h * xs.w;
    std::int64_t o2 = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int ty = 0; ty < nh; ++ty)
        for (int tx = 0; tx < nw; ++tx)
          for (int c = 0; c < xs.c; ++c)
            for (int wy = 0; wy < ws; ++wy)
              for (int wx = 0; wx < ws; ++wx, ++o2)
                gx[std::size_t(n * chw +
                               (std::int64_t(c) * xs.h + ty * ws + wy) * xs.w +
                               tx * ws + wx)] += go[std::size_t(o2)];
  });
}

Tensor window_merge(const Tensor& x, int ws, int h, int w) {
  Tape* tp = tape_of({&x});
  const Shape xs = x.shape();
  if (ws < 1 || h % ws != 0 || w % ws != 0)
    throw ShapeError("window_merge: window " + std::to_string(ws) +
                     " must divide target dims");
  if (xs.h != ws || xs.w != ws)
    throw ShapeError("window_merge: input windows are " + xs.str() +
                     ", expected " + std::to_string(ws) + "x" +
                     std::to_string(ws));
  const int nh = h / ws, nw = w / ws;
  if (xs.n % (nh * nw) != 0)
    throw ShapeError("window_merge: batch " + std::to_string(xs.n) +
                     " is not a multiple of the window count " +
                     std::to_string(nh * nw));
  const int n0 = xs.n / (nh * nw);
  const Shape os(n0, xs.c, h, w);
  auto out = alloc(os.numel());
  std::int64_t i = 0;
  for (int n = 0; n < n0; ++n)
    for (int ty = 0; ty < nh; ++ty)
      for (int tx = 0; tx < nw; ++tx)
        for (int c = 0; c < xs.c; ++c)
          for (int wy = 0; wy < ws; ++wy)
            for (int wx = 0; wx < ws; ++wx, ++i)
              (*out)[std::size_t(
                  (std::int64_t(n) * xs.c + c) * h * w +
                  std::int64_t(ty * ws + wy) * w + tx * ws + wx)] =
                  x.data()[i];
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    std::int64_t i2 = 0;
    for (int n = 0; n < n0; ++n)
      for (int ty = 0; ty < nh; ++ty)
        for (int tx = 0; tx < nw; ++tx)
          for (int c = 0; c < xs.c; ++c)
            for (int wy = 0; wy < ws; ++wy)
              for (int wx = 0; wx < ws; ++wx, ++i2)
                gx[std::size_t(i2)] += go[std::size_t(
                    (std::int64_t(n) * xs.c + c) * h * w +
                    std::int64_t(ty * ws + wy) * w + tx * ws + wx)];
  });
}

// ---------------------------------------------------------------------------
// reductions and unary ops

Tensor sum_all(const Tensor& x) {
  Tape* tp = tape_of({&x});
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += double(x.data()[i]);
  const Shape os(1, 1, 1, 1);
  auto out = alloc(1);
  (*out)[0] = Real(acc);
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const Real g = (*t.node_at(self).grad)[0];
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (auto& v : gx) v += g;
  });
}

// Computed as (double sum) / n so that mean of n equal values is that value
// exactly; several exact-identity contracts lean on this.
Tensor mean_all(const Tensor& x) {
  Tape* tp = tape_of({&x});
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += double(x.data()[i]);
  const std::int64_t count = x.numel();
  const Shape os(1, 1, 1, 1);
  auto out = alloc(1);
  (*out)[0] = Real(acc / double(count));
  if (!tp) return Tensor(os, std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(os, out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const Real g = (*t.node_at(self).grad)[0];
    const Real share = Real(double(g) / double(count));
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (auto& v : gx) v += share;
  });
}

Tensor scale(const Tensor& x, Real s) {
  Tape* tp = tape_of({&x});
  auto out = alloc(x.numel());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    (*out)[std::size_t(i)] = x.data()[i] * s;
  if (!tp) return Tensor(x.shape(), std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(x.shape(), out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s;
  });
}

Tensor add_const(const Tensor& x, Real c) {
  Tape* tp = tape_of({&x});
  auto out = alloc(x.numel());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    (*out)[std::size_t(i)] = x.data()[i] + c;
  if (!tp) return Tensor(x.shape(), std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(x.shape(), out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

Tensor abs_val(const Tensor& x) {
  Tape* tp = tape_of({&x});
  auto out = alloc(x.numel());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    (*out)[std::size_t(i)] = std::abs(x.data()[i]);
  if (!tp) return Tensor(x.shape(), std::move(*out));
  Src sx = src_of(x, tp);
  return tp->emit(x.shape(), out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const Real* px = sx.data->data();
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (px[i] > 0)
        gx[i] += go[i];
      else if (px[i] < 0)
        gx[i] -= go[i];
    }
  });
}

Tensor sqrt_val(const Tensor& x) {
  Tape* tp = tape_of({&x});
  auto out = alloc(x.numel());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const Real v = x.data()[i];
    if (!(v > Real(0)))
      throw ContractError("sqrt_val requires strictly positive input");
    (*out)[std::size_t(i)] = Real(std::sqrt(double(v)));
  }
  if (!tp) return Tensor(x.shape(), std::move(*out));
  Src sx = src_of(x, tp);
  auto y = out;
  return tp->emit(x.shape(), out, {sx.id}, [=](Tape& t, int self) {
    if (sx.id < 0) return;
    const std::vector<Real>& go = *t.node_at(self).grad;
    std::vector<Real>& gx = t.grad_buf(sx.id);
    const Real* py = y->data();
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] / (Real(2) * py[i]);
  });
}

}  // namespace uvz
