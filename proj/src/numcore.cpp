#include "xstream/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <type_traits>

namespace xstream {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dims must be >= 1, got " + shape_str(shape));
}

// Hot kernels get an AVX2 build next to the portable one, picked at load
// time. Both do the same IEEE operations in the same order.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define XS_SIMD __attribute__((target_clones("avx2", "default")))
#else
#define XS_SIMD
#endif

constexpr std::size_t kVecBytes = 32;
template <typename T>
constexpr std::size_t kLanes = kVecBytes / sizeof(T);
template <typename T>
struct VecOf {
  typedef T type __attribute__((vector_size(kVecBytes)));
};
template <typename T>
using Vec = typename VecOf<T>::type;
static_assert(sizeof(Vec<float>) == kVecBytes && sizeof(Vec<double>) == kVecBytes);

// Always inlined, so the vector-argument ABI note does not apply.
#pragma GCC diagnostic ignored "-Wpsabi"
template <typename T>
[[gnu::always_inline]] inline Vec<T> vload(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
[[gnu::always_inline]] inline void vstore(T* p, Vec<T> v) {
  std::memcpy(p, &v, sizeof v);
}

// exp over float lanes: polynomial after range reduction, relative error
// around 2e-7; inputs below -87 flush to exp(-87).
[[gnu::always_inline]] inline Vec<float> vexp(Vec<float> x) {
  using V = Vec<float>;
  using VI = typename VecOf<std::int32_t>::type;
  const V lo = V{} - 87.0f, hi = V{} + 88.0f;
  x = x < lo ? lo : x;
  x = x > hi ? hi : x;
  const V fx = x * 1.44269504088896341f + 0.5f;
  V fl = __builtin_convertvector(__builtin_convertvector(fx, VI), V);
  fl = fl > fx ? fl - 1.0f : fl;
  x = x - fl * 0.693359375f;
  x = x + fl * 2.12194440e-4f;
  V y = V{} + 1.9875691500e-4f;
  y = y * x + 1.3981999507e-3f;
  y = y * x + 8.3333452301e-3f;
  y = y * x + 4.1665795894e-2f;
  y = y * x + 1.6666665459e-1f;
  y = y * x + 5.0000001201e-1f;
  y = y * (x * x) + x + 1.0f;
  const VI e = (__builtin_convertvector(fl, VI) + 127) << 23;
  V scale;
  std::memcpy(&scale, &e, sizeof scale);
  return y * scale;
}

template <typename T>
XS_SIMD void silu_inplace(T* x, std::size_t n) {
  std::size_t i = 0;
  if constexpr (std::is_same_v<T, float>) {
    constexpr std::size_t L = kLanes<float>;
    for (; i + L <= n; i += L) {
      const Vec<float> v = vload<float>(x + i);
      vstore<float>(x + i, v / (1.0f + vexp(-v)));
    }
  }
  for (; i < n; ++i) x[i] = x[i] / (T(1) + std::exp(-x[i]));
}

template <typename T>
XS_SIMD T row_max(const T* s, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  std::size_t t = 0;
  if (n >= kLanes<T>) {
    Vec<T> m = vload<T>(s);
    for (t = kLanes<T>; t + kLanes<T> <= n; t += kLanes<T>) {
      const Vec<T> x = vload<T>(s + t);
      m = x > m ? x : m;
    }
    for (std::size_t u = 0; u < kLanes<T>; ++u) mx = std::max(mx, m[u]);
  }
  for (; t < n; ++t) mx = std::max(mx, s[t]);
  return mx;
}

// s[t] = exp(s[t] - mx) for t < n; returns the sum.
template <typename T>
XS_SIMD T exp_shifted(T* s, std::size_t n, T mx) {
  std::size_t t = 0;
  T z = 0;
  if constexpr (std::is_same_v<T, float>) {
    using V = Vec<float>;
    V acc{};
    constexpr std::size_t L = kLanes<float>;
    for (; t + L <= n; t += L) {
      const V y = vexp(vload<float>(s + t) - mx);
      vstore<float>(s + t, y);
      acc += y;
    }
    for (std::size_t u = 0; u < L; ++u) z += acc[u];
  }
  for (; t < n; ++t) {
    s[t] = std::exp(s[t] - mx);
    z += s[t];
  }
  return z;
}

// C[m,n] (+)= A[m,k] * B[k,n]. Every element accumulates over p in ascending
// order, so a row's result does not depend on how many other rows are in the
// product.
template <typename T>
XS_SIMD void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t R = 4, W = 2 * kLanes<T>;
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    const T* ar = a + i * k;
    std::size_t j = 0;
    // 4xW tile of C held in registers across the whole k loop.
    for (; j + W <= n; j += W) {
      Vec<T> acc[R][2];
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t h = 0; h < 2; ++h) acc[r][h] = vload<T>(c + (i + r) * n + j + h * W / 2);
      for (std::size_t p = 0; p < k; ++p) {
        const Vec<T> b0 = vload<T>(b + p * n + j), b1 = vload<T>(b + p * n + j + W / 2);
        for (std::size_t r = 0; r < R; ++r) {
          const T x = ar[r * k + p];
          acc[r][0] += x * b0;
          acc[r][1] += x * b1;
        }
      }
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t h = 0; h < 2; ++h) vstore<T>(c + (i + r) * n + j + h * W / 2, acc[r][h]);
    }
    for (; j < n; ++j)
      for (std::size_t r = 0; r < R; ++r) {
        T acc = c[(i + r) * n + j];
        for (std::size_t p = 0; p < k; ++p) acc += ar[r * k + p] * b[p * n + j];
        c[(i + r) * n + j] = acc;
      }
  }
  for (; i < m; ++i) {
    T* __restrict ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict bp = b + p * n;
      const T x = ai[p];
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[k,n] (+)= A[m,k]^T * D[m,n]
template <typename T>
void gemm_tn(const T* a, const T* d, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> at(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(at.data(), d, c, k, m, n);
}

// Attention for `rows` query rows that share one key list of n keys. q and o
// point at the head's first column with row stride `width`; kt is [hd, n]
// and vg [n, hd]. Scores sum over p in ascending order.
template <typename T>
XS_SIMD void attend_rows(const T* q, std::size_t width, std::size_t rows, const T* kt, const T* vg, std::size_t n,
                         std::size_t hd, T scl, T* sc, T* o, T* probs, const std::size_t* poff) {
  // Four query rows at a time reuse each loaded key and value.
  for (std::size_t ib = 0; ib < rows; ib += 4) {
    const std::size_t R = std::min<std::size_t>(4, rows - ib);
    T* __restrict s0 = sc;
    std::size_t t0 = 0;
    constexpr std::size_t L = kLanes<T>;
    if (R == 4) {
      const T* q0 = q + ib * width;
      for (; t0 + 2 * L <= n; t0 += 2 * L) {
        Vec<T> acc[4][2] = {};
        for (std::size_t p = 0; p < hd; ++p) {
          const Vec<T> k0 = vload<T>(kt + p * n + t0), k1 = vload<T>(kt + p * n + t0 + L);
          for (std::size_t r = 0; r < 4; ++r) {
            const T x = q0[r * width + p];
            acc[r][0] += x * k0;
            acc[r][1] += x * k1;
          }
        }
        for (std::size_t r = 0; r < 4; ++r) {
          vstore<T>(s0 + r * n + t0, acc[r][0] * scl);
          vstore<T>(s0 + r * n + t0 + L, acc[r][1] * scl);
        }
      }
    }
    for (std::size_t r = 0; r < R; ++r) {
      const T* qi = q + (ib + r) * width;
      T* __restrict sr = s0 + r * n;
      for (std::size_t t = t0; t < n; ++t) {
        T acc = 0;
        for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kt[p * n + t];
        sr[t] = acc * scl;
      }
    }
    for (std::size_t r = 0; r < R; ++r) {
      T* __restrict s = s0 + r * n;
      const T z = exp_shifted(s, n, row_max(s, n));
      for (std::size_t t = 0; t < n; ++t) s[t] = s[t] / z;
      if (probs) std::copy(s, s + n, probs + poff[ib + r]);
    }
    std::size_t r = 0;
    // Two rows at a time, their output rows held in registers.
    auto pv = [&]<std::size_t NV>() {
      for (; r + 2 <= R; r += 2) {
        const T* sa = s0 + r * n;
        const T* sb = sa + n;
        Vec<T> a[NV] = {}, c[NV] = {};
        for (std::size_t t = 0; t < n; ++t) {
          const T* vt = vg + t * hd;
          const T pa = sa[t], pb = sb[t];
          for (std::size_t u = 0; u < NV; ++u) {
            const Vec<T> x = vload<T>(vt + u * L);
            a[u] += pa * x;
            c[u] += pb * x;
          }
        }
        T* oa = o + (ib + r) * width;
        for (std::size_t u = 0; u < NV; ++u) {
          vstore<T>(oa + u * L, a[u]);
          vstore<T>(oa + width + u * L, c[u]);
        }
      }
    };
    if (hd == L) pv.template operator()<1>();
    if (hd == 2 * L) pv.template operator()<2>();
    if (hd == 4 * L) pv.template operator()<4>();
    for (; r < R; ++r) {
      const T* __restrict s = s0 + r * n;
      T* __restrict oi = o + (ib + r) * width;
      for (std::size_t t = 0; t < n; ++t) {
        const T pt = s[t];
        const T* __restrict vt = vg + t * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += pt * vt[c];
      }
    }
  }
}

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------- BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_size(shape_), T(0));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (data_.size() != shape_size(shape_))
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  BasicTensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
  if (i >= shape_.size()) throw DimensionError("dim index out of range");
  return shape_[i];
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  require_rank2(*this, "rows");
  return shape_[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  require_rank2(*this, "cols");
  return shape_[1];
}

template <typename T>
std::span<const T> BasicTensor<T>::row(std::size_t r) const {
  const std::size_t c = shape_.back();
  return std::span<const T>(data_).subspan(r * c, c);
}

template <typename T>
std::span<T> BasicTensor<T>::row(std::size_t r) {
  const std::size_t c = shape_.back();
  return std::span<T>(data_).subspan(r * c, c);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  return BasicTensor(std::move(shape), data_);
}

// ---------------------------------------------------------------- ParamStore

template <typename T>
Parameter<T>& ParamStore<T>::add(std::string name, BasicTensor<T> init) {
  if (index_.count(name)) throw StateError("duplicate parameter '" + name + "'");
  index_.emplace(name, params_.size());
  auto& p = params_.emplace_back();
  p.name = std::move(name);
  p.grad = BasicTensor<T>(init.shape());
  p.value = std::move(init);
  return p;
}

template <typename T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename T>
std::size_t ParamStore<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.data().begin(), p.grad.data().end(), T(0));
}

// ---------------------------------------------------------------- Graph core

template <typename T>
Var Graph<T>::push(TensorT value, bool requires_grad, std::function<void(Graph&)> bw) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw StateError("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::input(TensorT value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
Var Graph<T>::input_ref(const TensorT& value) {
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::param(Parameter<T>& p) {
  Node n;
  n.ext = &p.value;
  n.param = &p;
  n.requires_grad = record_ && !p.frozen;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::release_since(std::size_t mark, std::initializer_list<Var> keep) {
  if (record_) return;
  for (std::size_t i = mark; i < nodes_.size(); ++i) {
    bool kept = false;
    for (Var k : keep) kept = kept || k.id == i;
    if (!kept) nodes_[i].own = TensorT();
  }
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
const BasicTensor<T>& Graph<T>::grad(Var v) const {
  return node(v).grad;
}

template <typename T>
BasicTensor<T>& Graph<T>::grad_slot(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = TensorT(n.value().shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (!record_) throw StateError("backward() on a graph that does not record");
  const auto& lv = value(loss);
  if (lv.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(lv.shape()));
  if (!nodes_[loss.id].requires_grad) return;
  grad_slot(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this);
    if (n.param && !n.param->frozen) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
}

// ---------------------------------------------------------------- ops

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k)
    throw DimensionError("matmul: inner dims differ " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  TensorT out({m, n});
  gemm_nn(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  const bool rg = needs(a) || needs(b);
  return push(std::move(out), rg, [a, b, m, k, n, self = Var{static_cast<std::uint32_t>(nodes_.size())}](Graph& g) {
    const T* dc = g.nodes_[self.id].grad.data().data();
    if (g.needs(a)) gemm_nt(dc, g.value(b).data().data(), g.grad_slot(a).data().data(), m, n, k);
    if (g.needs(b)) gemm_tn(g.value(a).data().data(), dc, g.grad_slot(b).data().data(), m, k, n);
  });
}

template <typename T>
Var Graph<T>::matmul_nt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2(A, "matmul_nt");
  require_rank2(B, "matmul_nt");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k)
    throw DimensionError("matmul_nt: inner dims differ " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  TensorT out({m, n});
  gemm_nt(A.data().data(), B.data().data(), out.data().data(), m, k, n);
  const bool rg = needs(a) || needs(b);
  return push(std::move(out), rg, [a, b, m, k, n, self = Var{static_cast<std::uint32_t>(nodes_.size())}](Graph& g) {
    const T* dc = g.nodes_[self.id].grad.data().data();
    // dA[m,k] = dC[m,n] * B[n,k]; dB[n,k] = dC^T[n,m] * A[m,k]
    if (g.needs(a)) gemm_nn(dc, g.value(b).data().data(), g.grad_slot(a).data().data(), m, n, k);
    if (g.needs(b)) gemm_tn(dc, g.value(a).data().data(), g.grad_slot(b).data().data(), m, n, k);
  });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same(A, B, "add");
  TensorT out = A;
  auto o = out.data();
  auto bd = B.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a) || needs(b), [a, b, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    for (Var v : {a, b}) {
      if (!g.needs(v)) continue;
      auto d = g.grad_slot(v).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
  });
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same(A, B, "sub");
  TensorT out = A;
  auto o = out.data();
  auto bd = B.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a) || needs(b), [a, b, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    if (g.needs(a)) {
      auto d = g.grad_slot(a).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
    if (g.needs(b)) {
      auto d = g.grad_slot(b).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dc[i];
    }
  });
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same(A, B, "mul");
  TensorT out = A;
  auto o = out.data();
  auto bd = B.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a) || needs(b), [a, b, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    if (g.needs(a)) {
      auto d = g.grad_slot(a).data();
      auto bv = g.value(b).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * bv[i];
    }
    if (g.needs(b)) {
      auto d = g.grad_slot(b).data();
      auto av = g.value(a).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * av[i];
    }
  });
}

template <typename T>
Var Graph<T>::scale(Var a, T s) {
  TensorT out = value(a);
  for (auto& x : out.data()) x *= s;
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a), [a, s, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    auto d = g.grad_slot(a).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * s;
  });
}

template <typename T>
Var Graph<T>::add_bias(Var a, Var bias) {
  const auto& A = value(a);
  const auto& B = value(bias);
  require_rank2(A, "add_bias");
  const std::size_t m = A.rows(), n = A.cols();
  if (B.size() != n)
    throw DimensionError("add_bias: bias " + shape_str(B.shape()) + " does not match " + shape_str(A.shape()));
  TensorT out = A;
  auto bd = B.data();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < n; ++j) r[j] += bd[j];
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a) || needs(bias), [a, bias, m, n, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    if (g.needs(a)) {
      auto d = g.grad_slot(a).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
    if (g.needs(bias)) {
      auto d = g.grad_slot(bias).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += dc[i * n + j];
    }
  });
}

template <typename T>
Var Graph<T>::silu(Var a) {
  TensorT out = value(a);
  silu_inplace(out.data().data(), out.size());
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a), [a, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    const auto x = g.value(a).data();
    auto d = g.grad_slot(a).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      d[i] += dc[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var Graph<T>::softmax(Var a, const BoolMatrix* mask) {
  const auto& A = value(a);
  const std::size_t n = A.shape().back();
  const std::size_t m = A.size() / n;
  if (mask && (mask->rows != m || mask->cols != n)) throw DimensionError("softmax: mask shape mismatch");
  TensorT out(A.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto x = A.row(i);
    auto y = out.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)(i, j)) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(a), [a, m, n, self](Graph& g) {
    const auto& y = g.nodes_[self.id].value();
    const auto& dy = g.nodes_[self.id].grad;
    auto& dx = g.grad_slot(a);
    for (std::size_t i = 0; i < m; ++i) {
      auto yr = y.row(i);
      auto dyr = dy.row(i);
      auto dxr = dx.row(i);
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * dyr[j];
      for (std::size_t j = 0; j < n; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
    }
  });
}

template <typename T>
Var Graph<T>::layernorm(Var x, Var gain, Var bias, T eps) {
  const auto& X = value(x);
  const std::size_t n = X.shape().back();
  const std::size_t m = X.size() / n;
  if (value(gain).size() != n || value(bias).size() != n) throw DimensionError("layernorm: affine size mismatch");
  if (n < 2) throw DimensionError("layernorm: normalization dim must have >= 2 elements");
  TensorT out(X.shape());
  auto stats = std::make_shared<std::vector<T>>(2 * m);  // mean, rstd
  const auto gd = value(gain).data();
  const auto bd = value(bias).data();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = X.row(i);
    T mean = 0;
    for (auto v : r) mean += v;
    mean /= T(n);
    T var = 0;
    for (auto v : r) var += (v - mean) * (v - mean);
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    (*stats)[2 * i] = mean;
    (*stats)[2 * i + 1] = rstd;
    auto o = out.row(i);
    for (std::size_t j = 0; j < n; ++j) o[j] = (r[j] - mean) * rstd * gd[j] + bd[j];
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(x) || needs(gain) || needs(bias), [x, gain, bias, m, n, stats, self](Graph& g) {
    const auto& dy = g.nodes_[self.id].grad;
    const auto& X = g.value(x);
    const auto gd = g.value(gain).data();
    std::vector<T> xhat(n), dxhat(n);
    for (std::size_t i = 0; i < m; ++i) {
      const T mean = (*stats)[2 * i], rstd = (*stats)[2 * i + 1];
      auto r = X.row(i);
      auto dyr = dy.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (r[j] - mean) * rstd;
        dxhat[j] = dyr[j] * gd[j];
      }
      if (g.needs(gain)) {
        auto dg = g.grad_slot(gain).data();
        for (std::size_t j = 0; j < n; ++j) dg[j] += dyr[j] * xhat[j];
      }
      if (g.needs(bias)) {
        auto db = g.grad_slot(bias).data();
        for (std::size_t j = 0; j < n; ++j) db[j] += dyr[j];
      }
      if (g.needs(x)) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
        }
        mean_d /= T(n);
        mean_dx /= T(n);
        auto dxr = g.grad_slot(x).row(i);
        for (std::size_t j = 0; j < n; ++j) dxr[j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
      }
    }
  });
}

template <typename T>
Var Graph<T>::pair_rotate(Var x, std::shared_ptr<const std::vector<T>> cos, std::shared_ptr<const std::vector<T>> sin) {
  const auto& X = value(x);
  require_rank2(X, "pair_rotate");
  const std::size_t m = X.rows(), n = X.cols();
  if (n % 2 != 0) throw DimensionError("pair_rotate: column count must be even");
  const std::size_t pairs = n / 2;
  if (cos->size() != m * pairs || sin->size() != m * pairs) throw DimensionError("pair_rotate: angle table size mismatch");
  TensorT out(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto r = X.row(i);
    auto o = out.row(i);
    for (std::size_t p = 0; p < pairs; ++p) {
      const T c = (*cos)[i * pairs + p], s = (*sin)[i * pairs + p];
      o[2 * p] = r[2 * p] * c - r[2 * p + 1] * s;
      o[2 * p + 1] = r[2 * p] * s + r[2 * p + 1] * c;
    }
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(x), [x, m, pairs, cos, sin, self](Graph& g) {
    const auto& dy = g.nodes_[self.id].grad;
    auto& dx = g.grad_slot(x);
    for (std::size_t i = 0; i < m; ++i) {
      auto d = dy.row(i);
      auto o = dx.row(i);
      for (std::size_t p = 0; p < pairs; ++p) {
        const T c = (*cos)[i * pairs + p], s = (*sin)[i * pairs + p];
        o[2 * p] += d[2 * p] * c + d[2 * p + 1] * s;
        o[2 * p + 1] += -d[2 * p] * s + d[2 * p + 1] * c;
      }
    }
  });
}

template <typename T>
Var Graph<T>::attention(Var q, Var k, Var v, std::size_t heads, std::shared_ptr<const BoolMatrix> mask) {
  const auto& Q = value(q);
  const auto& K = value(k);
  const auto& V = value(v);
  require_rank2(Q, "attention");
  require_rank2(K, "attention");
  require_rank2(V, "attention");
  const std::size_t nq = Q.rows(), ns = K.rows(), width = Q.cols();
  if (heads == 0 || width % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (K.cols() != width || V.cols() != width || V.rows() != ns) throw DimensionError("attention: q/k/v shape mismatch");
  if (mask && (mask->rows != nq || mask->cols != ns))
    throw DimensionError("attention: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                         " does not match " + std::to_string(nq) + "x" + std::to_string(ns));
  const std::size_t hd = width / heads;
  const T scl = T(1) / std::sqrt(T(hd));
  const bool rg = needs(q) || needs(k) || needs(v);

  // Allowed keys per query row, ascending. Rows with the same mask row share
  // one key list; poff indexes each row's probabilities.
  struct Rows {
    std::vector<std::uint32_t> keys;
    std::vector<std::size_t> kb, ke, poff;
  };
  auto rows = std::make_shared<Rows>();
  rows->kb.resize(nq);
  rows->ke.resize(nq);
  rows->poff.resize(nq + 1, 0);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::uint8_t* mr = mask ? mask->bits.data() + i * ns : nullptr;
    if (i > 0 && (!mask || std::memcmp(mr, mr - ns, ns) == 0)) {
      rows->kb[i] = rows->kb[i - 1];
      rows->ke[i] = rows->ke[i - 1];
    } else {
      rows->kb[i] = rows->keys.size();
      for (std::size_t j = 0; j < ns; ++j)
        if (!mr || mr[j]) rows->keys.push_back(static_cast<std::uint32_t>(j));
      rows->ke[i] = rows->keys.size();
    }
    rows->poff[i + 1] = rows->poff[i] + (rows->ke[i] - rows->kb[i]);
  }
  const std::size_t nnz = rows->poff[nq];
  auto probs = rg ? std::make_shared<std::vector<T>>(heads * nnz, T(0)) : nullptr;

  TensorT out({nq, width});
  const T* qd = Q.data().data();
  const T* kd = K.data().data();
  const T* vd = V.data().data();
  T* od = out.data().data();
  const std::uint32_t* kl = rows->keys.data();
  // Runs of rows with one key list share a gathered, transposed copy of their
  // keys and values. Each score still sums over p in ascending order.
  std::vector<T> kt, vg, sc(4 * ns);
  for (std::size_t i0 = 0; i0 < nq;) {
    std::size_t i1 = i0 + 1;
    while (i1 < nq && rows->kb[i1] == rows->kb[i0] && rows->ke[i1] == rows->ke[i0]) ++i1;
    const std::size_t b = rows->kb[i0], n = rows->ke[i0] - b;
    if (n == 0) {
      i0 = i1;
      continue;
    }
    kt.resize(hd * n);
    vg.resize(n * hd);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const T* kj = kd + kl[b + t] * width + off;
        const T* vj = vd + kl[b + t] * width + off;
        for (std::size_t p = 0; p < hd; ++p) kt[p * n + t] = kj[p];
        std::copy(vj, vj + hd, vg.data() + t * hd);
      }
      attend_rows(qd + i0 * width + off, width, i1 - i0, kt.data(), vg.data(), n, hd, scl, sc.data(),
                  od + i0 * width + off, probs ? probs->data() + h * nnz : nullptr, rows->poff.data() + i0);
    }
    i0 = i1;
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), rg, [q, k, v, heads, nq, ns, width, hd, scl, probs, rows, nnz, self](Graph& g) {
    const T* dout = g.nodes_[self.id].grad.data().data();
    const T* qd = g.value(q).data().data();
    const T* kd = g.value(k).data().data();
    const T* vd = g.value(v).data().data();
    T* dq = g.needs(q) ? g.grad_slot(q).data().data() : nullptr;
    T* dk = g.needs(k) ? g.grad_slot(k).data().data() : nullptr;
    T* dv = g.needs(v) ? g.grad_slot(v).data().data() : nullptr;
    std::vector<T> dp(ns);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t b = rows->kb[i], e = rows->ke[i];
        const std::uint32_t* kl = rows->keys.data();
        const T* P = probs->data() + h * nnz + rows->poff[i];
        const T* doi = dout + i * width + off;
        T acc = 0;
        for (std::size_t t = b; t < e; ++t) {
          const T* vj = vd + kl[t] * width + off;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += doi[c] * vj[c];
          dp[t - b] = s;
          acc += P[t - b] * s;
        }
        const T* qi = qd + i * width + off;
        for (std::size_t t = b; t < e; ++t) {
          const std::size_t j = kl[t];
          const T ds = P[t - b] * (dp[t - b] - acc) * scl;
          const T* kj = kd + j * width + off;
          if (dq)
            for (std::size_t c = 0; c < hd; ++c) dq[i * width + off + c] += ds * kj[c];
          if (dk)
            for (std::size_t c = 0; c < hd; ++c) dk[j * width + off + c] += ds * qi[c];
          if (dv)
            for (std::size_t c = 0; c < hd; ++c) dv[j * width + off + c] += P[t - b] * doi[c];
        }
      }
    }
  });
}

template <typename T>
Var Graph<T>::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = value(parts[0]).shape().back();
  std::size_t m = 0;
  bool rg = false;
  for (Var p : parts) {
    const auto& t = value(p);
    require_rank2(t, "concat_rows");
    if (t.cols() != n) throw DimensionError("concat_rows: column mismatch");
    m += t.rows();
    rg = rg || needs(p);
  }
  std::vector<T> data;
  data.reserve(m * n);
  for (Var p : parts) {
    auto d = value(p).data();
    data.insert(data.end(), d.begin(), d.end());
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(TensorT({m, n}, std::move(data)), rg, [ps, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t len = g.value(p).size();
      if (g.needs(p)) {
        auto d = g.grad_slot(p).data();
        for (std::size_t i = 0; i < len; ++i) d[i] += dc[off + i];
      }
      off += len;
    }
  });
}

template <typename T>
Var Graph<T>::slice_rows(Var a, std::size_t start, std::size_t count) {
  const auto& A = value(a);
  require_rank2(A, "slice_rows");
  if (count == 0 || start + count > A.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t n = A.cols();
  std::vector<T> data(A.data().begin() + start * n, A.data().begin() + (start + count) * n);
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(TensorT({count, n}, std::move(data)), needs(a), [a, start, n, self](Graph& g) {
    const auto dc = g.nodes_[self.id].grad.data();
    auto d = g.grad_slot(a).data();
    for (std::size_t i = 0; i < dc.size(); ++i) d[start * n + i] += dc[i];
  });
}

template <typename T>
Var Graph<T>::gather_rows(Var table, std::span<const std::uint32_t> ids) {
  const auto& W = value(table);
  require_rank2(W, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  const std::size_t n = W.cols();
  TensorT out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= W.rows()) throw InputError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    auto src = W.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(std::move(out), needs(table), [table, idv, self](Graph& g) {
    const auto& dc = g.nodes_[self.id].grad;
    auto& d = g.grad_slot(table);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      auto src = dc.row(i);
      auto dst = d.row(idv[i]);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var Graph<T>::sum(Var a) {
  T s = 0;
  for (auto x : value(a).data()) s += x;
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(TensorT({1}, {s}), needs(a), [a, self](Graph& g) {
    const T dc = g.nodes_[self.id].grad[0];
    for (auto& d : g.grad_slot(a).data()) d += dc;
  });
}

template <typename T>
Var Graph<T>::mse(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same(A, B, "mse");
  T s = 0;
  auto ad = A.data();
  auto bd = B.data();
  for (std::size_t i = 0; i < ad.size(); ++i) s += (ad[i] - bd[i]) * (ad[i] - bd[i]);
  const T n = T(ad.size());
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(TensorT({1}, {s / n}), needs(a) || needs(b), [a, b, n, self](Graph& g) {
    const T dc = g.nodes_[self.id].grad[0];
    auto ad = g.value(a).data();
    auto bd = g.value(b).data();
    if (g.needs(a)) {
      auto d = g.grad_slot(a).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc * T(2) * (ad[i] - bd[i]) / n;
    }
    if (g.needs(b)) {
      auto d = g.grad_slot(b).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dc * T(2) * (ad[i] - bd[i]) / n;
    }
  });
}

template <typename T>
Var Graph<T>::weighted_row_mse(Var a, Var b, std::vector<T> row_weights) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_same(A, B, "weighted_row_mse");
  require_rank2(A, "weighted_row_mse");
  const std::size_t m = A.rows(), n = A.cols();
  if (row_weights.size() != m) throw DimensionError("weighted_row_mse: weight count mismatch");
  T wsum = 0;
  for (auto w : row_weights) wsum += w;
  const T denom = wsum * T(n);
  T s = 0;
  if (denom > T(0)) {
    for (std::size_t i = 0; i < m; ++i) {
      if (row_weights[i] == T(0)) continue;
      T r = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T d = A.at(i, j) - B.at(i, j);
        r += d * d;
      }
      s += row_weights[i] * r;
    }
    s /= denom;
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push(TensorT({1}, {s}), (needs(a) || needs(b)) && denom > T(0),
              [a, b, m, n, denom, w = std::move(row_weights), self](Graph& g) {
                const T dc = g.nodes_[self.id].grad[0];
                const auto& A = g.value(a);
                const auto& B = g.value(b);
                T* da = g.needs(a) ? g.grad_slot(a).data().data() : nullptr;
                T* db = g.needs(b) ? g.grad_slot(b).data().data() : nullptr;
                for (std::size_t i = 0; i < m; ++i) {
                  if (w[i] == T(0)) continue;
                  const T f = dc * T(2) * w[i] / denom;
                  for (std::size_t j = 0; j < n; ++j) {
                    const T d = (A.at(i, j) - B.at(i, j)) * f;
                    if (da) da[i * n + j] += d;
                    if (db) db[i * n + j] -= d;
                  }
                }
              });
}

// ---------------------------------------------------------------- grad check

GradCheckResult grad_check(ParamStore<double>& params, const std::function<Var(Graph<double>&)>& loss_fn,
                           double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw GradCheckError("grad_check: eps must lie in [1e-6, 1e-3]");
  params.zero_grad();
  {
    Graph<double> g(true);
    Var loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph<double> g(false);
    return g.value(loss_fn(g))[0];
  };
  GradCheckResult res;
  for (auto& p : params.all()) {
    if (p.frozen) continue;
    for (double gv : p.grad.data())
      if (!std::isfinite(gv)) throw GradCheckError("grad_check: non-finite gradient in parameter '" + p.name + "'");
    auto vals = p.value.data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double up = eval();
      vals[i] = saved - eps;
      const double down = eval();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.elements_checked;
      if (res.elements_checked == 1 || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------- helpers

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Graph<T> g(false);
  return g.value(g.matmul(g.input_ref(a), g.input_ref(b)));
}

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x) {
  Graph<T> g(false);
  return g.value(g.softmax(g.input_ref(x)));
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  Graph<T> g(false);
  return g.value(g.layernorm(g.input_ref(x), g.input_ref(gain), g.input_ref(bias), eps));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Graph<float>;
template class Graph<double>;
template BasicTensor<float> matmul(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> matmul(const BasicTensor<double>&, const BasicTensor<double>&);
template BasicTensor<float> softmax_lastdim(const BasicTensor<float>&);
template BasicTensor<double> softmax_lastdim(const BasicTensor<double>&);
template BasicTensor<float> layernorm(const BasicTensor<float>&, const BasicTensor<float>&, const BasicTensor<float>&,
                                      float);
template BasicTensor<double> layernorm(const BasicTensor<double>&, const BasicTensor<double>&,
                                       const BasicTensor<double>&, double);

}  // namespace xstream
