#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xstream/error.hpp"

namespace xstream {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. Every dimension is >= 1; a default-constructed
// tensor has no shape and is only used as an unset placeholder.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape);
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor full(Shape shape, T value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  // Rank-2 helpers.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }

  std::span<const T> row(std::size_t r) const;
  std::span<T> row(std::size_t r);

  BasicTensor reshaped(Shape shape) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Row-major boolean matrix; true means "query row may attend key column".
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool fill = false)
      : rows(r), cols(c), bits(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits[r * cols + c] = v ? 1 : 0; }
  bool operator==(const BoolMatrix&) const = default;
};

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool frozen = false;
};

// Named parameters in insertion order. References returned by add() stay
// valid for the lifetime of the store.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, BasicTensor<T> init);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Parameter<T>>& all() noexcept { return params_; }
  const std::deque<Parameter<T>>& all() const noexcept { return params_; }
  std::size_t element_count() const;

  void zero_grad();

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>()).frozen = p.frozen;
    return out;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

// Tape-based reverse-mode differentiation. Nodes are appended in evaluation
// order, which is a topological order; backward() walks it in reverse and
// visits each node once.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var input(TensorT value);
  // The referenced tensor must outlive the graph.
  Var input_ref(const TensorT& value);
  // Gradients flow into p.grad on backward() unless p.frozen.
  Var param(Parameter<T>& p);
  // Read-only binding; never receives gradients.
  Var param(const Parameter<T>& p) { return input_ref(p.value); }

  const TensorT& value(Var v) const;
  const TensorT& grad(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }
  // Non-recording graphs only: drops the values of nodes created at or after
  // `mark`, except `keep`. No-op while recording.
  void release_since(std::size_t mark, std::initializer_list<Var> keep);

  // Seeds d(loss)/d(loss) = 1; loss must hold exactly one element.
  void backward(Var loss);

  Var matmul(Var a, Var b);
  // a[m,k] x b[n,k]^T -> [m,n]
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  // a[m,n] + bias[n] broadcast over rows; the only broadcast supported.
  Var add_bias(Var a, Var bias);
  Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }
  Var silu(Var a);
  // Softmax over the last dim. Masked entries get probability 0; a row with
  // nothing allowed yields all zeros.
  Var softmax(Var a, const BoolMatrix* mask = nullptr);
  Var layernorm(Var x, Var gain, Var bias, T eps = T(1e-5));
  // Rotates consecutive (even, odd) column pairs of x[rows, cols]. cos/sin
  // have rows * cols/2 entries, one angle per (row, pair).
  Var pair_rotate(Var x, std::shared_ptr<const std::vector<T>> cos,
                  std::shared_ptr<const std::vector<T>> sin);
  // Multi-head scaled dot-product attention. q[Q, H*d], k/v[S, H*d];
  // mask is Q x S (nullptr = all allowed).
  Var attention(Var q, Var k, Var v, std::size_t heads, std::shared_ptr<const BoolMatrix> mask);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var gather_rows(Var table, std::span<const std::uint32_t> ids);
  Var sum(Var a);
  Var mse(Var a, Var b);
  // sum_r w_r * sum_c (a-b)^2 / (cols * sum_r w_r); zero when all weights are 0.
  Var weighted_row_mse(Var a, Var b, std::vector<T> row_weights);

 private:
  struct Node {
    TensorT own;
    const TensorT* ext = nullptr;
    TensorT grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    std::function<void(Graph&)> backward;
    const TensorT& value() const { return ext ? *ext : own; }
  };

  Var push(TensorT value, bool requires_grad, std::function<void(Graph&)> bw);
  bool needs(Var v) const { return record_ && nodes_[v.id].requires_grad; }
  TensorT& grad_slot(Var v);
  const Node& node(Var v) const;

  bool record_;
  std::vector<Node> nodes_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements_checked = 0;
};

// Compares backward() gradients against central differences for every element
// of every non-frozen parameter. Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult grad_check(ParamStore<double>& params,
                           const std::function<Var(Graph<double>&)>& loss_fn, double eps);

// Plain helpers (no graph).
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& bias, T eps = T(1e-5));

}  // namespace xstream
