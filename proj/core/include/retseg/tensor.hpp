#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "retseg/errors.hpp"

namespace retseg {

template <class T>
class Tape;

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const std::vector<int>& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major tensor with an optional gradient buffer. Value-semantic
// handle over shared storage: copies alias the same data, clone() deep-copies.
// Ops record their backward closure on a Tape; a tensor with no tape and
// requires_grad == false never receives gradient.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape) {
    TensorT t;
    t.impl_ = std::make_shared<Impl>();
    const std::size_t n = shape_numel(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(n, T(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.data()) x = v;
    return t;
  }

  static TensorT from_data(std::vector<int> shape, std::vector<T> data) {
    const std::size_t n = shape_numel(shape);
    if (n != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    TensorT t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static TensorT scalar(T v) { return from_data({}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return impl_->data.size(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  Tape<T>* tape() const { return impl_->tape; }
  int node_id() const { return impl_->node_id; }
  void attach(Tape<T>* tape, int id) {
    impl_->tape = tape;
    impl_->node_id = id;
  }

  // True when backward should deposit gradient here.
  bool wants_grad() const { return impl_->requires_grad || impl_->tape != nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }

  std::vector<T>& grad() {
    ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad() const { return impl_->grad; }

  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  void zero_grad() {
    for (auto& g : impl_->grad) g = T(0);
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  // Deep copy of the values; grad and graph attachment are not copied.
  TensorT clone() const {
    TensorT t = from_data(impl_->shape, impl_->data);
    return t;
  }

  // Shares storage but drops the graph attachment and requires_grad flag.
  TensorT detached() const {
    TensorT t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;  // value copy: detached view must not alias grads
    return t;
  }

  bool same_storage(const TensorT& o) const { return impl_ == o.impl_; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first deposit
    bool requires_grad = false;
    Tape<T>* tape = nullptr;
    int node_id = -1;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of op nodes. Creation order is topological, so one reverse
// sweep visits each node exactly once.
template <class T>
class Tape {
 public:
  int record(std::function<void()> backward) {
    nodes_.push_back(std::move(backward));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }

  void run_backward_from(int node_id) {
    for (int i = node_id; i >= 0; --i) nodes_[static_cast<std::size_t>(i)]();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

// Registers a freshly produced op output on the tape (when recording).
template <class T>
inline void finish_node(Tape<T>* tape, TensorT<T>& out, std::function<void()> backward) {
  if (tape == nullptr) return;
  const int id = tape->record(std::move(backward));
  out.attach(tape, id);
}

template <class T>
inline void accumulate(TensorT<T>& dst, const std::vector<T>& g) {
  if (!dst.wants_grad()) return;
  auto& gd = dst.grad();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g[i];
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and propagates through the tape. Gradients
// accumulate across repeated calls until zeroed by the caller.
template <class T>
inline void backward(TensorT<T>& loss) {
  if (loss.size() != 1)
    throw ValueError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (loss.tape() == nullptr)
    throw ValueError("backward requires a loss attached to a computation record");
  loss.grad()[0] += T(1);
  loss.tape()->run_backward_from(loss.node_id());
}

template <class T>
inline void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
inline TensorT<T> add(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  TensorT<T> ac = a, bc = b, oc = out;
  detail::finish_node(tape, out, [ac, bc, oc]() mutable {
    if (!oc.has_grad()) return;
    detail::accumulate(ac, oc.grad());
    detail::accumulate(bc, oc.grad());
  });
  return out;
}

template <class T>
inline TensorT<T> sub(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  TensorT<T> ac = a, bc = b, oc = out;
  detail::finish_node(tape, out, [ac, bc, oc]() mutable {
    if (!oc.has_grad()) return;
    detail::accumulate(ac, oc.grad());
    if (bc.wants_grad()) {
      auto& g = bc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oc.grad()[i];
    }
  });
  return out;
}

template <class T>
inline TensorT<T> mul(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  TensorT<T> ac = a, bc = b, oc = out;
  detail::finish_node(tape, out, [ac, bc, oc]() mutable {
    if (!oc.has_grad()) return;
    if (ac.wants_grad()) {
      auto& g = ac.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oc.grad()[i] * bc.data()[i];
    }
    if (bc.wants_grad()) {
      auto& g = bc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oc.grad()[i] * ac.data()[i];
    }
  });
  return out;
}

template <class T>
inline TensorT<T> scale(Tape<T>* tape, const TensorT<T>& a, T s) {
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * s;
  TensorT<T> ac = a, oc = out;
  detail::finish_node(tape, out, [ac, oc, s]() mutable {
    if (!oc.has_grad() || !ac.wants_grad()) return;
    auto& g = ac.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += oc.grad()[i] * s;
  });
  return out;
}

template <class T>
inline TensorT<T> sum(Tape<T>* tape, const TensorT<T>& a) {
  T acc = T(0);
  for (const T& v : a.data()) acc += v;
  TensorT<T> out = TensorT<T>::scalar(acc);
  TensorT<T> ac = a, oc = out;
  detail::finish_node(tape, out, [ac, oc]() mutable {
    if (!oc.has_grad() || !ac.wants_grad()) return;
    const T g0 = oc.grad()[0];
    auto& g = ac.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0;
  });
  return out;
}

template <class T>
inline TensorT<T> mean(Tape<T>* tape, const TensorT<T>& a) {
  const T inv = T(1) / static_cast<T>(a.size());
  TensorT<T> s = sum(tape, a);
  return scale(tape, s, inv);
}

// Concatenation along the channel axis of NCHW tensors.
template <class T>
inline TensorT<T> concat_channels(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 4 || b.rank() != 4)
    throw ShapeError("concat_channels expects NCHW tensors");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  TensorT<T> out = TensorT<T>::zeros({n, ca + cb, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy(a.ptr() + static_cast<std::size_t>(i) * ca * plane,
              a.ptr() + static_cast<std::size_t>(i + 1) * ca * plane,
              out.ptr() + static_cast<std::size_t>(i) * (ca + cb) * plane);
    std::copy(b.ptr() + static_cast<std::size_t>(i) * cb * plane,
              b.ptr() + static_cast<std::size_t>(i + 1) * cb * plane,
              out.ptr() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * plane);
  }
  TensorT<T> ac = a, bc = b, oc = out;
  detail::finish_node(tape, out, [ac, bc, oc, n, ca, cb, plane]() mutable {
    if (!oc.has_grad()) return;
    if (ac.wants_grad()) {
      auto& g = ac.grad();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < static_cast<std::size_t>(ca) * plane; ++j)
          g[static_cast<std::size_t>(i) * ca * plane + j] +=
              oc.grad()[static_cast<std::size_t>(i) * (ca + cb) * plane + j];
    }
    if (bc.wants_grad()) {
      auto& g = bc.grad();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < static_cast<std::size_t>(cb) * plane; ++j)
          g[static_cast<std::size_t>(i) * cb * plane + j] +=
              oc.grad()[(static_cast<std::size_t>(i) * (ca + cb) + ca) * plane + j];
    }
  });
  return out;
}

using Tensor = TensorT<float>;
using FloatTape = Tape<float>;

}  // namespace retseg
