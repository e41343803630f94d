#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "useg/errors.hpp"
#include "useg/rng.hpp"

namespace useg {

// Dense N,C,H,W shape. All components are >= 1.
struct Shape4 {
  std::int64_t n = 1, c = 1, h = 1, w = 1;

  std::int64_t elems() const { return n * c * h * w; }

  bool operator==(const Shape4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape4& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// Contiguous row-major 4-D tensor; W varies fastest. Element (n,c,h,w) lives
// at index ((n*C + c)*H + h)*W + w. Immutable by convention once built except
// for the optimizer's explicit in-place updates.
template <typename T = float>
class Tensor {
 public:
  Tensor() : shape_{1, 1, 1, 1}, data_(1, T(0)) {}

  explicit Tensor(Shape4 s, T fill = T(0)) : shape_(s) {
    check_shape(s);
    data_.assign(static_cast<std::size_t>(s.elems()), fill);
  }

  Tensor(Shape4 s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
    check_shape(s);
    if (static_cast<std::int64_t>(data_.size()) != s.elems()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + s.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t n() const { return shape_.n; }
  std::int64_t c() const { return shape_.c; }
  std::int64_t h() const { return shape_.h; }
  std::int64_t w() const { return shape_.w; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::int64_t index(std::int64_t in, std::int64_t ic, std::int64_t ih,
                     std::int64_t iw) const {
    return ((in * shape_.c + ic) * shape_.h + ih) * shape_.w + iw;
  }

  T& at(std::int64_t in, std::int64_t ic, std::int64_t ih, std::int64_t iw) {
    return data_[static_cast<std::size_t>(index(in, ic, ih, iw))];
  }
  const T& at(std::int64_t in, std::int64_t ic, std::int64_t ih,
              std::int64_t iw) const {
    return data_[static_cast<std::size_t>(index(in, ic, ih, iw))];
  }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  void fill(T v) { data_.assign(data_.size(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  static void check_shape(const Shape4& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ShapeError("all shape components must be >= 1, got " + s.str());
    }
  }

  Shape4 shape_;
  std::vector<T> data_;
};

template <typename T = float>
Tensor<T> zeros(Shape4 s) {
  return Tensor<T>(s, T(0));
}

template <typename T = float>
Tensor<T> ones(Shape4 s) {
  return Tensor<T>(s, T(1));
}

template <typename T = float>
Tensor<T> full(Shape4 s, T v) {
  return Tensor<T>(s, v);
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), T(0));
}

// Uniform fill in [lo, hi) from the deterministic generator.
template <typename T = float>
Tensor<T> uniform_tensor(Shape4 s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> out(s);
  for (std::int64_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(rng.uniform(lo, hi));
  }
  return out;
}

enum class EwKind { add, sub, mul };

// The three broadcast forms the architecture needs, nothing more.
enum class Broadcast {
  none,     // identical shapes
  spatial,  // b is (N,1,H,W): one map gating every channel
  channel,  // b is (N,C,1,1): one value per channel
  scalar,   // b is (1,1,1,1)
};

template <typename T>
Broadcast resolve_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4& sa = a.shape();
  const Shape4& sb = b.shape();
  if (sa == sb) return Broadcast::none;
  if (sb.n == 1 && sb.c == 1 && sb.h == 1 && sb.w == 1) return Broadcast::scalar;
  if (sb.c == 1 && sb.n == sa.n && sb.h == sa.h && sb.w == sa.w)
    return Broadcast::spatial;
  if (sb.h == 1 && sb.w == 1 && sb.n == sa.n && sb.c == sa.c)
    return Broadcast::channel;
  throw ShapeError("shapes not broadcast-compatible: " + sa.str() + " vs " +
                   sb.str());
}

namespace detail {

template <typename T, typename Op>
Tensor<T> ew_apply(const Tensor<T>& a, const Tensor<T>& b, Op op) {
  const Broadcast bc = resolve_broadcast(a, b);
  Tensor<T> out(a.shape());
  const Shape4 s = a.shape();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  switch (bc) {
    case Broadcast::none: {
      const std::int64_t m = a.size();
      for (std::int64_t i = 0; i < m; ++i) po[i] = op(pa[i], pb[i]);
      break;
    }
    case Broadcast::scalar: {
      const T v = pb[0];
      const std::int64_t m = a.size();
      for (std::int64_t i = 0; i < m; ++i) po[i] = op(pa[i], v);
      break;
    }
    case Broadcast::spatial: {
      const std::int64_t hw = s.h * s.w;
      for (std::int64_t in = 0; in < s.n; ++in) {
        const T* pm = pb + in * hw;
        for (std::int64_t ic = 0; ic < s.c; ++ic) {
          const std::int64_t base = (in * s.c + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i)
            po[base + i] = op(pa[base + i], pm[i]);
        }
      }
      break;
    }
    case Broadcast::channel: {
      const std::int64_t hw = s.h * s.w;
      for (std::int64_t in = 0; in < s.n; ++in) {
        for (std::int64_t ic = 0; ic < s.c; ++ic) {
          const T v = pb[in * s.c + ic];
          const std::int64_t base = (in * s.c + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i)
            po[base + i] = op(pa[base + i], v);
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
  switch (kind) {
    case EwKind::add:
      return detail::ew_apply(a, b, [](T x, T y) { return x + y; });
    case EwKind::sub:
      return detail::ew_apply(a, b, [](T x, T y) { return x - y; });
    case EwKind::mul:
    default:
      return detail::ew_apply(a, b, [](T x, T y) { return x * y; });
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::mul);
}

// Reduce a full-shaped tensor onto the broadcast shape of `target` by summing
// the broadcast dimensions (the adjoint of broadcasting).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape4& target) {
  const Shape4 s = g.shape();
  if (s == target) return g;
  Tensor<T> out(target, T(0));
  const T* pg = g.data();
  if (target.n == 1 && target.c == 1 && target.h == 1 && target.w == 1) {
    T acc = T(0);
    for (std::int64_t i = 0; i < g.size(); ++i) acc += pg[i];
    out[0] = acc;
    return out;
  }
  const std::int64_t hw = s.h * s.w;
  if (target.c == 1 && target.n == s.n && target.h == s.h && target.w == s.w) {
    for (std::int64_t in = 0; in < s.n; ++in) {
      T* po = out.data() + in * hw;
      for (std::int64_t ic = 0; ic < s.c; ++ic) {
        const T* p = pg + (in * s.c + ic) * hw;
        for (std::int64_t i = 0; i < hw; ++i) po[i] += p[i];
      }
    }
    return out;
  }
  if (target.h == 1 && target.w == 1 && target.n == s.n && target.c == s.c) {
    for (std::int64_t in = 0; in < s.n; ++in) {
      for (std::int64_t ic = 0; ic < s.c; ++ic) {
        const T* p = pg + (in * s.c + ic) * hw;
        T acc = T(0);
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
        out[in * s.c + ic] = acc;
      }
    }
    return out;
  }
  throw ShapeError("cannot reduce " + s.str() + " to " + target.str());
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_channels: empty part list");
  const Shape4 s0 = parts.front().shape();
  std::int64_t c_total = 0;
  for (const auto& p : parts) {
    const Shape4 s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: mismatched N/H/W: " + s0.str() +
                       " vs " + s.str());
    }
    c_total += s.c;
  }
  Tensor<T> out({s0.n, c_total, s0.h, s0.w});
  const std::int64_t hw = s0.h * s0.w;
  for (std::int64_t in = 0; in < s0.n; ++in) {
    std::int64_t co = 0;
    for (const auto& p : parts) {
      const std::int64_t pc = p.shape().c;
      const T* src = p.data() + in * pc * hw;
      T* dst = out.data() + (in * c_total + co) * hw;
      for (std::int64_t i = 0; i < pc * hw; ++i) dst[i] = src[i];
      co += pc;
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::int64_t k) {
  const Shape4 s = x.shape();
  if (k < 1 || s.c % k != 0) {
    throw ValueError("split_channels: C=" + std::to_string(s.c) +
                     " not divisible by k=" + std::to_string(k));
  }
  const std::int64_t ck = s.c / k;
  const std::int64_t hw = s.h * s.w;
  std::vector<Tensor<T>> parts;
  parts.reserve(static_cast<std::size_t>(k));
  for (std::int64_t j = 0; j < k; ++j) {
    Tensor<T> p({s.n, ck, s.h, s.w});
    for (std::int64_t in = 0; in < s.n; ++in) {
      const T* src = x.data() + (in * s.c + j * ck) * hw;
      T* dst = p.data() + in * ck * hw;
      for (std::int64_t i = 0; i < ck * hw; ++i) dst[i] = src[i];
    }
    parts.push_back(std::move(p));
  }
  return parts;
}

// Mean over the channel axis; result is (N,1,H,W).
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  Tensor<T> out({s.n, 1, s.h, s.w}, T(0));
  const std::int64_t hw = s.h * s.w;
  const T inv_c = T(1) / static_cast<T>(s.c);
  for (std::int64_t in = 0; in < s.n; ++in) {
    T* po = out.data() + in * hw;
    for (std::int64_t ic = 0; ic < s.c; ++ic) {
      const T* p = x.data() + (in * s.c + ic) * hw;
      for (std::int64_t i = 0; i < hw; ++i) po[i] += p[i];
    }
    for (std::int64_t i = 0; i < hw; ++i) po[i] *= inv_c;
  }
  return out;
}

// Reorder channels: out channel i takes input channel perm[i].
template <typename T>
Tensor<T> permute_channels(const Tensor<T>& x, const std::vector<int>& perm) {
  const Shape4 s = x.shape();
  if (static_cast<std::int64_t>(perm.size()) != s.c) {
    throw ShapeError("permute_channels: perm size " +
                     std::to_string(perm.size()) + " != C=" +
                     std::to_string(s.c));
  }
  Tensor<T> out(s);
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t in = 0; in < s.n; ++in) {
    for (std::int64_t ic = 0; ic < s.c; ++ic) {
      const T* src = x.data() + (in * s.c + perm[ic]) * hw;
      T* dst = out.data() + (in * s.c + ic) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i];
    }
  }
  return out;
}

// Stack single-sample tensors along N (all parts share C,H,W).
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_batch: empty part list");
  const Shape4 s0 = parts.front().shape();
  std::int64_t n_total = 0;
  for (const auto& p : parts) {
    const Shape4 s = p.shape();
    if (s.c != s0.c || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_batch: mismatched C/H/W: " + s0.str() + " vs " +
                       s.str());
    }
    n_total += s.n;
  }
  Tensor<T> out({n_total, s0.c, s0.h, s0.w});
  T* dst = out.data();
  for (const auto& p : parts) {
    for (std::int64_t i = 0; i < p.size(); ++i) *dst++ = p[i];
  }
  return out;
}

template <typename T>
T sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x[i];
  return acc;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  T m = T(0);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace useg
