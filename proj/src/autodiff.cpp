/*
 * Copyright 2026 The sweepstack Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <sweepstack/autodiff.hpp>
#include <sweepstack/params.hpp>

#include <cmath>
#include <memory>
#include <numbers>

namespace sweepstack {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, "constant", {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, grad_enabled_, "leaf", {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::param(const ParameterStore<T>& store, const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
  Var<T> v = leaf(store.get(name));
  params_.emplace(name, v.id);
  return v;
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, std::string_view op,
                       BackwardFn fn) {
  return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), op,
                std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, std::string_view op,
                       BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.defined() && requires_grad(in.id)) needs = true;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, op, needs ? std::move(fn) : BackwardFn{}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> out, const Tensor<T>& seed) {
  if (seed.shape() != value(out.id).shape()) {
    throw ShapeError("backward: seed shape " + shape_str(seed.shape()) + " does not match output " +
                     shape_str(value(out.id).shape()));
  }
  if (!requires_grad(out.id)) return;
  Tensor<T>& g = grad(out.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (int id = out.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
}

template <typename T>
void Tape<T>::backward(Var<T> out) {
  backward(out, Tensor<T>(value(out.id).shape(), T(1)));
}

template <typename T>
std::map<std::string, Tensor<T>> Tape<T>::parameter_gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : params_) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    out.emplace(name, n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad);
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

namespace ad {
namespace {

template <typename T>
void require_same(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_ndim(std::string_view op, const Var<T>& a, int n) {
  if (a.value().ndim() != n) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d input, got " +
                     shape_str(a.shape()));
  }
}

template <typename T>
void accumulate(Tape<T>& tape, const Var<T>& v, const Tensor<T>& g, T factor = T(1)) {
  if (!tape.requires_grad(v.id)) return;
  Tensor<T>& dst = tape.grad(v.id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
}

template <typename T>
Var<T> unary(Var<T> a, std::string_view op, auto fwd, auto dfdx) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return a.tape->record(std::move(y), {a}, op, [a, dfdx](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& x = t.value(a.id);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * dfdx(x[i]);
  });
}

// Gathers patches of x [C, spatial...] into col [C*K, P] for a conv with
// stride/pad along each of `dims` spatial axes; K is the product of kernel
// sizes and P the number of output positions. scatter=true performs the
// adjoint (col2im), accumulating col back into x.
// One output row of im2col: dst[ox] = src[ox * stride - pad + kx], zero outside
// the input. With scatter the roles flip and src accumulates dst.
template <typename T>
inline void patch_row(const T* src, T* dst, int in_w, int out_w, int stride, int offset, bool scatter) {
  // Valid ox satisfy 0 <= ox * stride + offset < in_w.
  int lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  int hi = in_w - offset <= 0 ? 0 : (in_w - offset + stride - 1) / stride;
  hi = std::min(hi, out_w);
  lo = std::min(lo, hi);
  T* s = const_cast<T*>(src);
  if (scatter) {
    if (stride == 1) {
      for (int ox = lo; ox < hi; ++ox) s[ox + offset] += dst[ox];
    } else {
      for (int ox = lo; ox < hi; ++ox) s[ox * stride + offset] += dst[ox];
    }
    return;
  }
  std::fill(dst, dst + lo, T(0));
  if (stride == 1) {
    std::copy(src + lo + offset, src + hi + offset, dst + lo);
  } else {
    for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + offset];
  }
  std::fill(dst + hi, dst + out_w, T(0));
}

// Gathers patches of x [C, spatial...] into col [C*K, P] for a conv with
// stride/pad along each of `dims` spatial axes; K is the product of kernel
// sizes and P the number of output positions. scatter=true performs the
// adjoint (col2im), accumulating col back into x.
template <typename T, int N>
void im2col(const T* x, T* col, int channels, const std::array<int, N>& in,
            const std::array<int, N>& out, int k, int stride, int pad, bool scatter) {
  int kvol = 1;
  int pvol = 1;
  int ivol = 1;
  for (int d = 0; d < N; ++d) {
    kvol *= k;
    pvol *= out[d];
    ivol *= in[d];
  }
  const int ow = out[N - 1];
  const int iw = in[N - 1];
  for (int c = 0; c < channels; ++c) {
    const std::size_t xbase = static_cast<std::size_t>(c) * ivol;
    for (int kk = 0; kk < kvol; ++kk) {
      std::array<int, N> koff{};
      int rem = kk;
      for (int d = N - 1; d >= 0; --d) {
        koff[d] = rem % k;
        rem /= k;
      }
      T* crow = col + (static_cast<std::size_t>(c) * kvol + kk) * pvol;
      const int xoff = koff[N - 1] - pad;
      if constexpr (N == 2) {
        for (int oy = 0; oy < out[0]; ++oy) {
          const int iy = oy * stride - pad + koff[0];
          T* dst = crow + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= in[0]) {
            if (!scatter) std::fill(dst, dst + ow, T(0));
            continue;
          }
          patch_row(x + xbase + static_cast<std::size_t>(iy) * iw, dst, iw, ow, stride, xoff, scatter);
        }
      } else {
        static_assert(N == 3);
        for (int oz = 0; oz < out[0]; ++oz) {
          const int iz = oz * stride - pad + koff[0];
          for (int oy = 0; oy < out[1]; ++oy) {
            const int iy = oy * stride - pad + koff[1];
            T* dst = crow + (static_cast<std::size_t>(oz) * out[1] + oy) * ow;
            if (iz < 0 || iz >= in[0] || iy < 0 || iy >= in[1]) {
              if (!scatter) std::fill(dst, dst + ow, T(0));
              continue;
            }
            patch_row(x + xbase + (static_cast<std::size_t>(iz) * in[1] + iy) * iw, dst, iw, ow, stride, xoff,
                      scatter);
          }
        }
      }
    }
  }
}

template <typename T>
std::unique_ptr<T[]> scratch(std::size_t n) {
  return std::unique_ptr<T[]>(new T[n]);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

// Stride-1 convolutions run on a zero-padded copy of the input flattened so
// that every kernel tap is a fixed offset. An output at index (z, y, x) sits at
// the flat "anchor" z*Hp*Wp + y*Wp + x of the padded grid; anchors that fall in
// the padding columns are computed and dropped.
template <int N>
struct PaddedLayout {
  std::array<int, N> in{}, out{};
  std::array<std::size_t, N> stride{};  // padded strides
  std::size_t total = 1;
  std::size_t span = 0;
  std::size_t max_tap = 0;
  int pad = 0;
  std::vector<std::ptrdiff_t> taps;

  PaddedLayout(const std::array<int, N>& in_, const std::array<int, N>& out_, int k, int pad_)
      : in(in_), out(out_), pad(pad_) {
    for (int d = N - 1; d >= 0; --d) {
      stride[d] = total;
      total *= static_cast<std::size_t>(in[d] + 2 * pad);
    }
    span = 1;
    for (int d = 0; d < N; ++d) span += static_cast<std::size_t>(out[d] - 1) * stride[d];
    int kvol = 1;
    for (int d = 0; d < N; ++d) kvol *= k;
    taps.resize(static_cast<std::size_t>(kvol));
    for (int t = 0; t < kvol; ++t) {
      std::ptrdiff_t off = 0;
      int rem = t;
      for (int d = N - 1; d >= 0; --d) {
        off += static_cast<std::ptrdiff_t>(rem % k) * static_cast<std::ptrdiff_t>(stride[d]);
        rem /= k;
      }
      taps[static_cast<std::size_t>(t)] = off;
    }
    max_tap = static_cast<std::size_t>(taps.back());
  }

  // Calls fn(dense offset, flat offset, row length) for every innermost row of
  // a dense grid `dims` placed at `base` in the padded grid.
  template <typename Fn>
  static void rows(const std::array<int, N>& dims, const std::array<std::size_t, N>& stride, std::size_t base,
                   Fn&& fn) {
    std::size_t nrows = 1;
    for (int d = 0; d + 1 < N; ++d) nrows *= static_cast<std::size_t>(dims[d]);
    const int w = dims[N - 1];
    for (std::size_t r = 0; r < nrows; ++r) {
      std::size_t rem = r, flat = base;
      for (int d = N - 2; d >= 0; --d) {
        flat += (rem % static_cast<std::size_t>(dims[d])) * stride[d];
        rem /= static_cast<std::size_t>(dims[d]);
      }
      fn(r * static_cast<std::size_t>(w), flat, w);
    }
  }

  std::size_t interior_base() const {
    std::size_t b = 0;
    for (int d = 0; d < N; ++d) b += static_cast<std::size_t>(pad) * stride[d];
    return b;
  }
  std::size_t in_volume() const {
    std::size_t v = 1;
    for (int d = 0; d < N; ++d) v *= static_cast<std::size_t>(in[d]);
    return v;
  }
  std::size_t out_volume() const {
    std::size_t v = 1;
    for (int d = 0; d < N; ++d) v *= static_cast<std::size_t>(out[d]);
    return v;
  }
};

template <typename T>
struct Packet {
  typedef T type __attribute__((vector_size(32)));
  typedef T unaligned __attribute__((vector_size(32), aligned(sizeof(T)), may_alias));
  static constexpr int lanes = 32 / sizeof(T);
  static type load(const T* p) { return *reinterpret_cast<const unaligned*>(p); }
};

// One block of PV packets of positions for OB consecutive outputs, held in registers.
template <typename T, int OB, int PV>
inline void mac_block(const T* in, std::size_t is, int cin, const T* w, std::ptrdiff_t wo, std::ptrdiff_t wi,
                      const std::ptrdiff_t* shift, int taps, T* out, std::size_t os) {
  using V = typename Packet<T>::type;
  constexpr int L = Packet<T>::lanes;
  V acc[OB][PV];
  for (int o = 0; o < OB; ++o)
    for (int p = 0; p < PV; ++p) acc[o][p] = V{};
  for (int i = 0; i < cin; ++i) {
    const T* xi = in + static_cast<std::size_t>(i) * is;
    const T* wb = w + i * wi;
    for (int t = 0; t < taps; ++t) {
      const T* x = xi + shift[t];
      V xv[PV];
      for (int p = 0; p < PV; ++p) xv[p] = Packet<T>::load(x + p * L);
      for (int o = 0; o < OB; ++o) {
        const T c = wb[o * wo + t];
        for (int p = 0; p < PV; ++p) acc[o][p] += c * xv[p];
      }
    }
  }
  for (int o = 0; o < OB; ++o) {
    T* dst = out + static_cast<std::size_t>(o) * os;
    for (int p = 0; p < PV; ++p)
      for (int l = 0; l < L; ++l) dst[p * L + l] += acc[o][p][l];
  }
}

template <typename T, int OB, int PV>
void mac_rows(const T* in, std::size_t is, int cin, const T* w, std::ptrdiff_t wo, std::ptrdiff_t wi,
              const std::vector<std::ptrdiff_t>& shift, T* out, std::size_t os, std::size_t len) {
  constexpr std::size_t B = static_cast<std::size_t>(PV * Packet<T>::lanes);
  const int taps = static_cast<int>(shift.size());
  std::size_t q = 0;
  for (; q + B <= len; q += B) mac_block<T, OB, PV>(in + q, is, cin, w, wo, wi, shift.data(), taps, out + q, os);
  for (; q < len; ++q) {
    for (int o = 0; o < OB; ++o) {
      T acc = 0;
      for (int i = 0; i < cin; ++i)
        for (int t = 0; t < taps; ++t)
          acc += w[o * wo + i * wi + t] * in[static_cast<std::size_t>(i) * is + q + shift[static_cast<std::size_t>(t)]];
      out[static_cast<std::size_t>(o) * os + q] += acc;
    }
  }
}

// out[o*os + q] += sum_{i,t} w[o*wo + i*wi + t] * in[i*is + q + shift[t]] for q < len.
template <typename T>
void shifted_mac(const T* in, std::size_t is, int cin, const T* w, std::ptrdiff_t wo, std::ptrdiff_t wi,
                 const std::vector<std::ptrdiff_t>& shift, T* out, std::size_t os, int cout, std::size_t len) {
  int o = 0;
  for (; o + 8 <= cout; o += 8) mac_rows<T, 8, 2>(in, is, cin, w + o * wo, wo, wi, shift, out + o * os, os, len);
  for (; o + 4 <= cout; o += 4) mac_rows<T, 4, 3>(in, is, cin, w + o * wo, wo, wi, shift, out + o * os, os, len);
  for (; o < cout; ++o) mac_rows<T, 1, 4>(in, is, cin, w + o * wo, wo, wi, shift, out + o * os, os, len);
}

// Packet partial sums of g[o*gs + q] * x[q + shift[t]] over q in [q0, q1), added
// into vacc[o*wo + t]; OB outputs by TB consecutive taps.
template <typename T, int OB, int TB>
void weight_grad_block(const T* g, std::size_t gs, const T* x, const std::ptrdiff_t* shift, std::size_t q0,
                       std::size_t q1, typename Packet<T>::type* vacc, std::ptrdiff_t wo) {
  using V = typename Packet<T>::type;
  constexpr int L = Packet<T>::lanes;
  V acc[OB][TB];
  for (int o = 0; o < OB; ++o)
    for (int t = 0; t < TB; ++t) acc[o][t] = V{};
  for (std::size_t q = q0; q < q1; q += L) {
    V xv[TB];
    for (int t = 0; t < TB; ++t) xv[t] = Packet<T>::load(x + q + shift[t]);
    for (int o = 0; o < OB; ++o) {
      const V gv = Packet<T>::load(g + static_cast<std::size_t>(o) * gs + q);
      for (int t = 0; t < TB; ++t) acc[o][t] += gv * xv[t];
    }
  }
  for (int o = 0; o < OB; ++o)
    for (int t = 0; t < TB; ++t) vacc[o * wo + t] += acc[o][t];
}

// dw[(o*cin + i)*taps + t] += sum_q g[o*gs + q] * x[i*xs + q + shift[t]] for q < len.
// Positions are walked in chunks so the gradient rows stay cached across taps.
template <typename T>
void shifted_weight_grad(const T* g, std::size_t gs, int cout, const T* x, std::size_t xs, int cin,
                         const std::vector<std::ptrdiff_t>& shift, std::size_t len, T* dw) {
  using V = typename Packet<T>::type;
  constexpr std::size_t L = Packet<T>::lanes;
  constexpr std::size_t chunk = 64 * L;
  const int taps = static_cast<int>(shift.size());
  const std::ptrdiff_t wo = static_cast<std::ptrdiff_t>(cin) * taps;
  std::vector<V> vacc(static_cast<std::size_t>(cout) * static_cast<std::size_t>(wo), V{});
  const std::size_t full = len / L * L;
  for (std::size_t q0 = 0; q0 < full; q0 += chunk) {
    const std::size_t q1 = std::min(full, q0 + chunk);
    for (int i = 0; i < cin; ++i) {
      const T* xi = x + static_cast<std::size_t>(i) * xs;
      int o = 0;
      for (; o + 4 <= cout; o += 4) {
        const T* go = g + static_cast<std::size_t>(o) * gs;
        V* va = vacc.data() + o * wo + i * taps;
        int t = 0;
        for (; t + 3 <= taps; t += 3) weight_grad_block<T, 4, 3>(go, gs, xi, shift.data() + t, q0, q1, va + t, wo);
        for (; t < taps; ++t) weight_grad_block<T, 4, 1>(go, gs, xi, shift.data() + t, q0, q1, va + t, wo);
      }
      for (; o < cout; ++o) {
        const T* go = g + static_cast<std::size_t>(o) * gs;
        V* va = vacc.data() + o * wo + i * taps;
        int t = 0;
        for (; t + 3 <= taps; t += 3) weight_grad_block<T, 1, 3>(go, gs, xi, shift.data() + t, q0, q1, va + t, wo);
        for (; t < taps; ++t) weight_grad_block<T, 1, 1>(go, gs, xi, shift.data() + t, q0, q1, va + t, wo);
      }
    }
  }
  for (int o = 0; o < cout; ++o) {
    for (int i = 0; i < cin; ++i) {
      const T* xi = x + static_cast<std::size_t>(i) * xs;
      for (int t = 0; t < taps; ++t) {
        const std::size_t k = static_cast<std::size_t>(o * wo + i * taps + t);
        T sum = 0;
        for (std::size_t l = 0; l < L; ++l) sum += vacc[k][l];
        for (std::size_t q = full; q < len; ++q)
          sum += g[static_cast<std::size_t>(o) * gs + q] * xi[q + shift[static_cast<std::size_t>(t)]];
        dw[k] += sum;
      }
    }
  }
}

template <typename T, int N>
std::vector<T> pad_copy(const T* x, int channels, const PaddedLayout<N>& lay) {
  std::vector<T> xp(static_cast<std::size_t>(channels) * lay.total, T(0));
  const std::size_t iv = lay.in_volume();
  for (int c = 0; c < channels; ++c) {
    const T* src = x + static_cast<std::size_t>(c) * iv;
    T* dst = xp.data() + static_cast<std::size_t>(c) * lay.total;
    PaddedLayout<N>::rows(lay.in, lay.stride, lay.interior_base(),
                          [&](std::size_t d, std::size_t f, int w) { std::copy(src + d, src + d + w, dst + f); });
  }
  return xp;
}

template <typename T, int N>
Tensor<T> conv_direct_forward(const Tensor<T>& x, const Tensor<T>& w, const PaddedLayout<N>& lay, Shape out_shape) {
  const int cin = x.dim(0);
  const int cout = w.dim(0);
  const int kvol = static_cast<int>(lay.taps.size());
  const std::vector<T> xp = pad_copy<T, N>(x.data(), cin, lay);
  std::vector<T> acc(static_cast<std::size_t>(cout) * lay.span, T(0));
  shifted_mac(xp.data(), lay.total, cin, w.data(), static_cast<std::ptrdiff_t>(cin) * kvol, kvol, lay.taps,
              acc.data(), lay.span, cout, lay.span);
  Tensor<T> y(std::move(out_shape));
  const std::size_t ov = lay.out_volume();
  for (int o = 0; o < cout; ++o) {
    const T* src = acc.data() + static_cast<std::size_t>(o) * lay.span;
    T* dst = y.data() + static_cast<std::size_t>(o) * ov;
    PaddedLayout<N>::rows(lay.out, lay.stride, 0,
                          [&](std::size_t d, std::size_t f, int n) { std::copy(src + f, src + f + n, dst + d); });
  }
  return y;
}

// Input and weight gradients of the stride-1 path.
template <typename T, int N>
void conv_direct_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g, const PaddedLayout<N>& lay,
                          Tensor<T>* dx, Tensor<T>* dw) {
  const int cin = x.dim(0);
  const int cout = w.dim(0);
  const int kvol = static_cast<int>(lay.taps.size());
  const std::size_t ov = lay.out_volume();
  // Gradient on anchors with a leading margin so flipped taps never index below zero.
  const std::size_t gs = lay.total + lay.max_tap;
  std::vector<T> gb(static_cast<std::size_t>(cout) * gs, T(0));
  for (int o = 0; o < cout; ++o) {
    const T* src = g.data() + static_cast<std::size_t>(o) * ov;
    T* dst = gb.data() + static_cast<std::size_t>(o) * gs + lay.max_tap;
    PaddedLayout<N>::rows(lay.out, lay.stride, 0,
                          [&](std::size_t d, std::size_t f, int n) { std::copy(src + d, src + d + n, dst + f); });
  }
  if (dx) {
    std::vector<std::ptrdiff_t> flipped(lay.taps.size());
    for (std::size_t t = 0; t < flipped.size(); ++t)
      flipped[t] = static_cast<std::ptrdiff_t>(lay.max_tap) - lay.taps[t];
    std::vector<T> dxp(static_cast<std::size_t>(cin) * lay.total, T(0));
    shifted_mac(gb.data(), gs, cout, w.data(), kvol, static_cast<std::ptrdiff_t>(cin) * kvol, flipped, dxp.data(),
                lay.total, cin, lay.total);
    const std::size_t iv = lay.in_volume();
    for (int c = 0; c < cin; ++c) {
      const T* src = dxp.data() + static_cast<std::size_t>(c) * lay.total;
      T* dst = dx->data() + static_cast<std::size_t>(c) * iv;
      PaddedLayout<N>::rows(lay.in, lay.stride, lay.interior_base(), [&](std::size_t d, std::size_t f, int n) {
        for (int j = 0; j < n; ++j) dst[d + j] += src[f + j];
      });
    }
  }
  if (dw) {
    const std::vector<T> xp = pad_copy<T, N>(x.data(), cin, lay);
    shifted_weight_grad(gb.data() + lay.max_tap, gs, cout, xp.data(), lay.total, cin, lay.taps, lay.span,
                        dw->data());
  }
}

template <typename T>
void add_channel_bias(Tensor<T>& y, const Var<T>& b, int cout, std::size_t pvol) {
  if (!b.defined()) return;
  for (int o = 0; o < cout; ++o) {
    const T v = b.value()[o];
    T* yr = y.data() + static_cast<std::size_t>(o) * pvol;
    for (std::size_t i = 0; i < pvol; ++i) yr[i] += v;
  }
}

// Plain loops: Eigen's vectorized sum peels by address, which breaks run-to-run reproducibility.
template <typename T>
void bias_grad(Tensor<T>& db, const Tensor<T>& g, int cout, std::size_t pvol) {
  for (int o = 0; o < cout; ++o) {
    const T* gr = g.data() + static_cast<std::size_t>(o) * pvol;
    T acc = 0;
    for (std::size_t i = 0; i < pvol; ++i) acc += gr[i];
    db[o] += acc;
  }
}

// Shared convolution core for 2-D and 3-D kernels (stride/pad identical on all axes).
template <typename T, int N>
Var<T> conv_nd(Var<T> x, Var<T> w, Var<T> b, int stride, int pad, std::string_view op) {
  require_ndim(op, x, N + 1);
  require_ndim(op, w, N + 2);
  const int cin = x.dim(0);
  const int cout = w.dim(0);
  const int k = w.dim(2);
  if (w.dim(1) != cin) {
    throw ShapeError(std::string(op) + ": weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (b.defined() && (b.value().ndim() != 1 || b.dim(0) != cout)) {
    throw ShapeError(std::string(op) + ": bias " + shape_str(b.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  std::array<int, N> in{};
  std::array<int, N> out{};
  Shape out_shape{cout};
  int kvol = 1;
  std::size_t pvol = 1;
  for (int d = 0; d < N; ++d) {
    in[d] = x.dim(d + 1);
    out[d] = (in[d] + 2 * pad - k) / stride + 1;
    if (out[d] <= 0) {
      throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " too small for kernel " +
                       shape_str(w.shape()));
    }
    out_shape.push_back(out[d]);
    kvol *= k;
    pvol *= static_cast<std::size_t>(out[d]);
  }
  const int rows = cin * kvol;
  if (stride == 1) {
    const PaddedLayout<N> lay(in, out, k, pad);
    Tensor<T> y = conv_direct_forward<T, N>(x.value(), w.value(), lay, out_shape);
    add_channel_bias(y, b, cout, pvol);
    return x.tape->record(std::move(y), {x, w, b}, op, [x, w, b, lay, cout, pvol](Tape<T>& t, int self) {
      const Tensor<T>& g = t.grad(self);
      if (b.defined() && t.requires_grad(b.id)) bias_grad(t.grad(b.id), g, cout, pvol);
      const bool need_w = t.requires_grad(w.id);
      const bool need_x = t.requires_grad(x.id);
      if (!need_w && !need_x) return;
      conv_direct_backward<T, N>(t.value(x.id), t.value(w.id), g, lay, need_x ? &t.grad(x.id) : nullptr,
                                 need_w ? &t.grad(w.id) : nullptr);
    });
  }
  auto col = scratch<T>(static_cast<std::size_t>(rows) * pvol);
  im2col<T, N>(x.value().data(), col.get(), cin, in, out, k, stride, pad, false);
  Tensor<T> y(out_shape);
  MapM<T> ym(y.data(), cout, static_cast<Eigen::Index>(pvol));
  ym.noalias() = CMapM<T>(w.value().data(), cout, rows) *
                 CMapM<T>(col.get(), rows, static_cast<Eigen::Index>(pvol));
  add_channel_bias(y, b, cout, pvol);

  return x.tape->record(std::move(y), {x, w, b}, op,
                        [x, w, b, in, out, k, stride, pad, cin, cout, rows, pvol](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    CMapM<T> gm(g.data(), cout, static_cast<Eigen::Index>(pvol));
    if (b.defined() && t.requires_grad(b.id)) bias_grad(t.grad(b.id), g, cout, pvol);
    const bool need_w = t.requires_grad(w.id);
    const bool need_x = t.requires_grad(x.id);
    if (!need_w && !need_x) return;
    auto col = scratch<T>(static_cast<std::size_t>(rows) * pvol);
    if (need_w) {
      im2col<T, N>(t.value(x.id).data(), col.get(), cin, in, out, k, stride, pad, false);
      MapM<T>(t.grad(w.id).data(), cout, rows).noalias() +=
          gm * CMapM<T>(col.get(), rows, static_cast<Eigen::Index>(pvol)).transpose();
    }
    if (need_x) {
      MapM<T>(col.get(), rows, static_cast<Eigen::Index>(pvol)).noalias() =
          CMapM<T>(t.value(w.id).data(), cout, rows).transpose() * gm;
      im2col<T, N>(t.grad(x.id).data(), col.get(), cin, in, out, k, stride, pad, true);
    }
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same("add", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape->record(std::move(y), {a, b}, "add", [a, b](Tape<T>& t, int self) {
    accumulate(t, a, t.grad(self));
    accumulate(t, b, t.grad(self));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same("sub", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape->record(std::move(y), {a, b}, "sub", [a, b](Tape<T>& t, int self) {
    accumulate(t, a, t.grad(self));
    accumulate(t, b, t.grad(self), T(-1));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same("mul", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape->record(std::move(y), {a, b}, "mul", [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      Tensor<T>& da = t.grad(a.id);
      const Tensor<T>& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& db = t.grad(b.id);
      const Tensor<T>& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary<T>(a, "scale", [s](T x) { return x * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary<T>(a, "add_scalar", [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <typename T>
Var<T> scale_by(Var<T> a, Var<T> s) {
  if (s.size() != 1) throw ShapeError("scale_by: scale must have one element, got " + shape_str(s.shape()));
  const T sv = s.value()[0];
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= sv;
  return a.tape->record(std::move(y), {a, s}, "scale_by", [a, s](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    accumulate(t, a, g, t.value(s.id)[0]);
    if (t.requires_grad(s.id)) {
      const Tensor<T>& av = t.value(a.id);
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad(s.id)[0] += acc;
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(a, "relu", [](T x) { return x < T(0) ? T(0) : x; },  // NaN passes through
                  [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary<T>(
      a, "gelu", [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary<T>(a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
                  [lo, hi](T x) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(y), {a}, "reshape",
                        [a](Tape<T>& t, int self) { accumulate(t, a, t.grad(self)); });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_ndim("transpose", a, 2);
  const int r = a.dim(0);
  const int c = a.dim(1);
  Tensor<T> y({c, r});
  y.matrix(c, r) = a.value().matrix(r, c).transpose();
  return a.tape->record(std::move(y), {a}, "transpose", [a, r, c](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    t.grad(a.id).matrix(r, c) += t.grad(self).matrix(c, r).transpose();
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, int start, int len) {
  require_ndim("slice_cols", a, 2);
  const int r = a.dim(0);
  const int c = a.dim(1);
  if (start < 0 || len <= 0 || start + len > c) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") outside " + shape_str(a.shape()));
  }
  Tensor<T> y({r, len});
  y.matrix(r, len) = a.value().matrix(r, c).middleCols(start, len);
  return a.tape->record(std::move(y), {a}, "slice_cols", [a, r, c, start, len](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    t.grad(a.id).matrix(r, c).middleCols(start, len) += t.grad(self).matrix(r, len);
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int r = parts[0].dim(0);
  int c = 0;
  for (const auto& p : parts) {
    require_ndim("concat_cols", p, 2);
    if (p.dim(0) != r) {
      throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    c += p.dim(1);
  }
  Tensor<T> y({r, c});
  int off = 0;
  for (const auto& p : parts) {
    y.matrix(r, c).middleCols(off, p.dim(1)) = p.value().matrix(r, p.dim(1));
    off += p.dim(1);
  }
  std::vector<Var<T>> ins(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(y), parts, "concat_cols", [ins, r, c](Tape<T>& t, int self) {
    int off = 0;
    for (const auto& p : ins) {
      const int pc = t.value(p.id).dim(1);
      if (t.requires_grad(p.id)) t.grad(p.id).matrix(r, pc) += t.grad(self).matrix(r, c).middleCols(off, pc);
      off += pc;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (const T v : a.value().values()) s += v;
  return a.tape->record(Tensor<T>({1}, {s}), {a}, "sum", [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(a.id).values()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(std::max<std::size_t>(1, a.size())));
}

template <typename T>
Var<T> sum_axis0(Var<T> a) {
  if (a.value().ndim() < 2) throw ShapeError("sum_axis0: need at least 2-d input, got " + shape_str(a.shape()));
  const int n = a.dim(0);
  Shape rest(a.shape().begin() + 1, a.shape().end());
  const std::size_t inner = shape_numel(rest);
  Tensor<T> y(rest);
  const Tensor<T>& x = a.value();
  for (int i = 0; i < n; ++i) {
    const T* src = x.data() + static_cast<std::size_t>(i) * inner;
    for (std::size_t j = 0; j < inner; ++j) y[j] += src[j];
  }
  return a.tape->record(std::move(y), {a}, "sum_axis0", [a, n, inner](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(a.id);
    for (int i = 0; i < n; ++i) {
      T* dst = dx.data() + static_cast<std::size_t>(i) * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += g[j];
    }
  });
}

template <typename T>
Var<T> mean_axis0(Var<T> a) {
  return scale(sum_axis0(a), T(1) / static_cast<T>(a.dim(0)));
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  require_ndim("matmul", a, 2);
  require_ndim("matmul", b, 2);
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = trans_a ? ac : ar;
  const int ka = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br;
  const int n = trans_b ? br : bc;
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + (trans_a ? "^T" : "") +
                     " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  }
  Tensor<T> y({m, n});
  auto am = a.value().matrix(ar, ac);
  auto bm = b.value().matrix(br, bc);
  auto ym = y.matrix(m, n);
  if (trans_a && trans_b) ym.noalias() = am.transpose() * bm.transpose();
  else if (trans_a) ym.noalias() = am.transpose() * bm;
  else if (trans_b) ym.noalias() = am * bm.transpose();
  else ym.noalias() = am * bm;
  return a.tape->record(std::move(y), {a, b}, "matmul",
                        [a, b, ar, ac, br, bc, m, n, trans_a, trans_b](Tape<T>& t, int self) {
    auto g = t.grad(self).matrix(m, n);
    if (t.requires_grad(a.id)) {
      auto bm = t.value(b.id).matrix(br, bc);
      auto da = t.grad(a.id).matrix(ar, ac);
      // y = A' B' with A' = op(A), B' = op(B): dA' = g B'^T, dB' = A'^T g.
      if (!trans_a && !trans_b) da.noalias() += g * bm.transpose();
      else if (!trans_a && trans_b) da.noalias() += g * bm;
      else if (trans_a && !trans_b) da.noalias() += bm * g.transpose();
      else da.noalias() += bm.transpose() * g.transpose();
    }
    if (t.requires_grad(b.id)) {
      auto am = t.value(a.id).matrix(ar, ac);
      auto db = t.grad(b.id).matrix(br, bc);
      if (!trans_a && !trans_b) db.noalias() += am.transpose() * g;
      else if (trans_a && !trans_b) db.noalias() += am * g;
      else if (!trans_a && trans_b) db.noalias() += g.transpose() * am;
      else db.noalias() += g.transpose() * am.transpose();
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  require_ndim("linear", x, 2);
  require_ndim("linear", w, 2);
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const int n = x.dim(0);
  const int cout = w.dim(0);
  const int cin = w.dim(1);
  if (b.defined() && (b.value().ndim() != 1 || b.dim(0) != cout)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  }
  Tensor<T> y({n, cout});
  auto ym = y.matrix(n, cout);
  ym.noalias() = x.value().matrix(n, cin) * w.value().matrix(cout, cin).transpose();
  if (b.defined()) ym.rowwise() += b.value().matrix(1, cout).row(0);
  return x.tape->record(std::move(y), {x, w, b}, "linear", [x, w, b, n, cin, cout](Tape<T>& t, int self) {
    auto g = t.grad(self).matrix(n, cout);
    if (t.requires_grad(x.id)) t.grad(x.id).matrix(n, cin).noalias() += g * t.value(w.id).matrix(cout, cin);
    if (t.requires_grad(w.id)) {
      t.grad(w.id).matrix(cout, cin).noalias() += g.transpose() * t.value(x.id).matrix(n, cin);
    }
    if (b.defined() && t.requires_grad(b.id)) {
      Tensor<T>& db = t.grad(b.id);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < cout; ++c) db[c] += g(r, c);
    }
  });
}

template <typename T>
Var<T> softmax(Var<T> a, int axis) {
  const Shape& s = a.shape();
  const int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(s[i]);
  const int n = s[axis];
  const Tensor<T>& x = a.value();
  Tensor<T> y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T z = 0;
      for (int j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (int j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  return a.tape->record(std::move(y), {a}, "softmax", [a, outer, inner, n](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(a.id);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (int j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          dx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_ndim("layer_norm", x, 2);
  const int n = x.dim(0);
  const int c = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("layer_norm: affine " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " vs input " + shape_str(x.shape()));
  }
  const Tensor<T>& xv = x.value();
  Tensor<T> y({n, c});
  std::vector<T> xhat(static_cast<std::size_t>(n) * c);
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const T* row = xv.data() + static_cast<std::size_t>(r) * c;
    T mu = 0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * c + j;
      xhat[i] = (row[j] - mu) * is;
      y[i] = xhat[i] * gamma.value()[j] + beta.value()[j];
    }
  }
  return x.tape->record(std::move(y), {x, gamma, beta}, "layer_norm",
                        [x, gamma, beta, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& gm = t.value(gamma.id);
    if (t.requires_grad(gamma.id) || t.requires_grad(beta.id)) {
      Tensor<T>* dg = t.requires_grad(gamma.id) ? &t.grad(gamma.id) : nullptr;
      Tensor<T>* dbt = t.requires_grad(beta.id) ? &t.grad(beta.id) : nullptr;
      for (int r = 0; r < n; ++r) {
        for (int j = 0; j < c; ++j) {
          const std::size_t i = static_cast<std::size_t>(r) * c + j;
          if (dg) (*dg)[j] += g[i] * xhat[i];
          if (dbt) (*dbt)[j] += g[i];
        }
      }
    }
    if (!t.requires_grad(x.id)) return;
    Tensor<T>& dx = t.grad(x.id);
    for (int r = 0; r < n; ++r) {
      T mean_d = 0, mean_dx = 0;
      for (int j = 0; j < c; ++j) {
        const std::size_t i = static_cast<std::size_t>(r) * c + j;
        const T d = g[i] * gm[j];
        mean_d += d;
        mean_dx += d * xhat[i];
      }
      mean_d /= c;
      mean_dx /= c;
      for (int j = 0; j < c; ++j) {
        const std::size_t i = static_cast<std::size_t>(r) * c + j;
        dx[i] += inv_std[r] * (g[i] * gm[j] - mean_d - xhat[i] * mean_dx);
      }
    }
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  return conv_nd<T, 2>(x, w, b, stride, pad, "conv2d");
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b) {
  if (w.value().ndim() == 5 && w.dim(2) % 2 == 0) {
    throw ShapeError("conv3d: kernel must be odd, got " + shape_str(w.shape()));
  }
  const int pad = w.value().ndim() == 5 ? w.dim(2) / 2 : 0;
  return conv_nd<T, 3>(x, w, b, 1, pad, "conv3d");
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, int stride) {
  require_ndim("conv_transpose2d", x, 3);
  require_ndim("conv_transpose2d", w, 4);
  const int cin = x.dim(0);
  const int h = x.dim(1);
  const int wd = x.dim(2);
  if (w.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const int cout = w.dim(1);
  const int k = w.dim(2);
  if (b.defined() && (b.value().ndim() != 1 || b.dim(0) != cout)) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const std::array<int, 2> out{(h - 1) * stride + k, (wd - 1) * stride + k};
  const std::array<int, 2> in{h, wd};
  const int rows = cout * k * k;
  const int p = h * wd;
  // The transposed convolution is the adjoint of a strided convolution from
  // the output grid back onto the input grid, so it reuses the same gather.
  std::vector<T> col(static_cast<std::size_t>(rows) * p);
  MapM<T>(col.data(), rows, p).noalias() =
      CMapM<T>(w.value().data(), cin, rows).transpose() * CMapM<T>(x.value().data(), cin, p);
  Tensor<T> y({cout, out[0], out[1]});
  im2col<T, 2>(y.data(), col.data(), cout, out, in, k, stride, 0, true);
  if (b.defined()) {
    const std::size_t plane = static_cast<std::size_t>(out[0]) * out[1];
    for (int co = 0; co < cout; ++co) {
      for (std::size_t i = 0; i < plane; ++i) y[co * plane + i] += b.value()[co];
    }
  }
  return x.tape->record(std::move(y), {x, w, b}, "conv_transpose2d",
                        [x, w, b, in, out, k, stride, cin, cout, rows, p](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (b.defined() && t.requires_grad(b.id)) {
      const std::size_t plane = static_cast<std::size_t>(out[0]) * out[1];
      Tensor<T>& db = t.grad(b.id);
      for (int co = 0; co < cout; ++co) {
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[co * plane + i];
        db[co] += acc;
      }
    }
    if (!t.requires_grad(x.id) && !t.requires_grad(w.id)) return;
    std::vector<T> col(static_cast<std::size_t>(rows) * p);
    im2col<T, 2>(g.data(), col.data(), cout, out, in, k, stride, 0, false);
    CMapM<T> cm(col.data(), rows, p);
    if (t.requires_grad(x.id)) {
      MapM<T>(t.grad(x.id).data(), cin, p).noalias() += CMapM<T>(t.value(w.id).data(), cin, rows) * cm;
    }
    if (t.requires_grad(w.id)) {
      MapM<T>(t.grad(w.id).data(), cin, rows).noalias() += CMapM<T>(t.value(x.id).data(), cin, p) * cm.transpose();
    }
  });
}

namespace {

// [c, n] -> [n, c]
template <typename T>
std::vector<T> channels_last(const T* x, int c, std::size_t n) {
  std::vector<T> out(n * static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x + static_cast<std::size_t>(ch) * n;
    for (std::size_t i = 0; i < n; ++i) out[i * c + ch] = src[i];
  }
  return out;
}

// [n, c] -> [c, n], assigning or accumulating.
template <typename T>
void channels_first(const T* x, T* out, int c, std::size_t n, bool accumulate) {
  for (int ch = 0; ch < c; ++ch) {
    T* dst = out + static_cast<std::size_t>(ch) * n;
    if (accumulate) {
      for (std::size_t i = 0; i < n; ++i) dst[i] += x[i * c + ch];
    } else {
      for (std::size_t i = 0; i < n; ++i) dst[i] = x[i * c + ch];
    }
  }
}

// Corner offsets into a channel-last grid and the bilinear weights.
template <typename T>
struct Corners {
  std::size_t i00, i01, i10, i11;
  T w00, w01, w10, w11;
};

template <typename T>
Corners<T> corners(int x0, int y0, T fx, T fy, int w, int h, int c) {
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const auto at = [&](int y, int x) { return (static_cast<std::size_t>(y) * w + x) * c; };
  return {at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1),
          (T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
}

}  // namespace

template <typename T>
Var<T> bilinear_sample(Var<T> feat, Var<T> coords, const Tensor<T>* valid) {
  require_ndim("bilinear_sample", feat, 3);
  const Shape& cs = coords.shape();
  if (cs.empty() || cs.back() != 2) {
    throw ShapeError("bilinear_sample: coords must end in 2, got " + shape_str(cs));
  }
  Shape grid(cs.begin(), cs.end() - 1);
  const std::size_t npts = shape_numel(grid);
  if (valid && valid->shape() != grid) {
    throw ShapeError("bilinear_sample: valid mask " + shape_str(valid->shape()) + " vs grid " + shape_str(grid));
  }
  const int c = feat.dim(0);
  const int h = feat.dim(1);
  const int w = feat.dim(2);
  Shape out_shape{c};
  out_shape.insert(out_shape.end(), grid.begin(), grid.end());

  // Per-point corner index (or -1) and fractional weights.
  struct Sample {
    int x0, y0;
    T fx, fy;
    bool ok;
  };
  std::vector<Sample> samples(npts);
  const Tensor<T>& cv = coords.value();
  for (std::size_t p = 0; p < npts; ++p) {
    const T u = cv[2 * p];
    const T v = cv[2 * p + 1];
    Sample s{0, 0, 0, 0, false};
    if ((!valid || (*valid)[p] != T(0)) && u >= T(0) && v >= T(0) && u <= T(w - 1) && v <= T(h - 1)) {
      s.x0 = std::min(static_cast<int>(std::floor(u)), w - 1);
      s.y0 = std::min(static_cast<int>(std::floor(v)), h - 1);
      s.fx = u - T(s.x0);
      s.fy = v - T(s.y0);
      s.ok = true;
    }
    samples[p] = s;
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // Channel-last copies keep the four corner reads contiguous.
  const std::vector<T> ft = channels_last(feat.value().data(), c, plane);
  std::vector<T> yt(npts * static_cast<std::size_t>(c), T(0));
  for (std::size_t p = 0; p < npts; ++p) {
    const Sample& s = samples[p];
    if (!s.ok) continue;
    const Corners<T> k = corners<T>(s.x0, s.y0, s.fx, s.fy, w, h, c);
    const T* f00 = ft.data() + k.i00;
    const T* f01 = ft.data() + k.i01;
    const T* f10 = ft.data() + k.i10;
    const T* f11 = ft.data() + k.i11;
    T* dst = yt.data() + p * c;
    for (int ch = 0; ch < c; ++ch) dst[ch] = k.w00 * f00[ch] + k.w01 * f01[ch] + k.w10 * f10[ch] + k.w11 * f11[ch];
  }
  Tensor<T> y(out_shape);
  channels_first(yt.data(), y.data(), c, npts, false);
  return feat.tape->record(std::move(y), {feat, coords}, "bilinear_sample",
                           [feat, coords, samples = std::move(samples), c, w, h, npts, plane](Tape<T>& t, int self) {
    const bool need_f = t.requires_grad(feat.id);
    const bool need_c = t.requires_grad(coords.id);
    const std::vector<T> gt = channels_last(t.grad(self).data(), c, npts);
    const std::vector<T> ft = need_c ? channels_last(t.value(feat.id).data(), c, plane) : std::vector<T>();
    std::vector<T> dft(need_f ? plane * static_cast<std::size_t>(c) : 0, T(0));
    Tensor<T>* dc = need_c ? &t.grad(coords.id) : nullptr;
    for (std::size_t p = 0; p < npts; ++p) {
      const Sample& s = samples[p];
      if (!s.ok) continue;
      const Corners<T> k = corners<T>(s.x0, s.y0, s.fx, s.fy, w, h, c);
      const T* gi = gt.data() + p * c;
      if (need_f) {
        T* d00 = dft.data() + k.i00;
        T* d01 = dft.data() + k.i01;
        T* d10 = dft.data() + k.i10;
        T* d11 = dft.data() + k.i11;
        for (int ch = 0; ch < c; ++ch) {
          d00[ch] += k.w00 * gi[ch];
          d01[ch] += k.w01 * gi[ch];
          d10[ch] += k.w10 * gi[ch];
          d11[ch] += k.w11 * gi[ch];
        }
      }
      if (dc) {
        const T* f00 = ft.data() + k.i00;
        const T* f01 = ft.data() + k.i01;
        const T* f10 = ft.data() + k.i10;
        const T* f11 = ft.data() + k.i11;
        T du = 0, dv = 0;
        for (int ch = 0; ch < c; ++ch) {
          du += gi[ch] * ((T(1) - s.fy) * (f01[ch] - f00[ch]) + s.fy * (f11[ch] - f10[ch]));
          dv += gi[ch] * ((T(1) - s.fx) * (f10[ch] - f00[ch]) + s.fx * (f11[ch] - f01[ch]));
        }
        (*dc)[2 * p] += du;
        (*dc)[2 * p + 1] += dv;
      }
    }
    if (need_f) channels_first(dft.data(), t.grad(feat.id).data(), c, plane, true);
  });
}

template <typename T>
Var<T> resize_bilinear(Var<T> x, int out_h, int out_w) {
  require_ndim("resize_bilinear", x, 3);
  const int h = x.dim(1);
  const int w = x.dim(2);
  Tensor<T> grid({out_h, out_w, 2});
  for (int v = 0; v < out_h; ++v) {
    const T sv = static_cast<T>(resize_source_coord(v, h, out_h));
    for (int u = 0; u < out_w; ++u) {
      grid.at(v, u, 0) = static_cast<T>(resize_source_coord(u, w, out_w));
      grid.at(v, u, 1) = sv;
    }
  }
  return bilinear_sample(x, x.tape->constant(std::move(grid)));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels, int ignore) {
  require_ndim("cross_entropy", logits, 2);
  const int k = logits.dim(0);
  const int p = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(p)) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const Tensor<T>& x = logits.value();
  std::vector<T> probs(static_cast<std::size_t>(k) * p);
  std::vector<int> lab(labels.begin(), labels.end());
  T total = 0;
  int count = 0;
  for (int i = 0; i < p; ++i) {
    if (lab[i] == ignore) continue;
    if (lab[i] < 0 || lab[i] >= k) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(lab[i]) + " outside [0," +
                                  std::to_string(k) + ")");
    }
    T mx = x[i];
    for (int j = 1; j < k; ++j) mx = std::max(mx, x[static_cast<std::size_t>(j) * p + i]);
    T z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(x[static_cast<std::size_t>(j) * p + i] - mx);
    const T lse = mx + std::log(z);
    for (int j = 0; j < k; ++j) {
      probs[static_cast<std::size_t>(j) * p + i] = std::exp(x[static_cast<std::size_t>(j) * p + i] - lse);
    }
    total += lse - x[static_cast<std::size_t>(lab[i]) * p + i];
    ++count;
  }
  const T loss = count ? total / count : T(0);
  return logits.tape->record(Tensor<T>({1}, {loss}), {logits}, "cross_entropy",
                             [logits, probs = std::move(probs), lab = std::move(lab), k, p, count, ignore](
                                 Tape<T>& t, int self) {
    if (!count || !t.requires_grad(logits.id)) return;
    const T g = t.grad(self)[0] / count;
    Tensor<T>& dx = t.grad(logits.id);
    for (int i = 0; i < p; ++i) {
      if (lab[i] == ignore) continue;
      for (int j = 0; j < k; ++j) {
        const std::size_t idx = static_cast<std::size_t>(j) * p + i;
        dx[idx] += g * (probs[idx] - (j == lab[i] ? T(1) : T(0)));
      }
    }
  });
}

template <typename T>
Var<T> smooth_l1(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask, T beta) {
  if (pred.shape() != target.shape() || mask.shape() != target.shape()) {
    throw ShapeError("smooth_l1: pred " + shape_str(pred.shape()) + ", target " + shape_str(target.shape()) +
                     ", mask " + shape_str(mask.shape()));
  }
  if (!(beta > T(0))) throw std::invalid_argument("smooth_l1: beta must be positive");
  const Tensor<T>& x = pred.value();
  T total = 0;
  int count = 0;
  std::vector<T> slope(x.size(), T(0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i] == T(0)) continue;
    const T d = x[i] - target[i];
    const T a = std::abs(d);
    total += a < beta ? T(0.5) * d * d / beta : a - T(0.5) * beta;
    slope[i] = std::clamp(d / beta, T(-1), T(1));
    ++count;
  }
  const T loss = count ? total / count : T(0);
  return pred.tape->record(Tensor<T>({1}, {loss}), {pred}, "smooth_l1",
                           [pred, slope = std::move(slope), count](Tape<T>& t, int self) {
    if (!count || !t.requires_grad(pred.id)) return;
    const T g = t.grad(self)[0] / count;
    Tensor<T>& dx = t.grad(pred.id);
    for (std::size_t i = 0; i < slope.size(); ++i) dx[i] += g * slope[i];
  });
}

#define SWEEPSTACK_INSTANTIATE(T)                                                             \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> add_scalar(Var<T>, T);                                                      \
  template Var<T> scale_by(Var<T>, Var<T>);                                                   \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> gelu(Var<T>);                                                               \
  template Var<T> clamp(Var<T>, T, T);                                                        \
  template Var<T> detach(Var<T>);                                                             \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> transpose(Var<T>);                                                          \
  template Var<T> slice_cols(Var<T>, int, int);                                               \
  template Var<T> concat_cols(std::span<const Var<T>>);                                       \
  template Var<T> sum(Var<T>);                                                                \
  template Var<T> mean(Var<T>);                                                               \
  template Var<T> sum_axis0(Var<T>);                                                          \
  template Var<T> mean_axis0(Var<T>);                                                         \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                         \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> softmax(Var<T>, int);                                                       \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                      \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                   \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, Var<T>, int);                              \
  template Var<T> conv3d(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> bilinear_sample(Var<T>, Var<T>, const Tensor<T>*);                          \
  template Var<T> resize_bilinear(Var<T>, int, int);                                          \
  template Var<T> cross_entropy(Var<T>, std::span<const int>, int);                           \
  template Var<T> smooth_l1(Var<T>, const Tensor<T>&, const Tensor<T>&, T);

SWEEPSTACK_INSTANTIATE(float)
SWEEPSTACK_INSTANTIATE(double)
#undef SWEEPSTACK_INSTANTIATE

}  // namespace ad
}  // namespace sweepstack
