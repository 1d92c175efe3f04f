#include "bmod/nn/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace bmod::nn {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

void require(bool cond, const char* op, const std::string& detail) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + detail);
}

template <typename T>
bool any_grad(const Var<T>& v) {
  return v.valid() && v.tape->needs_grad(v.id);
}

template <typename T>
Var<T> unary(const Var<T>& x, std::vector<T> y,
             std::function<void(const std::vector<T>& out, const std::vector<T>& dy,
                                std::vector<T>& dx)>
                 rule) {
  Tape<T>* tape = x.tape;
  const int xi = x.id;
  Var<T> out = tape->push(x.shape(), std::move(y), any_grad(x), nullptr);
  const int oi = out.id;
  if (any_grad(x)) {
    tape->node(oi).backward = [tape, xi, oi, rule] {
      rule(tape->node(oi).value, tape->node(oi).grad, tape->grad(xi));
    };
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(xs.size() == 4 && ws.size() == 4, "conv2d", "expects 4-d input and weight");
  require(xs[1] == ws[1], "conv2d",
          "channel mismatch " + shape_string(xs) + " vs " + shape_string(ws));
  require(ws[2] == ws[3], "conv2d", "square kernels only");
  const int batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const int cout = ws[0], k = ws[2];
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d", "empty output");
  const int ck = cin * k * k;
  const int hw_out = ho * wo;

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch) * ck * hw_out);
  std::vector<T> y(static_cast<std::size_t>(batch) * cout * hw_out);
  const auto xv = x.value();
  const auto wv = weight.value();
  const auto bv = bias.value();
  CMapR<T> wm(wv.data(), cout, ck);

  for (int b = 0; b < batch; ++b) {
    T* col = cols->data() + static_cast<std::size_t>(b) * ck * hw_out;
    const T* xb = xv.data() + static_cast<std::size_t>(b) * cin * h * w;
    for (int c = 0; c < cin; ++c) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw_out;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            T* dst = row + oy * wo;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              continue;
            }
            const T* src = xb + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix < 0 || ix >= w) ? T(0) : src[ix];
            }
          }
        }
      }
    }
    MapR<T> ym(y.data() + static_cast<std::size_t>(b) * cout * hw_out, cout, hw_out);
    ym.noalias() = wm * CMapR<T>(col, ck, hw_out);
    for (int o = 0; o < cout; ++o) ym.row(o).array() += bv[o];
  }

  Tape<T>* tape = x.tape;
  const bool ng = any_grad(x) || any_grad(weight) || any_grad(bias);
  Var<T> out = tape->push({batch, cout, ho, wo}, std::move(y), ng, nullptr);
  if (ng) {
    const int xi = x.id, wi = weight.id, bi = bias.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      const bool gx = tape->needs_grad(xi), gw = tape->needs_grad(wi), gb = tape->needs_grad(bi);
      std::vector<T> dcol(gx ? static_cast<std::size_t>(ck) * hw_out : 0);
      CMapR<T> wmb(tape->node(wi).value.data(), cout, ck);
      for (int b = 0; b < batch; ++b) {
        CMapR<T> dym(dy.data() + static_cast<std::size_t>(b) * cout * hw_out, cout, hw_out);
        const T* col = cols->data() + static_cast<std::size_t>(b) * ck * hw_out;
        if (gw) {
          MapR<T> dw(tape->grad(wi).data(), cout, ck);
          dw.noalias() += dym * CMapR<T>(col, ck, hw_out).transpose();
        }
        if (gb) {
          auto& db = tape->grad(bi);
          for (int o = 0; o < cout; ++o) db[o] += dym.row(o).sum();
        }
        if (gx) {
          MapR<T> dc(dcol.data(), ck, hw_out);
          dc.noalias() = wmb.transpose() * dym;
          T* dxb = tape->grad(xi).data() + static_cast<std::size_t>(b) * cin * h * w;
          for (int c = 0; c < cin; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const T* row = dcol.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * hw_out;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  T* dst = dxb + (static_cast<std::size_t>(c) * h + iy) * w;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  return unary<T>(x, std::move(y), [](const auto& out, const auto& dy, auto& dx) {
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (out[i] > T(0)) dx[i] += dy[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v = T(1) / (T(1) + std::exp(-v));
  return unary<T>(x, std::move(y), [](const auto& out, const auto& dy, auto& dx) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * out[i] * (T(1) - out[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v = std::tanh(v);
  return unary<T>(x, std::move(y), [](const auto& out, const auto& dy, auto& dx) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (T(1) - out[i] * out[i]);
  });
}

template <typename T>
Var<T> one_minus(const Var<T>& x) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v = T(1) - v;
  return unary<T>(x, std::move(y), [](const auto&, const auto& dy, auto& dx) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] -= dy[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v *= factor;
  return unary<T>(x, std::move(y), [factor](const auto&, const auto& dy, auto& dx) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
  });
}

namespace {

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, Binary kind, const char* name) {
  require(a.shape() == b.shape(), name,
          "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const auto av = a.value();
  const auto bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    switch (kind) {
      case Binary::kAdd: y[i] = av[i] + bv[i]; break;
      case Binary::kSub: y[i] = av[i] - bv[i]; break;
      case Binary::kMul: y[i] = av[i] * bv[i]; break;
    }
  }
  Tape<T>* tape = a.tape;
  const bool ng = any_grad(a) || any_grad(b);
  Var<T> out = tape->push(a.shape(), std::move(y), ng, nullptr);
  if (ng) {
    const int ai = a.id, bi = b.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      if (tape->needs_grad(ai)) {
        auto& da = tape->grad(ai);
        if (kind == Binary::kMul) {
          const auto& bvv = tape->node(bi).value;
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bvv[i];
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
      }
      if (tape->needs_grad(bi)) {
        auto& db = tape->grad(bi);
        if (kind == Binary::kMul) {
          const auto& avv = tape->node(ai).value;
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * avv[i];
        } else if (kind == Binary::kSub) {
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
        }
      }
    };
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
          "concat_channels", shape_string(as) + " vs " + shape_string(bs));
  const int batch = as[0], ca = as[1], cb = bs[1];
  const std::size_t plane = static_cast<std::size_t>(as[2]) * as[3];
  std::vector<T> y(static_cast<std::size_t>(batch) * (ca + cb) * plane);
  const auto av = a.value();
  const auto bv = b.value();
  for (int n = 0; n < batch; ++n) {
    std::copy_n(av.data() + n * ca * plane, ca * plane, y.data() + n * (ca + cb) * plane);
    std::copy_n(bv.data() + n * cb * plane, cb * plane, y.data() + (n * (ca + cb) + ca) * plane);
  }
  Tape<T>* tape = a.tape;
  const bool ng = any_grad(a) || any_grad(b);
  Var<T> out = tape->push({batch, ca + cb, as[2], as[3]}, std::move(y), ng, nullptr);
  if (ng) {
    const int ai = a.id, bi = b.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      for (int n = 0; n < batch; ++n) {
        if (tape->needs_grad(ai)) {
          auto& da = tape->grad(ai);
          const T* src = dy.data() + n * (ca + cb) * plane;
          for (std::size_t i = 0; i < ca * plane; ++i) da[n * ca * plane + i] += src[i];
        }
        if (tape->needs_grad(bi)) {
          auto& db = tape->grad(bi);
          const T* src = dy.data() + (n * (ca + cb) + ca) * plane;
          for (std::size_t i = 0; i < cb * plane; ++i) db[n * cb * plane + i] += src[i];
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  const Shape& xs = x.shape();
  require(xs.size() == 4 && begin >= 0 && count > 0 && begin + count <= xs[1], "slice_channels",
          shape_string(xs));
  const int batch = xs[0], c = xs[1];
  const std::size_t plane = static_cast<std::size_t>(xs[2]) * xs[3];
  std::vector<T> y(static_cast<std::size_t>(batch) * count * plane);
  const auto xv = x.value();
  for (int n = 0; n < batch; ++n)
    std::copy_n(xv.data() + (n * c + begin) * plane, count * plane, y.data() + n * count * plane);
  Tape<T>* tape = x.tape;
  Var<T> out = tape->push({batch, count, xs[2], xs[3]}, std::move(y), any_grad(x), nullptr);
  if (any_grad(x)) {
    const int xi = x.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      auto& dx = tape->grad(xi);
      for (int n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < count * plane; ++i)
          dx[(n * c + begin) * plane + i] += dy[n * count * plane + i];
    };
  }
  return out;
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  const Shape& xs = x.shape();
  require(xs.size() == 4 && factor >= 1, "upsample_nearest", shape_string(xs));
  const int planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const int ho = h * factor, wo = w * factor;
  std::vector<T> y(static_cast<std::size_t>(planes) * ho * wo);
  const auto xv = x.value();
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        y[(static_cast<std::size_t>(p) * ho + oy) * wo + ox] =
            xv[(static_cast<std::size_t>(p) * h + oy / factor) * w + ox / factor];
  Tape<T>* tape = x.tape;
  Var<T> out = tape->push({xs[0], xs[1], ho, wo}, std::move(y), any_grad(x), nullptr);
  if (any_grad(x)) {
    const int xi = x.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      auto& dx = tape->grad(xi);
      for (int p = 0; p < planes; ++p)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            dx[(static_cast<std::size_t>(p) * h + oy / factor) * w + ox / factor] +=
                dy[(static_cast<std::size_t>(p) * ho + oy) * wo + ox];
    };
  }
  return out;
}

namespace {

// Swaps the last two axes of a [B, R, C] buffer.
template <typename T>
void transpose_batched(const T* src, T* dst, int batch, int rows, int cols, bool accumulate) {
  for (int b = 0; b < batch; ++b) {
    const T* s = src + static_cast<std::size_t>(b) * rows * cols;
    T* d = dst + static_cast<std::size_t>(b) * rows * cols;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        if (accumulate)
          d[c * rows + r] += s[r * cols + c];
        else
          d[c * rows + r] = s[r * cols + c];
      }
  }
}

template <typename T>
Var<T> transpose_last(const Var<T>& x, Shape out_shape, int batch, int rows, int cols) {
  std::vector<T> y(x.value().size());
  transpose_batched(x.value().data(), y.data(), batch, rows, cols, false);
  Tape<T>* tape = x.tape;
  Var<T> out = tape->push(std::move(out_shape), std::move(y), any_grad(x), nullptr);
  if (any_grad(x)) {
    const int xi = x.id, oi = out.id;
    tape->node(oi).backward = [=] {
      transpose_batched(tape->node(oi).grad.data(), tape->grad(xi).data(), batch, cols, rows, true);
    };
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  const Shape& xs = x.shape();
  require(xs.size() == 4, "to_tokens", shape_string(xs));
  const int n = xs[2] * xs[3];
  return transpose_last(x, {xs[0], n, xs[1]}, xs[0], xs[1], n);
}

template <typename T>
Var<T> from_tokens(const Var<T>& x, int height, int width) {
  const Shape& xs = x.shape();
  require(xs.size() == 3 && xs[1] == height * width, "from_tokens", shape_string(xs));
  return transpose_last(x, {xs[0], xs[2], height, width}, xs[0], xs[1], xs[2]);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(!xs.empty() && ws.size() == 2 && xs.back() == ws[0], "linear",
          shape_string(xs) + " x " + shape_string(ws));
  const int in = ws[0], outd = ws[1];
  const int rows = static_cast<int>(x.size() / in);
  std::vector<T> y(static_cast<std::size_t>(rows) * outd);
  MapR<T> ym(y.data(), rows, outd);
  ym.noalias() = CMapR<T>(x.value().data(), rows, in) * CMapR<T>(weight.value().data(), in, outd);
  const auto bv = bias.value();
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < outd; ++o) ym(r, o) += bv[o];
  Shape os = xs;
  os.back() = outd;
  Tape<T>* tape = x.tape;
  const bool ng = any_grad(x) || any_grad(weight) || any_grad(bias);
  Var<T> out = tape->push(std::move(os), std::move(y), ng, nullptr);
  if (ng) {
    const int xi = x.id, wi = weight.id, bi = bias.id, oi = out.id;
    tape->node(oi).backward = [=] {
      CMapR<T> dy(tape->node(oi).grad.data(), rows, outd);
      if (tape->needs_grad(wi)) {
        MapR<T> dw(tape->grad(wi).data(), in, outd);
        dw.noalias() += CMapR<T>(tape->node(xi).value.data(), rows, in).transpose() * dy;
      }
      if (tape->needs_grad(bi)) {
        auto& db = tape->grad(bi);
        for (int r = 0; r < rows; ++r)
          for (int o = 0; o < outd; ++o) db[o] += dy(r, o);
      }
      if (tape->needs_grad(xi)) {
        MapR<T> dx(tape->grad(xi).data(), rows, in);
        dx.noalias() += dy * CMapR<T>(tape->node(wi).value.data(), in, outd).transpose();
      }
    };
  }
  return out;
}

template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& rows) {
  const Shape& xs = x.shape();
  const Shape& rs = rows.shape();
  require(xs.size() == 3 && rs.size() == 2 && xs[1] == rs[0] && xs[2] == rs[1], "add_rows",
          shape_string(xs) + " + " + shape_string(rs));
  const std::size_t block = rows.size();
  const int batch = xs[0];
  std::vector<T> y(x.value().begin(), x.value().end());
  const auto rv = rows.value();
  for (int b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < block; ++i) y[b * block + i] += rv[i];
  Tape<T>* tape = x.tape;
  const bool ng = any_grad(x) || any_grad(rows);
  Var<T> out = tape->push(xs, std::move(y), ng, nullptr);
  if (ng) {
    const int xi = x.id, ri = rows.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      if (tape->needs_grad(xi)) {
        auto& dx = tape->grad(xi);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (tape->needs_grad(ri)) {
        auto& dr = tape->grad(ri);
        for (int b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < block; ++i) dr[i] += dy[b * block + i];
      }
    };
  }
  return out;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, T eps) {
  const Shape& xs = x.shape();
  const int c = xs.back();
  require(gain.size() == static_cast<std::size_t>(c) && offset.size() == gain.size(), "layer_norm",
          shape_string(xs));
  const int rows = static_cast<int>(x.size() / c);
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> y(x.size());
  const auto xv = x.value();
  const auto gv = gain.value();
  const auto ov = offset.value();
  for (int r = 0; r < rows; ++r) {
    const T* xr = xv.data() + static_cast<std::size_t>(r) * c;
    T mean = 0;
    for (int i = 0; i < c; ++i) mean += xr[i];
    mean /= T(c);
    T var = 0;
    for (int i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int i = 0; i < c; ++i) {
      const T xh = (xr[i] - mean) * is;
      (*xhat)[r * c + i] = xh;
      y[r * c + i] = xh * gv[i] + ov[i];
    }
  }
  Tape<T>* tape = x.tape;
  const bool ng = any_grad(x) || any_grad(gain) || any_grad(offset);
  Var<T> out = tape->push(xs, std::move(y), ng, nullptr);
  if (ng) {
    const int xi = x.id, gi = gain.id, bi = offset.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      const auto& g = tape->node(gi).value;
      const bool gx = tape->needs_grad(xi);
      std::vector<T> dxh(c);
      for (int r = 0; r < rows; ++r) {
        const T* dyr = dy.data() + static_cast<std::size_t>(r) * c;
        const T* xh = xhat->data() + static_cast<std::size_t>(r) * c;
        if (tape->needs_grad(gi)) {
          auto& dg = tape->grad(gi);
          for (int i = 0; i < c; ++i) dg[i] += dyr[i] * xh[i];
        }
        if (tape->needs_grad(bi)) {
          auto& db = tape->grad(bi);
          for (int i = 0; i < c; ++i) db[i] += dyr[i];
        }
        if (gx) {
          T mean_d = 0, mean_dx = 0;
          for (int i = 0; i < c; ++i) {
            dxh[i] = dyr[i] * g[i];
            mean_d += dxh[i];
            mean_dx += dxh[i] * xh[i];
          }
          mean_d /= T(c);
          mean_dx /= T(c);
          T* dx = tape->grad(xi).data() + static_cast<std::size_t>(r) * c;
          for (int i = 0; i < c; ++i) dx[i] += (*inv_std)[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0], "bmm",
          shape_string(as) + " x " + shape_string(bs));
  const int batch = as[0];
  const int n = transpose_a ? as[2] : as[1];
  const int k = transpose_a ? as[1] : as[2];
  const int kb = transpose_b ? bs[2] : bs[1];
  const int m = transpose_b ? bs[1] : bs[2];
  require(k == kb, "bmm", "inner dimension mismatch " + shape_string(as) + " x " + shape_string(bs));
  const int ar = as[1], ac = as[2], br = bs[1], bc = bs[2];
  std::vector<T> y(static_cast<std::size_t>(batch) * n * m);
  const auto av = a.value();
  const auto bv = b.value();
  for (int i = 0; i < batch; ++i) {
    CMapR<T> am(av.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
    CMapR<T> bm(bv.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
    MapR<T> ym(y.data() + static_cast<std::size_t>(i) * n * m, n, m);
    if (!transpose_a && !transpose_b) ym.noalias() = am * bm;
    if (!transpose_a && transpose_b) ym.noalias() = am * bm.transpose();
    if (transpose_a && !transpose_b) ym.noalias() = am.transpose() * bm;
    if (transpose_a && transpose_b) ym.noalias() = am.transpose() * bm.transpose();
  }
  Tape<T>* tape = a.tape;
  const bool ng = any_grad(a) || any_grad(b);
  Var<T> out = tape->push({batch, n, m}, std::move(y), ng, nullptr);
  if (ng) {
    const int ai = a.id, bi = b.id, oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      const auto& avv = tape->node(ai).value;
      const auto& bvv = tape->node(bi).value;
      const bool ga = tape->needs_grad(ai), gb = tape->needs_grad(bi);
      for (int i = 0; i < batch; ++i) {
        CMapR<T> dym(dy.data() + static_cast<std::size_t>(i) * n * m, n, m);
        CMapR<T> am(avv.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        CMapR<T> bm(bvv.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        if (ga) {
          MapR<T> da(tape->grad(ai).data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
          // d op(A) = dY op(B)^T
          if (!transpose_a && !transpose_b) da.noalias() += dym * bm.transpose();
          if (!transpose_a && transpose_b) da.noalias() += dym * bm;
          if (transpose_a && !transpose_b) da.noalias() += bm * dym.transpose();
          if (transpose_a && transpose_b) da.noalias() += bm.transpose() * dym.transpose();
        }
        if (gb) {
          MapR<T> db(tape->grad(bi).data() + static_cast<std::size_t>(i) * br * bc, br, bc);
          // d op(B) = op(A)^T dY
          if (!transpose_a && !transpose_b) db.noalias() += am.transpose() * dym;
          if (!transpose_a && transpose_b) db.noalias() += dym.transpose() * am;
          if (transpose_a && !transpose_b) db.noalias() += am * dym;
          if (transpose_a && transpose_b) db.noalias() += dym.transpose() * am.transpose();
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const int c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<T> y(x.value().begin(), x.value().end());
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y.data() + r * c;
    T mx = yr[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, yr[i]);
    T sum = 0;
    for (int i = 0; i < c; ++i) {
      yr[i] = std::exp(yr[i] - mx);
      sum += yr[i];
    }
    for (int i = 0; i < c; ++i) yr[i] /= sum;
  }
  return unary<T>(x, std::move(y), [c, rows](const auto& out, const auto& dy, auto& dx) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = out.data() + r * c;
      const T* dyr = dy.data() + r * c;
      T dot = 0;
      for (int i = 0; i < c; ++i) dot += dyr[i] * yr[i];
      for (int i = 0; i < c; ++i) dx[r * c + i] += yr[i] * (dyr[i] - dot);
    }
  });
}

template <typename T>
Var<T> normalize_over_positions(const Var<T>& w, T eps) {
  const Shape& ws = w.shape();
  require(ws.size() == 3, "normalize_over_positions", shape_string(ws));
  const int batch = ws[0], n = ws[1], s = ws[2];
  auto denom = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch) * s, eps);
  const auto wv = w.value();
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < s; ++j) (*denom)[b * s + j] += wv[(b * n + i) * s + j];
  std::vector<T> y(wv.size());
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < s; ++j) y[(b * n + i) * s + j] = wv[(b * n + i) * s + j] / (*denom)[b * s + j];
  return unary<T>(w, std::move(y), [=](const auto& out, const auto& dy, auto& dx) {
    // y = w / d, d = eps + sum_i w_i  =>  dw_i = (dy_i - sum_m dy_m y_m) / d
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < s; ++j) {
        T dot = 0;
        for (int i = 0; i < n; ++i) dot += dy[(b * n + i) * s + j] * out[(b * n + i) * s + j];
        const T d = (*denom)[b * s + j];
        for (int i = 0; i < n; ++i) dx[(b * n + i) * s + j] += (dy[(b * n + i) * s + j] - dot) / d;
      }
  });
}

template <typename T>
Var<T> slot_init(const Var<T>& background, const Var<T>& mean, const Var<T>& log_std,
                 const Var<T>& noise) {
  const Shape& ns = noise.shape();
  require(ns.size() == 3, "slot_init", shape_string(ns));
  const int batch = ns[0], sampled = ns[1], dim = ns[2];
  const bool has_bg = background.valid();
  require(mean.size() == static_cast<std::size_t>(dim) && log_std.size() == mean.size() &&
              (!has_bg || background.size() == mean.size()),
          "slot_init", "slot dimension mismatch");
  const int slots = sampled + (has_bg ? 1 : 0);
  const int first = has_bg ? 1 : 0;
  std::vector<T> y(static_cast<std::size_t>(batch) * slots * dim);
  const auto mv = mean.value();
  const auto lv = log_std.value();
  const auto nv = noise.value();
  for (int b = 0; b < batch; ++b) {
    if (has_bg) std::copy_n(background.value().data(), dim, y.data() + b * slots * dim);
    for (int k = 0; k < sampled; ++k)
      for (int d = 0; d < dim; ++d)
        y[(b * slots + first + k) * dim + d] = mv[d] + std::exp(lv[d]) * nv[(b * sampled + k) * dim + d];
  }
  Tape<T>* tape = mean.tape;
  const bool ng = (has_bg && any_grad(background)) || any_grad(mean) || any_grad(log_std);
  Var<T> out = tape->push({batch, slots, dim}, std::move(y), ng, nullptr);
  if (ng) {
    const int gi = has_bg ? background.id : -1, mi = mean.id, li = log_std.id, ni = noise.id,
              oi = out.id;
    tape->node(oi).backward = [=] {
      const auto& dy = tape->node(oi).grad;
      const auto& nvv = tape->node(ni).value;
      const auto& lvv = tape->node(li).value;
      for (int b = 0; b < batch; ++b) {
        if (gi >= 0 && tape->needs_grad(gi)) {
          auto& dg = tape->grad(gi);
          for (int d = 0; d < dim; ++d) dg[d] += dy[b * slots * dim + d];
        }
        for (int k = 0; k < sampled; ++k)
          for (int d = 0; d < dim; ++d) {
            const T g = dy[(b * slots + first + k) * dim + d];
            if (tape->needs_grad(mi)) tape->grad(mi)[d] += g;
            if (tape->needs_grad(li))
              tape->grad(li)[d] += g * std::exp(lvv[d]) * nvv[(b * sampled + k) * dim + d];
          }
      }
    };
  }
  return out;
}

#define BMOD_INSTANTIATE(T)                                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);            \
  template Var<T> relu(const Var<T>&);                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                   \
  template Var<T> tanh(const Var<T>&);                                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> one_minus(const Var<T>&);                                                 \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                            \
  template Var<T> slice_channels(const Var<T>&, int, int);                                  \
  template Var<T> upsample_nearest(const Var<T>&, int);                                     \
  template Var<T> to_tokens(const Var<T>&);                                                 \
  template Var<T> from_tokens(const Var<T>&, int, int);                                     \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> add_rows(const Var<T>&, const Var<T>&);                                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                            \
  template Var<T> softmax_last(const Var<T>&);                                              \
  template Var<T> normalize_over_positions(const Var<T>&, T);                               \
  template Var<T> slot_init(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);

BMOD_INSTANTIATE(float)
BMOD_INSTANTIATE(double)

}  // namespace bmod::nn
