#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "demtg/common.hpp"
#include "demtg/tensor.hpp"

namespace demtg {

// Reverse-mode tape over whole tensors. Every operation that sees a tracked
// operand appends one node holding a vector-Jacobian closure; backward() walks
// the nodes in reverse append order (which is a topological order by
// construction). One forward/backward pass per tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  // Debug switch: scales the named primitive's VJP by 1.5 so finite
  // differences catch it. Used by the gradcheck negative control.
  void set_broken_op(std::string op) { broken_op_ = std::move(op); }

  Tensor leaf(const Tensor& t) {
    Tensor out = t;
    out.node_ = new_node(t.size(), {});
    return out;
  }

  // ---- elementwise ----

  Tensor add(const Tensor& a, const Tensor& b) { return ew_binary(a, b, "add"); }
  Tensor sub(const Tensor& a, const Tensor& b) { return ew_binary(a, b, "sub"); }
  Tensor mul(const Tensor& a, const Tensor& b) { return ew_binary(a, b, "mul"); }

  Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= c;
    Tensor r = wrap(a.shape(), std::move(out));
    if (a.tracked()) {
      int an = a.node_;
      long long n = a.size();
      r.node_ = new_node(n, [an, n, c](Tape& t, const std::vector<double>& g) {
        double s = c * t.vjp_scale("scale");
        auto& da = t.gbuf(an, n);
        for (long long i = 0; i < n; ++i) da[i] += s * g[i];
      });
    }
    return r;
  }

  Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (double& v : out) v += c;
    Tensor r = wrap(a.shape(), std::move(out));
    if (a.tracked()) {
      int an = a.node_;
      long long n = a.size();
      r.node_ = new_node(n, [an, n](Tape& t, const std::vector<double>& g) {
        auto& da = t.gbuf(an, n);
        for (long long i = 0; i < n; ++i) da[i] += g[i];
      });
    }
    return r;
  }

  // ---- linear algebra ----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw DimError("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& A = a.data();
    const auto& B = b.data();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        const double aip = A[static_cast<std::size_t>(i) * k + p];
        if (aip == 0.0) continue;
        const double* brow = &B[static_cast<std::size_t>(p) * n];
        double* orow = &out[static_cast<std::size_t>(i) * n];
        for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
    Tensor r = wrap({m, n}, std::move(out));
    if (a.tracked() || b.tracked()) {
      int an = a.node_, bn = b.node_;
      auto ad = a.data_, bd = b.data_;
      r.node_ = new_node(r.size(), [an, bn, ad, bd, m, k, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("matmul");
        if (an >= 0) {
          auto& da = t.gbuf(an, static_cast<long long>(m) * k);
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j)
                acc += g[static_cast<std::size_t>(i) * n + j] * (*bd)[static_cast<std::size_t>(p) * n + j];
              da[static_cast<std::size_t>(i) * k + p] += s * acc;
            }
        }
        if (bn >= 0) {
          auto& db = t.gbuf(bn, static_cast<long long>(k) * n);
          for (int i = 0; i < m; ++i) {
            const double* arow = &(*ad)[static_cast<std::size_t>(i) * k];
            const double* grow = &g[static_cast<std::size_t>(i) * n];
            for (int p = 0; p < k; ++p) {
              const double aip = s * arow[p];
              if (aip == 0.0) continue;
              double* drow = &db[static_cast<std::size_t>(p) * n];
              for (int j = 0; j < n; ++j) drow[j] += aip * grow[j];
            }
          }
        }
      });
    }
    return r;
  }

  Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimError("transpose expects rank 2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.at(i, j);
    Tensor r = wrap({n, m}, std::move(out));
    if (a.tracked()) {
      int an = a.node_;
      r.node_ = new_node(r.size(), [an, m, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("transpose");
        auto& da = t.gbuf(an, static_cast<long long>(m) * n);
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i)
            da[static_cast<std::size_t>(i) * n + j] += s * g[static_cast<std::size_t>(j) * m + i];
      });
    }
    return r;
  }

  // Row-wise affine map: x is [... x in], w is [in x out], b is [out] or
  // undefined for no bias. The only broadcasting in the library is this bias
  // row-broadcast and scalar ops.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0)) {
      throw DimError("linear shape mismatch: " + shape_str(x.shape()) + " * " +
                     shape_str(w.shape()));
    }
    const int in = w.dim(0), out_c = w.dim(1);
    const long long rows = x.size() / in;
    if (b.defined() && b.size() != out_c) {
      throw DimError("linear bias shape " + shape_str(b.shape()) + " does not match out dim " +
                     std::to_string(out_c));
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * out_c, 0.0);
    const auto& X = x.data();
    const auto& W = w.data();
    for (long long r = 0; r < rows; ++r) {
      double* orow = &out[static_cast<std::size_t>(r) * out_c];
      if (b.defined())
        for (int j = 0; j < out_c; ++j) orow[j] = b[j];
      for (int p = 0; p < in; ++p) {
        const double xv = X[static_cast<std::size_t>(r) * in + p];
        if (xv == 0.0) continue;
        const double* wrow = &W[static_cast<std::size_t>(p) * out_c];
        for (int j = 0; j < out_c; ++j) orow[j] += xv * wrow[j];
      }
    }
    std::vector<int> oshape = x.shape();
    oshape.back() = out_c;
    Tensor r = wrap(oshape, std::move(out));
    if (x.tracked() || w.tracked() || b.tracked()) {
      int xn = x.node_, wn = w.node_, bn = b.defined() ? b.node_ : -1;
      auto xd = x.data_, wd = w.data_;
      r.node_ = new_node(r.size(), [xn, wn, bn, xd, wd, rows, in, out_c](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("linear");
        if (xn >= 0) {
          auto& dx = t.gbuf(xn, rows * in);
          for (long long r2 = 0; r2 < rows; ++r2)
            for (int p = 0; p < in; ++p) {
              double acc = 0.0;
              for (int j = 0; j < out_c; ++j)
                acc += g[static_cast<std::size_t>(r2) * out_c + j] * (*wd)[static_cast<std::size_t>(p) * out_c + j];
              dx[static_cast<std::size_t>(r2) * in + p] += s * acc;
            }
        }
        if (wn >= 0) {
          auto& dw = t.gbuf(wn, static_cast<long long>(in) * out_c);
          for (long long r2 = 0; r2 < rows; ++r2)
            for (int p = 0; p < in; ++p) {
              const double xv = (*xd)[static_cast<std::size_t>(r2) * in + p];
              if (xv == 0.0) continue;
              for (int j = 0; j < out_c; ++j)
                dw[static_cast<std::size_t>(p) * out_c + j] += s * xv * g[static_cast<std::size_t>(r2) * out_c + j];
            }
        }
        if (bn >= 0) {
          auto& db = t.gbuf(bn, out_c);
          for (long long r2 = 0; r2 < rows; ++r2)
            for (int j = 0; j < out_c; ++j) db[j] += s * g[static_cast<std::size_t>(r2) * out_c + j];
        }
      });
    }
    return r;
  }

  // ---- nonlinearities ----

  Tensor softmax_lastdim(const Tensor& x) {
    const int c = x.dim(x.rank() - 1);
    const long long rows = x.size() / c;
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    const auto& X = x.data();
    for (long long r = 0; r < rows; ++r) {
      const double* xr = &X[static_cast<std::size_t>(r) * c];
      double* yr = &out[static_cast<std::size_t>(r) * c];
      double mx = xr[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
      double z = 0.0;
      for (int j = 0; j < c; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        z += yr[j];
      }
      for (int j = 0; j < c; ++j) yr[j] /= z;
    }
    Tensor r = wrap(x.shape(), std::move(out));
    if (x.tracked()) {
      int xn = x.node_;
      auto yd = r.data_;
      r.node_ = new_node(r.size(), [xn, yd, rows, c](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("softmax");
        auto& dx = t.gbuf(xn, rows * c);
        for (long long r2 = 0; r2 < rows; ++r2) {
          const double* yr = &(*yd)[static_cast<std::size_t>(r2) * c];
          const double* gr = &g[static_cast<std::size_t>(r2) * c];
          double dot = 0.0;
          for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
          for (int j = 0; j < c; ++j)
            dx[static_cast<std::size_t>(r2) * c + j] += s * yr[j] * (gr[j] - dot);
        }
      });
    }
    return r;
  }

  // Exact GELU x * Phi(x), erf form.
  Tensor gelu(const Tensor& x) {
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    const auto& X = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * norm_cdf(X[i]);
    Tensor r = wrap(x.shape(), std::move(out));
    if (x.tracked()) {
      int xn = x.node_;
      auto xd = x.data_;
      long long n = x.size();
      r.node_ = new_node(n, [xn, xd, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("gelu");
        auto& dx = t.gbuf(xn, n);
        for (long long i = 0; i < n; ++i) {
          const double v = (*xd)[static_cast<std::size_t>(i)];
          dx[i] += s * g[i] * (norm_cdf(v) + v * norm_pdf(v));
        }
      });
    }
    return r;
  }

  // ---- normalization ----

  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5) {
    const int c = x.dim(x.rank() - 1);
    if (gain.size() != c || bias.size() != c) {
      throw DimError("layer_norm gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match channels " + std::to_string(c));
    }
    const long long rows = x.size() / c;
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    const auto& X = x.data();
    for (long long r = 0; r < rows; ++r) {
      const double* xr = &X[static_cast<std::size_t>(r) * c];
      double mu = 0.0;
      for (int j = 0; j < c; ++j) mu += xr[j];
      mu /= c;
      double var = 0.0;
      for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= c;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_sigma)[static_cast<std::size_t>(r)] = is;
      for (int j = 0; j < c; ++j) {
        const double xh = (xr[j] - mu) * is;
        (*xhat)[static_cast<std::size_t>(r) * c + j] = xh;
        out[static_cast<std::size_t>(r) * c + j] = gain[j] * xh + bias[j];
      }
    }
    Tensor r = wrap(x.shape(), std::move(out));
    if (x.tracked() || gain.tracked() || bias.tracked()) {
      int xn = x.node_, gn = gain.node_, bn = bias.node_;
      auto gd = gain.data_;
      r.node_ = new_node(r.size(), [xn, gn, bn, gd, xhat, inv_sigma, rows, c](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("layer_norm");
        for (long long r2 = 0; r2 < rows; ++r2) {
          const double* xh = &(*xhat)[static_cast<std::size_t>(r2) * c];
          const double* gr = &g[static_cast<std::size_t>(r2) * c];
          if (xn >= 0) {
            const double is = (*inv_sigma)[static_cast<std::size_t>(r2)];
            double mean_dg = 0.0, mean_dgx = 0.0;
            for (int j = 0; j < c; ++j) {
              const double dxh = gr[j] * (*gd)[static_cast<std::size_t>(j)];
              mean_dg += dxh;
              mean_dgx += dxh * xh[j];
            }
            mean_dg /= c;
            mean_dgx /= c;
            auto& dx = t.gbuf(xn, rows * c);
            for (int j = 0; j < c; ++j) {
              const double dxh = gr[j] * (*gd)[static_cast<std::size_t>(j)];
              dx[static_cast<std::size_t>(r2) * c + j] += s * is * (dxh - mean_dg - xh[j] * mean_dgx);
            }
          }
          if (gn >= 0) {
            auto& dgain = t.gbuf(gn, c);
            for (int j = 0; j < c; ++j) dgain[j] += s * gr[j] * xh[j];
          }
          if (bn >= 0) {
            auto& dbias = t.gbuf(bn, c);
            for (int j = 0; j < c; ++j) dbias[j] += s * gr[j];
          }
        }
      });
    }
    return r;
  }

  // BatchNorm with channels-last layout; all leading axes form the batch.
  // Train mode normalizes by batch statistics and reports the updated running
  // stats through new_mean/new_var (momentum blend); eval mode uses the given
  // running stats as constants.
  Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    const Tensor& run_mean, const Tensor& run_var, Mode mode,
                    Tensor* new_mean = nullptr, Tensor* new_var = nullptr,
                    double momentum = 0.1, double eps = 1e-5) {
    const int c = x.dim(x.rank() - 1);
    const long long m = x.size() / c;
    if (gain.size() != c || bias.size() != c || run_mean.size() != c || run_var.size() != c) {
      throw DimError("batch_norm parameter shapes do not match channels " + std::to_string(c));
    }
    if (mode == Mode::kTrain && m < 2) {
      throw DegenerateError("batch_norm train mode needs >=2 batch elements per channel, got " +
                            std::to_string(m));
    }
    std::vector<double> mu(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    const auto& X = x.data();
    if (mode == Mode::kTrain) {
      for (long long i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) mu[static_cast<std::size_t>(j)] += X[static_cast<std::size_t>(i) * c + j];
      for (int j = 0; j < c; ++j) mu[static_cast<std::size_t>(j)] /= static_cast<double>(m);
      for (long long i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) {
          const double d = X[static_cast<std::size_t>(i) * c + j] - mu[static_cast<std::size_t>(j)];
          var[static_cast<std::size_t>(j)] += d * d;
        }
      for (int j = 0; j < c; ++j) var[static_cast<std::size_t>(j)] /= static_cast<double>(m);
      if (new_mean) {
        std::vector<double> nm(static_cast<std::size_t>(c)), nv(static_cast<std::size_t>(c));
        for (int j = 0; j < c; ++j) {
          nm[static_cast<std::size_t>(j)] = (1.0 - momentum) * run_mean[j] + momentum * mu[static_cast<std::size_t>(j)];
          nv[static_cast<std::size_t>(j)] = (1.0 - momentum) * run_var[j] + momentum * var[static_cast<std::size_t>(j)];
        }
        *new_mean = Tensor::from_data({c}, std::move(nm));
        if (new_var) *new_var = Tensor::from_data({c}, std::move(nv));
      }
    } else {
      for (int j = 0; j < c; ++j) {
        mu[static_cast<std::size_t>(j)] = run_mean[j];
        var[static_cast<std::size_t>(j)] = run_var[j];
      }
    }
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j)
      (*inv_sigma)[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + eps);
    for (long long i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) {
        const double xh = (X[static_cast<std::size_t>(i) * c + j] - mu[static_cast<std::size_t>(j)]) *
                          (*inv_sigma)[static_cast<std::size_t>(j)];
        (*xhat)[static_cast<std::size_t>(i) * c + j] = xh;
        out[static_cast<std::size_t>(i) * c + j] = gain[j] * xh + bias[j];
      }
    Tensor r = wrap(x.shape(), std::move(out));
    if (x.tracked() || gain.tracked() || bias.tracked()) {
      int xn = x.node_, gn = gain.node_, bn = bias.node_;
      auto gd = gain.data_;
      const bool train = mode == Mode::kTrain;
      r.node_ = new_node(r.size(), [xn, gn, bn, gd, xhat, inv_sigma, m, c, train](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("batch_norm");
        if (gn >= 0) {
          auto& dgain = t.gbuf(gn, c);
          for (long long i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j)
              dgain[j] += s * g[static_cast<std::size_t>(i) * c + j] * (*xhat)[static_cast<std::size_t>(i) * c + j];
        }
        if (bn >= 0) {
          auto& dbias = t.gbuf(bn, c);
          for (long long i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) dbias[j] += s * g[static_cast<std::size_t>(i) * c + j];
        }
        if (xn >= 0) {
          auto& dx = t.gbuf(xn, m * c);
          if (train) {
            // Per channel: dx = is/m * (m*dxh - sum(dxh) - xh*sum(dxh*xh))
            std::vector<double> sum_dxh(static_cast<std::size_t>(c), 0.0), sum_dxh_xh(static_cast<std::size_t>(c), 0.0);
            for (long long i = 0; i < m; ++i)
              for (int j = 0; j < c; ++j) {
                const double dxh = g[static_cast<std::size_t>(i) * c + j] * (*gd)[static_cast<std::size_t>(j)];
                sum_dxh[static_cast<std::size_t>(j)] += dxh;
                sum_dxh_xh[static_cast<std::size_t>(j)] += dxh * (*xhat)[static_cast<std::size_t>(i) * c + j];
              }
            for (long long i = 0; i < m; ++i)
              for (int j = 0; j < c; ++j) {
                const double dxh = g[static_cast<std::size_t>(i) * c + j] * (*gd)[static_cast<std::size_t>(j)];
                const double xh = (*xhat)[static_cast<std::size_t>(i) * c + j];
                dx[static_cast<std::size_t>(i) * c + j] +=
                    s * (*inv_sigma)[static_cast<std::size_t>(j)] / static_cast<double>(m) *
                    (static_cast<double>(m) * dxh - sum_dxh[static_cast<std::size_t>(j)] -
                     xh * sum_dxh_xh[static_cast<std::size_t>(j)]);
              }
          } else {
            for (long long i = 0; i < m; ++i)
              for (int j = 0; j < c; ++j)
                dx[static_cast<std::size_t>(i) * c + j] +=
                    s * g[static_cast<std::size_t>(i) * c + j] * (*gd)[static_cast<std::size_t>(j)] *
                    (*inv_sigma)[static_cast<std::size_t>(j)];
          }
        }
      });
    }
    return r;
  }

  // ---- convolutions & sampling ----

  // x [h,w,cin], w [kh,kw,cin,cout], b [cout] (optional), cross-correlation.
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4 || x.dim(2) != w.dim(2)) {
      throw DimError("conv2d shape mismatch: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()));
    }
    if (stride < 1) throw ConfigError("conv2d stride must be >=1");
    const int h = x.dim(0), wd = x.dim(1), ci = x.dim(2);
    const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    if (h + 2 * pad < kh || wd + 2 * pad < kw) {
      throw DimError("conv2d padded extent smaller than kernel: x " + shape_str(x.shape()) +
                     " pad " + std::to_string(pad) + ", kernel " + shape_str(w.shape()));
    }
    if (b.defined() && b.size() != co) {
      throw DimError("conv2d bias shape " + shape_str(b.shape()) + " != cout " + std::to_string(co));
    }
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(oh) * ow * co, 0.0);
    const auto& X = x.data();
    const auto& W = w.data();
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double* orow = &out[(static_cast<std::size_t>(oy) * ow + ox) * co];
        if (b.defined())
          for (int q = 0; q < co; ++q) orow[q] = b[q];
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            const double* xr = &X[(static_cast<std::size_t>(iy) * wd + ix) * ci];
            const double* wr = &W[(static_cast<std::size_t>(ky) * kw + kx) * ci * co];
            for (int p = 0; p < ci; ++p) {
              const double xv = xr[p];
              if (xv == 0.0) continue;
              for (int q = 0; q < co; ++q) orow[q] += xv * wr[static_cast<std::size_t>(p) * co + q];
            }
          }
        }
      }
    Tensor r = wrap({oh, ow, co}, std::move(out));
    if (x.tracked() || w.tracked() || (b.defined() && b.tracked())) {
      int xn = x.node_, wn = w.node_, bn = b.defined() ? b.node_ : -1;
      auto xd = x.data_, wdata = w.data_;
      r.node_ = new_node(r.size(), [=](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("conv2d");
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const double* gr = &g[(static_cast<std::size_t>(oy) * ow + ox) * co];
            if (bn >= 0) {
              auto& db = t.gbuf(bn, co);
              for (int q = 0; q < co; ++q) db[q] += s * gr[q];
            }
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                for (int p = 0; p < ci; ++p) {
                  const double xv = (*xd)[(static_cast<std::size_t>(iy) * wd + ix) * ci + p];
                  for (int q = 0; q < co; ++q) {
                    const double wv = (*wdata)[((static_cast<std::size_t>(ky) * kw + kx) * ci + p) * co + q];
                    if (xn >= 0) {
                      auto& dx = t.gbuf(xn, static_cast<long long>(h) * wd * ci);
                      dx[(static_cast<std::size_t>(iy) * wd + ix) * ci + p] += s * gr[q] * wv;
                    }
                    if (wn >= 0) {
                      auto& dw = t.gbuf(wn, static_cast<long long>(kh) * kw * ci * co);
                      dw[((static_cast<std::size_t>(ky) * kw + kx) * ci + p) * co + q] += s * gr[q] * xv;
                    }
                  }
                }
              }
            }
          }
      });
    }
    return r;
  }

  // Per-channel 1D cross-correlation along the token axis; x [n,c], w [k,c],
  // b [c]; zero padding (k-1)/2 keeps the length.
  Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
      throw DimError("conv1d_depthwise shape mismatch: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()));
    }
    const int n = x.dim(0), c = x.dim(1), k = w.dim(0);
    if (k % 2 == 0) throw ConfigError("conv1d_depthwise kernel must be odd, got " + std::to_string(k));
    if (b.size() != c) throw DimError("conv1d_depthwise bias shape mismatch");
    const int pad = (k - 1) / 2;
    std::vector<double> out(static_cast<std::size_t>(n) * c);
    const auto& X = x.data();
    const auto& W = w.data();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        double acc = b[j];
        for (int t = 0; t < k; ++t) {
          const int src = i - pad + t;
          if (src < 0 || src >= n) continue;
          acc += W[static_cast<std::size_t>(t) * c + j] * X[static_cast<std::size_t>(src) * c + j];
        }
        out[static_cast<std::size_t>(i) * c + j] = acc;
      }
    Tensor r = wrap(x.shape(), std::move(out));
    if (x.tracked() || w.tracked() || b.tracked()) {
      int xn = x.node_, wn = w.node_, bn = b.node_;
      auto xd = x.data_, wdata = w.data_;
      r.node_ = new_node(r.size(), [xn, wn, bn, xd, wdata, n, c, k, pad](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("conv1d");
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < c; ++j) {
            const double gv = s * g[static_cast<std::size_t>(i) * c + j];
            if (gv == 0.0) continue;
            if (bn >= 0) t.gbuf(bn, c)[j] += gv;
            for (int tt = 0; tt < k; ++tt) {
              const int src = i - pad + tt;
              if (src < 0 || src >= n) continue;
              if (xn >= 0)
                t.gbuf(xn, static_cast<long long>(n) * c)[static_cast<std::size_t>(src) * c + j] +=
                    gv * (*wdata)[static_cast<std::size_t>(tt) * c + j];
              if (wn >= 0)
                t.gbuf(wn, static_cast<long long>(k) * c)[static_cast<std::size_t>(tt) * c + j] +=
                    gv * (*xd)[static_cast<std::size_t>(src) * c + j];
            }
          }
      });
    }
    return r;
  }

  // Reads x at (i + offsets[i,j,0], j + offsets[i,j,1]) for every position,
  // bilinearly, with zero padding outside; differentiable in x and offsets.
  Tensor deform_sample(const Tensor& x, const Tensor& offsets) {
    if (x.rank() != 3 || offsets.rank() != 3 || offsets.dim(2) != 2 ||
        offsets.dim(0) != x.dim(0) || offsets.dim(1) != x.dim(1)) {
      throw DimError("deform_sample shape mismatch: x " + shape_str(x.shape()) + ", offsets " +
                     shape_str(offsets.shape()));
    }
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<double> out(static_cast<std::size_t>(h) * w * c, 0.0);
    const auto& X = x.data();
    const auto& O = offsets.data();
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double py = i + O[(static_cast<std::size_t>(i) * w + j) * 2 + 0];
        const double px = j + O[(static_cast<std::size_t>(i) * w + j) * 2 + 1];
        bilinear_read(X.data(), h, w, c, py, px, &out[(static_cast<std::size_t>(i) * w + j) * c]);
      }
    Tensor r = wrap({h, w, c}, std::move(out));
    if (x.tracked() || offsets.tracked()) {
      int xn = x.node_, on = offsets.node_;
      auto xd = x.data_, od = offsets.data_;
      r.node_ = new_node(r.size(), [xn, on, xd, od, h, w, c](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("deform_sample");
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double py = i + (*od)[(static_cast<std::size_t>(i) * w + j) * 2 + 0];
            const double px = j + (*od)[(static_cast<std::size_t>(i) * w + j) * 2 + 1];
            if (py <= -1.0 || py >= h || px <= -1.0 || px >= w) continue;
            const int y0 = static_cast<int>(std::floor(py));
            const int x0 = static_cast<int>(std::floor(px));
            const double ly = py - y0, lx = px - x0;
            const double hy = 1.0 - ly, hx = 1.0 - lx;
            const int y1 = y0 + 1, x1 = x0 + 1;
            const bool in00 = y0 >= 0 && x0 >= 0;
            const bool in01 = y0 >= 0 && x1 <= w - 1;
            const bool in10 = y1 <= h - 1 && x0 >= 0;
            const bool in11 = y1 <= h - 1 && x1 <= w - 1;
            const double* gr = &g[(static_cast<std::size_t>(i) * w + j) * c];
            double dpy = 0.0, dpx = 0.0;
            for (int p = 0; p < c; ++p) {
              const double gv = gr[p];
              const double v00 = in00 ? (*xd)[(static_cast<std::size_t>(y0) * w + x0) * c + p] : 0.0;
              const double v01 = in01 ? (*xd)[(static_cast<std::size_t>(y0) * w + x1) * c + p] : 0.0;
              const double v10 = in10 ? (*xd)[(static_cast<std::size_t>(y1) * w + x0) * c + p] : 0.0;
              const double v11 = in11 ? (*xd)[(static_cast<std::size_t>(y1) * w + x1) * c + p] : 0.0;
              if (xn >= 0 && gv != 0.0) {
                auto& dx = t.gbuf(xn, static_cast<long long>(h) * w * c);
                if (in00) dx[(static_cast<std::size_t>(y0) * w + x0) * c + p] += s * gv * hy * hx;
                if (in01) dx[(static_cast<std::size_t>(y0) * w + x1) * c + p] += s * gv * hy * lx;
                if (in10) dx[(static_cast<std::size_t>(y1) * w + x0) * c + p] += s * gv * ly * hx;
                if (in11) dx[(static_cast<std::size_t>(y1) * w + x1) * c + p] += s * gv * ly * lx;
              }
              dpy += gv * (hx * (v10 - v00) + lx * (v11 - v01));
              dpx += gv * (hy * (v01 - v00) + ly * (v11 - v10));
            }
            if (on >= 0) {
              auto& doff = t.gbuf(on, static_cast<long long>(h) * w * 2);
              doff[(static_cast<std::size_t>(i) * w + j) * 2 + 0] += s * dpy;
              doff[(static_cast<std::size_t>(i) * w + j) * 2 + 1] += s * dpx;
            }
          }
      });
    }
    return r;
  }

  // Half-pixel-center bilinear upsampling by an integer factor, clamped at
  // the borders: src = (dst + 0.5) / f - 0.5.
  Tensor upsample_bilinear(const Tensor& x, int factor) {
    if (factor < 1) throw ConfigError("upsample factor must be >=1, got " + std::to_string(factor));
    if (x.rank() != 3) throw DimError("upsample expects [h,w,c], got " + shape_str(x.shape()));
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = h * factor, ow = w * factor;
    // Per output row/col: source low index and interpolation weight.
    auto make_axis = [factor](int in_n, int out_n) {
      std::vector<std::pair<int, double>> ax(static_cast<std::size_t>(out_n));
      for (int d = 0; d < out_n; ++d) {
        double sc = (d + 0.5) / factor - 0.5;
        if (sc < 0.0) sc = 0.0;
        if (sc > in_n - 1) sc = in_n - 1;
        int lo = static_cast<int>(std::floor(sc));
        if (lo > in_n - 2) lo = in_n >= 2 ? in_n - 2 : 0;
        double frac = sc - lo;
        if (in_n == 1) frac = 0.0;
        ax[static_cast<std::size_t>(d)] = {lo, frac};
      }
      return ax;
    };
    auto ay = std::make_shared<std::vector<std::pair<int, double>>>(make_axis(h, oh));
    auto axx = std::make_shared<std::vector<std::pair<int, double>>>(make_axis(w, ow));
    std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
    const auto& X = x.data();
    for (int r2 = 0; r2 < oh; ++r2) {
      const auto [y0, fy] = (*ay)[static_cast<std::size_t>(r2)];
      const int y1 = h == 1 ? y0 : y0 + 1;
      for (int s2 = 0; s2 < ow; ++s2) {
        const auto [x0, fx] = (*axx)[static_cast<std::size_t>(s2)];
        const int x1 = w == 1 ? x0 : x0 + 1;
        for (int p = 0; p < c; ++p) {
          const double v00 = X[(static_cast<std::size_t>(y0) * w + x0) * c + p];
          const double v01 = X[(static_cast<std::size_t>(y0) * w + x1) * c + p];
          const double v10 = X[(static_cast<std::size_t>(y1) * w + x0) * c + p];
          const double v11 = X[(static_cast<std::size_t>(y1) * w + x1) * c + p];
          out[(static_cast<std::size_t>(r2) * ow + s2) * c + p] =
              (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
      }
    }
    Tensor r = wrap({oh, ow, c}, std::move(out));
    if (x.tracked()) {
      int xn = x.node_;
      r.node_ = new_node(r.size(), [xn, ay, axx, h, w, c, oh, ow](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("upsample");
        auto& dx = t.gbuf(xn, static_cast<long long>(h) * w * c);
        for (int r2 = 0; r2 < oh; ++r2) {
          const auto [y0, fy] = (*ay)[static_cast<std::size_t>(r2)];
          const int y1 = h == 1 ? y0 : y0 + 1;
          for (int s2 = 0; s2 < ow; ++s2) {
            const auto [x0, fx] = (*axx)[static_cast<std::size_t>(s2)];
            const int x1 = w == 1 ? x0 : x0 + 1;
            for (int p = 0; p < c; ++p) {
              const double gv = s * g[(static_cast<std::size_t>(r2) * ow + s2) * c + p];
              dx[(static_cast<std::size_t>(y0) * w + x0) * c + p] += gv * (1 - fy) * (1 - fx);
              dx[(static_cast<std::size_t>(y0) * w + x1) * c + p] += gv * (1 - fy) * fx;
              dx[(static_cast<std::size_t>(y1) * w + x0) * c + p] += gv * fy * (1 - fx);
              dx[(static_cast<std::size_t>(y1) * w + x1) * c + p] += gv * fy * fx;
            }
          }
        }
      });
    }
    return r;
  }

  // ---- structure ----

  Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_size(shape) != x.size()) {
      throw DimError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
    }
    Tensor r = wrap(shape, std::vector<double>(x.data()));
    if (x.tracked()) {
      int xn = x.node_;
      long long n = x.size();
      r.node_ = new_node(n, [xn, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("reshape");
        auto& dx = t.gbuf(xn, n);
        for (long long i = 0; i < n; ++i) dx[i] += s * g[i];
      });
    }
    return r;
  }

  Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
      throw DimError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                     shape_str(x.shape()));
    }
    const int n = x.dim(0), c = x.dim(1), k = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = x.at(i, c0 + j);
    Tensor r = wrap({n, k}, std::move(out));
    if (x.tracked()) {
      int xn = x.node_;
      r.node_ = new_node(r.size(), [xn, n, c, c0, k](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("slice_cols");
        auto& dx = t.gbuf(xn, static_cast<long long>(n) * c);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j)
            dx[static_cast<std::size_t>(i) * c + c0 + j] += s * g[static_cast<std::size_t>(i) * k + j];
      });
    }
    return r;
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows of empty list");
    const int c = parts[0].dim(1);
    int total = 0;
    bool tracked = false;
    for (const auto& p : parts) {
      if (p.rank() != 2 || p.dim(1) != c) {
        throw ContractError("concat_rows column mismatch: " + shape_str(p.shape()));
      }
      total += p.dim(0);
      tracked = tracked || p.tracked();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor r = wrap({total, c}, std::move(out));
    if (tracked) {
      std::vector<int> ns;
      std::vector<long long> sizes;
      for (const auto& p : parts) {
        ns.push_back(p.node_);
        sizes.push_back(p.size());
      }
      r.node_ = new_node(r.size(), [ns, sizes](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("concat_rows");
        long long off = 0;
        for (std::size_t k = 0; k < ns.size(); ++k) {
          if (ns[k] >= 0) {
            auto& d = t.gbuf(ns[k], sizes[k]);
            for (long long i = 0; i < sizes[k]; ++i) d[i] += s * g[static_cast<std::size_t>(off + i)];
          }
          off += sizes[k];
        }
      });
    }
    return r;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of empty list");
    const int n = parts[0].dim(0);
    int total = 0;
    bool tracked = false;
    for (const auto& p : parts) {
      if (p.rank() != 2 || p.dim(0) != n) {
        throw ContractError("concat_cols row mismatch: " + shape_str(p.shape()));
      }
      total += p.dim(1);
      tracked = tracked || p.tracked();
    }
    std::vector<double> out(static_cast<std::size_t>(n) * total);
    int off = 0;
    for (const auto& p : parts) {
      const int pc = p.dim(1);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < pc; ++j)
          out[static_cast<std::size_t>(i) * total + off + j] = p.at(i, j);
      off += pc;
    }
    Tensor r = wrap({n, total}, std::move(out));
    if (tracked) {
      std::vector<int> ns;
      std::vector<int> widths;
      for (const auto& p : parts) {
        ns.push_back(p.node_);
        widths.push_back(p.dim(1));
      }
      r.node_ = new_node(r.size(), [ns, widths, n, total](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("concat_cols");
        int coff = 0;
        for (std::size_t k = 0; k < ns.size(); ++k) {
          const int pc = widths[k];
          if (ns[k] >= 0) {
            auto& d = t.gbuf(ns[k], static_cast<long long>(n) * pc);
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < pc; ++j)
                d[static_cast<std::size_t>(i) * pc + j] += s * g[static_cast<std::size_t>(i) * total + coff + j];
          }
          coff += pc;
        }
      });
    }
    return r;
  }

  // ---- reductions ----

  Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (long long i = 0; i < x.size(); ++i) acc += x[i];
    Tensor r = wrap({1}, {acc});
    if (x.tracked()) {
      int xn = x.node_;
      long long n = x.size();
      r.node_ = new_node(1, [xn, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("sum");
        auto& dx = t.gbuf(xn, n);
        for (long long i = 0; i < n; ++i) dx[i] += s * g[0];
      });
    }
    return r;
  }

  Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

  // ---- losses ----

  // logits [..., K] with one integer label per row; rows whose label equals
  // ignore_label are excluded from the mean.
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, int ignore_label = -1) {
    const int k = logits.dim(logits.rank() - 1);
    const long long rows = logits.size() / k;
    if (static_cast<long long>(labels.size()) != rows) {
      throw ContractError("cross_entropy labels size " + std::to_string(labels.size()) +
                          " != rows " + std::to_string(rows));
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(logits.size()));
    const auto& X = logits.data();
    double total = 0.0;
    long long valid = 0;
    for (long long r = 0; r < rows; ++r) {
      const int lab = labels[static_cast<std::size_t>(r)];
      if (lab == ignore_label) continue;
      if (lab < 0 || lab >= k) {
        throw DataError("cross_entropy label " + std::to_string(lab) + " out of range [0," +
                        std::to_string(k) + ")");
      }
      valid++;
    }
    if (valid == 0) throw DegenerateError("cross_entropy: all rows ignored");
    for (long long r = 0; r < rows; ++r) {
      const double* xr = &X[static_cast<std::size_t>(r) * k];
      double* pr = &(*probs)[static_cast<std::size_t>(r) * k];
      double mx = xr[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
      double z = 0.0;
      for (int j = 0; j < k; ++j) {
        pr[j] = std::exp(xr[j] - mx);
        z += pr[j];
      }
      for (int j = 0; j < k; ++j) pr[j] /= z;
      const int lab = labels[static_cast<std::size_t>(r)];
      if (lab == ignore_label) continue;
      total += std::log(z) + mx - xr[lab];
    }
    Tensor r = wrap({1}, {total / static_cast<double>(valid)});
    if (logits.tracked()) {
      int xn = logits.node_;
      auto labs = std::make_shared<std::vector<int>>(labels);
      r.node_ = new_node(1, [xn, probs, labs, rows, k, ignore_label, valid](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("cross_entropy") * g[0] / static_cast<double>(valid);
        auto& dx = t.gbuf(xn, rows * k);
        for (long long r2 = 0; r2 < rows; ++r2) {
          const int lab = (*labs)[static_cast<std::size_t>(r2)];
          if (lab == ignore_label) continue;
          for (int j = 0; j < k; ++j) {
            double p = (*probs)[static_cast<std::size_t>(r2) * k + j];
            dx[static_cast<std::size_t>(r2) * k + j] += s * (p - (j == lab ? 1.0 : 0.0));
          }
        }
      });
    }
    return r;
  }

  // Mean |pred - target| over entries where mask (empty = all valid) is set.
  Tensor l1_loss(const Tensor& pred, const Tensor& target, const std::vector<std::uint8_t>& mask = {}) {
    if (!pred.same_shape(target)) {
      throw DimError("l1_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
    }
    if (!mask.empty() && static_cast<long long>(mask.size()) != pred.size()) {
      throw ContractError("l1_loss mask size mismatch");
    }
    const long long n = pred.size();
    long long valid = 0;
    double total = 0.0;
    for (long long i = 0; i < n; ++i) {
      if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
      total += std::fabs(pred[i] - target[i]);
      valid++;
    }
    if (valid == 0) throw DegenerateError("l1_loss: empty valid mask");
    Tensor r = wrap({1}, {total / static_cast<double>(valid)});
    if (pred.tracked()) {
      int pn = pred.node_;
      auto pd = pred.data_, td = target.data_;
      auto mk = std::make_shared<std::vector<std::uint8_t>>(mask);
      r.node_ = new_node(1, [pn, pd, td, mk, n, valid](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("l1_loss") * g[0] / static_cast<double>(valid);
        auto& dp = t.gbuf(pn, n);
        for (long long i = 0; i < n; ++i) {
          if (!mk->empty() && !(*mk)[static_cast<std::size_t>(i)]) continue;
          const double d = (*pd)[static_cast<std::size_t>(i)] - (*td)[static_cast<std::size_t>(i)];
          // subgradient 0 at the kink
          dp[i] += s * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
      });
    }
    return r;
  }

  // Softplus-stabilized binary cross-entropy on logits; targets in {0,1}.
  Tensor bce_logits(const Tensor& logits, const std::vector<std::uint8_t>& target) {
    const long long n = logits.size();
    if (static_cast<long long>(target.size()) != n) {
      throw ContractError("bce_logits target size mismatch");
    }
    for (std::uint8_t y : target) {
      if (y > 1) throw DataError("bce_logits target must be binary");
    }
    double total = 0.0;
    for (long long i = 0; i < n; ++i) {
      const double z = logits[i];
      const double y = target[static_cast<std::size_t>(i)];
      total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
    }
    Tensor r = wrap({1}, {total / static_cast<double>(n)});
    if (logits.tracked()) {
      int zn = logits.node_;
      auto zd = logits.data_;
      auto yd = std::make_shared<std::vector<std::uint8_t>>(target);
      r.node_ = new_node(1, [zn, zd, yd, n](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale("bce_logits") * g[0] / static_cast<double>(n);
        auto& dz = t.gbuf(zn, n);
        for (long long i = 0; i < n; ++i) {
          const double z = (*zd)[static_cast<std::size_t>(i)];
          const double sig = 1.0 / (1.0 + std::exp(-z));
          dz[i] += s * (sig - static_cast<double>((*yd)[static_cast<std::size_t>(i)]));
        }
      });
    }
    return r;
  }

  // ---- backward ----

  void backward(const Tensor& root) {
    if (!root.tracked()) throw ContractError("backward: root is not on this tape");
    if (root.size() != 1) {
      throw ContractError("backward: root must be scalar, got " + shape_str(root.shape()));
    }
    grads_.assign(nodes_.size(), {});
    gbuf(root.node_, 1)[0] = 1.0;
    for (int i = root.node_; i >= 0; --i) {
      if (grads_[static_cast<std::size_t>(i)].empty()) continue;
      if (nodes_[static_cast<std::size_t>(i)].vjp) {
        nodes_[static_cast<std::size_t>(i)].vjp(*this, grads_[static_cast<std::size_t>(i)]);
      }
    }
  }

  // Gradient of the last backward() w.r.t. t; zeros if t never received one.
  std::vector<double> grad_of(const Tensor& t) const {
    if (!t.tracked()) throw ContractError("grad_of: tensor is not on this tape");
    const auto& g = grads_.at(static_cast<std::size_t>(t.node_));
    if (g.empty()) return std::vector<double>(static_cast<std::size_t>(t.size()), 0.0);
    return g;
  }

  static double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
  static double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

  // Plain bilinear read with zero padding, shared with deform_sample.
  static void bilinear_read(const double* x, int h, int w, int c, double py, double px,
                            double* out) {
    if (py <= -1.0 || py >= h || px <= -1.0 || px >= w) {
      for (int p = 0; p < c; ++p) out[p] = 0.0;
      return;
    }
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double ly = py - y0, lx = px - x0;
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    const int y1 = y0 + 1, x1 = x0 + 1;
    for (int p = 0; p < c; ++p) {
      const double v00 = (y0 >= 0 && x0 >= 0) ? x[(static_cast<std::size_t>(y0) * w + x0) * c + p] : 0.0;
      const double v01 = (y0 >= 0 && x1 <= w - 1) ? x[(static_cast<std::size_t>(y0) * w + x1) * c + p] : 0.0;
      const double v10 = (y1 <= h - 1 && x0 >= 0) ? x[(static_cast<std::size_t>(y1) * w + x0) * c + p] : 0.0;
      const double v11 = (y1 <= h - 1 && x1 <= w - 1) ? x[(static_cast<std::size_t>(y1) * w + x1) * c + p] : 0.0;
      out[p] = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
    }
  }

 private:
  struct Node {
    long long out_size;
    std::function<void(Tape&, const std::vector<double>&)> vjp;
  };

  int new_node(long long out_size, std::function<void(Tape&, const std::vector<double>&)> vjp) {
    nodes_.push_back({out_size, std::move(vjp)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor wrap(std::vector<int> shape, std::vector<double> data) {
    return Tensor::from_data(std::move(shape), std::move(data));
  }

  std::vector<double>& gbuf(int node, long long n) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(n), 0.0);
    return g;
  }

  double vjp_scale(const char* op) const { return broken_op_ == op ? 1.5 : 1.0; }

  Tensor ew_binary(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
      throw DimError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
    }
    const long long n = a.size();
    std::vector<double> out(static_cast<std::size_t>(n));
    const char kind = op[0] == 'a' ? '+' : (op[0] == 's' ? '-' : '*');
    for (long long i = 0; i < n; ++i) {
      out[static_cast<std::size_t>(i)] = kind == '+' ? a[i] + b[i]
                                        : kind == '-' ? a[i] - b[i]
                                                      : a[i] * b[i];
    }
    Tensor r = wrap(a.shape(), std::move(out));
    if (a.tracked() || b.tracked()) {
      int an = a.node_, bn = b.node_;
      auto ad = a.data_, bd = b.data_;
      std::string opname = op;
      r.node_ = new_node(n, [an, bn, ad, bd, n, kind, opname](Tape& t, const std::vector<double>& g) {
        const double s = t.vjp_scale(opname.c_str());
        if (an >= 0) {
          auto& da = t.gbuf(an, n);
          for (long long i = 0; i < n; ++i)
            da[i] += s * (kind == '*' ? g[i] * (*bd)[static_cast<std::size_t>(i)] : g[i]);
        }
        if (bn >= 0) {
          auto& db = t.gbuf(bn, n);
          for (long long i = 0; i < n; ++i)
            db[i] += s * (kind == '+' ? g[i]
                          : kind == '-' ? -g[i]
                                        : g[i] * (*ad)[static_cast<std::size_t>(i)]);
        }
      });
    }
    return r;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::string broken_op_;
};

// Point read of x [h,w,c] at a fractional location, zero padding outside.
// The differentiable counterpart is Tape::deform_sample.
inline Tensor bilinear_sample(const Tensor& x, double py, double px) {
  if (x.rank() != 3) throw DimError("bilinear_sample expects [h,w,c], got " + shape_str(x.shape()));
  std::vector<double> out(static_cast<std::size_t>(x.dim(2)));
  Tape::bilinear_read(x.data().data(), x.dim(0), x.dim(1), x.dim(2), py, px, out.data());
  return Tensor::from_data({x.dim(2)}, std::move(out));
}

}  // namespace demtg
