#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prvr/errors.hpp"

namespace prvr {

// Dense row-major 64-bit float tensor. The grad slot is empty unless a
// backward pass populated it.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
  }

  static Tensor zeros(std::vector<std::size_t> s, bool rg = false) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
  }
  static Tensor full(std::vector<std::size_t> s, double v, bool rg = false) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v), rg);
  }
  static Tensor scalar(double v, bool rg = false) { return Tensor({1}, {v}, rg); }

  std::size_t numel() const { return values.size(); }
  bool is_scalar() const { return numel() == 1; }
  bool is_vector() const { return shape.size() == 1; }
  bool is_matrix() const { return shape.size() == 2; }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& at(std::size_t i) { return values[i]; }
  double at(std::size_t i) const { return values[i]; }
  double& at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

  std::string shape_str() const { return shape_str(shape); }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Records the forward computation so backward() can replay it in reverse.
// Node ids are creation-ordered, so every node's inputs precede it and a
// single reverse sweep visits each node exactly once.
class Tape {
 public:
  using NodeId = std::size_t;

  struct MaxResult {
    NodeId id;       // scalar node holding the max value
    std::size_t argmax;
  };

  NodeId input(Tensor t) { return push(std::move(t), {}, nullptr); }

  NodeId constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), {}, nullptr);
  }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() w.r.t. node `id`; empty if none flowed.
  const std::vector<double>& grad(NodeId id) const { return nodes_[id].grad; }

  // ---- elementwise / structural ops -------------------------------------

  NodeId add(NodeId a, NodeId b) {
    same_shape("add", a, b);
    Tensor out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] += bv[i];
    return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
      t.accumulate(n.parents[0], n.grad);
      t.accumulate(n.parents[1], n.grad);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    same_shape("sub", a, b);
    Tensor out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] -= bv[i];
    return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
      t.accumulate(n.parents[0], n.grad);
      if (t.wants_grad(n.parents[1])) {
        auto& g = t.grad_buf(n.parents[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
      }
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    same_shape("mul", a, b);
    Tensor out = nodes_[a].value;
    const auto& bv = nodes_[b].value.values;
    for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] *= bv[i];
    return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
      const auto& av = t.nodes_[n.parents[0]].value.values;
      const auto& bv = t.nodes_[n.parents[1]].value.values;
      if (t.wants_grad(n.parents[0])) {
        auto& g = t.grad_buf(n.parents[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
      }
      if (t.wants_grad(n.parents[1])) {
        auto& g = t.grad_buf(n.parents[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    Tensor out = nodes_[a].value;
    for (double& v : out.values) v *= c;
    return push(std::move(out), {a}, [c](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += c * n.grad[i];
    });
  }

  // x[n x z] + row[z], broadcast over rows (bias add).
  NodeId add_row(NodeId x, NodeId row) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& rv = nodes_[row].value;
    if (!xv.is_matrix() || !rv.is_vector() || rv.numel() != xv.cols()) {
      throw DimensionError("add_row: " + xv.shape_str() + " vs " + rv.shape_str());
    }
    Tensor out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += rv.at(j);
    return push(std::move(out), {x, row}, [](Tape& t, const Node& n) {
      t.accumulate(n.parents[0], n.grad);
      if (t.wants_grad(n.parents[1])) {
        auto& g = t.grad_buf(n.parents[1]);
        std::size_t cols = g.size();
        std::size_t rows = n.grad.size() / cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) g[j] += n.grad[i * cols + j];
      }
    });
  }

  NodeId reshape(NodeId a, std::vector<std::size_t> shape) {
    if (Tensor::numel_of(shape) != nodes_[a].value.numel()) {
      throw DimensionError("reshape: " + nodes_[a].value.shape_str() + " to " +
                           Tensor::shape_str(shape));
    }
    Tensor out = nodes_[a].value;
    out.shape = std::move(shape);
    return push(std::move(out), {a}, [](Tape& t, const Node& n) {
      t.accumulate(n.parents[0], n.grad);
    });
  }

  NodeId transpose(NodeId a) {
    const Tensor& av = nodes_[a].value;
    if (!av.is_matrix()) throw DimensionError("transpose: want matrix, got " + av.shape_str());
    Tensor out = Tensor::zeros({av.cols(), av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) out.at(j, i) = av.at(i, j);
    return push(std::move(out), {a}, [](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      std::size_t r = t.nodes_[n.parents[0]].value.rows();
      std::size_t c = t.nodes_[n.parents[0]].value.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
    });
  }

  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
    const Tensor& av = nodes_[a].value;
    if (!av.is_matrix() || r0 > r1 || r1 > av.rows()) {
      throw DimensionError("slice_rows: rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                           ") of " + av.shape_str());
    }
    std::size_t c = av.cols();
    Tensor out = Tensor::zeros({r1 - r0, c});
    std::copy(av.values.begin() + static_cast<std::ptrdiff_t>(r0 * c),
              av.values.begin() + static_cast<std::ptrdiff_t>(r1 * c), out.values.begin());
    return push(std::move(out), {a}, [r0, c](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[r0 * c + i] += n.grad[i];
    });
  }

  NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
    const Tensor& av = nodes_[a].value;
    if (!av.is_matrix() || c0 > c1 || c1 > av.cols()) {
      throw DimensionError("slice_cols: cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                           ") of " + av.shape_str());
    }
    std::size_t w = c1 - c0, c = av.cols();
    Tensor out = Tensor::zeros({av.rows(), w});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, c0 + j);
    return push(std::move(out), {a}, [c0, w, c](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      std::size_t rows = n.grad.size() / w;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * c + c0 + j] += n.grad[i * w + j];
    });
  }

  NodeId concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: empty list");
    std::size_t rows = nodes_[parts[0]].value.rows();
    std::size_t total = 0;
    for (NodeId p : parts) {
      const Tensor& v = nodes_[p].value;
      if (!v.is_matrix() || v.rows() != rows)
        throw DimensionError("concat_cols: row mismatch at " + v.shape_str());
      total += v.cols();
    }
    Tensor out = Tensor::zeros({rows, total});
    std::vector<std::size_t> offsets(parts.size());
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor& v = nodes_[parts[k]].value;
      offsets[k] = off;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
      off += v.cols();
    }
    std::vector<NodeId> ps(parts.begin(), parts.end());
    return push(std::move(out), std::move(ps),
                [offsets, total](Tape& t, const Node& n) {
                  std::size_t rows = n.grad.size() / total;
                  for (std::size_t k = 0; k < n.parents.size(); ++k) {
                    NodeId p = n.parents[k];
                    if (!t.wants_grad(p)) continue;
                    auto& g = t.grad_buf(p);
                    std::size_t w = t.nodes_[p].value.cols();
                    for (std::size_t i = 0; i < rows; ++i)
                      for (std::size_t j = 0; j < w; ++j)
                        g[i * w + j] += n.grad[i * total + offsets[k] + j];
                  }
                });
  }

  // Scalar entry x.values[index]; gradient routes to that entry only.
  NodeId pick(NodeId a, std::size_t index) {
    const Tensor& av = nodes_[a].value;
    if (index >= av.numel())
      throw DimensionError("pick: index " + std::to_string(index) + " in " + av.shape_str());
    return push(Tensor::scalar(av.values[index]), {a}, [index](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      t.grad_buf(n.parents[0])[index] += n.grad[0];
    });
  }

  // Assemble scalars into a rows x cols matrix (row-major order).
  NodeId stack_scalars(std::span<const NodeId> scalars, std::size_t rows, std::size_t cols) {
    if (scalars.size() != rows * cols)
      throw DimensionError("stack_scalars: " + std::to_string(scalars.size()) + " scalars for " +
                           std::to_string(rows) + "x" + std::to_string(cols));
    Tensor out = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      const Tensor& s = nodes_[scalars[i]].value;
      if (!s.is_scalar()) throw ContractError("stack_scalars: parent " + std::to_string(i) + " not scalar");
      out.values[i] = s.values[0];
    }
    std::vector<NodeId> ps(scalars.begin(), scalars.end());
    return push(std::move(out), std::move(ps), [](Tape& t, const Node& n) {
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        if (!t.wants_grad(n.parents[i])) continue;
        t.grad_buf(n.parents[i])[0] += n.grad[i];
      }
    });
  }

  // ---- linear algebra -----------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (!av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows()) {
      throw DimensionError("matmul shape mismatch: " + av.shape_str() + " x " + bv.shape_str());
    }
    std::size_t m = av.rows(), p = av.cols(), n = bv.cols();
    Tensor out = Tensor::zeros({m, n});
    gemm(av.values.data(), bv.values.data(), out.values.data(), m, p, n);
    return push(std::move(out), {a, b}, [m, p, n](Tape& t, const Node& n_) {
      const auto& av = t.nodes_[n_.parents[0]].value.values;
      const auto& bv = t.nodes_[n_.parents[1]].value.values;
      if (t.wants_grad(n_.parents[0])) {
        // dA = g . B^T
        auto& ga = t.grad_buf(n_.parents[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            double g = n_.grad[i * n + k];
            if (g == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g * bv[j * n + k];
          }
      }
      if (t.wants_grad(n_.parents[1])) {
        // dB = A^T . g
        auto& gb = t.grad_buf(n_.parents[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            double a_ = av[i * p + j];
            if (a_ == 0.0) continue;
            for (std::size_t k = 0; k < n; ++k) gb[j * n + k] += a_ * n_.grad[i * n + k];
          }
      }
    });
  }

  // ---- nonlinearities -----------------------------------------------------

  // exp(x/temperature) normalized along `axis`, max-subtracted for stability.
  // axis 1 normalizes each row of a matrix; axis 0 each column (the only
  // axis for vectors).
  NodeId softmax(NodeId a, std::size_t axis, double temperature) {
    if (temperature <= 0.0)
      throw ParameterError("softmax: temperature must be > 0, got " + std::to_string(temperature));
    const Tensor& av = nodes_[a].value;
    std::size_t groups, len, gstride, estride;
    softmax_layout(av, axis, groups, len, gstride, estride);
    Tensor out = Tensor::zeros(av.shape);
    for (std::size_t g = 0; g < groups; ++g) {
      double mx = av.values[g * gstride];
      for (std::size_t i = 1; i < len; ++i)
        mx = std::max(mx, av.values[g * gstride + i * estride]);
      double sum = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        double e = std::exp((av.values[g * gstride + i * estride] - mx) / temperature);
        out.values[g * gstride + i * estride] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < len; ++i) out.values[g * gstride + i * estride] /= sum;
    }
    return push(std::move(out), {a},
                [groups, len, gstride, estride, temperature](Tape& t, const Node& n) {
                  if (!t.wants_grad(n.parents[0])) return;
                  auto& g = t.grad_buf(n.parents[0]);
                  const auto& y = n.value.values;
                  // dx_i = y_i (g_i - sum_j g_j y_j) / temperature
                  for (std::size_t grp = 0; grp < groups; ++grp) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < len; ++i) {
                      std::size_t idx = grp * gstride + i * estride;
                      dot += n.grad[idx] * y[idx];
                    }
                    for (std::size_t i = 0; i < len; ++i) {
                      std::size_t idx = grp * gstride + i * estride;
                      g[idx] += y[idx] * (n.grad[idx] - dot) / temperature;
                    }
                  }
                });
  }

  // Row-wise normalization over the trailing dimension, then affine.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    if (eps <= 0.0) throw ParameterError("layer_norm: eps must be > 0");
    const Tensor& xv = nodes_[x].value;
    const Tensor& gv = nodes_[gain].value;
    const Tensor& bv = nodes_[bias].value;
    std::size_t z = xv.shape.empty() ? 0 : xv.shape.back();
    if (z == 0) throw DimensionError("layer_norm: zero-length rows in " + xv.shape_str());
    if (gv.numel() != z || bv.numel() != z)
      throw DimensionError("layer_norm: gain " + gv.shape_str() + " / bias " + bv.shape_str() +
                           " vs row length " + std::to_string(z));
    std::size_t rows = xv.numel() / z;
    Tensor out = Tensor::zeros(xv.shape);
    std::vector<double> xhat(xv.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv.values.data() + r * z;
      double mean = 0.0;
      for (std::size_t j = 0; j < z; ++j) mean += xr[j];
      mean /= static_cast<double>(z);
      double var = 0.0;
      for (std::size_t j = 0; j < z; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<double>(z);
      double is = 1.0 / std::sqrt(var + eps);
      inv_std[r] = is;
      for (std::size_t j = 0; j < z; ++j) {
        double xh = (xr[j] - mean) * is;
        xhat[r * z + j] = xh;
        out.values[r * z + j] = gv.values[j] * xh + bv.values[j];
      }
    }
    return push(std::move(out), {x, gain, bias},
                [rows, z, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                const Node& n) {
                  const auto& gv = t.nodes_[n.parents[1]].value.values;
                  bool wx = t.wants_grad(n.parents[0]);
                  bool wg = t.wants_grad(n.parents[1]);
                  bool wb = t.wants_grad(n.parents[2]);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* up = n.grad.data() + r * z;
                    if (wg || wb) {
                      for (std::size_t j = 0; j < z; ++j) {
                        if (wg) t.grad_buf(n.parents[1])[j] += up[j] * xhat[r * z + j];
                        if (wb) t.grad_buf(n.parents[2])[j] += up[j];
                      }
                    }
                    if (!wx) continue;
                    // dx = inv_std (d - mean(d) - xhat * mean(d*xhat)), d = up*gain
                    double md = 0.0, mdx = 0.0;
                    for (std::size_t j = 0; j < z; ++j) {
                      double d = up[j] * gv[j];
                      md += d;
                      mdx += d * xhat[r * z + j];
                    }
                    md /= static_cast<double>(z);
                    mdx /= static_cast<double>(z);
                    auto& gx = t.grad_buf(n.parents[0]);
                    for (std::size_t j = 0; j < z; ++j) {
                      double d = up[j] * gv[j];
                      gx[r * z + j] += inv_std[r] * (d - md - xhat[r * z + j] * mdx);
                    }
                  }
                });
  }

  NodeId gelu(NodeId a) {
    const Tensor& av = nodes_[a].value;
    Tensor out = Tensor::zeros(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      double x = av.values[i];
      out.values[i] = x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    }
    return push(std::move(out), {a}, [](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      const auto& xv = t.nodes_[n.parents[0]].value.values;
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        double x = xv[i];
        double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
        g[i] += n.grad[i] * (phi + x * dens);
      }
    });
  }

  NodeId relu(NodeId a) {
    const Tensor& av = nodes_[a].value;
    Tensor out = Tensor::zeros(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) out.values[i] = std::max(0.0, av.values[i]);
    return push(std::move(out), {a}, [](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      const auto& xv = t.nodes_[n.parents[0]].value.values;
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (xv[i] > 0.0) g[i] += n.grad[i];
    });
  }

  NodeId log(NodeId a) {
    const Tensor& av = nodes_[a].value;
    Tensor out = Tensor::zeros(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      if (av.values[i] <= 0.0)
        throw NumericalError("log: non-positive input " + std::to_string(av.values[i]));
      out.values[i] = std::log(av.values[i]);
    }
    return push(std::move(out), {a}, [](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      const auto& xv = t.nodes_[n.parents[0]].value.values;
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] / xv[i];
    });
  }

  // ---- reductions ----------------------------------------------------------

  NodeId sum(NodeId a) {
    const auto& v = nodes_[a].value.values;
    double s = std::accumulate(v.begin(), v.end(), 0.0);
    return push(Tensor::scalar(s), {a}, [](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      auto& g = t.grad_buf(n.parents[0]);
      for (double& gi : g) gi += n.grad[0];
    });
  }

  NodeId mean(NodeId a) {
    std::size_t n_el = nodes_[a].value.numel();
    if (n_el == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n_el));
  }

  // Max of a vector; first index wins ties. Gradient routes 1.0 to the
  // argmax position only.
  MaxResult max_reduce(NodeId a) {
    const Tensor& av = nodes_[a].value;
    if (av.numel() == 0) throw DimensionError("max_reduce: empty input");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < av.numel(); ++i)
      if (av.values[i] > av.values[arg]) arg = i;
    NodeId id = push(Tensor::scalar(av.values[arg]), {a}, [arg](Tape& t, const Node& n) {
      if (!t.wants_grad(n.parents[0])) return;
      t.grad_buf(n.parents[0])[arg] += n.grad[0];
    });
    return {id, arg};
  }

  // Cosine of q against every row of F: out[r] = cos(F[r,:], q).
  NodeId row_cosine(NodeId f, NodeId q) {
    const Tensor& fv = nodes_[f].value;
    const Tensor& qv = nodes_[q].value;
    if (!fv.is_matrix() || !qv.is_vector() || fv.cols() != qv.numel()) {
      throw DimensionError("row_cosine: " + fv.shape_str() + " vs " + qv.shape_str());
    }
    std::size_t k = fv.rows(), z = fv.cols();
    double qn2 = 0.0;
    for (double v : qv.values) qn2 += v * v;
    if (qn2 == 0.0) throw DegenerateInputError("row_cosine: zero-norm query vector");
    double qn = std::sqrt(qn2);
    Tensor out = Tensor::zeros({k});
    std::vector<double> fnorm(k);
    for (std::size_t r = 0; r < k; ++r) {
      const double* fr = fv.values.data() + r * z;
      double dot = 0.0, fn2 = 0.0;
      for (std::size_t j = 0; j < z; ++j) {
        dot += fr[j] * qv.values[j];
        fn2 += fr[j] * fr[j];
      }
      if (fn2 == 0.0)
        throw DegenerateInputError("row_cosine: zero-norm frame " + std::to_string(r));
      fnorm[r] = std::sqrt(fn2);
      out.values[r] = dot / (fnorm[r] * qn);
    }
    return push(std::move(out), {f, q},
                [k, z, qn, fnorm = std::move(fnorm)](Tape& t, const Node& n) {
                  const auto& fv = t.nodes_[n.parents[0]].value.values;
                  const auto& qv = t.nodes_[n.parents[1]].value.values;
                  bool wf = t.wants_grad(n.parents[0]);
                  bool wq = t.wants_grad(n.parents[1]);
                  for (std::size_t r = 0; r < k; ++r) {
                    double u = n.grad[r];
                    if (u == 0.0) continue;
                    const double* fr = fv.data() + r * z;
                    double c = n.value.values[r];
                    double inv = 1.0 / (fnorm[r] * qn);
                    if (wf) {
                      auto& gf = t.grad_buf(n.parents[0]);
                      double s = c / (fnorm[r] * fnorm[r]);
                      for (std::size_t j = 0; j < z; ++j)
                        gf[r * z + j] += u * (qv[j] * inv - s * fr[j]);
                    }
                    if (wq) {
                      auto& gq = t.grad_buf(n.parents[1]);
                      double s = c / (qn * qn);
                      for (std::size_t j = 0; j < z; ++j) gq[j] += u * (fr[j] * inv - s * qv[j]);
                    }
                  }
                });
  }

  // Cosine of two vectors as a scalar node.
  NodeId cosine(NodeId a, NodeId b) {
    NodeId mat = reshape(a, {1, nodes_[a].value.numel()});
    NodeId row = row_cosine(mat, b);
    return pick(row, 0);
  }

  // ---- backward ------------------------------------------------------------

  void backward(NodeId loss) {
    if (!nodes_[loss].value.is_scalar())
      throw ContractError("backward: loss must be scalar, got " + nodes_[loss].value.shape_str());
    for (auto& n : nodes_) n.grad.clear();
    grad_buf(loss)[0] = 1.0;  // d(loss)/d(loss) = 1
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.requires_grad && !n.grad.empty()) n.backward(*this, n);
    }
  }

  // Gradient copied back into a caller-owned tensor's grad slot.
  void export_grad(NodeId id, Tensor& dst) const {
    const auto& g = nodes_[id].grad;
    if (g.empty())
      dst.grad.assign(dst.numel(), 0.0);
    else
      dst.grad = g;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    std::function<void(Tape&, const Node&)> backward;
    bool requires_grad = false;
    std::vector<double> grad;
  };

  // deque keeps node references stable while new ops are recorded
  std::deque<Node> nodes_;

  NodeId push(Tensor value, std::vector<NodeId> parents,
              std::function<void(Tape&, const Node&)> bw) {
    Node n;
    n.requires_grad = value.requires_grad;
    for (NodeId p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.value = std::move(value);
    n.value.requires_grad = n.requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  bool wants_grad(NodeId id) const { return nodes_[id].requires_grad; }

  std::vector<double>& grad_buf(NodeId id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
    return g;
  }

  void accumulate(NodeId id, const std::vector<double>& src) {
    if (!wants_grad(id)) return;
    auto& g = grad_buf(id);
    for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
  }

  void same_shape(const char* op, NodeId a, NodeId b) const {
    if (nodes_[a].value.shape != nodes_[b].value.shape) {
      throw DimensionError(std::string(op) + ": shape mismatch " + nodes_[a].value.shape_str() +
                           " vs " + nodes_[b].value.shape_str());
    }
  }

  static void softmax_layout(const Tensor& t, std::size_t axis, std::size_t& groups,
                             std::size_t& len, std::size_t& gstride, std::size_t& estride) {
    if (t.is_vector()) {
      if (axis != 0) throw DimensionError("softmax: axis " + std::to_string(axis) + " on vector");
      groups = 1, len = t.numel(), gstride = 0, estride = 1;
    } else if (t.is_matrix()) {
      if (axis == 1) {
        groups = t.rows(), len = t.cols(), gstride = t.cols(), estride = 1;
      } else if (axis == 0) {
        groups = t.cols(), len = t.rows(), gstride = 1, estride = t.cols();
      } else {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " on matrix");
      }
    } else {
      throw DimensionError("softmax: want vector or matrix, got " + t.shape_str());
    }
    if (len == 0) throw DimensionError("softmax: empty axis");
  }

  static void gemm(const double* a, const double* b, double* out, std::size_t m, std::size_t p,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out + i * n;
      for (std::size_t j = 0; j < p; ++j) {
        double aij = a[i * p + j];
        if (aij == 0.0) continue;
        const double* brow = b + j * n;
        for (std::size_t k = 0; k < n; ++k) orow[k] += aij * brow[k];
      }
    }
  }
};

// Compares the analytic gradient of a scalar-valued tensor function against
// central differences, coordinate by coordinate. Returns the worst relative
// error with denominator max(|analytic|, |numeric|, 1e-8).
using TensorFn = std::function<Tape::NodeId(Tape&, Tape::NodeId)>;

inline double check_gradients(const TensorFn& f, const Tensor& x, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ParameterError("check_gradients: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
  Tensor probe = x;
  probe.requires_grad = true;
  Tape tape;
  Tape::NodeId in = tape.input(probe);
  Tape::NodeId out = f(tape, in);
  if (!tape.value(out).is_scalar())
    throw ContractError("check_gradients: f output must be scalar, got " +
                        tape.value(out).shape_str());
  tape.backward(out);
  std::vector<double> analytic = tape.grad(in);
  if (analytic.empty()) analytic.assign(x.numel(), 0.0);

  auto eval = [&](const Tensor& at) {
    Tape t2;
    Tensor frozen = at;
    frozen.requires_grad = false;
    return t2.value(f(t2, t2.input(frozen))).values[0];
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor hi = x, lo = x;
    hi.values[i] += eps;
    lo.values[i] -= eps;
    double numeric = (eval(hi) - eval(lo)) / (2.0 * eps);
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace prvr
