#include "factorwm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace fwm {

namespace {

using Data = std::vector<double>;
using DataPtr = std::shared_ptr<Data>;

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

DataPtr alloc(std::size_t n) {
    return std::make_shared<Data>(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

Tensor finish(Tape* tape, Shape shape, DataPtr data, std::vector<int> parents,
              Tape::BackwardFn backward, const char* op) {
    check_finite(*data, op);
    if (!tape) {
        return Tensor::from(std::move(shape), std::move(*data));
    }
    return tape->emit(std::move(shape), std::move(data), std::move(parents), std::move(backward));
}

// Collects the node ids of tracked inputs (-1 for constants).
int node_of(const Tensor& t) {
    return t.tracked() ? t.node() : -1;
}

} // namespace

void matmul_kernel(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        if (!accumulate) {
            std::fill(crow, crow + n, 0.0);
        }
        const double* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_tn_kernel(const double* a, const double* b, double* c,
                      std::int64_t k, std::int64_t m, std::int64_t n, bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, 0.0);
    }
    for (std::int64_t i = 0; i < k; ++i) {
        const double* arow = a + i * m;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < m; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt_kernel(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            if (accumulate) {
                crow[j] += acc;
            } else {
                crow[j] = acc;
            }
        }
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = alloc(a.data().size());
    const Data& av = a.data();
    const Data& bv = b.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = av[i] + bv[i];
    Tape* tape = common_tape({&a, &b});
    int pa = node_of(a), pb = node_of(b);
    return finish(tape, a.shape(), std::move(out), {pa, pb},
                  [pa, pb](Tape& t, const Data& g) {
                      if (pa >= 0) {
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (pb >= 0) {
                          auto& gb = t.grad_buffer(pb);
                          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                      }
                  },
                  "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = alloc(a.data().size());
    const Data& av = a.data();
    const Data& bv = b.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = av[i] - bv[i];
    Tape* tape = common_tape({&a, &b});
    int pa = node_of(a), pb = node_of(b);
    return finish(tape, a.shape(), std::move(out), {pa, pb},
                  [pa, pb](Tape& t, const Data& g) {
                      if (pa >= 0) {
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (pb >= 0) {
                          auto& gb = t.grad_buffer(pb);
                          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                      }
                  },
                  "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = alloc(a.data().size());
    const Data& av = a.data();
    const Data& bv = b.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = av[i] * bv[i];
    Tape* tape = common_tape({&a, &b});
    int pa = node_of(a), pb = node_of(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    return finish(tape, a.shape(), std::move(out), {pa, pb},
                  [pa, pb, abuf, bbuf](Tape& t, const Data& g) {
                      if (pa >= 0) {
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bbuf)[i];
                      }
                      if (pb >= 0) {
                          auto& gb = t.grad_buffer(pb);
                          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*abuf)[i];
                      }
                  },
                  "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    auto out = alloc(a.data().size());
    const Data& av = a.data();
    const Data& bv = b.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = av[i] / bv[i];
    Tape* tape = common_tape({&a, &b});
    int pa = node_of(a), pb = node_of(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    return finish(tape, a.shape(), std::move(out), {pa, pb},
                  [pa, pb, abuf, bbuf](Tape& t, const Data& g) {
                      if (pa >= 0) {
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*bbuf)[i];
                      }
                      if (pb >= 0) {
                          auto& gb = t.grad_buffer(pb);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                              double bi = (*bbuf)[i];
                              gb[i] -= g[i] * (*abuf)[i] / (bi * bi);
                          }
                      }
                  },
                  "div");
}

Tensor add_scalar(const Tensor& x, double c) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = xv[i] + c;
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, x.shape(), std::move(out), {px},
                  [px](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  },
                  "add_scalar");
}

Tensor mul_scalar(const Tensor& x, double c) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = xv[i] * c;
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, c](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
                  },
                  "mul_scalar");
}

Tensor neg(const Tensor& x) {
    return mul_scalar(x, -1.0);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || x.cols() != bias.dim(0)) {
        throw ShapeError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
    }
    std::int64_t n = x.rows(), m = x.cols();
    auto out = alloc(static_cast<std::size_t>(n * m));
    const Data& xv = x.data();
    const Data& bv = bias.data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            (*out)[static_cast<std::size_t>(i * m + j)] = xv[static_cast<std::size_t>(i * m + j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    Tape* tape = common_tape({&x, &bias});
    int px = node_of(x), pb = node_of(bias);
    return finish(tape, x.shape(), std::move(out), {px, pb},
                  [px, pb, n, m](Tape& t, const Data& g) {
                      if (px >= 0) {
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                      }
                      if (pb >= 0) {
                          auto& gb = t.grad_buffer(pb);
                          for (std::int64_t i = 0; i < n; ++i) {
                              for (std::int64_t j = 0; j < m; ++j) {
                                  gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * m + j)];
                              }
                          }
                      }
                  },
                  "add_bias");
}

Tensor exp(const Tensor& x) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = std::exp(xv[i]);
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    DataPtr saved = out;
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, saved](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*saved)[i];
                  },
                  "exp");
}

Tensor log(const Tensor& x) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) {
        if (xv[i] <= 0.0) {
            throw DomainError("log of non-positive value " + std::to_string(xv[i]));
        }
        (*out)[i] = std::log(xv[i]);
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    auto xbuf = x.buffer();
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, xbuf](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (*xbuf)[i];
                  },
                  "log");
}

Tensor square(const Tensor& x) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = xv[i] * xv[i];
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    auto xbuf = x.buffer();
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, xbuf](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * g[i] * (*xbuf)[i];
                  },
                  "square");
}

Tensor softplus(const Tensor& x) {
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) {
        double v = xv[i];
        (*out)[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    auto xbuf = x.buffer();
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, xbuf](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          double v = (*xbuf)[i];
                          double sig = v > 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                          gx[i] += g[i] * sig;
                      }
                  },
                  "softplus");
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) {
        throw DomainError("leaky_relu slope must lie in (0,1), got " + std::to_string(slope));
    }
    auto out = alloc(x.data().size());
    const Data& xv = x.data();
    for (std::size_t i = 0; i < out->size(); ++i) {
        double v = xv[i];
        (*out)[i] = v >= 0.0 ? v : slope * v;
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    auto xbuf = x.buffer();
    return finish(tape, x.shape(), std::move(out), {px},
                  [px, xbuf, slope](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          gx[i] += g[i] * ((*xbuf)[i] >= 0.0 ? 1.0 : slope);
                      }
                  },
                  "leaky_relu");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    auto out = alloc(static_cast<std::size_t>(m * n));
    matmul_kernel(a.data().data(), b.data().data(), out->data(), m, k, n, false);
    Tape* tape = common_tape({&a, &b});
    int pa = node_of(a), pb = node_of(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    return finish(tape, Shape{m, n}, std::move(out), {pa, pb},
                  [pa, pb, abuf, bbuf, m, k, n](Tape& t, const Data& g) {
                      if (pa >= 0) {
                          // dA = dC @ B^T
                          matmul_nt_kernel(g.data(), bbuf->data(), t.grad_buffer(pa).data(), m, n, k, true);
                      }
                      if (pb >= 0) {
                          // dB = A^T @ dC
                          matmul_tn_kernel(abuf->data(), g.data(), t.grad_buffer(pb).data(), m, k, n, true);
                      }
                  },
                  "matmul");
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    auto out = std::make_shared<Data>(x.data());
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, std::move(shape), std::move(out), {px},
                  [px](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  },
                  "reshape");
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) {
        throw ShapeError("concat_cols of empty list");
    }
    std::int64_t n = xs[0].rows();
    std::int64_t total = 0;
    Tape* tape = nullptr;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.rows() != n) {
            throw ShapeError("concat_cols: row mismatch at shape " + shape_str(x.shape()));
        }
        total += x.cols();
        if (x.tracked()) {
            if (tape && tape != x.tape()) throw Error("concat_cols: operands on different tapes");
            tape = x.tape();
        }
    }
    auto out = alloc(static_cast<std::size_t>(n * total));
    std::vector<int> parents;
    std::vector<std::int64_t> widths;
    std::int64_t off = 0;
    for (const Tensor& x : xs) {
        std::int64_t w = x.cols();
        const Data& xv = x.data();
        for (std::int64_t i = 0; i < n; ++i) {
            std::copy(xv.begin() + i * w, xv.begin() + (i + 1) * w, out->begin() + i * total + off);
        }
        off += w;
        parents.push_back(node_of(x));
        widths.push_back(w);
    }
    return finish(tape, Shape{n, total}, std::move(out), parents,
                  [parents, widths, n, total](Tape& t, const Data& g) {
                      std::int64_t off2 = 0;
                      for (std::size_t idx = 0; idx < parents.size(); ++idx) {
                          std::int64_t w = widths[idx];
                          if (parents[idx] >= 0) {
                              auto& gx = t.grad_buffer(parents[idx]);
                              for (std::int64_t i = 0; i < n; ++i) {
                                  for (std::int64_t j = 0; j < w; ++j) {
                                      gx[static_cast<std::size_t>(i * w + j)] += g[static_cast<std::size_t>(i * total + off2 + j)];
                                  }
                              }
                          }
                          off2 += w;
                      }
                  },
                  "concat_cols");
}

Tensor slice_cols(const Tensor& x, std::int64_t begin, std::int64_t end) {
    if (x.ndim() != 2 || begin < 0 || end < begin || end > x.cols()) {
        throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ") for shape " + shape_str(x.shape()));
    }
    std::int64_t n = x.rows(), m = x.cols(), w = end - begin;
    auto out = alloc(static_cast<std::size_t>(n * w));
    const Data& xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy(xv.begin() + i * m + begin, xv.begin() + i * m + end, out->begin() + i * w);
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{n, w}, std::move(out), {px},
                  [px, n, m, w, begin](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::int64_t i = 0; i < n; ++i) {
                          for (std::int64_t j = 0; j < w; ++j) {
                              gx[static_cast<std::size_t>(i * m + begin + j)] += g[static_cast<std::size_t>(i * w + j)];
                          }
                      }
                  },
                  "slice_cols");
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) {
        throw ShapeError("concat_rows of empty list");
    }
    std::int64_t m = xs[0].cols();
    std::int64_t total = 0;
    Tape* tape = nullptr;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.cols() != m) {
            throw ShapeError("concat_rows: column mismatch at shape " + shape_str(x.shape()));
        }
        total += x.rows();
        if (x.tracked()) {
            if (tape && tape != x.tape()) throw Error("concat_rows: operands on different tapes");
            tape = x.tape();
        }
    }
    auto out = alloc(static_cast<std::size_t>(total * m));
    std::vector<int> parents;
    std::vector<std::int64_t> heights;
    std::int64_t off = 0;
    for (const Tensor& x : xs) {
        const Data& xv = x.data();
        std::copy(xv.begin(), xv.end(), out->begin() + off * m);
        off += x.rows();
        parents.push_back(node_of(x));
        heights.push_back(x.rows());
    }
    return finish(tape, Shape{total, m}, std::move(out), parents,
                  [parents, heights, m](Tape& t, const Data& g) {
                      std::int64_t off2 = 0;
                      for (std::size_t idx = 0; idx < parents.size(); ++idx) {
                          std::int64_t h = heights[idx];
                          if (parents[idx] >= 0) {
                              auto& gx = t.grad_buffer(parents[idx]);
                              for (std::int64_t i = 0; i < h * m; ++i) {
                                  gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(off2 * m + i)];
                              }
                          }
                          off2 += h;
                      }
                  },
                  "concat_rows");
}

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end) {
    if (x.ndim() != 2 || begin < 0 || end < begin || end > x.rows()) {
        throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ") for shape " + shape_str(x.shape()));
    }
    std::int64_t m = x.cols(), h = end - begin;
    auto out = alloc(static_cast<std::size_t>(h * m));
    const Data& xv = x.data();
    std::copy(xv.begin() + begin * m, xv.begin() + end * m, out->begin());
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{h, m}, std::move(out), {px},
                  [px, begin, m, h](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::int64_t i = 0; i < h * m; ++i) {
                          gx[static_cast<std::size_t>(begin * m + i)] += g[static_cast<std::size_t>(i)];
                      }
                  },
                  "slice_rows");
}

Tensor gather_rows(const Tensor& x, std::vector<std::int64_t> index) {
    if (x.ndim() != 2) {
        throw ShapeError("gather_rows on shape " + shape_str(x.shape()));
    }
    std::int64_t n = x.rows(), m = x.cols();
    auto out = alloc(index.size() * static_cast<std::size_t>(m));
    const Data& xv = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        std::int64_t r = index[i];
        if (r < 0 || r >= n) {
            throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range [0, " + std::to_string(n) + ")");
        }
        std::copy(xv.begin() + r * m, xv.begin() + (r + 1) * m, out->begin() + static_cast<std::int64_t>(i) * m);
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    std::int64_t rows_out = static_cast<std::int64_t>(index.size());
    return finish(tape, Shape{rows_out, m}, std::move(out), {px},
                  [px, index = std::move(index), m](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < index.size(); ++i) {
                          std::int64_t r = index[i];
                          for (std::int64_t j = 0; j < m; ++j) {
                              gx[static_cast<std::size_t>(r * m + j)] += g[i * static_cast<std::size_t>(m) + static_cast<std::size_t>(j)];
                          }
                      }
                  },
                  "gather_rows");
}

Tensor row_sum(const Tensor& x) {
    if (x.ndim() != 2) {
        throw ShapeError("row_sum on shape " + shape_str(x.shape()));
    }
    std::int64_t n = x.rows(), m = x.cols();
    auto out = alloc(static_cast<std::size_t>(n));
    const Data& xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < m; ++j) acc += xv[static_cast<std::size_t>(i * m + j)];
        (*out)[static_cast<std::size_t>(i)] = acc;
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{n}, std::move(out), {px},
                  [px, n, m](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::int64_t i = 0; i < n; ++i) {
                          for (std::int64_t j = 0; j < m; ++j) {
                              gx[static_cast<std::size_t>(i * m + j)] += g[static_cast<std::size_t>(i)];
                          }
                      }
                  },
                  "row_sum");
}

Tensor sum_all(const Tensor& x) {
    auto out = alloc(1);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    (*out)[0] = acc;
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{}, std::move(out), {px},
                  [px](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (double& v : gx) v += g[0];
                  },
                  "sum_all");
}

Tensor mean_all(const Tensor& x) {
    if (x.size() == 0) {
        throw ShapeError("mean_all of empty tensor");
    }
    auto out = alloc(1);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    double inv = 1.0 / static_cast<double>(x.size());
    (*out)[0] = acc * inv;
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{}, std::move(out), {px},
                  [px, inv](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (double& v : gx) v += g[0] * inv;
                  },
                  "mean_all");
}

double max_all(const Tensor& x) {
    double best = -std::numeric_limits<double>::infinity();
    for (double v : x.data()) best = std::max(best, v);
    return best;
}

Tensor stop_gradient(const Tensor& x) {
    return x.detached();
}

Tensor log_softmax(const Tensor& logits) {
    if (logits.ndim() != 2) {
        throw ShapeError("log_softmax on shape " + shape_str(logits.shape()));
    }
    std::int64_t n = logits.rows(), k = logits.cols();
    auto out = alloc(static_cast<std::size_t>(n * k));
    const Data& xv = logits.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * k;
        double m = *std::max_element(row, row + k);
        double lse = 0.0;
        for (std::int64_t j = 0; j < k; ++j) lse += std::exp(row[j] - m);
        lse = std::log(lse) + m;
        for (std::int64_t j = 0; j < k; ++j) (*out)[static_cast<std::size_t>(i * k + j)] = row[j] - lse;
    }
    Tape* tape = common_tape({&logits});
    int px = node_of(logits);
    DataPtr saved = out;
    return finish(tape, logits.shape(), std::move(out), {px},
                  [px, saved, n, k](Tape& t, const Data& g) {
                      // d/dx_j = g_j - softmax_j * sum(g)
                      auto& gx = t.grad_buffer(px);
                      for (std::int64_t i = 0; i < n; ++i) {
                          double gsum = 0.0;
                          for (std::int64_t j = 0; j < k; ++j) gsum += g[static_cast<std::size_t>(i * k + j)];
                          for (std::int64_t j = 0; j < k; ++j) {
                              double p = std::exp((*saved)[static_cast<std::size_t>(i * k + j)]);
                              gx[static_cast<std::size_t>(i * k + j)] += g[static_cast<std::size_t>(i * k + j)] - p * gsum;
                          }
                      }
                  },
                  "log_softmax");
}

Tensor take_per_row(const Tensor& x, const std::vector<int>& index) {
    if (x.ndim() != 2 || static_cast<std::int64_t>(index.size()) != x.rows()) {
        throw ShapeError("take_per_row: need one index per row of " + shape_str(x.shape()));
    }
    std::int64_t n = x.rows(), k = x.cols();
    auto out = alloc(static_cast<std::size_t>(n));
    const Data& xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) {
        int j = index[static_cast<std::size_t>(i)];
        if (j < 0 || j >= k) {
            throw ShapeError("take_per_row: index " + std::to_string(j) + " out of range");
        }
        (*out)[static_cast<std::size_t>(i)] = xv[static_cast<std::size_t>(i * k + j)];
    }
    Tape* tape = common_tape({&x});
    int px = node_of(x);
    return finish(tape, Shape{n}, std::move(out), {px},
                  [px, index, k](Tape& t, const Data& g) {
                      auto& gx = t.grad_buffer(px);
                      for (std::size_t i = 0; i < index.size(); ++i) {
                          gx[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(index[i])] += g[i];
                      }
                  },
                  "take_per_row");
}

Tensor categorical_log_prob(const Tensor& logits, const std::vector<int>& labels) {
    return take_per_row(log_softmax(logits), labels);
}

namespace {

void require_positive(const Tensor& sigma, const char* who) {
    for (double v : sigma.data()) {
        if (!(v > 0.0)) {
            throw DomainError(std::string(who) + ": sigma must be strictly positive, got " + std::to_string(v));
        }
    }
}

Tensor reduce_last(const Tensor& x) {
    if (x.ndim() == 1) return sum_all(x);
    return row_sum(x);
}

} // namespace

Tensor gaussian_log_prob(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
    check_same_shape(x, mu, "gaussian_log_prob");
    check_same_shape(mu, sigma, "gaussian_log_prob");
    require_positive(sigma, "gaussian_log_prob");
    Tensor z = div(sub(x, mu), sigma);
    Tensor elem = sub(mul_scalar(square(z), -0.5), add_scalar(log(sigma), 0.5 * kLogTwoPi));
    return reduce_last(elem);
}

Tensor gaussian_log_prob(const Tensor& x, const Tensor& mu, double sigma) {
    if (!(sigma > 0.0)) {
        throw DomainError("gaussian_log_prob: sigma must be strictly positive");
    }
    check_same_shape(x, mu, "gaussian_log_prob");
    Tensor z = mul_scalar(sub(x, mu), 1.0 / sigma);
    Tensor elem = add_scalar(mul_scalar(square(z), -0.5), -std::log(sigma) - 0.5 * kLogTwoPi);
    return reduce_last(elem);
}

Tensor gaussian_diag_kl(const Tensor& mu_q, const Tensor& sigma_q,
                        const Tensor& mu_p, const Tensor& sigma_p) {
    check_same_shape(mu_q, sigma_q, "gaussian_diag_kl");
    check_same_shape(mu_q, mu_p, "gaussian_diag_kl");
    check_same_shape(mu_p, sigma_p, "gaussian_diag_kl");
    require_positive(sigma_q, "gaussian_diag_kl");
    require_positive(sigma_p, "gaussian_diag_kl");
    // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2, summed over dims.
    Tensor log_ratio = sub(log(sigma_p), log(sigma_q));
    Tensor var_p = square(sigma_p);
    Tensor num = add(square(sigma_q), square(sub(mu_q, mu_p)));
    Tensor elem = add_scalar(add(log_ratio, mul_scalar(div(num, var_p), 0.5)), -0.5);
    return reduce_last(elem);
}

} // namespace fwm
