#include "aqfn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace aqfn {

namespace {

std::atomic<Precision> g_precision{Precision::standard32};

void quantize_inplace(std::vector<double>& buf) {
    if (g_precision.load(std::memory_order_relaxed) == Precision::standard32) {
        for (double& v : buf) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (const int e : shape) {
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

void check_shape_valid(const std::vector<int>& shape, const char* who) {
    for (const int e : shape) {
        if (e <= 0) {
            throw ShapeError(std::string(who) + ": extents must be positive, got " + shape_str(shape));
        }
    }
}

// Creates the result node; tape edges are attached only when some input
// requires grad, so constant subgraphs are pruned from backward traversal.
TensorPtr make_result(std::vector<int> shape, std::vector<TensorPtr> inputs,
                      std::function<void(Tensor&)> backprop) {
    auto out = std::make_shared<Tensor>();
    out->shape = std::move(shape);
    out->data.assign(shape_numel(out->shape), 0.0);
    bool rg = false;
    for (const auto& p : inputs) {
        rg = rg || p->requires_grad;
    }
    if (rg) {
        out->requires_grad = true;
        out->parents = std::move(inputs);
        out->backprop = std::move(backprop);
    }
    return out;
}

// Layout resolution for binary elementwise ops under the leading-batch
// broadcast rule. small: -1 no broadcast, 0 a repeated, 1 b repeated.
struct BinaryLayout {
    std::vector<int> out_shape;
    std::size_t batch = 1;
    std::size_t inner = 0;
    int small = -1;
};

bool is_suffix(const std::vector<int>& big, const std::vector<int>& small) {
    return big.size() == small.size() + 1 &&
           std::equal(small.begin(), small.end(), big.begin() + 1);
}

BinaryLayout binary_layout(const char* op, const TensorPtr& a, const TensorPtr& b) {
    BinaryLayout l;
    if (a->shape == b->shape) {
        l.out_shape = a->shape;
        l.inner = a->numel();
        return l;
    }
    if (is_suffix(a->shape, b->shape)) {
        l.out_shape = a->shape;
        l.batch = static_cast<std::size_t>(a->shape[0]);
        l.inner = b->numel();
        l.small = 1;
        return l;
    }
    if (is_suffix(b->shape, a->shape)) {
        l.out_shape = b->shape;
        l.batch = static_cast<std::size_t>(b->shape[0]);
        l.inner = a->numel();
        l.small = 0;
        return l;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a->shape) +
                     " and " + shape_str(b->shape));
}

// Valid output range [lo, hi) along one spatial axis for a fixed kernel tap,
// i.e. all o with 0 <= o*stride - pad + tap < extent.
std::pair<int, int> tap_range(int out_extent, int in_extent, int stride, int pad, int tap) {
    int lo = 0;
    const int shift = pad - tap;
    if (shift > 0) {
        lo = (shift + stride - 1) / stride;
    }
    int hi = (in_extent - 1 + shift) / stride + 1;
    hi = std::min(hi, out_extent);
    return {lo, std::max(lo, hi)};
}

struct ConvDims {
    bool batched = false;
    int batch = 1, in_c = 0, in_h = 0, in_w = 0;
    int out_c = 0, k = 0, out_h = 0, out_w = 0;
};

ConvDims conv_dims(const char* op, const TensorPtr& x, int kernel, int out_c, int stride, int pad) {
    if (stride < 1) {
        throw ParamError(std::string(op) + ": stride must be >= 1");
    }
    if (pad < 0) {
        throw ParamError(std::string(op) + ": pad must be >= 0");
    }
    ConvDims d;
    d.batched = x->shape.size() == 4;
    if (!d.batched && x->shape.size() != 3) {
        throw ShapeError(std::string(op) + ": input must be [C,H,W] or [B,C,H,W], got " +
                         shape_str(x->shape));
    }
    const int off = d.batched ? 1 : 0;
    d.batch = d.batched ? x->shape[0] : 1;
    d.in_c = x->shape[off];
    d.in_h = x->shape[off + 1];
    d.in_w = x->shape[off + 2];
    d.out_c = out_c;
    d.k = kernel;
    if (d.k > d.in_h + 2 * pad || d.k > d.in_w + 2 * pad) {
        throw ShapeError(std::string(op) + ": kernel size " + std::to_string(d.k) +
                         " exceeds padded input " + shape_str(x->shape) + " with pad " +
                         std::to_string(pad));
    }
    d.out_h = (d.in_h + 2 * pad - d.k) / stride + 1;
    d.out_w = (d.in_w + 2 * pad - d.k) / stride + 1;
    return d;
}

} // namespace

Precision precision() { return g_precision.load(std::memory_order_relaxed); }

void set_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape));
    }
    return data[0];
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

TensorPtr tensor(std::vector<double> data, std::vector<int> shape, bool requires_grad) {
    check_shape_valid(shape, "tensor");
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                         shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    quantize_inplace(t->data);
    return t;
}

TensorPtr tensor(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return tensor(std::move(values), std::vector<int>{n}, false);
}

TensorPtr scalar(double v, bool requires_grad) {
    return tensor(std::vector<double>{v}, std::vector<int>{1}, requires_grad);
}

TensorPtr zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

TensorPtr full(std::vector<int> shape, double v, bool requires_grad) {
    check_shape_valid(shape, "full");
    const std::size_t n = shape_numel(shape);
    return tensor(std::vector<double>(n, v), std::move(shape), requires_grad);
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    }
    const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_result({m, n}, {a, b}, [a, b, m, k, n](Tensor& self) {
        const double* g = self.flow.data();
        if (a->requires_grad) {
            double* ga = a->flow.data();
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    const double* gr = g + static_cast<std::size_t>(i) * n;
                    const double* br = b->data.data() + static_cast<std::size_t>(kk) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
                    ga[static_cast<std::size_t>(i) * k + kk] += acc;
                }
            }
        }
        if (b->requires_grad) {
            double* gb = b->flow.data();
            for (int i = 0; i < m; ++i) {
                const double* ar = a->data.data() + static_cast<std::size_t>(i) * k;
                const double* gr = g + static_cast<std::size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const double av = ar[kk];
                    double* gbr = gb + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
                }
            }
        }
    });
    for (int i = 0; i < m; ++i) {
        const double* ar = a->data.data() + static_cast<std::size_t>(i) * k;
        double* cr = out->data.data() + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ar[kk];
            const double* br = b->data.data() + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
    if (w->shape.size() != 4 || w->shape[2] != w->shape[3]) {
        throw ShapeError("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(w->shape));
    }
    const ConvDims d = conv_dims("conv2d", x, w->shape[2], w->shape[0], stride, pad);
    if (w->shape[1] != d.in_c) {
        throw ShapeError("conv2d: input " + shape_str(x->shape) + " does not match kernel " +
                         shape_str(w->shape));
    }
    std::vector<int> out_shape = d.batched ? std::vector<int>{d.batch, d.out_c, d.out_h, d.out_w}
                                           : std::vector<int>{d.out_c, d.out_h, d.out_w};

    const std::size_t x_plane = static_cast<std::size_t>(d.in_h) * d.in_w;
    const std::size_t o_plane = static_cast<std::size_t>(d.out_h) * d.out_w;
    const std::size_t x_stride_b = static_cast<std::size_t>(d.in_c) * x_plane;
    const std::size_t o_stride_b = static_cast<std::size_t>(d.out_c) * o_plane;

    auto out = make_result(std::move(out_shape), {x, w}, [x, w, d, stride, pad, x_plane, o_plane,
                                                          x_stride_b, o_stride_b](Tensor& self) {
        const double* g = self.flow.data();
        if (x->requires_grad) {
            double* gx = x->flow.data();
            for (int b = 0; b < d.batch; ++b) {
                for (int oc = 0; oc < d.out_c; ++oc) {
                    for (int ic = 0; ic < d.in_c; ++ic) {
                        const double* wk =
                            w->data.data() + (static_cast<std::size_t>(oc) * d.in_c + ic) * d.k * d.k;
                        for (int ky = 0; ky < d.k; ++ky) {
                            const auto [ylo, yhi] = tap_range(d.out_h, d.in_h, stride, pad, ky);
                            for (int kx = 0; kx < d.k; ++kx) {
                                const double wv = wk[ky * d.k + kx];
                                if (wv == 0.0) continue;
                                const auto [xlo, xhi] = tap_range(d.out_w, d.in_w, stride, pad, kx);
                                for (int oy = ylo; oy < yhi; ++oy) {
                                    const int iy = oy * stride - pad + ky;
                                    double* gxr = gx + b * x_stride_b + ic * x_plane +
                                                  static_cast<std::size_t>(iy) * d.in_w;
                                    const double* gr = g + b * o_stride_b + oc * o_plane +
                                                       static_cast<std::size_t>(oy) * d.out_w;
                                    for (int ox = xlo; ox < xhi; ++ox) {
                                        gxr[ox * stride - pad + kx] += wv * gr[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (w->requires_grad) {
            double* gw = w->flow.data();
            for (int oc = 0; oc < d.out_c; ++oc) {
                for (int ic = 0; ic < d.in_c; ++ic) {
                    for (int ky = 0; ky < d.k; ++ky) {
                        const auto [ylo, yhi] = tap_range(d.out_h, d.in_h, stride, pad, ky);
                        for (int kx = 0; kx < d.k; ++kx) {
                            const auto [xlo, xhi] = tap_range(d.out_w, d.in_w, stride, pad, kx);
                            double acc = 0.0;
                            for (int b = 0; b < d.batch; ++b) {
                                for (int oy = ylo; oy < yhi; ++oy) {
                                    const int iy = oy * stride - pad + ky;
                                    const double* xr = x->data.data() + b * x_stride_b +
                                                       ic * x_plane +
                                                       static_cast<std::size_t>(iy) * d.in_w;
                                    const double* gr = g + b * o_stride_b + oc * o_plane +
                                                       static_cast<std::size_t>(oy) * d.out_w;
                                    for (int ox = xlo; ox < xhi; ++ox) {
                                        acc += gr[ox] * xr[ox * stride - pad + kx];
                                    }
                                }
                            }
                            gw[(static_cast<std::size_t>(oc) * d.in_c + ic) * d.k * d.k +
                               ky * d.k + kx] += acc;
                        }
                    }
                }
            }
        }
    });

    for (int b = 0; b < d.batch; ++b) {
        for (int oc = 0; oc < d.out_c; ++oc) {
            for (int ic = 0; ic < d.in_c; ++ic) {
                const double* wk =
                    w->data.data() + (static_cast<std::size_t>(oc) * d.in_c + ic) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    const auto [ylo, yhi] = tap_range(d.out_h, d.in_h, stride, pad, ky);
                    for (int kx = 0; kx < d.k; ++kx) {
                        const double wv = wk[ky * d.k + kx];
                        if (wv == 0.0) continue;
                        const auto [xlo, xhi] = tap_range(d.out_w, d.in_w, stride, pad, kx);
                        for (int oy = ylo; oy < yhi; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            const double* xr = x->data.data() + b * x_stride_b + ic * x_plane +
                                               static_cast<std::size_t>(iy) * d.in_w;
                            double* orow = out->data.data() + b * o_stride_b + oc * o_plane +
                                           static_cast<std::size_t>(oy) * d.out_w;
                            for (int ox = xlo; ox < xhi; ++ox) {
                                orow[ox] += wv * xr[ox * stride - pad + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr depthwise_conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
    if (w->shape.size() != 3 || w->shape[1] != w->shape[2]) {
        throw ShapeError("depthwise_conv2d: kernel must be [C,k,k], got " + shape_str(w->shape));
    }
    const ConvDims d = conv_dims("depthwise_conv2d", x, w->shape[1], w->shape[0], stride, pad);
    if (w->shape[0] != d.in_c) {
        throw ShapeError("depthwise_conv2d: input " + shape_str(x->shape) +
                         " does not match kernel " + shape_str(w->shape));
    }
    std::vector<int> out_shape = d.batched ? std::vector<int>{d.batch, d.in_c, d.out_h, d.out_w}
                                           : std::vector<int>{d.in_c, d.out_h, d.out_w};

    const std::size_t x_plane = static_cast<std::size_t>(d.in_h) * d.in_w;
    const std::size_t o_plane = static_cast<std::size_t>(d.out_h) * d.out_w;
    const std::size_t x_stride_b = static_cast<std::size_t>(d.in_c) * x_plane;
    const std::size_t o_stride_b = d.in_c * o_plane;

    auto out = make_result(std::move(out_shape), {x, w}, [x, w, d, stride, pad, x_plane, o_plane,
                                                          x_stride_b, o_stride_b](Tensor& self) {
        const double* g = self.flow.data();
        for (int b = 0; b < d.batch; ++b) {
            for (int c = 0; c < d.in_c; ++c) {
                const double* wk = w->data.data() + static_cast<std::size_t>(c) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    const auto [ylo, yhi] = tap_range(d.out_h, d.in_h, stride, pad, ky);
                    for (int kx = 0; kx < d.k; ++kx) {
                        const auto [xlo, xhi] = tap_range(d.out_w, d.in_w, stride, pad, kx);
                        const double wv = wk[ky * d.k + kx];
                        double gw_acc = 0.0;
                        for (int oy = ylo; oy < yhi; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            const std::size_t xoff =
                                b * x_stride_b + c * x_plane + static_cast<std::size_t>(iy) * d.in_w;
                            const double* gr = g + b * o_stride_b + c * o_plane +
                                               static_cast<std::size_t>(oy) * d.out_w;
                            for (int ox = xlo; ox < xhi; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (x->requires_grad) {
                                    x->flow[xoff + ix] += wv * gr[ox];
                                }
                                gw_acc += gr[ox] * x->data[xoff + ix];
                            }
                        }
                        if (w->requires_grad) {
                            w->flow[static_cast<std::size_t>(c) * d.k * d.k + ky * d.k + kx] +=
                                gw_acc;
                        }
                    }
                }
            }
        }
    });

    for (int b = 0; b < d.batch; ++b) {
        for (int c = 0; c < d.in_c; ++c) {
            const double* wk = w->data.data() + static_cast<std::size_t>(c) * d.k * d.k;
            for (int ky = 0; ky < d.k; ++ky) {
                const auto [ylo, yhi] = tap_range(d.out_h, d.in_h, stride, pad, ky);
                for (int kx = 0; kx < d.k; ++kx) {
                    const double wv = wk[ky * d.k + kx];
                    if (wv == 0.0) continue;
                    const auto [xlo, xhi] = tap_range(d.out_w, d.in_w, stride, pad, kx);
                    for (int oy = ylo; oy < yhi; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        const double* xr = x->data.data() + b * x_stride_b + c * x_plane +
                                           static_cast<std::size_t>(iy) * d.in_w;
                        double* orow = out->data.data() + b * o_stride_b + c * o_plane +
                                       static_cast<std::size_t>(oy) * d.out_w;
                        for (int ox = xlo; ox < xhi; ++ox) {
                            orow[ox] += wv * xr[ox * stride - pad + kx];
                        }
                    }
                }
            }
        }
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr relu(const TensorPtr& x) {
    auto out = make_result(x->shape, {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t i = 0; i < self.flow.size(); ++i) {
            if (x->data[i] > 0.0) x->flow[i] += self.flow[i];
        }
    });
    for (std::size_t i = 0; i < x->numel(); ++i) {
        out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    }
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    const BinaryLayout l = binary_layout("add", a, b);
    auto out = make_result(l.out_shape, {a, b}, [a, b, l](Tensor& self) {
        for (std::size_t r = 0; r < l.batch; ++r) {
            const double* g = self.flow.data() + r * l.inner;
            if (a->requires_grad) {
                double* fa = l.small == 0 ? a->flow.data() : a->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fa[i] += g[i];
            }
            if (b->requires_grad) {
                double* fb = l.small == 1 ? b->flow.data() : b->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fb[i] += g[i];
            }
        }
    });
    for (std::size_t r = 0; r < l.batch; ++r) {
        double* po = out->data.data() + r * l.inner;
        const double* ra = l.small == 0 ? a->data.data() : a->data.data() + r * l.inner;
        const double* rb = l.small == 1 ? b->data.data() : b->data.data() + r * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) po[i] = ra[i] + rb[i];
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    const BinaryLayout l = binary_layout("sub", a, b);
    auto out = make_result(l.out_shape, {a, b}, [a, b, l](Tensor& self) {
        for (std::size_t r = 0; r < l.batch; ++r) {
            const double* g = self.flow.data() + r * l.inner;
            if (a->requires_grad) {
                double* fa = l.small == 0 ? a->flow.data() : a->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fa[i] += g[i];
            }
            if (b->requires_grad) {
                double* fb = l.small == 1 ? b->flow.data() : b->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fb[i] -= g[i];
            }
        }
    });
    for (std::size_t r = 0; r < l.batch; ++r) {
        double* po = out->data.data() + r * l.inner;
        const double* ra = l.small == 0 ? a->data.data() : a->data.data() + r * l.inner;
        const double* rb = l.small == 1 ? b->data.data() : b->data.data() + r * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) po[i] = ra[i] - rb[i];
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    const BinaryLayout l = binary_layout("mul", a, b);
    auto out = make_result(l.out_shape, {a, b}, [a, b, l](Tensor& self) {
        for (std::size_t r = 0; r < l.batch; ++r) {
            const double* g = self.flow.data() + r * l.inner;
            const double* da = l.small == 0 ? a->data.data() : a->data.data() + r * l.inner;
            const double* db = l.small == 1 ? b->data.data() : b->data.data() + r * l.inner;
            if (a->requires_grad) {
                double* fa = l.small == 0 ? a->flow.data() : a->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fa[i] += g[i] * db[i];
            }
            if (b->requires_grad) {
                double* fb = l.small == 1 ? b->flow.data() : b->flow.data() + r * l.inner;
                for (std::size_t i = 0; i < l.inner; ++i) fb[i] += g[i] * da[i];
            }
        }
    });
    for (std::size_t r = 0; r < l.batch; ++r) {
        double* po = out->data.data() + r * l.inner;
        const double* ra = l.small == 0 ? a->data.data() : a->data.data() + r * l.inner;
        const double* rb = l.small == 1 ? b->data.data() : b->data.data() + r * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) po[i] = ra[i] * rb[i];
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
    auto out = make_result(x->shape, {x}, [x, c](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t i = 0; i < self.flow.size(); ++i) x->flow[i] += c * self.flow[i];
    });
    for (std::size_t i = 0; i < x->numel(); ++i) out->data[i] = c * x->data[i];
    quantize_inplace(out->data);
    return out;
}

TensorPtr mean(const TensorPtr& x) {
    const double inv_n = 1.0 / static_cast<double>(x->numel());
    auto out = make_result({1}, {x}, [x, inv_n](Tensor& self) {
        if (!x->requires_grad) return;
        const double g = self.flow[0] * inv_n;
        for (double& f : x->flow) f += g;
    });
    double acc = 0.0;
    for (const double v : x->data) acc += v;
    out->data[0] = acc * inv_n;
    quantize_inplace(out->data);
    return out;
}

TensorPtr sum(const TensorPtr& x) {
    auto out = make_result({1}, {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        const double g = self.flow[0];
        for (double& f : x->flow) f += g;
    });
    double acc = 0.0;
    for (const double v : x->data) acc += v;
    out->data[0] = acc;
    quantize_inplace(out->data);
    return out;
}

TensorPtr mse(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw ShapeError("mse: shapes differ, " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const double inv_n = 1.0 / static_cast<double>(a->numel());
    auto out = make_result({1}, {a, b}, [a, b, inv_n](Tensor& self) {
        const double g = self.flow[0] * 2.0 * inv_n;
        for (std::size_t i = 0; i < a->numel(); ++i) {
            const double d = g * (a->data[i] - b->data[i]);
            if (a->requires_grad) a->flow[i] += d;
            if (b->requires_grad) b->flow[i] -= d;
        }
    });
    double acc = 0.0;
    for (std::size_t i = 0; i < a->numel(); ++i) {
        const double d = a->data[i] - b->data[i];
        acc += d * d;
    }
    out->data[0] = acc * inv_n;
    quantize_inplace(out->data);
    return out;
}

TensorPtr concat(const TensorPtr& a, const TensorPtr& b, int axis) {
    if (a->shape.size() != b->shape.size()) {
        throw ShapeError("concat: rank mismatch, " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const int rank = static_cast<int>(a->shape.size());
    if (axis < 0 || axis >= rank) {
        throw ParamError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    }
    for (int i = 0; i < rank; ++i) {
        if (i != axis && a->shape[i] != b->shape[i]) {
            throw ShapeError("concat: shapes " + shape_str(a->shape) + " and " +
                             shape_str(b->shape) + " differ outside axis " + std::to_string(axis));
        }
    }
    std::vector<int> out_shape = a->shape;
    out_shape[axis] += b->shape[axis];

    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a->shape[i]);
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(a->shape[i]);
    const std::size_t a_block = static_cast<std::size_t>(a->shape[axis]) * inner;
    const std::size_t b_block = static_cast<std::size_t>(b->shape[axis]) * inner;

    auto out = make_result(std::move(out_shape), {a, b}, [a, b, outer, a_block, b_block](Tensor& self) {
        for (std::size_t o = 0; o < outer; ++o) {
            const double* g = self.flow.data() + o * (a_block + b_block);
            if (a->requires_grad) {
                double* fa = a->flow.data() + o * a_block;
                for (std::size_t i = 0; i < a_block; ++i) fa[i] += g[i];
            }
            if (b->requires_grad) {
                double* fb = b->flow.data() + o * b_block;
                for (std::size_t i = 0; i < b_block; ++i) fb[i] += g[i + a_block];
            }
        }
    });
    for (std::size_t o = 0; o < outer; ++o) {
        double* po = out->data.data() + o * (a_block + b_block);
        std::copy_n(a->data.data() + o * a_block, a_block, po);
        std::copy_n(b->data.data() + o * b_block, b_block, po + a_block);
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr global_avg_pool(const TensorPtr& x) {
    const bool batched = x->shape.size() == 4;
    if (!batched && x->shape.size() != 3) {
        throw ShapeError("global_avg_pool: input must be [C,H,W] or [B,C,H,W], got " +
                         shape_str(x->shape));
    }
    const int off = batched ? 1 : 0;
    const int channels = x->shape[off];
    const std::size_t plane = static_cast<std::size_t>(x->shape[off + 1]) * x->shape[off + 2];
    const std::size_t rows = x->numel() / plane; // batch * channels
    const double inv = 1.0 / static_cast<double>(plane);

    std::vector<int> out_shape = batched ? std::vector<int>{x->shape[0], channels}
                                         : std::vector<int>{channels};
    auto out = make_result(std::move(out_shape), {x}, [x, rows, plane, inv](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double g = self.flow[r] * inv;
            double* f = x->flow.data() + r * plane;
            for (std::size_t i = 0; i < plane; ++i) f[i] += g;
        }
    });
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = x->data.data() + r * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        out->data[r] = acc * inv;
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr softmax_stable(const TensorPtr& x) {
    if (x->shape.empty()) {
        throw ShapeError("softmax_stable: rank-0 input");
    }
    const std::size_t inner = static_cast<std::size_t>(x->shape.back());
    const std::size_t rows = x->numel() / inner;
    auto out = make_result(x->shape, {x}, [x, rows, inner](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * inner;
            const double* g = self.flow.data() + r * inner;
            double dot = 0.0;
            for (std::size_t i = 0; i < inner; ++i) dot += y[i] * g[i];
            double* f = x->flow.data() + r * inner;
            for (std::size_t i = 0; i < inner; ++i) f[i] += y[i] * (g[i] - dot);
        }
    });
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = x->data.data() + r * inner;
        double* q = out->data.data() + r * inner;
        double mx = p[0];
        for (std::size_t i = 1; i < inner; ++i) mx = std::max(mx, p[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
            q[i] = std::exp(p[i] - mx);
            z += q[i];
        }
        const double inv_z = 1.0 / z;
        for (std::size_t i = 0; i < inner; ++i) q[i] *= inv_z;
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr dropout(const TensorPtr& x, double rate, Mode mode, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ParamError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (mode == Mode::eval || rate == 0.0) {
        return x;
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x->numel());
    for (double& m : *mask) {
        m = rng.uniform() >= rate ? keep_scale : 0.0;
    }
    auto out = make_result(x->shape, {x}, [x, mask](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t i = 0; i < self.flow.size(); ++i) {
            x->flow[i] += (*mask)[i] * self.flow[i];
        }
    });
    for (std::size_t i = 0; i < x->numel(); ++i) {
        out->data[i] = (*mask)[i] * x->data[i];
    }
    quantize_inplace(out->data);
    return out;
}

TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    check_shape_valid(shape, "reshape");
    if (shape_numel(shape) != x->numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
    }
    auto out = make_result(std::move(shape), {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        for (std::size_t i = 0; i < self.flow.size(); ++i) x->flow[i] += self.flow[i];
    });
    out->data = x->data;
    return out;
}

void backward(const TensorPtr& loss) {
    if (!loss) {
        throw ContractError("backward: null loss");
    }
    if (loss->numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    }
    if (!loss->requires_grad) {
        return; // constant graph, nothing reachable requires grad
    }

    // Reverse post-order DFS over the requires_grad subgraph.
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> visited;
    struct Frame {
        Tensor* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    visited.insert(loss.get());
    stack.push_back({loss.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            Tensor* p = f.node->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (Tensor* t : topo) {
        t->flow.assign(t->numel(), 0.0);
    }
    loss->flow[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backprop) {
            (*it)->backprop(**it);
        }
    }
    for (Tensor* t : topo) {
        if (t->grad.size() != t->numel()) {
            t->grad.assign(t->numel(), 0.0);
        }
        for (std::size_t i = 0; i < t->numel(); ++i) {
            t->grad[i] += t->flow[i];
        }
        t->flow.clear();
        t->flow.shrink_to_fit();
    }
}

} // namespace aqfn
