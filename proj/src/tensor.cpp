#include "mudjack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mudjack/parallel.hpp"

namespace mudjack {

namespace {

using detail::TensorData;
using DataPtr = std::shared_ptr<TensorData>;

thread_local Tape* g_active_tape = nullptr;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        n *= d;
    }
    return n;
}

void check_positive_shape(const Shape& s, const char* op) {
    for (int64_t d : s) {
        if (d <= 0) {
            throw std::invalid_argument(std::string(op) + ": shape " + shape_str(s) +
                                        " has a non-positive dimension");
        }
    }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

void accumulate(const DataPtr& dst, std::span<const double> g) {
    dst->ensure_grad();
    double* out = dst->grad.data();
    for (size_t i = 0; i < g.size(); ++i) {
        out[i] += g[i];
    }
}

// C[m,n] += or = A[m,k] * B[k,n]; rows of C are computed independently so
// results do not depend on the worker count.
void matmul_kernel(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                   bool zero_first) {
    auto body = [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            double* crow = c + i * n;
            if (zero_first) {
                std::fill(crow, crow + n, 0.0);
            }
            const double* arow = a + i * k;
            for (int64_t p = 0; p < k; ++p) {
                double av = arow[p];
                if (av == 0.0) {
                    continue;
                }
                const double* brow = b + p * n;
                for (int64_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    };
    if (m * k * n >= 1 << 15) {
        parallel_for(m, body);
    } else {
        body(0, m);
    }
}

// C[m,n] += A^T[m,k'] ... specifically C = A^T * B where A is [k,m], B is [k,n].
void matmul_at_b_kernel(const double* a, const double* b, double* c, int64_t k, int64_t m,
                        int64_t n) {
    // C[i,j] = sum_p A[p,i] * B[p,j]; accumulate row-block-wise over i.
    auto body = [&](int64_t r0, int64_t r1) {
        for (int64_t p = 0; p < k; ++p) {
            const double* arow = a + p * m;
            const double* brow = b + p * n;
            for (int64_t i = r0; i < r1; ++i) {
                double av = arow[i];
                if (av == 0.0) {
                    continue;
                }
                double* crow = c + i * n;
                for (int64_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    };
    if (m * k * n >= 1 << 15) {
        parallel_for(m, body);
    } else {
        body(0, m);
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k].
void matmul_a_bt_kernel(const double* a, const double* b, double* c, int64_t m, int64_t k,
                        int64_t n) {
    auto body = [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) {
                    acc += arow[p] * brow[p];
                }
                crow[j] += acc;
            }
        }
    };
    if (m * k * n >= 1 << 15) {
        parallel_for(m, body);
    } else {
        body(0, m);
    }
}

struct ConvDims {
    int64_t batch, in_ch, in_h, in_w;
    int64_t out_ch, kh, kw;
    int64_t out_h, out_w;
    int pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw std::invalid_argument("conv2d: input shape " + shape_str(x.shape()) +
                                    " and kernel shape " + shape_str(w.shape()) +
                                    " must both be rank 4");
    }
    ConvDims d;
    d.batch = x.dim(0);
    d.in_ch = x.dim(1);
    d.in_h = x.dim(2);
    d.in_w = x.dim(3);
    d.out_ch = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.pad = pad;
    if (w.dim(1) != d.in_ch) {
        throw std::invalid_argument("conv2d: input shape " + shape_str(x.shape()) +
                                    " incompatible with kernel shape " + shape_str(w.shape()));
    }
    if (b.rank() != 1 || b.dim(0) != d.out_ch) {
        throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()) +
                                    " incompatible with kernel shape " + shape_str(w.shape()));
    }
    d.out_h = d.in_h + 2 * pad - d.kh + 1;
    d.out_w = d.in_w + 2 * pad - d.kw + 1;
    if (d.out_h <= 0 || d.out_w <= 0) {
        throw std::invalid_argument("conv2d: kernel shape " + shape_str(w.shape()) +
                                    " larger than padded input shape " + shape_str(x.shape()));
    }
    return d;
}

// Gathers the receptive field of every output position of one image:
// col[(oy*out_w+ox), (c*kh*kw + ky*kw + kx)] = x[c, oy+ky-pad, ox+kx-pad].
void im2col_image(const double* img, const ConvDims& d, double* col) {
    int64_t patch = d.in_ch * d.kh * d.kw;
    for (int64_t oy = 0; oy < d.out_h; ++oy) {
        for (int64_t ox = 0; ox < d.out_w; ++ox) {
            double* dst = col + (oy * d.out_w + ox) * patch;
            for (int64_t c = 0; c < d.in_ch; ++c) {
                const double* plane = img + c * d.in_h * d.in_w;
                for (int64_t ky = 0; ky < d.kh; ++ky) {
                    int64_t y = oy + ky - d.pad;
                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                        int64_t x = ox + kx - d.pad;
                        double v = 0.0;
                        if (y >= 0 && y < d.in_h && x >= 0 && x < d.in_w) {
                            v = plane[y * d.in_w + x];
                        }
                        *dst++ = v;
                    }
                }
            }
        }
    }
}

void col2im_image(const double* col, const ConvDims& d, double* img_grad) {
    int64_t patch = d.in_ch * d.kh * d.kw;
    for (int64_t oy = 0; oy < d.out_h; ++oy) {
        for (int64_t ox = 0; ox < d.out_w; ++ox) {
            const double* src = col + (oy * d.out_w + ox) * patch;
            for (int64_t c = 0; c < d.in_ch; ++c) {
                double* plane = img_grad + c * d.in_h * d.in_w;
                for (int64_t ky = 0; ky < d.kh; ++ky) {
                    int64_t y = oy + ky - d.pad;
                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                        int64_t x = ox + kx - d.pad;
                        double v = *src++;
                        if (y >= 0 && y < d.in_h && x >= 0 && x < d.in_w) {
                            plane[y * d.in_w + x] += v;
                        }
                    }
                }
            }
        }
    }
}

Tensor make_result(Shape shape, std::vector<double> data, bool recorded) {
    Tensor t = Tensor::from(std::move(shape), std::move(data), false);
    if (recorded) {
        t.set_requires_grad(true);
    }
    return t;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        os << (i ? ", " : "") << s[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_positive_shape(shape, "zeros");
    int64_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_positive_shape(shape, "full");
    int64_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " expects " +
                                    std::to_string(shape_numel(shape)) + " scalars, got " +
                                    std::to_string(data.size()));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    check_positive_shape(shape, "uniform");
    int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) {
        v = rng.uniform(lo, hi);
    }
    return from(std::move(shape), std::move(data), requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("item: tensor shape " + shape_str(shape()) + " is not scalar");
    }
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

void Tape::replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        (*it)();
    }
    nodes_.clear();
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradGuard::NoGradGuard() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = prev_; }

void backward(Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss shape " + shape_str(loss.shape()) +
                                    " is not scalar");
    }
    loss.grad_mut()[0] += 1.0;
    if (g_active_tape != nullptr) {
        g_active_tape->replay_backward();
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: lhs shape " + shape_str(a.shape()) +
                                    " differs from rhs shape " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] += bp[i];
    }
    bool rec = should_record({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri] {
            if (ri->grad.empty()) {
                return;
            }
            if (ai->requires_grad) {
                accumulate(ai, ri->grad);
            }
            if (bi->requires_grad) {
                accumulate(bi, ri->grad);
            }
        });
    }
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("sub: lhs shape " + shape_str(a.shape()) +
                                    " differs from rhs shape " + shape_str(b.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] -= bp[i];
    }
    bool rec = should_record({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri] {
            if (ri->grad.empty()) {
                return;
            }
            if (ai->requires_grad) {
                accumulate(ai, ri->grad);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < ri->grad.size(); ++i) {
                    bi->grad[i] -= ri->grad[i];
                }
            }
        });
    }
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: lhs shape " + shape_str(a.shape()) +
                                    " differs from rhs shape " + shape_str(b.shape()));
    }
    std::vector<double> out(a.numel() >= 0 ? static_cast<size_t>(a.numel()) : 0);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = ap[i] * bp[i];
    }
    bool rec = should_record({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri] {
            if (ri->grad.empty()) {
                return;
            }
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < ri->grad.size(); ++i) {
                    ai->grad[i] += ri->grad[i] * bi->data[i];
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < ri->grad.size(); ++i) {
                    bi->grad[i] += ri->grad[i] * ai->data[i];
                }
            }
        });
    }
    return r;
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= factor;
    }
    bool rec = should_record({&a});
    Tensor r = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri, factor] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            ai->ensure_grad();
            for (size_t i = 0; i < ri->grad.size(); ++i) {
                ai->grad[i] += factor * ri->grad[i];
            }
        });
    }
    return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: lhs shape " + shape_str(a.shape()) +
                                    " incompatible with rhs shape " + shape_str(b.shape()));
    }
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n, true);
    bool rec = should_record({&a, &b});
    Tensor r = make_result({m, n}, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri, m, k, n] {
            if (ri->grad.empty()) {
                return;
            }
            if (ai->requires_grad) {
                ai->ensure_grad();
                matmul_a_bt_kernel(ri->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                matmul_at_b_kernel(ai->data.data(), ri->grad.data(), bi->grad.data(), m, k, n);
            }
        });
    }
    return r;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) {
        throw std::invalid_argument("transpose2d: shape " + shape_str(a.shape()) +
                                    " is not rank 2");
    }
    int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    const double* ap = a.data().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            out[static_cast<size_t>(j * m + i)] = ap[i * n + j];
        }
    }
    bool rec = should_record({&a});
    Tensor r = make_result({n, m}, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri, m, n] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            ai->ensure_grad();
            for (int64_t j = 0; j < n; ++j) {
                for (int64_t i = 0; i < m; ++i) {
                    ai->grad[static_cast<size_t>(i * n + j)] +=
                        ri->grad[static_cast<size_t>(j * m + i)];
                }
            }
        });
    }
    return r;
}

Tensor add_rowwise(const Tensor& mat, const Tensor& bias) {
    if (mat.rank() != 2 || bias.rank() != 1 || mat.dim(1) != bias.dim(0)) {
        throw std::invalid_argument("add_rowwise: matrix shape " + shape_str(mat.shape()) +
                                    " incompatible with bias shape " + shape_str(bias.shape()));
    }
    int64_t m = mat.dim(0), n = mat.dim(1);
    std::vector<double> out(mat.data().begin(), mat.data().end());
    const double* bp = bias.data().data();
    for (int64_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            row[j] += bp[j];
        }
    }
    bool rec = should_record({&mat, &bias});
    Tensor r = make_result(mat.shape(), std::move(out), rec);
    if (rec) {
        auto mi = mat.impl(), bi = bias.impl(), ri = r.impl();
        g_active_tape->record([mi, bi, ri, m, n] {
            if (ri->grad.empty()) {
                return;
            }
            if (mi->requires_grad) {
                accumulate(mi, ri->grad);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < m; ++i) {
                    const double* row = ri->grad.data() + i * n;
                    for (int64_t j = 0; j < n; ++j) {
                        bi->grad[static_cast<size_t>(j)] += row[j];
                    }
                }
            }
        });
    }
    return r;
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v = v > 0.0 ? v : 0.0;
    }
    bool rec = should_record({&a});
    Tensor r = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            ai->ensure_grad();
            for (size_t i = 0; i < ri->grad.size(); ++i) {
                if (ai->data[i] > 0.0) {
                    ai->grad[i] += ri->grad[i];
                }
            }
        });
    }
    return r;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
    ConvDims d = conv_dims(x, w, b, pad);
    int64_t patch = d.in_ch * d.kh * d.kw;
    int64_t out_hw = d.out_h * d.out_w;
    int64_t img_out = d.out_ch * out_hw;

    // col matrices kept for backward; one slab per image.
    auto col = std::make_shared<std::vector<double>>(
        static_cast<size_t>(d.batch * out_hw * patch));
    std::vector<double> out(static_cast<size_t>(d.batch * img_out));
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    const double* bp = b.data().data();

    parallel_for(d.batch, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            double* ci = col->data() + i * out_hw * patch;
            im2col_image(xp + i * d.in_ch * d.in_h * d.in_w, d, ci);
            // out_i[(oc, pos)] = sum_p W[oc, p] * col[pos, p] + bias[oc]
            double* oi = out.data() + i * img_out;
            for (int64_t oc = 0; oc < d.out_ch; ++oc) {
                const double* wrow = wp + oc * patch;
                double* orow = oi + oc * out_hw;
                double bias_v = bp[oc];
                for (int64_t pos = 0; pos < out_hw; ++pos) {
                    const double* crow = ci + pos * patch;
                    double acc = bias_v;
                    for (int64_t p = 0; p < patch; ++p) {
                        acc += wrow[p] * crow[p];
                    }
                    orow[pos] = acc;
                }
            }
        }
    });

    bool rec = should_record({&x, &w, &b});
    Tensor r = make_result({d.batch, d.out_ch, d.out_h, d.out_w}, std::move(out), rec);
    if (rec) {
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([xi, wi, bi, ri, d, col, patch, out_hw, img_out] {
            if (ri->grad.empty()) {
                return;
            }
            const double* gp = ri->grad.data();
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < d.batch; ++i) {
                    for (int64_t oc = 0; oc < d.out_ch; ++oc) {
                        const double* grow = gp + i * img_out + oc * out_hw;
                        double acc = 0.0;
                        for (int64_t pos = 0; pos < out_hw; ++pos) {
                            acc += grow[pos];
                        }
                        bi->grad[static_cast<size_t>(oc)] += acc;
                    }
                }
            }
            if (wi->requires_grad) {
                // Per-image partial gradients, reduced in index order afterwards
                // so the result is independent of the worker count.
                std::vector<double> per_img(static_cast<size_t>(d.batch * d.out_ch * patch), 0.0);
                parallel_for(d.batch, [&](int64_t i0, int64_t i1) {
                    for (int64_t i = i0; i < i1; ++i) {
                        const double* ci = col->data() + i * out_hw * patch;
                        double* wg = per_img.data() + i * d.out_ch * patch;
                        for (int64_t oc = 0; oc < d.out_ch; ++oc) {
                            const double* grow = gp + i * img_out + oc * out_hw;
                            double* wrow = wg + oc * patch;
                            for (int64_t pos = 0; pos < out_hw; ++pos) {
                                double gv = grow[pos];
                                if (gv == 0.0) {
                                    continue;
                                }
                                const double* crow = ci + pos * patch;
                                for (int64_t p = 0; p < patch; ++p) {
                                    wrow[p] += gv * crow[p];
                                }
                            }
                        }
                    }
                });
                wi->ensure_grad();
                for (int64_t i = 0; i < d.batch; ++i) {
                    const double* wg = per_img.data() + i * d.out_ch * patch;
                    for (size_t j = 0; j < wi->grad.size(); ++j) {
                        wi->grad[j] += wg[j];
                    }
                }
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                const double* wp2 = wi->data.data();
                double* xg = xi->grad.data();
                parallel_for(d.batch, [&](int64_t i0, int64_t i1) {
                    std::vector<double> col_grad(static_cast<size_t>(out_hw * patch));
                    for (int64_t i = i0; i < i1; ++i) {
                        std::fill(col_grad.begin(), col_grad.end(), 0.0);
                        for (int64_t oc = 0; oc < d.out_ch; ++oc) {
                            const double* grow = gp + i * img_out + oc * out_hw;
                            const double* wrow = wp2 + oc * patch;
                            for (int64_t pos = 0; pos < out_hw; ++pos) {
                                double gv = grow[pos];
                                if (gv == 0.0) {
                                    continue;
                                }
                                double* crow = col_grad.data() + pos * patch;
                                for (int64_t p = 0; p < patch; ++p) {
                                    crow[p] += gv * wrow[p];
                                }
                            }
                        }
                        col2im_image(col_grad.data(), d,
                                     xg + i * d.in_ch * d.in_h * d.in_w);
                    }
                });
            }
        });
    }
    return r;
}

Tensor maxpool2d(const Tensor& x, int window) {
    if (x.rank() != 4) {
        throw std::invalid_argument("maxpool2d: input shape " + shape_str(x.shape()) +
                                    " is not rank 4");
    }
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (window < 1 || h % window != 0 || w % window != 0) {
        throw std::invalid_argument("maxpool2d: window " + std::to_string(window) +
                                    " does not tile input shape " + shape_str(x.shape()));
    }
    int64_t oh = h / window, ow = w / window;
    std::vector<double> out(static_cast<size_t>(n * c * oh * ow));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const double* xp = x.data().data();
    for (int64_t i = 0; i < n * c; ++i) {
        const double* plane = xp + i * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
                int64_t best_idx = (oy * window) * w + ox * window;
                double best = plane[best_idx];
                for (int64_t ky = 0; ky < window; ++ky) {
                    for (int64_t kx = 0; kx < window; ++kx) {
                        int64_t idx = (oy * window + ky) * w + ox * window + kx;
                        if (plane[idx] > best) {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                size_t o = static_cast<size_t>(i * oh * ow + oy * ow + ox);
                out[o] = best;
                (*argmax)[o] = i * h * w + best_idx;
            }
        }
    }
    bool rec = should_record({&x});
    Tensor r = make_result({n, c, oh, ow}, std::move(out), rec);
    if (rec) {
        auto xi = x.impl(), ri = r.impl();
        g_active_tape->record([xi, ri, argmax] {
            if (ri->grad.empty() || !xi->requires_grad) {
                return;
            }
            xi->ensure_grad();
            for (size_t o = 0; o < ri->grad.size(); ++o) {
                xi->grad[static_cast<size_t>((*argmax)[o])] += ri->grad[o];
            }
        });
    }
    return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: shape " + shape_str(a.shape()) +
                                    " cannot be viewed as shape " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    bool rec = should_record({&a});
    Tensor r = make_result(std::move(shape), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            accumulate(ai, ri->grad);
        });
    }
    return r;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    if (axis != 0 || a.rank() != b.rank() || a.rank() == 0) {
        throw std::invalid_argument("concat: only axis 0 of equal-rank tensors is supported, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    for (int i = 1; i < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw std::invalid_argument("concat: lhs shape " + shape_str(a.shape()) +
                                        " incompatible with rhs shape " + shape_str(b.shape()));
        }
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<double> out;
    out.reserve(static_cast<size_t>(a.numel() + b.numel()));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    bool rec = should_record({&a, &b});
    Tensor r = make_result(std::move(shape), std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        size_t na = static_cast<size_t>(a.numel());
        g_active_tape->record([ai, bi, ri, na] {
            if (ri->grad.empty()) {
                return;
            }
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < na; ++i) {
                    ai->grad[i] += ri->grad[i];
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->grad.size(); ++i) {
                    bi->grad[i] += ri->grad[na + i];
                }
            }
        });
    }
    return r;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v;
    }
    bool rec = should_record({&a});
    Tensor r = make_result(Shape{}, {acc}, rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            ai->ensure_grad();
            double g = ri->grad[0];
            for (auto& v : ai->grad) {
                v += g;
            }
        });
    }
    return r;
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) {
        throw std::invalid_argument("mean: empty tensor");
    }
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v;
    }
    double inv_n = 1.0 / static_cast<double>(a.numel());
    bool rec = should_record({&a});
    Tensor r = make_result(Shape{}, {acc * inv_n}, rec);
    if (rec) {
        auto ai = a.impl(), ri = r.impl();
        g_active_tape->record([ai, ri, inv_n] {
            if (ri->grad.empty() || !ai->requires_grad) {
                return;
            }
            ai->ensure_grad();
            double g = ri->grad[0] * inv_n;
            for (auto& v : ai->grad) {
                v += g;
            }
        });
    }
    return r;
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw std::invalid_argument("l2_normalize_rows: shape " + shape_str(x.shape()) +
                                    " is not rank 2");
    }
    constexpr double kDegenerate = 1e-9;
    int64_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(static_cast<size_t>(n * d));
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    const double* xp = x.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xp + i * d;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            sq += row[j] * row[j];
        }
        double norm = std::sqrt(sq);
        (*norms)[static_cast<size_t>(i)] = norm;
        double* orow = out.data() + i * d;
        if (norm < kDegenerate) {
            std::fill(orow, orow + d, 0.0);
            orow[0] = 1.0;
        } else {
            double inv = 1.0 / norm;
            for (int64_t j = 0; j < d; ++j) {
                orow[j] = row[j] * inv;
            }
        }
    }
    bool rec = should_record({&x});
    Tensor r = make_result(x.shape(), std::move(out), rec);
    if (rec) {
        auto xi = x.impl(), ri = r.impl();
        g_active_tape->record([xi, ri, norms, n, d] {
            if (ri->grad.empty() || !xi->requires_grad) {
                return;
            }
            xi->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double norm = (*norms)[static_cast<size_t>(i)];
                if (norm < kDegenerate) {
                    continue;  // fallback rows carry no gradient
                }
                const double* g = ri->grad.data() + i * d;
                const double* y = ri->data.data() + i * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    dot += g[j] * y[j];
                }
                double inv = 1.0 / norm;
                double* xg = xi->grad.data() + i * d;
                for (int64_t j = 0; j < d; ++j) {
                    xg[j] += (g[j] - y[j] * dot) * inv;
                }
            }
        });
    }
    return r;
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw std::invalid_argument("rowwise_dot: lhs shape " + shape_str(a.shape()) +
                                    " incompatible with rhs shape " + shape_str(b.shape()));
    }
    int64_t n = a.dim(0), d = a.dim(1);
    std::vector<double> out(static_cast<size_t>(n));
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            acc += ap[i * d + j] * bp[i * d + j];
        }
        out[static_cast<size_t>(i)] = acc;
    }
    bool rec = should_record({&a, &b});
    Tensor r = make_result({n}, std::move(out), rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri, n, d] {
            if (ri->grad.empty()) {
                return;
            }
            for (int64_t i = 0; i < n; ++i) {
                double g = ri->grad[static_cast<size_t>(i)];
                if (g == 0.0) {
                    continue;
                }
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    for (int64_t j = 0; j < d; ++j) {
                        ai->grad[static_cast<size_t>(i * d + j)] +=
                            g * bi->data[static_cast<size_t>(i * d + j)];
                    }
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int64_t j = 0; j < d; ++j) {
                        bi->grad[static_cast<size_t>(i * d + j)] +=
                            g * ai->data[static_cast<size_t>(i * d + j)];
                    }
                }
            }
        });
    }
    return r;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    constexpr double kEps = 1e-12;
    if (a.numel() != b.numel() || a.numel() == 0) {
        throw std::invalid_argument("cosine_similarity: lhs shape " + shape_str(a.shape()) +
                                    " incompatible with rhs shape " + shape_str(b.shape()));
    }
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    int64_t n = a.numel();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        dot += ap[i] * bp[i];
        na2 += ap[i] * ap[i];
        nb2 += bp[i] * bp[i];
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    if (na <= kEps || nb <= kEps) {
        throw std::invalid_argument("cosine_similarity: degenerate zero-norm feature vector");
    }
    double cos = dot / (na * nb);
    bool rec = should_record({&a, &b});
    Tensor r = make_result(Shape{}, {cos}, rec);
    if (rec) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        g_active_tape->record([ai, bi, ri, n, na, nb, cos] {
            if (ri->grad.empty()) {
                return;
            }
            double g = ri->grad[0];
            double inv_ab = 1.0 / (na * nb);
            if (ai->requires_grad) {
                ai->ensure_grad();
                double inv_aa = cos / (na * na);
                for (int64_t i = 0; i < n; ++i) {
                    ai->grad[static_cast<size_t>(i)] +=
                        g * (bi->data[static_cast<size_t>(i)] * inv_ab -
                             ai->data[static_cast<size_t>(i)] * inv_aa);
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                double inv_bb = cos / (nb * nb);
                for (int64_t i = 0; i < n; ++i) {
                    bi->grad[static_cast<size_t>(i)] +=
                        g * (ai->data[static_cast<size_t>(i)] * inv_ab -
                             bi->data[static_cast<size_t>(i)] * inv_bb);
                }
            }
        });
    }
    return r;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(labels.size())) {
        throw std::invalid_argument("softmax_cross_entropy: logits shape " +
                                    shape_str(logits.shape()) + " incompatible with " +
                                    std::to_string(labels.size()) + " labels");
    }
    int64_t n = logits.dim(0), k = logits.dim(1);
    for (int label : labels) {
        if (label < 0 || label >= k) {
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                        " outside logits shape " + shape_str(logits.shape()));
        }
    }
    const double* zp = logits.data().data();
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * k));
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double* row = zp + i * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) {
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            denom += std::exp(row[j] - mx);
        }
        double log_denom = std::log(denom) + mx;
        loss += log_denom - row[labels[static_cast<size_t>(i)]];
        double* prow = probs->data() + i * k;
        for (int64_t j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - log_denom);
        }
    }
    loss /= static_cast<double>(n);
    bool rec = should_record({&logits});
    Tensor r = make_result(Shape{}, {loss}, rec);
    if (rec) {
        auto zi = logits.impl(), ri = r.impl();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        g_active_tape->record([zi, ri, probs, labels_copy, n, k] {
            if (ri->grad.empty() || !zi->requires_grad) {
                return;
            }
            zi->ensure_grad();
            double g = ri->grad[0] / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) {
                const double* prow = probs->data() + i * k;
                double* grow = zi->grad.data() + i * k;
                int label = (*labels_copy)[static_cast<size_t>(i)];
                for (int64_t j = 0; j < k; ++j) {
                    grow[j] += g * (prow[j] - (j == label ? 1.0 : 0.0));
                }
            }
        });
    }
    return r;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    double mx = *std::max_element(p.begin(), p.end());
    double denom = 0.0;
    for (auto& v : p) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (auto& v : p) {
        v /= denom;
    }
    return p;
}

bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

}  // namespace mudjack
