#include "dynsel/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "dynsel/kernels.hpp"

namespace dynsel {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

namespace {

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_shape(const Shape& shape) {
    for (int d : shape) check(d > 0, "tensor: non-positive dimension in " + shape_str(shape));
}

}  // namespace

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape);
    auto t = std::make_shared<Tensor>();
    t->data.assign(numel(shape), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::from_vec(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    check(numel(shape) == values.size(),
          "tensor: data length " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from_vec({1}, {value}, requires_grad);
}

double Tensor::item() const {
    check(data.size() == 1, "item(): tensor has shape " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

void Tape::backward(const TensorPtr& loss) {
    check(loss != nullptr, "backward: null loss");
    check(loss->size() == 1, "backward: loss must be scalar, got " + shape_str(loss->shape));
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Tensor& node = **it;
        if (node.backprop && !node.grad.empty()) node.backprop(node);
    }
}

namespace ops {

namespace {

using std::ptrdiff_t;

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    int nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (int d = 0; d < nd; ++d) {
        int ad = d - (nd - static_cast<int>(a.size()));
        int bd = d - (nd - static_cast<int>(b.size()));
        int av = ad >= 0 ? a[ad] : 1;
        int bv = bd >= 0 ? b[bd] : 1;
        check(av == bv || av == 1 || bv == 1, std::string(op) + ": incompatible shapes " +
                                                  shape_str(a) + " and " + shape_str(b));
        out[d] = std::max(av, bv);
    }
    return out;
}

std::vector<ptrdiff_t> aligned_strides(const Shape& in, const Shape& out) {
    int ond = static_cast<int>(out.size());
    int ind = static_cast<int>(in.size());
    std::vector<ptrdiff_t> ist(ind);
    ptrdiff_t s = 1;
    for (int d = ind - 1; d >= 0; --d) {
        ist[d] = s;
        s *= in[d];
    }
    std::vector<ptrdiff_t> st(ond, 0);
    for (int d = 0; d < ond; ++d) {
        int id = d - (ond - ind);
        if (id >= 0) st[d] = (in[id] == 1 && out[d] != 1) ? 0 : ist[id];
    }
    return st;
}

// Visit the linear order of `os`, tracking two strided offsets.
template <class F>
void bcast_walk(const Shape& os, const std::vector<ptrdiff_t>& sa,
                const std::vector<ptrdiff_t>& sb, F&& f) {
    std::size_t n = numel(os);
    int nd = static_cast<int>(os.size());
    std::vector<int> idx(nd, 0);
    ptrdiff_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, static_cast<std::size_t>(ia), static_cast<std::size_t>(ib));
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            ia -= sa[d] * os[d];
            ib -= sb[d] * os[d];
        }
    }
}

// Visit the linear order of `shape`, yielding a strided offset.
template <class F>
void strided_walk(const Shape& shape, const std::vector<ptrdiff_t>& strides, F&& f) {
    std::size_t n = numel(shape);
    int nd = static_cast<int>(shape.size());
    std::vector<int> idx(nd, 0);
    ptrdiff_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, static_cast<std::size_t>(off));
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            off += strides[d];
            if (idx[d] < shape[d]) break;
            idx[d] = 0;
            off -= strides[d] * shape[d];
        }
    }
}

bool wants_grad(Tape& tape, std::initializer_list<TensorPtr> inputs) {
    if (!tape.grad_enabled) return false;
    for (const auto& t : inputs)
        if (t->requires_grad) return true;
    return false;
}

void attach(Tape& tape, const TensorPtr& out, std::vector<TensorPtr> parents,
            std::function<void(Tensor&)> backprop) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backprop = std::move(backprop);
    tape.record(out);
}

enum class BinOp { Add, Sub, Mul };

TensorPtr binary(Tape& tape, const TensorPtr& a, const TensorPtr& b, BinOp op, const char* name) {
    Shape os = broadcast_shape(a->shape, b->shape, name);
    auto sa = aligned_strides(a->shape, os);
    auto sb = aligned_strides(b->shape, os);
    auto out = Tensor::zeros(os);
    const double* pa = a->data.data();
    const double* pb = b->data.data();
    double* po = out->data.data();
    switch (op) {
        case BinOp::Add:
            bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                po[o] = pa[ia] + pb[ib];
            });
            break;
        case BinOp::Sub:
            bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                po[o] = pa[ia] - pb[ib];
            });
            break;
        case BinOp::Mul:
            bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                po[o] = pa[ia] * pb[ib];
            });
            break;
    }
    if (wants_grad(tape, {a, b})) {
        attach(tape, out, {a, b}, [a, b, os, sa, sb, op](Tensor& self) {
            const double* g = self.grad.data();
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            double* ga = a->requires_grad ? a->grad.data() : nullptr;
            double* gb = b->requires_grad ? b->grad.data() : nullptr;
            const double* pa = a->data.data();
            const double* pb = b->data.data();
            switch (op) {
                case BinOp::Add:
                    bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                        if (ga) ga[ia] += g[o];
                        if (gb) gb[ib] += g[o];
                    });
                    break;
                case BinOp::Sub:
                    bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                        if (ga) ga[ia] += g[o];
                        if (gb) gb[ib] -= g[o];
                    });
                    break;
                case BinOp::Mul:
                    bcast_walk(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                        if (ga) ga[ia] += g[o] * pb[ib];
                        if (gb) gb[ib] += g[o] * pa[ia];
                    });
                    break;
            }
        });
    }
    return out;
}

template <class Fwd, class Dfn>
TensorPtr unary(Tape& tape, const TensorPtr& a, Fwd fwd, Dfn dfn) {
    auto out = Tensor::zeros(a->shape);
    std::size_t n = a->size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i]);
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, dfn](Tensor& self) {
            a->ensure_grad();
            std::size_t n = self.size();
            for (std::size_t i = 0; i < n; ++i)
                self.grad[i] == 0.0 ? void() : void(a->grad[i] += self.grad[i] * dfn(a->data[i], self.data[i]));
        });
    }
    return out;
}

// axis decomposition of `shape` into (outer, axis_len, inner)
struct AxisView {
    std::size_t outer, len, inner;
};

AxisView axis_view(const Shape& shape, int axis, const char* op) {
    check(axis >= 0 && axis < static_cast<int>(shape.size()),
          std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
              shape_str(shape));
    AxisView v{1, static_cast<std::size_t>(shape[axis]), 1};
    for (int d = 0; d < axis; ++d) v.outer *= static_cast<std::size_t>(shape[d]);
    for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d)
        v.inner *= static_cast<std::size_t>(shape[d]);
    return v;
}

Shape drop_axis(const Shape& shape, int axis) {
    Shape out;
    for (int d = 0; d < static_cast<int>(shape.size()); ++d)
        if (d != axis) out.push_back(shape[d]);
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return binary(tape, a, b, BinOp::Add, "add");
}
TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return binary(tape, a, b, BinOp::Sub, "sub");
}
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    return binary(tape, a, b, BinOp::Mul, "mul");
}

TensorPtr scalar_add(Tape& tape, const TensorPtr& a, double c) {
    return unary(
        tape, a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

TensorPtr scalar_mul(Tape& tape, const TensorPtr& a, double c) {
    return unary(
        tape, a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

TensorPtr square(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

TensorPtr exp(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

TensorPtr log(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

TensorPtr sigmoid(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

TensorPtr softplus(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a,
        [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

TensorPtr relu(Tape& tape, const TensorPtr& a) {
    return unary(
        tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

TensorPtr mean(Tape& tape, const TensorPtr& a) {
    std::size_t n = a->size();
    auto out = Tensor::scalar(kernels::sum(a->data.data(), n) / static_cast<double>(n));
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, n](Tensor& self) {
            a->ensure_grad();
            double g = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) a->grad[i] += g;
        });
    }
    return out;
}

TensorPtr sum(Tape& tape, const TensorPtr& a) {
    std::size_t n = a->size();
    auto out = Tensor::scalar(kernels::sum(a->data.data(), n));
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, n](Tensor& self) {
            a->ensure_grad();
            double g = self.grad[0];
            for (std::size_t i = 0; i < n; ++i) a->grad[i] += g;
        });
    }
    return out;
}

namespace {

TensorPtr reduce_axis(Tape& tape, const TensorPtr& a, int axis, bool take_mean, const char* name) {
    AxisView v = axis_view(a->shape, axis, name);
    auto out = Tensor::zeros(drop_axis(a->shape, axis));
    double scale = take_mean ? 1.0 / static_cast<double>(v.len) : 1.0;
    const double* pa = a->data.data();
    double* po = out->data.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < v.len; ++k) acc += pa[(o * v.len + k) * v.inner + i];
            po[o * v.inner + i] = acc * scale;
        }
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, v, scale](Tensor& self) {
            a->ensure_grad();
            const double* g = self.grad.data();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double gi = g[o * v.inner + i] * scale;
                    for (std::size_t k = 0; k < v.len; ++k)
                        a->grad[(o * v.len + k) * v.inner + i] += gi;
                }
        });
    }
    return out;
}

}  // namespace

TensorPtr sum_axis(Tape& tape, const TensorPtr& a, int axis) {
    return reduce_axis(tape, a, axis, false, "sum_axis");
}

TensorPtr mean_axis(Tape& tape, const TensorPtr& a, int axis) {
    return reduce_axis(tape, a, axis, true, "mean_axis");
}

TensorPtr max_over_axis(Tape& tape, const TensorPtr& a, int axis) {
    AxisView v = axis_view(a->shape, axis, "max_over_axis");
    auto out = Tensor::zeros(drop_axis(a->shape, axis));
    auto argmax = std::make_shared<std::vector<std::size_t>>(out->size());
    const double* pa = a->data.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            std::size_t best = 0;
            double bv = pa[(o * v.len + 0) * v.inner + i];
            for (std::size_t k = 1; k < v.len; ++k) {
                double cv = pa[(o * v.len + k) * v.inner + i];
                if (cv > bv) {  // ties keep the lowest index
                    bv = cv;
                    best = k;
                }
            }
            out->data[o * v.inner + i] = bv;
            (*argmax)[o * v.inner + i] = (o * v.len + best) * v.inner + i;
        }
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, argmax](Tensor& self) {
            a->ensure_grad();
            for (std::size_t j = 0; j < self.size(); ++j) a->grad[(*argmax)[j]] += self.grad[j];
        });
    }
    return out;
}

TensorPtr softmax(Tape& tape, const TensorPtr& a, int axis) {
    AxisView v = axis_view(a->shape, axis, "softmax");
    auto out = Tensor::zeros(a->shape);
    const double* pa = a->data.data();
    double* po = out->data.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            double mx = pa[(o * v.len) * v.inner + i];
            for (std::size_t k = 1; k < v.len; ++k)
                mx = std::max(mx, pa[(o * v.len + k) * v.inner + i]);
            double z = 0.0;
            for (std::size_t k = 0; k < v.len; ++k) {
                double e = std::exp(pa[(o * v.len + k) * v.inner + i] - mx);
                po[(o * v.len + k) * v.inner + i] = e;
                z += e;
            }
            for (std::size_t k = 0; k < v.len; ++k) po[(o * v.len + k) * v.inner + i] /= z;
        }
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, v](Tensor& self) {
            a->ensure_grad();
            const double* g = self.grad.data();
            const double* y = self.data.data();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        std::size_t off = (o * v.len + k) * v.inner + i;
                        dot += g[off] * y[off];
                    }
                    for (std::size_t k = 0; k < v.len; ++k) {
                        std::size_t off = (o * v.len + k) * v.inner + i;
                        a->grad[off] += y[off] * (g[off] - dot);
                    }
                }
        });
    }
    return out;
}

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    check(a->ndim() == 2 && b->ndim() == 2 && a->shape[1] == b->shape[0],
          "matmul: incompatible shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
    int n = a->shape[0], k = a->shape[1], m = b->shape[1];
    auto out = Tensor::zeros({n, m});
    kernels::matmul(a->data.data(), b->data.data(), out->data.data(), n, k, m);
    if (wants_grad(tape, {a, b})) {
        attach(tape, out, {a, b}, [a, b, n, k, m](Tensor& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::matmul_nt(self.grad.data(), b->data.data(), a->grad.data(), n, m, k, true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kernels::matmul_tn(a->data.data(), self.grad.data(), b->grad.data(), n, k, m, true);
            }
        });
    }
    return out;
}

TensorPtr bmm(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    check(a->ndim() == 3 && b->ndim() == 3 && a->shape[0] == b->shape[0] &&
              a->shape[2] == b->shape[1],
          "bmm: incompatible shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
    int bs = a->shape[0], n = a->shape[1], k = a->shape[2], m = b->shape[2];
    auto out = Tensor::zeros({bs, n, m});
    std::size_t sa = static_cast<std::size_t>(n) * k;
    std::size_t sb = static_cast<std::size_t>(k) * m;
    std::size_t so = static_cast<std::size_t>(n) * m;
    for (int i = 0; i < bs; ++i)
        kernels::matmul(a->data.data() + i * sa, b->data.data() + i * sb,
                        out->data.data() + i * so, n, k, m);
    if (wants_grad(tape, {a, b})) {
        attach(tape, out, {a, b}, [a, b, bs, n, k, m, sa, sb, so](Tensor& self) {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int i = 0; i < bs; ++i) {
                if (a->requires_grad)
                    kernels::matmul_nt(self.grad.data() + i * so, b->data.data() + i * sb,
                                       a->grad.data() + i * sa, n, m, k, true);
                if (b->requires_grad)
                    kernels::matmul_tn(a->data.data() + i * sa, self.grad.data() + i * so,
                                       b->grad.data() + i * sb, n, k, m, true);
            }
        });
    }
    return out;
}

namespace {

TensorPtr conv1d(Tape& tape, const TensorPtr& a, const TensorPtr& w, bool same, const char* name) {
    check(a->ndim() >= 1, std::string(name) + ": input must have at least 1 axis");
    check(w->ndim() == 2, std::string(name) + ": kernel must be (filters, width), got " +
                              shape_str(w->shape));
    int li = a->shape.back();
    int f = w->shape[0], k = w->shape[1];
    int pad = same ? (k - 1) / 2 : 0;
    int lo = same ? li : li - k + 1;
    check(lo >= 1, std::string(name) + ": kernel " + shape_str(w->shape) +
                       " too long for input " + shape_str(a->shape));
    int rows = static_cast<int>(a->size()) / li;
    Shape os(a->shape.begin(), a->shape.end() - 1);
    os.push_back(f);
    os.push_back(lo);
    auto out = Tensor::zeros(os);
    kernels::conv1d_forward(a->data.data(), w->data.data(), out->data.data(), rows, li, f, k, pad,
                            lo);
    if (wants_grad(tape, {a, w})) {
        attach(tape, out, {a, w}, [a, w, rows, li, f, k, pad, lo](Tensor& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::conv1d_backward_input(self.grad.data(), w->data.data(), a->grad.data(),
                                               rows, li, f, k, pad, lo);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                kernels::conv1d_backward_weight(self.grad.data(), a->data.data(), w->grad.data(),
                                                rows, li, f, k, pad, lo);
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr conv1d_same(Tape& tape, const TensorPtr& a, const TensorPtr& w) {
    return conv1d(tape, a, w, true, "conv1d_same");
}

TensorPtr conv1d_valid(Tape& tape, const TensorPtr& a, const TensorPtr& w) {
    return conv1d(tape, a, w, false, "conv1d_valid");
}

TensorPtr avg_pool1d(Tape& tape, const TensorPtr& a, int kernel, int stride) {
    check(kernel >= 1 && stride >= 1, "avg_pool1d: kernel and stride must be positive");
    int li = a->shape.back();
    check(li >= kernel, "avg_pool1d: kernel " + std::to_string(kernel) + " exceeds input length " +
                            std::to_string(li));
    int lo = (li - kernel) / stride + 1;
    std::size_t rows = a->size() / static_cast<std::size_t>(li);
    Shape os(a->shape.begin(), a->shape.end() - 1);
    os.push_back(lo);
    auto out = Tensor::zeros(os);
    const double* pa = a->data.data();
    double* po = out->data.data();
    double inv = 1.0 / kernel;
    for (std::size_t r = 0; r < rows; ++r)
        for (int t = 0; t < lo; ++t) {
            double acc = 0.0;
            const double* src = pa + r * li + static_cast<std::size_t>(t) * stride;
            for (int j = 0; j < kernel; ++j) acc += src[j];
            po[r * lo + t] = acc * inv;
        }
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, li, lo, kernel, stride, rows, inv](Tensor& self) {
            a->ensure_grad();
            const double* g = self.grad.data();
            for (std::size_t r = 0; r < rows; ++r)
                for (int t = 0; t < lo; ++t) {
                    double gi = g[r * lo + t] * inv;
                    double* dst = a->grad.data() + r * li + static_cast<std::size_t>(t) * stride;
                    for (int j = 0; j < kernel; ++j) dst[j] += gi;
                }
        });
    }
    return out;
}

TensorPtr batchnorm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    BatchNormState& state, bool training) {
    check(x->ndim() >= 2, "batchnorm: input must be (batch, features, ...), got " +
                              shape_str(x->shape));
    int f = x->shape[1];
    check(gamma->size() == static_cast<std::size_t>(f) && beta->size() == static_cast<std::size_t>(f),
          "batchnorm: affine shapes " + shape_str(gamma->shape) + "/" + shape_str(beta->shape) +
              " do not match feature count " + std::to_string(f));
    check(state.running_mean.size() == static_cast<std::size_t>(f),
          "batchnorm: state feature count mismatch");
    std::size_t b = static_cast<std::size_t>(x->shape[0]);
    std::size_t inner = x->size() / (b * static_cast<std::size_t>(f));
    std::size_t n = b * inner;

    auto mean_v = std::make_shared<std::vector<double>>(f, 0.0);
    auto invstd_v = std::make_shared<std::vector<double>>(f, 0.0);
    const double* px = x->data.data();

    if (training) {
        for (int fi = 0; fi < f; ++fi) {
            double acc = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
                const double* src = px + (bi * f + fi) * inner;
                for (std::size_t i = 0; i < inner; ++i) acc += src[i];
            }
            double mu = acc / static_cast<double>(n);
            double var = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
                const double* src = px + (bi * f + fi) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    double d = src[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(n);
            (*mean_v)[fi] = mu;
            (*invstd_v)[fi] = 1.0 / std::sqrt(var + state.eps);
            state.running_mean[fi] = state.momentum * state.running_mean[fi] + (1.0 - state.momentum) * mu;
            state.running_var[fi] = state.momentum * state.running_var[fi] + (1.0 - state.momentum) * var;
        }
        state.initialized = true;
    } else {
        for (int fi = 0; fi < f; ++fi) {
            (*mean_v)[fi] = state.running_mean[fi];
            (*invstd_v)[fi] = 1.0 / std::sqrt(state.running_var[fi] + state.eps);
        }
    }

    auto out = Tensor::zeros(x->shape);
    double* po = out->data.data();
    const double* pg = gamma->data.data();
    const double* pb = beta->data.data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (int fi = 0; fi < f; ++fi) {
            const double* src = px + (bi * f + fi) * inner;
            double* dst = po + (bi * f + fi) * inner;
            double mu = (*mean_v)[fi], is = (*invstd_v)[fi], ga = pg[fi], be = pb[fi];
            for (std::size_t i = 0; i < inner; ++i) dst[i] = ga * (src[i] - mu) * is + be;
        }

    if (wants_grad(tape, {x, gamma, beta})) {
        attach(tape, out, {x, gamma, beta},
               [x, gamma, beta, mean_v, invstd_v, b, f, inner, n, training](Tensor& self) {
                   const double* g = self.grad.data();
                   const double* px = x->data.data();
                   const double* pg = gamma->data.data();
                   if (x->requires_grad) x->ensure_grad();
                   if (gamma->requires_grad) gamma->ensure_grad();
                   if (beta->requires_grad) beta->ensure_grad();
                   for (int fi = 0; fi < f; ++fi) {
                       double mu = (*mean_v)[fi], is = (*invstd_v)[fi];
                       double sum_g = 0.0, sum_gx = 0.0;
                       for (std::size_t bi = 0; bi < b; ++bi) {
                           const double* gs = g + (bi * f + fi) * inner;
                           const double* xs = px + (bi * f + fi) * inner;
                           for (std::size_t i = 0; i < inner; ++i) {
                               sum_g += gs[i];
                               sum_gx += gs[i] * (xs[i] - mu) * is;
                           }
                       }
                       if (gamma->requires_grad) gamma->grad[fi] += sum_gx;
                       if (beta->requires_grad) beta->grad[fi] += sum_g;
                       if (!x->requires_grad) continue;
                       double ga = pg[fi];
                       if (training) {
                           double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t bi = 0; bi < b; ++bi) {
                               const double* gs = g + (bi * f + fi) * inner;
                               const double* xs = px + (bi * f + fi) * inner;
                               double* gx = x->grad.data() + (bi * f + fi) * inner;
                               for (std::size_t i = 0; i < inner; ++i) {
                                   double xhat = (xs[i] - mu) * is;
                                   gx[i] += ga * is * (gs[i] - inv_n * sum_g - inv_n * xhat * sum_gx);
                               }
                           }
                       } else {
                           for (std::size_t bi = 0; bi < b; ++bi) {
                               const double* gs = g + (bi * f + fi) * inner;
                               double* gx = x->grad.data() + (bi * f + fi) * inner;
                               for (std::size_t i = 0; i < inner; ++i) gx[i] += ga * is * gs[i];
                           }
                       }
                   }
               });
    }
    return out;
}

TensorPtr dropout(Tape& tape, const TensorPtr& a, double p, Rng& rng, bool training) {
    check(p >= 0.0 && p <= 1.0, "dropout: p must lie in [0,1]");
    if (!training || p == 0.0) return a;
    auto mask = std::make_shared<std::vector<double>>(a->size(), 0.0);
    double scale = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
    for (std::size_t i = 0; i < a->size(); ++i)
        (*mask)[i] = (rng.uniform() >= p) ? scale : 0.0;
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * (*mask)[i];
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a, mask](Tensor& self) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i)
                a->grad[i] += self.grad[i] * (*mask)[i];
        });
    }
    return out;
}

TensorPtr reshape(Tape& tape, const TensorPtr& a, Shape shape) {
    check(numel(shape) == a->size(), "reshape: cannot view " + shape_str(a->shape) + " as " +
                                         shape_str(shape));
    auto out = Tensor::from_vec(std::move(shape), a->data);
    if (wants_grad(tape, {a})) {
        attach(tape, out, {a}, [a](Tensor& self) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i) a->grad[i] += self.grad[i];
        });
    }
    return out;
}

TensorPtr transpose(Tape& tape, const TensorPtr& a, std::vector<int> perm) {
    int nd = a->ndim();
    check(static_cast<int>(perm.size()) == nd, "transpose: perm rank mismatch for " +
                                                   shape_str(a->shape));
    std::vector<bool> seen(nd, false);
    for (int p : perm) {
        check(p >= 0 && p < nd && !seen[p], "transpose: invalid permutation");
        seen[p] = true;
    }
    Shape os(nd);
    for (int d = 0; d < nd; ++d) os[d] = a->shape[perm[d]];
    // out strides mapped onto input axis order
    std::vector<ptrdiff_t> ost(nd);
    ptrdiff_t s = 1;
    for (int d = nd - 1; d >= 0; --d) {
        ost[d] = s;
        s *= os[d];
    }
    std::vector<ptrdiff_t> map(nd, 0);  // stride of input axis e in the output layout
    for (int d = 0; d < nd; ++d) map[perm[d]] = ost[d];
    auto out = Tensor::zeros(os);
    const double* pa = a->data.data();
    double* po = out->data.data();
    strided_walk(a->shape, map, [&](std::size_t in_off, std::size_t out_off) {
        po[out_off] = pa[in_off];
    });
    if (wants_grad(tape, {a})) {
        auto in_shape = a->shape;
        attach(tape, out, {a}, [a, in_shape, map](Tensor& self) {
            a->ensure_grad();
            const double* g = self.grad.data();
            strided_walk(in_shape, map, [&](std::size_t in_off, std::size_t out_off) {
                a->grad[in_off] += g[out_off];
            });
        });
    }
    return out;
}

TensorPtr concat(Tape& tape, const std::vector<TensorPtr>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& ref = parts[0]->shape;
    check(axis >= 0 && axis < static_cast<int>(ref.size()), "concat: axis out of range");
    int total = 0;
    for (const auto& p : parts) {
        check(p->ndim() == static_cast<int>(ref.size()), "concat: rank mismatch");
        for (int d = 0; d < p->ndim(); ++d)
            check(d == axis || p->shape[d] == ref[d],
                  "concat: shapes " + shape_str(ref) + " and " + shape_str(p->shape) +
                      " differ off-axis");
        total += p->shape[axis];
    }
    Shape os = ref;
    os[axis] = total;
    AxisView v = axis_view(os, axis, "concat");
    auto out = Tensor::zeros(os);
    std::vector<std::size_t> offsets;  // start of each part along the axis
    {
        std::size_t at = 0;
        for (const auto& p : parts) {
            offsets.push_back(at);
            at += static_cast<std::size_t>(p->shape[axis]);
        }
    }
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& p = parts[pi];
        std::size_t plen = static_cast<std::size_t>(p->shape[axis]);
        const double* src = p->data.data();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t k = 0; k < plen; ++k)
                std::copy_n(src + (o * plen + k) * v.inner, v.inner,
                            out->data.data() + (o * v.len + offsets[pi] + k) * v.inner);
    }
    bool rec = tape.grad_enabled;
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (rec && any) {
        std::vector<TensorPtr> ps = parts;
        attach(tape, out, ps, [ps, v, offsets](Tensor& self) {
            const double* g = self.grad.data();
            for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                if (!ps[pi]->requires_grad) continue;
                ps[pi]->ensure_grad();
                std::size_t plen = static_cast<std::size_t>(ps[pi]->shape[v.len ? 0 : 0]);
                plen = static_cast<std::size_t>(ps[pi]->size() / (v.outer * v.inner));
                for (std::size_t o = 0; o < v.outer; ++o)
                    for (std::size_t k = 0; k < plen; ++k) {
                        const double* gs = g + (o * v.len + offsets[pi] + k) * v.inner;
                        double* gd = ps[pi]->grad.data() + (o * plen + k) * v.inner;
                        for (std::size_t i = 0; i < v.inner; ++i) gd[i] += gs[i];
                    }
            }
        });
    }
    return out;
}

TensorPtr straight_through(Tape& tape, const TensorPtr& continuous, const TensorPtr& discrete) {
    check(continuous->shape == discrete->shape,
          "straight_through: shapes " + shape_str(continuous->shape) + " and " +
              shape_str(discrete->shape) + " differ");
    auto out = Tensor::from_vec(discrete->shape, discrete->data);
    if (wants_grad(tape, {continuous})) {
        attach(tape, out, {continuous}, [continuous](Tensor& self) {
            continuous->ensure_grad();
            for (std::size_t i = 0; i < self.size(); ++i)
                continuous->grad[i] += self.grad[i];
        });
    }
    return out;
}

TensorPtr one_hot(const std::vector<int>& labels, int classes) {
    auto t = Tensor::zeros({static_cast<int>(labels.size()), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        check(labels[i] >= 0 && labels[i] < classes, "one_hot: label out of range");
        t->data[i * classes + labels[i]] = 1.0;
    }
    return t;
}

TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels) {
    check(logits->ndim() == 2, "cross_entropy: logits must be (batch, classes), got " +
                                   shape_str(logits->shape));
    int b = logits->shape[0], c = logits->shape[1];
    check(static_cast<int>(labels.size()) == b, "cross_entropy: label count mismatch");
    auto mx = reshape(tape, max_over_axis(tape, logits, 1), {b, 1});
    auto shifted = sub(tape, logits, mx);
    auto lse = reshape(tape, log(tape, sum_axis(tape, exp(tape, shifted), 1)), {b, 1});
    auto logp = sub(tape, shifted, lse);
    auto picked = sum_axis(tape, mul(tape, logp, one_hot(labels, c)), 1);
    return scalar_mul(tape, mean(tape, picked), -1.0);
}

TensorPtr bce_with_logits(Tape& tape, const TensorPtr& scores, const TensorPtr& targets) {
    check(scores->shape == targets->shape, "bce_with_logits: shapes " + shape_str(scores->shape) +
                                               " and " + shape_str(targets->shape) + " differ");
    return mean(tape, sub(tape, softplus(tape, scores), mul(tape, targets, scores)));
}

}  // namespace ops

}  // namespace dynsel
