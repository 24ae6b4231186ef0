#include "fedskel/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedskel/errors.hpp"
#include "tensor_internal.hpp"

namespace fedskel {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

float* Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad.data();
}

namespace {
thread_local bool t_no_grad = false;
}  // namespace

bool grad_enabled() { return !t_no_grad; }

Tensor make_result(Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled()) {
        for (const Tensor* in : inputs) {
            if (in && in->defined() && in->requires_grad()) needs = true;
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* in : inputs) {
            if (in && in->defined()) node->inputs.push_back(in->node());
        }
        node->backward = std::move(backward);
        GradTape::current().record(node);
    }
    return Tensor(std::move(node));
}

float* grad_of(const Node* input) {
    if (!input || !input->requires_grad) return nullptr;
    return const_cast<Node*>(input)->grad_buffer();
}

}  // namespace detail

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->value.assign(static_cast<size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

int64_t Tensor::dim(size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
    }
    return node_->shape[axis];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_->value.size()); }

std::span<const float> Tensor::data() const { return node_->value; }
std::span<float> Tensor::mutable_data() const { return node_->value; }

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }
std::span<float> Tensor::mutable_grad() const {
    node_->grad_buffer();
    return node_->grad;
}
void Tensor::zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}
void Tensor::drop_grad() const { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor Tensor::clone() const {
    Tensor t = from(shape(), node_->value);
    t.set_requires_grad(requires_grad());
    return t;
}

void Tensor::copy_from(const Tensor& other) const {
    if (other.shape() != shape()) {
        throw DimensionError("copy_from shape mismatch " + shape_str(other.shape()) + " vs " + shape_str(shape()));
    }
    std::copy(other.node_->value.begin(), other.node_->value.end(), node_->value.begin());
}

// ---- tape -----------------------------------------------------------------

GradTape& GradTape::current() {
    thread_local GradTape tape;
    return tape;
}

void GradTape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

void GradTape::clear() { nodes_.clear(); }

void GradTape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward() needs a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
    }
    if (!loss.requires_grad()) return;
    auto* root = loss.node().get();
    // Intermediate gradients are rebuilt on every sweep; only leaves accumulate.
    for (auto& n : nodes_) n->grad.clear();
    root->grad.assign(1, 1.0f);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        detail::Node& n = **it;
        if (n.grad.empty() || !n.backward) continue;
        n.backward(n);
    }
}

NoGradGuard::NoGradGuard() : previous_(detail::t_no_grad) { detail::t_no_grad = true; }
NoGradGuard::~NoGradGuard() { detail::t_no_grad = previous_; }
bool NoGradGuard::enabled() { return detail::t_no_grad; }

void backward(const Tensor& loss) { GradTape::current().backward(loss); }

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m * n));
    MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
    auto* an = a.node().get();
    auto* bn = b.node().get();
    return detail::make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](detail::Node& self) {
        CMapR dc(self.grad.data(), m, n);
        if (float* ga = detail::grad_of(an)) {
            MapR(ga, m, k).noalias() += dc * CMapR(bn->value.data(), k, n).transpose();
        }
        if (float* gb = detail::grad_of(bn)) {
            MapR(gb, k, n).noalias() += CMapR(an->value.data(), m, k).transpose() * dc;
        }
    });
}

// ---- pointwise ------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch: " + (a.defined() ? shape_str(a.shape()) : "?") +
                             " vs " + (b.defined() ? shape_str(b.shape()) : "?"));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
    auto* an = a.node().get();
    auto* bn = b.node().get();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, n](detail::Node& self) {
        if (float* g = detail::grad_of(an)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (float* g = detail::grad_of(bn)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
    auto* an = a.node().get();
    auto* bn = b.node().get();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, n](detail::Node& self) {
        if (float* g = detail::grad_of(an)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (float* g = detail::grad_of(bn)) {
            for (size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    auto av = a.data(), bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
    auto* an = a.node().get();
    auto* bn = b.node().get();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, n](detail::Node& self) {
        if (float* g = detail::grad_of(an)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (float* g = detail::grad_of(bn)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

Tensor relu(const Tensor& x) {
    const size_t n = static_cast<size_t>(x.numel());
    std::vector<float> out(n);
    auto xv = x.data();
    for (size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
    auto* xn = x.node().get();
    return detail::make_result(x.shape(), std::move(out), {&x}, [xn, n](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            // subgradient at exactly zero is zero
            for (size_t i = 0; i < n; ++i) {
                if (xn->value[i] > 0.0f) g[i] += self.grad[i];
            }
        }
    });
}

Tensor scale(const Tensor& x, float factor) {
    const size_t n = static_cast<size_t>(x.numel());
    std::vector<float> out(n);
    auto xv = x.data();
    for (size_t i = 0; i < n; ++i) out[i] = xv[i] * factor;
    auto* xn = x.node().get();
    return detail::make_result(x.shape(), std::move(out), {&x}, [xn, n, factor](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i] * factor;
        }
    });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
    if (!factor.defined() || factor.numel() != 1) {
        throw DimensionError("scale_by expects a single-element factor, got " +
                             (factor.defined() ? shape_str(factor.shape()) : std::string("?")));
    }
    const size_t n = static_cast<size_t>(x.numel());
    const float f = factor.data()[0];
    std::vector<float> out(n);
    auto xv = x.data();
    for (size_t i = 0; i < n; ++i) out[i] = xv[i] * f;
    auto* xn = x.node().get();
    auto* fn = factor.node().get();
    return detail::make_result(x.shape(), std::move(out), {&x, &factor}, [xn, fn, n](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            const float f = fn->value[0];
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i] * f;
        }
        if (float* g = detail::grad_of(fn)) {
            float acc = 0.0f;
            for (size_t i = 0; i < n; ++i) acc += self.grad[i] * xn->value[i];
            g[0] += acc;
        }
    });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b, float factor) {
    switch (op) {
        case ElementwiseOp::Add: return add(a, b);
        case ElementwiseOp::Sub: return sub(a, b);
        case ElementwiseOp::Mul:
        case ElementwiseOp::Hadamard: return mul(a, b);
        case ElementwiseOp::Relu: return relu(a);
        case ElementwiseOp::Scale: return scale(a, factor);
    }
    throw UsageError("unknown elementwise op");
}

// ---- reductions and views -------------------------------------------------

Tensor sum(const Tensor& x) {
    float acc = 0.0f;
    for (float v : x.data()) acc += v;
    auto* xn = x.node().get();
    const size_t n = static_cast<size_t>(x.numel());
    return detail::make_result({}, {acc}, {&x}, [xn, n](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            const float d = self.grad[0];
            for (size_t i = 0; i < n; ++i) g[i] += d;
        }
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor select(const Tensor& x, int64_t index) {
    if (x.rank() == 0 || index < 0 || index >= x.dim(0)) {
        throw DimensionError("select index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
    }
    Shape tail(x.shape().begin() + 1, x.shape().end());
    const int64_t block = shape_numel(tail);
    auto xv = x.data();
    std::vector<float> out(xv.begin() + index * block, xv.begin() + (index + 1) * block);
    auto* xn = x.node().get();
    return detail::make_result(std::move(tail), std::move(out), {&x}, [xn, index, block](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            float* dst = g + index * block;
            for (int64_t i = 0; i < block; ++i) dst[i] += self.grad[static_cast<size_t>(i)];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<float> out(x.data().begin(), x.data().end());
    auto* xn = x.node().get();
    const size_t n = out.size();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xn, n](detail::Node& self) {
        if (float* g = detail::grad_of(xn)) {
            for (size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
    });
}

// ---- softmax --------------------------------------------------------------

namespace {

void require_rows(const Tensor& x, const char* op) {
    if (x.rank() != 2 || x.dim(1) < 1) {
        throw DimensionError(std::string(op) + " expects [n x c] input, got " + shape_str(x.shape()));
    }
}

}  // namespace

void detail::softmax_row(const float* in, float* out, int64_t c, float inv_temperature) {
    float mx = in[0] * inv_temperature;
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, in[j] * inv_temperature);
    float z = 0.0f;
    for (int64_t j = 0; j < c; ++j) {
        out[j] = std::exp(in[j] * inv_temperature - mx);
        z += out[j];
    }
    for (int64_t j = 0; j < c; ++j) out[j] /= z;
}

void detail::log_softmax_row(const float* in, float* out, int64_t c, float inv_temperature) {
    float mx = in[0] * inv_temperature;
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, in[j] * inv_temperature);
    float z = 0.0f;
    for (int64_t j = 0; j < c; ++j) z += std::exp(in[j] * inv_temperature - mx);
    const float lz = std::log(z) + mx;
    for (int64_t j = 0; j < c; ++j) out[j] = in[j] * inv_temperature - lz;
}

Tensor softmax_rows(const Tensor& x) {
    require_rows(x, "softmax_rows");
    const int64_t n = x.dim(0), c = x.dim(1);
    std::vector<float> out(static_cast<size_t>(n * c));
    for (int64_t i = 0; i < n; ++i) detail::softmax_row(x.data().data() + i * c, out.data() + i * c, c, 1.0f);
    auto* xn = x.node().get();
    return detail::make_result(x.shape(), std::move(out), {&x}, [xn, n, c](detail::Node& self) {
            float* g = detail::grad_of(xn);
            if (!g) return;
            for (int64_t i = 0; i < n; ++i) {
                const float* y = self.value.data() + i * c;
                const float* dy = self.grad.data() + i * c;
                float dot = 0.0f;
                for (int64_t j = 0; j < c; ++j) dot += dy[j] * y[j];
                for (int64_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (dy[j] - dot);
            }
        });
}

Tensor log_softmax_rows(const Tensor& x) {
    require_rows(x, "log_softmax_rows");
    const int64_t n = x.dim(0), c = x.dim(1);
    std::vector<float> out(static_cast<size_t>(n * c));
    for (int64_t i = 0; i < n; ++i) detail::log_softmax_row(x.data().data() + i * c, out.data() + i * c, c, 1.0f);
    auto* xn = x.node().get();
    return detail::make_result(x.shape(), std::move(out), {&x}, [xn, n, c](detail::Node& self) {
            float* g = detail::grad_of(xn);
            if (!g) return;
            for (int64_t i = 0; i < n; ++i) {
                const float* ly = self.value.data() + i * c;
                const float* dy = self.grad.data() + i * c;
                float total = 0.0f;
                for (int64_t j = 0; j < c; ++j) total += dy[j];
                for (int64_t j = 0; j < c; ++j) g[i * c + j] += dy[j] - std::exp(ly[j]) * total;
            }
        });
}

}  // namespace fedskel
