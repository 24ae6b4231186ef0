#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedskel {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into the grads of `inputs`.
    std::function<void(Node&)> backward;

    float* grad_buffer();  // allocates zeroed storage on first use
};

}  // namespace detail

/// Dense row-major float32 tensor handle. Copies share storage; use clone() for
/// an independent value.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor from(Shape shape, std::vector<float> values);
    static Tensor scalar(float value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t dim(size_t axis) const;
    size_t rank() const { return shape().size(); }
    int64_t numel() const;

    std::span<const float> data() const;
    // In-place writes are reserved for optimizer steps, aggregation and
    // broadcast; values recorded on a live tape must not be mutated.
    std::span<float> mutable_data() const;
    float item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad() const;  // allocates on first use
    void zero_grad() const;
    void drop_grad() const;

    /// Same values, no tape history, no gradient participation.
    Tensor detach() const;
    /// Independent deep copy of values; keeps requires_grad, drops grad.
    Tensor clone() const;
    /// Overwrite values from another tensor of identical shape.
    void copy_from(const Tensor& other) const;

    const void* id() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Ordered record of differentiable operations executed on the current thread.
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep walks the record in reverse and visits each node once.
class GradTape {
public:
    static GradTape& current();

    void record(std::shared_ptr<detail::Node> node);
    void clear();
    size_t size() const { return nodes_.size(); }

    /// Accumulates d(loss)/d(leaf) into every requires_grad leaf.
    void backward(const Tensor& loss);

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool enabled();

private:
    bool previous_;
};

void backward(const Tensor& loss);

// ---- core operations ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

enum class ElementwiseOp { Add, Sub, Mul, Hadamard, Relu, Scale };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor hadamard(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, float factor);
/// Multiplies every element of x by the single element of `factor`.
Tensor scale_by(const Tensor& x, const Tensor& factor);
/// Dispatcher over the pointwise family. `b` is ignored for unary ops and
/// `factor` is only read by Scale.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = {}, float factor = 1.0f);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Slice along the leading axis.
Tensor select(const Tensor& x, int64_t index);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// ---- network operations ---------------------------------------------------

/// x: [N, C_in, T, V] (or [C_in, T, V]); kernel: [C_out, C_in, k_t], k_t odd.
/// Symmetric zero padding; output T' = ceil(T / stride).
Tensor temporal_conv1d(const Tensor& x, const Tensor& kernel, int stride);

struct BatchNormState {
    Tensor scale;         // [C], learnable
    Tensor shift;         // [C], learnable
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]

    static BatchNormState create(int64_t channels);
    int64_t channels() const { return scale.numel(); }
};

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

/// x: [N, C, T, V]. In training mode statistics come from the batch and, when
/// `update_running` is set, the running estimates are blended in place.
Tensor batchnorm(const Tensor& x, const BatchNormState& state, bool training, bool update_running = true);

/// x: [N, C, T, V], adjacency: [S, V, V] -> [N, S*C, T, V] where output channel
/// s*C + c holds x[:, c] right-multiplied by adjacency[s].
Tensor adjacency_apply(const Tensor& x, const Tensor& adjacency);
/// z: [N, Cz, T, V], weight: [C_out, ...] with Cz trailing elements per row.
Tensor channel_mix(const Tensor& z, const Tensor& weight);
/// [N, C, T, V] -> [N, C]
Tensor global_avg_pool(const Tensor& x);
/// x: [N, d], weight: [out, d], bias: [out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Batch-mean cross entropy of row logits against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Batch-mean KL(softmax(teacher/T) || softmax(student/T)). The teacher side
/// is treated as a constant target.
Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits, float temperature = 1.0f);

}  // namespace fedskel
