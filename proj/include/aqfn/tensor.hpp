#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every op records its inputs and a backprop closure on the result node, so
// each forward pass builds a fresh acyclic tape. backward(loss) runs one
// gradient flow of 1.0 from a scalar loss through the tape and accumulates
// the flow into the .grad buffer of every requires_grad node it reaches;
// calling backward twice without zero_grad therefore doubles the grads.
//
// Two global precision modes:
//   standard32 - results of every op (and freshly created tensors) are
//                rounded to float32; matches the 32-bit training pipeline
//                and makes checkpointed parameters exactly representable.
//   high64     - full double precision end to end, used for gradient checks.
// Gradients always accumulate in double.
//
// Broadcast rule: add/sub/mul accept equal shapes, or one operand whose
// shape equals the other's with the leading (batch) extent dropped; that
// operand is repeated across the batch. No other broadcasting exists.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aqfn/errors.hpp"
#include "aqfn/rng.hpp"

namespace aqfn {

enum class Precision { standard32, high64 };

Precision precision();
void set_precision(Precision p);

// Restores the previous mode on scope exit.
struct PrecisionScope {
    explicit PrecisionScope(Precision p) : prev_(precision()) { set_precision(p); }
    ~PrecisionScope() { set_precision(prev_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    Precision prev_;
};

enum class Mode { train, eval };

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // allocated when backward first reaches this node

    // Tape edges, populated only when the result requires grad.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backprop; // reads this->flow, adds into parents' flow
    std::vector<double> flow;              // transient per-backward-pass buffer

    std::size_t numel() const { return data.size(); }

    double value() const; // scalar (numel == 1) tensors only

    void zero_grad();

    // Accumulates g into this node's flow buffer (backprop helper).
    void add_flow(std::size_t offset, double g) { flow[offset] += g; }
};

std::string shape_str(const std::vector<int>& shape);

TensorPtr tensor(std::vector<double> data, std::vector<int> shape, bool requires_grad = false);
TensorPtr tensor(std::vector<double> values); // 1-D constant
TensorPtr scalar(double v, bool requires_grad = false);
TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
TensorPtr full(std::vector<int> shape, double v, bool requires_grad = false);

// a[m,k] * b[k,n] -> [m,n]
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

// Cross-correlation with zero padding, square kernel, no bias.
// x: [C_in,H,W] or [B,C_in,H,W]; w: [C_out,C_in,k,k].
// Output extent: floor((H + 2*pad - k) / stride) + 1.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad);

// Per-channel convolution (groups == channels). w: [C,k,k].
TensorPtr depthwise_conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad);

TensorPtr relu(const TensorPtr& x);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double c);

// Reductions over all elements; result is a [1] scalar tensor.
TensorPtr mean(const TensorPtr& x);
TensorPtr sum(const TensorPtr& x);
TensorPtr mse(const TensorPtr& a, const TensorPtr& b);

TensorPtr concat(const TensorPtr& a, const TensorPtr& b, int axis);

// [C,H,W] -> [C] or [B,C,H,W] -> [B,C].
TensorPtr global_avg_pool(const TensorPtr& x);

// Softmax along the last axis; shift-invariant by construction.
TensorPtr softmax_stable(const TensorPtr& x);

// Inverted dropout: train mode keeps units with probability 1-rate and
// scales them by 1/(1-rate); eval mode (or rate == 0) is the identity.
TensorPtr dropout(const TensorPtr& x, double rate, Mode mode, Rng& rng);

TensorPtr reshape(const TensorPtr& x, std::vector<int> shape);

// Runs one gradient flow from a scalar loss; see file header for semantics.
void backward(const TensorPtr& loss);

} // namespace aqfn
