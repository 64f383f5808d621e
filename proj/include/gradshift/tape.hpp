#pragma once

#include <cstdint>
#include <vector>

#include "gradshift/tensor.hpp"

namespace gradshift {

// Primitive set: what the backbone/decoder/heads and the attack objectives
// need, nothing more.
enum class OpKind : uint8_t {
    kLeaf,
    kConv2d,
    kRelu,
    kMaxPool2x2,
    kGlobalAvgPool,
    kDense,
    kSoftmax,
    kSigmoid,
    kUpsample2x2,
    kBatchNorm,
    kAdd,
    kMul,
    kSum,
    kPick,
    kScale,
    kCrossEntropy,
    kBinaryCrossEntropy,
    kChannelWeightedSum,
};

const char* op_name(OpKind kind);

enum class UpsampleMode : uint8_t { kNearest, kBilinear };

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    int index = 0;            // pick: class index
    double scalar = 0.0;      // scale: constant factor
    double eps = 0.0;         // batchnorm
    UpsampleMode mode = UpsampleMode::kNearest;
    Tensor c0, c1;            // node-owned constants (bn mean/var, channel weights)
    std::vector<int> iaux;    // maxpool argmax cache
};

// One recorded forward operation. Gradient slot has the output's shape and
// starts at zero; backward() fills it for every node reachable from the loss.
struct TapeNode {
    OpKind kind = OpKind::kLeaf;
    std::vector<int> parents;
    Tensor output;
    Tensor grad;
    OpAttrs attrs;
    bool needs_grad = false;
};

// Single-owner recording of a forward computation. Acyclic by construction:
// parents always precede children, so one reverse sweep visits each node
// exactly once. Not shareable between threads; run independent tapes
// concurrently instead.
class Tape {
public:
    using NodeId = int;

    NodeId leaf(Tensor value, bool needs_grad = false);

    // x:[H,W,Ci] (*) w:[KH,KW,Ci,Co] + b:[Co] -> [OH,OW,Co], zero padding.
    NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride = 1, int pad = 0);
    NodeId relu(NodeId x);
    NodeId maxpool2x2(NodeId x);                      // [H,W,C] -> [H/2,W/2,C]
    NodeId global_avg_pool(NodeId x);                 // [H,W,C] -> [C]
    NodeId dense(NodeId x, NodeId w, NodeId b);       // [In] x [In,Out] + [Out] -> [Out]
    NodeId softmax(NodeId logits);                    // [C] -> [C]
    NodeId sigmoid(NodeId x);
    NodeId upsample2x2(NodeId x, UpsampleMode mode = UpsampleMode::kNearest);
    // Inference-style normalization: mean/var enter as constants, gradients
    // flow through x, scale and shift only.
    NodeId batchnorm(NodeId x, NodeId scale, NodeId shift, Tensor mean, Tensor var,
                     double eps = 1e-5);
    NodeId add(NodeId a, NodeId b);                   // same shape, or one scalar
    NodeId mul(NodeId a, NodeId b);                   // same shape, or one scalar
    NodeId sum(NodeId x);                             // -> [1]
    NodeId pick(NodeId x, int index);                 // [C] -> [1]
    NodeId scale(NodeId x, double factor);            // constant factor
    NodeId cross_entropy(NodeId probs, NodeId one_hot);          // -> [1], clamped
    NodeId binary_cross_entropy(NodeId pred, NodeId target);     // mean, -> [1], clamped
    NodeId channel_weighted_sum(NodeId x, Tensor weights);       // [H,W,C] . [C] -> [H,W]

    // Reverse-mode sweep from a scalar loss. Every node reachable from the
    // loss ends with grad = d(loss)/d(node); unreachable nodes keep zero.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].output; }
    const Tensor& grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }
    const TapeNode& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    // Probability clamp used inside both cross-entropies to avoid log(0).
    static constexpr double kProbClamp = 1e-7;

private:
    NodeId push(OpKind kind, std::vector<int> parents, Tensor output, OpAttrs attrs = {});
    void backward_node(int id);

    std::vector<TapeNode> nodes_;
};

// Convenience: one-hot row vector for a class label.
Tensor one_hot(int index, int num_classes);

} // namespace gradshift
