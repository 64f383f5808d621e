#include "gradshift/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gemm.hpp"
#include "gradshift/error.hpp"

namespace gradshift {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::kLeaf: return "leaf";
        case OpKind::kConv2d: return "conv2d";
        case OpKind::kRelu: return "relu";
        case OpKind::kMaxPool2x2: return "maxpool2x2";
        case OpKind::kGlobalAvgPool: return "global_avg_pool";
        case OpKind::kDense: return "dense";
        case OpKind::kSoftmax: return "softmax";
        case OpKind::kSigmoid: return "sigmoid";
        case OpKind::kUpsample2x2: return "upsample2x2";
        case OpKind::kBatchNorm: return "batchnorm";
        case OpKind::kAdd: return "add";
        case OpKind::kMul: return "mul";
        case OpKind::kSum: return "sum";
        case OpKind::kPick: return "pick";
        case OpKind::kScale: return "scale";
        case OpKind::kCrossEntropy: return "cross_entropy";
        case OpKind::kBinaryCrossEntropy: return "binary_cross_entropy";
        case OpKind::kChannelWeightedSum: return "channel_weighted_sum";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw InvalidArgument(std::string(op) + ": " + detail);
}

void require_rank(const char* op, const Tensor& t, int rank, const char* role) {
    if (t.rank() != rank)
        shape_error(op, std::string(role) + " must have rank " + std::to_string(rank) +
                            ", got shape " + t.shape_str());
}

// Unpacks x:[H,W,C] padded patches into col:[OH*OW, KH*KW*C] (zero fill
// outside the image). Column index (kh*KW+kw)*C+ci matches the row-major
// flattening of a [KH,KW,Ci,Co] kernel.
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow,
            std::vector<double>& col) {
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const long kc = static_cast<long>(kh) * kw * c;
    col.assign(static_cast<size_t>(oh) * ow * kc, 0.0);
    const double* xd = x.data();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* row = col.data() + (static_cast<long>(oy) * ow + ox) * kc;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) continue;
                    const double* src = xd + (static_cast<long>(iy) * w + ix) * c;
                    double* dst = row + (static_cast<long>(ky) * kw + kx) * c;
                    std::copy(src, src + c, dst);
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds col-shaped gradients back into the image.
void col2im_add(const std::vector<double>& col, int kh, int kw, int stride, int pad, int oh,
                int ow, Tensor& dx) {
    const int h = dx.dim(0), w = dx.dim(1), c = dx.dim(2);
    const long kc = static_cast<long>(kh) * kw * c;
    double* xd = dx.data();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const double* row = col.data() + (static_cast<long>(oy) * ow + ox) * kc;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) continue;
                    double* dst = xd + (static_cast<long>(iy) * w + ix) * c;
                    const double* src = row + (static_cast<long>(ky) * kw + kx) * c;
                    for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                }
            }
        }
    }
}

// Source taps for 2x upsampling along one axis, align-corners-false
// convention with edge clamping.
struct Tap {
    int i0, i1;
    double w0, w1;
};

Tap bilinear_tap(int dst, int src_len) {
    const double s = (dst + 0.5) * 0.5 - 0.5;
    int i0 = static_cast<int>(std::floor(s));
    const double t = s - i0;
    int i1 = i0 + 1;
    i0 = std::clamp(i0, 0, src_len - 1);
    i1 = std::clamp(i1, 0, src_len - 1);
    return {i0, i1, 1.0 - t, t};
}

double clamp_prob(double p) {
    return std::clamp(p, Tape::kProbClamp, 1.0 - Tape::kProbClamp);
}

bool prob_in_clamp_range(double p) {
    return p > Tape::kProbClamp && p < 1.0 - Tape::kProbClamp;
}

} // namespace

Tensor one_hot(int index, int num_classes) {
    if (index < 0 || index >= num_classes)
        throw InvalidArgument("one_hot: index " + std::to_string(index) + " out of range [0," +
                              std::to_string(num_classes) + ")");
    Tensor t = Tensor::zeros({num_classes});
    t[index] = 1.0;
    return t;
}

Tape::NodeId Tape::push(OpKind kind, std::vector<int> parents, Tensor output, OpAttrs attrs) {
    TapeNode n;
    n.kind = kind;
    n.parents = std::move(parents);
    n.grad = Tensor::zeros(output.shape());
    n.output = std::move(output);
    n.attrs = std::move(attrs);
    for (int p : n.parents)
        if (nodes_[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::leaf(Tensor value, bool needs_grad) {
    TapeNode n;
    n.kind = OpKind::kLeaf;
    n.grad = Tensor::zeros(value.shape());
    n.output = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    require_rank("conv2d", xv, 3, "input");
    require_rank("conv2d", wv, 4, "kernel");
    require_rank("conv2d", bv, 1, "bias");
    if (stride < 1) shape_error("conv2d", "stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) shape_error("conv2d", "padding must be >= 0, got " + std::to_string(pad));
    const int h = xv.dim(0), iw = xv.dim(1), ci = xv.dim(2);
    const int kh = wv.dim(0), kw = wv.dim(1), kci = wv.dim(2), co = wv.dim(3);
    if (ci != kci)
        shape_error("conv2d", "input channels " + std::to_string(ci) + " != kernel channels " +
                                  std::to_string(kci));
    if (bv.dim(0) != co)
        shape_error("conv2d", "bias size " + std::to_string(bv.dim(0)) +
                                  " != output channels " + std::to_string(co));
    if (h + 2 * pad < kh || iw + 2 * pad < kw)
        shape_error("conv2d", "kernel " + wv.shape_str() + " larger than padded input " +
                                  xv.shape_str());
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (iw + 2 * pad - kw) / stride + 1;

    std::vector<double> col;
    im2col(xv, kh, kw, stride, pad, oh, ow, col);
    const int m = oh * ow;
    const int kc = kh * kw * ci;
    Tensor out = Tensor::zeros({oh, ow, co});
    gemm(false, false, m, co, kc, 1.0, col.data(), kc, wv.data(), co, 0.0, out.data(), co);
    double* od = out.data();
    const double* bd = bv.data();
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < co; ++c) od[static_cast<long>(r) * co + c] += bd[c];

    OpAttrs attrs;
    attrs.stride = stride;
    attrs.pad = pad;
    return push(OpKind::kConv2d, {x, w, b}, std::move(out), std::move(attrs));
}

Tape::NodeId Tape::relu(NodeId x) {
    const Tensor& xv = value(x);
    Tensor out = Tensor::zeros(xv.shape());
    for (long i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return push(OpKind::kRelu, {x}, std::move(out));
}

Tape::NodeId Tape::maxpool2x2(NodeId x) {
    const Tensor& xv = value(x);
    require_rank("maxpool2x2", xv, 3, "input");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        shape_error("maxpool2x2", "spatial dims must be even, got " + xv.shape_str());
    const int oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({oh, ow, c});
    OpAttrs attrs;
    attrs.iaux.resize(static_cast<size_t>(out.numel()));
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
            for (int ch = 0; ch < c; ++ch) {
                double best = -1e300;
                long best_idx = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const long idx =
                            (static_cast<long>(oy * 2 + dy) * w + (ox * 2 + dx)) * c + ch;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                const long oidx = (static_cast<long>(oy) * ow + ox) * c + ch;
                out[oidx] = best;
                attrs.iaux[static_cast<size_t>(oidx)] = static_cast<int>(best_idx);
            }
    return push(OpKind::kMaxPool2x2, {x}, std::move(out), std::move(attrs));
}

Tape::NodeId Tape::global_avg_pool(NodeId x) {
    const Tensor& xv = value(x);
    require_rank("global_avg_pool", xv, 3, "input");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    Tensor out = Tensor::zeros({c});
    for (long i = 0; i < xv.numel(); ++i) out[i % c] += xv[i];
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int ch = 0; ch < c; ++ch) out[ch] *= inv;
    return push(OpKind::kGlobalAvgPool, {x}, std::move(out));
}

Tape::NodeId Tape::dense(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    require_rank("dense", xv, 1, "input");
    require_rank("dense", wv, 2, "weight");
    require_rank("dense", bv, 1, "bias");
    const int in = xv.dim(0);
    if (wv.dim(0) != in)
        shape_error("dense", "input size " + std::to_string(in) + " != weight rows " +
                                 std::to_string(wv.dim(0)));
    const int outn = wv.dim(1);
    if (bv.dim(0) != outn)
        shape_error("dense", "bias size " + std::to_string(bv.dim(0)) + " != weight cols " +
                                 std::to_string(outn));
    Tensor out = Tensor::zeros({outn});
    for (int i = 0; i < in; ++i) {
        const double xi = xv[i];
        const double* wrow = wv.data() + static_cast<long>(i) * outn;
        for (int o = 0; o < outn; ++o) out[o] += xi * wrow[o];
    }
    for (int o = 0; o < outn; ++o) out[o] += bv[o];
    return push(OpKind::kDense, {x, w, b}, std::move(out));
}

Tape::NodeId Tape::softmax(NodeId logits) {
    const Tensor& xv = value(logits);
    require_rank("softmax", xv, 1, "logits");
    Tensor out = Tensor::zeros(xv.shape());
    const double m = xv.max();
    double denom = 0.0;
    for (long i = 0; i < xv.numel(); ++i) {
        out[i] = std::exp(xv[i] - m);
        denom += out[i];
    }
    for (long i = 0; i < xv.numel(); ++i) out[i] /= denom;
    return push(OpKind::kSoftmax, {logits}, std::move(out));
}

Tape::NodeId Tape::sigmoid(NodeId x) {
    const Tensor& xv = value(x);
    Tensor out = Tensor::zeros(xv.shape());
    for (long i = 0; i < xv.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    return push(OpKind::kSigmoid, {x}, std::move(out));
}

Tape::NodeId Tape::upsample2x2(NodeId x, UpsampleMode mode) {
    const Tensor& xv = value(x);
    require_rank("upsample2x2", xv, 3, "input");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    Tensor out = Tensor::zeros({2 * h, 2 * w, c});
    if (mode == UpsampleMode::kNearest) {
        for (int oy = 0; oy < 2 * h; ++oy)
            for (int ox = 0; ox < 2 * w; ++ox) {
                const double* src = xv.data() + (static_cast<long>(oy / 2) * w + ox / 2) * c;
                double* dst = out.data() + (static_cast<long>(oy) * 2 * w + ox) * c;
                std::copy(src, src + c, dst);
            }
    } else {
        for (int oy = 0; oy < 2 * h; ++oy) {
            const Tap ty = bilinear_tap(oy, h);
            for (int ox = 0; ox < 2 * w; ++ox) {
                const Tap tx = bilinear_tap(ox, w);
                double* dst = out.data() + (static_cast<long>(oy) * 2 * w + ox) * c;
                const double* r00 = xv.data() + (static_cast<long>(ty.i0) * w + tx.i0) * c;
                const double* r01 = xv.data() + (static_cast<long>(ty.i0) * w + tx.i1) * c;
                const double* r10 = xv.data() + (static_cast<long>(ty.i1) * w + tx.i0) * c;
                const double* r11 = xv.data() + (static_cast<long>(ty.i1) * w + tx.i1) * c;
                for (int ch = 0; ch < c; ++ch)
                    dst[ch] = ty.w0 * (tx.w0 * r00[ch] + tx.w1 * r01[ch]) +
                              ty.w1 * (tx.w0 * r10[ch] + tx.w1 * r11[ch]);
            }
        }
    }
    OpAttrs attrs;
    attrs.mode = mode;
    return push(OpKind::kUpsample2x2, {x}, std::move(out), std::move(attrs));
}

Tape::NodeId Tape::batchnorm(NodeId x, NodeId scale, NodeId shift, Tensor mean, Tensor var,
                             double eps) {
    const Tensor& xv = value(x);
    const Tensor& sv = value(scale);
    const Tensor& bv = value(shift);
    if (xv.rank() < 1) shape_error("batchnorm", "input must have rank >= 1");
    const int c = xv.dim(xv.rank() - 1);
    for (const Tensor* t : {&sv, &bv, &mean, &var})
        if (t->rank() != 1 || t->dim(0) != c)
            shape_error("batchnorm", "per-channel tensors must have shape [" +
                                         std::to_string(c) + "], input is " + xv.shape_str());
    for (long i = 0; i < var.numel(); ++i)
        if (var[i] < 0.0) throw InvalidArgument("batchnorm: negative variance");
    Tensor out = Tensor::zeros(xv.shape());
    for (long i = 0; i < xv.numel(); ++i) {
        const int ch = static_cast<int>(i % c);
        const double xhat = (xv[i] - mean[ch]) / std::sqrt(var[ch] + eps);
        out[i] = sv[ch] * xhat + bv[ch];
    }
    OpAttrs attrs;
    attrs.eps = eps;
    attrs.c0 = std::move(mean);
    attrs.c1 = std::move(var);
    return push(OpKind::kBatchNorm, {x, scale, shift}, std::move(out), std::move(attrs));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.same_shape(bv)) {
        Tensor out = Tensor::zeros(av.shape());
        for (long i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
        return push(OpKind::kAdd, {a, b}, std::move(out));
    }
    if (bv.is_scalar()) {
        Tensor out = Tensor::zeros(av.shape());
        for (long i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[0];
        return push(OpKind::kAdd, {a, b}, std::move(out));
    }
    if (av.is_scalar()) return add(b, a);
    shape_error("add", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.same_shape(bv)) {
        Tensor out = Tensor::zeros(av.shape());
        for (long i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
        return push(OpKind::kMul, {a, b}, std::move(out));
    }
    if (bv.is_scalar()) {
        Tensor out = Tensor::zeros(av.shape());
        for (long i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[0];
        return push(OpKind::kMul, {a, b}, std::move(out));
    }
    if (av.is_scalar()) return mul(b, a);
    shape_error("mul", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
}

Tape::NodeId Tape::sum(NodeId x) {
    return push(OpKind::kSum, {x}, Tensor::scalar(value(x).sum()));
}

Tape::NodeId Tape::pick(NodeId x, int index) {
    const Tensor& xv = value(x);
    require_rank("pick", xv, 1, "input");
    if (index < 0 || index >= xv.dim(0))
        shape_error("pick", "index " + std::to_string(index) + " out of range for " +
                                xv.shape_str());
    OpAttrs attrs;
    attrs.index = index;
    return push(OpKind::kPick, {x}, Tensor::scalar(xv[index]), std::move(attrs));
}

Tape::NodeId Tape::scale(NodeId x, double factor) {
    const Tensor& xv = value(x);
    Tensor out = Tensor::zeros(xv.shape());
    for (long i = 0; i < xv.numel(); ++i) out[i] = factor * xv[i];
    OpAttrs attrs;
    attrs.scalar = factor;
    return push(OpKind::kScale, {x}, std::move(out), std::move(attrs));
}

Tape::NodeId Tape::cross_entropy(NodeId probs, NodeId target) {
    const Tensor& pv = value(probs);
    const Tensor& tv = value(target);
    require_rank("cross_entropy", pv, 1, "probabilities");
    if (!pv.same_shape(tv))
        shape_error("cross_entropy", "probabilities " + pv.shape_str() + " vs target " +
                                         tv.shape_str());
    double loss = 0.0;
    for (long i = 0; i < pv.numel(); ++i)
        if (tv[i] != 0.0) loss -= tv[i] * std::log(clamp_prob(pv[i]));
    return push(OpKind::kCrossEntropy, {probs, target}, Tensor::scalar(loss));
}

Tape::NodeId Tape::binary_cross_entropy(NodeId pred, NodeId target) {
    const Tensor& pv = value(pred);
    const Tensor& tv = value(target);
    if (!pv.same_shape(tv))
        shape_error("binary_cross_entropy", "prediction " + pv.shape_str() + " vs target " +
                                                tv.shape_str());
    double loss = 0.0;
    for (long i = 0; i < pv.numel(); ++i) {
        const double p = clamp_prob(pv[i]);
        loss -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
    }
    loss /= static_cast<double>(pv.numel());
    return push(OpKind::kBinaryCrossEntropy, {pred, target}, Tensor::scalar(loss));
}

Tape::NodeId Tape::channel_weighted_sum(NodeId x, Tensor weights) {
    const Tensor& xv = value(x);
    require_rank("channel_weighted_sum", xv, 3, "input");
    const int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    if (weights.rank() != 1 || weights.dim(0) != c)
        shape_error("channel_weighted_sum", "weights must have shape [" + std::to_string(c) +
                                                "], got " + weights.shape_str());
    Tensor out = Tensor::zeros({h, w});
    for (long hw = 0; hw < static_cast<long>(h) * w; ++hw) {
        const double* src = xv.data() + hw * c;
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) acc += weights[ch] * src[ch];
        out[hw] = acc;
    }
    OpAttrs attrs;
    attrs.c0 = std::move(weights);
    return push(OpKind::kChannelWeightedSum, {x}, std::move(out), std::move(attrs));
}

void Tape::backward(NodeId loss) {
    if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size())
        throw InvalidArgument("backward: invalid node id");
    if (nodes_[static_cast<size_t>(loss)].output.numel() != 1)
        throw InvalidArgument("backward: loss must be a scalar [1], got shape " +
                              nodes_[static_cast<size_t>(loss)].output.shape_str());

    for (auto& n : nodes_) std::fill(n.grad.data(), n.grad.data() + n.grad.numel(), 0.0);

    // Ancestors of the loss; everything else keeps its zero grad.
    std::vector<char> reachable(nodes_.size(), 0);
    reachable[static_cast<size_t>(loss)] = 1;
    for (int id = loss; id >= 0; --id) {
        if (!reachable[static_cast<size_t>(id)]) continue;
        for (int p : nodes_[static_cast<size_t>(id)].parents) reachable[static_cast<size_t>(p)] = 1;
    }

    nodes_[static_cast<size_t>(loss)].grad[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
        if (!reachable[static_cast<size_t>(id)]) continue;
        if (nodes_[static_cast<size_t>(id)].parents.empty()) continue;
        if (!nodes_[static_cast<size_t>(id)].needs_grad) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    TapeNode& n = nodes_[static_cast<size_t>(id)];
    const Tensor& dy = n.grad;
    auto parent = [&](int i) -> TapeNode& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(i)])];
    };
    auto wants = [&](int i) { return parent(i).needs_grad; };

    switch (n.kind) {
        case OpKind::kLeaf:
            return;

        case OpKind::kConv2d: {
            TapeNode& px = parent(0);
            TapeNode& pw = parent(1);
            TapeNode& pb = parent(2);
            const Tensor& xv = px.output;
            const Tensor& wv = pw.output;
            const int kh = wv.dim(0), kw = wv.dim(1), ci = wv.dim(2), co = wv.dim(3);
            const int oh = n.output.dim(0), ow = n.output.dim(1);
            const int m = oh * ow;
            const int kc = kh * kw * ci;
            if (wants(2)) {
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < co; ++c)
                        pb.grad[c] += dy[static_cast<long>(r) * co + c];
            }
            if (wants(0) || wants(1)) {
                std::vector<double> col;
                im2col(xv, kh, kw, n.attrs.stride, n.attrs.pad, oh, ow, col);
                if (wants(1)) {
                    // dW += col^T * dY
                    gemm(true, false, kc, co, m, 1.0, col.data(), kc, dy.data(), co, 1.0,
                         pw.grad.data(), co);
                }
                if (wants(0)) {
                    // dX += col2im(dY * W^T)
                    std::vector<double> dcol(static_cast<size_t>(m) * kc, 0.0);
                    gemm(false, true, m, kc, co, 1.0, dy.data(), co, wv.data(), co, 0.0,
                         dcol.data(), kc);
                    col2im_add(dcol, kh, kw, n.attrs.stride, n.attrs.pad, oh, ow, px.grad);
                }
            }
            return;
        }

        case OpKind::kRelu: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            for (long i = 0; i < dy.numel(); ++i)
                if (px.output[i] > 0.0) px.grad[i] += dy[i];
            return;
        }

        case OpKind::kMaxPool2x2: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            for (long i = 0; i < dy.numel(); ++i)
                px.grad[n.attrs.iaux[static_cast<size_t>(i)]] += dy[i];
            return;
        }

        case OpKind::kGlobalAvgPool: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            const int c = n.output.dim(0);
            const double inv = 1.0 / (static_cast<double>(px.output.numel()) / c);
            for (long i = 0; i < px.output.numel(); ++i) px.grad[i] += dy[i % c] * inv;
            return;
        }

        case OpKind::kDense: {
            TapeNode& px = parent(0);
            TapeNode& pw = parent(1);
            TapeNode& pb = parent(2);
            const int in = px.output.dim(0);
            const int outn = n.output.dim(0);
            for (int i = 0; i < in; ++i) {
                const double xi = px.output[i];
                const double* wrow = pw.output.data() + static_cast<long>(i) * outn;
                double acc = 0.0;
                for (int o = 0; o < outn; ++o) {
                    if (pw.needs_grad) pw.grad[static_cast<long>(i) * outn + o] += xi * dy[o];
                    acc += wrow[o] * dy[o];
                }
                if (px.needs_grad) px.grad[i] += acc;
            }
            if (pb.needs_grad)
                for (int o = 0; o < outn; ++o) pb.grad[o] += dy[o];
            return;
        }

        case OpKind::kSoftmax: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            const Tensor& p = n.output;
            double dot = 0.0;
            for (long i = 0; i < p.numel(); ++i) dot += p[i] * dy[i];
            for (long i = 0; i < p.numel(); ++i) px.grad[i] += p[i] * (dy[i] - dot);
            return;
        }

        case OpKind::kSigmoid: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            for (long i = 0; i < dy.numel(); ++i)
                px.grad[i] += dy[i] * n.output[i] * (1.0 - n.output[i]);
            return;
        }

        case OpKind::kUpsample2x2: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            const int h = px.output.dim(0), w = px.output.dim(1), c = px.output.dim(2);
            if (n.attrs.mode == UpsampleMode::kNearest) {
                for (int oy = 0; oy < 2 * h; ++oy)
                    for (int ox = 0; ox < 2 * w; ++ox) {
                        const double* src = dy.data() + (static_cast<long>(oy) * 2 * w + ox) * c;
                        double* dst = px.grad.data() + (static_cast<long>(oy / 2) * w + ox / 2) * c;
                        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
            } else {
                for (int oy = 0; oy < 2 * h; ++oy) {
                    const Tap ty = bilinear_tap(oy, h);
                    for (int ox = 0; ox < 2 * w; ++ox) {
                        const Tap tx = bilinear_tap(ox, w);
                        const double* src = dy.data() + (static_cast<long>(oy) * 2 * w + ox) * c;
                        double* g00 = px.grad.data() + (static_cast<long>(ty.i0) * w + tx.i0) * c;
                        double* g01 = px.grad.data() + (static_cast<long>(ty.i0) * w + tx.i1) * c;
                        double* g10 = px.grad.data() + (static_cast<long>(ty.i1) * w + tx.i0) * c;
                        double* g11 = px.grad.data() + (static_cast<long>(ty.i1) * w + tx.i1) * c;
                        for (int ch = 0; ch < c; ++ch) {
                            g00[ch] += ty.w0 * tx.w0 * src[ch];
                            g01[ch] += ty.w0 * tx.w1 * src[ch];
                            g10[ch] += ty.w1 * tx.w0 * src[ch];
                            g11[ch] += ty.w1 * tx.w1 * src[ch];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::kBatchNorm: {
            TapeNode& px = parent(0);
            TapeNode& ps = parent(1);
            TapeNode& pc = parent(2);
            const int c = px.output.dim(px.output.rank() - 1);
            const Tensor& mean = n.attrs.c0;
            const Tensor& var = n.attrs.c1;
            for (long i = 0; i < dy.numel(); ++i) {
                const int ch = static_cast<int>(i % c);
                const double inv_std = 1.0 / std::sqrt(var[ch] + n.attrs.eps);
                if (px.needs_grad) px.grad[i] += dy[i] * ps.output[ch] * inv_std;
                if (ps.needs_grad)
                    ps.grad[ch] += dy[i] * (px.output[i] - mean[ch]) * inv_std;
                if (pc.needs_grad) pc.grad[ch] += dy[i];
            }
            return;
        }

        case OpKind::kAdd: {
            TapeNode& pa = parent(0);
            TapeNode& pb = parent(1);
            if (pa.needs_grad)
                for (long i = 0; i < dy.numel(); ++i) pa.grad[i] += dy[i];
            if (pb.needs_grad) {
                if (pb.output.is_scalar() && !n.output.is_scalar())
                    for (long i = 0; i < dy.numel(); ++i) pb.grad[0] += dy[i];
                else
                    for (long i = 0; i < dy.numel(); ++i) pb.grad[i] += dy[i];
            }
            return;
        }

        case OpKind::kMul: {
            TapeNode& pa = parent(0);
            TapeNode& pb = parent(1);
            const bool b_scalar = pb.output.is_scalar() && !n.output.is_scalar();
            if (pa.needs_grad) {
                if (b_scalar)
                    for (long i = 0; i < dy.numel(); ++i) pa.grad[i] += dy[i] * pb.output[0];
                else
                    for (long i = 0; i < dy.numel(); ++i) pa.grad[i] += dy[i] * pb.output[i];
            }
            if (pb.needs_grad) {
                if (b_scalar)
                    for (long i = 0; i < dy.numel(); ++i) pb.grad[0] += dy[i] * pa.output[i];
                else
                    for (long i = 0; i < dy.numel(); ++i) pb.grad[i] += dy[i] * pa.output[i];
            }
            return;
        }

        case OpKind::kSum: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            for (long i = 0; i < px.output.numel(); ++i) px.grad[i] += dy[0];
            return;
        }

        case OpKind::kPick: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            px.grad[n.attrs.index] += dy[0];
            return;
        }

        case OpKind::kScale: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            for (long i = 0; i < dy.numel(); ++i) px.grad[i] += n.attrs.scalar * dy[i];
            return;
        }

        case OpKind::kCrossEntropy: {
            TapeNode& pp = parent(0);
            if (!pp.needs_grad) return;
            const Tensor& tv = parent(1).output;
            for (long i = 0; i < pp.output.numel(); ++i) {
                if (tv[i] == 0.0) continue;
                const double p = pp.output[i];
                if (!prob_in_clamp_range(p)) continue; // clamp is flat there
                pp.grad[i] += dy[0] * (-tv[i] / p);
            }
            return;
        }

        case OpKind::kBinaryCrossEntropy: {
            TapeNode& pp = parent(0);
            if (!pp.needs_grad) return;
            const Tensor& tv = parent(1).output;
            const double inv_n = 1.0 / static_cast<double>(pp.output.numel());
            for (long i = 0; i < pp.output.numel(); ++i) {
                const double p = pp.output[i];
                if (!prob_in_clamp_range(p)) continue;
                pp.grad[i] += dy[0] * inv_n * (-tv[i] / p + (1.0 - tv[i]) / (1.0 - p));
            }
            return;
        }

        case OpKind::kChannelWeightedSum: {
            TapeNode& px = parent(0);
            if (!wants(0)) return;
            const int c = px.output.dim(2);
            const Tensor& wts = n.attrs.c0;
            for (long hw = 0; hw < dy.numel(); ++hw) {
                double* g = px.grad.data() + hw * c;
                const double d = dy[hw];
                for (int ch = 0; ch < c; ++ch) g[ch] += wts[ch] * d;
            }
            return;
        }
    }
    throw Error("backward: unhandled op " + std::string(op_name(n.kind)));
}

} // namespace gradshift
