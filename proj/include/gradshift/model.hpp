#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gradshift/data.hpp"
#include "gradshift/tape.hpp"
#include "gradshift/tensor.hpp"

namespace gradshift {

struct StageSpec {
    int blocks = 1;
    int channels = 8;
};

// Scaled-down residual multi-task topology: stem conv, stride-2 residual
// stages, dense-softmax classifier off a global average pool, and an
// upsampling decoder (conv+relu, x2 upsample, batchnorm per stage) back to a
// sigmoid lesion mask.
struct ModelConfig {
    int input_size = 64;
    int stem_channels = 8;
    std::vector<StageSpec> residual_stages = {{2, 16}, {2, 32}, {2, 64}};
    int num_classes = 2;
    int decoder_stages = -1; // -1: derive from residual_stages
    bool mtl_enabled = true;
    double loss_weight_mask = 1.0; // lambda
    uint64_t seed = 0;

    int bottleneck_size() const; // input_size / 2^stages
    int bottleneck_channels() const;
    int resolved_decoder_stages() const;
    void validate() const; // throws InvalidArgument naming the violated invariant
};

// Expected parameter count for a config; the audit tests compare this
// independent formula against the built model.
long parameter_count(const ModelConfig& config);

struct TrainOptions {
    int epochs = 30;
    int batch_size = 16;
    double lr = 0.01;
    double momentum = 0.9;
    uint64_t seed = 0;
    bool quiet = true;
};

struct EpochStats {
    double train_class_loss = 0, train_mask_loss = 0, train_accuracy = 0;
    double val_class_loss = 0, val_mask_loss = 0, val_accuracy = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::optional<double> test_accuracy;
    std::optional<double> test_sensitivity;
    std::optional<double> test_specificity;
};

class MtlModel {
public:
    // He-uniform conv/dense weights, zero biases, unit/zero norm parameters,
    // drawn deterministically from config.seed. Backbone and classifier are
    // initialized before the decoder, so a decoder-less build shares their
    // exact values for the same seed.
    static MtlModel build(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const std::string& bottleneck_layer_id() const { return bottleneck_layer_id_; }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    std::map<std::string, Tensor>& buffers() { return buffers_; }
    const std::map<std::string, Tensor>& buffers() const { return buffers_; }

    struct Forward {
        Tape tape;
        Tape::NodeId input = -1;
        Tape::NodeId bottleneck = -1; // final conv activation, the GRAD-CAM target
        Tape::NodeId logits = -1;     // pre-softmax
        Tape::NodeId probs = -1;
        Tape::NodeId mask = -1;       // -1 when the decoder is disabled
        std::map<std::string, Tape::NodeId> param_nodes;
        // batchnorm buffer prefix -> the node whose statistics feed the
        // running mean/var updates during training
        std::vector<std::pair<std::string, Tape::NodeId>> bn_inputs;
    };

    // Records one image's forward pass on a fresh tape. The image must be
    // [input_size, input_size, 1] with values in [0,1].
    Forward forward(const Tensor& image, bool input_needs_grad = false,
                    bool params_need_grad = false) const;

    // argmax class and its probability, cheap eval-only pass.
    std::pair<int, double> predict(const Tensor& image) const;

    void save(const std::string& path) const; // GRADSHIFT-CKPT-v1 container
    static MtlModel load(const std::string& path);

private:
    ModelConfig config_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> buffers_; // batchnorm running mean/var
    std::string bottleneck_layer_id_;
};

// Combined objective: cross_entropy(class) + lambda * bce(mask). With
// lambda = 0 the mask term is not built at all, so the loss and its
// gradients reduce exactly to the single-task case. mask_pred may be -1
// only when lambda = 0.
Tape::NodeId mtl_loss(Tape& tape, Tape::NodeId class_probs, int label, Tape::NodeId mask_pred,
                      const Tensor& mask_true, double lambda);

// SGD with momentum over shuffled mini-batches; per-sample tapes evaluated
// in parallel, gradients reduced in a fixed order so runs are reproducible
// from the seed. Aborts with a diagnostic if the loss turns non-finite.
TrainReport train(MtlModel& model, const Dataset& data, const TrainOptions& opt);

struct EvalResult {
    std::vector<int> predictions;
    std::vector<double> confidences;
    double class_loss = 0;
    double mask_loss = 0;
    double accuracy = 0;
};

// Eval-mode pass over one split; read-only on the model, parallel per image.
EvalResult evaluate(const MtlModel& model, const Dataset& data, Split split);

} // namespace gradshift
