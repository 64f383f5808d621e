#include "gradshift/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "gradshift/error.hpp"
#include "gradshift/json_io.hpp"
#include "gradshift/metrics.hpp"
#include "gradshift/rng.hpp"
#include "gradshift/threading.hpp"

using nlohmann::json;

namespace gradshift {

int ModelConfig::bottleneck_size() const {
    int s = input_size;
    for (size_t i = 0; i < residual_stages.size(); ++i) s /= 2;
    return s;
}

int ModelConfig::bottleneck_channels() const {
    return residual_stages.empty() ? stem_channels : residual_stages.back().channels;
}

int ModelConfig::resolved_decoder_stages() const {
    return decoder_stages >= 0 ? decoder_stages : static_cast<int>(residual_stages.size());
}

void ModelConfig::validate() const {
    if (input_size < 8) throw InvalidArgument("model config: input_size must be >= 8");
    if (stem_channels < 1) throw InvalidArgument("model config: stem_channels must be >= 1");
    if (num_classes < 2) throw InvalidArgument("model config: num_classes must be >= 2");
    if (loss_weight_mask < 0.0)
        throw InvalidArgument("model config: loss_weight_mask must be >= 0");
    if (residual_stages.empty())
        throw InvalidArgument("model config: at least one residual stage required");
    for (const auto& st : residual_stages)
        if (st.blocks < 1 || st.channels < 1)
            throw InvalidArgument("model config: stage blocks and channels must be >= 1");
    const int down = 1 << residual_stages.size();
    if (input_size % down != 0)
        throw InvalidArgument("model config: input_size " + std::to_string(input_size) +
                              " not divisible by 2^" + std::to_string(residual_stages.size()) +
                              " downsampling stages");
    const int bneck = bottleneck_size();
    if (bneck < 1) throw InvalidArgument("model config: bottleneck collapses to zero size");
    const int ds = resolved_decoder_stages();
    if (bneck * (1 << ds) != input_size)
        throw InvalidArgument("model config: decoder_stages " + std::to_string(ds) +
                              " inconsistent: bottleneck " + std::to_string(bneck) + " x 2^" +
                              std::to_string(ds) + " != input_size " +
                              std::to_string(input_size));
}

namespace {

// Decoder channel plan: halve from the bottleneck width, floor 4.
std::vector<int> decoder_channels(const ModelConfig& c) {
    std::vector<int> out;
    int ch = c.bottleneck_channels();
    for (int d = 0; d < c.resolved_decoder_stages(); ++d) {
        ch = std::max(4, ch / 2);
        out.push_back(ch);
    }
    return out;
}

Tensor he_uniform(std::vector<int> shape, long fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

} // namespace

long parameter_count(const ModelConfig& c) {
    auto conv = [](int kh, int kw, int ci, int co) {
        return static_cast<long>(kh) * kw * ci * co + co;
    };
    long n = conv(3, 3, 1, c.stem_channels);
    int in_ch = c.stem_channels;
    for (const auto& st : c.residual_stages) {
        n += conv(3, 3, in_ch, st.channels) + conv(3, 3, st.channels, st.channels) +
             conv(1, 1, in_ch, st.channels);
        for (int b = 1; b < st.blocks; ++b)
            n += 2 * conv(3, 3, st.channels, st.channels);
        in_ch = st.channels;
    }
    n += static_cast<long>(in_ch) * c.num_classes + c.num_classes; // classifier
    if (c.mtl_enabled) {
        int ch = c.bottleneck_channels();
        for (int d : decoder_channels(c)) {
            n += conv(3, 3, ch, d) + 2 * d; // conv + bn scale/shift
            ch = d;
        }
        n += conv(1, 1, ch, 1);
    }
    return n;
}

MtlModel MtlModel::build(const ModelConfig& config) {
    config.validate();
    MtlModel m;
    m.config_ = config;
    Rng rng(mix_seed(config.seed, 0x6D6F64656Cull)); // "model"

    auto add_conv = [&](const std::string& name, int kh, int kw, int ci, int co) {
        m.params_[name + ".w"] = he_uniform({kh, kw, ci, co}, static_cast<long>(kh) * kw * ci, rng);
        m.params_[name + ".b"] = Tensor::zeros({co});
    };

    add_conv("stem.conv", 3, 3, 1, config.stem_channels);
    int in_ch = config.stem_channels;
    for (size_t s = 0; s < config.residual_stages.size(); ++s) {
        const auto& st = config.residual_stages[s];
        const std::string stage = "stage" + std::to_string(s);
        add_conv(stage + ".block0.conv1", 3, 3, in_ch, st.channels);
        add_conv(stage + ".block0.conv2", 3, 3, st.channels, st.channels);
        add_conv(stage + ".block0.skip", 1, 1, in_ch, st.channels);
        for (int b = 1; b < st.blocks; ++b) {
            const std::string blk = stage + ".block" + std::to_string(b);
            add_conv(blk + ".conv1", 3, 3, st.channels, st.channels);
            add_conv(blk + ".conv2", 3, 3, st.channels, st.channels);
        }
        in_ch = st.channels;
    }
    m.params_["head.fc.w"] =
        he_uniform({in_ch, config.num_classes}, in_ch, rng);
    m.params_["head.fc.b"] = Tensor::zeros({config.num_classes});

    if (config.mtl_enabled) {
        int ch = config.bottleneck_channels();
        const auto plan = decoder_channels(config);
        for (size_t d = 0; d < plan.size(); ++d) {
            const std::string sub = "decoder.sub" + std::to_string(d);
            add_conv(sub + ".conv", 3, 3, ch, plan[d]);
            m.params_[sub + ".bn.scale"] = Tensor::full({plan[d]}, 1.0);
            m.params_[sub + ".bn.shift"] = Tensor::zeros({plan[d]});
            m.buffers_[sub + ".bn.mean"] = Tensor::zeros({plan[d]});
            m.buffers_[sub + ".bn.var"] = Tensor::full({plan[d]}, 1.0);
            ch = plan[d];
        }
        add_conv("decoder.out.conv", 1, 1, ch, 1);
    }

    const size_t last_stage = config.residual_stages.size() - 1;
    m.bottleneck_layer_id_ =
        "stage" + std::to_string(last_stage) + ".block" +
        std::to_string(config.residual_stages[last_stage].blocks - 1) + ".out";
    return m;
}

MtlModel::Forward MtlModel::forward(const Tensor& image, bool input_needs_grad,
                                    bool params_need_grad) const {
    const int s = config_.input_size;
    if (image.rank() != 3 || image.dim(0) != s || image.dim(1) != s || image.dim(2) != 1)
        throw InvalidArgument("forward: image must be [" + std::to_string(s) + "," +
                              std::to_string(s) + ",1], got " + image.shape_str());
    for (long i = 0; i < image.numel(); ++i)
        if (image[i] < 0.0 || image[i] > 1.0)
            throw InvalidArgument("forward: image values must lie in [0,1]");

    Forward f;
    Tape& t = f.tape;
    f.input = t.leaf(image, input_needs_grad);

    auto P = [&](const std::string& name) {
        const Tape::NodeId id = t.leaf(params_.at(name), params_need_grad);
        f.param_nodes[name] = id;
        return id;
    };
    auto conv = [&](Tape::NodeId x, const std::string& name, int stride, int pad) {
        return t.conv2d(x, P(name + ".w"), P(name + ".b"), stride, pad);
    };

    Tape::NodeId x = t.relu(conv(f.input, "stem.conv", 1, 1));
    for (size_t st = 0; st < config_.residual_stages.size(); ++st) {
        const std::string stage = "stage" + std::to_string(st);
        // Downsampling block: stride-2 main path, 1x1 stride-2 projection skip.
        Tape::NodeId main = t.relu(conv(x, stage + ".block0.conv1", 2, 1));
        main = conv(main, stage + ".block0.conv2", 1, 1);
        Tape::NodeId skip = conv(x, stage + ".block0.skip", 2, 0);
        x = t.relu(t.add(main, skip));
        for (int b = 1; b < config_.residual_stages[st].blocks; ++b) {
            const std::string blk = stage + ".block" + std::to_string(b);
            main = t.relu(conv(x, blk + ".conv1", 1, 1));
            main = conv(main, blk + ".conv2", 1, 1);
            x = t.relu(t.add(main, x));
        }
    }
    f.bottleneck = x;

    f.logits = t.dense(t.global_avg_pool(x), P("head.fc.w"), P("head.fc.b"));
    f.probs = t.softmax(f.logits);

    if (config_.mtl_enabled) {
        Tape::NodeId d = f.bottleneck;
        const auto plan = decoder_channels(config_);
        for (size_t sub = 0; sub < plan.size(); ++sub) {
            const std::string name = "decoder.sub" + std::to_string(sub);
            d = t.relu(conv(d, name + ".conv", 1, 1));
            d = t.upsample2x2(d, UpsampleMode::kNearest);
            f.bn_inputs.emplace_back(name + ".bn", d);
            d = t.batchnorm(d, P(name + ".bn.scale"), P(name + ".bn.shift"),
                            buffers_.at(name + ".bn.mean"), buffers_.at(name + ".bn.var"));
        }
        f.mask = t.sigmoid(conv(d, "decoder.out.conv", 1, 0));
    }
    return f;
}

std::pair<int, double> MtlModel::predict(const Tensor& image) const {
    Forward f = forward(image);
    const Tensor& p = f.tape.value(f.probs);
    int best = 0;
    for (int c = 1; c < p.dim(0); ++c)
        if (p[c] > p[best]) best = c;
    return {best, p[best]};
}

Tape::NodeId mtl_loss(Tape& tape, Tape::NodeId class_probs, int label, Tape::NodeId mask_pred,
                      const Tensor& mask_true, double lambda) {
    if (lambda < 0.0) throw InvalidArgument("mtl_loss: lambda must be >= 0");
    const int classes = tape.value(class_probs).dim(0);
    Tape::NodeId loss = tape.cross_entropy(class_probs, tape.leaf(one_hot(label, classes)));
    if (lambda == 0.0) return loss;
    if (mask_pred < 0) throw InvalidArgument("mtl_loss: lambda > 0 requires a mask prediction");
    if (!tape.value(mask_pred).same_shape(mask_true))
        throw InvalidArgument("mtl_loss: mask prediction " + tape.value(mask_pred).shape_str() +
                              " vs target " + mask_true.shape_str());
    const Tape::NodeId bce = tape.binary_cross_entropy(mask_pred, tape.leaf(mask_true));
    return tape.add(loss, tape.scale(bce, lambda));
}

namespace {

struct WorkerAccum {
    std::map<std::string, Tensor> grads;
    // per-bn-buffer channel sums / square sums / element count
    std::map<std::string, std::vector<double>> bn_sum, bn_sumsq;
    std::map<std::string, long> bn_count;
    double class_loss = 0, mask_loss = 0;
    long correct = 0;

    void reset(const MtlModel& model) {
        for (auto& [name, g] : grads) std::fill(g.data(), g.data() + g.numel(), 0.0);
        if (grads.empty())
            for (const auto& [name, p] : model.params()) grads[name] = Tensor::zeros(p.shape());
        for (auto& [k, v] : bn_sum) std::fill(v.begin(), v.end(), 0.0);
        for (auto& [k, v] : bn_sumsq) std::fill(v.begin(), v.end(), 0.0);
        for (auto& [k, v] : bn_count) v = 0;
        class_loss = mask_loss = 0;
        correct = 0;
    }
};

int argmax(const Tensor& v) {
    int best = 0;
    for (int i = 1; i < v.dim(0); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace

TrainReport train(MtlModel& model, const Dataset& data, const TrainOptions& opt) {
    if (opt.epochs < 1 || opt.batch_size < 1 || opt.lr < 0.0)
        throw InvalidArgument("train: epochs/batch_size must be >= 1 and lr >= 0");
    if (data.input_size != model.config().input_size)
        throw InvalidArgument("train: dataset size " + std::to_string(data.input_size) +
                              " != model input " + std::to_string(model.config().input_size));
    std::vector<size_t> train_idx = data.of(Split::kTrain);
    const std::vector<size_t> val_idx = data.of(Split::kVal);
    const std::vector<size_t> test_idx = data.of(Split::kTest);
    if (train_idx.empty() || val_idx.empty())
        throw InvalidArgument("train: train and validation splits must be nonempty");

    const double lambda = model.config().mtl_enabled ? model.config().loss_weight_mask : 0.0;
    const int workers = hardware_threads();
    std::vector<WorkerAccum> accum(static_cast<size_t>(workers));
    std::map<std::string, Tensor> velocity;
    for (const auto& [name, p] : model.params()) velocity[name] = Tensor::zeros(p.shape());

    Rng shuffle_rng(mix_seed(opt.seed, 0x7368756666ull)); // "shuff"
    TrainReport report;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        shuffle_rng.shuffle(train_idx);
        double ep_class_loss = 0, ep_mask_loss = 0;
        long ep_correct = 0;

        for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(opt.batch_size)) {
            const size_t end = std::min(train_idx.size(), start + static_cast<size_t>(opt.batch_size));
            const long batch_n = static_cast<long>(end - start);
            for (auto& a : accum) a.reset(model);

            parallel_for(batch_n, [&](long lo, long hi, int w) {
                WorkerAccum& acc = accum[static_cast<size_t>(w)];
                for (long i = lo; i < hi; ++i) {
                    const Sample& sample = data.samples[train_idx[start + static_cast<size_t>(i)]];
                    MtlModel::Forward f = model.forward(sample.image, false, true);
                    const Tape::NodeId loss =
                        mtl_loss(f.tape, f.probs, sample.label, f.mask, sample.mask, lambda);
                    const double loss_v = f.tape.value(loss).item();
                    if (!std::isfinite(loss_v))
                        throw NumericError("train: loss became non-finite at epoch " +
                                           std::to_string(epoch) + "; lower the learning rate");
                    f.tape.backward(loss);
                    for (auto& [name, node] : f.param_nodes) {
                        const Tensor& g = f.tape.grad(node);
                        Tensor& dst = acc.grads[name];
                        for (long k = 0; k < g.numel(); ++k) dst[k] += g[k];
                    }
                    // Batch statistics for the running-normalization buffers.
                    for (auto& [prefix, node] : f.bn_inputs) {
                        const Tensor& v = f.tape.value(node);
                        const int ch = v.dim(v.rank() - 1);
                        auto& sums = acc.bn_sum[prefix];
                        auto& sqs = acc.bn_sumsq[prefix];
                        if (sums.empty()) {
                            sums.assign(static_cast<size_t>(ch), 0.0);
                            sqs.assign(static_cast<size_t>(ch), 0.0);
                        }
                        for (long k = 0; k < v.numel(); ++k) {
                            sums[static_cast<size_t>(k % ch)] += v[k];
                            sqs[static_cast<size_t>(k % ch)] += v[k] * v[k];
                        }
                        acc.bn_count[prefix] += v.numel() / ch;
                    }
                    const Tensor& probs = f.tape.value(f.probs);
                    // split the combined loss back out for reporting
                    const double ce = -std::log(std::clamp(probs[sample.label], Tape::kProbClamp,
                                                           1.0 - Tape::kProbClamp));
                    acc.class_loss += ce;
                    if (lambda > 0.0) acc.mask_loss += (loss_v - ce) / lambda;
                    if (argmax(probs) == sample.label) ++acc.correct;
                }
            }, workers);

            // Fixed-order reduction keeps runs bit-reproducible.
            const double inv_batch = 1.0 / static_cast<double>(batch_n);
            for (auto& [name, p] : model.params()) {
                Tensor& v = velocity[name];
                for (long k = 0; k < p.numel(); ++k) {
                    double g = 0.0;
                    for (const auto& a : accum) {
                        auto it = a.grads.find(name);
                        if (it != a.grads.end()) g += it->second[k];
                    }
                    g *= inv_batch;
                    v[k] = opt.momentum * v[k] + g;
                    p[k] -= opt.lr * v[k];
                }
            }
            for (auto& [name, mean_buf] : model.buffers()) {
                if (name.size() < 5 || name.substr(name.size() - 5) != ".mean") continue;
                const std::string prefix = name.substr(0, name.size() - 5);
                Tensor& var_buf = model.buffers().at(prefix + ".var");
                const int ch = mean_buf.dim(0);
                long count = 0;
                std::vector<double> sum(static_cast<size_t>(ch), 0.0),
                    sumsq(static_cast<size_t>(ch), 0.0);
                for (const auto& a : accum) {
                    auto it = a.bn_count.find(prefix);
                    if (it == a.bn_count.end() || it->second == 0) continue;
                    count += it->second;
                    for (int c = 0; c < ch; ++c) {
                        sum[static_cast<size_t>(c)] += a.bn_sum.at(prefix)[static_cast<size_t>(c)];
                        sumsq[static_cast<size_t>(c)] += a.bn_sumsq.at(prefix)[static_cast<size_t>(c)];
                    }
                }
                if (count == 0) continue;
                constexpr double kBnMomentum = 0.9;
                for (int c = 0; c < ch; ++c) {
                    const double mean = sum[static_cast<size_t>(c)] / static_cast<double>(count);
                    const double var = std::max(
                        0.0, sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mean * mean);
                    mean_buf[c] = kBnMomentum * mean_buf[c] + (1.0 - kBnMomentum) * mean;
                    var_buf[c] = kBnMomentum * var_buf[c] + (1.0 - kBnMomentum) * var;
                }
            }
            for (const auto& a : accum) {
                ep_class_loss += a.class_loss;
                ep_mask_loss += a.mask_loss;
                ep_correct += a.correct;
            }
        }

        EpochStats st;
        st.train_class_loss = ep_class_loss / static_cast<double>(train_idx.size());
        st.train_mask_loss = ep_mask_loss / static_cast<double>(train_idx.size());
        st.train_accuracy = static_cast<double>(ep_correct) / static_cast<double>(train_idx.size());
        const EvalResult val = evaluate(model, data, Split::kVal);
        st.val_class_loss = val.class_loss;
        st.val_mask_loss = val.mask_loss;
        st.val_accuracy = val.accuracy;
        report.epochs.push_back(st);
        if (!opt.quiet)
            std::cout << "epoch " << epoch + 1 << "/" << opt.epochs << "  train_loss "
                      << st.train_class_loss << "  train_acc " << st.train_accuracy
                      << "  val_acc " << st.val_accuracy << "\n";
    }

    if (!test_idx.empty()) {
        const EvalResult test = evaluate(model, data, Split::kTest);
        std::vector<int> labels;
        labels.reserve(test_idx.size());
        for (size_t i : test_idx) labels.push_back(data.samples[i].label);
        const ClassificationMetrics cm = classification_metrics(test.predictions, labels);
        report.test_accuracy = cm.accuracy;
        report.test_sensitivity = cm.sensitivity;
        report.test_specificity = cm.specificity;
    }
    return report;
}

EvalResult evaluate(const MtlModel& model, const Dataset& data, Split split) {
    const std::vector<size_t> idx = data.of(split);
    EvalResult r;
    if (idx.empty()) return r;
    r.predictions.assign(idx.size(), 0);
    r.confidences.assign(idx.size(), 0.0);
    std::vector<double> class_losses(idx.size(), 0.0), mask_losses(idx.size(), 0.0);
    const double lambda = model.config().mtl_enabled ? model.config().loss_weight_mask : 0.0;

    parallel_for(static_cast<long>(idx.size()), [&](long lo, long hi, int) {
        for (long i = lo; i < hi; ++i) {
            const Sample& s = data.samples[idx[static_cast<size_t>(i)]];
            MtlModel::Forward f = model.forward(s.image);
            const Tensor& probs = f.tape.value(f.probs);
            const int pred = argmax(probs);
            r.predictions[static_cast<size_t>(i)] = pred;
            r.confidences[static_cast<size_t>(i)] = probs[pred];
            class_losses[static_cast<size_t>(i)] =
                -std::log(std::clamp(probs[s.label], Tape::kProbClamp, 1.0 - Tape::kProbClamp));
            if (f.mask >= 0 && lambda > 0.0) {
                Tape::NodeId bce = f.tape.binary_cross_entropy(f.mask, f.tape.leaf(s.mask));
                mask_losses[static_cast<size_t>(i)] = f.tape.value(bce).item();
            }
        }
    });

    long correct = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
        if (r.predictions[i] == data.samples[idx[i]].label) ++correct;
        r.class_loss += class_losses[i];
        r.mask_loss += mask_losses[i];
    }
    r.class_loss /= static_cast<double>(idx.size());
    r.mask_loss /= static_cast<double>(idx.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    return r;
}

void MtlModel::save(const std::string& path) const {
    json j;
    j["magic"] = "GRADSHIFT-CKPT-v1";
    j["config"] = model_config_to_json(config_);
    j["bottleneck_layer_id"] = bottleneck_layer_id_;
    auto dump_map = [](const std::map<std::string, Tensor>& m) {
        json out = json::object();
        for (const auto& [name, t] : m) {
            json e;
            e["shape"] = t.shape();
            e["data"] = std::vector<double>(t.data(), t.data() + t.numel());
            out[name] = std::move(e);
        }
        return out;
    };
    j["params"] = dump_map(params_);
    j["buffers"] = dump_map(buffers_);
    std::ofstream out(path);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    out << j.dump();
    if (!out.good()) throw IoError("checkpoint: write failed for " + path);
}

MtlModel MtlModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("checkpoint: invalid JSON in " + path + ": " + e.what());
    }
    if (!j.contains("magic") || j["magic"] != "GRADSHIFT-CKPT-v1")
        throw IoError("checkpoint: missing or unsupported magic in " + path +
                      " (expected GRADSHIFT-CKPT-v1)");
    MtlModel m = build(model_config_from_json(j.at("config")));
    auto load_map = [&](const json& src, std::map<std::string, Tensor>& dst, const char* what) {
        for (auto& [name, t] : dst) {
            if (!src.contains(name))
                throw IoError("checkpoint: missing " + std::string(what) + " " + name);
            const json& e = src.at(name);
            const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            std::vector<double> data = e.at("data").get<std::vector<double>>();
            Tensor loaded(shape, std::move(data));
            if (!loaded.same_shape(t))
                throw IoError("checkpoint: " + name + " has shape " + loaded.shape_str() +
                              ", model expects " + t.shape_str());
            t = std::move(loaded);
        }
        if (src.size() != dst.size())
            throw IoError("checkpoint: unexpected extra " + std::string(what) + " entries");
    };
    load_map(j.at("params"), m.params_, "parameter");
    load_map(j.at("buffers"), m.buffers_, "buffer");
    return m;
}

} // namespace gradshift
