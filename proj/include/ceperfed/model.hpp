#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ceperfed/errors.hpp"
#include "ceperfed/tensor.hpp"

namespace ceperfed {

/// A labelled mini-batch of image tensors, laid out (batch, channels, h, w)
/// row-major.
struct Batch {
    std::size_t count = 0;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> inputs;
    std::vector<int> labels;
};

/// Network plan: a stack of valid-padding stride-1 conv+ReLU layers split
/// into three compression tiers, global average pooling, and a dense
/// classifier head.
struct ModelConfig {
    struct ConvLayer {
        std::string name;
        std::size_t c_out = 0;
        std::size_t kernel = 3;
        Part part = Part::Part2;
    };

    std::size_t in_channels = 3;
    std::size_t in_height = 16;
    std::size_t in_width = 16;
    std::size_t n_classes = 3;
    std::vector<ConvLayer> convs = {
        {"conv1", 8, 3, Part::Part1},  {"conv2", 12, 3, Part::Part2},
        {"conv3", 16, 3, Part::Part2}, {"conv4", 64, 3, Part::Part3},
        {"conv5", 64, 3, Part::Part3},
    };
};

/// Expands a ModelConfig into the ordered LayerSpec list, validating layer
/// ordering, part tags, and spatial dimensions.
inline std::vector<LayerSpec> build_layer_specs(const ModelConfig& cfg) {
    if (cfg.in_channels == 0 || cfg.in_height == 0 || cfg.in_width == 0)
        throw ConfigError("model: input dimensions must be positive");
    if (cfg.n_classes < 2) throw ConfigError("model: need at least two classes");

    std::vector<LayerSpec> specs;
    std::size_t c = cfg.in_channels, h = cfg.in_height, w = cfg.in_width;
    Part prev = Part::Part1;
    std::size_t part1_count = 0;
    for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
        const auto& conv = cfg.convs[i];
        if (conv.name.empty()) throw ConfigError("model: conv layer needs a name");
        if (conv.c_out == 0 || conv.kernel == 0)
            throw ConfigError("model: conv '" + conv.name + "' has zero dimension");
        if (conv.kernel > h || conv.kernel > w)
            throw ConfigError("model: conv '" + conv.name + "' kernel exceeds input " +
                              std::to_string(h) + "x" + std::to_string(w));
        if (conv.part == Part::Head)
            throw ConfigError("model: conv '" + conv.name + "' cannot be tagged head");
        if (conv.part == Part::Part1) ++part1_count;
        if (i > 0 && conv.part < prev)
            throw ConfigError("model: conv parts must be ordered part1 <= part2 <= part3");
        prev = conv.part;
        specs.push_back({conv.name, LayerKind::Conv, {conv.c_out, c, conv.kernel, conv.kernel},
                         conv.part});
        c = conv.c_out;
        h = h - conv.kernel + 1;
        w = w - conv.kernel + 1;
    }
    if (!cfg.convs.empty() && part1_count != 1)
        throw ConfigError("model: exactly one conv layer must be tagged part1");
    specs.push_back({"head", LayerKind::Dense, {cfg.n_classes, c, 0, 0}, Part::Head});
    return specs;
}

/// Part3 grouping is fixed at model-build time; the codec never discovers a
/// bad group size mid-round.
inline void validate_part3_grouping(const std::vector<LayerSpec>& specs,
                                    std::size_t group_channels) {
    if (group_channels == 0) throw ConfigError("group_channels must be positive");
    for (const auto& s : specs)
        if (s.kind == LayerKind::Conv && s.part == Part::Part3 && s.shape[0] % group_channels != 0)
            throw ConfigError("layer '" + s.name + "': c_out " + std::to_string(s.shape[0]) +
                              " not divisible by group size " + std::to_string(group_channels));
}

/// He-style normal init, seeded.
inline ParameterSet init_parameters(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParameterSet params;
    params.specs = specs;
    for (const auto& s : specs) {
        const double fan_in = static_cast<double>(s.flat_cols());
        const double stddev =
            s.kind == LayerKind::Conv ? std::sqrt(2.0 / fan_in) : std::sqrt(1.0 / fan_in);
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> v(s.size());
        for (double& x : v) x = dist(rng);
        params.values.push_back(std::move(v));
    }
    return params;
}

struct ForwardResult {
    std::vector<double> logits;  // count x n_classes, row-major
    double loss = 0.0;
};

struct BackwardResult {
    ParameterSet grad;
    double loss = 0.0;
    std::vector<double> logits;
};

namespace detail {

struct ActDims {
    std::size_t c = 0, h = 0, w = 0;
};

inline void conv_forward(const double* in, const double* weights, double* out, std::size_t batch,
                         std::size_t c_in, std::size_t h_in, std::size_t w_in, std::size_t c_out,
                         std::size_t k) {
    const std::size_t h_out = h_in - k + 1, w_out = w_in - k + 1;
    std::fill(out, out + batch * c_out * h_out * w_out, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) {
            double* out_plane = out + (b * c_out + o) * h_out * w_out;
            for (std::size_t c = 0; c < c_in; ++c) {
                const double* in_plane = in + (b * c_in + c) * h_in * w_in;
                const double* w_block = weights + (o * c_in + c) * k * k;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const double wv = w_block[i * k + j];
                        for (std::size_t y = 0; y < h_out; ++y) {
                            const double* in_row = in_plane + (y + i) * w_in + j;
                            double* out_row = out_plane + y * w_out;
                            for (std::size_t x = 0; x < w_out; ++x) out_row[x] += wv * in_row[x];
                        }
                    }
            }
        }
}

inline void conv_backward_weights(const double* in, const double* dz, double* dw,
                                  std::size_t batch, std::size_t c_in, std::size_t h_in,
                                  std::size_t w_in, std::size_t c_out, std::size_t k) {
    const std::size_t h_out = h_in - k + 1, w_out = w_in - k + 1;
    std::fill(dw, dw + c_out * c_in * k * k, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) {
            const double* dz_plane = dz + (b * c_out + o) * h_out * w_out;
            for (std::size_t c = 0; c < c_in; ++c) {
                const double* in_plane = in + (b * c_in + c) * h_in * w_in;
                double* dw_block = dw + (o * c_in + c) * k * k;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        double acc = 0.0;
                        for (std::size_t y = 0; y < h_out; ++y) {
                            const double* in_row = in_plane + (y + i) * w_in + j;
                            const double* dz_row = dz_plane + y * w_out;
                            for (std::size_t x = 0; x < w_out; ++x) acc += dz_row[x] * in_row[x];
                        }
                        dw_block[i * k + j] += acc;
                    }
            }
        }
}

inline void conv_backward_input(const double* weights, const double* dz, double* din,
                                std::size_t batch, std::size_t c_in, std::size_t h_in,
                                std::size_t w_in, std::size_t c_out, std::size_t k) {
    const std::size_t h_out = h_in - k + 1, w_out = w_in - k + 1;
    std::fill(din, din + batch * c_in * h_in * w_in, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) {
            const double* dz_plane = dz + (b * c_out + o) * h_out * w_out;
            for (std::size_t c = 0; c < c_in; ++c) {
                double* din_plane = din + (b * c_in + c) * h_in * w_in;
                const double* w_block = weights + (o * c_in + c) * k * k;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const double wv = w_block[i * k + j];
                        for (std::size_t y = 0; y < h_out; ++y) {
                            const double* dz_row = dz_plane + y * w_out;
                            double* din_row = din_plane + (y + i) * w_in + j;
                            for (std::size_t x = 0; x < w_out; ++x) din_row[x] += wv * dz_row[x];
                        }
                    }
            }
        }
}

struct ForwardTrace {
    // activations[0] is the batch input; activations[l+1] is post-ReLU output
    // of conv layer l. Last entry feeds global average pooling.
    std::vector<std::vector<double>> activations;
    std::vector<ActDims> dims;
    std::vector<double> pooled;       // count x c_last
    std::vector<double> probs;        // count x n_classes
    std::size_t conv_count = 0;
    std::size_t head_index = 0;
};

inline void check_model_batch(const ParameterSet& model, const Batch& batch) {
    if (batch.count == 0) throw StructuralError("batch: empty batch");
    if (batch.inputs.size() != batch.count * batch.channels * batch.height * batch.width)
        throw StructuralError("batch: input buffer does not match declared shape");
    if (batch.labels.size() != batch.count)
        throw StructuralError("batch: label count does not match batch size");
    if (model.specs.empty() || model.specs.back().kind != LayerKind::Dense)
        throw StructuralError("model: expected a dense head as the final layer");
}

inline ForwardResult forward_impl(const ParameterSet& model, const Batch& batch,
                                  ForwardTrace* trace) {
    check_model_batch(model, batch);
    const std::size_t n = batch.count;

    std::vector<double> current = batch.inputs;
    ActDims dims{batch.channels, batch.height, batch.width};
    if (trace) {
        trace->activations.push_back(current);
        trace->dims.push_back(dims);
    }

    std::size_t l = 0;
    for (; l < model.specs.size() && model.specs[l].kind == LayerKind::Conv; ++l) {
        const auto& spec = model.specs[l];
        if (spec.shape[1] != dims.c)
            throw StructuralError("layer '" + spec.name + "': expects " +
                                  std::to_string(spec.shape[1]) + " input channels, got " +
                                  std::to_string(dims.c));
        const std::size_t k = spec.shape[2];
        if (k > dims.h || k > dims.w)
            throw StructuralError("layer '" + spec.name + "': kernel larger than input");
        ActDims out_dims{spec.shape[0], dims.h - k + 1, dims.w - k + 1};
        std::vector<double> out(n * out_dims.c * out_dims.h * out_dims.w);
        conv_forward(current.data(), model.values[l].data(), out.data(), n, dims.c, dims.h,
                     dims.w, out_dims.c, k);
        for (double& x : out) {
            if (!std::isfinite(x))
                throw NumericError("layer '" + spec.name + "': non-finite activation");
            x = x > 0.0 ? x : 0.0;
        }
        current = std::move(out);
        dims = out_dims;
        if (trace) {
            trace->activations.push_back(current);
            trace->dims.push_back(dims);
        }
    }
    const std::size_t head_index = l;
    if (head_index + 1 != model.specs.size() || model.specs[head_index].kind != LayerKind::Dense)
        throw StructuralError("model: expected conv layers followed by a single dense head");
    const auto& head = model.specs[head_index];
    if (head.shape[1] != dims.c)
        throw StructuralError("head: expects " + std::to_string(head.shape[1]) +
                              " features, got " + std::to_string(dims.c));

    // Global average pool.
    const std::size_t spatial = dims.h * dims.w;
    std::vector<double> pooled(n * dims.c, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < dims.c; ++c) {
            const double* plane = current.data() + (b * dims.c + c) * spatial;
            double acc = 0.0;
            for (std::size_t s = 0; s < spatial; ++s) acc += plane[s];
            pooled[b * dims.c + c] = acc / static_cast<double>(spatial);
        }

    const std::size_t n_classes = head.shape[0];
    std::vector<double> logits(n * n_classes, 0.0);
    const double* w_head = model.values[head_index].data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t kcls = 0; kcls < n_classes; ++kcls) {
            const double* w_row = w_head + kcls * dims.c;
            const double* f_row = pooled.data() + b * dims.c;
            double acc = 0.0;
            for (std::size_t c = 0; c < dims.c; ++c) acc += w_row[c] * f_row[c];
            logits[b * n_classes + kcls] = acc;
        }

    // Mean softmax cross-entropy.
    std::vector<double> probs(n * n_classes);
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        const int label = batch.labels[b];
        if (label < 0 || static_cast<std::size_t>(label) >= n_classes)
            throw StructuralError("batch: label out of range");
        const double* row = logits.data() + b * n_classes;
        double* p_row = probs.data() + b * n_classes;
        const double m = *std::max_element(row, row + n_classes);
        double z = 0.0;
        for (std::size_t kcls = 0; kcls < n_classes; ++kcls) {
            p_row[kcls] = std::exp(row[kcls] - m);
            z += p_row[kcls];
        }
        for (std::size_t kcls = 0; kcls < n_classes; ++kcls) p_row[kcls] /= z;
        loss += m + std::log(z) - row[label];
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericError("loss: non-finite cross-entropy");

    if (trace) {
        trace->pooled = std::move(pooled);
        trace->probs = std::move(probs);
        trace->conv_count = head_index;
        trace->head_index = head_index;
    }
    return {std::move(logits), loss};
}

}  // namespace detail

/// Mean cross-entropy forward pass. Deterministic; no hidden RNG.
inline ForwardResult forward(const ParameterSet& model, const Batch& batch) {
    return detail::forward_impl(model, batch, nullptr);
}

/// Gradient of the mean batch loss with respect to every parameter, plus the
/// loss/logits of the forward pass it reused.
inline BackwardResult backward_with_loss(const ParameterSet& model, const Batch& batch) {
    detail::ForwardTrace trace;
    ForwardResult fwd = detail::forward_impl(model, batch, &trace);

    const std::size_t n = batch.count;
    const auto& head = model.specs[trace.head_index];
    const std::size_t n_classes = head.shape[0];
    const std::size_t feat = head.shape[1];

    ParameterSet grad = zeros_like(model);

    // d loss / d logits = (softmax - onehot) / n
    std::vector<double> dlogits = trace.probs;
    for (std::size_t b = 0; b < n; ++b)
        dlogits[b * n_classes + static_cast<std::size_t>(batch.labels[b])] -= 1.0;
    for (double& x : dlogits) x /= static_cast<double>(n);

    // Head: dW[k,c] = sum_b dlogits[b,k] * pooled[b,c]; dpooled = dlogits * W.
    double* dw_head = grad.values[trace.head_index].data();
    const double* w_head = model.values[trace.head_index].data();
    std::vector<double> dpooled(n * feat, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
        const double* f_row = trace.pooled.data() + b * feat;
        const double* dl_row = dlogits.data() + b * n_classes;
        double* dp_row = dpooled.data() + b * feat;
        for (std::size_t kcls = 0; kcls < n_classes; ++kcls) {
            const double d = dl_row[kcls];
            const double* w_row = w_head + kcls * feat;
            double* dw_row = dw_head + kcls * feat;
            for (std::size_t c = 0; c < feat; ++c) {
                dw_row[c] += d * f_row[c];
                dp_row[c] += d * w_row[c];
            }
        }
    }

    // Un-pool: every spatial cell shares the channel mean gradient.
    const detail::ActDims last = trace.dims.back();
    const std::size_t spatial = last.h * last.w;
    std::vector<double> dcurrent(n * last.c * spatial);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < last.c; ++c) {
            const double d = dpooled[b * last.c + c] / static_cast<double>(spatial);
            double* plane = dcurrent.data() + (b * last.c + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) plane[s] = d;
        }

    for (std::size_t l = trace.conv_count; l-- > 0;) {
        const auto& spec = model.specs[l];
        const std::size_t k = spec.shape[2];
        const detail::ActDims in_dims = trace.dims[l];
        const std::vector<double>& post = trace.activations[l + 1];

        // ReLU: gradient flows only where the activation survived.
        for (std::size_t i = 0; i < dcurrent.size(); ++i)
            if (post[i] <= 0.0) dcurrent[i] = 0.0;

        detail::conv_backward_weights(trace.activations[l].data(), dcurrent.data(),
                                      grad.values[l].data(), n, in_dims.c, in_dims.h, in_dims.w,
                                      spec.shape[0], k);
        if (l > 0) {
            std::vector<double> din(n * in_dims.c * in_dims.h * in_dims.w);
            detail::conv_backward_input(model.values[l].data(), dcurrent.data(), din.data(), n,
                                        in_dims.c, in_dims.h, in_dims.w, spec.shape[0], k);
            dcurrent = std::move(din);
        }
    }

    return {std::move(grad), fwd.loss, std::move(fwd.logits)};
}

inline ParameterSet backward(const ParameterSet& model, const Batch& batch) {
    return backward_with_loss(model, batch).grad;
}

}  // namespace ceperfed
