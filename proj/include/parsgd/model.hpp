#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "parsgd/tensor.hpp"

namespace parsgd {

enum class Activation { sigmoid, relu, identity };

struct Layer {
    enum class Kind { dense, conv5x5, maxpool2x2, flatten, softmax_output };
    Kind kind;
    std::size_t units = 0;  // dense out units / conv out channels / classes
    Activation activation = Activation::sigmoid;

    static Layer dense(std::size_t out_units, Activation act) {
        return {Kind::dense, out_units, act};
    }
    static Layer conv5x5(std::size_t out_channels) {
        return {Kind::conv5x5, out_channels, Activation::relu};
    }
    static Layer maxpool2x2() { return {Kind::maxpool2x2, 0, Activation::identity}; }
    static Layer flatten() { return {Kind::flatten, 0, Activation::identity}; }
    static Layer softmax_output(std::size_t classes) {
        return {Kind::softmax_output, classes, Activation::identity};
    }
};

struct ArchitectureSpec {
    std::string name;
    std::vector<std::size_t> input_shape;  // {features} or {h, w, c}
    std::vector<Layer> layers;

    std::size_t class_count() const { return layers.back().units; }
};

enum class SyncGranularity { per_batch, per_epoch };
enum class Precision { f32, f64 };

struct HyperParams {
    double learning_rate = 0.01;
    std::size_t batch_size = 64;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    SyncGranularity sync = SyncGranularity::per_epoch;
    Precision precision = Precision::f64;
};

/// Validates layer chaining and returns the output shape of every layer
/// (excluding the batch dimension). Throws ShapeError on a bad chain.
std::vector<std::vector<std::size_t>> layer_output_shapes(const ArchitectureSpec& arch);

/// Table-driven architectures. Known names: adult-dnn, acoustic-dnn,
/// mnist-dnn, mnist-cnn, cifar10-dnn, cifar10-cnn, higgs-dnn.
ArchitectureSpec build_architecture(const std::string& name,
                                    Activation hidden_activation = Activation::sigmoid);

std::vector<std::string> known_architectures();

template <class T>
struct ParameterSetT {
    struct LayerParams {
        TensorT<T> weights;
        TensorT<T> biases;
    };
    std::vector<LayerParams> layers;  // trainable layers only, in network order

    std::size_t flat_size() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.biases.size();
        return n;
    }

    /// Layer-major serialization, weights before biases.
    std::vector<T> flatten() const {
        std::vector<T> out;
        out.reserve(flat_size());
        for (const auto& l : layers) {
            out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
            out.insert(out.end(), l.biases.values().begin(), l.biases.values().end());
        }
        return out;
    }

    void unflatten(const std::vector<T>& flat) {
        if (flat.size() != flat_size())
            throw ShapeError("unflatten length " + std::to_string(flat.size()) +
                             " does not match parameter count " + std::to_string(flat_size()));
        std::size_t pos = 0;
        for (auto& l : layers) {
            std::copy(flat.begin() + pos, flat.begin() + pos + l.weights.size(),
                      l.weights.values().begin());
            pos += l.weights.size();
            std::copy(flat.begin() + pos, flat.begin() + pos + l.biases.size(),
                      l.biases.values().begin());
            pos += l.biases.size();
        }
    }
};

using ParameterSet = ParameterSetT<double>;

/// Seeded init: weights uniform in [-a, a] with a = 1/sqrt(fan_in),
/// biases zero. Same (arch, seed) gives bit-identical parameters.
template <class T>
ParameterSetT<T> init_params(const ArchitectureSpec& arch, std::uint64_t seed) {
    const auto shapes = layer_output_shapes(arch);
    ParameterSetT<T> params;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> in_shape = arch.input_shape;
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const Layer& layer = arch.layers[i];
        if (layer.kind == Layer::Kind::dense || layer.kind == Layer::Kind::softmax_output) {
            const std::size_t fan_in = in_shape.back();
            const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-a, a);
            TensorT<T> w({fan_in, layer.units});
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(dist(rng));
            params.layers.push_back({std::move(w), TensorT<T>({layer.units})});
        } else if (layer.kind == Layer::Kind::conv5x5) {
            const std::size_t cin = in_shape[2];
            const std::size_t fan_in = 5 * 5 * cin;
            const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-a, a);
            TensorT<T> w({5, 5, cin, layer.units});
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(dist(rng));
            params.layers.push_back({std::move(w), TensorT<T>({layer.units})});
        }
        in_shape = shapes[i];
    }
    return params;
}

template <class T>
struct ForwardTrace {
    struct LayerTrace {
        TensorT<T> input;
        TensorT<T> output;                // post-activation
        std::vector<std::size_t> argmax;  // maxpool layers only
    };
    std::vector<LayerTrace> layers;
    TensorT<T> probs;  // final softmax output
};

/// Runs the forward pass, retaining per-layer activations for backward.
template <class T>
ForwardTrace<T> forward(const ArchitectureSpec& arch, const ParameterSetT<T>& params,
                        const TensorT<T>& batch) {
    std::vector<std::size_t> expected = arch.input_shape;
    expected.insert(expected.begin(), batch.dim(0));
    detail::require(batch.shape() == expected,
                    "forward batch shape " + batch.shape_str() + " does not match input " +
                        shape_to_string(expected));
    ForwardTrace<T> trace;
    TensorT<T> cur = batch;
    std::size_t trainable = 0;
    for (const Layer& layer : arch.layers) {
        typename ForwardTrace<T>::LayerTrace lt;
        lt.input = cur;
        switch (layer.kind) {
            case Layer::Kind::dense: {
                const auto& lp = params.layers[trainable++];
                TensorT<T> z = matmul(cur, lp.weights);
                for (std::size_t r = 0; r < z.dim(0); ++r)
                    for (std::size_t c = 0; c < z.dim(1); ++c) z.at2(r, c) += lp.biases[c];
                cur = layer.activation == Activation::sigmoid ? sigmoid(z)
                      : layer.activation == Activation::relu  ? relu(z)
                                                              : std::move(z);
                break;
            }
            case Layer::Kind::softmax_output: {
                const auto& lp = params.layers[trainable++];
                TensorT<T> z = matmul(cur, lp.weights);
                for (std::size_t r = 0; r < z.dim(0); ++r)
                    for (std::size_t c = 0; c < z.dim(1); ++c) z.at2(r, c) += lp.biases[c];
                cur = softmax(z);
                break;
            }
            case Layer::Kind::conv5x5: {
                const auto& lp = params.layers[trainable++];
                cur = relu(conv2d_same(cur, lp.weights, lp.biases));
                break;
            }
            case Layer::Kind::maxpool2x2: {
                auto res = maxpool_2x2(cur);
                lt.argmax = std::move(res.argmax);
                cur = std::move(res.output);
                break;
            }
            case Layer::Kind::flatten: {
                const std::size_t b = cur.dim(0);
                const std::size_t feats = cur.size() / b;
                cur = TensorT<T>({b, feats}, cur.values());
                break;
            }
        }
        lt.output = cur;
        trace.layers.push_back(std::move(lt));
    }
    trace.probs = cur;
    return trace;
}

/// Gradients of mean cross-entropy w.r.t. every weight and bias.
template <class T>
ParameterSetT<T> backward(const ArchitectureSpec& arch, const ParameterSetT<T>& params,
                          const ForwardTrace<T>& trace, const TensorT<T>& labels) {
    detail::require(labels.rank() == 2 && labels.dim(0) == trace.probs.dim(0) &&
                        labels.dim(1) == trace.probs.dim(1),
                    "backward labels shape " + labels.shape_str() + " does not match probs " +
                        trace.probs.shape_str());
    ParameterSetT<T> grads;
    grads.layers.resize(params.layers.size());

    const std::size_t batch = labels.dim(0);
    // softmax + mean cross-entropy: dz = (probs - labels) / batch
    TensorT<T> upstream(trace.probs.shape());
    for (std::size_t i = 0; i < upstream.size(); ++i)
        upstream[i] = (trace.probs[i] - labels[i]) / static_cast<T>(batch);

    std::size_t trainable = params.layers.size();
    for (std::size_t li = arch.layers.size(); li-- > 0;) {
        const Layer& layer = arch.layers[li];
        const auto& lt = trace.layers[li];
        switch (layer.kind) {
            case Layer::Kind::softmax_output:
            case Layer::Kind::dense: {
                TensorT<T> dz = std::move(upstream);
                if (layer.kind == Layer::Kind::dense) {
                    if (layer.activation == Activation::sigmoid) {
                        for (std::size_t i = 0; i < dz.size(); ++i)
                            dz[i] *= lt.output[i] * (T{1} - lt.output[i]);
                    } else if (layer.activation == Activation::relu) {
                        for (std::size_t i = 0; i < dz.size(); ++i)
                            if (lt.output[i] <= T{0}) dz[i] = T{0};
                    }
                }
                --trainable;
                const auto& lp = params.layers[trainable];
                auto& g = grads.layers[trainable];
                g.weights = matmul_at_b(lt.input, dz);
                g.biases = TensorT<T>({lp.biases.size()});
                for (std::size_t r = 0; r < dz.dim(0); ++r)
                    for (std::size_t c = 0; c < dz.dim(1); ++c) g.biases[c] += dz.at2(r, c);
                upstream = matmul_a_bt(dz, lp.weights);
                break;
            }
            case Layer::Kind::conv5x5: {
                TensorT<T> dz = std::move(upstream);
                for (std::size_t i = 0; i < dz.size(); ++i)
                    if (lt.output[i] <= T{0}) dz[i] = T{0};
                --trainable;
                const auto& lp = params.layers[trainable];
                auto& g = grads.layers[trainable];
                TensorT<T> grad_in;
                conv2d_same_backward(lt.input, lp.weights, dz, grad_in, g.weights, g.biases);
                upstream = std::move(grad_in);
                break;
            }
            case Layer::Kind::maxpool2x2:
                upstream = maxpool_2x2_backward(lt.argmax, upstream, lt.input.shape());
                break;
            case Layer::Kind::flatten:
                upstream = TensorT<T>(lt.input.shape(), upstream.values());
                break;
        }
    }
    return grads;
}

template <class T>
void sgd_step_inplace(ParameterSetT<T>& params, const ParameterSetT<T>& grads, double lr) {
    detail::require(params.layers.size() == grads.layers.size(),
                    "sgd_step layer count mismatch");
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& p = params.layers[l];
        const auto& g = grads.layers[l];
        detail::require(p.weights.same_shape(g.weights) && p.biases.same_shape(g.biases),
                        "sgd_step shape mismatch at layer " + std::to_string(l));
        for (std::size_t i = 0; i < p.weights.size(); ++i)
            p.weights[i] -= static_cast<T>(lr) * g.weights[i];
        for (std::size_t i = 0; i < p.biases.size(); ++i)
            p.biases[i] -= static_cast<T>(lr) * g.biases[i];
    }
}

template <class T>
ParameterSetT<T> sgd_step(ParameterSetT<T> params, const ParameterSetT<T>& grads, double lr) {
    sgd_step_inplace(params, grads, lr);
    return params;
}

/// Checkpoint format: u64 LE parameter count, u32 LE tag length, tag bytes,
/// then the flattened parameters as f64 LE.
void save_checkpoint(const std::string& path, const std::string& arch_tag,
                     const ParameterSet& params);

struct Checkpoint {
    std::string arch_tag;
    std::vector<double> flat;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace parsgd
