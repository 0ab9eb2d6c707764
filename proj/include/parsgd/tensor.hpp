#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace parsgd {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor. Element type is double by default; float is
/// available for benchmark runs via the TensorT template.
template <class T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count_of(shape_), T{}) {}

    TensorT(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count_of(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_to_string(shape_));
        }
    }

    static TensorT zeros(std::vector<std::size_t> shape) { return TensorT(std::move(shape)); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D access
    T& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    // 4-D access (batch, h, w, channel)
    T& at4(std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
        return data_[((b * shape_[1] + y) * shape_[2] + x) * shape_[3] + c];
    }
    const T& at4(std::size_t b, std::size_t y, std::size_t x, std::size_t c) const {
        return data_[((b * shape_[1] + y) * shape_[2] + x) * shape_[3] + c];
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    std::string shape_str() const { return shape_to_string(shape_); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static std::size_t count_of(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<double>;

namespace detail {
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}
}  // namespace detail

/// Matrix product with deterministic left-to-right summation over the
/// inner dimension.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2,
                    "matmul expects 2-D tensors, got " + a.shape_str() + " and " + b.shape_str());
    detail::require(a.dim(1) == b.dim(0),
                    "matmul inner dimensions disagree: " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
    TensorT<T> out({rows, cols});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < rows; ++i) {
        T* orow = po + i * cols;
        for (std::size_t k = 0; k < inner; ++k) {
            const T aik = pa[i * inner + k];
            const T* brow = pb + k * cols;
            for (std::size_t j = 0; j < cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

/// matmul(a^T, b) without materializing the transpose.
template <class T>
TensorT<T> matmul_at_b(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
                    "matmul_at_b row counts disagree: " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t inner = a.dim(0), rows = a.dim(1), cols = b.dim(1);
    TensorT<T> out({rows, cols});
    for (std::size_t k = 0; k < inner; ++k)
        for (std::size_t i = 0; i < rows; ++i) {
            const T aki = a.at2(k, i);
            for (std::size_t j = 0; j < cols; ++j) out.at2(i, j) += aki * b.at2(k, j);
        }
    return out;
}

/// matmul(a, b^T) without materializing the transpose.
template <class T>
TensorT<T> matmul_a_bt(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                    "matmul_a_bt column counts disagree: " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(0);
    TensorT<T> out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            T acc{};
            for (std::size_t k = 0; k < inner; ++k) acc += a.at2(i, k) * b.at2(j, k);
            out.at2(i, j) = acc;
        }
    return out;
}

/// 5x5 stride-1 convolution with SAME zero padding.
/// input: batch x h x w x cin, kernels: 5 x 5 x cin x cout, bias: cout.
template <class T>
TensorT<T> conv2d_same(const TensorT<T>& input, const TensorT<T>& kernels,
                       const TensorT<T>& bias) {
    detail::require(input.rank() == 4, "conv2d_same input must be 4-D, got " + input.shape_str());
    detail::require(kernels.rank() == 4 && kernels.dim(0) == 5 && kernels.dim(1) == 5,
                    "conv2d_same kernels must be 5x5xCinxCout, got " + kernels.shape_str());
    detail::require(kernels.dim(2) == input.dim(3),
                    "conv2d_same channel mismatch: input " + input.shape_str() +
                        " vs kernels " + kernels.shape_str());
    detail::require(bias.size() == kernels.dim(3),
                    "conv2d_same bias length must equal output channels");
    const std::size_t batch = input.dim(0), h = input.dim(1), w = input.dim(2),
                      cin = input.dim(3), cout = kernels.dim(3);
    TensorT<T> out({batch, h, w, cout});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t co = 0; co < cout; ++co) out.at4(b, y, x, co) = bias[co];
                for (std::size_t dy = 0; dy < 5; ++dy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - 2;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t dx = 0; dx < 5; ++dx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - 2;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const T v = input.at4(b, static_cast<std::size_t>(iy),
                                                  static_cast<std::size_t>(ix), ci);
                            for (std::size_t co = 0; co < cout; ++co)
                                out.at4(b, y, x, co) +=
                                    v * kernels[((dy * 5 + dx) * cin + ci) * cout + co];
                        }
                    }
                }
            }
    return out;
}

/// Gradients of conv2d_same w.r.t. input, kernels and bias.
template <class T>
void conv2d_same_backward(const TensorT<T>& input, const TensorT<T>& kernels,
                          const TensorT<T>& grad_out, TensorT<T>& grad_input,
                          TensorT<T>& grad_kernels, TensorT<T>& grad_bias) {
    const std::size_t batch = input.dim(0), h = input.dim(1), w = input.dim(2),
                      cin = input.dim(3), cout = kernels.dim(3);
    grad_input = TensorT<T>(input.shape());
    grad_kernels = TensorT<T>(kernels.shape());
    grad_bias = TensorT<T>({cout});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t co = 0; co < cout; ++co)
                    grad_bias[co] += grad_out.at4(b, y, x, co);
                for (std::size_t dy = 0; dy < 5; ++dy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - 2;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t dx = 0; dx < 5; ++dx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - 2;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const std::size_t kidx = ((dy * 5 + dx) * cin + ci) * cout;
                            const T v = input.at4(b, static_cast<std::size_t>(iy),
                                                  static_cast<std::size_t>(ix), ci);
                            T gin{};
                            for (std::size_t co = 0; co < cout; ++co) {
                                const T g = grad_out.at4(b, y, x, co);
                                grad_kernels[kidx + co] += v * g;
                                gin += kernels[kidx + co] * g;
                            }
                            grad_input.at4(b, static_cast<std::size_t>(iy),
                                           static_cast<std::size_t>(ix), ci) += gin;
                        }
                    }
                }
            }
}

template <class T>
struct MaxPoolResult {
    TensorT<T> output;
    // flat index into the input tensor of each output cell's winner
    std::vector<std::size_t> argmax;
};

/// 2x2 max pooling. Odd spatial dims pool with ceil division; edge blocks
/// are truncated (equivalent to -inf padding).
template <class T>
MaxPoolResult<T> maxpool_2x2(const TensorT<T>& input) {
    detail::require(input.rank() == 4, "maxpool_2x2 input must be 4-D, got " + input.shape_str());
    const std::size_t batch = input.dim(0), h = input.dim(1), w = input.dim(2),
                      c = input.dim(3);
    detail::require(h > 0 && w > 0, "maxpool_2x2 requires nonzero spatial dims, got " +
                                        input.shape_str());
    const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    MaxPoolResult<T> res{TensorT<T>({batch, oh, ow, c}), {}};
    res.argmax.resize(res.output.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t dy = 0; dy < 2; ++dy) {
                        const std::size_t iy = 2 * oy + dy;
                        if (iy >= h) continue;
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t ix = 2 * ox + dx;
                            if (ix >= w) continue;
                            const std::size_t idx = ((b * h + iy) * w + ix) * c + ch;
                            if (input[idx] > best) {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const std::size_t oidx = ((b * oh + oy) * ow + ox) * c + ch;
                    res.output[oidx] = best;
                    res.argmax[oidx] = best_idx;
                }
    return res;
}

template <class T>
TensorT<T> maxpool_2x2_backward(const std::vector<std::size_t>& argmax,
                                const TensorT<T>& grad_out,
                                const std::vector<std::size_t>& input_shape) {
    TensorT<T> grad_in(input_shape);
    for (std::size_t i = 0; i < grad_out.size(); ++i) grad_in[argmax[i]] += grad_out[i];
    return grad_in;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    return out;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = T{1} / (T{1} + std::exp(-x[i]));
    return out;
}

/// Row-wise softmax with max subtraction. Input must be batch x classes.
template <class T>
TensorT<T> softmax(const TensorT<T>& logits) {
    detail::require(logits.rank() == 2, "softmax input must be 2-D, got " + logits.shape_str());
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    TensorT<T> out(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = logits.at2(r, 0);
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits.at2(r, c));
        T sum{};
        for (std::size_t c = 0; c < cols; ++c) {
            const T e = std::exp(logits.at2(r, c) - mx);
            out.at2(r, c) = e;
            sum += e;
        }
        for (std::size_t c = 0; c < cols; ++c) out.at2(r, c) /= sum;
    }
    return out;
}

/// Mean over the batch of -log(prob of true class); probabilities clamped
/// to >= 1e-12 before the log.
template <class T>
double cross_entropy(const TensorT<T>& probs, const TensorT<T>& labels) {
    detail::require(probs.rank() == 2 && labels.rank() == 2,
                    "cross_entropy expects 2-D probs and labels");
    detail::require(probs.dim(0) == labels.dim(0) && probs.dim(1) == labels.dim(1),
                    "cross_entropy batch mismatch: " + probs.shape_str() + " vs " +
                        labels.shape_str());
    const std::size_t rows = probs.dim(0), cols = probs.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            if (labels.at2(r, c) != T{0})
                total += -static_cast<double>(labels.at2(r, c)) *
                         std::log(std::max(static_cast<double>(probs.at2(r, c)), 1e-12));
    return total / static_cast<double>(rows);
}

/// Central-difference gradient of a scalar function; test oracle for all
/// backward kernels.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double eps = 1e-5) {
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace parsgd
