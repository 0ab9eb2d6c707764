#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "parsgd/tensor.hpp"

namespace parsgd {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Normalization {
    enum class Kind { none, pixel_scale, standardize };
    Kind kind = Kind::none;
    std::vector<double> mean;  // per feature (standardize only)
    std::vector<double> stddev;
};

struct Dataset {
    std::string name;
    Tensor samples;  // m x features, or m x h x w x c for images
    Tensor labels;   // m x classes, one-hot
    std::size_t class_count = 0;
    Normalization norm;

    std::size_t sample_count() const { return samples.rank() ? samples.dim(0) : 0; }
};

/// MNIST-style IDX pair (big-endian magic 0x00000803 / 0x00000801).
/// Pixels scaled to [0, 1]; output shape m x rows x cols x 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records, 1 label byte followed by
/// 3072 channel-planar RGB bytes. Pixels scaled to [0, 1].
Dataset load_cifar10_binary(const std::vector<std::string>& paths);

/// LibSVM text: `label idx:val idx:val ...` with 1-based indices. Absent
/// indices are zero; labels are remapped to 0-based in ascending order.
Dataset load_libsvm(const std::string& path, std::size_t feature_count,
                    std::size_t class_count);

/// Gaussian clusters with linearly separable means, balanced classes
/// (round-robin assignment), deterministic per seed.
Dataset synthetic_blobs(std::size_t m, std::size_t features, std::size_t classes,
                        std::uint64_t seed, double separation = 6.0);

/// Splits off the first train_count samples; the remainder is the test set.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t train_count);

/// Collapses image samples to m x (h*w*c) for the DNN variants.
Dataset flatten_samples(const Dataset& ds);

/// Per-feature mean/std fitted on the training set only.
Normalization standardize_fit(const Dataset& train);
void standardize_apply(const Normalization& norm, Dataset& ds);

}  // namespace parsgd
