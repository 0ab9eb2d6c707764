#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "parsgd/collectives.hpp"
#include "parsgd/datasets.hpp"
#include "parsgd/model.hpp"

namespace parsgd {

/// Contiguous near-equal slices covering [0, m); lengths differ by at most
/// one, larger shards first. Throws DataError when m < p.
std::vector<std::pair<std::size_t, std::size_t>> partition_indices(std::size_t m,
                                                                   std::size_t p);

std::uint64_t fnv1a64(const void* data, std::size_t nbytes);

template <class T>
struct ShardT {
    TensorT<T> samples;
    TensorT<T> labels;
    std::size_t global_offset = 0;
};
using Shard = ShardT<double>;

struct EpochStats {
    double loss = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double test_accuracy = -1.0;  // -1 when no test set was given
    std::uint64_t sync_count = 0;
    std::uint64_t sync_bytes_all_ranks = 0;  // payload bytes across all ranks, syncs only
    double learning_rate = 0.0;              // the rate is not rescaled with p
    std::size_t batch_size = 0;
    int world_size = 1;

    double bytes_per_sync_per_rank() const {
        if (sync_count == 0 || world_size == 0) return 0.0;
        return static_cast<double>(sync_bytes_all_ranks) /
               (static_cast<double>(sync_count) * world_size);
    }
};

struct TrainOptions {
    HyperParams hyper;
    AllreduceAlgo algo = AllreduceAlgo::tree_deterministic;
    bool deterministic = true;       // verify replica hashes after every sync
    bool average_gradients = false;  // average gradients instead of parameters (per_batch only)
    bool progress = false;           // epoch=<i> rank=<r> loss=<f> secs=<f> lines on stderr
    double time_budget_s = 0.0;      // > 0: rank 0 stops the job after this many seconds
};

/// Rank 0 holds the dataset; every rank receives its contiguous shard.
/// Shard sizes are agreed on all ranks, so m is broadcast first and a
/// too-small dataset raises DataError consistently everywhere.
template <class T>
ShardT<T> scatter_shards(Communicator& comm, int root, const Dataset* dataset_at_root) {
    // header: m, rows-per-sample width, class count, sample dims beyond the first
    std::vector<double> header;
    if (comm.rank() == root) {
        if (!dataset_at_root) throw DataError("root rank has no dataset");
        const auto& shape = dataset_at_root->samples.shape();
        header = {static_cast<double>(dataset_at_root->sample_count()),
                  static_cast<double>(dataset_at_root->class_count),
                  static_cast<double>(shape.size() - 1)};
        for (std::size_t d = 1; d < shape.size(); ++d)
            header.push_back(static_cast<double>(shape[d]));
    } else {
        header.resize(3);
    }
    broadcast(comm, root, header);
    const auto m = static_cast<std::size_t>(header[0]);
    const auto classes = static_cast<std::size_t>(header[1]);
    const auto extra_dims = static_cast<std::size_t>(header[2]);
    std::vector<std::size_t> sample_dims;
    std::size_t row_width = 1;
    for (std::size_t d = 0; d < extra_dims; ++d) {
        sample_dims.push_back(static_cast<std::size_t>(header[3 + d]));
        row_width *= sample_dims.back();
    }

    const auto parts = partition_indices(m, static_cast<std::size_t>(comm.size()));
    std::vector<std::size_t> sample_counts, label_counts;
    for (const auto& [off, len] : parts) {
        sample_counts.push_back(len * row_width);
        label_counts.push_back(len * classes);
    }

    std::vector<T> all_samples, all_labels;
    if (comm.rank() == root) {
        all_samples.assign(dataset_at_root->samples.values().begin(),
                           dataset_at_root->samples.values().end());
        all_labels.assign(dataset_at_root->labels.values().begin(),
                          dataset_at_root->labels.values().end());
    }
    std::vector<T> my_samples = scatter(comm, root, all_samples, sample_counts);
    std::vector<T> my_labels = scatter(comm, root, all_labels, label_counts);

    const auto& [offset, len] = parts[static_cast<std::size_t>(comm.rank())];
    ShardT<T> shard;
    shard.global_offset = offset;
    std::vector<std::size_t> sshape{len};
    sshape.insert(sshape.end(), sample_dims.begin(), sample_dims.end());
    shard.samples = TensorT<T>(sshape, std::move(my_samples));
    shard.labels = TensorT<T>({len, classes}, std::move(my_labels));
    return shard;
}

/// Fraction of argmax predictions equal to the labels; ties break to the
/// lowest class index.
template <class T>
double evaluate(const ArchitectureSpec& arch, const ParameterSetT<T>& params,
                const TensorT<T>& samples, const TensorT<T>& labels,
                std::size_t eval_batch = 256) {
    const std::size_t m = samples.dim(0);
    if (m == 0) throw DataError("evaluate on empty test set");
    const std::size_t row = samples.size() / m;
    const std::size_t classes = labels.dim(1);
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < m; begin += eval_batch) {
        const std::size_t len = std::min(eval_batch, m - begin);
        std::vector<std::size_t> bshape = samples.shape();
        bshape[0] = len;
        TensorT<T> batch(bshape, {samples.values().begin() +
                                      static_cast<std::ptrdiff_t>(begin * row),
                                  samples.values().begin() +
                                      static_cast<std::ptrdiff_t>((begin + len) * row)});
        const auto trace = forward(arch, params, batch);
        for (std::size_t i = 0; i < len; ++i) {
            std::size_t pred = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (trace.probs.at2(i, c) > trace.probs.at2(i, pred)) pred = c;
            if (labels.at2(begin + i, pred) != T{0}) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(m);
}

namespace detail_trainer {

template <class T>
void assert_replicas_identical(Communicator& comm, const std::vector<T>& flat) {
    const std::uint64_t h = fnv1a64(flat.data(), flat.size() * sizeof(T));
    std::vector<unsigned char> root_hash(8);
    for (int i = 0; i < 8; ++i) root_hash[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(h >> (8 * i));
    broadcast(comm, 0, root_hash);
    std::uint64_t rh = 0;
    for (int i = 0; i < 8; ++i)
        rh |= static_cast<std::uint64_t>(root_hash[static_cast<std::size_t>(i)]) << (8 * i);
    std::vector<unsigned char> mismatch{static_cast<unsigned char>(rh == h ? 0 : 1)};
    mismatch = allreduce_sum(comm, mismatch);
    if (mismatch[0] != 0)
        throw CommError("replica parameter hash mismatch after sync at rank " +
                        std::to_string(comm.rank()));
}

template <class T>
TensorT<T> gather_rows(const TensorT<T>& src, const std::vector<std::size_t>& order,
                       std::size_t begin, std::size_t len) {
    const std::size_t row = src.size() / src.dim(0);
    std::vector<std::size_t> shape = src.shape();
    shape[0] = len;
    TensorT<T> out(shape);
    for (std::size_t i = 0; i < len; ++i) {
        const std::size_t r = order[begin + i];
        std::copy(src.values().begin() + static_cast<std::ptrdiff_t>(r * row),
                  src.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * row),
                  out.values().begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    return out;
}

}  // namespace detail_trainer

template <class T>
struct TrainResult {
    TrainReport report;
    ParameterSetT<T> params;
};

/// The synchronous data-parallel loop: identical replicas from a shared
/// seed, rank-0 sharding, local mini-batch SGD, and allreduce-averaged
/// weights and biases at every sync point. On any failure the job aborts
/// the whole group rather than continuing degraded.
template <class T>
TrainResult<T> train_distributed(Communicator& comm, const ArchitectureSpec& arch,
                                 const TrainOptions& opt, const Dataset* train_at_root,
                                 const Dataset* test_at_root) {
    try {
        const HyperParams& hp = opt.hyper;
        if (opt.average_gradients && hp.sync != SyncGranularity::per_batch)
            throw std::invalid_argument("gradient averaging requires per_batch sync");

        TrainResult<T> result;
        result.params = init_params<T>(arch, hp.seed);
        result.report.learning_rate = hp.learning_rate;
        result.report.batch_size = hp.batch_size;
        result.report.world_size = comm.size();

        ShardT<T> shard = scatter_shards<T>(comm, 0, train_at_root);
        const std::size_t local_m = shard.samples.dim(0);

        // every rank must join the same number of collectives, so the batch
        // count per epoch is the maximum over all shards
        std::size_t max_shard = 0;
        {
            std::vector<double> probe{static_cast<double>(local_m)};
            // shards differ by at most one; the largest is rank 0's
            std::vector<double> m0 = probe;
            broadcast(comm, 0, m0);
            max_shard = static_cast<std::size_t>(m0[0]);
        }
        const std::size_t batches_per_epoch = (max_shard + hp.batch_size - 1) / hp.batch_size;
        const std::size_t local_batches = (local_m + hp.batch_size - 1) / hp.batch_size;

        std::mt19937_64 shuffle_rng(hp.seed + static_cast<std::uint64_t>(comm.rank()));
        std::vector<std::size_t> order(local_m);
        for (std::size_t i = 0; i < local_m; ++i) order[i] = i;

        std::uint64_t sync_bytes_local = 0;
        auto sync_params = [&]() {
            std::vector<T> flat = result.params.flatten();
            const std::uint64_t before = comm.bytes_sent();
            flat = allreduce_average(comm, std::move(flat), opt.algo);
            sync_bytes_local += comm.bytes_sent() - before;
            result.params.unflatten(flat);
            ++result.report.sync_count;
            if (opt.deterministic) detail_trainer::assert_replicas_identical(comm, flat);
        };

        const auto train_start = std::chrono::steady_clock::now();
        for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            double loss_sum = 0.0;
            for (std::size_t b = 0; b < batches_per_epoch; ++b) {
                if (b < local_batches) {
                    const std::size_t begin = b * hp.batch_size;
                    const std::size_t len = std::min(hp.batch_size, local_m - begin);
                    TensorT<T> batch =
                        detail_trainer::gather_rows(shard.samples, order, begin, len);
                    TensorT<T> labels =
                        detail_trainer::gather_rows(shard.labels, order, begin, len);
                    const auto trace = forward(arch, result.params, batch);
                    loss_sum += cross_entropy(trace.probs, labels);
                    ParameterSetT<T> grads = backward(arch, result.params, trace, labels);
                    if (opt.average_gradients) {
                        std::vector<T> flat;
                        flat.reserve(grads.flat_size());
                        flat = grads.flatten();
                        const std::uint64_t before = comm.bytes_sent();
                        flat = allreduce_average(comm, std::move(flat), opt.algo);
                        sync_bytes_local += comm.bytes_sent() - before;
                        grads.unflatten(flat);
                        ++result.report.sync_count;
                        sgd_step_inplace(result.params, grads, hp.learning_rate);
                        if (opt.deterministic)
                            detail_trainer::assert_replicas_identical(comm,
                                                                      result.params.flatten());
                        continue;
                    }
                    sgd_step_inplace(result.params, grads, hp.learning_rate);
                } else if (opt.average_gradients) {
                    // idle rank contributes a zero gradient
                    ParameterSetT<T> zero = result.params;
                    for (auto& l : zero.layers) {
                        std::fill(l.weights.values().begin(), l.weights.values().end(), T{});
                        std::fill(l.biases.values().begin(), l.biases.values().end(), T{});
                    }
                    std::vector<T> flat = zero.flatten();
                    const std::uint64_t before = comm.bytes_sent();
                    flat = allreduce_average(comm, std::move(flat), opt.algo);
                    sync_bytes_local += comm.bytes_sent() - before;
                    zero.unflatten(flat);
                    ++result.report.sync_count;
                    sgd_step_inplace(result.params, zero, hp.learning_rate);
                    if (opt.deterministic)
                        detail_trainer::assert_replicas_identical(comm,
                                                                  result.params.flatten());
                    continue;
                }
                if (hp.sync == SyncGranularity::per_batch && !opt.average_gradients)
                    sync_params();
            }
            if (hp.sync == SyncGranularity::per_epoch) sync_params();

            EpochStats stats;
            stats.loss = local_batches ? loss_sum / static_cast<double>(local_batches) : 0.0;
            stats.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.report.epochs.push_back(stats);
            if (opt.progress)
                std::fprintf(stderr, "epoch=%zu rank=%d loss=%.6f secs=%.3f\n", epoch,
                             comm.rank(), stats.loss, stats.seconds);

            if (opt.time_budget_s > 0.0 && epoch + 1 < hp.epochs) {
                // rank 0 owns the clock so every rank stops at the same epoch
                std::vector<unsigned char> stop{0};
                if (comm.rank() == 0) {
                    const double elapsed = std::chrono::duration<double>(
                                               std::chrono::steady_clock::now() - train_start)
                                               .count();
                    stop[0] = elapsed >= opt.time_budget_s ? 1 : 0;
                }
                broadcast(comm, 0, stop);
                if (stop[0]) break;
            }
        }

        // rank 0 evaluates; accuracy is shared so every rank's report agrees
        std::vector<double> acc{-1.0};
        if (comm.rank() == 0 && test_at_root && test_at_root->sample_count() > 0)
            acc[0] = evaluate(arch, result.params,
                              TensorT<T>(test_at_root->samples.shape(),
                                         std::vector<T>(test_at_root->samples.values().begin(),
                                                        test_at_root->samples.values().end())),
                              TensorT<T>(test_at_root->labels.shape(),
                                         std::vector<T>(test_at_root->labels.values().begin(),
                                                        test_at_root->labels.values().end())));
        broadcast(comm, 0, acc);
        result.report.test_accuracy = acc[0];

        std::vector<double> bytes{static_cast<double>(sync_bytes_local)};
        bytes = allreduce_sum(comm, bytes);
        result.report.sync_bytes_all_ranks = static_cast<std::uint64_t>(bytes[0]);
        return result;
    } catch (...) {
        comm.abort();
        throw;
    }
}

}  // namespace parsgd
