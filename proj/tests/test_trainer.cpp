#include <doctest.h>

#include <cstring>
#include <thread>
#include <vector>

#include "parsgd/trainer.hpp"

using namespace parsgd;

namespace {

template <class R, class Fn>
std::vector<R> run_group(int p, Fn fn) {
    auto group = make_inprocess_group(p);
    std::vector<R> results(p);
    std::vector<std::exception_ptr> errors(p);
    std::vector<std::thread> threads;
    for (int r = 0; r < p; ++r)
        threads.emplace_back([&, r] {
            try {
                results[r] = fn(*group[r]);
            } catch (...) {
                errors[r] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

ArchitectureSpec blob_arch(std::size_t features, std::size_t classes) {
    ArchitectureSpec arch;
    arch.name = "blob-dnn";
    arch.input_shape = {features};
    arch.layers = {Layer::dense(16, Activation::sigmoid), Layer::softmax_output(classes)};
    return arch;
}

// serial reference: the p=1 run of the same options
TrainResult<double> serial_run(const Dataset& train, const Dataset& test,
                               const ArchitectureSpec& arch, TrainOptions opt) {
    auto group = make_inprocess_group(1);
    return train_distributed<double>(*group[0], arch, opt, &train, &test);
}

}  // namespace

TEST_CASE("partition_indices covers [0, m) with near-equal contiguous slices") {
    const auto parts = partition_indices(10, 3);
    REQUIRE(parts.size() == 3);
    CHECK(parts[0] == std::pair<std::size_t, std::size_t>{0, 4});
    CHECK(parts[1] == std::pair<std::size_t, std::size_t>{4, 3});
    CHECK(parts[2] == std::pair<std::size_t, std::size_t>{7, 3});

    for (std::size_t m : {1u, 7u, 64u, 1000u})
        for (std::size_t p : {1u, 2u, 3u, 5u, 8u}) {
            if (m < p) continue;
            const auto ps = partition_indices(m, p);
            std::size_t total = 0, expect_off = 0;
            std::size_t lo = m, hi = 0;
            for (const auto& [off, len] : ps) {
                CHECK(off == expect_off);
                expect_off += len;
                total += len;
                lo = std::min(lo, len);
                hi = std::max(hi, len);
            }
            CHECK(total == m);
            CHECK(hi - lo <= 1);
            CHECK(ps[0].second == hi);  // larger shards first
        }

    CHECK_THROWS_AS(partition_indices(2, 3), DataError);
}

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("scatter_shards hands every rank its contiguous slice") {
    const Dataset ds = synthetic_blobs(10, 3, 2, 5);
    auto results = run_group<Shard>(3, [&](Communicator& comm) {
        return scatter_shards<double>(comm, 0, comm.rank() == 0 ? &ds : nullptr);
    });
    std::size_t off = 0;
    for (int r = 0; r < 3; ++r) {
        const auto& shard = results[static_cast<std::size_t>(r)];
        CHECK(shard.global_offset == off);
        const std::size_t len = shard.samples.dim(0);
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t f = 0; f < 3; ++f)
                CHECK(shard.samples.at2(i, f) == ds.samples.at2(off + i, f));
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t c = 0; c < 2; ++c)
                CHECK(shard.labels.at2(i, c) == ds.labels.at2(off + i, c));
        off += len;
    }
    CHECK(off == 10);
}

TEST_CASE("scatter_shards raises DataError on every rank when m < p") {
    const Dataset tiny = synthetic_blobs(2, 3, 2, 5);
    auto group = make_inprocess_group(4);
    std::vector<bool> threw(4, false);
    std::vector<std::thread> threads;
    for (int r = 0; r < 4; ++r)
        threads.emplace_back([&, r] {
            try {
                scatter_shards<double>(*group[r], 0, r == 0 ? &tiny : nullptr);
            } catch (const DataError&) {
                threw[static_cast<std::size_t>(r)] = true;
            }
        });
    for (auto& t : threads) t.join();
    for (int r = 0; r < 4; ++r) CHECK(threw[static_cast<std::size_t>(r)]);
}

TEST_CASE("evaluate counts argmax hits and breaks ties to the lowest class") {
    ArchitectureSpec arch = blob_arch(2, 2);
    // direct check against a hand-built probability table via a trivial net:
    // use evaluate's forward path with zero params => uniform probs => tie =>
    // predicted class 0 for every sample.
    ParameterSet params = init_params<double>(arch, 0);
    for (auto& l : params.layers) {
        std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
        std::fill(l.biases.values().begin(), l.biases.values().end(), 0.0);
    }
    Tensor samples({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor labels({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
    CHECK(evaluate(arch, params, samples, labels) == 0.5);

    CHECK_THROWS_AS(evaluate(arch, params, Tensor({0, 2}), Tensor({0, 2})), DataError);
}

TEST_CASE("single-rank training reduces loss on separable blobs") {
    const Dataset ds = synthetic_blobs(256, 4, 2, 11);
    auto [train, test] = split_dataset(ds, 192);
    TrainOptions opt;
    opt.hyper.epochs = 20;
    opt.hyper.learning_rate = 0.5;
    opt.hyper.batch_size = 32;
    opt.hyper.seed = 3;
    const auto res = serial_run(train, test, blob_arch(4, 2), opt);
    REQUIRE(res.report.epochs.size() == 20);
    CHECK(res.report.epochs.back().loss < res.report.epochs.front().loss);
    CHECK(res.report.test_accuracy > 0.9);
}

TEST_CASE("replicas stay bit-identical and reports agree across ranks") {
    const Dataset ds = synthetic_blobs(120, 4, 3, 21);
    auto [train, test] = split_dataset(ds, 96);
    for (auto sync : {SyncGranularity::per_epoch, SyncGranularity::per_batch}) {
        TrainOptions opt;
        opt.hyper.epochs = 3;
        opt.hyper.batch_size = 16;
        opt.hyper.seed = 9;
        opt.hyper.sync = sync;
        auto results = run_group<TrainResult<double>>(4, [&](Communicator& comm) {
            return train_distributed<double>(comm, blob_arch(4, 3), opt,
                                             comm.rank() == 0 ? &train : nullptr,
                                             comm.rank() == 0 ? &test : nullptr);
        });
        const auto flat0 = results[0].params.flatten();
        for (int r = 1; r < 4; ++r) {
            const auto flat = results[static_cast<std::size_t>(r)].params.flatten();
            REQUIRE(flat.size() == flat0.size());
            CHECK(std::memcmp(flat.data(), flat0.data(), flat.size() * sizeof(double)) == 0);
            CHECK(results[static_cast<std::size_t>(r)].report.test_accuracy ==
                  results[0].report.test_accuracy);
            CHECK(results[static_cast<std::size_t>(r)].report.sync_count ==
                  results[0].report.sync_count);
        }
    }
}

TEST_CASE("sync_count matches the granularity") {
    const Dataset ds = synthetic_blobs(128, 4, 2, 33);
    TrainOptions opt;
    opt.hyper.epochs = 2;
    opt.hyper.batch_size = 16;

    opt.hyper.sync = SyncGranularity::per_epoch;
    auto per_epoch = run_group<TrainResult<double>>(2, [&](Communicator& comm) {
        return train_distributed<double>(comm, blob_arch(4, 2), opt,
                                         comm.rank() == 0 ? &ds : nullptr, nullptr);
    });
    CHECK(per_epoch[0].report.sync_count == 2);

    opt.hyper.sync = SyncGranularity::per_batch;
    auto per_batch = run_group<TrainResult<double>>(2, [&](Communicator& comm) {
        return train_distributed<double>(comm, blob_arch(4, 2), opt,
                                         comm.rank() == 0 ? &ds : nullptr, nullptr);
    });
    // 64 samples per shard, batch 16 => 4 batches per epoch, 2 epochs
    CHECK(per_batch[0].report.sync_count == 8);
}

TEST_CASE("per-batch gradient averaging reproduces the serial batch trajectory") {
    // one global batch per sync with contiguous shards equals serial SGD on
    // the concatenated batch when batch = shard size (same mean gradient)
    const std::size_t features = 3, classes = 2;
    const Dataset ds = synthetic_blobs(32, features, classes, 17);
    const auto arch = blob_arch(features, classes);

    TrainOptions opt;
    opt.hyper.epochs = 4;
    opt.hyper.batch_size = 16;  // = shard size at p=2 => one batch per epoch
    opt.hyper.seed = 7;
    opt.hyper.sync = SyncGranularity::per_batch;
    opt.average_gradients = true;
    auto dist = run_group<TrainResult<double>>(2, [&](Communicator& comm) {
        return train_distributed<double>(comm, arch, opt,
                                         comm.rank() == 0 ? &ds : nullptr, nullptr);
    });

    // serial oracle: full-batch steps over the same per-rank sample order
    ParameterSet params = init_params<double>(arch, opt.hyper.seed);
    const auto parts = partition_indices(32, 2);
    std::vector<std::mt19937_64> rngs{std::mt19937_64(7), std::mt19937_64(8)};
    std::vector<std::vector<std::size_t>> orders(2, std::vector<std::size_t>(16));
    for (auto& o : orders)
        for (std::size_t i = 0; i < 16; ++i) o[i] = i;
    for (std::size_t epoch = 0; epoch < 4; ++epoch) {
        for (int r = 0; r < 2; ++r) std::shuffle(orders[r].begin(), orders[r].end(), rngs[r]);
        ParameterSet mean = params;
        for (auto& l : mean.layers) {
            std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
            std::fill(l.biases.values().begin(), l.biases.values().end(), 0.0);
        }
        for (int r = 0; r < 2; ++r) {
            Tensor batch({16, features});
            Tensor labels({16, classes});
            for (std::size_t i = 0; i < 16; ++i) {
                const std::size_t g = parts[static_cast<std::size_t>(r)].first + orders[r][i];
                for (std::size_t f = 0; f < features; ++f)
                    batch.at2(i, f) = ds.samples.at2(g, f);
                for (std::size_t c = 0; c < classes; ++c)
                    labels.at2(i, c) = ds.labels.at2(g, c);
            }
            const auto g = backward(arch, params, forward(arch, params, batch), labels);
            for (std::size_t l = 0; l < mean.layers.size(); ++l) {
                for (std::size_t i = 0; i < mean.layers[l].weights.size(); ++i)
                    mean.layers[l].weights[i] += g.layers[l].weights[i] / 2.0;
                for (std::size_t i = 0; i < mean.layers[l].biases.size(); ++i)
                    mean.layers[l].biases[i] += g.layers[l].biases[i] / 2.0;
            }
        }
        sgd_step_inplace(params, mean, opt.hyper.learning_rate);
    }

    const auto got = dist[0].params.flatten();
    const auto want = params.flatten();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("distributed accuracy tracks the serial baseline on easy data") {
    const Dataset ds = synthetic_blobs(400, 6, 3, 99);
    auto [train, test] = split_dataset(ds, 300);
    TrainOptions opt;
    opt.hyper.epochs = 15;
    opt.hyper.learning_rate = 0.5;
    opt.hyper.batch_size = 25;
    opt.hyper.seed = 4;
    const auto serial = serial_run(train, test, blob_arch(6, 3), opt);
    auto dist = run_group<TrainResult<double>>(4, [&](Communicator& comm) {
        return train_distributed<double>(comm, blob_arch(6, 3), opt,
                                         comm.rank() == 0 ? &train : nullptr,
                                         comm.rank() == 0 ? &test : nullptr);
    });
    CHECK(serial.report.test_accuracy > 0.9);
    CHECK(dist[0].report.test_accuracy > 0.85);
    CHECK(std::abs(dist[0].report.test_accuracy - serial.report.test_accuracy) <= 0.1);
}

TEST_CASE("f32 training runs and syncs ship 4-byte elements") {
    const Dataset ds = synthetic_blobs(64, 4, 2, 55);
    TrainOptions opt;
    opt.hyper.epochs = 2;
    opt.hyper.batch_size = 16;
    opt.hyper.precision = Precision::f32;
    auto results = run_group<TrainResult<float>>(2, [&](Communicator& comm) {
        return train_distributed<float>(comm, blob_arch(4, 2), opt,
                                        comm.rank() == 0 ? &ds : nullptr, nullptr);
    });
    const auto& rep = results[0].report;
    CHECK(rep.sync_count == 2);
    const std::size_t flat = results[0].params.flat_size();
    // tree allreduce at p=2: each sync moves one up + one down payload of
    // flat * 4 bytes across the group
    CHECK(rep.sync_bytes_all_ranks == rep.sync_count * 2 * flat * 4);
}

TEST_CASE("time budget stops all ranks at the same epoch") {
    const Dataset ds = synthetic_blobs(64, 4, 2, 66);
    TrainOptions opt;
    opt.hyper.epochs = 100000;
    opt.hyper.batch_size = 16;
    opt.time_budget_s = 0.2;
    auto results = run_group<TrainResult<double>>(2, [&](Communicator& comm) {
        return train_distributed<double>(comm, blob_arch(4, 2), opt,
                                         comm.rank() == 0 ? &ds : nullptr, nullptr);
    });
    CHECK(results[0].report.epochs.size() < 100000);
    CHECK(results[0].report.epochs.size() == results[1].report.epochs.size());
}
