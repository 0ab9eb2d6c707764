#include <CLI11.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "parsgd/bench.hpp"
#include "parsgd/perfmodel.hpp"
#include "parsgd/tcp.hpp"

namespace {

using namespace parsgd;

struct DataFlags {
    std::string data_dir = ".";
    std::size_t blobs_m = 10000;
    std::size_t blobs_features = 32;
    std::size_t blobs_classes = 4;
    std::uint64_t blobs_seed = 1;
};

bool file_exists(const std::string& path) { return std::ifstream(path).good(); }

// Loads the (train, test) pair for a dataset tag. Loaders run at rank 0
// only; callers on other ranks never call this.
std::pair<Dataset, Dataset> load_pair(const std::string& tag, const DataFlags& flags) {
    const std::string& dir = flags.data_dir;
    if (tag == "blobs" || tag == "synthetic") {
        Dataset train = synthetic_blobs(flags.blobs_m, flags.blobs_features,
                                        flags.blobs_classes, flags.blobs_seed);
        Dataset test = synthetic_blobs(std::max<std::size_t>(flags.blobs_m / 5,
                                                             flags.blobs_classes),
                                       flags.blobs_features, flags.blobs_classes,
                                       flags.blobs_seed + 1);
        return {train, test};
    }
    if (tag == "mnist") {
        return {load_idx(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte"),
                load_idx(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte")};
    }
    if (tag == "cifar10") {
        std::vector<std::string> train_paths;
        for (int i = 1; i <= 5; ++i)
            train_paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
        return {load_cifar10_binary(train_paths),
                load_cifar10_binary({dir + "/test_batch.bin"})};
    }
    if (tag == "adult") {
        Dataset train = load_libsvm(dir + "/a9a", 123, 2);
        Dataset test = load_libsvm(dir + "/a9a.t", 123, 2);
        const Normalization norm = standardize_fit(train);
        standardize_apply(norm, train);
        standardize_apply(norm, test);
        return {train, test};
    }
    if (tag == "acoustic") {
        Dataset train = load_libsvm(dir + "/acoustic", 50, 3);
        Dataset test = load_libsvm(dir + "/acoustic.t", 50, 3);
        const Normalization norm = standardize_fit(train);
        standardize_apply(norm, train);
        standardize_apply(norm, test);
        return {train, test};
    }
    if (tag == "higgs") {
        Dataset all = load_libsvm(dir + "/HIGGS", 28, 2);
        if (all.sample_count() <= 100000)
            throw DataError("HIGGS file too small for the 100,000-sample test split");
        auto [train, test] = split_dataset(all, all.sample_count() - 100000);
        const Normalization norm = standardize_fit(train);
        standardize_apply(norm, train);
        standardize_apply(norm, test);
        return {train, test};
    }
    throw DataError("unknown dataset tag: " + tag);
}

// blobs-dnn sizes itself from the synthetic-data flags; everything else is
// a table architecture.
ArchitectureSpec resolve_arch(const std::string& tag, const DataFlags& data) {
    if (tag == "blobs-dnn") {
        ArchitectureSpec arch;
        arch.name = "blobs-dnn";
        arch.input_shape = {data.blobs_features};
        arch.layers = {Layer::dense(200, Activation::sigmoid),
                       Layer::dense(100, Activation::sigmoid),
                       Layer::softmax_output(data.blobs_classes)};
        return arch;
    }
    return build_architecture(tag);
}

// CNN architectures keep image tensors; DNN variants train on flat rows.
void match_shapes(const ArchitectureSpec& arch, Dataset& train, Dataset& test) {
    if (arch.input_shape.size() == 1 && train.samples.rank() > 2) {
        train = flatten_samples(train);
        test = flatten_samples(test);
    }
}

struct CommonFlags {
    std::string dataset = "blobs";
    std::string arch = "mnist-dnn";
    DataFlags data;
    TrainOptions train;
    std::string sync = "per_epoch";
    std::string precision = "f64";
    std::string transport = "inprocess";
    std::string algo = "tree";
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--dataset", f.dataset,
                    "dataset tag: mnist|cifar10|adult|acoustic|higgs|blobs");
    cmd->add_option("--arch", f.arch, "architecture tag (see README)");
    cmd->add_option("--data-dir", f.data.data_dir, "directory holding the dataset files");
    cmd->add_option("--blobs-m", f.data.blobs_m, "synthetic sample count");
    cmd->add_option("--blobs-features", f.data.blobs_features, "synthetic feature count");
    cmd->add_option("--blobs-classes", f.data.blobs_classes, "synthetic class count");
    cmd->add_option("--lr", f.train.hyper.learning_rate, "learning rate");
    cmd->add_option("--batch", f.train.hyper.batch_size, "mini-batch size");
    cmd->add_option("--epochs", f.train.hyper.epochs, "epoch budget");
    cmd->add_option("--time-budget", f.train.time_budget_s, "wall-clock budget in seconds");
    cmd->add_option("--seed", f.train.hyper.seed, "global seed");
    cmd->add_option("--sync", f.sync, "sync granularity: per_batch|per_epoch");
    cmd->add_option("--precision", f.precision, "f32|f64");
    cmd->add_option("--transport", f.transport, "inprocess|tcp");
    cmd->add_option("--allreduce", f.algo, "tree|recursive_doubling");
    cmd->add_flag("--deterministic,!--no-deterministic", f.train.deterministic,
                  "verify bit-identical replicas after every sync");
    cmd->add_flag("--average-gradients", f.train.average_gradients,
                  "average gradients instead of parameters (per_batch only)");
}

void finish_common(CommonFlags& f) {
    f.train.hyper.sync =
        f.sync == "per_batch" ? SyncGranularity::per_batch : SyncGranularity::per_epoch;
    f.train.hyper.precision = f.precision == "f32" ? Precision::f32 : Precision::f64;
    f.train.algo = f.algo == "recursive_doubling" ? AllreduceAlgo::recursive_doubling
                                                  : AllreduceAlgo::tree_deterministic;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const DataError*>(&e)) return 3;
    if (dynamic_cast<const CommError*>(&e)) return 2;
    return 2;
}

int cmd_train(CommonFlags& f, int procs, const std::string& listen, int rank, int size,
              const std::string& checkpoint_out) {
    finish_common(f);
    f.train.progress = true;

    if (f.transport == "tcp" && size > 0) {
        // manual multi-process launch: one invocation per rank
        TcpOptions opts;
        const std::size_t colon = listen.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("--listen must be host:port");
        opts.root_host = listen.substr(0, colon);
        opts.root_port = static_cast<std::uint16_t>(std::stoi(listen.substr(colon + 1)));
        TcpCommunicator comm(rank, size, opts);
        Dataset train, test;
        if (rank == 0) std::tie(train, test) = load_pair(f.dataset, f.data);
        const ArchitectureSpec arch = resolve_arch(f.arch, f.data);
        if (rank == 0) match_shapes(arch, train, test);
        const auto result = train_distributed<double>(comm, arch, f.train,
                                                      rank == 0 ? &train : nullptr,
                                                      rank == 0 ? &test : nullptr);
        if (rank == 0) {
            std::printf("accuracy=%.6f syncs=%" PRIu64 "\n", result.report.test_accuracy,
                        result.report.sync_count);
            if (!checkpoint_out.empty())
                save_checkpoint(checkpoint_out, f.arch, result.params);
        }
        return 0;
    }

    auto [train, test] = load_pair(f.dataset, f.data);
    const ArchitectureSpec arch = resolve_arch(f.arch, f.data);
    match_shapes(arch, train, test);

    BenchConfig config;
    config.arch_tag = f.arch;
    config.arch_override = arch;
    config.train = f.train;
    config.transport = f.transport == "tcp" ? Transport::tcp : Transport::inprocess;
    const BenchRecord rec = run_point(config, procs, train, test);
    std::printf("p=%d wall_seconds=%.3f epochs=%zu accuracy=%.6f bytes=%" PRIu64 "\n", rec.p,
                rec.wall_seconds, rec.epochs, rec.accuracy, rec.bytes);
    if (!checkpoint_out.empty()) {
        // re-derive the final parameters deterministically for the checkpoint
        auto comms = make_inprocess_group(1);
        TrainOptions solo = f.train;
        const auto result = train_distributed<double>(*comms[0], arch, solo, &train, &test);
        save_checkpoint(checkpoint_out, f.arch, result.params);
    }
    return 0;
}

int cmd_bench(CommonFlags& f, const std::string& procs_csv, int baseline,
              const std::string& out, bool force, const std::string& format,
              const std::string& hosts) {
    finish_common(f);
    if (!hosts.empty()) {
        std::ifstream is(hosts);
        std::string host;
        while (is >> host)
            if (host != "localhost" && host != "127.0.0.1")
                throw std::invalid_argument(
                    "host list entry '" + host +
                    "': remote launch is manual, run the train subcommand per host");
    }

    BenchConfig config;
    config.dataset_tag = f.dataset;
    config.arch_tag = f.arch;
    config.train = f.train;
    config.transport = f.transport == "tcp" ? Transport::tcp : Transport::inprocess;
    config.baseline = baseline;
    config.procs.clear();
    std::stringstream ss(procs_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) config.procs.push_back(std::stoi(tok));

    auto [train, test] = load_pair(f.dataset, f.data);
    const ArchitectureSpec arch = resolve_arch(f.arch, f.data);
    match_shapes(arch, train, test);
    config.arch_override = arch;

    const auto records = run_sweep(config, train, test);
    const std::string text = emit_table(
        records, format == "markdown" ? TableFormat::markdown : TableFormat::csv);
    if (out.empty())
        std::fputs(text.c_str(), stdout);
    else
        write_table_file(out, text, force);
    return 0;
}

int cmd_perfmodel(CommonFlags& f, const std::string& procs_csv, double m, double syncs,
                  double flop_rate, double bandwidth, double latency, double width,
                  const std::string& n_mode, const std::string& measured_csv) {
    const ArchitectureSpec arch = resolve_arch(f.arch, f.data);
    double n, l;
    l = 0;
    for (const Layer& layer : arch.layers)
        if (layer.kind == Layer::Kind::dense || layer.kind == Layer::Kind::conv5x5 ||
            layer.kind == Layer::Kind::softmax_output)
            l += 1;
    if (n_mode == "exact") {
        // per-layer sums folded back into the n^2*l form
        n = std::sqrt(comm_volume_exact(arch) / l);
    } else {
        n = max_layer_width(arch);
    }

    std::vector<BenchRecord> measured;
    if (!measured_csv.empty()) {
        std::ifstream is(measured_csv);
        if (!is) throw DataError("cannot open measured results: " + measured_csv);
        std::stringstream buf;
        buf << is.rdbuf();
        measured = parse_csv_table(buf.str());
    }

    std::printf("p,t_predicted_s,t_measured_s,speedup_predicted,speedup_measured\n");
    PerfModelInput input;
    input.samples_per_epoch = m;
    input.neurons_per_layer = n;
    input.layer_count = l;
    input.flop_rate = flop_rate;
    input.bandwidth = bandwidth;
    input.latency = latency;
    input.element_width = width;
    std::stringstream ss(procs_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        input.process_count = std::stoi(tok);
        const double t_pred = predicted_epoch_seconds(input, syncs);
        const double s_pred = predicted_speedup(input, syncs);
        double t_meas = std::nan(""), s_meas = std::nan("");
        for (const BenchRecord& rec : measured)
            if (rec.p == input.process_count) {
                t_meas = rec.wall_seconds;
                s_meas = rec.speedup;
            }
        std::printf("%d,%.17g,%.17g,%.17g,%.17g\n", input.process_count, t_pred, t_meas,
                    s_pred, s_meas);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synchronous data-parallel SGD trainer and strong-scaling benchmark"};
    app.require_subcommand(1);

    CommonFlags train_flags, bench_flags, perf_flags;

    auto* train_cmd = app.add_subcommand("train", "run one distributed training job");
    add_common(train_cmd, train_flags);
    int procs = 1, rank = 0, size = 0;
    std::string listen = "127.0.0.1:29400", checkpoint_out;
    train_cmd->add_option("--procs", procs, "rank count (inprocess transport)");
    train_cmd->add_option("--rank", rank, "this process's rank (tcp transport)");
    train_cmd->add_option("--size", size, "total rank count (tcp transport)");
    train_cmd->add_option("--listen", listen, "rank 0 rendezvous address host:port");
    train_cmd->add_option("--checkpoint-out", checkpoint_out, "write final parameters here");

    auto* bench_cmd = app.add_subcommand("bench", "sweep process counts and emit a table");
    add_common(bench_cmd, bench_flags);
    std::string procs_csv = "1,2,4", out_path, format = "csv", hosts;
    int baseline = 1;
    bool force = false;
    bench_cmd->add_option("--procs", procs_csv, "comma-separated process counts, ascending");
    bench_cmd->add_option("--baseline", baseline, "baseline process count for speedups");
    bench_cmd->add_option("--out", out_path, "output table path (stdout when omitted)");
    bench_cmd->add_option("--format", format, "csv|markdown");
    bench_cmd->add_option("--hosts", hosts, "host list file for tcp sweeps");
    bench_cmd->add_flag("--force", force, "overwrite an existing output file");

    auto* perf_cmd = app.add_subcommand("perfmodel", "emit predicted scaling curves");
    add_common(perf_cmd, perf_flags);
    std::string pm_procs = "1,2,4,8,16,32", n_mode = "exact", measured_csv;
    double pm_m = 60000, pm_syncs = 1, pm_flop_rate = 2e9, pm_bandwidth = 1e9,
           pm_latency = 1e-5, pm_width = 8;
    perf_cmd->add_option("--procs", pm_procs, "comma-separated process counts");
    perf_cmd->add_option("--m", pm_m, "samples per epoch");
    perf_cmd->add_option("--syncs-per-epoch", pm_syncs, "sync points per epoch");
    perf_cmd->add_option("--flop-rate", pm_flop_rate, "FLOP/s per process");
    perf_cmd->add_option("--bandwidth", pm_bandwidth, "bytes/s");
    perf_cmd->add_option("--latency", pm_latency, "seconds per message");
    perf_cmd->add_option("--width", pm_width, "element width in bytes");
    perf_cmd->add_option("--n-mode", n_mode, "max|exact layer-width evaluation");
    perf_cmd->add_option("--measured", measured_csv, "bench CSV to join as measured columns");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed())
            return cmd_train(train_flags, procs, listen, rank, size, checkpoint_out);
        if (bench_cmd->parsed())
            return cmd_bench(bench_flags, procs_csv, baseline, out_path, force, format, hosts);
        if (perf_cmd->parsed())
            return cmd_perfmodel(perf_flags, pm_procs, pm_m, pm_syncs, pm_flop_rate,
                                 pm_bandwidth, pm_latency, pm_width, n_mode, measured_csv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    }
    return 0;
}
