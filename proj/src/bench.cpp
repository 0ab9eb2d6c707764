#include "parsgd/bench.hpp"

#include <sys/socket.h>
#include <netinet/in.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "parsgd/tcp.hpp"

namespace parsgd {

namespace {

struct RankOutcome {
    TrainReport report;
    std::exception_ptr error;
};

template <class T>
TrainReport run_rank(Communicator& comm, const ArchitectureSpec& arch,
                     const TrainOptions& opt, const Dataset* train, const Dataset* test) {
    return train_distributed<T>(comm, arch, opt, train, test).report;
}

TrainReport run_rank_dispatch(Communicator& comm, const ArchitectureSpec& arch,
                              const TrainOptions& opt, const Dataset* train,
                              const Dataset* test) {
    if (opt.hyper.precision == Precision::f32)
        return run_rank<float>(comm, arch, opt, train, test);
    return run_rank<double>(comm, arch, opt, train, test);
}

ArchitectureSpec resolve_arch(const BenchConfig& config) {
    if (!config.arch_override.layers.empty()) return config.arch_override;
    return build_architecture(config.arch_tag);
}

BenchRecord record_from_report(int p, double wall, const TrainReport& report) {
    BenchRecord rec;
    rec.p = p;
    rec.wall_seconds = wall;
    rec.epochs = report.epochs.size();
    rec.accuracy = report.test_accuracy;
    rec.bytes = report.sync_bytes_all_ranks;
    return rec;
}

BenchRecord run_point_inprocess(const BenchConfig& config, int p, const Dataset& train,
                                const Dataset& test) {
    auto comms = make_inprocess_group(p);
    std::vector<RankOutcome> outcomes(static_cast<std::size_t>(p));
    const ArchitectureSpec arch = resolve_arch(config);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(p));
    for (int r = 0; r < p; ++r) {
        workers.emplace_back([&, r] {
            auto& outcome = outcomes[static_cast<std::size_t>(r)];
            try {
                outcome.report =
                    run_rank_dispatch(*comms[static_cast<std::size_t>(r)], arch, config.train,
                                      r == 0 ? &train : nullptr, r == 0 ? &test : nullptr);
            } catch (...) {
                outcome.error = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& outcome : outcomes)
        if (outcome.error) std::rethrow_exception(outcome.error);
    return record_from_report(p, wall, outcomes[0].report);
}

std::uint16_t pick_free_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw CommError("cannot create socket for port probe");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
        ::close(fd);
        throw CommError("cannot bind probe socket");
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    ::close(fd);
    return ntohs(addr.sin_port);
}

BenchRecord run_point_tcp(const BenchConfig& config, int p, const Dataset& train,
                          const Dataset& test) {
    const std::uint16_t port =
        config.tcp_base_port ? config.tcp_base_port : pick_free_port();
    const ArchitectureSpec arch = resolve_arch(config);

    int pipefd[2];
    if (::pipe(pipefd) != 0) throw CommError("cannot create result pipe");

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<pid_t> children;
    for (int r = 0; r < p; ++r) {
        const pid_t pid = ::fork();
        if (pid < 0) throw CommError("transport launch failure: fork failed");
        if (pid == 0) {
            ::close(pipefd[0]);
            int code = 0;
            try {
                TcpOptions opts;
                opts.root_port = port;
                TcpCommunicator comm(r, p, opts);
                const TrainReport report =
                    run_rank_dispatch(comm, arch, config.train, r == 0 ? &train : nullptr,
                                      r == 0 ? &test : nullptr);
                if (r == 0) {
                    char line[160];
                    const int n = std::snprintf(
                        line, sizeof(line), "epochs=%zu accuracy=%.17g bytes=%" PRIu64 "\n",
                        report.epochs.size(), report.test_accuracy,
                        report.sync_bytes_all_ranks);
                    if (::write(pipefd[1], line, static_cast<std::size_t>(n)) != n) code = 2;
                }
            } catch (const DataError&) {
                code = 3;
            } catch (const std::exception&) {
                code = 2;
            }
            ::close(pipefd[1]);
            ::_exit(code);
        }
        children.push_back(pid);
    }
    ::close(pipefd[1]);

    std::string result;
    char buf[256];
    ssize_t n;
    while ((n = ::read(pipefd[0], buf, sizeof(buf))) > 0)
        result.append(buf, static_cast<std::size_t>(n));
    ::close(pipefd[0]);

    int worst = 0;
    for (pid_t pid : children) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 2;
        worst = std::max(worst, code);
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (worst == 3) throw DataError("tcp worker reported a data error");
    if (worst != 0) throw CommError("tcp worker failed with exit code " + std::to_string(worst));

    TrainReport report;
    std::size_t epochs = 0;
    double accuracy = -1.0;
    std::uint64_t bytes = 0;
    if (std::sscanf(result.c_str(), "epochs=%zu accuracy=%lg bytes=%" SCNu64, &epochs,
                    &accuracy, &bytes) != 3)
        throw CommError("tcp worker produced no result record");
    BenchRecord rec;
    rec.p = p;
    rec.wall_seconds = wall;
    rec.epochs = epochs;
    rec.accuracy = accuracy;
    rec.bytes = bytes;
    return rec;
}

}  // namespace

BenchRecord run_point(const BenchConfig& config, int p, const Dataset& train,
                      const Dataset& test) {
    const unsigned cores = std::thread::hardware_concurrency();
    if (cores && static_cast<unsigned>(p) > cores)
        std::fprintf(stderr,
                     "warning: sweep point p=%d oversubscribes the %u available cores\n", p,
                     cores);
    if (config.transport == Transport::tcp) return run_point_tcp(config, p, train, test);
    return run_point_inprocess(config, p, train, test);
}

std::vector<BenchRecord> run_sweep(const BenchConfig& config, const Dataset& train,
                                   const Dataset& test) {
    if (config.procs.empty()) throw std::invalid_argument("empty process sweep");
    if (!std::is_sorted(config.procs.begin(), config.procs.end()))
        throw std::invalid_argument("process sweep must be sorted ascending");
    if (std::find(config.procs.begin(), config.procs.end(), config.baseline) ==
        config.procs.end())
        throw std::invalid_argument("baseline process count must be in the sweep list");

    std::vector<BenchRecord> records;
    for (int p : config.procs) records.push_back(run_point(config, p, train, test));

    double baseline_wall = 0.0;
    for (const BenchRecord& rec : records)
        if (rec.p == config.baseline) baseline_wall = rec.wall_seconds;
    for (BenchRecord& rec : records)
        rec.speedup = rec.p == config.baseline ? 1.0 : baseline_wall / rec.wall_seconds;
    return records;
}

std::string emit_table(const std::vector<BenchRecord>& records, TableFormat format) {
    std::string out;
    char line[256];
    if (format == TableFormat::csv) {
        out = "p,wall_seconds,epochs,accuracy,bytes,speedup\n";
        for (const BenchRecord& r : records) {
            std::snprintf(line, sizeof(line), "%d,%.17g,%zu,%.17g,%" PRIu64 ",%.17g\n", r.p,
                          r.wall_seconds, r.epochs, r.accuracy, r.bytes, r.speedup);
            out += line;
        }
        return out;
    }
    out = "| p | wall_seconds | epochs | accuracy | bytes | speedup |\n";
    out += "|---|---|---|---|---|---|\n";
    for (const BenchRecord& r : records) {
        std::snprintf(line, sizeof(line), "| %d | %.3f | %zu | %.4f | %" PRIu64 " | %.2f |\n",
                      r.p, r.wall_seconds, r.epochs, r.accuracy, r.bytes, r.speedup);
        out += line;
    }
    return out;
}

std::vector<BenchRecord> parse_csv_table(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "p,wall_seconds,epochs,accuracy,bytes,speedup")
        throw std::invalid_argument("bad bench CSV header");
    std::vector<BenchRecord> records;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        BenchRecord r;
        if (std::sscanf(line.c_str(), "%d,%lg,%zu,%lg,%" SCNu64 ",%lg", &r.p, &r.wall_seconds,
                        &r.epochs, &r.accuracy, &r.bytes, &r.speedup) != 6)
            throw std::invalid_argument("bad bench CSV row: " + line);
        records.push_back(r);
    }
    return records;
}

void write_table_file(const std::string& path, const std::string& text, bool force) {
    if (!force) {
        std::ifstream probe(path);
        if (probe.good())
            throw std::runtime_error("refusing to overwrite existing output: " + path +
                                     " (pass --force)");
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open output file: " + path);
    os << text;
}

}  // namespace parsgd
