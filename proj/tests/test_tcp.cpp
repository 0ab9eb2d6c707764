#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <random>
#include <thread>
#include <vector>

#include "parsgd/tcp.hpp"

using namespace parsgd;

namespace {

std::uint16_t pick_free_port() {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
    socklen_t len = sizeof(addr);
    REQUIRE(::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
    const std::uint16_t port = ntohs(addr.sin_port);
    ::close(fd);
    return port;
}

// Runs fn(comm) on every rank of a loopback TCP group, one thread per rank.
template <class R, class Fn>
std::vector<R> run_tcp_group(int p, Fn fn) {
    const std::uint16_t port = pick_free_port();
    std::vector<R> results(p);
    std::vector<std::exception_ptr> errors(p);
    std::vector<std::thread> threads;
    for (int r = 0; r < p; ++r)
        threads.emplace_back([&, r] {
            try {
                TcpOptions opt;
                opt.root_port = port;
                TcpCommunicator comm(r, p, opt);
                results[r] = fn(comm);
            } catch (...) {
                errors[r] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

}  // namespace

TEST_CASE("frame encode/decode round-trips every field") {
    const std::vector<double> payload{1.25, -9.5, 3e100};
    const auto frame = encode_frame(42, 7, ElementType::f64, payload.data(),
                                    payload.size() * sizeof(double));
    // header: 4 magic + 1 version + 4 tag + 4 source + 1 etype + 8 count
    REQUIRE(frame.size() == 22 + payload.size() * sizeof(double));
    CHECK(frame[0] == 'M');
    CHECK(frame[1] == 'P');
    CHECK(frame[2] == 'L');
    CHECK(frame[3] == 'T');
    CHECK(frame[4] == 1);

    const Message msg = decode_frame(frame.data(), frame.size());
    CHECK(msg.tag == 42);
    CHECK(msg.source == 7);
    CHECK(msg.etype == ElementType::f64);
    REQUIRE(msg.payload.size() == payload.size() * sizeof(double));
    CHECK(std::memcmp(msg.payload.data(), payload.data(), msg.payload.size()) == 0);
}

TEST_CASE("decode_frame rejects malformed input") {
    const std::vector<double> payload{1.0};
    auto frame = encode_frame(1, 0, ElementType::f64, payload.data(), sizeof(double));

    auto bad_magic = frame;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_frame(bad_magic.data(), bad_magic.size()), CommError);

    auto bad_version = frame;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_frame(bad_version.data(), bad_version.size()), CommError);

    CHECK_THROWS_AS(decode_frame(frame.data(), 10), CommError);

    auto truncated = frame;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_frame(truncated.data(), truncated.size()), CommError);
}

TEST_CASE("tcp point-to-point matches in-order delivery semantics") {
    auto results = run_tcp_group<std::vector<double>>(2, [](Communicator& comm) {
        if (comm.rank() == 0) {
            send(comm, 1, 3, std::vector<double>{10.0, 20.0});
            send(comm, 1, 3, std::vector<double>{30.0});
            return std::vector<double>{};
        }
        auto a = recv<double>(comm, 0, 3);
        auto b = recv<double>(comm, 0, 3);
        a.insert(a.end(), b.begin(), b.end());
        return a;
    });
    CHECK(results[1] == std::vector<double>{10.0, 20.0, 30.0});
}

TEST_CASE("tcp allreduce agrees with the serial sum across 4 ranks") {
    const std::size_t n = 1000;
    std::vector<std::vector<double>> inputs;
    std::vector<double> expected(n, 0.0);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int r = 0; r < 4; ++r) {
        inputs.emplace_back(n);
        for (auto& v : inputs.back()) {
            v = dist(rng);
        }
        for (std::size_t i = 0; i < n; ++i) expected[i] += inputs.back()[i];
    }
    auto results = run_tcp_group<std::vector<double>>(4, [&](Communicator& comm) {
        return allreduce_sum(comm, inputs[static_cast<std::size_t>(comm.rank())]);
    });
    for (int r = 0; r < 4; ++r) {
        REQUIRE(results[r].size() == n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(results[r][i] == doctest::Approx(expected[i]).epsilon(1e-12));
        // deterministic tree result is bit-identical on every rank
        CHECK(std::memcmp(results[r].data(), results[0].data(), n * sizeof(double)) == 0);
    }
}

TEST_CASE("tcp recursive doubling works across 4 ranks") {
    auto results = run_tcp_group<std::vector<double>>(4, [](Communicator& comm) {
        std::vector<double> v{static_cast<double>(comm.rank() + 1)};
        return allreduce_sum(comm, std::move(v), AllreduceAlgo::recursive_doubling);
    });
    for (const auto& r : results) CHECK(r[0] == doctest::Approx(10.0));
}

TEST_CASE("tcp barrier and broadcast complete on 3 ranks") {
    auto results = run_tcp_group<std::vector<double>>(3, [](Communicator& comm) {
        barrier(comm);
        std::vector<double> v = comm.rank() == 1 ? std::vector<double>{5.5} : std::vector<double>{};
        broadcast(comm, 1, v);
        return v;
    });
    for (const auto& r : results) CHECK(r == std::vector<double>{5.5});
}

TEST_CASE("a departed peer surfaces as PeerDisconnectedError, not a hang") {
    CHECK_THROWS_AS(
        run_tcp_group<int>(2,
                           [](Communicator& comm) {
                               if (comm.rank() == 1) return 0;  // rank 1 exits immediately
                               comm.timeout = std::chrono::milliseconds(10000);
                               recv<double>(comm, 1, 9);
                               return 0;
                           }),
        PeerDisconnectedError);
}

TEST_CASE("tcp recv from a silent peer times out") {
    std::atomic<bool> done{false};
    CHECK_THROWS_AS(run_tcp_group<int>(2,
                                       [&](Communicator& comm) {
                                           if (comm.rank() == 0) {
                                               comm.timeout = std::chrono::milliseconds(200);
                                               try {
                                                   recv<double>(comm, 1, 11);
                                               } catch (...) {
                                                   done = true;
                                                   throw;
                                               }
                                           } else {
                                               // stay alive until rank 0 times out
                                               while (!done)
                                                   std::this_thread::sleep_for(
                                                       std::chrono::milliseconds(10));
                                           }
                                           return 0;
                                       }),
                    TimeoutError);
}

TEST_CASE("tcp bytes_sent grows with traffic") {
    auto results = run_tcp_group<std::uint64_t>(2, [](Communicator& comm) {
        if (comm.rank() == 0)
            send(comm, 1, 2, std::vector<double>(100, 1.0));
        else
            recv<double>(comm, 0, 2);
        return comm.bytes_sent();
    });
    CHECK(results[0] >= 800);
}
