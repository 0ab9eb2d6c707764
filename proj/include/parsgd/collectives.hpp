#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace parsgd {

struct CommError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PeerDisconnectedError : CommError {
    int peer_rank;
    explicit PeerDisconnectedError(int rank)
        : CommError("peer rank " + std::to_string(rank) + " disconnected"), peer_rank(rank) {}
};

struct TimeoutError : CommError {
    using CommError::CommError;
};

struct LengthMismatchError : CommError {
    using CommError::CommError;
};

enum class ElementType : std::uint8_t { f64 = 0, f32 = 1, u8 = 2 };

inline std::size_t element_width(ElementType t) {
    switch (t) {
        case ElementType::f64: return 8;
        case ElementType::f32: return 4;
        case ElementType::u8: return 1;
    }
    return 0;
}

template <class T>
constexpr ElementType element_type_of();
template <>
constexpr ElementType element_type_of<double>() { return ElementType::f64; }
template <>
constexpr ElementType element_type_of<float>() { return ElementType::f32; }
template <>
constexpr ElementType element_type_of<unsigned char>() { return ElementType::u8; }

struct Message {
    std::uint32_t tag = 0;
    int source = -1;
    ElementType etype = ElementType::u8;
    std::vector<unsigned char> payload;
};

/// One rank of a fixed-size process group. Point-to-point semantics:
/// messages between a (source, dest) pair with equal tags arrive in send
/// order. A Communicator is confined to its owning thread.
class Communicator {
public:
    virtual ~Communicator() = default;

    int rank() const { return rank_; }
    int size() const { return size_; }

    virtual void send_message(int dest, std::uint32_t tag, ElementType etype,
                              const void* data, std::size_t nbytes) = 0;
    virtual Message recv_message(int source, std::uint32_t tag) = 0;

    /// Marks the group as failed; peers blocked in communication throw
    /// PeerDisconnectedError instead of hanging.
    virtual void abort() = 0;

    std::uint64_t bytes_sent() const { return bytes_sent_.load(); }

    std::chrono::milliseconds timeout{30000};

protected:
    Communicator(int rank, int size) : rank_(rank), size_(size) {}
    int rank_;
    int size_;
    std::atomic<std::uint64_t> bytes_sent_{0};
};

// Tags at and above this value are reserved for collectives.
constexpr std::uint32_t kInternalTagBase = 0x7f000000u;
namespace tags {
constexpr std::uint32_t reduce = kInternalTagBase + 1;
constexpr std::uint32_t bcast = kInternalTagBase + 2;
constexpr std::uint32_t recursive_doubling = kInternalTagBase + 3;
constexpr std::uint32_t scatter = kInternalTagBase + 4;
constexpr std::uint32_t barrier_up = kInternalTagBase + 5;
constexpr std::uint32_t barrier_down = kInternalTagBase + 6;
}  // namespace tags

template <class T>
void send(Communicator& comm, int dest, std::uint32_t tag, const std::vector<T>& values) {
    comm.send_message(dest, tag, element_type_of<T>(), values.data(),
                      values.size() * sizeof(T));
}

template <class T>
std::vector<T> recv(Communicator& comm, int source, std::uint32_t tag) {
    Message msg = comm.recv_message(source, tag);
    if (msg.etype != element_type_of<T>())
        throw CommError("element type mismatch on recv(source=" + std::to_string(source) +
                        ", tag=" + std::to_string(tag) + ")");
    std::vector<T> out(msg.payload.size() / sizeof(T));
    std::memcpy(out.data(), msg.payload.data(), msg.payload.size());
    return out;
}

/// Binomial-tree broadcast; delivers the root's array bit-identically.
template <class T>
void broadcast(Communicator& comm, int root, std::vector<T>& values,
               std::uint32_t tag = tags::bcast) {
    const int p = comm.size();
    if (p == 1) return;
    const int vr = (comm.rank() - root + p) % p;
    for (int mask = 1; mask < p; mask <<= 1) {
        if (vr < mask) {
            if (vr + mask < p) send(comm, (vr + mask + root) % p, tag, values);
        } else if (vr < 2 * mask) {
            values = recv<T>(comm, (vr - mask + root) % p, tag);
        }
    }
}

/// Binomial-tree reduce to root with a fixed association order. Returns
/// the reduced array at root, an empty vector elsewhere.
template <class T>
std::vector<T> reduce_sum(Communicator& comm, int root, std::vector<T> values,
                          std::uint32_t tag = tags::reduce) {
    const int p = comm.size();
    const int vr = (comm.rank() - root + p) % p;
    for (int mask = 1; mask < p; mask <<= 1) {
        if (vr & mask) {
            send(comm, (vr - mask + root) % p, tag, values);
            return {};
        }
        if (vr + mask < p) {
            std::vector<T> in = recv<T>(comm, (vr + mask + root) % p, tag);
            if (in.size() != values.size())
                throw LengthMismatchError("reduce length mismatch: rank " +
                                          std::to_string(comm.rank()) + " has " +
                                          std::to_string(values.size()) + " elements, rank " +
                                          std::to_string((vr + mask + root) % p) + " sent " +
                                          std::to_string(in.size()));
            for (std::size_t i = 0; i < values.size(); ++i) values[i] += in[i];
        }
    }
    return values;
}

enum class AllreduceAlgo {
    tree_deterministic,  // reduce to rank 0 + broadcast, bit-identical everywhere
    recursive_doubling,  // log2(p) exchange rounds for power-of-two p
};

/// Recursive-doubling allreduce. For non-power-of-two p the excess ranks
/// fold into the nearest lower power of two before the doubling rounds and
/// receive the result afterwards. rounds_out counts only the pairwise
/// doubling exchanges.
template <class T>
std::vector<T> allreduce_sum_recursive_doubling(Communicator& comm, std::vector<T> values,
                                                int* rounds_out = nullptr) {
    const int p = comm.size();
    const int rank = comm.rank();
    int pof2 = 1;
    while (pof2 * 2 <= p) pof2 *= 2;
    const int rem = p - pof2;
    int rounds = 0;

    int newrank;
    if (rank < 2 * rem) {
        if (rank % 2 == 0) {
            send(comm, rank + 1, tags::recursive_doubling, values);
            newrank = -1;
        } else {
            std::vector<T> in = recv<T>(comm, rank - 1, tags::recursive_doubling);
            if (in.size() != values.size())
                throw LengthMismatchError("allreduce length mismatch between ranks " +
                                          std::to_string(rank - 1) + " and " +
                                          std::to_string(rank));
            for (std::size_t i = 0; i < values.size(); ++i) values[i] += in[i];
            newrank = rank / 2;
        }
    } else {
        newrank = rank - rem;
    }

    if (newrank != -1) {
        for (int mask = 1; mask < pof2; mask <<= 1) {
            const int newdst = newrank ^ mask;
            const int dst = newdst < rem ? newdst * 2 + 1 : newdst + rem;
            // lower rank sends first so paired blocking exchanges cannot deadlock
            std::vector<T> in;
            if (rank < dst) {
                send(comm, dst, tags::recursive_doubling, values);
                in = recv<T>(comm, dst, tags::recursive_doubling);
            } else {
                in = recv<T>(comm, dst, tags::recursive_doubling);
                send(comm, dst, tags::recursive_doubling, values);
            }
            if (in.size() != values.size())
                throw LengthMismatchError("allreduce length mismatch between ranks " +
                                          std::to_string(rank) + " and " + std::to_string(dst));
            for (std::size_t i = 0; i < values.size(); ++i) values[i] += in[i];
            ++rounds;
        }
    }

    if (rank < 2 * rem) {
        if (rank % 2 == 1)
            send(comm, rank - 1, tags::recursive_doubling, values);
        else
            values = recv<T>(comm, rank + 1, tags::recursive_doubling);
    }
    if (rounds_out) *rounds_out = rounds;
    return values;
}

/// Elementwise sum over all ranks, delivered to every rank.
template <class T>
std::vector<T> allreduce_sum(Communicator& comm, std::vector<T> values,
                             AllreduceAlgo algo = AllreduceAlgo::tree_deterministic,
                             int* rounds_out = nullptr) {
    if (comm.size() == 1) {
        if (rounds_out) *rounds_out = 0;
        return values;
    }
    if (algo == AllreduceAlgo::recursive_doubling)
        return allreduce_sum_recursive_doubling(comm, std::move(values), rounds_out);
    std::vector<T> reduced = reduce_sum(comm, 0, std::move(values));
    broadcast(comm, 0, reduced);
    if (rounds_out) *rounds_out = 0;
    return reduced;
}

template <class T>
std::vector<T> allreduce_average(Communicator& comm, std::vector<T> values,
                                 AllreduceAlgo algo = AllreduceAlgo::tree_deterministic) {
    std::vector<T> sum = allreduce_sum(comm, std::move(values), algo);
    const T inv_p = T{1} / static_cast<T>(comm.size());
    for (T& v : sum) v *= inv_p;
    return sum;
}

inline void barrier(Communicator& comm) {
    std::vector<unsigned char> token{1};
    std::vector<unsigned char> gathered = reduce_sum(comm, 0, token, tags::barrier_up);
    std::vector<unsigned char> release{1};
    broadcast(comm, 0, release, tags::barrier_down);
}

/// Root-held array split into per-rank slices; counts must be agreed on
/// all ranks. Returns rank's own slice.
template <class T>
std::vector<T> scatter(Communicator& comm, int root, const std::vector<T>& all,
                       const std::vector<std::size_t>& counts) {
    const int p = comm.size();
    if (comm.rank() == root) {
        std::size_t offset = 0;
        std::vector<T> mine;
        for (int r = 0; r < p; ++r) {
            if (r == root) {
                mine.assign(all.begin() + static_cast<std::ptrdiff_t>(offset),
                            all.begin() + static_cast<std::ptrdiff_t>(offset + counts[r]));
            } else {
                std::vector<T> slice(all.begin() + static_cast<std::ptrdiff_t>(offset),
                                     all.begin() + static_cast<std::ptrdiff_t>(offset + counts[r]));
                send(comm, r, tags::scatter, slice);
            }
            offset += counts[r];
        }
        return mine;
    }
    return recv<T>(comm, root, tags::scatter);
}

/// p ranks as p threads over ordered in-memory queues.
std::vector<std::unique_ptr<Communicator>> make_inprocess_group(int p);

}  // namespace parsgd
