#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include "parsgd/collectives.hpp"

namespace parsgd {

/// TCP frame: magic "MPLT" | version u8=1 | tag u32 LE | source u32 LE |
/// element-type u8 (0=f64, 1=f32, 2=u8) | element-count u64 LE | payload LE.
std::vector<unsigned char> encode_frame(std::uint32_t tag, std::uint32_t source,
                                        ElementType etype, const void* data,
                                        std::size_t nbytes);

/// Parses one complete frame; throws CommError on malformed input.
Message decode_frame(const unsigned char* data, std::size_t len);

struct TcpOptions {
    std::string root_host = "127.0.0.1";
    std::uint16_t root_port = 0;                 // rank 0's listen port
    std::string advertise_host = "127.0.0.1";    // address peers use to reach this rank
    std::chrono::milliseconds connect_timeout{30000};
};

/// One rank of a TCP process group. Rendezvous: rank 0 listens on
/// root_host:root_port; peers connect, send a HELLO frame (tag 0) with
/// their rank and own listen address, and receive the address table
/// (tag 1). Peers then form a full mesh (higher rank connects).
class TcpCommunicator final : public Communicator {
public:
    TcpCommunicator(int rank, int size, const TcpOptions& options);
    ~TcpCommunicator() override;

    TcpCommunicator(const TcpCommunicator&) = delete;
    TcpCommunicator& operator=(const TcpCommunicator&) = delete;

    void send_message(int dest, std::uint32_t tag, ElementType etype, const void* data,
                      std::size_t nbytes) override;
    Message recv_message(int source, std::uint32_t tag) override;
    void abort() override;

private:
    void reader_loop(int peer);
    void mark_peer_dead(int peer);

    std::vector<int> peer_fd_;                       // -1 for self
    std::vector<std::unique_ptr<std::mutex>> send_mutex_;
    std::vector<std::thread> readers_;

    std::mutex inbox_mutex_;
    std::condition_variable inbox_cv_;
    std::deque<Message> inbox_;
    std::vector<bool> peer_dead_;
    bool aborted_ = false;
};

}  // namespace parsgd
