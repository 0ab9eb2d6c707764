#include "parsgd/tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace parsgd {

namespace {

constexpr unsigned char kMagic[4] = {0x4D, 0x50, 0x4C, 0x54};  // "MPLT"
constexpr unsigned char kVersion = 1;
constexpr std::size_t kHeaderLen = 4 + 1 + 4 + 4 + 1 + 8;
constexpr std::uint32_t kHelloTag = 0;
constexpr std::uint32_t kTableTag = 1;

void put_u32(unsigned char* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}
void put_u64(unsigned char* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}
std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void write_all(int fd, const unsigned char* data, std::size_t len) {
    while (len > 0) {
        const ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw CommError(std::string("socket send failed: ") + std::strerror(errno));
        }
        data += n;
        len -= static_cast<std::size_t>(n);
    }
}

// returns false on orderly EOF at a frame boundary
bool read_all(int fd, unsigned char* data, std::size_t len) {
    std::size_t got = 0;
    while (got < len) {
        const ssize_t n = ::recv(fd, data + got, len - got, 0);
        if (n == 0) {
            if (got == 0) return false;
            throw CommError("socket closed mid-frame");
        }
        if (n < 0) {
            if (errno == EINTR) continue;
            throw CommError(std::string("socket recv failed: ") + std::strerror(errno));
        }
        got += static_cast<std::size_t>(n);
    }
    return true;
}

int make_listener(std::uint16_t port, std::uint16_t* bound_port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw CommError("cannot create socket");
    int yes = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
        ::close(fd);
        throw CommError("cannot bind port " + std::to_string(port) + ": " +
                        std::strerror(errno));
    }
    if (::listen(fd, 64) < 0) {
        ::close(fd);
        throw CommError("listen failed");
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    if (bound_port) *bound_port = ntohs(addr.sin_port);
    return fd;
}

int accept_with_deadline(int listener, std::chrono::steady_clock::time_point deadline) {
    for (;;) {
        const auto now = std::chrono::steady_clock::now();
        if (now >= deadline) throw TimeoutError("rendezvous accept timed out");
        pollfd pfd{listener, POLLIN, 0};
        const auto remain =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
        const int rc = ::poll(&pfd, 1, static_cast<int>(remain));
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw CommError("poll failed during rendezvous");
        }
        if (rc == 0) throw TimeoutError("rendezvous accept timed out");
        const int fd = ::accept(listener, nullptr, nullptr);
        if (fd >= 0) return fd;
        if (errno != EINTR) throw CommError("accept failed");
    }
}

int connect_with_retry(const std::string& host, std::uint16_t port,
                       std::chrono::steady_clock::time_point deadline) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw CommError("bad address: " + host);
    for (;;) {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw CommError("cannot create socket");
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
            int yes = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
            return fd;
        }
        ::close(fd);
        if (std::chrono::steady_clock::now() >= deadline)
            throw TimeoutError("connect to " + host + ":" + std::to_string(port) +
                               " timed out");
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
}

// Reads one frame from the socket; false on orderly EOF.
bool read_frame(int fd, Message* out) {
    unsigned char header[kHeaderLen];
    if (!read_all(fd, header, kHeaderLen)) return false;
    if (std::memcmp(header, kMagic, 4) != 0) throw CommError("bad frame magic");
    if (header[4] != kVersion) throw CommError("unsupported frame version");
    out->tag = get_u32(header + 5);
    out->source = static_cast<int>(get_u32(header + 9));
    const unsigned char et = header[13];
    if (et > 2) throw CommError("bad element type in frame");
    out->etype = static_cast<ElementType>(et);
    const std::uint64_t count = get_u64(header + 14);
    out->payload.resize(count * element_width(out->etype));
    if (!out->payload.empty() && !read_all(fd, out->payload.data(), out->payload.size()))
        throw CommError("socket closed mid-frame");
    return true;
}

void send_frame(int fd, std::uint32_t tag, std::uint32_t source, ElementType etype,
                const void* data, std::size_t nbytes) {
    const std::vector<unsigned char> frame = encode_frame(tag, source, etype, data, nbytes);
    write_all(fd, frame.data(), frame.size());
}

struct PeerAddr {
    std::string host;
    std::uint16_t port = 0;
};

std::vector<unsigned char> encode_table(const std::vector<PeerAddr>& table) {
    std::vector<unsigned char> buf;
    buf.resize(4);
    put_u32(buf.data(), static_cast<std::uint32_t>(table.size()));
    for (const PeerAddr& a : table) {
        unsigned char entry[4];
        entry[0] = static_cast<unsigned char>(a.port & 0xff);
        entry[1] = static_cast<unsigned char>(a.port >> 8);
        entry[2] = static_cast<unsigned char>(a.host.size() & 0xff);
        entry[3] = static_cast<unsigned char>(a.host.size() >> 8);
        buf.insert(buf.end(), entry, entry + 4);
        buf.insert(buf.end(), a.host.begin(), a.host.end());
    }
    return buf;
}

std::vector<PeerAddr> decode_table(const std::vector<unsigned char>& buf) {
    if (buf.size() < 4) throw CommError("truncated address table");
    const std::uint32_t n = get_u32(buf.data());
    std::vector<PeerAddr> table(n);
    std::size_t pos = 4;
    for (std::uint32_t i = 0; i < n; ++i) {
        if (pos + 4 > buf.size()) throw CommError("truncated address table");
        PeerAddr a;
        a.port = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
        const std::size_t hlen = static_cast<std::size_t>(buf[pos + 2] | (buf[pos + 3] << 8));
        pos += 4;
        if (pos + hlen > buf.size()) throw CommError("truncated address table");
        a.host.assign(reinterpret_cast<const char*>(buf.data() + pos), hlen);
        pos += hlen;
        table[i] = a;
    }
    return table;
}

}  // namespace

std::vector<unsigned char> encode_frame(std::uint32_t tag, std::uint32_t source,
                                        ElementType etype, const void* data,
                                        std::size_t nbytes) {
    const std::size_t width = element_width(etype);
    if (nbytes % width != 0) throw CommError("payload length not divisible by element width");
    std::vector<unsigned char> frame(kHeaderLen + nbytes);
    std::memcpy(frame.data(), kMagic, 4);
    frame[4] = kVersion;
    put_u32(frame.data() + 5, tag);
    put_u32(frame.data() + 9, source);
    frame[13] = static_cast<unsigned char>(etype);
    put_u64(frame.data() + 14, nbytes / width);
    if (nbytes) std::memcpy(frame.data() + kHeaderLen, data, nbytes);
    return frame;
}

Message decode_frame(const unsigned char* data, std::size_t len) {
    if (len < kHeaderLen) throw CommError("frame shorter than header");
    if (std::memcmp(data, kMagic, 4) != 0) throw CommError("bad frame magic");
    if (data[4] != kVersion) throw CommError("unsupported frame version");
    Message msg;
    msg.tag = get_u32(data + 5);
    msg.source = static_cast<int>(get_u32(data + 9));
    if (data[13] > 2) throw CommError("bad element type in frame");
    msg.etype = static_cast<ElementType>(data[13]);
    const std::uint64_t count = get_u64(data + 14);
    const std::size_t nbytes = count * element_width(msg.etype);
    if (len != kHeaderLen + nbytes) throw CommError("frame length mismatch");
    msg.payload.assign(data + kHeaderLen, data + kHeaderLen + nbytes);
    return msg;
}

TcpCommunicator::TcpCommunicator(int rank, int size, const TcpOptions& options)
    : Communicator(rank, size) {
    peer_fd_.assign(static_cast<std::size_t>(size), -1);
    peer_dead_.assign(static_cast<std::size_t>(size), false);
    send_mutex_.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) send_mutex_.push_back(std::make_unique<std::mutex>());

    const auto deadline = std::chrono::steady_clock::now() + options.connect_timeout;

    if (size == 1) return;

    std::uint16_t my_port = 0;
    const int listener =
        make_listener(rank == 0 ? options.root_port : 0, &my_port);

    try {
        if (rank == 0) {
            std::vector<PeerAddr> table(static_cast<std::size_t>(size));
            table[0] = {options.advertise_host, my_port};
            for (int n = 1; n < size; ++n) {
                const int fd = accept_with_deadline(listener, deadline);
                Message hello;
                if (!read_frame(fd, &hello) || hello.tag != kHelloTag)
                    throw CommError("expected HELLO frame during rendezvous");
                const int peer = hello.source;
                if (peer <= 0 || peer >= size || peer_fd_[static_cast<std::size_t>(peer)] != -1)
                    throw CommError("bad HELLO rank " + std::to_string(peer));
                const std::vector<PeerAddr> one = decode_table(hello.payload);
                table[static_cast<std::size_t>(peer)] = one.at(0);
                peer_fd_[static_cast<std::size_t>(peer)] = fd;
            }
            const std::vector<unsigned char> tbl = encode_table(table);
            for (int peer = 1; peer < size; ++peer)
                send_frame(peer_fd_[static_cast<std::size_t>(peer)], kTableTag, 0,
                           ElementType::u8, tbl.data(), tbl.size());
        } else {
            const int fd0 = connect_with_retry(options.root_host, options.root_port, deadline);
            const std::vector<unsigned char> me =
                encode_table({{options.advertise_host, my_port}});
            send_frame(fd0, kHelloTag, static_cast<std::uint32_t>(rank), ElementType::u8,
                       me.data(), me.size());
            Message tbl_msg;
            if (!read_frame(fd0, &tbl_msg) || tbl_msg.tag != kTableTag)
                throw CommError("expected address table during rendezvous");
            const std::vector<PeerAddr> table = decode_table(tbl_msg.payload);
            peer_fd_[0] = fd0;

            // full mesh among ranks >= 1: higher rank connects to lower
            for (int peer = 1; peer < rank; ++peer) {
                const PeerAddr& a = table.at(static_cast<std::size_t>(peer));
                const int fd = connect_with_retry(a.host, a.port, deadline);
                send_frame(fd, kHelloTag, static_cast<std::uint32_t>(rank), ElementType::u8,
                           nullptr, 0);
                peer_fd_[static_cast<std::size_t>(peer)] = fd;
            }
            for (int n = rank + 1; n < size; ++n) {
                const int fd = accept_with_deadline(listener, deadline);
                Message hello;
                if (!read_frame(fd, &hello) || hello.tag != kHelloTag)
                    throw CommError("expected HELLO frame during mesh setup");
                const int peer = hello.source;
                if (peer <= rank || peer >= size ||
                    peer_fd_[static_cast<std::size_t>(peer)] != -1)
                    throw CommError("bad mesh HELLO rank " + std::to_string(peer));
                peer_fd_[static_cast<std::size_t>(peer)] = fd;
            }
        }
    } catch (...) {
        ::close(listener);
        for (int fd : peer_fd_)
            if (fd >= 0) ::close(fd);
        throw;
    }
    ::close(listener);

    for (int fd : peer_fd_) {
        if (fd < 0) continue;
        int yes = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
    }

    readers_.reserve(static_cast<std::size_t>(size));
    for (int peer = 0; peer < size; ++peer)
        if (peer_fd_[static_cast<std::size_t>(peer)] >= 0)
            readers_.emplace_back(&TcpCommunicator::reader_loop, this, peer);
}

TcpCommunicator::~TcpCommunicator() {
    for (std::size_t i = 0; i < peer_fd_.size(); ++i)
        if (peer_fd_[i] >= 0) ::shutdown(peer_fd_[i], SHUT_RDWR);
    for (std::thread& t : readers_)
        if (t.joinable()) t.join();
    for (std::size_t i = 0; i < peer_fd_.size(); ++i)
        if (peer_fd_[i] >= 0) ::close(peer_fd_[i]);
}

void TcpCommunicator::reader_loop(int peer) {
    const int fd = peer_fd_[static_cast<std::size_t>(peer)];
    try {
        for (;;) {
            Message msg;
            if (!read_frame(fd, &msg)) break;
            msg.source = peer;
            {
                std::lock_guard<std::mutex> lock(inbox_mutex_);
                inbox_.push_back(std::move(msg));
            }
            inbox_cv_.notify_all();
        }
    } catch (const std::exception&) {
        // fall through to dead-peer marking
    }
    mark_peer_dead(peer);
}

void TcpCommunicator::mark_peer_dead(int peer) {
    {
        std::lock_guard<std::mutex> lock(inbox_mutex_);
        peer_dead_[static_cast<std::size_t>(peer)] = true;
    }
    inbox_cv_.notify_all();
}

void TcpCommunicator::send_message(int dest, std::uint32_t tag, ElementType etype,
                                   const void* data, std::size_t nbytes) {
    if (dest < 0 || dest >= size_ || dest == rank_)
        throw CommError("invalid peer rank " + std::to_string(dest));
    {
        std::lock_guard<std::mutex> lock(inbox_mutex_);
        if (aborted_) throw PeerDisconnectedError(rank_);
        if (peer_dead_[static_cast<std::size_t>(dest)]) throw PeerDisconnectedError(dest);
    }
    const std::vector<unsigned char> frame =
        encode_frame(tag, static_cast<std::uint32_t>(rank_), etype, data, nbytes);
    std::lock_guard<std::mutex> lock(*send_mutex_[static_cast<std::size_t>(dest)]);
    try {
        write_all(peer_fd_[static_cast<std::size_t>(dest)], frame.data(), frame.size());
    } catch (const CommError&) {
        mark_peer_dead(dest);
        throw PeerDisconnectedError(dest);
    }
    bytes_sent_ += nbytes;
}

Message TcpCommunicator::recv_message(int source, std::uint32_t tag) {
    if (source < 0 || source >= size_ || source == rank_)
        throw CommError("invalid peer rank " + std::to_string(source));
    std::unique_lock<std::mutex> lock(inbox_mutex_);
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        for (auto it = inbox_.begin(); it != inbox_.end(); ++it) {
            if (it->source == source && it->tag == tag) {
                Message msg = std::move(*it);
                inbox_.erase(it);
                return msg;
            }
        }
        if (aborted_) throw PeerDisconnectedError(rank_);
        if (peer_dead_[static_cast<std::size_t>(source)]) throw PeerDisconnectedError(source);
        if (inbox_cv_.wait_until(lock, deadline) == std::cv_status::timeout)
            throw TimeoutError("recv(source=" + std::to_string(source) +
                               ", tag=" + std::to_string(tag) + ") timed out at rank " +
                               std::to_string(rank_));
    }
}

void TcpCommunicator::abort() {
    {
        std::lock_guard<std::mutex> lock(inbox_mutex_);
        aborted_ = true;
    }
    for (std::size_t i = 0; i < peer_fd_.size(); ++i)
        if (peer_fd_[i] >= 0) ::shutdown(peer_fd_[i], SHUT_RDWR);
    inbox_cv_.notify_all();
}

}  // namespace parsgd
