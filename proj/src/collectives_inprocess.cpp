#include "parsgd/collectives.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>

namespace parsgd {

namespace {

struct Hub {
    struct Mailbox {
        std::mutex m;
        std::condition_variable cv;
        std::deque<Message> q;
    };
    std::vector<std::unique_ptr<Mailbox>> boxes;
    std::atomic<int> poisoned_by{-1};

    explicit Hub(int p) {
        boxes.reserve(static_cast<std::size_t>(p));
        for (int i = 0; i < p; ++i) boxes.push_back(std::make_unique<Mailbox>());
    }
};

class InProcessCommunicator final : public Communicator {
public:
    InProcessCommunicator(std::shared_ptr<Hub> hub, int rank, int size)
        : Communicator(rank, size), hub_(std::move(hub)) {}

    void send_message(int dest, std::uint32_t tag, ElementType etype, const void* data,
                      std::size_t nbytes) override {
        check_peer(dest);
        const int poisoner = hub_->poisoned_by.load();
        if (poisoner >= 0 && poisoner != rank_) throw PeerDisconnectedError(poisoner);
        Message msg;
        msg.tag = tag;
        msg.source = rank_;
        msg.etype = etype;
        msg.payload.assign(static_cast<const unsigned char*>(data),
                           static_cast<const unsigned char*>(data) + nbytes);
        auto& box = *hub_->boxes[static_cast<std::size_t>(dest)];
        {
            std::lock_guard<std::mutex> lock(box.m);
            box.q.push_back(std::move(msg));
        }
        box.cv.notify_all();
        bytes_sent_ += nbytes;
    }

    Message recv_message(int source, std::uint32_t tag) override {
        check_peer(source);
        auto& box = *hub_->boxes[static_cast<std::size_t>(rank_)];
        std::unique_lock<std::mutex> lock(box.m);
        auto match = [&]() -> std::deque<Message>::iterator {
            for (auto it = box.q.begin(); it != box.q.end(); ++it)
                if (it->source == source && it->tag == tag) return it;
            return box.q.end();
        };
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            const int poisoner = hub_->poisoned_by.load();
            if (poisoner >= 0 && poisoner != rank_) throw PeerDisconnectedError(poisoner);
            auto it = match();
            if (it != box.q.end()) {
                Message msg = std::move(*it);
                box.q.erase(it);
                return msg;
            }
            if (box.cv.wait_until(lock, deadline) == std::cv_status::timeout)
                throw TimeoutError("recv(source=" + std::to_string(source) +
                                   ", tag=" + std::to_string(tag) + ") timed out at rank " +
                                   std::to_string(rank_));
        }
    }

    void abort() override {
        hub_->poisoned_by.store(rank_);
        for (auto& box : hub_->boxes) {
            std::lock_guard<std::mutex> lock(box->m);
            box->cv.notify_all();
        }
    }

private:
    void check_peer(int peer) const {
        if (peer < 0 || peer >= size_ || peer == rank_)
            throw CommError("invalid peer rank " + std::to_string(peer) + " at rank " +
                            std::to_string(rank_) + " (size " + std::to_string(size_) + ")");
    }

    std::shared_ptr<Hub> hub_;
};

}  // namespace

std::vector<std::unique_ptr<Communicator>> make_inprocess_group(int p) {
    if (p < 1) throw CommError("group size must be positive");
    auto hub = std::make_shared<Hub>(p);
    std::vector<std::unique_ptr<Communicator>> comms;
    comms.reserve(static_cast<std::size_t>(p));
    for (int r = 0; r < p; ++r)
        comms.push_back(std::make_unique<InProcessCommunicator>(hub, r, p));
    return comms;
}

}  // namespace parsgd
