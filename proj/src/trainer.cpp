#include "parsgd/trainer.hpp"

namespace parsgd {

std::vector<std::pair<std::size_t, std::size_t>> partition_indices(std::size_t m,
                                                                   std::size_t p) {
    if (p < 1) throw DataError("partition needs at least one rank");
    if (m < p)
        throw DataError("dataset of " + std::to_string(m) + " samples is smaller than " +
                        std::to_string(p) + " ranks");
    std::vector<std::pair<std::size_t, std::size_t>> parts;
    const std::size_t base = m / p;
    const std::size_t extra = m % p;
    std::size_t offset = 0;
    for (std::size_t r = 0; r < p; ++r) {
        const std::size_t len = base + (r < extra ? 1 : 0);
        parts.emplace_back(offset, len);
        offset += len;
    }
    return parts;
}

std::uint64_t fnv1a64(const void* data, std::size_t nbytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < nbytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace parsgd
