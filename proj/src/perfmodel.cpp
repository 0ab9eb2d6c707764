#include "parsgd/perfmodel.hpp"

#include <cmath>
#include <stdexcept>

namespace parsgd {

double flops_per_epoch(double m, double p, double n, double l) {
    if (m <= 0 || p < 1 || n <= 0 || l <= 0)
        throw std::invalid_argument("perf model inputs must be strictly positive");
    return (m / p) * n * n * l;
}

double comm_volume(double n, double l) {
    if (n <= 0 || l <= 0)
        throw std::invalid_argument("perf model inputs must be strictly positive");
    return n * n * l;
}

double comm_volume_exact(const ArchitectureSpec& arch) {
    const ParameterSet params = init_params<double>(arch, 0);
    return static_cast<double>(params.flat_size());
}

double max_layer_width(const ArchitectureSpec& arch) {
    std::size_t widest = 1;
    for (std::size_t d : arch.input_shape) widest = std::max(widest, d);
    std::size_t flat_in = 1;
    for (std::size_t d : arch.input_shape) flat_in *= d;
    widest = std::max(widest, flat_in);
    for (const auto& shapes = layer_output_shapes(arch); const auto& s : shapes) {
        std::size_t flat = 1;
        for (std::size_t d : s) flat *= d;
        widest = std::max(widest, flat);
    }
    return static_cast<double>(widest);
}

double predicted_epoch_seconds(const PerfModelInput& input, double syncs_per_epoch) {
    const double flops = flops_per_epoch(input.samples_per_epoch, input.process_count,
                                         input.neurons_per_layer, input.layer_count);
    double t = flops / input.flop_rate;
    if (input.process_count > 1) {
        const double rounds = 2.0 * std::log2(static_cast<double>(input.process_count));
        const double bytes =
            2.0 * comm_volume(input.neurons_per_layer, input.layer_count) * input.element_width;
        t += syncs_per_epoch * (rounds * input.latency + bytes / input.bandwidth);
    }
    return t;
}

double predicted_speedup(const PerfModelInput& input, double syncs_per_epoch) {
    PerfModelInput serial = input;
    serial.process_count = 1;
    return predicted_epoch_seconds(serial, syncs_per_epoch) /
           predicted_epoch_seconds(input, syncs_per_epoch);
}

}  // namespace parsgd
