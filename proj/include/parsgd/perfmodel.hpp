#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "parsgd/model.hpp"

namespace parsgd {

struct PerfModelInput {
    double samples_per_epoch = 0;  // m
    int process_count = 1;         // p
    double neurons_per_layer = 0;  // n
    double layer_count = 0;        // l
    double flop_rate = 1e9;        // FLOP/s per process
    double bandwidth = 1e9;        // bytes/s
    double latency = 1e-5;         // s per message
    double element_width = 8;      // bytes
};

/// (m/p) * n^2 * l, the constant-free per-epoch compute estimate.
double flops_per_epoch(double m, double p, double n, double l);

/// n^2 * l elements per sync, independent of p.
double comm_volume(double n, double l);

/// Exact per-layer synchronized element count for an architecture: every
/// weight and bias that the averaging step communicates.
double comm_volume_exact(const ArchitectureSpec& arch);

/// Largest layer width of an architecture, the conservative single-n
/// evaluation of the volume expressions.
double max_layer_width(const ArchitectureSpec& arch);

/// Latency-bandwidth closure of the volume model:
///   T(p) = flops/flop_rate + syncs * (2*log2(p)*latency
///                                     + 2*volume*width/bandwidth)
/// with T(1) carrying no communication term. Returns T(1)/T(p).
double predicted_speedup(const PerfModelInput& input, double syncs_per_epoch);

/// T(p) itself, in seconds per epoch.
double predicted_epoch_seconds(const PerfModelInput& input, double syncs_per_epoch);

}  // namespace parsgd
