#pragma once

#include <string>
#include <vector>

#include "parsgd/datasets.hpp"
#include "parsgd/trainer.hpp"

namespace parsgd {

enum class Transport { inprocess, tcp };

struct BenchConfig {
    std::string dataset_tag;
    std::string arch_tag;
    ArchitectureSpec arch_override;  // used instead of arch_tag when non-empty
    Transport transport = Transport::inprocess;
    std::vector<int> procs{1};  // sorted ascending
    int baseline = 1;           // must be a member of procs
    TrainOptions train;         // hyperparameters, sync mode, determinism
    std::string out_path;
    bool force_overwrite = false;
    std::uint16_t tcp_base_port = 0;  // 0: pick a free port per sweep point
};

struct BenchRecord {
    int p = 1;
    double wall_seconds = 0.0;
    std::size_t epochs = 0;
    double accuracy = -1.0;
    std::uint64_t bytes = 0;  // sync payload bytes across all ranks
    double speedup = 1.0;     // relative to the baseline process count
};

/// One timed distributed run per process count, same seed and budget.
/// In-process transport runs ranks as threads; tcp runs them as forked
/// local processes over loopback sockets.
std::vector<BenchRecord> run_sweep(const BenchConfig& config, const Dataset& train,
                                   const Dataset& test);

/// Single sweep point; exposed for the train subcommand and tests.
BenchRecord run_point(const BenchConfig& config, int p, const Dataset& train,
                      const Dataset& test);

enum class TableFormat { csv, markdown };

/// CSV header: p,wall_seconds,epochs,accuracy,bytes,speedup. Doubles are
/// printed with max_digits10 so parse_csv_table round-trips exactly.
std::string emit_table(const std::vector<BenchRecord>& records, TableFormat format);

std::vector<BenchRecord> parse_csv_table(const std::string& text);

/// Refuses to overwrite an existing file unless force is set.
void write_table_file(const std::string& path, const std::string& text, bool force);

}  // namespace parsgd
