#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dialmae/model.hpp"
#include "dialmae/param_store.hpp"

namespace dialmae {

namespace detail {
// Raw little-endian double blobs, shared by checkpoints and embedding dumps.
void write_doubles_le(std::ofstream& out, const std::vector<double>& values);
void read_doubles_le(std::ifstream& in, std::vector<double>& values);
}  // namespace detail

// On-disk format: "<stem>.json" holds the manifest (format tag, version,
// phase, model config, seed, step counter, tower tying, and one tensor table
// per group); "<stem>.bin" is the concatenation of every group's flat buffer
// as little-endian doubles, in manifest order. The manifest records each
// tensor's byte offset into the blob. Round-trips are byte-exact.
struct Checkpoint {
    std::string phase;  // "post_train" or "fine_tune"
    ModelConfig config;
    uint64_t seed = 0;
    long long step = 0;
    bool tied_towers = false;
    std::vector<std::pair<std::string, ParamStore>> groups;

    bool has_group(const std::string& name) const;
    ParamStore& group(const std::string& name);
    const ParamStore& group(const std::string& name) const;
};

inline constexpr const char* kCheckpointFormat = "dialmae-checkpoint";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::string& stem);
Checkpoint load_checkpoint(const std::string& stem);

}  // namespace dialmae
