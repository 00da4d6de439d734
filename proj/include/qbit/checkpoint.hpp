#pragma once

#include "qbit/model.hpp"
#include "qbit/quantizers.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace qbit {

// Checkpoint layout, all integers little-endian:
//
//   magic        8 bytes  "QBITCKPT"
//   version      u32      currently 1
//   header_len   u32      followed by header_len bytes of JSON:
//                         {"model": {...TransformerConfig...}, "spec": {...QuantSpec...}}
//   model table  u32 count, then `count` tensor entries
//   quant table  u32 count, then `count` tensor entries (alpha/beta/gain)
//
//   tensor entry:
//     name_len u16, name bytes
//     flags    u8   bit 0 = trainable
//     rank     u8,  dims u64[rank]
//     data     f64[product(dims)]  (IEEE-754 binary64)

inline constexpr char kCheckpointMagic[8] = {'Q', 'B', 'I', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Model model;
    QuantSpec spec;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const QuantSpec& spec);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Model& model, const QuantSpec& spec);
Checkpoint load_checkpoint(const std::string& path);

/// True if the file starts with the checkpoint magic.
bool is_checkpoint_file(const std::string& path);

} // namespace qbit
