#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dra/encoder.hpp"

namespace dra {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary layout, all integers little-endian u32:
//   "DRA1" | version | scalar width in bytes (4 or 8) | record count
//   per record: name length | name bytes | ndim | dims... | payload
// Payload scalars are little-endian IEEE floats of the stated width.
inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'A', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_parameters(const std::vector<const Parameter*>& params, Precision precision);

struct CheckpointRecord {
  std::string name;
  Tensor value;
};
std::vector<CheckpointRecord> deserialize_parameters(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, ToyClipModel& model, Precision precision);
// Every model parameter must appear exactly once with a matching shape.
void load_checkpoint(const std::string& path, ToyClipModel& model);
void apply_records(const std::vector<CheckpointRecord>& records, ToyClipModel& model);

}  // namespace dra
