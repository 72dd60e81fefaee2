#pragma once

#include <string>
#include <vector>

#include "dseg/params.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

struct TensorRecord {
  std::string name;
  Tensor tensor;
};

// Checkpoint container: magic "DSEG", u32 format version, u32 record count,
// then per record a u16 name length, the UTF-8 name, u8 ndim, u32 extents,
// and the raw little-endian f32 data. Round-trips bit-exactly.
void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_checkpoint(const std::string& path);

// Store contents (in registration order) plus any extra records appended.
void save_store(const std::string& path, const ParamStore& store,
                const std::vector<TensorRecord>& extra = {});

// View of loaded records as a name-addressable store.
ParamStore records_to_store(const std::vector<TensorRecord>& records);

}  // namespace dseg
