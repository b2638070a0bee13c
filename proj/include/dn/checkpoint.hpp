#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dn/tensor.hpp"

namespace dn {

// Checkpoint container: little-endian, magic "DNCK", u32 format version,
// u64 config fingerprint, then per-parameter records until EOF. Each record is
// u32 name length, name bytes, u32 rank, u32 dims[rank], raw f32 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensorRecord {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<real> data;
};

void write_tensor_record(std::ostream& out, const std::string& name,
                         const std::vector<std::int64_t>& shape, const real* data);
bool read_tensor_record(std::istream& in, NamedTensorRecord& rec);  // false at clean EOF

void save_checkpoint(const std::string& path, const ParamStore& params, std::uint64_t fingerprint);

// Loads all records; returns the stored fingerprint.
std::uint64_t load_checkpoint_records(const std::string& path, std::vector<NamedTensorRecord>& recs);

// Populates an already-constructed ParamStore by name; every parameter must be
// present with a matching shape. Returns the stored fingerprint.
std::uint64_t load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace dn
