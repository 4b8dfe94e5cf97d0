#pragma once

#include <map>
#include <string>

#include "json.hpp"

#include "gridloc/numkit/tensor.hpp"

namespace gridloc::numkit {

// Tensor store: a JSON manifest {name -> {shape, dtype, byte_offset}} next to
// one little-endian raw f32 blob. Offsets are assigned in lexicographic name
// order; the manifest records the blob's byte count and FNV-1a checksum, and
// read_blob verifies both. `meta` rides along untouched for self-describing
// checkpoints.
void write_blob(const std::string& manifest_path, const std::string& blob_path,
                const std::map<std::string, Tensor>& tensors,
                const nlohmann::json& meta = nlohmann::json::object());

std::map<std::string, Tensor> read_blob(const std::string& manifest_path,
                                        nlohmann::json* meta_out = nullptr);

} // namespace gridloc::numkit
