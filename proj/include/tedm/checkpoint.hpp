#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tedm/tensor.hpp"

namespace tedm {

// Checkpoint layout:
//
//   TEDMCKPT\n
//   schema_version 1\n
//   kind <tag>\n
//   meta <key> <value>\n          (zero or more, value runs to end of line)
//   tensor <name> <rank> <d0> .. <dn-1> <offset> <nbytes>\n
//   end\n
//   <payload: little-endian f32, offsets relative to payload start>
struct Checkpoint {
  static constexpr const char* kMagic = "TEDMCKPT";
  static constexpr int kSchemaVersion = 1;

  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const std::string& meta_value(const std::string& key) const;
  bool has_meta(const std::string& key) const;
  const Tensor& tensor(const std::string& name) const;
  void set_meta(const std::string& key, std::string value) { meta.emplace_back(key, std::move(value)); }
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace tedm
