#include "tedm/checkpoint.hpp"

#include <unistd.h>

#include <atomic>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace tedm {

static_assert(std::endian::native == std::endian::little, "payloads are written as native little-endian f32");

const std::string& Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  fail(ErrorCode::kFormatError, "checkpoint has no meta field '" + key + "'");
}

bool Checkpoint::has_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail(ErrorCode::kFormatError, "checkpoint has no tensor '" + name + "'");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kStorageError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  static std::atomic<unsigned> counter{0};
  const std::string tmp = path + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kStorageError, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::kStorageError, "write failed for " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::kStorageError, "cannot move " + tmp + " to " + path + ": " + ec.message());
  }
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ostringstream head;
  head << Checkpoint::kMagic << "\n";
  head << "schema_version " << Checkpoint::kSchemaVersion << "\n";
  head << "kind " << ckpt.kind << "\n";
  for (const auto& [k, v] : ckpt.meta) {
    require(k.find_first_of(" \n") == std::string::npos && v.find('\n') == std::string::npos,
            ErrorCode::kFormatError, "meta entries must be single-line and keys must not contain spaces");
    head << "meta " << k << " " << v << "\n";
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    require(name.find_first_of(" \n") == std::string::npos, ErrorCode::kFormatError, "tensor names must not contain spaces");
    const std::size_t nbytes = t.size() * sizeof(float);
    head << "tensor " << name << " " << t.rank();
    for (auto d : t.dims()) head << " " << d;
    head << " " << offset << " " << nbytes << "\n";
    offset += nbytes;
  }
  head << "end\n";
  std::string bytes = head.str();
  const std::size_t start = bytes.size();
  bytes.resize(start + offset);
  std::size_t pos = start;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!t.empty()) std::memcpy(bytes.data() + pos, t.data(), t.size() * sizeof(float));
    pos += t.size() * sizeof(float);
  }
  write_file_atomic(path, bytes);
}

Checkpoint read_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    require(nl != std::string::npos, ErrorCode::kFormatError, "truncated checkpoint manifest in " + path);
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  require(next_line() == Checkpoint::kMagic, ErrorCode::kFormatError, path + " is not a checkpoint (bad magic)");
  {
    std::istringstream ls(next_line());
    std::string key;
    int version = 0;
    ls >> key >> version;
    require(key == "schema_version" && version == Checkpoint::kSchemaVersion, ErrorCode::kFormatError,
            "unsupported checkpoint schema in " + path);
  }
  Checkpoint ckpt;
  struct Pending {
    std::string name;
    Dims dims;
    std::size_t offset, nbytes;
  };
  std::vector<Pending> pending;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    const auto sp = line.find(' ');
    const std::string tag = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (tag == "kind") {
      ckpt.kind = rest;
    } else if (tag == "meta") {
      const auto s2 = rest.find(' ');
      require(s2 != std::string::npos, ErrorCode::kFormatError, "malformed meta line in " + path);
      ckpt.meta.emplace_back(rest.substr(0, s2), rest.substr(s2 + 1));
    } else if (tag == "tensor") {
      std::istringstream ls(rest);
      Pending p;
      std::size_t rank = 0;
      ls >> p.name >> rank;
      p.dims.resize(rank);
      for (auto& d : p.dims) ls >> d;
      ls >> p.offset >> p.nbytes;
      require(!ls.fail() && p.nbytes == Tensor::count(p.dims) * sizeof(float), ErrorCode::kFormatError,
              "malformed tensor entry in " + path);
      pending.push_back(std::move(p));
    } else {
      fail(ErrorCode::kFormatError, "unknown manifest line '" + tag + "' in " + path);
    }
  }
  const std::size_t payload = bytes.size() - pos;
  for (const auto& p : pending) {
    require(p.offset + p.nbytes <= payload, ErrorCode::kFormatError, "checkpoint payload truncated: " + path);
    std::vector<float> values(p.nbytes / sizeof(float));
    if (p.nbytes) std::memcpy(values.data(), bytes.data() + pos + p.offset, p.nbytes);
    ckpt.tensors.emplace_back(p.name, Tensor(p.dims, std::move(values)));
  }
  return ckpt;
}

}  // namespace tedm
