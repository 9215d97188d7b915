#pragma once
// Checkpoint container: named ".tns" entries behind a length-prefixed name
// table (magic "CRC1", u32 count, then per entry u32 name length + name +
// u32 blob length + tns blob). Round-trips are bit-exact.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cram/tensor.hpp"

namespace cram {

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
void write_checkpoint(std::ostream& out, const NamedTensors<S>& entries) {
  out.write("CRC1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    std::ostringstream blob(std::ios::binary);
    write_tns(blob, tensor);
    const std::string bytes = blob.str();
    detail::put_u32(out, static_cast<std::uint32_t>(bytes.size()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw IoError("write failure while serializing checkpoint");
}

template <typename S>
NamedTensors<S> read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CRC1", 4) != 0)
    throw FormatError("bad checkpoint magic at offset 0");
  const std::uint32_t count = detail::get_u32(in, "entry count");
  NamedTensors<S> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(in, "name length");
    if (name_len > 4096)
      throw FormatError(strformat("implausible name length %u in entry %u",
                                  name_len, i));
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw FormatError(strformat("unexpected EOF in entry %u name", i));
    const std::uint32_t blob_len = detail::get_u32(in, "blob length");
    std::string blob(blob_len, '\0');
    if (!in.read(blob.data(), blob_len))
      throw FormatError(strformat("unexpected EOF in entry %u blob", i));
    std::istringstream bs(blob, std::ios::binary);
    entries.emplace_back(std::move(name), read_tns<S>(bs));
  }
  return entries;
}

template <typename S>
void save_checkpoint_file(const std::string& path,
                          const NamedTensors<S>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, entries);
}

template <typename S>
NamedTensors<S> load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint for reading: " + path);
  return read_checkpoint<S>(in);
}

// Assigns checkpoint entries onto live parameters by name; every parameter
// must be present with a matching shape.
template <typename S>
void restore_params(const NamedTensors<S>& entries,
                    const std::vector<Parameter<S>*>& params) {
  std::map<std::string, const Tensor<S>*> index;
  for (const auto& [name, tensor] : entries) index[name] = &tensor;
  for (auto* p : params) {
    auto it = index.find(p->name);
    if (it == index.end())
      throw FormatError("checkpoint is missing parameter " + p->name);
    p->assign(*it->second);
  }
}

}  // namespace cram
