#include "saliency/checkpoint_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

namespace saliency {

using json = nlohmann::json;

namespace {

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void write_file(const std::string& path, const std::string& header,
                const std::map<std::string, Tensor>& tensors) {
  std::vector<unsigned char> bytes;
  put_u64(bytes, header.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (const auto& [name, t] : tensors) {
    for (double v : t.data()) put_u64(bytes, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

json tensor_index(const std::map<std::string, Tensor>& tensors) {
  json index = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index[name] = {{"shape", t.shape()}, {"offset", offset}};
    offset += t.size() * 8;
  }
  return index;
}

struct RawFile {
  json header;
  std::map<std::string, Tensor> tensors;
};

RawFile read_file(const std::string& path, const char* expected_format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw std::runtime_error(path + ": truncated header length");
  const std::uint64_t header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - 8) throw std::runtime_error(path + ": header length exceeds file size");
  RawFile raw;
  try {
    raw.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": malformed header: " + e.what());
  }
  if (raw.header.value("format", "") != expected_format) {
    throw std::runtime_error(path + ": not a " + std::string(expected_format) + " file");
  }
  if (raw.header.value("version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error(path + ": unsupported format version");
  }
  const std::size_t payload = 8 + header_len;
  for (const auto& [name, entry] : raw.header.at("tensors").items()) {
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t count = shape_size(shape);
    if (payload + offset + count * 8 > bytes.size()) {
      throw std::runtime_error(path + ": tensor '" + name + "' extends past end of file");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = std::bit_cast<double>(get_u64(&bytes[payload + offset + i * 8]));
    }
    raw.tensors.emplace(name, Tensor(shape, std::move(values)));
  }
  return raw;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  check_parameters(ckpt);
  json header;
  header["format"] = "saliency-checkpoint";
  header["version"] = kCheckpointFormatVersion;
  header["fingerprint"] = spec_fingerprint(ckpt.spec);
  header["spec"] = json::parse(spec_to_json(ckpt.spec));
  header["tensors"] = tensor_index(ckpt.params);
  write_file(path, header.dump(), ckpt.params);
}

Checkpoint load_checkpoint(const std::string& path) {
  RawFile raw = read_file(path, "saliency-checkpoint");
  Checkpoint ckpt{spec_from_json(raw.header.at("spec").dump()), std::move(raw.tensors)};
  if (raw.header.value("fingerprint", "") != spec_fingerprint(ckpt.spec)) {
    throw std::runtime_error(path + ": spec fingerprint mismatch");
  }
  check_parameters(ckpt);
  return ckpt;
}

void save_tensors(const std::map<std::string, Tensor>& tensors, const std::string& path) {
  json header;
  header["format"] = "saliency-tensors";
  header["version"] = kCheckpointFormatVersion;
  header["tensors"] = tensor_index(tensors);
  write_file(path, header.dump(), tensors);
}

std::map<std::string, Tensor> load_tensors(const std::string& path) {
  return read_file(path, "saliency-tensors").tensors;
}

}  // namespace saliency
