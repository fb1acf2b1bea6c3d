#include "io/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fmpl {

using nlohmann::json;

namespace {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

void put_f32(std::string& payload, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  payload.push_back(char(bits & 0xff));
  payload.push_back(char((bits >> 8) & 0xff));
  payload.push_back(char((bits >> 16) & 0xff));
  payload.push_back(char((bits >> 24) & 0xff));
}

float get_f32(const std::string& payload, size_t at) {
  uint32_t bits = 0;
  for (int i = 0; i < 4; ++i)
    bits |= uint32_t(uint8_t(payload[at + size_t(i)])) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  json meta = json::object();
  std::string payload;
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (!t->defined()) throw std::invalid_argument("save_checkpoint: undefined tensor " + name);
    json entry;
    entry["shape"] = t->shape;
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    meta[name] = entry;
    for (int64_t i = 0; i < t->size(); ++i) put_f32(payload, float(t->at(i)));
    offset += uint64_t(t->size()) * 4;
  }
  std::string mstr = meta.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("FMPL", 4);
  put_u32(os, kCheckpointVersion);
  put_u64(os, mstr.size());
  os.write(mstr.data(), std::streamsize(mstr.size()));
  os.write(payload.data(), std::streamsize(payload.size()));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void save_checkpoint(const std::string& path, NamedTensors tensors) {
  std::vector<std::pair<std::string, const Tensor*>> v;
  v.reserve(tensors.size());
  for (auto& [name, t] : tensors) v.emplace_back(name, t);
  save_checkpoint(path, v);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FMPL", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  uint64_t mlen = get_u64(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), std::streamsize(mlen));
  std::string payload((std::istreambuf_iterator<char>(is)),
                      std::istreambuf_iterator<char>());
  json meta = json::parse(mstr);

  std::map<std::string, Tensor> out;
  for (auto it = meta.begin(); it != meta.end(); ++it) {
    const json& e = it.value();
    std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("load_checkpoint: unsupported dtype");
    uint64_t off = e.at("offset").get<uint64_t>();
    int64_t n = Tensor::numel(shape);
    if (off + uint64_t(n) * 4 > payload.size())
      throw std::runtime_error("load_checkpoint: payload truncated for " + it.key());
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < n; ++i)
      t.mut()[i] = double(get_f32(payload, size_t(off) + size_t(i) * 4));
    out.emplace(it.key(), std::move(t));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, NamedTensors tensors) {
  auto loaded = load_checkpoint(path);
  for (auto& [name, t] : tensors) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw std::runtime_error("load_checkpoint: missing tensor " + name);
    if (it->second.shape != t->shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    std::copy_n(it->second.ptr(), it->second.size(), t->mut());
  }
}

}  // namespace fmpl
