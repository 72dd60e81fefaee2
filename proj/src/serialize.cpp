#include "dseg/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dseg/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace dseg {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'E', 'G'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, uint32_t(records.size()));
  for (const TensorRecord& r : records) {
    check_dim(r.name.size() <= 0xFFFF, "record name too long: " + r.name);
    check_dim(r.tensor.rank() <= 0xFF, "record rank too large: " + r.name);
    write_pod(os, uint16_t(r.name.size()));
    os.write(r.name.data(), std::streamsize(r.name.size()));
    write_pod(os, uint8_t(r.tensor.rank()));
    for (int d = 0; d < r.tensor.rank(); ++d) write_pod(os, uint32_t(r.tensor.dim(d)));
    os.write(reinterpret_cast<const char*>(r.tensor.data.data()),
             std::streamsize(r.tensor.data.size() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

std::vector<TensorRecord> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = read_pod<uint32_t>(is);
  std::vector<TensorRecord> records;
  records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = read_pod<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint truncated");
    uint8_t ndim = read_pod<uint8_t>(is);
    Shape shape(ndim);
    for (uint8_t d = 0; d < ndim; ++d) shape[d] = int(read_pod<uint32_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            std::streamsize(t.data.size() * sizeof(float)));
    if (!is) throw IoError("checkpoint truncated");
    records.push_back(TensorRecord{std::move(name), std::move(t)});
  }
  return records;
}

void save_store(const std::string& path, const ParamStore& store,
                const std::vector<TensorRecord>& extra) {
  std::vector<TensorRecord> records;
  records.reserve(store.entries().size() + extra.size());
  for (const auto& e : store.entries()) records.push_back({e.name, e.tensor});
  for (const TensorRecord& r : extra) records.push_back(r);
  write_checkpoint(path, records);
}

ParamStore records_to_store(const std::vector<TensorRecord>& records) {
  ParamStore store;
  for (const TensorRecord& r : records) store.add(r.name, r.tensor);
  return store;
}

}  // namespace dseg
