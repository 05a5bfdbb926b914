#include "irfusion/weights_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace irfusion::nn {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'W', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kKindConvWeight = 1;
constexpr uint8_t kKindBias = 2;
constexpr uint8_t kKindBatchNorm = 3;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_record(std::ostream& os, uint8_t kind, const std::vector<uint32_t>& dims,
                  const float* data, size_t count) {
  os.write(reinterpret_cast<const char*>(&kind), 1);
  write_u32(os, static_cast<uint32_t>(dims.size()));
  for (uint32_t d : dims) write_u32(os, d);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("truncated weights file");
  return v;
}

uint8_t read_u8(std::istream& is) {
  uint8_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 1);
  if (!is) throw std::runtime_error("truncated weights file");
  return v;
}

void read_floats(std::istream& is, float* out, size_t count) {
  is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(count * 4));
  if (!is) throw std::runtime_error("truncated weights file");
}

struct RecordHeader {
  uint8_t kind;
  std::vector<uint32_t> dims;
  size_t count;
};

RecordHeader read_record_header(std::istream& is) {
  RecordHeader h;
  h.kind = read_u8(is);
  const uint32_t ndims = read_u32(is);
  if (ndims == 0 || ndims > 8) throw std::runtime_error("corrupt weights file (bad dim count)");
  h.count = 1;
  for (uint32_t i = 0; i < ndims; ++i) {
    h.dims.push_back(read_u32(is));
    h.count *= h.dims.back();
  }
  return h;
}

void expect_dims(const RecordHeader& h, uint8_t kind, const std::vector<uint32_t>& dims,
                 size_t record_index) {
  if (h.kind != kind || h.dims != dims) {
    std::string want, got;
    for (uint32_t d : dims) want += std::to_string(d) + " ";
    for (uint32_t d : h.dims) got += std::to_string(d) + " ";
    throw std::runtime_error("weights record " + std::to_string(record_index) +
                             " mismatch: expected kind " + std::to_string(kind) + " dims [" +
                             want + "], file has kind " + std::to_string(h.kind) + " dims [" +
                             got + "]");
  }
}

}  // namespace

void save_weights(const std::string& path, const Graph<float>& g) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");

  uint32_t records = 0;
  for (const auto& nd : g.nodes) {
    if (nd.kind == OpKind::Conv) records += nd.bidx >= 0 ? 2 : 1;
    if (nd.kind == OpKind::BatchNorm) records += 1;
  }

  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, records);

  for (const auto& nd : g.nodes) {
    if (nd.kind == OpKind::Conv) {
      const auto& w = g.params[nd.widx].value;
      write_record(os, kKindConvWeight,
                   {static_cast<uint32_t>(w.n), static_cast<uint32_t>(w.c),
                    static_cast<uint32_t>(w.h), static_cast<uint32_t>(w.w)},
                   w.data(), w.size());
      if (nd.bidx >= 0) {
        const auto& b = g.params[nd.bidx].value;
        write_record(os, kKindBias, {static_cast<uint32_t>(b.c)}, b.data(), b.size());
      }
    } else if (nd.kind == OpKind::BatchNorm) {
      const auto& gamma = g.params[nd.gidx].value;
      const auto& beta = g.params[nd.beidx].value;
      std::vector<float> pack;
      pack.reserve(4 * gamma.size());
      pack.insert(pack.end(), gamma.v.begin(), gamma.v.end());
      pack.insert(pack.end(), beta.v.begin(), beta.v.end());
      pack.insert(pack.end(), nd.running_mean.v.begin(), nd.running_mean.v.end());
      pack.insert(pack.end(), nd.running_var.v.begin(), nd.running_var.v.end());
      write_record(os, kKindBatchNorm, {4, static_cast<uint32_t>(gamma.c)}, pack.data(),
                   pack.size());
    }
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

void load_weights(const std::string& path, Graph<float>& g) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);

  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a weights file (bad magic): " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("unsupported weights version " + std::to_string(version));
  }
  const uint32_t records = read_u32(is);

  uint32_t expected = 0;
  for (const auto& nd : g.nodes) {
    if (nd.kind == OpKind::Conv) expected += nd.bidx >= 0 ? 2 : 1;
    if (nd.kind == OpKind::BatchNorm) expected += 1;
  }
  if (records != expected) {
    throw std::runtime_error("weights file has " + std::to_string(records) +
                             " records, graph expects " + std::to_string(expected));
  }

  size_t record_index = 0;
  for (auto& nd : g.nodes) {
    if (nd.kind == OpKind::Conv) {
      auto& w = g.params[nd.widx].value;
      RecordHeader h = read_record_header(is);
      expect_dims(h, kKindConvWeight,
                  {static_cast<uint32_t>(w.n), static_cast<uint32_t>(w.c),
                   static_cast<uint32_t>(w.h), static_cast<uint32_t>(w.w)},
                  record_index++);
      read_floats(is, w.data(), w.size());
      if (nd.bidx >= 0) {
        auto& b = g.params[nd.bidx].value;
        h = read_record_header(is);
        expect_dims(h, kKindBias, {static_cast<uint32_t>(b.c)}, record_index++);
        read_floats(is, b.data(), b.size());
      }
    } else if (nd.kind == OpKind::BatchNorm) {
      auto& gamma = g.params[nd.gidx].value;
      auto& beta = g.params[nd.beidx].value;
      RecordHeader h = read_record_header(is);
      expect_dims(h, kKindBatchNorm, {4, static_cast<uint32_t>(gamma.c)}, record_index++);
      const size_t c = gamma.size();
      std::vector<float> pack(4 * c);
      read_floats(is, pack.data(), pack.size());
      std::copy(pack.begin(), pack.begin() + c, gamma.v.begin());
      std::copy(pack.begin() + c, pack.begin() + 2 * c, beta.v.begin());
      std::copy(pack.begin() + 2 * c, pack.begin() + 3 * c, nd.running_mean.v.begin());
      std::copy(pack.begin() + 3 * c, pack.end(), nd.running_var.v.begin());
      nd.bn_has_stats = true;
    }
  }
}

}  // namespace irfusion::nn
