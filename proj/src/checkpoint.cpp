#include "trinity/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace trinity {

namespace {

constexpr char kMagic[8] = {'T', 'R', 'N', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ofstream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ofstream& out, const double* data, size_t count) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
  }

  int64_t offset() { return static_cast<int64_t>(in_.tellg()); }

  void read_bytes(void* dst, size_t count, const char* what) {
    const int64_t at = offset();
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count));
    if (in_.gcount() != static_cast<std::streamsize>(count)) {
      throw std::runtime_error("checkpoint: " + path_ + ": truncated " + what + " at byte offset " +
                               std::to_string(at));
    }
  }

  uint64_t read_u64(const char* what) {
    unsigned char buf[8];
    read_bytes(buf, 8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
  }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params,
                     const std::vector<RouterState>& routers) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, params.size());
  write_u64(out, routers.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& t = params.value(i);
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<uint64_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) write_u64(out, static_cast<uint64_t>(t.dim(d)));
    write_f64(out, t.data().data(), static_cast<size_t>(t.numel()));
  }
  for (const RouterState& r : routers) {
    write_u64(out, r.bias.size());
    write_f64(out, r.bias.data(), r.bias.size());
    write_f64(out, r.momentum.data(), r.momentum.size());
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader in(path);
  char magic[8];
  in.read_bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: " + path + ": bad magic at byte offset 0");
  }
  const uint64_t param_count = in.read_u64("parameter count");
  const uint64_t router_count = in.read_u64("router count");
  if (param_count > (1ull << 32) || router_count > (1ull << 20)) {
    throw std::runtime_error("checkpoint: " + path + ": implausible header counts at byte offset 8");
  }
  Checkpoint ck;
  for (uint64_t i = 0; i < param_count; ++i) {
    const uint64_t name_len = in.read_u64("name length");
    if (name_len > 4096) {
      throw std::runtime_error("checkpoint: " + path + ": implausible name length at byte offset " +
                               std::to_string(in.offset() - 8));
    }
    std::string name(name_len, '\0');
    in.read_bytes(name.data(), name_len, "name");
    const uint64_t rank = in.read_u64("rank");
    if (rank > 8) {
      throw std::runtime_error("checkpoint: " + path + ": implausible rank at byte offset " +
                               std::to_string(in.offset() - 8));
    }
    std::vector<int64_t> shape;
    int64_t numel = 1;
    for (uint64_t d = 0; d < rank; ++d) {
      const int64_t dim = static_cast<int64_t>(in.read_u64("dimension"));
      if (dim <= 0 || dim > (1ll << 40) || numel > (1ll << 40) / dim) {
        throw std::runtime_error("checkpoint: " + path + ": implausible dimension at byte offset " +
                                 std::to_string(in.offset() - 8));
      }
      shape.push_back(dim);
      numel *= dim;
    }
    std::vector<double> data(static_cast<size_t>(numel));
    in.read_bytes(data.data(), static_cast<size_t>(numel) * sizeof(double), "tensor data");
    ck.params.add(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  for (uint64_t i = 0; i < router_count; ++i) {
    const uint64_t n = in.read_u64("router expert count");
    if (n > (1ull << 20)) {
      throw std::runtime_error("checkpoint: " + path + ": implausible router size at byte offset " +
                               std::to_string(in.offset() - 8));
    }
    RouterState r = RouterState::zeros(static_cast<int64_t>(n));
    in.read_bytes(r.bias.data(), n * sizeof(double), "router bias");
    in.read_bytes(r.momentum.data(), n * sizeof(double), "router momentum");
    ck.routers.push_back(std::move(r));
  }
  return ck;
}

}  // namespace trinity
