#include "hwnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <unordered_map>

namespace hwnas {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'H', 'W', 'N', 'A', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint: truncated data");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> pack(const std::vector<Real>& v) {
  std::vector<std::uint8_t> out(v.size() * sizeof(Real));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<Real> unpack(const CheckpointEntry& e) {
  std::vector<Real> out;
  if (e.width == 4) {
    const std::size_t n = e.payload.size() / 4;
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, e.payload.data() + 4 * i, 4);
      out[i] = static_cast<Real>(f);
    }
  } else if (e.width == 8) {
    const std::size_t n = e.payload.size() / 8;
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, e.payload.data() + 8 * i, 8);
      out[i] = static_cast<Real>(d);
    }
  } else {
    throw std::runtime_error("checkpoint: unsupported element width for " + e.name);
  }
  return out;
}

}  // namespace

Checkpoint to_checkpoint(const StateDict& sd) {
  Checkpoint ck;
  for (const auto& p : sd.params) ck.entries.push_back({0, p.name, p.tensor.shape(), sizeof(Real), pack(p.tensor.raw())});
  for (const auto& b : sd.buffers) {
    ck.entries.push_back({1, b.name, Shape{static_cast<int>(b.data->size())}, sizeof(Real), pack(*b.data)});
  }
  return ck;
}

void apply_checkpoint(const Checkpoint& ck, StateDict& sd) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.entries) by_name.emplace(e.name, &e);
  auto load = [&](const std::string& name, std::vector<Real>& target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing entry " + name);
    std::vector<Real> v = unpack(*it->second);
    if (v.size() != target.size()) {
      throw std::runtime_error("checkpoint: entry " + name + " has " + std::to_string(v.size()) + " values, expected " +
                               std::to_string(target.size()));
    }
    target = std::move(v);
  };
  for (auto& p : sd.params) load(p.name, p.tensor.raw());
  for (auto& b : sd.buffers) load(b.name, *b.data);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    put<std::uint8_t>(out, e.kind);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put<std::int32_t>(out, d);
    put<std::uint8_t>(out, e.width);
    put<std::uint64_t>(out, e.payload.size() / e.width);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const auto magic = r.bytes(8);
  if (std::memcmp(magic.data(), kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
  if (r.get<std::uint32_t>() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  const auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.kind = r.get<std::uint8_t>();
    const auto nlen = r.get<std::uint32_t>();
    const auto name = r.bytes(nlen);
    e.name.assign(name.begin(), name.end());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::int32_t>());
    e.width = r.get<std::uint8_t>();
    if (e.width != 4 && e.width != 8) throw std::runtime_error("checkpoint: bad element width in " + e.name);
    const auto n = r.get<std::uint64_t>();
    e.payload = r.bytes(n * e.width);
    ck.entries.push_back(std::move(e));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void save_state(const std::filesystem::path& path, const StateDict& sd) { write_checkpoint(path, to_checkpoint(sd)); }

void load_state(const std::filesystem::path& path, StateDict& sd) { apply_checkpoint(read_checkpoint(path), sd); }

}  // namespace hwnas
