#include "dra/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace dra {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_parameters(const std::vector<const Parameter*>& params, Precision precision) {
  const bool wide = precision == Precision::kDouble;
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, wide ? 8 : 4);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.insert(out.end(), p->name.begin(), p->name.end());
    const Shape& shape = p->value.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p->value.data()) {
      if (wide) {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
      } else {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return out;
}

std::vector<CheckpointRecord> deserialize_parameters(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (in.bytes(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("bad checkpoint magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t width = in.u32();
  if (width != 4 && width != 8) throw CheckpointError("bad scalar width " + std::to_string(width));
  const std::uint32_t count = in.u32();
  std::vector<CheckpointRecord> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    CheckpointRecord rec;
    const std::uint32_t name_len = in.u32();
    rec.name = in.bytes(name_len);
    const std::uint32_t ndim = in.u32();
    if (ndim < 1 || ndim > 2) throw CheckpointError("record " + rec.name + ": bad rank " + std::to_string(ndim));
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const std::uint32_t d = in.u32();
      if (d == 0) throw CheckpointError("record " + rec.name + ": zero dimension");
      shape.push_back(d);
    }
    const std::size_t n = shape_product(shape);
    in.need(n * width);
    std::vector<double> data(n);
    for (auto& v : data) {
      v = width == 8 ? std::bit_cast<double>(in.u64()) : static_cast<double>(std::bit_cast<float>(in.u32()));
    }
    rec.value = Tensor(std::move(shape), std::move(data));
    records.push_back(std::move(rec));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint records");
  return records;
}

void save_checkpoint(const std::string& path, ToyClipModel& model, Precision precision) {
  std::vector<const Parameter*> params;
  for (Parameter* p : model.parameters()) params.push_back(p);
  const auto bytes = serialize_parameters(params, precision);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path);
}

void apply_records(const std::vector<CheckpointRecord>& records, ToyClipModel& model) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) {
    if (!by_name.emplace(r.name, &r).second) throw CheckpointError("duplicate record " + r.name);
  }
  auto params = model.parameters();
  if (params.size() != records.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(records.size()) + " records, model expects " +
                          std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p->name);
    if (it->second->value.shape() != p->value.shape()) {
      throw CheckpointError("parameter " + p->name + ": checkpoint shape " + to_string(it->second->value.shape()) +
                            " vs model " + to_string(p->value.shape()));
    }
  }
  for (Parameter* p : params) p->value = by_name.at(p->name)->value;
}

void load_checkpoint(const std::string& path, ToyClipModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  apply_records(deserialize_parameters(bytes), model);
}

}  // namespace dra
