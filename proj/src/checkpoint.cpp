#include "whisq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "whisq/errors.hpp"

namespace whisq {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::span<const unsigned char> b, std::string origin) : b_(b), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  [[noreturn]] void fail(const std::string& msg) const { throw DataError(origin_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) fail("truncated checkpoint");
  }
  std::span<const unsigned char> b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out{'W', 'Q', 'C', 'K'};
  put_u32(out, kCheckpointVersion);
  const nlohmann::json header = {
      {"format", "whisq-checkpoint"}, {"version", kCheckpointVersion}, {"config", to_json(ckpt.config)}};
  const std::string h = header.dump();
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.tensors.size()));
  for (const auto& t : ckpt.params.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.str(4) != "WQCK") r.fail("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::string h = r.str(r.u32());
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(h);
    ckpt.config = config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    r.fail(std::string("bad header config: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 3) r.fail("tensor '" + t.name + "' has rank " + std::to_string(rank));
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    std::vector<double> data(shape_product(shape));
    for (double& v : data) v = std::bit_cast<double>(r.u64());
    try {
      t.value = Tensor(shape, std::move(data));
    } catch (const std::invalid_argument& e) {
      r.fail("tensor '" + t.name + "': " + e.what());
    }
    if (!t.value.all_finite()) r.fail("tensor '" + t.name + "' contains NaN/Inf");
    ckpt.params.tensors.push_back(std::move(t));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");

  try {
    ckpt.config.validate();
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  const auto layout = param_layout(ckpt.config);
  if (layout.size() != ckpt.params.tensors.size()) r.fail("tensor count does not match the config's layout");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = ckpt.params.tensors[i];
    if (t.name != layout[i].first || t.value.shape() != layout[i].second) {
      r.fail("tensor '" + t.name + "' " + t.value.shape_string() + " does not match expected '" + layout[i].first + "'");
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

}  // namespace whisq
