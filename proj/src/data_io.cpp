#include "whisq/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "whisq/errors.hpp"
#include "whisq/rng.hpp"

namespace whisq {

namespace fs = std::filesystem;

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const unsigned char> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

std::vector<unsigned char> encode_embedding(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("write_embedding: expected a T x D matrix, got " + m.shape_string());
  if (!m.all_finite()) throw DataError("write_embedding: matrix contains NaN/Inf");
  std::vector<unsigned char> out;
  out.reserve(kEmbeddingHeaderBytes + 4 * m.size());
  for (char c : {'W', 'Q', 'E', 'B'}) out.push_back(static_cast<unsigned char>(c));
  put_u32(out, kEmbeddingVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.push_back(0);
  for (double v : m.data()) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) throw DataError("write_embedding: value overflows f32");
    put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Tensor decode_embedding(std::span<const unsigned char> b, const std::string& origin) {
  auto fail = [&](const std::string& msg) { throw DataError(origin + ": " + msg); };
  if (b.size() < kEmbeddingHeaderBytes) fail("truncated header");
  if (std::memcmp(b.data(), "WQEB", 4) != 0) fail("bad magic");
  const std::uint32_t version = get_u32(b, 4);
  if (version != kEmbeddingVersion) fail("unsupported version " + std::to_string(version));
  const std::uint32_t rows = get_u32(b, 8);
  const std::uint32_t cols = get_u32(b, 12);
  if (b[16] != 0) fail("unsupported dtype code " + std::to_string(b[16]));
  if (rows == 0 || cols == 0) fail("empty matrix (T=" + std::to_string(rows) + ", D=" + std::to_string(cols) + ")");
  const std::size_t expected = std::size_t{4} * rows * cols;
  const std::size_t actual = b.size() - kEmbeddingHeaderBytes;
  if (actual < expected) {
    fail("truncated payload (expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual) + ")");
  }
  if (actual > expected) fail("trailing bytes after payload (" + std::to_string(actual - expected) + " extra)");
  std::vector<double> data(std::size_t{rows} * cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float f = std::bit_cast<float>(get_u32(b, kEmbeddingHeaderBytes + 4 * i));
    if (!std::isfinite(f)) fail("NaN/Inf in payload at element " + std::to_string(i));
    data[i] = f;
  }
  return Tensor({rows, cols}, std::move(data));
}

void write_embedding(const fs::path& path, const Tensor& matrix) { write_file(path, encode_embedding(matrix)); }

Tensor read_embedding(const fs::path& path) { return decode_embedding(read_file(path), path.string()); }

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw DataError("unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

double parse_real(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) throw DataError("cannot parse " + what + " '" + s + "'");
  return v;
}

std::string format_real(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<ClipRecord> parse_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  const std::string where = path.string();

  std::string line;
  if (!std::getline(in, line)) throw DataError(where + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  const char* required[] = {"clip_id", "system_id", "audio_emb_path", "text_emb_path", "omq_mos", "ta_mos"};
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  std::size_t idx[6];
  for (int k = 0; k < 6; ++k) {
    auto it = col.find(required[k]);
    if (it == col.end()) throw DataError(where + ": missing column '" + required[k] + "'");
    idx[k] = it->second;
  }

  std::vector<ClipRecord> records;
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string at = where + ":" + std::to_string(lineno);
    std::vector<std::string> f;
    try {
      f = split_csv_line(line);
    } catch (const DataError& e) {
      throw DataError(at + ": unreadable row (" + e.what() + ")");
    }
    if (f.size() != header.size()) {
      throw DataError(at + ": unreadable row (expected " + std::to_string(header.size()) + " fields, got " +
                      std::to_string(f.size()) + ")");
    }
    ClipRecord r;
    r.clip_id = f[idx[0]];
    r.system_id = f[idx[1]];
    if (r.clip_id.empty()) throw DataError(at + ": empty clip_id");
    if (r.system_id.empty()) throw DataError(at + ": clip '" + r.clip_id + "' has empty system_id");
    fs::path a = f[idx[2]], t = f[idx[3]];
    r.audio_emb_path = a.is_absolute() ? a : base / a;
    r.text_emb_path = t.is_absolute() ? t : base / t;
    try {
      r.omq_mos = parse_real(f[idx[4]], "omq_mos");
      r.ta_mos = parse_real(f[idx[5]], "ta_mos");
    } catch (const DataError& e) {
      throw DataError(at + ": clip '" + r.clip_id + "': " + e.what());
    }
    for (auto [name, v] : {std::pair{"omq_mos", r.omq_mos}, std::pair{"ta_mos", r.ta_mos}}) {
      if (v < 1.0 || v > 5.0) {
        throw DataError(at + ": clip '" + r.clip_id + "' has " + name + " = " + format_real(v) + " outside [1, 5]");
      }
    }
    if (!seen.insert(r.clip_id).second) throw DataError(at + ": duplicate clip_id '" + r.clip_id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const fs::path& path, std::span<const ClipRecord> records) {
  std::ostringstream os;
  os << "clip_id,system_id,audio_emb_path,text_emb_path,omq_mos,ta_mos\n";
  for (const auto& r : records) {
    os << csv_escape(r.clip_id) << ',' << csv_escape(r.system_id) << ',' << csv_escape(r.audio_emb_path.generic_string())
       << ',' << csv_escape(r.text_emb_path.generic_string()) << ',' << format_real(r.omq_mos) << ','
       << format_real(r.ta_mos) << '\n';
  }
  const std::string s = os.str();
  write_file(path, std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------

std::vector<LoadedClip> load_clips(std::span<const ClipRecord> records) {
  std::vector<LoadedClip> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    try {
      out.push_back({r, read_embedding(r.audio_emb_path), read_embedding(r.text_emb_path)});
    } catch (const DataError& e) {
      throw DataError("clip '" + r.clip_id + "': " + e.what());
    }
  }
  return out;
}

std::span<const unsigned char> Batch::audio_mask_row(std::size_t i) const {
  return std::span(audio_mask).subspan(i * audio_len, audio_len);
}

std::span<const unsigned char> Batch::text_mask_row(std::size_t i) const {
  return std::span(text_mask).subspan(i * text_len, text_len);
}

Tensor Batch::audio_item(std::size_t i) const {
  const std::size_t n = audio_len * audio_dim;
  auto first = audio.storage().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor({audio_len, audio_dim}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Tensor Batch::text_item(std::size_t i) const {
  const std::size_t n = text_len * text_dim;
  auto first = text.storage().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor({text_len, text_dim}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Batch collate(std::span<const LoadedClip* const> clips) {
  if (clips.empty()) throw DataError("collate: empty clip list");
  Batch b;
  b.size = clips.size();
  b.audio_dim = clips[0]->audio.cols();
  b.text_dim = clips[0]->text.cols();
  for (const auto* c : clips) {
    if (c->audio.cols() != b.audio_dim) {
      throw DataError("clip '" + c->record.clip_id + "': audio embedding dim " + std::to_string(c->audio.cols()) +
                      " differs from " + std::to_string(b.audio_dim));
    }
    if (c->text.cols() != b.text_dim) {
      throw DataError("clip '" + c->record.clip_id + "': text embedding dim " + std::to_string(c->text.cols()) +
                      " differs from " + std::to_string(b.text_dim));
    }
    b.audio_len = std::max(b.audio_len, c->audio.rows());
    b.text_len = std::max(b.text_len, c->text.rows());
  }
  b.audio = Tensor({b.size, b.audio_len, b.audio_dim});
  b.text = Tensor({b.size, b.text_len, b.text_dim});
  b.audio_mask.assign(b.size * b.audio_len, 0);
  b.text_mask.assign(b.size * b.text_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& c = *clips[i];
    std::copy(c.audio.data().begin(), c.audio.data().end(),
              b.audio.storage().begin() + static_cast<std::ptrdiff_t>(i * b.audio_len * b.audio_dim));
    std::copy(c.text.data().begin(), c.text.data().end(),
              b.text.storage().begin() + static_cast<std::ptrdiff_t>(i * b.text_len * b.text_dim));
    std::fill_n(b.audio_mask.begin() + static_cast<std::ptrdiff_t>(i * b.audio_len), c.audio.rows(), 1);
    std::fill_n(b.text_mask.begin() + static_cast<std::ptrdiff_t>(i * b.text_len), c.text.rows(), 1);
    b.omq_targets.push_back(c.record.omq_mos);
    b.ta_targets.push_back(c.record.ta_mos);
    b.clip_ids.push_back(c.record.clip_id);
    b.system_ids.push_back(c.record.system_id);
  }
  return b;
}

std::vector<Batch> make_batches(std::span<const LoadedClip> clips, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle) {
  if (clips.empty()) throw DataError("make_batches: empty record list");
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const LoadedClip*> members;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) members.push_back(&clips[order[k]]);
    batches.push_back(collate(members));
  }
  return batches;
}

std::vector<Batch> make_batches(std::span<const ClipRecord> records, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle) {
  if (records.empty()) throw DataError("make_batches: empty record list");
  const auto clips = load_clips(records);
  return make_batches(std::span<const LoadedClip>(clips), batch_size, seed, shuffle);
}

// ---------------------------------------------------------------------------

double planted_omq(std::span<const double> mean_audio, std::span<const double> u) {
  double dot = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) dot += u[k] * mean_audio[k];
  return std::clamp(3.0 + 2.0 * std::tanh(dot), 1.0, 5.0);
}

double planted_ta(std::span<const double> mean_audio, std::span<const double> mean_text, double beta) {
  double s = 0.0;
  for (std::size_t k = 0; k < mean_text.size(); ++k) {
    const double a = k < mean_audio.size() ? mean_audio[k] : 0.0;
    s += (a - mean_text[k]) * (a - mean_text[k]);
  }
  return std::clamp(5.0 - beta * std::sqrt(s), 1.0, 5.0);
}

namespace {

std::vector<double> column_mean(const Tensor& m) {
  std::vector<double> mu(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < m.cols(); ++k) mu[k] += m.at(i, k);
  }
  for (double& v : mu) v /= static_cast<double>(m.rows());
  return mu;
}

// Rows = center + sigma * noise, with the noise recentred so the row mean is
// exactly `center` before f32 rounding.
Tensor sample_sequence(Rng& rng, std::size_t rows, std::span<const double> center, double sigma) {
  const std::size_t d = center.size();
  Tensor m({rows, d});
  for (double& v : m.storage()) v = sigma * rng.normal();
  const auto mu = column_mean(m);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < d; ++k) m.at(i, k) += center[k] - mu[k];
  }
  return m;
}

std::vector<double> unit_vector(Rng& rng, std::size_t d, std::span<const std::vector<double>> orthogonal_to) {
  for (;;) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    for (const auto& o : orthogonal_to) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += v[k] * o[k];
      for (std::size_t k = 0; k < d; ++k) v[k] -= dot * o[k];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 1e-6) {
      for (double& x : v) x /= n;
      return v;
    }
  }
}

// Round-trip through f32 so labels are computed from what is stored.
Tensor quantize(const Tensor& m) {
  Tensor q = m;
  for (double& v : q.storage()) v = static_cast<float>(v);
  return q;
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  std::string s = std::to_string(i);
  return prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

fs::path generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.n_systems < 1 || spec.n_clips < spec.n_systems) {
    throw std::invalid_argument("generate_synthetic: need n_clips >= n_systems >= 1");
  }
  if (spec.d_audio < 2) throw std::invalid_argument("generate_synthetic: d_audio must be >= 2");
  if (spec.d_text < spec.d_audio) throw std::invalid_argument("generate_synthetic: d_text must be >= d_audio");
  std::error_code ec;
  fs::create_directories(out_dir / "emb", ec);
  if (ec) throw DataError("cannot create " + (out_dir / "emb").string() + ": " + ec.message());

  constexpr double kAudioSigma = 0.5;
  constexpr double kTextSigma = 0.5;
  constexpr double kMaxOffset = 2.0;  // largest audio/text mean distance
  const double beta = 3.75 / kMaxOffset;

  Rng rng(spec.seed);
  const std::size_t da = spec.d_audio, dt = spec.d_text;
  std::vector<std::vector<double>> basis;
  basis.push_back(unit_vector(rng, da, basis));  // u: quality direction
  basis.push_back(unit_vector(rng, da, basis));  // v: misalignment direction
  const auto& u = basis[0];
  const auto& v = basis[1];

  // Per-system quality and alignment tendencies.
  std::vector<double> sys_quality(spec.n_systems), sys_align(spec.n_systems);
  for (std::size_t s = 0; s < spec.n_systems; ++s) {
    sys_quality[s] = rng.uniform(-1.0, 1.0);
    sys_align[s] = rng.uniform(0.0, 1.0);
  }

  // Misalignment offsets on an exact grid [0, kMaxOffset], ranked by a
  // system-biased random key, so the TA labels always span [1.25, 5].
  const std::size_t n = spec.n_clips;
  std::vector<double> key(n);
  for (std::size_t i = 0; i < n; ++i) key[i] = sys_align[i % spec.n_systems] + rng.uniform(0.0, 1.0);
  std::vector<std::size_t> by_key(n);
  std::iota(by_key.begin(), by_key.end(), std::size_t{0});
  std::stable_sort(by_key.begin(), by_key.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  std::vector<double> offset(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) offset[by_key[r]] = n > 1 ? kMaxOffset * static_cast<double>(r) / static_cast<double>(n - 1) : 0.0;

  std::vector<ClipRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t sys = i % spec.n_systems;
    ClipRecord r;
    r.clip_id = numbered("clip", i, 4);
    r.system_id = numbered("sys", sys, 2);

    const double quality = sys_quality[sys] + rng.uniform(-0.6, 0.6);
    auto nuisance = unit_vector(rng, da, basis);
    const double nuisance_scale = rng.uniform(0.0, 1.0);
    std::vector<double> mu_a(da), mu_t(dt, 0.0);
    for (std::size_t k = 0; k < da; ++k) {
      mu_a[k] = quality * u[k] + nuisance_scale * nuisance[k];
      mu_t[k] = mu_a[k] + offset[i] * v[k];
    }
    const auto ta_len = static_cast<std::size_t>(rng.uniform_int(20, 50));
    const auto tt_len = static_cast<std::size_t>(rng.uniform_int(4, 12));
    const Tensor audio = quantize(sample_sequence(rng, ta_len, mu_a, kAudioSigma));
    const Tensor text = quantize(sample_sequence(rng, tt_len, mu_t, kTextSigma));

    r.audio_emb_path = fs::path("emb") / (r.clip_id + ".a.wqeb");
    r.text_emb_path = fs::path("emb") / (r.clip_id + ".t.wqeb");
    write_embedding(out_dir / r.audio_emb_path, audio);
    write_embedding(out_dir / r.text_emb_path, text);

    const auto ma = column_mean(audio);
    const auto mt = column_mean(text);
    r.omq_mos = planted_omq(ma, u);
    r.ta_mos = planted_ta(ma, mt, beta);
    records.push_back(std::move(r));
  }

  const fs::path manifest = out_dir / "manifest.csv";
  write_manifest(manifest, records);

  nlohmann::json planted = {{"seed", spec.seed}, {"beta", beta}, {"u", u}, {"v", v},
                            {"n_clips", spec.n_clips}, {"n_systems", spec.n_systems}};
  const std::string s = planted.dump(2) + "\n";
  write_file(out_dir / "planted.json", std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  return manifest;
}

}  // namespace whisq
