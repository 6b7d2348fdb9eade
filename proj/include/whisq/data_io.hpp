#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "whisq/tensor.hpp"

namespace whisq {

// ---------------------------------------------------------------------------
// WQEB embedding files
//
//   offset  size  field
//   0       4     magic "WQEB"
//   4       4     version, u32 LE (= 1)
//   8       4     rows T, u32 LE (>= 1)
//   12      4     cols D, u32 LE (>= 1)
//   16      1     dtype code (0 = f32)
//   17      4*T*D payload, row-major f32 LE
//
// The file must end exactly after the payload.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 17;

/// Writes a T x D matrix as f32. Values are rounded to single precision.
void write_embedding(const std::filesystem::path& path, const Tensor& matrix);

/// Reads and validates a WQEB file; the payload is widened to double.
Tensor read_embedding(const std::filesystem::path& path);

/// Same validation on an in-memory image; `origin` is used in error messages.
Tensor decode_embedding(std::span<const unsigned char> bytes, const std::string& origin = "<memory>");
std::vector<unsigned char> encode_embedding(const Tensor& matrix);

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ClipRecord {
  std::string clip_id;
  std::string system_id;
  std::filesystem::path audio_emb_path;
  std::filesystem::path text_emb_path;
  double omq_mos = 0.0;
  double ta_mos = 0.0;
};

/// CSV with header clip_id,system_id,audio_emb_path,text_emb_path,omq_mos,ta_mos
/// (any column order, extra columns ignored). Relative paths resolve against
/// the manifest's directory.
std::vector<ClipRecord> parse_manifest(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, std::span<const ClipRecord> records);

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A clip with its embeddings resident in memory.
struct LoadedClip {
  ClipRecord record;
  Tensor audio;  // T_a x D_a
  Tensor text;   // T_t x D_t
};

std::vector<LoadedClip> load_clips(std::span<const ClipRecord> records);

/// Zero-padded batch. Masks are row-major B x T_max with 1 for valid positions.
struct Batch {
  std::size_t size = 0;
  std::size_t audio_len = 0;
  std::size_t text_len = 0;
  std::size_t audio_dim = 0;
  std::size_t text_dim = 0;
  Tensor audio;  // B x T_a_max x D_a
  Tensor text;   // B x T_t_max x D_t
  std::vector<unsigned char> audio_mask;
  std::vector<unsigned char> text_mask;
  std::vector<double> omq_targets;
  std::vector<double> ta_targets;
  std::vector<std::string> clip_ids;
  std::vector<std::string> system_ids;

  std::span<const unsigned char> audio_mask_row(std::size_t i) const;
  std::span<const unsigned char> text_mask_row(std::size_t i) const;
  /// T_a_max x D_a slice of item i (padding rows included).
  Tensor audio_item(std::size_t i) const;
  Tensor text_item(std::size_t i) const;
};

/// Pads the given clips into one batch.
Batch collate(std::span<const LoadedClip* const> clips);

/// Partitions clips into batches of `batch_size` (last one may be short).
/// With shuffle the order is a seeded permutation; otherwise input order.
std::vector<Batch> make_batches(std::span<const LoadedClip> clips, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle);
std::vector<Batch> make_batches(std::span<const ClipRecord> records, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_clips = 32;
  std::size_t n_systems = 4;
  std::size_t d_audio = 16;
  std::size_t d_text = 16;  // must be >= d_audio
  std::uint64_t seed = 0;
};

/// Planted OMQ label: clamp(3 + 2 tanh(<u, mean audio>), 1, 5).
double planted_omq(std::span<const double> mean_audio, std::span<const double> u);
/// Planted TA label: clamp(5 - beta |mean audio - mean text|, 1, 5); audio is
/// zero-padded to the text width.
double planted_ta(std::span<const double> mean_audio, std::span<const double> mean_text, double beta);

/// Writes emb/<clip_id>.{a,t}.wqeb and manifest.csv under out_dir; returns
/// the manifest path. Labels are the planted functions of the stored
/// embeddings' mean-pooled rows.
std::filesystem::path generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace whisq
