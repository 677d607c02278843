#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "come/datagen.hpp"
#include "come/model.hpp"

namespace come {

// Binary containers share a 4-byte magic and a u32 version; all integers and
// reals are little-endian.
inline constexpr char kMagic[4] = {'C', 'O', 'M', 'E'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Feature file: magic, version, N, T, D, then per sample: source u32,
// label u32, T·D f32 values row-major.
void write_dataset(const std::filesystem::path& file, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& file);

struct NamedBlob {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
};

// Checkpoint: magic, version, u32 length + JSON metadata, u32 count + u64
// frozen-expert seeds, u32 count + blobs. A blob is u32 name length, name
// bytes, u32 ndims (always 2), u32 rows, u32 cols, rows·cols f32 values.
struct Checkpoint {
  std::string metadata;  // JSON text
  std::vector<std::uint64_t> frozen_seeds;
  std::vector<NamedBlob> blobs;
};

Checkpoint make_checkpoint(ComeModel& model, const std::string& metadata);
void write_checkpoint(const std::filesystem::path& file, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& file);
// Parameters of `config` filled from the blobs; every trainable matrix must
// be present with a matching shape.
ModelParams params_from_checkpoint(const Checkpoint& checkpoint, const ModelConfig& config);

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& file);

// Shortest decimal text that reads back to the same double ("nan" for NaN).
std::string format_real(double v);

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& file);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void header(const std::vector<std::string>& columns);
  CsvWriter& cell(const std::string& s);
  CsvWriter& cell(double v);
  CsvWriter& cell(std::size_t v);
  void end_row();

 private:
  std::FILE* file_ = nullptr;
  std::filesystem::path path_;
  bool first_ = true;
};

void write_text(const std::filesystem::path& file, const std::string& text);
std::string read_text(const std::filesystem::path& file);

}  // namespace come
