#include "come/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <stdexcept>

namespace come {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  void count(std::size_t n, const char* what) {
    if (n > 0xffffffffu) throw std::invalid_argument(std::string(what) + " does not fit in 32 bits");
    u32(static_cast<std::uint32_t>(n));
  }
  void save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
    out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw std::runtime_error("write failed: " + file.string());
  }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& file) : name_(file.string()) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + name_);
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void magic() {
    if (str(4) != std::string(kMagic, 4)) throw std::runtime_error(name_ + ": bad magic");
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw std::runtime_error(name_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error(name_ + ": truncated file");
  }
  std::string name_;
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_dataset(const std::filesystem::path& file, const std::vector<Sample>& samples) {
  const std::size_t t = samples.empty() ? 0 : samples[0].tokens.rows();
  const std::size_t d = samples.empty() ? 0 : samples[0].tokens.cols();
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kDatasetVersion);
  w.count(samples.size(), "sample count");
  w.count(t, "token count");
  w.count(d, "width");
  for (const Sample& s : samples) {
    if (s.tokens.rows() != t || s.tokens.cols() != d) {
      throw std::invalid_argument("write_dataset: samples have different shapes");
    }
    w.u32(s.source);
    w.u32(s.label);
    for (double v : s.tokens.values()) w.f32(static_cast<float>(v));
  }
  w.save(file);
}

std::vector<Sample> read_dataset(const std::filesystem::path& file) {
  Reader r(file);
  r.magic();
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw std::runtime_error(file.string() + ": unsupported dataset version " + std::to_string(version));
  }
  const std::size_t n = r.u32(), t = r.u32(), d = r.u32();
  std::vector<Sample> out(n);
  for (Sample& s : out) {
    s.source = r.u32();
    s.label = r.u32();
    s.tokens = Mat(t, d);
    for (double& v : s.tokens.values()) v = r.f32();
  }
  r.finish();
  return out;
}

Checkpoint make_checkpoint(ComeModel& model, const std::string& metadata) {
  Checkpoint c;
  c.metadata = metadata;
  c.frozen_seeds = {model.structure_expert().seed(), model.semantic_expert().seed()};
  model.params().for_each([&](const std::string& name, Mat& m) {
    NamedBlob b{name, m.rows(), m.cols(), {}};
    b.values.reserve(m.size());
    for (double v : m.values()) b.values.push_back(static_cast<float>(v));
    c.blobs.push_back(std::move(b));
  });
  return c;
}

void write_checkpoint(const std::filesystem::path& file, const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.count(c.metadata.size(), "metadata");
  w.raw(c.metadata.data(), c.metadata.size());
  w.count(c.frozen_seeds.size(), "seed count");
  for (std::uint64_t s : c.frozen_seeds) w.u64(s);
  w.count(c.blobs.size(), "blob count");
  for (const NamedBlob& b : c.blobs) {
    w.count(b.name.size(), "blob name");
    w.raw(b.name.data(), b.name.size());
    w.u32(2);
    w.count(b.rows, "rows");
    w.count(b.cols, "cols");
    if (b.values.size() != b.rows * b.cols) {
      throw std::invalid_argument("write_checkpoint: blob " + b.name + " has the wrong size");
    }
    for (float v : b.values) w.f32(v);
  }
  w.save(file);
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
  Reader r(file);
  r.magic();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error(file.string() + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  Checkpoint c;
  c.metadata = r.str(r.u32());
  c.frozen_seeds.resize(r.u32());
  for (std::uint64_t& s : c.frozen_seeds) s = r.u64();
  c.blobs.resize(r.u32());
  for (NamedBlob& b : c.blobs) {
    b.name = r.str(r.u32());
    const std::uint32_t dims = r.u32();
    if (dims != 2) throw std::runtime_error(file.string() + ": blob " + b.name + " is not 2-D");
    b.rows = r.u32();
    b.cols = r.u32();
    b.values.resize(b.rows * b.cols);
    for (float& v : b.values) v = r.f32();
  }
  r.finish();
  return c;
}

ModelParams params_from_checkpoint(const Checkpoint& checkpoint, const ModelConfig& config) {
  // Shapes come from a fresh initialisation of the same configuration.
  ComeModel shape(config, 0);
  ModelParams p = shape.params();
  std::size_t used = 0;
  p.for_each([&](const std::string& name, Mat& m) {
    const NamedBlob* found = nullptr;
    for (const NamedBlob& b : checkpoint.blobs)
      if (b.name == name) found = &b;
    if (found == nullptr) throw std::runtime_error("checkpoint is missing parameter " + name);
    if (found->rows != m.rows() || found->cols != m.cols()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                               std::to_string(found->rows) + "x" + std::to_string(found->cols) +
                               ", expected " + m.shape_str());
    }
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = found->values[i];
    ++used;
  });
  if (used != checkpoint.blobs.size()) {
    throw std::runtime_error("checkpoint holds parameters the configuration does not use");
  }
  return p;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), out, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[out[i] >> 4];
    s += hex[out[i] & 0xf];
  }
  return s;
}

std::string sha256_file(const std::filesystem::path& file) {
  const std::string text = read_text(file);
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(const std::filesystem::path& file) : path_(file) {
  file_ = std::fopen(file.string().c_str(), "wb");
  if (file_ == nullptr) throw std::runtime_error("cannot open " + file.string() + " for writing");
}

CsvWriter::~CsvWriter() {
  if (file_ != nullptr) std::fclose(file_);
}

void CsvWriter::header(const std::vector<std::string>& columns) {
  for (const std::string& c : columns) cell(c);
  end_row();
}

CsvWriter& CsvWriter::cell(const std::string& s) {
  if (!first_) std::fputc(',', file_);
  std::fputs(s.c_str(), file_);
  first_ = false;
  return *this;
}

CsvWriter& CsvWriter::cell(double v) { return cell(format_real(v)); }

CsvWriter& CsvWriter::cell(std::size_t v) { return cell(std::to_string(v)); }

void CsvWriter::end_row() {
  std::fputc('\n', file_);
  first_ = true;
  if (std::ferror(file_)) throw std::runtime_error("write failed: " + path_.string());
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace come
