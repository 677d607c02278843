#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace come {

// Dense row-major matrix of 64-bit reals. Rows are tokens, columns features.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Mat zeros_like(const Mat& other) { return Mat(other.rows_, other.cols_); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v);
  bool same_shape(const Mat& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  std::string shape_str() const;

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a · b
Mat matmul(const Mat& a, const Mat& b);
// a · bᵀ
Mat matmul_nt(const Mat& a, const Mat& b);
// aᵀ · b
Mat matmul_tn(const Mat& a, const Mat& b);

// x · wᵀ + bias, with w stored (out × in) and bias (1 × out) or empty.
Mat linear(const Mat& x, const Mat& w, const Mat& bias);

// Column sums as a (1 × cols) matrix.
Mat column_sums(const Mat& m);

void add_inplace(Mat& dst, const Mat& src, double scale = 1.0);
Mat add(const Mat& a, const Mat& b);
Mat hadamard(const Mat& a, const Mat& b);
Mat transpose(const Mat& m);

// Gathers the listed rows into a new matrix.
Mat gather_rows(const Mat& m, std::span<const std::size_t> rows);
Mat hconcat(const Mat& left, const Mat& right);

bool all_finite(const Mat& m);
bool all_finite(std::span<const double> v);
double max_abs(const Mat& m);
double max_abs_diff(const Mat& a, const Mat& b);

// Numerically stable softmax (max-shifted). Throws on non-finite input.
std::vector<double> softmax(std::span<const double> logits);
void softmax_rows_inplace(Mat& m);

double normal_cdf(double x);
double normal_pdf(double x);

// Squared coefficient of variation with population variance. Zero mean gives 0.
double cv_squared(std::span<const double> v);
std::vector<double> cv_squared_grad(std::span<const double> v);

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

// Sub-streams derived from one master seed. Each has its own engine so that
// re-seeding one (e.g. data) never perturbs another (e.g. init).
enum class RngStream : std::uint64_t {
  data = 1,
  init = 2,
  routing = 3,
  shuffle = 4,
  frozen = 5,
};

// Mersenne Twister (std::mt19937_64) keyed by a SplitMix64-mixed seed.
// Uniform and normal draws are computed here rather than through the
// standard distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng stream(std::uint64_t master_seed, RngStream which);
  // Child generator keyed by (this seed, tag); does not advance this one.
  Rng split(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay)
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1.4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptState {
  AdamWConfig config;
  std::vector<Mat> first;
  std::vector<Mat> second;
  std::uint64_t step = 0;

  static OptState for_params(const AdamWConfig& config, std::span<Mat* const> params);
};

// p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)
void adamw_step(std::span<Mat* const> params, std::span<const Mat* const> grads, OptState& state);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::vector<std::size_t> non_finite;  // coordinates whose evaluation was not finite

  bool passed(double tolerance) const { return non_finite.empty() && max_rel_error < tolerance; }
};

// |a − n| / max(1, |a|, |n|)
double grad_rel_error(double analytic, double numeric);

// Central differences of `fn` around `point`, compared with `analytic`.
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& fn,
                           std::span<const double> point, std::span<const double> analytic,
                           double h = 1e-5);

// Same check, but perturbs the given parameter matrices in place and calls
// `fn` for each perturbation. Parameters are restored before returning.
GradCheckResult grad_check_params(const std::function<double()>& fn, std::span<Mat* const> params,
                                  std::span<const Mat* const> analytic, double h = 1e-5);

}  // namespace come
