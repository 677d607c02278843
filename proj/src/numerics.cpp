#include "come/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace come {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Mat: data length does not match rows*cols");
  }
}

Mat Mat::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw std::invalid_argument("Mat::from_rows: ragged rows");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Mat(r, c, std::move(data));
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Mat::shape_str() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + a.shape_str() + " * " +
                                b.shape_str());
  }
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch " + a.shape_str() + " * " +
                                b.shape_str() + "^T");
  }
  Mat out(a.rows(), b.rows());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: inner dimension mismatch " + a.shape_str() + "^T * " +
                                b.shape_str());
  }
  Mat out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto ar = a.row(k);
    const auto br = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ar[i];
      if (aki == 0.0) continue;
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

Mat linear(const Mat& x, const Mat& w, const Mat& bias) {
  Mat out = matmul_nt(x, w);
  if (!bias.empty()) {
    if (bias.rows() != 1 || bias.cols() != w.rows()) {
      throw std::invalid_argument("linear: bias shape " + bias.shape_str() + " does not match " +
                                  w.shape_str());
    }
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto o = out.row(i);
      for (std::size_t j = 0; j < out.cols(); ++j) o[j] += bias(0, j);
    }
  }
  return out;
}

Mat column_sums(const Mat& m) {
  Mat out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += r[j];
  }
  return out;
}

void add_inplace(Mat& dst, const Mat& src, double scale) {
  require_same_shape(dst, src, "add_inplace");
  auto d = dst.values();
  const auto s = src.values();
  if (scale == 1.0) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  } else {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
  }
}

Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  add_inplace(out, b);
  return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "hadamard");
  Mat out = a;
  auto o = out.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

Mat transpose(const Mat& m) {
  Mat out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

Mat gather_rows(const Mat& m, std::span<const std::size_t> rows) {
  Mat out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Mat hconcat(const Mat& left, const Mat& right) {
  if (left.rows() != right.rows()) {
    throw std::invalid_argument("hconcat: row mismatch " + left.shape_str() + " | " +
                                right.shape_str());
  }
  Mat out(left.rows(), left.cols() + right.cols());
  for (std::size_t i = 0; i < left.rows(); ++i) {
    auto o = out.row(i);
    const auto l = left.row(i);
    const auto r = right.row(i);
    std::copy(l.begin(), l.end(), o.begin());
    std::copy(r.begin(), r.end(), o.begin() + static_cast<std::ptrdiff_t>(l.size()));
  }
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Mat& m) { return all_finite(m.values()); }

double max_abs(const Mat& m) {
  double best = 0.0;
  for (double v : m.values()) best = std::max(best, std::abs(v));
  return best;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double best = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) best = std::max(best, std::abs(av[i] - bv[i]));
  return best;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) {
    throw std::invalid_argument("softmax: empty input");
  }
  if (!all_finite(logits)) {
    throw std::invalid_argument("softmax: non-finite logit");
  }
  const double shift = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - shift);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

void softmax_rows_inplace(Mat& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const auto p = softmax(r);
    std::copy(p.begin(), p.end(), r.begin());
  }
}

// glibc erfc is accurate to a few ulp, well inside 1e-10 absolute.
double normal_cdf(double x) {
  if (!std::isfinite(x)) {
    throw std::invalid_argument("normal_cdf: non-finite input");
  }
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

double normal_pdf(double x) {
  constexpr double inv_sqrt_2pi = 0.398942280401432677939946059934;
  return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

double cv_squared(std::span<const double> v) {
  if (v.empty()) {
    throw std::invalid_argument("cv_squared: empty vector");
  }
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  return var / (mean * mean);
}

// cv² = (Σv²/n)/mean² − 1, so ∂/∂v_i = 2/(n·mean²) · (v_i − Σv²/(n·mean)).
std::vector<double> cv_squared_grad(std::span<const double> v) {
  if (v.empty()) {
    throw std::invalid_argument("cv_squared_grad: empty vector");
  }
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  std::vector<double> grad(v.size(), 0.0);
  if (mean == 0.0) return grad;
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double scale = 2.0 / (n * mean * mean);
  const double pivot = sq / (n * mean);
  for (std::size_t i = 0; i < v.size(); ++i) grad[i] = scale * (v[i] - pivot);
  return grad;
}

// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::stream(std::uint64_t master_seed, RngStream which) {
  return Rng(splitmix64(master_seed ^ splitmix64(static_cast<std::uint64_t>(which) << 32)));
}

Rng Rng::split(std::uint64_t tag) const { return Rng(splitmix64(seed_ + splitmix64(tag + 1))); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) {
    throw std::invalid_argument("Rng::index: empty range");
  }
  // Rejection sampling for an unbiased draw.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return static_cast<std::size_t>(r % bound);
}

// ---------------------------------------------------------------------------

OptState OptState::for_params(const AdamWConfig& config, std::span<Mat* const> params) {
  OptState state;
  state.config = config;
  for (const Mat* p : params) {
    state.first.push_back(Mat::zeros_like(*p));
    state.second.push_back(Mat::zeros_like(*p));
  }
  return state;
}

void adamw_step(std::span<Mat* const> params, std::span<const Mat* const> grads, OptState& state) {
  if (params.size() != grads.size() || params.size() != state.first.size()) {
    throw std::invalid_argument("adamw_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.first[i])) {
      throw std::invalid_argument("adamw_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  const AdamWConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    const auto g = grads[i]->values();
    auto m = state.first[i].values();
    auto v = state.second[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bias1;
      const double v_hat = v[k] / bias2;
      p[k] *= 1.0 - c.lr * c.weight_decay;
      p[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& fn,
                           std::span<const double> point, std::span<const double> analytic,
                           double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("grad_check: step must be positive");
  }
  if (point.size() != analytic.size()) {
    throw std::invalid_argument("grad_check: gradient length does not match point");
  }
  std::vector<double> x(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double plus = fn(x);
    x[i] = saved - h;
    const double minus = fn(x);
    x[i] = saved;
    ++result.checked;
    const double numeric = (plus - minus) / (2.0 * h);
    if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(analytic[i])) {
      result.non_finite.push_back(i);
      continue;
    }
    const double err = grad_rel_error(analytic[i], numeric);
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<double()>& fn, std::span<Mat* const> params,
                                  std::span<const Mat* const> analytic, double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("grad_check_params: step must be positive");
  }
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("grad_check_params: parameter/gradient count mismatch");
  }
  GradCheckResult result;
  std::size_t flat = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p]->same_shape(*analytic[p])) {
      throw std::invalid_argument("grad_check_params: gradient shape mismatch at " +
                                  std::to_string(p));
    }
    auto values = params[p]->values();
    const auto grad = analytic[p]->values();
    for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = fn();
      values[i] = saved - h;
      const double minus = fn();
      values[i] = saved;
      ++result.checked;
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(grad[i])) {
        result.non_finite.push_back(flat);
        continue;
      }
      const double err = grad_rel_error(grad[i], (plus - minus) / (2.0 * h));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_index = flat;
      }
    }
  }
  return result;
}

}  // namespace come
