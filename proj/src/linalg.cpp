#include "apex/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "apex/error.hpp"

namespace apex {

namespace {

constexpr int kTaylorOrder = 18;
constexpr double kScaledNormTarget = 0.5;
constexpr int kMaxSquarings = 60;

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

void require_square(const Matrix& a, const char* what) {
  if (!a.is_square()) {
    throw ShapeError(std::string(what) + ": matrix must be square, got " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
}

// Horner form of sum_{j<=order} x^j / j!.
Matrix taylor_exp(const Matrix& x) {
  const std::size_t n = x.rows();
  Matrix acc = Matrix::identity(n);
  for (int j = kTaylorOrder; j >= 1; --j) {
    acc = x * acc;
    acc *= 1.0 / j;
    for (std::size_t i = 0; i < n; ++i) acc(i, i) += 1.0;
  }
  return acc;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "Matrix::operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "Matrix::operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw ShapeError("matvec: matrix has " + std::to_string(m.cols()) + " columns, vector has " +
                     std::to_string(x.size()) + " entries");
  }
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_inner(m, m)); }

double one_norm(const Matrix& m) {
  double best = 0.0;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double col = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) col += std::abs(m(r, c));
    best = std::max(best, col);
  }
  return best;
}

double frobenius_inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_inner");
  double acc = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) acc += da[i] * db[i];
  return acc;
}

bool all_finite(const Matrix& m) {
  for (double v : m.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix mat_exp(const Matrix& a) {
  require_square(a, "mat_exp");
  if (!all_finite(a)) throw NumericError("mat_exp: input has non-finite entries");

  const double norm = one_norm(a);
  int squarings = 0;
  if (norm > kScaledNormTarget) {
    squarings = static_cast<int>(std::ceil(std::log2(norm / kScaledNormTarget)));
  }
  if (squarings > kMaxSquarings) {
    throw NumericError("mat_exp: norm " + std::to_string(norm) + " needs " +
                       std::to_string(squarings) + " squarings, limit is " +
                       std::to_string(kMaxSquarings));
  }

  Matrix result = taylor_exp(a * std::ldexp(1.0, -squarings));
  for (int i = 0; i < squarings; ++i) result = result * result;

  if (!all_finite(result)) {
    throw NumericError("mat_exp: result overflowed (input 1-norm " + std::to_string(norm) + ")");
  }
  return result;
}

Matrix mat_inverse_via_exp(const Matrix& a) { return mat_exp(a * -1.0); }

Matrix mat_exp_vjp(const Matrix& a, const Matrix& cotangent) {
  require_square(a, "mat_exp_vjp");
  require_same_shape(a, cotangent, "mat_exp_vjp");
  const std::size_t n = a.rows();

  Matrix block(2 * n, 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      block(i, j) = a(j, i);
      block(n + i, n + j) = a(j, i);
      block(i, n + j) = cotangent(i, j);
    }
  }
  const Matrix e = mat_exp(block);

  Matrix grad(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) grad(i, j) = e(i, n + j);
  return grad;
}

AdamState AdamState::for_shape(std::size_t rows, std::size_t cols, double lr, double beta1,
                               double beta2, double weight_decay, double eps) {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("AdamState: betas must lie in [0, 1)");
  }
  AdamState s;
  s.first_moment = Matrix(rows, cols);
  s.second_moment = Matrix(rows, cols);
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.weight_decay = weight_decay;
  s.eps = eps;
  return s;
}

Matrix adam_step(const Matrix& param, const Matrix& grad, AdamState& state) {
  require_same_shape(param, grad, "adam_step");
  require_same_shape(param, state.first_moment, "adam_step (first moment)");
  require_same_shape(param, state.second_moment, "adam_step (second moment)");

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  Matrix out = param;
  auto p = out.data();
  auto g = grad.data();
  auto m = state.first_moment.data();
  auto v = state.second_moment.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
    v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    p[i] -= state.lr * state.weight_decay * p[i];
    p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
  return out;
}

}  // namespace apex
