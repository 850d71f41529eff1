#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace apex {

// Dense row-major matrix of doubles. Small (D <= a few thousand) and square in
// most uses; no expression templates, every operation materializes.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool is_square() const { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Matrix transposed() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(const Matrix& a, const Matrix& b);

// y = M x
std::vector<double> matvec(const Matrix& m, std::span<const double> x);

double frobenius_norm(const Matrix& m);
// Induced 1-norm (max absolute column sum); used to pick the squaring depth.
double one_norm(const Matrix& m);
// <a, b> = sum_ij a_ij b_ij
double frobenius_inner(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m);

// exp(a) by scaling and squaring around an order-18 Taylor core. The squaring
// depth s is the smallest with ||a||_1 / 2^s <= 0.5.
Matrix mat_exp(const Matrix& a);

// exp(-a); the only way the engine ever obtains U^{-1}.
Matrix mat_inverse_via_exp(const Matrix& a);

// Gradient of A -> <exp(A), cotangent> with respect to A. Equal to the Frechet
// derivative L(A^T, cotangent), read off the top-right block of
// exp([[A^T, C], [0, A^T]]).
Matrix mat_exp_vjp(const Matrix& a, const Matrix& cotangent);

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::size_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;

  static AdamState for_shape(std::size_t rows, std::size_t cols, double lr, double beta1,
                             double beta2, double weight_decay, double eps = 1e-8);
};

// One bias-corrected Adam step with decoupled weight decay. Advances state.step
// and updates both moments.
Matrix adam_step(const Matrix& param, const Matrix& grad, AdamState& state);

}  // namespace apex
