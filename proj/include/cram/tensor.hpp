#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace cram {

// Row-major views over contiguous double storage. Views never own memory.
struct MatrixView {
  double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  double& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) const { return data + r * cols; }
  std::size_t size() const { return rows * cols; }
};

struct ConstMatrixView {
  const double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  ConstMatrixView() = default;
  ConstMatrixView(const double* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
  ConstMatrixView(MatrixView v) : data(v.data), rows(v.rows), cols(v.cols) {}  // NOLINT

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  const double* row(std::size_t r) const { return data + r * cols; }
  std::size_t size() const { return rows * cols; }
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  MatrixView view() { return {data_.data(), rows_, cols_}; }
  ConstMatrixView view() const { return {data_.data(), rows_, cols_}; }
  operator MatrixView() { return view(); }              // NOLINT
  operator ConstMatrixView() const { return view(); }   // NOLINT

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, 0.0);
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Dense kernels used by the forward and backward passes. The default versions
// split output rows across OpenMP threads; each output element is reduced in a
// fixed order, so results do not depend on the thread count.
namespace kernels {

// out = a * b  (or out += a * b when accumulate is set)
void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);
// out = a^T * b
void matmul_tn(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);
// out = a * b^T
void matmul_nt(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);

// Single-threaded textbook loops, kept as the reference the parallel kernels
// are tested and benchmarked against.
namespace serial {
void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);
void matmul_tn(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);
void matmul_nt(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate = false);
}  // namespace serial

// Worker count used by parallel kernels; 0 restores the OpenMP default.
void set_max_threads(int n);
int max_threads();

}  // namespace kernels
}  // namespace cram
