#include "cram/tensor.hpp"

#include "cram/errors.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cram::kernels {
namespace {

// Below this many multiply-adds a thread team costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

void check_shapes(std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc, MatrixView out,
                  const char* name) {
  if (ac != br || out.rows != ar || out.cols != bc) {
    throw DimensionError(std::string(name) + ": incompatible shapes");
  }
}

}  // namespace

void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.rows, a.cols, b.rows, b.cols, out, "matmul");
  const std::size_t n = a.rows, k = a.cols, m = b.cols;
  const bool big = n * k * m >= kParallelWork;
  // Four output rows share each streamed row of b.
  const std::size_t blocks = (n + 3) / 4;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = blk * 4;
    const std::size_t rows = std::min<std::size_t>(4, n - i0);
    if (!accumulate) {
      for (std::size_t r = 0; r < rows; ++r) {
        double* o = out.row(i0 + r);
        for (std::size_t j = 0; j < m; ++j) o[j] = 0.0;
      }
    }
    if (rows == 4) {
      double* __restrict o0 = out.row(i0);
      double* __restrict o1 = out.row(i0 + 1);
      double* __restrict o2 = out.row(i0 + 2);
      double* __restrict o3 = out.row(i0 + 3);
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a(i0, p), a1 = a(i0 + 1, p), a2 = a(i0 + 2, p), a3 = a(i0 + 3, p);
        const double* __restrict br = b.row(p);
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) {
          const double bv = br[j];
          o0[j] += a0 * bv;
          o1[j] += a1 * bv;
          o2[j] += a2 * bv;
          o3[j] += a3 * bv;
        }
      }
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        double* __restrict o = out.row(i0 + r);
        const double* ar = a.row(i0 + r);
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ar[p];
          const double* __restrict br = b.row(p);
#pragma omp simd
          for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
        }
      }
    }
  }
}

void matmul_tn(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.cols, a.rows, b.rows, b.cols, out, "matmul_tn");
  const std::size_t n = a.rows, k = a.cols, m = b.cols;
  const bool big = n * k * m >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < k; ++i) {
    double* o = out.row(i);
    if (!accumulate) {
      for (std::size_t j = 0; j < m; ++j) o[j] = 0.0;
    }
    for (std::size_t r = 0; r < n; ++r) {
      const double av = a(r, i);
      if (av == 0.0) continue;
      const double* br = b.row(r);
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_nt(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.rows, a.cols, b.cols, b.rows, out, "matmul_nt");
  // Transposing b first turns the row-dot-row product into the vectorizable
  // row-times-matrix form used by matmul.
  std::vector<double> bt(b.rows * b.cols);
  for (std::size_t j = 0; j < b.rows; ++j) {
    const double* br = b.row(j);
    for (std::size_t p = 0; p < b.cols; ++p) bt[p * b.rows + j] = br[p];
  }
  matmul(a, ConstMatrixView(bt.data(), b.cols, b.rows), out, accumulate);
}

namespace serial {

void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.rows, a.cols, b.rows, b.cols, out, "serial::matmul");
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(p, j);
      out(i, j) = accumulate ? out(i, j) + s : s;
    }
  }
}

void matmul_tn(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.cols, a.rows, b.rows, b.cols, out, "serial::matmul_tn");
  for (std::size_t i = 0; i < a.cols; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < a.rows; ++r) s += a(r, i) * b(r, j);
      out(i, j) = accumulate ? out(i, j) + s : s;
    }
  }
}

void matmul_nt(ConstMatrixView a, ConstMatrixView b, MatrixView out, bool accumulate) {
  check_shapes(a.rows, a.cols, b.cols, b.rows, out, "serial::matmul_nt");
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(j, p);
      out(i, j) = accumulate ? out(i, j) + s : s;
    }
  }
}

}  // namespace serial

void set_max_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n > 0 ? n : omp_get_num_procs());
#else
  (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace cram::kernels
