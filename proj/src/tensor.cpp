#include "vicregl/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <numeric>

namespace vicregl {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  VRL_CHECK_ARG(data_.size() == shape_numel(shape_), "tensor data size ",
                data_.size(), " does not match shape ", shape_str(shape_));
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  VRL_CHECK_ARG(shape_numel(new_shape) == numel(), "reshape ", shape_str(shape_),
                " -> ", shape_str(new_shape), " changes element count");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

void Tensor::add_inplace(const Tensor& o) {
  VRL_CHECK_ARG(same_shape(o), "add_inplace shape mismatch ", shape_str(shape_),
                " vs ", shape_str(o.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

void Tensor::axpy_inplace(double a, const Tensor& o) {
  VRL_CHECK_ARG(same_shape(o), "axpy shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
}

namespace {

constexpr std::size_t kTileN = 512;  // B tile row length (4 KB)
constexpr std::size_t kTileK = 256;  // B tile rows: tile = 1 MB, stays in L2

// Cache-blocked kernel on row-major inputs. Threads own disjoint row bands
// and every c element accumulates its k terms in ascending order, so output
// bits do not depend on the thread count. Within a band, B tiles are reused
// across all band rows instead of re-streaming B per row.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool acc) {
#pragma omp parallel
  {
#ifdef _OPENMP
    const std::size_t nthreads = (std::size_t)omp_get_num_threads();
    const std::size_t tid = (std::size_t)omp_get_thread_num();
#else
    const std::size_t nthreads = 1, tid = 0;
#endif
    const std::size_t band = (m + nthreads - 1) / nthreads;
    const std::size_t i_lo = std::min(m, tid * band);
    const std::size_t i_hi = std::min(m, i_lo + band);
    if (!acc)
      for (std::size_t i = i_lo; i < i_hi; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] = 0.0;
    for (std::size_t p0 = 0; p0 < k; p0 += kTileK) {
      const std::size_t p1 = std::min(k, p0 + kTileK);
      for (std::size_t j0 = 0; j0 < n; j0 += kTileN) {
        const std::size_t j1 = std::min(n, j0 + kTileN);
        for (std::size_t i = i_lo; i < i_hi; ++i) {
          const double* arow = a + i * k;
          double* crow = c + i * n;
          std::size_t p = p0;
          // 4 B-rows per pass cuts the c-tile load/store traffic 4x
          for (; p + 4 <= p1; p += 4) {
            const double a0 = arow[p], a1 = arow[p + 1];
            const double a2 = arow[p + 2], a3 = arow[p + 3];
            const double* b0 = b + p * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (std::size_t j = j0; j < j1; ++j)
              crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
          }
          for (; p < p1; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

// Scratch for explicit transposes; per thread so graph evaluations may run
// concurrently.
std::vector<double>& scratch(int which) {
  thread_local std::vector<double> bufs[2];
  return bufs[which];
}

void transpose_into(std::vector<double>& dst, const double* src, std::size_t rows,
                    std::size_t cols) {
  dst.resize(rows * cols);
  constexpr std::size_t T = 64;
  for (std::size_t r0 = 0; r0 < rows; r0 += T)
    for (std::size_t c0 = 0; c0 < cols; c0 += T) {
      const std::size_t r1 = std::min(rows, r0 + T), c1 = std::min(cols, c0 + T);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  // transposed operands are materialized once; far cheaper than the strided
  // streaming they would otherwise cause
  if (trans_a) {
    auto& ta = scratch(0);
    transpose_into(ta, a, k, m);  // stored (k,m) -> (m,k)
    a = ta.data();
  }
  if (trans_b) {
    auto& tb = scratch(1);
    transpose_into(tb, b, n, k);  // stored (n,k) -> (k,n)
    b = tb.data();
  }
  gemm_nn(m, n, k, a, b, c, accumulate);
}

}  // namespace vicregl
