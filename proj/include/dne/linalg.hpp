// Dense row-major matrix, just large enough for the MLP machinery.
#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace dne {

class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols)
      : rows_(rows), cols_(cols),
        d_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return d_.size(); }

  double& operator()(int i, int j) { return d_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return d_[static_cast<std::size_t>(i) * cols_ + j]; }

  double* row(int i) { return d_.data() + static_cast<std::size_t>(i) * cols_; }
  const double* row(int i) const { return d_.data() + static_cast<std::size_t>(i) * cols_; }

  double* data() { return d_.data(); }
  const double* data() const { return d_.data(); }

  void fill(double v) { d_.assign(d_.size(), v); }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Mat& operator+=(const Mat& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < d_.size(); ++i) d_[i] += o.d_[i];
    return *this;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> d_;
};

inline void add_scaled(std::vector<double>& dst, const std::vector<double>& src, double s) {
  assert(dst.size() == src.size());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

inline void add_scaled(Mat& dst, const Mat& src, double s) {
  assert(dst.same_shape(src));
  double* d = dst.data();
  const double* a = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * a[i];
}

}  // namespace dne
