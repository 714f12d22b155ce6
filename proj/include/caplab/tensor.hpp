#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace caplab {

// Dense row-major tensor of doubles. The only numeric carrier in the
// project; rank is arbitrary but nearly everything is rank 1 or 2.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    // rank-2 helpers
    std::size_t rows() const { return shape_[0]; }
    std::size_t cols() const { return shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    // scalar extraction; throws ArgumentError unless size() == 1
    double item() const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---- plain (non-autodiff) arithmetic used by optimizers, aggregation
//      and metric code ----

// y += a * x
void axpy(Tensor& y, double a, const Tensor& x);
void scale_inplace(Tensor& y, double a);
Tensor weighted_sum(std::span<const Tensor* const> xs, std::span<const double> coeffs);
double dot(const Tensor& a, const Tensor& b);
double norm(const Tensor& a);
// M [r x c] * v [c] -> [r]
Tensor matvec(const Tensor& m, const Tensor& v);

// stabilized softmax kernels shared with the autodiff ops
void softmax_inplace(double* p, std::size_t n);
Tensor softmax1d(const Tensor& logits);

std::size_t argmax(const Tensor& v);

// FNV-1a over the raw bytes; used by freeze/no-mutation contracts in tests
std::uint64_t content_hash(const Tensor& t);
std::uint64_t combine_hash(std::uint64_t h, std::uint64_t v);

void require_finite(const Tensor& t, const char* what);

} // namespace caplab
