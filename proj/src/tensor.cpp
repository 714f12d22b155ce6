#include "caplab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "caplab/errors.hpp"

namespace caplab {

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) n *= d;
    data_.assign(n, 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) n *= d;
    if (n != data_.size())
        throw ArgumentError("tensor shape " + shape_str() + " does not match data length " +
                            std::to_string(data_.size()));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

double Tensor::item() const {
    if (data_.size() != 1) throw ArgumentError("item() on non-scalar tensor " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

void axpy(Tensor& y, double a, const Tensor& x) {
    if (!y.same_shape(x)) throw ArgumentError("axpy shape mismatch " + y.shape_str() + " vs " + x.shape_str());
    double* yd = y.data();
    const double* xd = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) yd[i] += a * xd[i];
}

void scale_inplace(Tensor& y, double a) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= a;
}

Tensor weighted_sum(std::span<const Tensor* const> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size())
        throw ArgumentError("weighted_sum: empty or mismatched term list");
    Tensor out(xs[0]->shape());
    for (std::size_t k = 0; k < xs.size(); ++k) axpy(out, coeffs[k], *xs[k]);
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ArgumentError("dot size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor matvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.cols() != v.dim(0))
        throw ArgumentError("matvec shape mismatch " + m.shape_str() + " * " + v.shape_str());
    Tensor out({m.rows()});
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += m.at(i, j) * v[j];
        out[i] = s;
    }
    return out;
}

void softmax_inplace(double* p, std::size_t n) {
    double mx = p[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
    }
    for (std::size_t i = 0; i < n; ++i) p[i] /= sum;
}

Tensor softmax1d(const Tensor& logits) {
    if (logits.rank() != 1 || logits.size() == 0)
        throw ArgumentError("softmax1d expects a non-empty vector");
    Tensor out = logits;
    softmax_inplace(out.data(), out.size());
    return out;
}

std::size_t argmax(const Tensor& v) {
    if (v.size() == 0) throw ArgumentError("argmax of empty tensor");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

std::uint64_t content_hash(const Tensor& t) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto eat = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (std::size_t d : t.shape()) eat(&d, sizeof(d));
    eat(t.data(), t.size() * sizeof(double));
    return h;
}

std::uint64_t combine_hash(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    return h;
}

void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw ArgumentError(std::string(what) + ": non-finite values");
}

} // namespace caplab
