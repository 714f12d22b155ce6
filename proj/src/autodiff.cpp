#include "caplab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "caplab/errors.hpp"

namespace caplab::ad {

namespace {
constexpr double kGeluC = 0.79788456080286535588; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

const Tensor& Var::value() const {
    if (!tape_) throw ArgumentError("value() on empty Var");
    return tape_->val(idx_);
}

bool Var::requires_grad() const { return tape_ && tape_->rg(idx_); }

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::external(const Tensor* value) {
    if (!value) throw ArgumentError("external: null tensor");
    Node n;
    n.ext = value;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::detach(Var x) { return constant(val(x.idx_)); }

void Tape::accumulate(std::uint32_t i, const double* src, std::size_t n) {
    Node& node = nodes_[i];
    if (!node.requires_grad) return; // stop-gradient contract
    const Tensor& v = node.ext ? *node.ext : node.own;
    if (node.grad.empty()) node.grad = Tensor(v.shape());
    double* g = node.grad.data();
    for (std::size_t k = 0; k < n; ++k) g[k] += src[k];
}

void Tape::backward(Var root) {
    if (root.tape_ != this) throw ArgumentError("backward: var from another tape");
    if (val(root.idx_).size() != 1) throw ArgumentError("backward root must be a scalar");
    if (!rg(root.idx_)) return; // fully constant graph
    const double one = 1.0;
    accumulate(root.idx_, &one, 1);
    for (std::uint32_t i = root.idx_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && n.requires_grad && !n.grad.empty()) n.back(*this);
    }
}

Tensor Tape::grad(Var v) const {
    if (v.tape_ != this) throw ArgumentError("grad: var from another tape");
    const Node& n = nodes_[v.idx_];
    if (n.grad.empty()) return Tensor(val(v.idx_).shape());
    return n.grad;
}

void Tape::reset() { nodes_.clear(); }

void Tape::check_same_shape(Var a, Var b, const char* op) const {
    if (a.tape_ != this || b.tape_ != this)
        throw ArgumentError(std::string(op) + ": var from another tape");
    if (!val(a.idx_).same_shape(val(b.idx_)))
        throw ArgumentError(std::string(op) + ": shape mismatch " + val(a.idx_).shape_str() +
                            " vs " + val(b.idx_).shape_str());
}

// ---------------- elementwise ----------------

Var Tape::add(Var a, Var b) {
    check_same_shape(a, b, "add");
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            t.accumulate(ai, g.data(), g.size());
            t.accumulate(bi, g.data(), g.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            t.accumulate(ai, g.data(), g.size());
            if (t.rg(bi)) {
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = -g[i];
                t.accumulate(bi, tmp.data(), tmp.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.rg(ai)) {
                const Tensor& bv2 = t.val(bi);
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * bv2[i];
                t.accumulate(ai, tmp.data(), tmp.size());
            }
            if (t.rg(bi)) {
                const Tensor& av2 = t.val(ai);
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * av2[i];
                t.accumulate(bi, tmp.data(), tmp.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::divide(Var a, Var b) {
    check_same_shape(a, b, "divide");
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& bv2 = t.val(bi);
            if (t.rg(ai)) {
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] / bv2[i];
                t.accumulate(ai, tmp.data(), tmp.size());
            }
            if (t.rg(bi)) {
                const Tensor& av2 = t.val(ai);
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i)
                    tmp[i] = -g[i] * av2[i] / (bv2[i] * bv2[i]);
                t.accumulate(bi, tmp.data(), tmp.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::scale(Var a, double c) {
    const Tensor& av = val(a.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi, c](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            std::vector<double> tmp(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = c * g[i];
            t.accumulate(ai, tmp.data(), tmp.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::sqrt(Var a) {
    const Tensor& av = val(a.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& ov = t.val(oi);
            std::vector<double> tmp(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] / (2.0 * ov[i]);
            t.accumulate(ai, tmp.data(), tmp.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::relu(Var a) {
    const Tensor& av = val(a.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& av2 = t.val(ai);
            std::vector<double> tmp(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = av2[i] > 0.0 ? g[i] : 0.0;
            t.accumulate(ai, tmp.data(), tmp.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::gelu(Var a) {
    const Tensor& av = val(a.idx_);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        const double u = kGeluC * (x + kGeluA * x * x * x);
        out[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& av2 = t.val(ai);
            std::vector<double> tmp(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double x = av2[i];
                const double u = kGeluC * (x + kGeluA * x * x * x);
                const double th = std::tanh(u);
                const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
                tmp[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
            }
            t.accumulate(ai, tmp.data(), tmp.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::weighted_sum(std::span<const Var> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size())
        throw ArgumentError("weighted_sum: empty or mismatched term list");
    for (std::size_t i = 1; i < xs.size(); ++i) check_same_shape(xs[0], xs[i], "weighted_sum");
    const Tensor& first = val(xs[0].idx_);
    Tensor out(first.shape());
    bool need = false;
    std::vector<std::uint32_t> idx(xs.size());
    for (std::size_t k = 0; k < xs.size(); ++k) {
        idx[k] = xs[k].idx_;
        need = need || rg(idx[k]);
        const Tensor& v = val(idx[k]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * v[i];
    }
    std::vector<double> cs(coeffs.begin(), coeffs.end());
    const std::uint32_t oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [idx = std::move(idx), cs = std::move(cs), oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            std::vector<double> tmp(g.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                if (!t.rg(idx[k])) continue;
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = cs[k] * g[i];
                t.accumulate(idx[k], tmp.data(), tmp.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::scale_by(Var scalar, Var x) {
    const Tensor& sv = val(scalar.idx_);
    if (sv.size() != 1) throw ArgumentError("scale_by: first argument must be scalar");
    const Tensor& xv = val(x.idx_);
    const double s = sv[0];
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * xv[i];
    const bool need = rg(scalar.idx_) || rg(x.idx_);
    const std::uint32_t si = scalar.idx_, xi = x.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [si, xi, oi](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& xv2 = t.val(xi);
            if (t.rg(si)) {
                double ds = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * xv2[i];
                t.accumulate(si, &ds, 1);
            }
            if (t.rg(xi)) {
                const double s2 = t.val(si)[0];
                std::vector<double> tmp(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = s2 * g[i];
                t.accumulate(xi, tmp.data(), tmp.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

// ---------------- linear algebra ----------------

Var Tape::matmul(Var a, Var b) {
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
        throw ArgumentError("matmul: incompatible shapes " + av.shape_str() + " * " + bv.shape_str());
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double x = av.at(i, l);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += x * bv.at(l, j);
        }
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi, m, k, n](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.rg(ai)) {
                const Tensor& bv2 = t.val(bi);
                Tensor da({m, k});
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        for (std::size_t l = 0; l < k; ++l) da.at(i, l) += gij * bv2.at(l, j);
                    }
                t.accumulate(ai, da.data(), da.size());
            }
            if (t.rg(bi)) {
                const Tensor& av2 = t.val(ai);
                Tensor db({k, n});
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        const double x = av2.at(i, l);
                        for (std::size_t j = 0; j < n; ++j) db.at(l, j) += x * g[i * n + j];
                    }
                t.accumulate(bi, db.data(), db.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::matvec(Var m, Var v) {
    const Tensor& mv = val(m.idx_);
    const Tensor& vv = val(v.idx_);
    if (mv.rank() != 2 || vv.rank() != 1 || mv.cols() != vv.dim(0))
        throw ArgumentError("matvec: incompatible shapes " + mv.shape_str() + " * " + vv.shape_str());
    const std::size_t r = mv.rows(), c = mv.cols();
    Tensor out({r});
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += mv.at(i, j) * vv[j];
        out[i] = s;
    }
    const bool need = rg(m.idx_) || rg(v.idx_);
    const std::uint32_t mi = m.idx_, vi = v.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [mi, vi, oi, r, c](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.rg(mi)) {
                const Tensor& vv2 = t.val(vi);
                Tensor dm({r, c});
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) dm.at(i, j) = g[i] * vv2[j];
                t.accumulate(mi, dm.data(), dm.size());
            }
            if (t.rg(vi)) {
                const Tensor& mv2 = t.val(mi);
                std::vector<double> dv(c, 0.0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) dv[j] += mv2.at(i, j) * g[i];
                t.accumulate(vi, dv.data(), dv.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& xv = val(x.idx_);
    const Tensor& wv = val(w.idx_);
    const Tensor& bv = val(b.idx_);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.cols() != wv.rows() ||
        bv.dim(0) != wv.cols())
        throw ArgumentError("linear: incompatible shapes " + xv.shape_str() + " * " +
                            wv.shape_str() + " + " + bv.shape_str());
    const std::size_t n = xv.rows(), k = xv.cols(), o = wv.cols();
    Tensor out({n, o});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < o; ++j) out.at(i, j) = bv[j];
        for (std::size_t l = 0; l < k; ++l) {
            const double xl = xv.at(i, l);
            for (std::size_t j = 0; j < o; ++j) out.at(i, j) += xl * wv.at(l, j);
        }
    }
    const bool need = rg(x.idx_) || rg(w.idx_) || rg(b.idx_);
    const std::uint32_t xi = x.idx_, wi = w.idx_, bi = b.idx_,
                        oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [xi, wi, bi, oi, n, k, o](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (t.rg(xi)) {
                const Tensor& wv2 = t.val(wi);
                Tensor dx({n, k});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < o; ++j) {
                        const double gij = g[i * o + j];
                        for (std::size_t l = 0; l < k; ++l) dx.at(i, l) += gij * wv2.at(l, j);
                    }
                t.accumulate(xi, dx.data(), dx.size());
            }
            if (t.rg(wi)) {
                const Tensor& xv2 = t.val(xi);
                Tensor dw({k, o});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        const double xl = xv2.at(i, l);
                        for (std::size_t j = 0; j < o; ++j) dw.at(l, j) += xl * g[i * o + j];
                    }
                t.accumulate(wi, dw.data(), dw.size());
            }
            if (t.rg(bi)) {
                std::vector<double> db(o, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < o; ++j) db[j] += g[i * o + j];
                t.accumulate(bi, db.data(), db.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::dot(Var a, Var b) {
    check_same_shape(a, b, "dot");
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi](Tape& t) {
            const double g0 = t.nodes_[oi].grad[0];
            if (t.rg(ai)) {
                const Tensor& bv2 = t.val(bi);
                std::vector<double> tmp(bv2.size());
                for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = g0 * bv2[i];
                t.accumulate(ai, tmp.data(), tmp.size());
            }
            if (t.rg(bi)) {
                const Tensor& av2 = t.val(ai);
                std::vector<double> tmp(av2.size());
                for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = g0 * av2[i];
                t.accumulate(bi, tmp.data(), tmp.size());
            }
        };
    return push(Tensor::scalar(s), need, std::move(back));
}

Var Tape::sum(Var a) {
    const Tensor& av = val(a.idx_);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi](Tape& t) {
            const double g0 = t.nodes_[oi].grad[0];
            const std::size_t n = t.val(ai).size();
            std::vector<double> tmp(n, g0);
            t.accumulate(ai, tmp.data(), n);
        };
    return push(Tensor::scalar(s), need, std::move(back));
}

Var Tape::mean(Var a) {
    const Tensor& av = val(a.idx_);
    if (av.size() == 0) throw ArgumentError("mean of empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
    s /= static_cast<double>(av.size());
    const bool need = rg(a.idx_);
    const std::uint32_t ai = a.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, oi](Tape& t) {
            const std::size_t n = t.val(ai).size();
            const double g0 = t.nodes_[oi].grad[0] / static_cast<double>(n);
            std::vector<double> tmp(n, g0);
            t.accumulate(ai, tmp.data(), n);
        };
    return push(Tensor::scalar(s), need, std::move(back));
}

// ---------------- structure ----------------

Var Tape::concat_rows(Var a, Var b) {
    const Tensor& av = val(a.idx_);
    const Tensor& bv = val(b.idx_);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols())
        throw ArgumentError("concat_rows: incompatible shapes " + av.shape_str() + " | " +
                            bv.shape_str());
    const std::size_t ma = av.rows(), mb = bv.rows(), d = av.cols();
    Tensor out({ma + mb, d});
    std::copy(av.data(), av.data() + ma * d, out.data());
    std::copy(bv.data(), bv.data() + mb * d, out.data() + ma * d);
    const bool need = rg(a.idx_) || rg(b.idx_);
    const std::uint32_t ai = a.idx_, bi = b.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [ai, bi, oi, ma, mb, d](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            if (ma > 0) t.accumulate(ai, g.data(), ma * d);
            if (mb > 0) t.accumulate(bi, g.data() + ma * d, mb * d);
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::take_row(Var x, std::size_t row) {
    const Tensor& xv = val(x.idx_);
    if (xv.rank() != 2 || row >= xv.rows())
        throw ArgumentError("take_row: bad row " + std::to_string(row) + " for " + xv.shape_str());
    const std::size_t d = xv.cols();
    Tensor out({d});
    std::copy(xv.data() + row * d, xv.data() + (row + 1) * d, out.data());
    const bool need = rg(x.idx_);
    const std::uint32_t xi = x.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [xi, oi, row, d](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& xv2 = t.val(xi);
            Tensor dx(xv2.shape());
            std::copy(g.data(), g.data() + d, dx.data() + row * d);
            t.accumulate(xi, dx.data(), dx.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::pick(Var v, std::size_t index) {
    const Tensor& vv = val(v.idx_);
    if (vv.rank() != 1 || index >= vv.size())
        throw ArgumentError("pick: bad index " + std::to_string(index) + " for " + vv.shape_str());
    const bool need = rg(v.idx_);
    const std::uint32_t vi = v.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [vi, oi, index](Tape& t) {
            const double g0 = t.nodes_[oi].grad[0];
            std::vector<double> tmp(t.val(vi).size(), 0.0);
            tmp[index] = g0;
            t.accumulate(vi, tmp.data(), tmp.size());
        };
    return push(Tensor::scalar(vv[index]), need, std::move(back));
}

// ---------------- model primitives ----------------

namespace {
// iterate softmax slices of a rank-1/2 tensor along `axis`
struct SliceIter {
    std::size_t count, len, stride, base_step;
};
SliceIter slices_for(const Tensor& t, std::size_t axis) {
    if (t.rank() == 1) {
        if (axis != 0) throw ArgumentError("softmax: invalid axis for rank-1 tensor");
        return {1, t.size(), 1, 0};
    }
    if (t.rank() == 2) {
        if (axis == 1) return {t.rows(), t.cols(), 1, t.cols()};
        if (axis == 0) return {t.cols(), t.rows(), t.cols(), 1};
        throw ArgumentError("softmax: invalid axis for rank-2 tensor");
    }
    throw ArgumentError("softmax: only rank 1 or 2 supported, got " + t.shape_str());
}
} // namespace

Var Tape::softmax(Var logits, std::size_t axis) {
    const Tensor& lv = val(logits.idx_);
    if (lv.size() == 0) throw ArgumentError("softmax of empty tensor");
    require_finite(lv, "softmax input");
    const SliceIter it = slices_for(lv, axis);
    Tensor out(lv.shape());
    for (std::size_t s = 0; s < it.count; ++s) {
        const double* src = lv.data() + s * it.base_step;
        double* dst = out.data() + s * it.base_step;
        double mx = src[0];
        for (std::size_t i = 1; i < it.len; ++i) mx = std::max(mx, src[i * it.stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < it.len; ++i) {
            const double e = std::exp(src[i * it.stride] - mx);
            dst[i * it.stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < it.len; ++i) dst[i * it.stride] /= sum;
    }
    const bool need = rg(logits.idx_);
    const std::uint32_t li = logits.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [li, oi, it](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& sv = t.val(oi);
            Tensor dx(sv.shape());
            for (std::size_t s = 0; s < it.count; ++s) {
                const double* gs = g.data() + s * it.base_step;
                const double* ss = sv.data() + s * it.base_step;
                double* ds = dx.data() + s * it.base_step;
                double inner = 0.0;
                for (std::size_t i = 0; i < it.len; ++i)
                    inner += gs[i * it.stride] * ss[i * it.stride];
                for (std::size_t i = 0; i < it.len; ++i)
                    ds[i * it.stride] = ss[i * it.stride] * (gs[i * it.stride] - inner);
            }
            t.accumulate(li, dx.data(), dx.size());
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::cross_entropy(Var logits, std::size_t label) {
    const Tensor& lv = val(logits.idx_);
    if (lv.rank() != 1) throw ArgumentError("cross_entropy: logits must be rank 1");
    if (label >= lv.size())
        throw ArgumentError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + lv.shape_str());
    double mx = lv[0];
    for (std::size_t i = 1; i < lv.size(); ++i) mx = std::max(mx, lv[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < lv.size(); ++i) sum += std::exp(lv[i] - mx);
    const double ce = mx + std::log(sum) - lv[label];
    const bool need = rg(logits.idx_);
    const std::uint32_t li = logits.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [li, oi, label](Tape& t) {
            const double g0 = t.nodes_[oi].grad[0];
            const Tensor& lv2 = t.val(li);
            Tensor p = softmax1d(lv2);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] *= g0;
            p[label] -= g0;
            t.accumulate(li, p.data(), p.size());
        };
    return push(Tensor::scalar(ce), need, std::move(back));
}

Var Tape::softmax_pick(Var logits, std::size_t label) {
    const Tensor& lv = val(logits.idx_);
    if (lv.rank() != 1) throw ArgumentError("softmax_pick: logits must be rank 1");
    if (label >= lv.size())
        throw ArgumentError("softmax_pick: label out of range for " + lv.shape_str());
    Tensor p = softmax1d(lv);
    const double py = p[label];
    const bool need = rg(logits.idx_);
    const std::uint32_t li = logits.idx_, oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [li, oi, label, p = std::move(p)](Tape& t) {
            const double g0 = t.nodes_[oi].grad[0];
            const double py2 = p[label];
            std::vector<double> tmp(p.size());
            for (std::size_t i = 0; i < p.size(); ++i)
                tmp[i] = g0 * py2 * ((i == label ? 1.0 : 0.0) - p[i]);
            t.accumulate(li, tmp.data(), tmp.size());
        };
    return push(Tensor::scalar(py), need, std::move(back));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = val(x.idx_);
    const Tensor& gv = val(gain.idx_);
    const Tensor& bv = val(bias.idx_);
    if (xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != xv.cols() ||
        bv.dim(0) != xv.cols())
        throw ArgumentError("layer_norm: incompatible shapes " + xv.shape_str() + ", " +
                            gv.shape_str() + ", " + bv.shape_str());
    const std::size_t n = xv.rows(), d = xv.cols();
    Tensor out({n, d});
    Tensor xhat({n, d});
    std::vector<double> inv_sigma(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xv.at(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xv.at(i, j) - mu) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = gv[j] * xh + bv[j];
        }
    }
    const bool need = rg(x.idx_) || rg(gain.idx_) || rg(bias.idx_);
    const std::uint32_t xi = x.idx_, gi = gain.idx_, bi = bias.idx_,
                        oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [xi, gi, bi, oi, n, d, xhat = std::move(xhat),
                inv_sigma = std::move(inv_sigma)](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& gv2 = t.val(gi);
            if (t.rg(bi)) {
                std::vector<double> db(d, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                t.accumulate(bi, db.data(), d);
            }
            if (t.rg(gi)) {
                std::vector<double> dg(d, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * xhat.at(i, j);
                t.accumulate(gi, dg.data(), d);
            }
            if (t.rg(xi)) {
                Tensor dx({n, d});
                for (std::size_t i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gv2[j];
                        m1 += dxh;
                        m2 += dxh * xhat.at(i, j);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gv2[j];
                        dx.at(i, j) = inv_sigma[i] * (dxh - m1 - xhat.at(i, j) * m2);
                    }
                }
                t.accumulate(xi, dx.data(), dx.size());
            }
        };
    return push(std::move(out), need, std::move(back));
}

Var Tape::attention_prefix(Var q, Var k, Var v, Var pk, Var pv, std::size_t heads) {
    const Tensor& qv = val(q.idx_);
    const Tensor& kv = val(k.idx_);
    const Tensor& vv = val(v.idx_);
    const Tensor& pkv = val(pk.idx_);
    const Tensor& pvv = val(pv.idx_);
    if (qv.rank() != 2 || !kv.same_shape(qv) || !vv.same_shape(qv))
        throw ArgumentError("attention_prefix: q/k/v must share shape, got " + qv.shape_str() +
                            ", " + kv.shape_str() + ", " + vv.shape_str());
    const std::size_t n = qv.rows(), d = qv.cols();
    if (pkv.rank() != 2 || pvv.rank() != 2 || pkv.cols() != d || !pvv.same_shape(pkv))
        throw ArgumentError("attention_prefix: prefix shape mismatch " + pkv.shape_str() + ", " +
                            pvv.shape_str());
    if (heads == 0 || d % heads != 0)
        throw ArgumentError("attention_prefix: dim " + std::to_string(d) +
                            " not divisible by heads " + std::to_string(heads));
    const std::size_t m = pkv.rows(), total = m + n, dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // concatenated key/value rows: prefix rows first, then the regular rows
    auto krow = [&](std::size_t j) { return j < m ? pkv.data() + j * d : kv.data() + (j - m) * d; };
    auto vrow = [&](std::size_t j) { return j < m ? pvv.data() + j * d : vv.data() + (j - m) * d; };

    Tensor out({n, d});
    Tensor probs({heads, n, total});
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            double* prow = probs.data() + (h * n + i) * total;
            const double* qi = qv.data() + i * d + c0;
            for (std::size_t j = 0; j < total; ++j) {
                const double* kj = krow(j) + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                prow[j] = s * sc;
            }
            softmax_inplace(prow, total);
            double* orow = out.data() + i * d + c0;
            for (std::size_t j = 0; j < total; ++j) {
                const double p = prow[j];
                const double* vj = vrow(j) + c0;
                for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
            }
        }
    }
    const bool need = rg(q.idx_) || rg(k.idx_) || rg(v.idx_) || rg(pk.idx_) || rg(pv.idx_);
    const std::uint32_t qi_ = q.idx_, ki_ = k.idx_, vi_ = v.idx_, pki_ = pk.idx_, pvi_ = pv.idx_,
                        oi = static_cast<std::uint32_t>(nodes_.size());
    std::function<void(Tape&)> back;
    if (need)
        back = [qi_, ki_, vi_, pki_, pvi_, oi, heads, n, d, m, total, dh, sc,
                probs = std::move(probs)](Tape& t) {
            const Tensor& g = t.nodes_[oi].grad;
            const Tensor& qv2 = t.val(qi_);
            const Tensor& kv2 = t.val(ki_);
            const Tensor& vv2 = t.val(vi_);
            const Tensor& pkv2 = t.val(pki_);
            const Tensor& pvv2 = t.val(pvi_);
            auto krow = [&](std::size_t j) {
                return j < m ? pkv2.data() + j * d : kv2.data() + (j - m) * d;
            };
            auto vrow = [&](std::size_t j) {
                return j < m ? pvv2.data() + j * d : vv2.data() + (j - m) * d;
            };
            Tensor dq({n, d}), dkc({total, d}), dvc({total, d});
            std::vector<double> dp(total), ds(total);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* prow = probs.data() + (h * n + i) * total;
                    const double* grow = g.data() + i * d + c0;
                    // dP and dV'
                    for (std::size_t j = 0; j < total; ++j) {
                        const double* vj = vrow(j) + c0;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) s += grow[c] * vj[c];
                        dp[j] = s;
                        double* dvj = dvc.data() + j * d + c0;
                        const double p = prow[j];
                        for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * grow[c];
                    }
                    // softmax backward on the score row
                    double inner = 0.0;
                    for (std::size_t j = 0; j < total; ++j) inner += dp[j] * prow[j];
                    for (std::size_t j = 0; j < total; ++j) ds[j] = prow[j] * (dp[j] - inner);
                    // dq and dK'
                    double* dqi = dq.data() + i * d + c0;
                    const double* qrow = qv2.data() + i * d + c0;
                    for (std::size_t j = 0; j < total; ++j) {
                        const double s = ds[j] * sc;
                        const double* kj = krow(j) + c0;
                        double* dkj = dkc.data() + j * d + c0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dqi[c] += s * kj[c];
                            dkj[c] += s * qrow[c];
                        }
                    }
                }
            }
            t.accumulate(qi_, dq.data(), dq.size());
            if (m > 0) {
                t.accumulate(pki_, dkc.data(), m * d);
                t.accumulate(pvi_, dvc.data(), m * d);
            }
            t.accumulate(ki_, dkc.data() + m * d, n * d);
            t.accumulate(vi_, dvc.data() + m * d, n * d);
        };
    return push(std::move(out), need, std::move(back));
}

} // namespace caplab::ad
