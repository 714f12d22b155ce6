#include "caplab/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "caplab/errors.hpp"

namespace caplab {

double WeightVector::sum() const {
    double s = 0.0;
    for (double v : p) s += v;
    return s;
}

void WeightVector::validate(double tol) const {
    if (p.empty()) throw ArgumentError("weight vector is empty");
    for (double v : p)
        if (!(v >= -1e-12) || !std::isfinite(v))
            throw ArgumentError("weight vector has a negative or non-finite entry");
    if (std::abs(sum() - 1.0) > tol)
        throw ArgumentError("weight vector is off the simplex by " +
                            std::to_string(std::abs(sum() - 1.0)));
}

int ClassMap::total_classes() const {
    std::size_t n = 0;
    for (const auto& s : class_sets) n += s.size();
    return static_cast<int>(n);
}

int ClassMap::task_of_class(int cls) const {
    for (std::size_t t = 0; t < class_sets.size(); ++t)
        for (int c : class_sets[t])
            if (c == cls) return static_cast<int>(t);
    return -1;
}

void ClassMap::validate() const {
    const int total = total_classes();
    std::vector<bool> seen(static_cast<std::size_t>(total), false);
    for (const auto& s : class_sets) {
        if (s.empty()) throw ArgumentError("class map has an empty task");
        for (int c : s) {
            if (c < 0 || c >= total)
                throw ArgumentError("class id " + std::to_string(c) + " outside 0.." +
                                    std::to_string(total - 1));
            if (seen[static_cast<std::size_t>(c)])
                throw ArgumentError("class id " + std::to_string(c) + " appears in two tasks");
            seen[static_cast<std::size_t>(c)] = true;
        }
    }
}

WeightVector equal_weights(std::size_t t) {
    if (t == 0) throw ArgumentError("equal_weights: task count must be positive");
    WeightVector w;
    w.p.assign(t, 1.0 / static_cast<double>(t));
    w.cycle_index = 1;
    return w;
}

WeightVector task_similarity(const Tensor& class_probs, const ClassMap& map) {
    if (class_probs.rank() != 1 ||
        class_probs.size() != static_cast<std::size_t>(map.total_classes()))
        throw ArgumentError("task_similarity: got " + class_probs.shape_str() + " for " +
                            std::to_string(map.total_classes()) + " classes");
    double sum = 0.0;
    for (std::size_t i = 0; i < class_probs.size(); ++i) {
        if (!(class_probs[i] >= -1e-12) || !std::isfinite(class_probs[i]))
            throw ArgumentError("task_similarity: class probabilities off the simplex");
        sum += class_probs[i];
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ArgumentError("task_similarity: class probabilities sum to " + std::to_string(sum));
    WeightVector w;
    w.p.resize(map.tasks(), 0.0);
    for (std::size_t t = 0; t < map.tasks(); ++t)
        for (int c : map.class_sets[t]) w.p[t] += class_probs[static_cast<std::size_t>(c)];
    w.cycle_index = 1;
    return w;
}

} // namespace caplab
