#pragma once

#include <cstddef>
#include <vector>

#include "caplab/tensor.hpp"

namespace caplab {

// Probability simplex over tasks. cycle_index counts weight refinements:
// 1 for the initial (equal or query-derived) weights, +1 per cycle.
struct WeightVector {
    std::vector<double> p;
    int cycle_index = 1;

    std::size_t tasks() const { return p.size(); }
    double sum() const;
    // nonnegative entries, sum within `tol` of 1; ArgumentError otherwise
    void validate(double tol = 1e-6) const;
};

// Disjoint class-index sets per task; ids must cover 0..l_t-1 exactly so
// they double as head row indices.
struct ClassMap {
    std::vector<std::vector<int>> class_sets;

    std::size_t tasks() const { return class_sets.size(); }
    int total_classes() const;
    int task_of_class(int cls) const; // -1 if unknown
    void validate() const;
};

WeightVector equal_weights(std::size_t t);

// p_i = sum of class probabilities over task i's classes
WeightVector task_similarity(const Tensor& class_probs, const ClassMap& map);

} // namespace caplab
