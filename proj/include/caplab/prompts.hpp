#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "caplab/tensor.hpp"
#include "caplab/weighting.hpp"

namespace caplab {

// Shape of one task's prefix block: `layers` prompted layers, each holding a
// key and a value prefix of `rows` x `dim`. rows is half the prompt length
// (key half / value half).
struct PromptShape {
    std::size_t layers = 0;
    std::size_t rows = 0;
    std::size_t dim = 0;
    bool operator==(const PromptShape&) const = default;
};

struct LayerPrompt {
    Tensor key;   // rows x dim
    Tensor value; // rows x dim
};

// Per-task prefix parameters. layers[] is parallel to the backbone's
// prompted-layer list.
struct PromptSet {
    int task_id = 0;
    bool trainable = false;
    std::vector<LayerPrompt> layers;

    PromptShape shape() const;
    std::uint64_t hash() const;
};

struct AggregatedPrompt {
    std::vector<LayerPrompt> layers;
    WeightVector provenance;
};

// Copy of `previous` marked trainable, or a fresh Gaussian init (std 0.02).
PromptSet init_task_prompt(const PromptShape& shape, const PromptSet* previous, int task_id,
                           std::uint64_t seed);

// Convex combination of the given prompt sets. Pure value computation; the
// training-time stop-gradient wiring lives in the loss graph builder.
AggregatedPrompt aggregate(const std::vector<PromptSet>& sets, const WeightVector& weights);

// All layers' key prefixes in layer order, then all value prefixes.
Tensor flatten_prompt(const PromptSet& set);

struct CollinearityReport {
    struct PairCosine {
        int i; // 1-based task indices, 2 <= i < j
        int j;
        double cosine;
    };
    std::vector<PairCosine> pairs;
    double min_cosine = 0.0;
    double mean_cosine = 0.0;
    int skipped_pairs = 0; // zero-length difference vectors
    std::vector<std::array<double, 2>> pca; // one 2-D coordinate per task
};

// Pairwise cosine of (phi_i - phi_1, phi_j - phi_1) over flattened prompts,
// plus 2-D PCA coordinates of the flattened prompts. Requires >= 3 tasks.
CollinearityReport collinearity_report(const std::vector<PromptSet>& sets);

void save_prompt(const std::string& path, const PromptSet& set);
PromptSet load_prompt(const std::string& path);

} // namespace caplab
