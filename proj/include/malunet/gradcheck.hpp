#pragma once

#include <functional>
#include <string>
#include <vector>

#include "malunet/tensor.hpp"

namespace malunet {

// Worst relative error between reverse-mode gradients and central differences
// for a scalar loss over the given tensors, in double precision. When a
// tensor holds more than max_coords_per_tensor elements, a seeded subset of
// coordinates is checked (pass a negative cap to check everything).
double gradcheck_max_rel(const std::function<Tensor()>& build_loss, const std::vector<Tensor>& wrt,
                         int max_coords_per_tensor = -1, std::uint64_t seed = 0, double h = 1e-5);

struct GradCheckEntry {
    std::string name;
    double max_rel = 0.0;
};

// The fixed suite behind the gradcheck command: every primitive layer, all
// four attention blocks, the loss, and the five-stage tiny network end to end
// at 16x16.
std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed);

}  // namespace malunet
