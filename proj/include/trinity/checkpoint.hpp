#pragma once

#include <string>
#include <vector>

#include "trinity/model.hpp"

namespace trinity {

/// Versioned binary container of named f64 tensors plus per-MoE-layer router
/// bias/momentum vectors. Round-trips are bit-exact. Load errors carry the
/// file offset of the defect.
void save_checkpoint(const std::string& path, const ParamSet& params,
                     const std::vector<RouterState>& routers);

struct Checkpoint {
  ParamSet params;
  std::vector<RouterState> routers;  // hyperparameters come from the config
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace trinity
