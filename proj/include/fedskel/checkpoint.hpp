#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fedskel/model.hpp"

namespace fedskel {

/// Text header followed by raw little-endian float32 payloads:
///
///   FEDSKEL-CKPT 1
///   round <r>
///   tensor <name> f32 <d0>x<d1>x...
///   ...
///   END
///   <bytes of every tensor, in header order>
struct Checkpoint {
    int round = 0;
    ParamStore params;  // tensors loaded without requires_grad
};

void save_checkpoint(const std::filesystem::path& file, const ParamStore& params, int round);
Checkpoint load_checkpoint(const std::filesystem::path& file);
/// Tensor names from the header only.
std::vector<std::string> checkpoint_keys(const std::filesystem::path& file);

}  // namespace fedskel
