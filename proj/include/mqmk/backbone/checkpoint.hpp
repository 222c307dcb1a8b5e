#pragma once

#include <string>
#include <vector>

#include "mqmk/backbone/vit.hpp"

namespace mqmk::backbone {

// "PCLB" container: magic, u32 version, config record, then named parameter
// blobs as 64-bit little-endian floats.
std::vector<std::uint8_t> serialize_backbone(VisionTransformer& vit);
VisionTransformer deserialize_backbone(const std::vector<std::uint8_t>& bytes,
                                       const std::string& source = "<memory>");

void save_backbone(VisionTransformer& vit, const std::string& path);
VisionTransformer load_backbone(const std::string& path);

}  // namespace mqmk::backbone
