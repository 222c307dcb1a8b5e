#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mqmk/common/error.hpp"

namespace mqmk::backbone {

struct BackboneConfig {
  std::size_t image_size = 16;  // square images
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  double mlp_ratio = 2.0;

  void validate() const;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return patches_per_side() * patches_per_side(); }
  std::size_t tokens() const { return patch_tokens() + 1; }  // +1 [class] token
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(static_cast<double>(embed_dim) * mlp_ratio + 0.5);
  }

  bool operator==(const BackboneConfig&) const = default;
};

// Which transformer layers receive prepended prompt tokens, and how many.
struct PromptInsertionPlan {
  std::vector<std::size_t> g_layers = {0, 1};
  std::vector<std::size_t> e_layers = {0, 1, 2, 3};
  std::size_t g_length = 5;
  std::size_t e_length = 8;

  void validate(const BackboneConfig& cfg) const;

  std::size_t g_depth() const { return g_layers.size(); }
  std::size_t e_depth() const { return e_layers.size(); }

  bool operator==(const PromptInsertionPlan&) const = default;
};

}  // namespace mqmk::backbone
