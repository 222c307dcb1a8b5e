#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mqmk/backbone/config.hpp"
#include "mqmk/common/counters.hpp"
#include "mqmk/numerics/autodiff.hpp"
#include "mqmk/numerics/tensor.hpp"

namespace mqmk::backbone {

// Pinned to this sentinel instead of a literal infinity so downstream
// softmax/argmax arithmetic stays NaN-free.
constexpr double kMaskedLogit = -1e30;

// One sample = channels * H * W little-endian floats, row-major per channel.
using ImageBatch = std::vector<const float*>;

// Prompt tokens for one forward pass, already turned into graph Vars by the
// caller (leaf() when they should train, constant() otherwise). g[i] / e[i]
// align with plan->g_layers[i] / plan->e_layers[i]; an empty vector means
// that prompt kind is absent.
struct PromptStack {
  const PromptInsertionPlan* plan = nullptr;
  std::vector<num::Var> g;
  std::vector<num::Var> e;
};

struct ForwardResult {
  num::Var features;  // (batch, embed_dim), the [class]-token rows
  num::Var tokens;    // (batch*tokens, embed_dim), full final sequence
  std::size_t batch = 0;
};

struct BlockParams {
  num::Tensor ln1_gain, ln1_bias;
  num::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  num::Tensor ln2_gain, ln2_bias;
  num::Tensor w_mlp1, b_mlp1, w_mlp2, b_mlp2;
};

// Pre-norm ViT: f = f_r o f_e. Prompt tokens are prepended to the sequence
// before each designated layer and their output positions dropped after it,
// so the sequence the classifier sees never contains prompt positions.
class VisionTransformer {
 public:
  VisionTransformer(BackboneConfig cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  // Patch embedding + [class] token + positional embeddings -> x_e.
  num::Var embed(const ImageBatch& images) const;

  ForwardResult forward(const ImageBatch& images, const PromptStack* prompts = nullptr,
                        PassCounters* counters = nullptr) const;
  // Reuse a precomputed embedding (multi-query evaluation shares one x_e).
  ForwardResult forward_from_embed(const num::Var& x_e, std::size_t batch,
                                   const PromptStack* prompts = nullptr,
                                   PassCounters* counters = nullptr) const;

  std::vector<std::pair<std::string, num::Tensor*>> named_parameters();
  std::vector<num::Tensor*> parameters();
  void set_trainable(bool on);

 private:
  BackboneConfig cfg_;

 public:
  // Parameter storage; public so the trainer and checkpoint code can bind
  // leaves without a forest of accessors.
  num::Tensor patch_w, patch_b;
  num::Tensor class_token;  // (1, D)
  num::Tensor pos_emb;      // (tokens, D)
  std::vector<BlockParams> blocks;
  num::Tensor final_ln_gain, final_ln_bias;
};

// logits = feature(s) . W; masked-out classes pinned to kMaskedLogit.
// feature: (D) or (B, D); W: (D, num_classes); mask: allowed class columns.
num::Tensor classify(const num::Tensor& feature, const num::Tensor& W,
                     const std::vector<std::uint32_t>* mask = nullptr);

// Index of the largest logit, skipping masked-out sentinel entries.
std::size_t argmax_logits(const std::vector<double>& logits);

}  // namespace mqmk::backbone
