#include "mqmk/backbone/vit.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mqmk/common/rng.hpp"

namespace mqmk::backbone {

using num::Tensor;
using num::Var;

void BackboneConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 ||
      num_layers == 0 || num_heads == 0) {
    throw ConfigError("backbone: all dimensions must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("backbone: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (mlp_ratio <= 0.0 || mlp_hidden() == 0) {
    throw ConfigError("backbone: mlp_ratio must be positive");
  }
}

void PromptInsertionPlan::validate(const BackboneConfig& cfg) const {
  auto check_layers = [&](const std::vector<std::size_t>& layers, const char* kind) {
    std::unordered_set<std::size_t> seen;
    for (std::size_t l : layers) {
      if (l >= cfg.num_layers) {
        throw ConfigError(std::string("prompt plan: ") + kind + "-layer " + std::to_string(l) +
                          " out of range for " + std::to_string(cfg.num_layers) + " layers");
      }
      if (!seen.insert(l).second) {
        throw ConfigError(std::string("prompt plan: duplicate ") + kind + "-layer " +
                          std::to_string(l));
      }
    }
  };
  check_layers(g_layers, "g");
  check_layers(e_layers, "e");
}

namespace {

Tensor xavier_uniform(num::Shape shape, std::size_t fan_in, std::size_t fan_out,
                      rng::Engine& g) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng::uniform_range(g, -limit, limit);
  return t;
}

Tensor gaussian_init(num::Shape shape, double stddev, rng::Engine& g) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng::gaussian(g);
  return t;
}

}  // namespace

VisionTransformer::VisionTransformer(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.embed_dim;
  const std::size_t pd = cfg_.patch_dim();
  const std::size_t hidden = cfg_.mlp_hidden();
  rng::Engine g(rng::mix_seed(seed, 0xb0de));

  patch_w = xavier_uniform({pd, d}, pd, d, g);
  patch_b = Tensor::zeros({d});
  class_token = gaussian_init({1, d}, 0.02, g);
  pos_emb = gaussian_init({cfg_.tokens(), d}, 0.02, g);
  blocks.resize(cfg_.num_layers);
  for (auto& blk : blocks) {
    blk.ln1_gain = Tensor({d}, 1.0);
    blk.ln1_bias = Tensor::zeros({d});
    blk.wq = xavier_uniform({d, d}, d, d, g);
    blk.bq = Tensor::zeros({d});
    blk.wk = xavier_uniform({d, d}, d, d, g);
    blk.bk = Tensor::zeros({d});
    blk.wv = xavier_uniform({d, d}, d, d, g);
    blk.bv = Tensor::zeros({d});
    blk.wo = xavier_uniform({d, d}, d, d, g);
    blk.bo = Tensor::zeros({d});
    blk.ln2_gain = Tensor({d}, 1.0);
    blk.ln2_bias = Tensor::zeros({d});
    blk.w_mlp1 = xavier_uniform({d, hidden}, d, hidden, g);
    blk.b_mlp1 = Tensor::zeros({hidden});
    blk.w_mlp2 = xavier_uniform({hidden, d}, hidden, d, g);
    blk.b_mlp2 = Tensor::zeros({d});
  }
  final_ln_gain = Tensor({d}, 1.0);
  final_ln_bias = Tensor::zeros({d});
}

Var VisionTransformer::embed(const ImageBatch& images) const {
  if (images.empty()) throw ShapeError("embed: empty batch");
  const std::size_t b = images.size();
  const std::size_t side = cfg_.patches_per_side();
  const std::size_t s = cfg_.patch_size;
  const std::size_t hw = cfg_.image_size;
  const std::size_t pd = cfg_.patch_dim();
  const std::size_t lp = cfg_.patch_tokens();

  // Patch extraction is pure data movement on the (non-trainable) input,
  // so it happens outside the graph.
  std::vector<double> xp(b * lp * pd);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const float* img = images[bi];
    for (std::size_t py = 0; py < side; ++py) {
      for (std::size_t px = 0; px < side; ++px) {
        double* tok = xp.data() + (bi * lp + py * side + px) * pd;
        std::size_t k = 0;
        for (std::size_t c = 0; c < cfg_.channels; ++c) {
          for (std::size_t dy = 0; dy < s; ++dy) {
            const float* row = img + c * hw * hw + (py * s + dy) * hw + px * s;
            for (std::size_t dx = 0; dx < s; ++dx) tok[k++] = static_cast<double>(row[dx]);
          }
        }
      }
    }
  }
  Var x = num::constant({b * lp, pd}, std::move(xp));
  x = num::matmul(x, num::leaf(const_cast<Tensor&>(patch_w)));
  x = num::add_row_broadcast(x, num::leaf(const_cast<Tensor&>(patch_b)));
  x = num::concat_front_per_sample(x, num::leaf(const_cast<Tensor&>(class_token)), b, lp);
  x = num::add_block_broadcast(x, num::leaf(const_cast<Tensor&>(pos_emb)), b);
  return x;
}

ForwardResult VisionTransformer::forward(const ImageBatch& images, const PromptStack* prompts,
                                         PassCounters* counters) const {
  return forward_from_embed(embed(images), images.size(), prompts, counters);
}

ForwardResult VisionTransformer::forward_from_embed(const Var& x_e, std::size_t batch,
                                                    const PromptStack* prompts,
                                                    PassCounters* counters) const {
  const std::size_t d = cfg_.embed_dim;
  const std::size_t base_len = cfg_.tokens();
  if (x_e.shape() != num::Shape{batch * base_len, d}) {
    throw ShapeError("forward: embedding shape " + num::shape_str(x_e.shape()) +
                     " does not match batch " + std::to_string(batch));
  }
  if (prompts && prompts->plan) {
    const PromptInsertionPlan& plan = *prompts->plan;
    plan.validate(cfg_);
    auto check = [&](const std::vector<Var>& vs, std::size_t count, std::size_t len,
                     const char* kind) {
      if (vs.empty()) return;
      if (vs.size() != count) {
        throw ShapeError(std::string("forward: ") + kind + "-prompt has " +
                         std::to_string(vs.size()) + " layers, plan expects " +
                         std::to_string(count));
      }
      for (const Var& v : vs) {
        if (v.shape() != num::Shape{len, d}) {
          throw ShapeError(std::string("forward: ") + kind + "-prompt shape " +
                           num::shape_str(v.shape()) + ", plan expects (" + std::to_string(len) +
                           "x" + std::to_string(d) + ")");
        }
      }
    };
    if (plan.g_length > 0) check(prompts->g, plan.g_layers.size(), plan.g_length, "g");
    if (plan.e_length > 0) check(prompts->e, plan.e_layers.size(), plan.e_length, "e");
  }

  auto prompt_for_layer = [&](std::size_t layer) -> Var {
    if (!prompts || !prompts->plan) return Var();
    std::vector<Var> parts;
    const PromptInsertionPlan& plan = *prompts->plan;
    if (!prompts->g.empty() && plan.g_length > 0) {
      for (std::size_t i = 0; i < plan.g_layers.size(); ++i) {
        if (plan.g_layers[i] == layer) parts.push_back(prompts->g[i]);
      }
    }
    if (!prompts->e.empty() && plan.e_length > 0) {
      for (std::size_t i = 0; i < plan.e_layers.size(); ++i) {
        if (plan.e_layers[i] == layer) parts.push_back(prompts->e[i]);
      }
    }
    if (parts.empty()) return Var();
    return parts.size() == 1 ? parts[0] : num::concat_rows(parts);
  };

  Var x = x_e;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const BlockParams& blk = blocks[l];
    auto P = [&](const Tensor& t) { return num::leaf(const_cast<Tensor&>(t)); };

    std::size_t cur_len = base_len;
    Var prompt = prompt_for_layer(l);
    if (prompt.defined()) {
      x = num::concat_front_per_sample(x, prompt, batch, cur_len);
      cur_len += prompt.shape()[0];
    }

    Var h = num::layer_norm(x, P(blk.ln1_gain), P(blk.ln1_bias));
    Var q = num::add_row_broadcast(num::matmul(h, P(blk.wq)), P(blk.bq));
    Var k = num::add_row_broadcast(num::matmul(h, P(blk.wk)), P(blk.bk));
    Var v = num::add_row_broadcast(num::matmul(h, P(blk.wv)), P(blk.bv));
    Var attn = num::self_attention(q, k, v, batch, cur_len, cfg_.num_heads);
    x = num::add(x, num::add_row_broadcast(num::matmul(attn, P(blk.wo)), P(blk.bo)));

    Var h2 = num::layer_norm(x, P(blk.ln2_gain), P(blk.ln2_bias));
    Var m = num::gelu(num::add_row_broadcast(num::matmul(h2, P(blk.w_mlp1)), P(blk.b_mlp1)));
    x = num::add(x, num::add_row_broadcast(num::matmul(m, P(blk.w_mlp2)), P(blk.b_mlp2)));

    if (prompt.defined()) {
      x = num::drop_front_per_sample(x, cur_len - base_len, batch, cur_len);
    }
  }
  x = num::layer_norm(x, num::leaf(const_cast<Tensor&>(final_ln_gain)),
                      num::leaf(const_cast<Tensor&>(final_ln_bias)));
  Var features = num::take_row0_per_sample(x, batch, base_len);
  if (counters) counters->add_forward(batch);
  return ForwardResult{features, x, batch};
}

std::vector<std::pair<std::string, Tensor*>> VisionTransformer::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("patch_w", &patch_w);
  out.emplace_back("patch_b", &patch_b);
  out.emplace_back("class_token", &class_token);
  out.emplace_back("pos_emb", &pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockParams& b = blocks[l];
    out.emplace_back(p + "ln1_gain", &b.ln1_gain);
    out.emplace_back(p + "ln1_bias", &b.ln1_bias);
    out.emplace_back(p + "wq", &b.wq);
    out.emplace_back(p + "bq", &b.bq);
    out.emplace_back(p + "wk", &b.wk);
    out.emplace_back(p + "bk", &b.bk);
    out.emplace_back(p + "wv", &b.wv);
    out.emplace_back(p + "bv", &b.bv);
    out.emplace_back(p + "wo", &b.wo);
    out.emplace_back(p + "bo", &b.bo);
    out.emplace_back(p + "ln2_gain", &b.ln2_gain);
    out.emplace_back(p + "ln2_bias", &b.ln2_bias);
    out.emplace_back(p + "w_mlp1", &b.w_mlp1);
    out.emplace_back(p + "b_mlp1", &b.b_mlp1);
    out.emplace_back(p + "w_mlp2", &b.w_mlp2);
    out.emplace_back(p + "b_mlp2", &b.b_mlp2);
  }
  out.emplace_back("final_ln_gain", &final_ln_gain);
  out.emplace_back("final_ln_bias", &final_ln_bias);
  return out;
}

std::vector<Tensor*> VisionTransformer::parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void VisionTransformer::set_trainable(bool on) {
  for (Tensor* t : parameters()) t->set_requires_grad(on);
}

Tensor classify(const Tensor& feature, const Tensor& W,
                const std::vector<std::uint32_t>* mask) {
  const std::size_t d = W.rows();
  const std::size_t c = W.cols();
  std::size_t b = 0;
  if (feature.shape().size() == 1 && feature.size() == d) {
    b = 1;
  } else if (feature.shape().size() == 2 && feature.cols() == d) {
    b = feature.rows();
  } else {
    throw ShapeError("classify: feature " + num::shape_str(feature.shape()) +
                     " does not match classifier " + num::shape_str(W.shape()));
  }
  if (mask) {
    if (mask->empty()) throw ValueError("classify: empty class mask");
    for (std::uint32_t j : *mask) {
      if (j >= c) {
        throw ValueError("classify: mask class " + std::to_string(j) + " out of range for " +
                         std::to_string(c) + " classes");
      }
    }
  }
  Tensor logits = feature.shape().size() == 1 ? Tensor({c}, kMaskedLogit)
                                              : Tensor({b, c}, kMaskedLogit);
  std::vector<bool> keep(c, mask == nullptr);
  if (mask) {
    for (std::uint32_t j : *mask) keep[j] = true;
  }
  for (std::size_t i = 0; i < b; ++i) {
    const double* f = feature.values().data() + i * d;
    double* out = logits.values().data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      if (!keep[j]) continue;
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) acc += f[p] * W[p * c + j];
      out[j] = acc;
    }
  }
  return logits;
}

std::size_t argmax_logits(const std::vector<double>& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;
  }
  return best;
}

}  // namespace mqmk::backbone
