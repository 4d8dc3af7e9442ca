#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lesionformer/rng.hpp"
#include "lesionformer/tensor.hpp"

namespace lesionformer {

struct SwinConfig {
  std::int64_t image_size = 64;
  std::int64_t patch_size = 4;
  std::int64_t embed_dim = 16;
  std::array<std::int64_t, 4> depths{2, 2, 2, 2};
  std::array<std::int64_t, 4> num_heads{2, 2, 4, 4};
  std::int64_t window_size = 4;
  std::int64_t mlp_ratio = 4;
  std::int64_t num_classes = 8;
  double drop_rate = 0.0;

  void validate() const;
  std::int64_t grid_side(int stage) const;  // (image_size / patch_size) / 2^stage
  std::int64_t stage_dim(int stage) const;  // embed_dim * 2^stage
  std::int64_t feature_dim() const { return stage_dim(3); }
};

// Additive attention bias per window: 0 for token pairs from the same
// pre-shift region, -1e9 otherwise.
struct AttentionMask {
  std::int64_t num_windows = 0;
  std::int64_t window_tokens = 0;                // m*m
  std::vector<double> bias;                      // [nW, m*m, m*m]
  std::vector<std::int64_t> region_ids;          // [h*w], for inspection/tests
  bool empty() const { return num_windows == 0; }
  // Constant tensor [batch*nW, heads, m*m, m*m] for adding onto scores.
  Tensor expanded(std::int64_t batch, std::int64_t heads) const;
};

AttentionMask build_shift_mask(std::int64_t h, std::int64_t w, std::int64_t m, std::int64_t s);

// Map from token-pair relative offsets to rows of the (2m-1)^2 bias table.
struct RelPosIndex {
  std::int64_t window = 0;
  std::vector<std::int64_t> index;  // [m^2 * m^2]
};

RelPosIndex build_relpos_index(std::int64_t m);
// table: [(2m-1)^2, heads] -> bias [heads, m^2, m^2], differentiable.
Tensor relpos_bias_from_table(const Tensor& table, const RelPosIndex& rp, std::int64_t heads);

// ---------------------------------------------------------------------------
// Ordered, name-addressable parameter registry.
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  std::span<const NamedTensor> items() const { return items_; }
  void zero_grad();
  std::int64_t total_elements() const;

 private:
  std::vector<NamedTensor> items_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// ---------------------------------------------------------------------------
// Backbone building blocks (free functions, explicit weights)
// ---------------------------------------------------------------------------

Tensor patch_embed(const Tensor& image, std::int64_t patch, const Tensor& proj_w,
                   const Tensor& proj_b, const Tensor& ln_g, const Tensor& ln_b);

// [B,h,w,C] -> [B*nW, m, m, C]; pure index permutation.
Tensor window_partition(const Tensor& x, std::int64_t m);
Tensor window_reverse(const Tensor& windows, std::int64_t m, std::int64_t h, std::int64_t w);

// Toroidal roll by (-s, -s) over the spatial axes.
Tensor cyclic_shift(const Tensor& x, std::int64_t s);
Tensor cyclic_unshift(const Tensor& x, std::int64_t s);

struct WindowAttentionWeights {
  Tensor qkv_w;   // [C, 3C]
  Tensor qkv_b;   // [3C]
  Tensor proj_w;  // [C, C]
  Tensor proj_b;  // [C]
  Tensor relpos_table;  // [(2m-1)^2, heads]
};

// x: [nWt, m^2, C]; mask: undefined Tensor or [nWt, heads, m^2, m^2].
// Row-stochastic attention probabilities are written to *probs_out if given.
Tensor window_attention(const Tensor& x, const Tensor& mask, const WindowAttentionWeights& w,
                        std::int64_t heads, const RelPosIndex& rp, Tensor* probs_out = nullptr);

struct SwinBlockWeights {
  Tensor norm1_g, norm1_b;
  WindowAttentionWeights attn;
  Tensor norm2_g, norm2_b;
  Tensor mlp_fc1_w, mlp_fc1_b;
  Tensor mlp_fc2_w, mlp_fc2_b;
};

// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)). shift > 0
// wraps attention in cyclic_shift/unshift and applies `mask`.
Tensor swin_block(const Tensor& x, const SwinBlockWeights& w, std::int64_t heads, std::int64_t m,
                  std::int64_t shift, const AttentionMask* mask, const RelPosIndex& rp,
                  double drop_rate, Rng* drop_rng);

// 2x2 neighborhood concatenation: [B,h,w,C] -> [B,h/2,w/2,4C].
Tensor patch_merge_concat(const Tensor& x);
// concat -> layer norm -> linear 4C -> 2C.
Tensor patch_merge(const Tensor& x, const Tensor& ln_g, const Tensor& ln_b,
                   const Tensor& reduce_w);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// ---------------------------------------------------------------------------
// Full backbone
// ---------------------------------------------------------------------------

class SwinBackbone {
 public:
  SwinBackbone(SwinConfig cfg, std::uint64_t init_seed);

  // Pooled, normalized embedding [B, feature_dim]. Training mode only gates
  // dropout; drop_rng must be supplied when training with drop_rate > 0.
  Tensor features(const Tensor& images, bool training = false, Rng* drop_rng = nullptr);
  // Shared classification head [B, F] -> [B, num_classes].
  Tensor head(const Tensor& feats) const;
  // Eval-mode logits.
  Tensor forward(const Tensor& images);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const SwinConfig& config() const { return cfg_; }

  std::int64_t stage_window(int stage) const { return stages_[stage].window; }
  std::int64_t stage_shift(int stage) const { return stages_[stage].shift; }

 private:
  struct StageMeta {
    std::int64_t grid = 0;
    std::int64_t dim = 0;
    std::int64_t window = 0;
    std::int64_t shift = 0;
    AttentionMask mask;
    RelPosIndex rp;
  };

  SwinConfig cfg_;
  ParamStore params_;
  std::array<StageMeta, 4> stages_;
  std::vector<std::vector<SwinBlockWeights>> blocks_;
  struct MergeWeights {
    Tensor ln_g, ln_b, reduce_w;
  };
  std::array<MergeWeights, 3> merges_;
  Tensor pe_w_, pe_b_, pe_ln_g_, pe_ln_b_;
  Tensor head_norm_g_, head_norm_b_, head_w_, head_b_;
};

}  // namespace lesionformer
