#include "lesionformer/swin.hpp"

#include <cmath>
#include <stdexcept>

namespace lesionformer {

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kMaskFill = -1e9;
}  // namespace

// ---------------------------------------------------------------------------
// SwinConfig
// ---------------------------------------------------------------------------

void SwinConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("SwinConfig: image_size must be a positive multiple of patch_size");
  }
  if (embed_dim <= 0 || window_size <= 0 || mlp_ratio <= 0 || num_classes <= 0) {
    throw std::invalid_argument("SwinConfig: extents must be positive");
  }
  if (drop_rate < 0.0 || drop_rate >= 1.0) {
    throw std::invalid_argument("SwinConfig: drop_rate must be in [0, 1)");
  }
  // three patch merges halve the grid three times
  const std::int64_t base = image_size / patch_size;
  if (base % 8 != 0) {
    throw std::invalid_argument("SwinConfig: token grid side must be divisible by 8");
  }
  for (int s = 0; s < 4; ++s) {
    if (depths[s] <= 0) throw std::invalid_argument("SwinConfig: depths must be positive");
    if (num_heads[s] <= 0 || stage_dim(s) % num_heads[s] != 0) {
      throw std::invalid_argument("SwinConfig: stage " + std::to_string(s) + " width " +
                                  std::to_string(stage_dim(s)) + " not divisible by " +
                                  std::to_string(num_heads[s]) + " heads");
    }
    if (grid_side(s) < 1) {
      throw std::invalid_argument("SwinConfig: token grid vanishes at stage " + std::to_string(s));
    }
  }
}

std::int64_t SwinConfig::grid_side(int stage) const {
  return (image_size / patch_size) >> stage;
}

std::int64_t SwinConfig::stage_dim(int stage) const { return embed_dim << stage; }

// ---------------------------------------------------------------------------
// Shift mask
// ---------------------------------------------------------------------------

AttentionMask build_shift_mask(std::int64_t h, std::int64_t w, std::int64_t m, std::int64_t s) {
  if (m <= 0 || h % m != 0 || w % m != 0) {
    throw std::invalid_argument("build_shift_mask: grid " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by window " +
                                std::to_string(m));
  }
  if (s < 0 || s >= m) {
    throw std::invalid_argument("build_shift_mask: shift out of range");
  }
  // Band partition in post-shift coordinates. The wrap seam sits at n-s; the
  // window boundary band starts at n-m.
  auto band = [](std::int64_t i, std::int64_t n, std::int64_t m, std::int64_t s) -> std::int64_t {
    if (i < n - m) return 0;
    if (s == 0 || i < n - s) return 1;
    return 2;
  };

  AttentionMask mask;
  const std::int64_t nh = h / m, nw = w / m;
  mask.num_windows = nh * nw;
  mask.window_tokens = m * m;
  mask.region_ids.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      mask.region_ids[static_cast<std::size_t>(i * w + j)] =
          band(i, h, m, s) * 3 + band(j, w, m, s);
    }
  }

  const std::int64_t t = mask.window_tokens;
  mask.bias.assign(static_cast<std::size_t>(mask.num_windows * t * t), 0.0);
  std::vector<std::int64_t> ids(static_cast<std::size_t>(t));
  for (std::int64_t wi = 0; wi < nh; ++wi) {
    for (std::int64_t wj = 0; wj < nw; ++wj) {
      for (std::int64_t p = 0; p < t; ++p) {
        const std::int64_t i = wi * m + p / m;
        const std::int64_t j = wj * m + p % m;
        ids[static_cast<std::size_t>(p)] = mask.region_ids[static_cast<std::size_t>(i * w + j)];
      }
      double* block = mask.bias.data() + (wi * nw + wj) * t * t;
      for (std::int64_t p = 0; p < t; ++p) {
        for (std::int64_t q = 0; q < t; ++q) {
          if (ids[static_cast<std::size_t>(p)] != ids[static_cast<std::size_t>(q)]) {
            block[p * t + q] = kMaskFill;
          }
        }
      }
    }
  }
  return mask;
}

Tensor AttentionMask::expanded(std::int64_t batch, std::int64_t heads) const {
  const std::int64_t t = window_tokens;
  std::vector<double> v(static_cast<std::size_t>(batch * num_windows * heads * t * t));
  const std::int64_t block = t * t;
  std::int64_t off = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t wi = 0; wi < num_windows; ++wi) {
      const double* src = bias.data() + wi * block;
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        std::copy(src, src + block, v.data() + off);
        off += block;
      }
    }
  }
  return Tensor::from_data({batch * num_windows, heads, t, t}, std::move(v));
}

// ---------------------------------------------------------------------------
// Relative position bias
// ---------------------------------------------------------------------------

RelPosIndex build_relpos_index(std::int64_t m) {
  if (m <= 0) throw std::invalid_argument("build_relpos_index: window must be positive");
  RelPosIndex rp;
  rp.window = m;
  const std::int64_t t = m * m;
  rp.index.resize(static_cast<std::size_t>(t * t));
  for (std::int64_t p = 0; p < t; ++p) {
    const std::int64_t pi = p / m, pj = p % m;
    for (std::int64_t q = 0; q < t; ++q) {
      const std::int64_t qi = q / m, qj = q % m;
      const std::int64_t ry = pi - qi + (m - 1);
      const std::int64_t rx = pj - qj + (m - 1);
      rp.index[static_cast<std::size_t>(p * t + q)] = ry * (2 * m - 1) + rx;
    }
  }
  return rp;
}

Tensor relpos_bias_from_table(const Tensor& table, const RelPosIndex& rp, std::int64_t heads) {
  const std::int64_t t = rp.window * rp.window;
  Tensor g = gather_rows(table, rp.index);       // [t*t, heads]
  g = transpose(g, 0, 1);                        // [heads, t*t]
  return reshape(g, {heads, t, t});
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (by_name_.count(name)) {
    throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  }
  t.set_requires_grad(true);
  by_name_[name] = items_.size();
  items_.push_back({name, t});
  return t;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return items_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return items_[it->second].tensor;
}

void ParamStore::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

Tensor patch_embed(const Tensor& image, std::int64_t patch, const Tensor& proj_w,
                   const Tensor& proj_b, const Tensor& ln_g, const Tensor& ln_b) {
  if (image.rank() != 4) {
    throw std::invalid_argument("patch_embed: expected [B,H,W,C] image, got " +
                                shape_str(image.shape()));
  }
  const auto b = image.dim(0), hi = image.dim(1), wi = image.dim(2), ci = image.dim(3);
  if (hi % patch != 0 || wi % patch != 0) {
    throw std::invalid_argument("patch_embed: image " + shape_str(image.shape()) +
                                " not divisible by patch " + std::to_string(patch));
  }
  const std::int64_t h = hi / patch, w = wi / patch;
  const std::int64_t c = proj_w.dim(1);
  Tensor x = reshape(image, {b, h, patch, w, patch, ci});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  x = reshape(x, {b * h * w, patch * patch * ci});
  x = add(matmul(x, proj_w), proj_b);
  x = layer_norm(x, ln_g, ln_b, kLnEps);
  return reshape(x, {b, h, w, c});
}

Tensor window_partition(const Tensor& x, std::int64_t m) {
  if (x.rank() != 4) {
    throw std::invalid_argument("window_partition: expected [B,h,w,C], got " +
                                shape_str(x.shape()));
  }
  const auto b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (m <= 0 || h % m != 0 || w % m != 0) {
    throw std::invalid_argument("window_partition: " + shape_str(x.shape()) +
                                " not divisible by window " + std::to_string(m));
  }
  const std::int64_t nh = h / m, nw = w / m;
  Tensor y = reshape(x, {b, nh, m, nw, m, c});
  y = permute(y, {0, 1, 3, 2, 4, 5});
  return reshape(y, {b * nh * nw, m, m, c});
}

Tensor window_reverse(const Tensor& windows, std::int64_t m, std::int64_t h, std::int64_t w) {
  if (windows.rank() != 4 || windows.dim(1) != m || windows.dim(2) != m) {
    throw std::invalid_argument("window_reverse: expected [B*nW,m,m,C], got " +
                                shape_str(windows.shape()));
  }
  const std::int64_t nh = h / m, nw = w / m;
  const std::int64_t b = windows.dim(0) / (nh * nw);
  if (b * nh * nw != windows.dim(0)) {
    throw std::invalid_argument("window_reverse: window count does not tile " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  const auto c = windows.dim(3);
  Tensor y = reshape(windows, {b, nh, nw, m, m, c});
  y = permute(y, {0, 1, 3, 2, 4, 5});
  return reshape(y, {b, h, w, c});
}

Tensor cyclic_shift(const Tensor& x, std::int64_t s) {
  if (s < 0 || (x.rank() == 4 && (s >= x.dim(1) || s >= x.dim(2)))) {
    throw std::invalid_argument("cyclic_shift: shift out of range");
  }
  if (s == 0) return x;
  return roll2d(x, -s, -s);
}

Tensor cyclic_unshift(const Tensor& x, std::int64_t s) {
  if (s < 0 || (x.rank() == 4 && (s >= x.dim(1) || s >= x.dim(2)))) {
    throw std::invalid_argument("cyclic_unshift: shift out of range");
  }
  if (s == 0) return x;
  return roll2d(x, s, s);
}

Tensor window_attention(const Tensor& x, const Tensor& mask, const WindowAttentionWeights& w,
                        std::int64_t heads, const RelPosIndex& rp, Tensor* probs_out) {
  if (x.rank() != 3) {
    throw std::invalid_argument("window_attention: expected [nW,T,C], got " +
                                shape_str(x.shape()));
  }
  const auto nwt = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (c % heads != 0) {
    throw std::invalid_argument("window_attention: width " + std::to_string(c) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::int64_t hd = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor qkv = add(matmul(x, w.qkv_w), w.qkv_b);  // [nWt, T, 3C]
  auto split_head = [&](std::int64_t offset) {
    Tensor part = slice(qkv, {0, 0, offset}, {nwt, t, c});
    part = reshape(part, {nwt, t, heads, hd});
    return permute(part, {0, 2, 1, 3});  // [nWt, heads, T, hd]
  };
  Tensor q = split_head(0);
  Tensor k = split_head(c);
  Tensor v = split_head(2 * c);

  Tensor scores = mul_scalar(matmul(q, transpose(k, 2, 3)), scale);  // [nWt, heads, T, T]
  scores = add(scores, relpos_bias_from_table(w.relpos_table, rp, heads));
  if (mask.defined()) {
    scores = add(scores, mask);
  }
  Tensor probs = softmax(scores, 3);
  if (probs_out) *probs_out = probs;

  Tensor ctx = matmul(probs, v);                  // [nWt, heads, T, hd]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {nwt, t, c});
  return add(matmul(ctx, w.proj_w), w.proj_b);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const double keep = 1.0 - rate;
  std::vector<double> m(x.data().size());
  for (auto& v : m) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, Tensor::from_data(x.shape(), std::move(m)));
}

Tensor swin_block(const Tensor& x, const SwinBlockWeights& w, std::int64_t heads, std::int64_t m,
                  std::int64_t shift, const AttentionMask* mask, const RelPosIndex& rp,
                  double drop_rate, Rng* drop_rng) {
  const auto b = x.dim(0), h = x.dim(1), ww = x.dim(2), c = x.dim(3);
  Tensor y = layer_norm(x, w.norm1_g, w.norm1_b, kLnEps);
  if (shift > 0) y = cyclic_shift(y, shift);
  Tensor win = window_partition(y, m);
  win = reshape(win, {win.dim(0), m * m, c});
  Tensor mask_t;
  if (shift > 0 && mask && !mask->empty()) {
    mask_t = mask->expanded(b, heads);
  }
  Tensor attn = window_attention(win, mask_t, w.attn, heads, rp);
  attn = reshape(attn, {attn.dim(0), m, m, c});
  y = window_reverse(attn, m, h, ww);
  if (shift > 0) y = cyclic_unshift(y, shift);
  if (drop_rate > 0.0 && drop_rng) y = dropout(y, drop_rate, *drop_rng);
  Tensor res = add(x, y);

  Tensor z = layer_norm(res, w.norm2_g, w.norm2_b, kLnEps);
  z = reshape(z, {b * h * ww, c});
  z = gelu(add(matmul(z, w.mlp_fc1_w), w.mlp_fc1_b));
  z = add(matmul(z, w.mlp_fc2_w), w.mlp_fc2_b);
  z = reshape(z, {b, h, ww, c});
  if (drop_rate > 0.0 && drop_rng) z = dropout(z, drop_rate, *drop_rng);
  return add(res, z);
}

Tensor patch_merge_concat(const Tensor& x) {
  if (x.rank() != 4) {
    throw std::invalid_argument("patch_merge: expected [B,h,w,C], got " + shape_str(x.shape()));
  }
  const auto b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("patch_merge: odd spatial extents in " + shape_str(x.shape()));
  }
  Tensor y = reshape(x, {b, h / 2, 2, w / 2, 2, c});
  y = permute(y, {0, 1, 3, 2, 4, 5});  // [B, h/2, w/2, 2, 2, C]
  return reshape(y, {b, h / 2, w / 2, 4 * c});
}

Tensor patch_merge(const Tensor& x, const Tensor& ln_g, const Tensor& ln_b,
                   const Tensor& reduce_w) {
  Tensor y = patch_merge_concat(x);
  const auto b = y.dim(0), h = y.dim(1), w = y.dim(2), c4 = y.dim(3);
  y = layer_norm(y, ln_g, ln_b, kLnEps);
  y = reshape(y, {b * h * w, c4});
  y = matmul(y, reduce_w);
  return reshape(y, {b, h, w, c4 / 2});
}

// ---------------------------------------------------------------------------
// SwinBackbone
// ---------------------------------------------------------------------------

SwinBackbone::SwinBackbone(SwinConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(init_seed, "init"));
  auto tn = [&](Shape shape) {
    const auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& e : v) e = rng.truncated_normal(0.02);
    return Tensor::from_data(std::move(shape), std::move(v));
  };

  const std::int64_t p = cfg_.patch_size;
  const std::int64_t c0 = cfg_.embed_dim;
  pe_w_ = params_.add("patch_embed.proj.weight", tn({p * p * 3, c0}));
  pe_b_ = params_.add("patch_embed.proj.bias", Tensor::zeros({c0}));
  pe_ln_g_ = params_.add("patch_embed.norm.gain", Tensor::ones({c0}));
  pe_ln_b_ = params_.add("patch_embed.norm.bias", Tensor::zeros({c0}));

  blocks_.resize(4);
  for (int s = 0; s < 4; ++s) {
    auto& meta = stages_[s];
    meta.grid = cfg_.grid_side(s);
    meta.dim = cfg_.stage_dim(s);
    meta.window = std::min(cfg_.window_size, meta.grid);
    // no shift when one window covers the whole grid
    meta.shift = meta.window < meta.grid ? meta.window / 2 : 0;
    if (meta.shift > 0) {
      meta.mask = build_shift_mask(meta.grid, meta.grid, meta.window, meta.shift);
    }
    meta.rp = build_relpos_index(meta.window);

    const std::int64_t c = meta.dim;
    const std::int64_t hidden = c * cfg_.mlp_ratio;
    const std::int64_t heads = cfg_.num_heads[s];
    const std::int64_t table_rows = (2 * meta.window - 1) * (2 * meta.window - 1);
    blocks_[s].resize(static_cast<std::size_t>(cfg_.depths[s]));
    for (std::int64_t bi = 0; bi < cfg_.depths[s]; ++bi) {
      const std::string pre = "stage" + std::to_string(s) + ".block" + std::to_string(bi) + ".";
      auto& bw = blocks_[s][static_cast<std::size_t>(bi)];
      bw.norm1_g = params_.add(pre + "norm1.gain", Tensor::ones({c}));
      bw.norm1_b = params_.add(pre + "norm1.bias", Tensor::zeros({c}));
      bw.attn.qkv_w = params_.add(pre + "attn.qkv.weight", tn({c, 3 * c}));
      bw.attn.qkv_b = params_.add(pre + "attn.qkv.bias", Tensor::zeros({3 * c}));
      // residual-branch output projections start at zero
      bw.attn.proj_w = params_.add(pre + "attn.proj.weight", Tensor::zeros({c, c}));
      bw.attn.proj_b = params_.add(pre + "attn.proj.bias", Tensor::zeros({c}));
      bw.attn.relpos_table = params_.add(pre + "attn.relpos.table", Tensor::zeros({table_rows, heads}));
      bw.norm2_g = params_.add(pre + "norm2.gain", Tensor::ones({c}));
      bw.norm2_b = params_.add(pre + "norm2.bias", Tensor::zeros({c}));
      bw.mlp_fc1_w = params_.add(pre + "mlp.fc1.weight", tn({c, hidden}));
      bw.mlp_fc1_b = params_.add(pre + "mlp.fc1.bias", Tensor::zeros({hidden}));
      bw.mlp_fc2_w = params_.add(pre + "mlp.fc2.weight", Tensor::zeros({hidden, c}));
      bw.mlp_fc2_b = params_.add(pre + "mlp.fc2.bias", Tensor::zeros({c}));
    }
    if (s < 3) {
      const std::string pre = "stage" + std::to_string(s) + ".merge.";
      merges_[s].ln_g = params_.add(pre + "norm.gain", Tensor::ones({4 * c}));
      merges_[s].ln_b = params_.add(pre + "norm.bias", Tensor::zeros({4 * c}));
      merges_[s].reduce_w = params_.add(pre + "reduce.weight", tn({4 * c, 2 * c}));
    }
  }

  const std::int64_t f = cfg_.feature_dim();
  head_norm_g_ = params_.add("head.norm.gain", Tensor::ones({f}));
  head_norm_b_ = params_.add("head.norm.bias", Tensor::zeros({f}));
  head_w_ = params_.add("head.weight", tn({f, cfg_.num_classes}));
  head_b_ = params_.add("head.bias", Tensor::zeros({cfg_.num_classes}));
}

Tensor SwinBackbone::features(const Tensor& images, bool training, Rng* drop_rng) {
  if (images.rank() != 4 || images.dim(1) != cfg_.image_size ||
      images.dim(2) != cfg_.image_size || images.dim(3) != 3) {
    throw std::invalid_argument("SwinBackbone: expected [B," + std::to_string(cfg_.image_size) +
                                "," + std::to_string(cfg_.image_size) + ",3], got " +
                                shape_str(images.shape()));
  }
  Rng* rng = training ? drop_rng : nullptr;

  Tensor x = patch_embed(images, cfg_.patch_size, pe_w_, pe_b_, pe_ln_g_, pe_ln_b_);
  check_finite(x, "patch_embed");
  for (int s = 0; s < 4; ++s) {
    const auto& meta = stages_[s];
    for (std::int64_t bi = 0; bi < cfg_.depths[s]; ++bi) {
      const bool shifted = (bi % 2 == 1) && meta.shift > 0;
      x = swin_block(x, blocks_[s][static_cast<std::size_t>(bi)], cfg_.num_heads[s], meta.window,
                     shifted ? meta.shift : 0, shifted ? &meta.mask : nullptr, meta.rp,
                     cfg_.drop_rate, rng);
    }
    check_finite(x, "stage" + std::to_string(s));
    if (s < 3) {
      x = patch_merge(x, merges_[s].ln_g, merges_[s].ln_b, merges_[s].reduce_w);
    }
  }
  const auto b = x.dim(0);
  const std::int64_t tokens = stages_[3].grid * stages_[3].grid;
  x = reshape(x, {b, tokens, cfg_.feature_dim()});
  x = mean(x, 1);  // global average pool over tokens
  x = layer_norm(x, head_norm_g_, head_norm_b_, kLnEps);
  check_finite(x, "head.norm");
  return x;
}

Tensor SwinBackbone::head(const Tensor& feats) const {
  return add(matmul(feats, head_w_), head_b_);
}

Tensor SwinBackbone::forward(const Tensor& images) { return head(features(images, false)); }

}  // namespace lesionformer
