// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0

#include "rice/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "rice/random.hpp"

namespace rice {

void EncoderConfig::validate() const {
  if (layers < 2) throw ConfigError("encoder: need at least 2 layers");
  if (region_layers < 1 || region_layers >= layers)
    throw ConfigError("encoder: region layer count must satisfy 1 <= R < T");
  if (heads < 1 || dim < 1 || dim % heads != 0) throw ConfigError("encoder: dim must be divisible by heads");
  if (patch < 1 || height < patch || width < patch) throw ConfigError("encoder: bad patch size");
  if (height % patch || width % patch) throw ConfigError("encoder: image size not divisible by patch size");
  if (channels < 1 || mlp_hidden < 1) throw ConfigError("encoder: channels and mlp_hidden must be positive");
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
EncoderParams<T> EncoderParams<T>::zeros(const EncoderConfig& c) {
  c.validate();
  EncoderParams p;
  p.config = c;
  const std::size_t d = c.dim, f = c.mlp_hidden;
  p.patch_w = Matrix<T>(c.patch_dim(), d);
  p.patch_b = Matrix<T>(1, d);
  p.cls = Matrix<T>(1, d);
  p.pos = Matrix<T>(1 + c.num_patches(), d);
  p.layers.resize(c.layers);
  for (auto& l : p.layers) {
    l.ln1_g = Matrix<T>(1, d);
    l.ln1_b = Matrix<T>(1, d);
    auto& a = l.attn;
    a.heads = c.heads;
    for (auto* w : {&a.wq, &a.wk, &a.wv, &a.wo}) *w = Matrix<T>(d, d);
    for (auto* b : {&a.bq, &a.bk, &a.bv, &a.bo}) *b = Matrix<T>(1, d);
    l.ln2_g = Matrix<T>(1, d);
    l.ln2_b = Matrix<T>(1, d);
    l.w1 = Matrix<T>(d, f);
    l.b1 = Matrix<T>(1, f);
    l.w2 = Matrix<T>(f, d);
    l.b2 = Matrix<T>(1, d);
  }
  p.ln_post_g = Matrix<T>(1, d);
  p.ln_post_b = Matrix<T>(1, d);
  return p;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::init(const EncoderConfig& c, std::uint64_t seed) {
  auto p = zeros(c);
  Rng rng(derive_seed(seed, {0xE1}));
  auto gauss = [&](Matrix<T>& m, double std) {
    for (auto& x : m.storage()) x = static_cast<T>(std * rng.normal());
  };
  const double depth_scale = 1.0 / std::sqrt(2.0 * c.layers);
  gauss(p.patch_w, 1.0 / std::sqrt(static_cast<double>(c.patch_dim())));
  gauss(p.cls, 0.02);
  gauss(p.pos, 0.02);
  for (auto& l : p.layers) {
    l.ln1_g.fill(T(1));
    l.ln2_g.fill(T(1));
    const double s_in = 1.0 / std::sqrt(static_cast<double>(c.dim));
    gauss(l.attn.wq, s_in);
    gauss(l.attn.wk, s_in);
    gauss(l.attn.wv, s_in);
    gauss(l.attn.wo, s_in * depth_scale);
    gauss(l.w1, s_in);
    gauss(l.w2, depth_scale / std::sqrt(static_cast<double>(c.mlp_hidden)));
  }
  p.ln_post_g.fill(T(1));
  return p;
}

namespace {

template <typename P, typename M>
auto collect_tensors(P& p) {
  std::vector<std::pair<std::string, M*>> out;
  out.emplace_back("patch.weight", &p.patch_w);
  out.emplace_back("patch.bias", &p.patch_b);
  out.emplace_back("cls", &p.cls);
  out.emplace_back("pos", &p.pos);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.emplace_back(pre + "ln1.g", &l.ln1_g);
    out.emplace_back(pre + "ln1.b", &l.ln1_b);
    out.emplace_back(pre + "attn.wq", &l.attn.wq);
    out.emplace_back(pre + "attn.bq", &l.attn.bq);
    out.emplace_back(pre + "attn.wk", &l.attn.wk);
    out.emplace_back(pre + "attn.bk", &l.attn.bk);
    out.emplace_back(pre + "attn.wv", &l.attn.wv);
    out.emplace_back(pre + "attn.bv", &l.attn.bv);
    out.emplace_back(pre + "attn.wo", &l.attn.wo);
    out.emplace_back(pre + "attn.bo", &l.attn.bo);
    out.emplace_back(pre + "ln2.g", &l.ln2_g);
    out.emplace_back(pre + "ln2.b", &l.ln2_b);
    out.emplace_back(pre + "mlp.w1", &l.w1);
    out.emplace_back(pre + "mlp.b1", &l.b1);
    out.emplace_back(pre + "mlp.w2", &l.w2);
    out.emplace_back(pre + "mlp.b2", &l.b2);
  }
  out.emplace_back("ln_post.g", &p.ln_post_g);
  out.emplace_back("ln_post.b", &p.ln_post_b);
  return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> EncoderParams<T>::tensors() {
  return collect_tensors<EncoderParams<T>, Matrix<T>>(*this);
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> EncoderParams<T>::tensors() const {
  return collect_tensors<const EncoderParams<T>, const Matrix<T>>(*this);
}

template <typename T>
EncoderParams<T>& EncoderParams<T>::operator+=(const EncoderParams& other) {
  auto a = tensors();
  auto b = other.tensors();
  if (a.size() != b.size()) throw ShapeError("EncoderParams += : layer count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) *a[i].second += *b[i].second;
  return *this;
}

bool is_no_decay(const std::string& name) {
  auto ends_with = [&](std::string_view suf) {
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  return name == "cls" || name == "pos" || ends_with(".g") || ends_with(".b") || ends_with(".bias") ||
         ends_with(".bq") || ends_with(".bk") || ends_with(".bv") || ends_with(".bo") ||
         ends_with(".b1") || ends_with(".b2");
}

// ---------------------------------------------------------------------------
// Visibility masks

VisibilityMask::VisibilityMask(std::size_t regions, std::size_t tokens)
    : regions_(regions), tokens_(tokens), visible_(regions * tokens, 0) {}

std::size_t VisibilityMask::visible_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t j = 0; j < tokens_; ++j) n += visible(r, j);
  return n;
}

void VisibilityMask::validate() const {
  for (std::size_t r = 0; r < regions_; ++r)
    if (visible_count(r) == 0)
      throw std::invalid_argument("visibility mask row " + std::to_string(r) + " has no visible token");
}

VisibilityMask build_visibility_mask(const std::vector<Region>& regions, int rows, int cols, int patch) {
  if (regions.empty()) throw std::invalid_argument("build_visibility_mask: no regions to attend");
  if (rows < 1 || cols < 1 || patch < 1) throw std::invalid_argument("build_visibility_mask: bad grid");
  VisibilityMask mask(regions.size(), static_cast<std::size_t>(rows) * cols);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& b = regions[i].bbox;
    bool any = false;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        // Center pixel ((c + 0.5)p, (r + 0.5)p), compared in doubled units.
        const long cx2 = static_cast<long>(2 * c + 1) * patch, cy2 = static_cast<long>(2 * r + 1) * patch;
        if (cx2 >= 2L * b.x0 && cx2 < 2L * b.x1 && cy2 >= 2L * b.y0 && cy2 < 2L * b.y1) {
          mask.set_visible(i, static_cast<std::size_t>(r) * cols + c, true);
          any = true;
        }
      }
    }
    if (any) continue;
    long best_area = -1;
    std::size_t best = 0;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const long ox = std::max(0, std::min(b.x1, (c + 1) * patch) - std::max(b.x0, c * patch));
        const long oy = std::max(0, std::min(b.y1, (r + 1) * patch) - std::max(b.y0, r * patch));
        if (ox * oy > best_area) {
          best_area = ox * oy;
          best = static_cast<std::size_t>(r) * cols + c;
        }
      }
    }
    mask.set_visible(i, best, true);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Patch embedding

namespace {

template <typename T>
Matrix<T> extract_patches(const Image& image, const EncoderConfig& c) {
  if (image.height != c.height || image.width != c.width || image.channels != c.channels)
    throw ShapeError("patchify: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     "x" + std::to_string(image.channels) + ", encoder expects " + std::to_string(c.height) +
                     "x" + std::to_string(c.width) + "x" + std::to_string(c.channels));
  if (image.height % c.patch || image.width % c.patch)
    throw ShapeError("patchify: image size not divisible by patch size");
  const int p = c.patch, rows = image.height / p, cols = image.width / p, ch = image.channels;
  Matrix<T> out(static_cast<std::size_t>(rows) * cols, static_cast<std::size_t>(p) * p * ch);
  for (int r = 0; r < rows; ++r)
    for (int cc = 0; cc < cols; ++cc) {
      auto dst = out.row(static_cast<std::size_t>(r) * cols + cc);
      std::size_t k = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int q = 0; q < ch; ++q) dst[k++] = static_cast<T>(image.at(r * p + dy, cc * p + dx, q));
    }
  return out;
}

// (1 + N_p) × D sequence: cls + pos[0], then projected patches + pos[1..].
template <typename T>
Matrix<T> embed_sequence(const Matrix<T>& patches_in, const EncoderParams<T>& params) {
  const auto proj = matmul(patches_in, params.patch_w);
  const std::size_t d = params.config.dim;
  Matrix<T> x(1 + proj.rows(), d);
  for (std::size_t j = 0; j < d; ++j) x(0, j) = params.cls(0, j) + params.pos(0, j);
  for (std::size_t i = 0; i < proj.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) x(1 + i, j) = proj(i, j) + params.patch_b(0, j) + params.pos(1 + i, j);
  return x;
}

template <typename T>
TokenSequence<T> split_sequence(const Matrix<T>& x, const EncoderConfig& c) {
  TokenSequence<T> ts;
  ts.rows = c.grid_rows();
  ts.cols = c.grid_cols();
  ts.patch = c.patch;
  ts.cls = Matrix<T>(1, x.cols());
  std::copy_n(x.row(0).begin(), x.cols(), ts.cls.row(0).begin());
  ts.patches = Matrix<T>(x.rows() - 1, x.cols());
  std::copy(x.data() + x.cols(), x.data() + x.size(), ts.patches.data());
  return ts;
}

}  // namespace

template <typename T>
TokenSequence<T> patchify(const Image& image, const EncoderParams<T>& params) {
  return split_sequence(embed_sequence(extract_patches<T>(image, params.config), params), params.config);
}

// ---------------------------------------------------------------------------
// Attention core

namespace {

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  auto y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

// mask == nullptr means every key is visible.
template <typename T>
Matrix<T> attend(const Matrix<T>& queries, const Matrix<T>& tokens, const VisibilityMask* mask,
                 const AttentionWeights<T>& w, AttentionCache<T>& cache) {
  const std::size_t d = w.wq.rows();
  if (queries.cols() != d || tokens.cols() != d) throw ShapeError("attention: input width differs from D");
  if (w.heads < 1 || d % static_cast<std::size_t>(w.heads)) throw ShapeError("attention: D not divisible by heads");
  const std::size_t lq = queries.rows(), lk = tokens.rows();
  if (mask) {
    if (mask->regions() != lq || mask->tokens() != lk) throw ShapeError("attention: mask shape mismatch");
    mask->validate();
  }
  const std::size_t heads = static_cast<std::size_t>(w.heads), dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  cache.queries_in = queries;
  cache.tokens_in = tokens;
  cache.q = linear(queries, w.wq, w.bq);
  cache.k = linear(tokens, w.wk, w.bk);
  cache.v = linear(tokens, w.wv, w.bv);
  cache.probs.assign(heads, Matrix<T>(lq, lk));
  cache.concat = Matrix<T>(lq, d);

  std::vector<T> scores(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    auto& prob = cache.probs[h];
    for (std::size_t i = 0; i < lq; ++i) {
      const T* qi = cache.q.data() + i * d + off;
      T hi = std::numeric_limits<T>::lowest();
      for (std::size_t j = 0; j < lk; ++j) {
        const T* kj = cache.k.data() + j * d + off;
        T acc = 0;
        for (std::size_t c = 0; c < dk; ++c) acc += qi[c] * kj[c];
        T s = acc * inv_sqrt;
        if (mask) s += mask->value<T>(i, j);
        scores[j] = s;
        if ((!mask || mask->visible(i, j)) && s > hi) hi = s;
      }
      T sum = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        const bool vis = !mask || mask->visible(i, j);
        const T e = vis ? std::exp(scores[j] - hi) : T(0);
        prob(i, j) = e;
        sum += e;
      }
      for (std::size_t j = 0; j < lk; ++j) prob(i, j) /= sum;
      T* oi = cache.concat.data() + i * d + off;
      for (std::size_t j = 0; j < lk; ++j) {
        const T pij = prob(i, j);
        if (pij == T(0)) continue;
        const T* vj = cache.v.data() + j * d + off;
        for (std::size_t c = 0; c < dk; ++c) oi[c] += pij * vj[c];
      }
    }
  }
  return linear(cache.concat, w.wo, w.bo);
}

template <typename T>
void attend_backward(const AttentionCache<T>& cache, const Matrix<T>& d_out, const AttentionWeights<T>& w,
                     AttentionWeights<T>& g, Matrix<T>& d_queries, Matrix<T>& d_tokens) {
  const std::size_t d = w.wq.rows(), lq = cache.q.rows(), lk = cache.k.rows();
  const std::size_t heads = static_cast<std::size_t>(w.heads), dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  matmul_tn_acc(cache.concat, d_out, g.wo);
  accumulate_col_sums(d_out, g.bo);
  const auto d_concat = matmul_nt(d_out, w.wo);

  Matrix<T> dq(lq, d), dk_(lk, d), dv(lk, d);
  std::vector<T> dp(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    const auto& prob = cache.probs[h];
    for (std::size_t i = 0; i < lq; ++i) {
      const T* doi = d_concat.data() + i * d + off;
      T row_dot = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        const T pij = prob(i, j);
        if (pij == T(0)) {
          dp[j] = 0;
          continue;
        }
        const T* vj = cache.v.data() + j * d + off;
        T acc = 0;
        for (std::size_t c = 0; c < dk; ++c) acc += doi[c] * vj[c];
        dp[j] = acc;
        row_dot += pij * acc;
        T* dvj = dv.data() + j * d + off;
        for (std::size_t c = 0; c < dk; ++c) dvj[c] += pij * doi[c];
      }
      const T* qi = cache.q.data() + i * d + off;
      T* dqi = dq.data() + i * d + off;
      for (std::size_t j = 0; j < lk; ++j) {
        const T pij = prob(i, j);
        if (pij == T(0)) continue;
        const T ds = pij * (dp[j] - row_dot) * inv_sqrt;
        const T* kj = cache.k.data() + j * d + off;
        T* dkj = dk_.data() + j * d + off;
        for (std::size_t c = 0; c < dk; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
  matmul_tn_acc(cache.queries_in, dq, g.wq);
  accumulate_col_sums(dq, g.bq);
  matmul_tn_acc(cache.tokens_in, dk_, g.wk);
  accumulate_col_sums(dk_, g.bk);
  matmul_tn_acc(cache.tokens_in, dv, g.wv);
  accumulate_col_sums(dv, g.bv);
  d_queries += matmul_nt(dq, w.wq);
  d_tokens += matmul_nt(dk_, w.wk);
  d_tokens += matmul_nt(dv, w.wv);
}

}  // namespace

template <typename T>
Matrix<T> region_attention(const Matrix<T>& queries, const Matrix<T>& tokens, const VisibilityMask& mask,
                           const AttentionWeights<T>& weights, AttentionCache<T>* cache) {
  AttentionCache<T> local;
  return attend(queries, tokens, &mask, weights, cache ? *cache : local);
}

template <typename T>
void region_attention_backward(const AttentionCache<T>& cache, const Matrix<T>& d_out, const VisibilityMask&,
                               const AttentionWeights<T>& weights, AttentionWeights<T>& grads,
                               Matrix<T>& d_queries, Matrix<T>& d_tokens) {
  // Masked positions carry zero probability, so the cached probabilities
  // already encode the mask.
  attend_backward(cache, d_out, weights, grads, d_queries, d_tokens);
}

template <typename T>
RegionBatchTensor<T> region_attention_batched(const RegionBatchTensor<T>& queries,
                                              const std::vector<Matrix<T>>& tokens,
                                              const std::vector<VisibilityMask>& masks,
                                              const AttentionWeights<T>& weights) {
  if (tokens.size() != queries.batch || masks.size() != queries.batch)
    throw ShapeError("region_attention_batched: batch size mismatch");
  RegionBatchTensor<T> out(queries.regions, queries.batch, queries.dim);
  for (std::size_t b = 0; b < queries.batch; ++b) {
    Matrix<T> q(queries.regions, queries.dim);
    for (std::size_t l = 0; l < queries.regions; ++l)
      for (std::size_t c = 0; c < queries.dim; ++c) q(l, c) = queries.at(l, b, c);
    const auto r = region_attention(q, tokens[b], masks[b], weights);
    for (std::size_t l = 0; l < queries.regions; ++l)
      for (std::size_t c = 0; c < queries.dim; ++c) out.at(l, b, c) = r(l, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transformer blocks

namespace {

template <typename T>
constexpr T kLayerNormEps = T(1e-5);

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, LayerNormCache<T>& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix<T> y(n, d);
  cache.xhat = Matrix<T>(n, d);
  cache.inv_std.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + kLayerNormEps<T>);
    cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (x(i, j) - mean) * inv;
      cache.xhat(i, j) = xh;
      y(i, j) = xh * g(0, j) + b(0, j);
    }
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache, const Matrix<T>& dy, const Matrix<T>& g,
                              Matrix<T>& dg, Matrix<T>& db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_dxh = 0, mean_dxh_xh = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dg(0, j) += dy(i, j) * cache.xhat(i, j);
      db(0, j) += dy(i, j);
      dxh[j] = dy(i, j) * g(0, j);
      mean_dxh += dxh[j];
      mean_dxh_xh += dxh[j] * cache.xhat(i, j);
    }
    mean_dxh /= static_cast<T>(d);
    mean_dxh_xh /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = cache.inv_std[i] * (dxh[j] - mean_dxh - cache.xhat(i, j) * mean_dxh_xh);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

// Pre-norm block. tokens == nullptr: self-attention over x's own normed rows.
template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const Matrix<T>* tokens, const VisibilityMask* mask,
                        const LayerParams<T>& lp, BlockCache<T>& c) {
  c.x_in = x;
  c.h1 = layer_norm(x, lp.ln1_g, lp.ln1_b, c.ln1);
  auto o = attend(c.h1, tokens ? *tokens : c.h1, mask, lp.attn, c.attn);
  c.x_mid = x;
  c.x_mid += o;
  c.h2 = layer_norm(c.x_mid, lp.ln2_g, lp.ln2_b, c.ln2);
  c.pre_act = linear(c.h2, lp.w1, lp.b1);
  c.act = c.pre_act;
  for (auto& v : c.act.storage()) v = gelu(v);
  auto out = linear(c.act, lp.w2, lp.b2);
  out += c.x_mid;
  return out;
}

// Returns ∂/∂x_in. For cross-attention blocks the key/value-token gradient is
// added into *d_tokens; extra_dh1 is an additional gradient on LN1's output.
template <typename T>
Matrix<T> block_backward(const BlockCache<T>& c, const Matrix<T>& dx_out, bool self_attention,
                         const LayerParams<T>& lp, LayerParams<T>& g, Matrix<T>* d_tokens,
                         const Matrix<T>* extra_dh1) {
  Matrix<T> dx_mid = dx_out;
  matmul_tn_acc(c.act, dx_out, g.w2);
  accumulate_col_sums(dx_out, g.b2);
  auto dpre = matmul_nt(dx_out, lp.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_grad(c.pre_act.data()[i]);
  matmul_tn_acc(c.h2, dpre, g.w1);
  accumulate_col_sums(dpre, g.b1);
  const auto dh2 = matmul_nt(dpre, lp.w1);
  dx_mid += layer_norm_backward(c.ln2, dh2, lp.ln2_g, g.ln2_g, g.ln2_b);

  Matrix<T> dh1(c.h1.rows(), c.h1.cols());
  if (self_attention) {
    Matrix<T> dtok(c.h1.rows(), c.h1.cols());
    attend_backward(c.attn, dx_mid, lp.attn, g.attn, dh1, dtok);
    dh1 += dtok;
  } else {
    attend_backward(c.attn, dx_mid, lp.attn, g.attn, dh1, *d_tokens);
  }
  if (extra_dh1) dh1 += *extra_dh1;
  auto dx_in = dx_mid;
  dx_in += layer_norm_backward(c.ln1, dh1, lp.ln1_g, g.ln1_g, g.ln1_b);
  return dx_in;
}

template <typename T>
Matrix<T> patch_rows(const Matrix<T>& x) {
  Matrix<T> out(x.rows() - 1, x.cols());
  std::copy(x.data() + x.cols(), x.data() + x.size(), out.data());
  return out;
}

}  // namespace

template <typename T>
EncodeOutput<T> encode(const Image& image, const std::vector<Region>& regions, const EncoderParams<T>& params,
                       EncodeCache<T>* cache) {
  const auto& cfg = params.config;
  cfg.validate();
  for (const auto& r : regions) validate_region(r, image.width, image.height);
  EncodeCache<T> local;
  auto& c = cache ? *cache : local;
  c.mask = build_visibility_mask(regions, cfg.grid_rows(), cfg.grid_cols(), cfg.patch);
  c.patches_in = extract_patches<T>(image, cfg);
  auto x = embed_sequence(c.patches_in, params);

  const int first_region = cfg.layers - cfg.region_layers;
  const std::size_t np = cfg.num_patches(), d = cfg.dim, nreg = regions.size();
  c.patch_blocks.assign(cfg.layers, {});
  c.region_blocks.assign(cfg.region_layers, {});
  Matrix<T> z;
  for (int l = 0; l < cfg.layers; ++l) {
    if (l == first_region) {
      z = Matrix<T>(nreg, d);
      for (std::size_t r = 0; r < nreg; ++r) {
        const T inv = T(1) / static_cast<T>(c.mask.visible_count(r));
        for (std::size_t j = 0; j < np; ++j)
          if (c.mask.visible(r, j))
            for (std::size_t q = 0; q < d; ++q) z(r, q) += x(1 + j, q);
        for (std::size_t q = 0; q < d; ++q) z(r, q) *= inv;
      }
    }
    auto& pb = c.patch_blocks[l];
    auto x_next = block_forward<T>(x, nullptr, nullptr, params.layers[l], pb);
    if (l >= first_region) {
      const auto tokens = patch_rows(pb.h1);
      z = block_forward<T>(z, &tokens, &c.mask, params.layers[l], c.region_blocks[l - first_region]);
    }
    x = std::move(x_next);
  }
  c.final_tokens = x;
  c.final_regions = z;

  EncodeOutput<T> out;
  out.tokens = split_sequence(layer_norm(x, params.ln_post_g, params.ln_post_b, c.post_tokens), cfg);
  out.region_embeddings = layer_norm(z, params.ln_post_g, params.ln_post_b, c.post_regions);
  return out;
}

template <typename T>
void encode_backward(const EncodeCache<T>& c, const Matrix<T>& d_regions, const EncoderParams<T>& params,
                     EncoderParams<T>& g) {
  const auto& cfg = params.config;
  if (!(g.config == cfg)) throw ShapeError("encode_backward: gradient config differs");
  if (d_regions.rows() != c.final_regions.rows() || d_regions.cols() != c.final_regions.cols())
    throw ShapeError("encode_backward: gradient shape differs from the region embeddings");
  const int first_region = cfg.layers - cfg.region_layers;
  const std::size_t np = cfg.num_patches(), d = cfg.dim;

  auto dz = layer_norm_backward(c.post_regions, d_regions, params.ln_post_g, g.ln_post_g, g.ln_post_b);
  Matrix<T> dx(1 + np, d);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    Matrix<T> extra;
    if (l >= first_region) {
      Matrix<T> dtok(np, d);
      dz = block_backward(c.region_blocks[l - first_region], dz, false, params.layers[l], g.layers[l], &dtok,
                          static_cast<const Matrix<T>*>(nullptr));
      extra = Matrix<T>(1 + np, d);
      std::copy(dtok.data(), dtok.data() + dtok.size(), extra.data() + d);
    }
    dx = block_backward(c.patch_blocks[l], dx, true, params.layers[l], g.layers[l],
                        static_cast<Matrix<T>*>(nullptr), extra.empty() ? nullptr : &extra);
    if (l == first_region) {
      for (std::size_t r = 0; r < dz.rows(); ++r) {
        const T inv = T(1) / static_cast<T>(c.mask.visible_count(r));
        for (std::size_t j = 0; j < np; ++j)
          if (c.mask.visible(r, j))
            for (std::size_t q = 0; q < d; ++q) dx(1 + j, q) += dz(r, q) * inv;
      }
    }
  }
  g.pos += dx;
  for (std::size_t q = 0; q < d; ++q) g.cls(0, q) += dx(0, q);
  Matrix<T> dtok(np, d);
  std::copy(dx.data() + d, dx.data() + dx.size(), dtok.data());
  matmul_tn_acc(c.patches_in, dtok, g.patch_w);
  accumulate_col_sums(dtok, g.patch_b);
}

#define RICE_INSTANTIATE(T)                                                                                 \
  template struct EncoderParams<T>;                                                                         \
  template TokenSequence<T> patchify<T>(const Image&, const EncoderParams<T>&);                             \
  template Matrix<T> region_attention<T>(const Matrix<T>&, const Matrix<T>&, const VisibilityMask&,         \
                                         const AttentionWeights<T>&, AttentionCache<T>*);                   \
  template void region_attention_backward<T>(const AttentionCache<T>&, const Matrix<T>&,                    \
                                             const VisibilityMask&, const AttentionWeights<T>&,             \
                                             AttentionWeights<T>&, Matrix<T>&, Matrix<T>&);                 \
  template RegionBatchTensor<T> region_attention_batched<T>(const RegionBatchTensor<T>&,                    \
                                                            const std::vector<Matrix<T>>&,                  \
                                                            const std::vector<VisibilityMask>&,             \
                                                            const AttentionWeights<T>&);                    \
  template EncodeOutput<T> encode<T>(const Image&, const std::vector<Region>&, const EncoderParams<T>&,    \
                                     EncodeCache<T>*);                                                      \
  template void encode_backward<T>(const EncodeCache<T>&, const Matrix<T>&, const EncoderParams<T>&,        \
                                   EncoderParams<T>&);

RICE_INSTANTIATE(float)
RICE_INSTANTIATE(double)

#undef RICE_INSTANTIATE

}  // namespace rice
