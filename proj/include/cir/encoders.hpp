#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <utility>

#include "cir/dataset.hpp"
#include "cir/tensor.hpp"

namespace cir {

// ---------------------------------------------------------------------------
// Parameter bundles
//
// Every bundle exposes `visit(self, f)` calling f(name, Matrix&) over its
// tensors in a fixed order, and a `trainable` map keyed by the same names.
// Optimizers, checkpoints and hashes are written against that surface only.
// ---------------------------------------------------------------------------

template <typename Bundle>
Bundle zeros_like(const Bundle& b) {
  Bundle out = b;
  Bundle::visit(out, [](const std::string&, auto& m) { m.setZero(); });
  return out;
}

template <typename Bundle>
void add_into(Bundle& acc, const Bundle& other) {
  std::vector<const void*> src;
  Bundle::visit(other, [&](const std::string&, const auto& m) { src.push_back(&m); });
  std::size_t i = 0;
  Bundle::visit(acc, [&](const std::string&, auto& m) {
    m += *static_cast<const std::remove_reference_t<decltype(m)>*>(src[i++]);
  });
}

/// Hash of every tensor whose trainable flag equals `trainable`.
template <typename Bundle>
std::uint64_t bundle_hash(const Bundle& b, bool trainable) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  Bundle::visit(b, [&](const std::string& name, const auto& m) {
    if (b.trainable.at(name) == trainable) {
      h = fnv1a64(name.data(), name.size(), h);
      h = tensor_hash(m, h);
    }
  });
  return h;
}

template <typename Bundle>
std::map<std::string, bool> all_trainable(const Bundle& b, bool value) {
  std::map<std::string, bool> out;
  Bundle::visit(b, [&](const std::string& name, const auto&) { out[name] = value; });
  return out;
}

// ---------------------------------------------------------------------------
// Layer norm over a single row.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  RowVector<T> xhat;
  T rstd{};
};

template <typename T>
RowVector<T> layer_norm(const RowVector<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                        LayerNormCache<T>& cache) {
  const T mean = x.mean();
  const RowVector<T> centered = x.array() - mean;
  const T var = centered.squaredNorm() / T(x.size());
  cache.rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
  cache.xhat = centered * cache.rstd;
  return cache.xhat.cwiseProduct(gain.row(0)) + bias.row(0);
}

template <typename T>
RowVector<T> layer_norm_backward(const RowVector<T>& dy, const LayerNormCache<T>& cache,
                                 const Matrix<T>& gain, Matrix<T>* dgain, Matrix<T>* dbias) {
  if (dgain) dgain->row(0) += dy.cwiseProduct(cache.xhat);
  if (dbias) dbias->row(0) += dy;
  const RowVector<T> dxhat = dy.cwiseProduct(gain.row(0));
  const T n = T(dy.size());
  const T mean_dxhat = dxhat.sum() / n;
  const T mean_dxhat_xhat = dxhat.dot(cache.xhat) / n;
  return cache.rstd * (dxhat.array() - mean_dxhat - cache.xhat.array() * mean_dxhat_xhat).matrix();
}

// tanh-approximated GELU.
template <typename T>
T gelu(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  const T inner = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

/// Gradient of u = h / |h| pulled back to h.
template <typename T>
Vector<T> normalize_backward(const Vector<T>& h, const Vector<T>& du) {
  const T norm = h.norm();
  const Vector<T> u = h / norm;
  return (du - u * u.dot(du)) / norm;
}

// ---------------------------------------------------------------------------
// Pre-norm self-attention block, evaluated at sequence position 0 only.
//
// out = h + MLP(LN2(h)),  h = x0 + softmax(q0 K^T / sqrt(d)) V W_o
// with q0 = LN1(x0) W_q, K = LN1(X) W_k, V = LN1(X) W_v. The rows of X are
// the real (non-pad) positions, so masked positions get attention weight 0
// by construction.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionBlock {
  Matrix<T> ln1_gain, ln1_bias;
  Matrix<T> w_q, w_k, w_v, w_o;
  Matrix<T> ln2_gain, ln2_bias;
  Matrix<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // empty when the block has no MLP

  bool has_mlp() const { return mlp_w1.size() > 0; }
  Eigen::Index dim() const { return w_q.rows(); }

  static AttentionBlock init(Eigen::Index d, bool mlp, SeededRng& rng) {
    AttentionBlock b;
    const double s = 1.0 / std::sqrt(double(d));
    b.ln1_gain = Matrix<T>::Ones(1, d);
    b.ln1_bias = Matrix<T>::Zero(1, d);
    b.w_q = gaussian_matrix<T>(d, d, rng, s);
    b.w_k = gaussian_matrix<T>(d, d, rng, s);
    b.w_v = gaussian_matrix<T>(d, d, rng, s);
    b.w_o = gaussian_matrix<T>(d, d, rng, s);
    if (mlp) {
      b.ln2_gain = Matrix<T>::Ones(1, d);
      b.ln2_bias = Matrix<T>::Zero(1, d);
      b.mlp_w1 = gaussian_matrix<T>(d, 4 * d, rng, s);
      b.mlp_b1 = Matrix<T>::Zero(1, 4 * d);
      b.mlp_w2 = gaussian_matrix<T>(4 * d, d, rng, 1.0 / std::sqrt(4.0 * double(d)));
      b.mlp_b2 = Matrix<T>::Zero(1, d);
    }
    return b;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", self.ln1_gain);
    f(prefix + "ln1_bias", self.ln1_bias);
    f(prefix + "w_q", self.w_q);
    f(prefix + "w_k", self.w_k);
    f(prefix + "w_v", self.w_v);
    f(prefix + "w_o", self.w_o);
    if (self.has_mlp()) {
      f(prefix + "ln2_gain", self.ln2_gain);
      f(prefix + "ln2_bias", self.ln2_bias);
      f(prefix + "mlp_w1", self.mlp_w1);
      f(prefix + "mlp_b1", self.mlp_b1);
      f(prefix + "mlp_w2", self.mlp_w2);
      f(prefix + "mlp_b2", self.mlp_b2);
    }
  }
};

template <typename T>
struct BlockCache {
  std::vector<LayerNormCache<T>> ln1;
  Matrix<T> y;  // LN1(X)
  RowVector<T> q;
  Matrix<T> k, v;
  RowVector<T> attn, ctx, h;
  LayerNormCache<T> ln2;
  RowVector<T> z, u;
};

template <typename T>
RowVector<T> block_forward0(const AttentionBlock<T>& b, const Matrix<T>& x, BlockCache<T>& c) {
  const Eigen::Index n = x.rows();
  const T scale = T(1) / std::sqrt(T(b.dim()));
  c.ln1.resize(static_cast<std::size_t>(n));
  c.y.resize(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    c.y.row(i) = layer_norm<T>(x.row(i), b.ln1_gain, b.ln1_bias, c.ln1[static_cast<std::size_t>(i)]);
  c.q = c.y.row(0) * b.w_q;
  c.k = c.y * b.w_k;
  c.v = c.y * b.w_v;
  const RowVector<T> logits = (c.k * c.q.transpose()).transpose() * scale;
  const T peak = logits.maxCoeff();
  c.attn = (logits.array() - peak).exp().matrix();
  c.attn /= c.attn.sum();
  c.ctx = c.attn * c.v;
  c.h = x.row(0) + c.ctx * b.w_o;
  if (!b.has_mlp()) return c.h;
  c.z = layer_norm<T>(c.h, b.ln2_gain, b.ln2_bias, c.ln2);
  c.u = c.z * b.mlp_w1 + b.mlp_b1;
  const RowVector<T> g = c.u.unaryExpr([](T v) { return gelu(v); });
  return c.h + g * b.mlp_w2 + b.mlp_b2;
}

/// Returns dL/dX. Parameter gradients accumulate into `grads` when given.
template <typename T>
Matrix<T> block_backward0(const AttentionBlock<T>& b, const Matrix<T>& x, const BlockCache<T>& c,
                          const RowVector<T>& dout, AttentionBlock<T>* grads) {
  const Eigen::Index n = x.rows();
  const T scale = T(1) / std::sqrt(T(b.dim()));
  RowVector<T> dh = dout;
  if (b.has_mlp()) {
    const RowVector<T> g = c.u.unaryExpr([](T v) { return gelu(v); });
    if (grads) {
      grads->mlp_w2 += g.transpose() * dout;
      grads->mlp_b2.row(0) += dout;
    }
    const RowVector<T> dg = dout * b.mlp_w2.transpose();
    const RowVector<T> du = dg.cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
    if (grads) {
      grads->mlp_w1 += c.z.transpose() * du;
      grads->mlp_b1.row(0) += du;
    }
    const RowVector<T> dz = du * b.mlp_w1.transpose();
    dh += layer_norm_backward<T>(dz, c.ln2, b.ln2_gain, grads ? &grads->ln2_gain : nullptr,
                                 grads ? &grads->ln2_bias : nullptr);
  }

  Matrix<T> dx = Matrix<T>::Zero(n, x.cols());
  dx.row(0) += dh;
  if (grads) grads->w_o += c.ctx.transpose() * dh;
  const RowVector<T> dctx = dh * b.w_o.transpose();
  const RowVector<T> dattn = (c.v * dctx.transpose()).transpose();
  const Matrix<T> dv = c.attn.transpose() * dctx;
  const RowVector<T> dlogits =
      c.attn.cwiseProduct((dattn.array() - c.attn.dot(dattn)).matrix()) * scale;
  const RowVector<T> dq = dlogits * c.k;
  const Matrix<T> dk = dlogits.transpose() * c.q;
  if (grads) {
    grads->w_q += c.y.row(0).transpose() * dq;
    grads->w_k += c.y.transpose() * dk;
    grads->w_v += c.y.transpose() * dv;
  }
  Matrix<T> dy = dk * b.w_k.transpose() + dv * b.w_v.transpose();
  dy.row(0) += dq * b.w_q.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    dx.row(i) += layer_norm_backward<T>(dy.row(i), c.ln1[static_cast<std::size_t>(i)], b.ln1_gain,
                                        grads ? &grads->ln1_gain : nullptr,
                                        grads ? &grads->ln1_bias : nullptr);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Vision stub: frozen. Identity mode normalizes the raw vector; linear mode
// projects then normalizes. `patch_proj` synthesizes a P x d_v patch grid
// from the normalized raw vector for the fusion head.
// ---------------------------------------------------------------------------

template <typename T>
struct VisionStub {
  Matrix<T> weight;      // d_in x d_img; empty in identity mode
  Matrix<T> patch_proj;  // d_in x (P * d_v)
  Eigen::Index patches = 0;
  std::map<std::string, bool> trainable;

  bool identity() const { return weight.size() == 0; }
  Eigen::Index input_dim() const { return patch_proj.rows(); }
  Eigen::Index output_dim() const { return identity() ? input_dim() : weight.cols(); }
  Eigen::Index patch_dim() const { return patches ? patch_proj.cols() / patches : 0; }

  static VisionStub init(Eigen::Index d_in, Eigen::Index d_img, bool identity, Eigen::Index patches,
                         Eigen::Index d_v, SeededRng& rng) {
    VisionStub s;
    require(!identity || d_in == d_img, ErrorCode::DimMismatch,
            "identity vision stub needs d_in == d_img");
    if (!identity) s.weight = gaussian_matrix<T>(d_in, d_img, rng, 1.0 / std::sqrt(double(d_in)));
    s.patches = patches;
    s.patch_proj = gaussian_matrix<T>(d_in, patches * d_v, rng, 1.0);
    s.trainable = all_trainable(s, false);
    return s;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    if (!self.identity()) f(std::string("vision.weight"), self.weight);
    f(std::string("vision.patch_proj"), self.patch_proj);
  }
};

template <typename T, typename Derived>
Vector<T> vision_encode(const VisionStub<T>& stub, const Eigen::MatrixBase<Derived>& raw) {
  require(raw.size() == stub.input_dim(), ErrorCode::DimMismatch,
          "vision input dim " + std::to_string(raw.size()) + " vs " +
              std::to_string(stub.input_dim()));
  const Vector<T> x = raw.template cast<T>();
  if (stub.identity()) return l2_normalize(x);
  return l2_normalize(Vector<T>(stub.weight.transpose() * x));
}

template <typename T, typename Derived>
Matrix<T> vision_patches(const VisionStub<T>& stub, const Eigen::MatrixBase<Derived>& raw) {
  require(raw.size() == stub.input_dim(), ErrorCode::DimMismatch, "vision input dim mismatch");
  const Vector<T> unit = l2_normalize(Vector<T>(raw.template cast<T>()));
  const RowVector<T> flat = unit.transpose() * stub.patch_proj;
  return flat.template reshaped<Eigen::RowMajor>(stub.patches, stub.patch_dim());
}

// ---------------------------------------------------------------------------
// Text tower: token + positional embedding, one pre-norm block with MLP, CLS
// pooling at position 0, l2 normalization.
// ---------------------------------------------------------------------------

struct TextTowerConfig {
  std::int32_t vocab_size = 50;
  std::size_t max_len = kDefaultMaxLen;
  Eigen::Index d_model = 64;
};

template <typename T>
struct TextTowerParams {
  Matrix<T> token_table;  // vocab x d
  Matrix<T> positional;   // max_len x d
  AttentionBlock<T> block;
  std::map<std::string, bool> trainable;

  Eigen::Index dim() const { return token_table.cols(); }
  std::int32_t vocab_size() const { return static_cast<std::int32_t>(token_table.rows()); }

  /// Retrieval-DPO trainable set: the block only; token table and
  /// positionals frozen.
  static TextTowerParams init(const TextTowerConfig& cfg, SeededRng& rng) {
    TextTowerParams p;
    p.token_table = gaussian_matrix<T>(cfg.vocab_size, cfg.d_model, rng, 1.0);
    p.positional = gaussian_matrix<T>(static_cast<Eigen::Index>(cfg.max_len), cfg.d_model, rng, 0.1);
    p.block = AttentionBlock<T>::init(cfg.d_model, /*mlp=*/true, rng);
    p.trainable = all_trainable(p, true);
    p.trainable["text.token_table"] = false;
    p.trainable["text.positional"] = false;
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("text.token_table"), self.token_table);
    f(std::string("text.positional"), self.positional);
    AttentionBlock<T>::visit(self.block, "text.block.", f);
  }
};

template <typename T>
struct TextCache {
  std::vector<std::int32_t> tokens;  // real tokens, in position order
  Matrix<T> x;
  BlockCache<T> block;
  Vector<T> h;  // pre-normalization output
};

inline void check_tokens(const TokenSeq& t, std::int32_t vocab) {
  require(!t.ids.empty() && t.pad_mask.size() == t.ids.size() && t.pad_mask[0],
          ErrorCode::InvalidArgument, "token sequence must start with a real token");
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    if (!t.pad_mask[i]) continue;
    require(t.ids[i] >= 0 && t.ids[i] < vocab, ErrorCode::TokenOutOfRange,
            "token " + std::to_string(t.ids[i]) + " outside vocab of " + std::to_string(vocab));
  }
}

template <typename T>
Vector<T> text_encode(const TextTowerParams<T>& p, const TokenSeq& t, TextCache<T>* cache = nullptr) {
  check_tokens(t, p.vocab_size());
  require(t.size() <= static_cast<std::size_t>(p.positional.rows()), ErrorCode::ShapeMismatch,
          "token sequence longer than positional table");
  TextCache<T> local;
  TextCache<T>& c = cache ? *cache : local;
  c.tokens.clear();
  std::vector<Eigen::Index> positions;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t.pad_mask[i]) continue;
    c.tokens.push_back(t.ids[i]);
    positions.push_back(static_cast<Eigen::Index>(i));
  }
  const auto n = static_cast<Eigen::Index>(c.tokens.size());
  c.x.resize(n, p.dim());
  for (Eigen::Index i = 0; i < n; ++i)
    c.x.row(i) = p.token_table.row(c.tokens[static_cast<std::size_t>(i)]) +
                 p.positional.row(positions[static_cast<std::size_t>(i)]);
  c.h = block_forward0(p.block, c.x, c.block).transpose();
  return l2_normalize(c.h);
}

/// Accumulates parameter gradients for dL/d(prompt) into `grads`. The tokens'
/// positions are recovered from the cache ordering (real tokens are packed).
template <typename T>
void text_backward(const TextTowerParams<T>& p, const TokenSeq& t, const TextCache<T>& c,
                   const Vector<T>& d_prompt, TextTowerParams<T>& grads) {
  const Vector<T> dh = normalize_backward(c.h, d_prompt);
  const Matrix<T> dx = block_backward0(p.block, c.x, c.block, RowVector<T>(dh.transpose()), &grads.block);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t.pad_mask[i]) continue;
    grads.token_table.row(t.ids[i]) += dx.row(row);
    grads.positional.row(static_cast<Eigen::Index>(i)) += dx.row(row);
    ++row;
  }
}

// ---------------------------------------------------------------------------
// Fusion head: M learnable queries cross-attend over the patch grid (no
// patch positions), get projected into the text width, are concatenated in
// front of the caption's token embeddings, and pass through a frozen block.
// The output is the hidden state of the first query row.
// ---------------------------------------------------------------------------

struct FusionConfig {
  std::int32_t vocab_size = 50;
  Eigen::Index queries = 32;
  Eigen::Index d_q = 32;
  Eigen::Index d_v = 64;
  Eigen::Index d_txt = 64;
  bool train_token_table = true;
  /// Also unfreeze the backbone block.
  bool widen_trainable = false;
};

template <typename T>
struct FusionParams {
  Matrix<T> queries;                  // M x d_q
  Matrix<T> cross_q, cross_k, cross_v, cross_o;  // d_q x d_q, d_v x d_q, d_v x d_q, d_q x d_q
  Matrix<T> projection;               // d_q x d_txt
  Matrix<T> token_table;              // vocab x d_txt
  AttentionBlock<T> backbone;         // frozen unless widened
  std::map<std::string, bool> trainable;

  Eigen::Index query_count() const { return queries.rows(); }
  Eigen::Index dim() const { return projection.cols(); }
  std::int32_t vocab_size() const { return static_cast<std::int32_t>(token_table.rows()); }

  static FusionParams init(const FusionConfig& cfg, SeededRng& rng) {
    FusionParams f;
    const double sq = 1.0 / std::sqrt(double(cfg.d_q));
    const double sv = 1.0 / std::sqrt(double(cfg.d_v));
    f.queries = gaussian_matrix<T>(cfg.queries, cfg.d_q, rng, 1.0);
    f.cross_q = gaussian_matrix<T>(cfg.d_q, cfg.d_q, rng, sq);
    f.cross_k = gaussian_matrix<T>(cfg.d_v, cfg.d_q, rng, sv);
    f.cross_v = gaussian_matrix<T>(cfg.d_v, cfg.d_q, rng, sv);
    f.cross_o = gaussian_matrix<T>(cfg.d_q, cfg.d_q, rng, sq);
    f.projection = gaussian_matrix<T>(cfg.d_q, cfg.d_txt, rng, sq);
    f.token_table = gaussian_matrix<T>(cfg.vocab_size, cfg.d_txt, rng, 1.0);
    f.backbone = AttentionBlock<T>::init(cfg.d_txt, /*mlp=*/false, rng);
    f.trainable = all_trainable(f, true);
    f.trainable["fusion.token_table"] = cfg.train_token_table;
    AttentionBlock<T>::visit(f.backbone, "fusion.backbone.",
                             [&](const std::string& name, auto&) {
                               f.trainable[name] = cfg.widen_trainable;
                             });
    return f;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("fusion.queries"), self.queries);
    f(std::string("fusion.cross_q"), self.cross_q);
    f(std::string("fusion.cross_k"), self.cross_k);
    f(std::string("fusion.cross_v"), self.cross_v);
    f(std::string("fusion.cross_o"), self.cross_o);
    f(std::string("fusion.projection"), self.projection);
    f(std::string("fusion.token_table"), self.token_table);
    AttentionBlock<T>::visit(self.backbone, "fusion.backbone.", f);
  }
};

template <typename T>
struct FusionCache {
  Matrix<T> patches;
  Matrix<T> q, k, v, attn, ctx, fused;
  Matrix<T> x;  // backbone input
  BlockCache<T> block;
  Vector<T> h;
};

template <typename T>
Vector<T> fuse(const FusionParams<T>& f, const Matrix<T>& patches, const TokenSeq& t,
               FusionCache<T>* cache = nullptr) {
  require(patches.rows() >= 1, ErrorCode::InvalidArgument, "fuse needs at least one patch");
  require(patches.cols() == f.cross_k.rows(), ErrorCode::DimMismatch,
          "patch dim " + std::to_string(patches.cols()) + " vs " + std::to_string(f.cross_k.rows()));
  check_tokens(t, f.vocab_size());
  FusionCache<T> local;
  FusionCache<T>& c = cache ? *cache : local;
  const T scale = T(1) / std::sqrt(T(f.cross_q.cols()));
  c.patches = patches;
  c.q = f.queries * f.cross_q;
  c.k = patches * f.cross_k;
  c.v = patches * f.cross_v;
  Matrix<T> logits = c.q * c.k.transpose() * scale;
  c.attn.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T peak = logits.row(i).maxCoeff();
    RowVector<T> e = (logits.row(i).array() - peak).exp().matrix();
    c.attn.row(i) = e / e.sum();
  }
  c.ctx = c.attn * c.v;
  c.fused = f.queries + c.ctx * f.cross_o;

  const Eigen::Index m = f.query_count();
  const auto real = static_cast<Eigen::Index>(t.real_count());
  c.x.resize(m + real, f.dim());
  c.x.topRows(m) = c.fused * f.projection;
  Eigen::Index row = m;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.pad_mask[i]) c.x.row(row++) = f.token_table.row(t.ids[i]);
  c.h = block_forward0(f.backbone, c.x, c.block).transpose();
  return l2_normalize(c.h);
}

/// Accumulates gradients for dL/d(prompt). Backbone gradients are computed
/// only when the backbone is flagged trainable.
template <typename T>
void fuse_backward(const FusionParams<T>& f, const TokenSeq& t, const FusionCache<T>& c,
                   const Vector<T>& d_prompt, FusionParams<T>& grads) {
  const bool backbone_trains = f.trainable.at("fusion.backbone.w_q");
  const Vector<T> dh = normalize_backward(c.h, d_prompt);
  const Matrix<T> dx = block_backward0(f.backbone, c.x, c.block, RowVector<T>(dh.transpose()),
                                       backbone_trains ? &grads.backbone : nullptr);
  const Eigen::Index m = f.query_count();
  Eigen::Index row = m;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.pad_mask[i]) grads.token_table.row(t.ids[i]) += dx.row(row++);

  const Matrix<T> dproj_in = dx.topRows(m);
  grads.projection += c.fused.transpose() * dproj_in;
  const Matrix<T> dfused = dproj_in * f.projection.transpose();
  grads.queries += dfused;
  grads.cross_o += c.ctx.transpose() * dfused;
  const Matrix<T> dctx = dfused * f.cross_o.transpose();
  const Matrix<T> dattn = dctx * c.v.transpose();
  const Matrix<T> dv = c.attn.transpose() * dctx;
  const T scale = T(1) / std::sqrt(T(f.cross_q.cols()));
  Matrix<T> dlogits(c.attn.rows(), c.attn.cols());
  for (Eigen::Index i = 0; i < c.attn.rows(); ++i) {
    const T inner = c.attn.row(i).dot(dattn.row(i));
    dlogits.row(i) = c.attn.row(i).cwiseProduct((dattn.row(i).array() - inner).matrix()) * scale;
  }
  const Matrix<T> dq = dlogits * c.k;
  const Matrix<T> dk = dlogits.transpose() * c.q;
  grads.cross_q += f.queries.transpose() * dq;
  grads.queries += dq * f.cross_q.transpose();
  grads.cross_k += c.patches.transpose() * dk;
  grads.cross_v += c.patches.transpose() * dv;
}

}  // namespace cir
