#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/graph.hpp"
#include "fewshot/ops.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

constexpr std::int64_t kConvChannels = 64;
constexpr std::int64_t kNumBlocks = 4;
constexpr std::int64_t kMetricHidden = 64;

enum class ParamKind {
  kWeight,    // weight-decayed trainable
  kNoDecay,   // trainable, excluded from weight decay (bn gamma/beta)
  kBuffer,    // not trained (bn running stats)
};

// One conv block: 3x3 conv with 64 filters -> batchnorm -> relu -> 2x2 pool.
template <typename S>
struct ConvBlock {
  Tensor<S> conv_w;  // [64, Cin, 3, 3]
  Tensor<S> conv_b;  // [64]
  Tensor<S> gamma;   // [64]
  Tensor<S> beta;    // [64]
  BnState<S> bn;     // running mean/var [64]
};

// All trainable state: embedding phi (4 blocks), metric tau (two dense
// layers over pair features), and the auxiliary seen-class head.
template <typename S>
struct ModelParams {
  std::vector<ConvBlock<S>> blocks;
  Tensor<S> metric_hidden_w;  // [Dh, 3D]
  Tensor<S> metric_hidden_b;  // [Dh]
  Tensor<S> metric_out_w;     // [1, Dh]
  Tensor<S> metric_out_b;     // [1]
  Tensor<S> aux_w;            // [num_seen, D]
  Tensor<S> aux_b;            // [num_seen]

  std::int64_t feature_dim() const { return aux_w.rank() == 2 ? aux_w.dim(1) : 0; }
  std::int64_t num_seen_classes() const { return aux_w.rank() == 2 ? aux_w.dim(0) : 0; }

  // Fixed visitation order; the optimizer, checkpoints and binding all rely
  // on it being identical from run to run.
  template <typename Fn>
  void visit(Fn&& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "embed.block" + std::to_string(i + 1) + ".";
      fn(p + "conv.weight", blocks[i].conv_w, ParamKind::kWeight);
      fn(p + "conv.bias", blocks[i].conv_b, ParamKind::kWeight);
      fn(p + "bn.gamma", blocks[i].gamma, ParamKind::kNoDecay);
      fn(p + "bn.beta", blocks[i].beta, ParamKind::kNoDecay);
      fn(p + "bn.running_mean", blocks[i].bn.running_mean, ParamKind::kBuffer);
      fn(p + "bn.running_var", blocks[i].bn.running_var, ParamKind::kBuffer);
    }
    fn("metric.hidden.weight", metric_hidden_w, ParamKind::kWeight);
    fn("metric.hidden.bias", metric_hidden_b, ParamKind::kWeight);
    fn("metric.out.weight", metric_out_w, ParamKind::kWeight);
    fn("metric.out.bias", metric_out_b, ParamKind::kWeight);
    fn("aux.weight", aux_w, ParamKind::kWeight);
    fn("aux.bias", aux_b, ParamKind::kWeight);
  }

  bool all_finite() {
    bool ok = true;
    visit([&](const std::string&, Tensor<S>& t, ParamKind) { ok = ok && t.all_finite(); });
    return ok;
  }
};

namespace detail {

template <typename S>
void init_uniform_fanin(Tensor<S>& t, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = S(rng.uniform(-bound, bound));
}

}  // namespace detail

// Embedding dim for [3,H,W] inputs after four 2x2 pools.
inline std::int64_t embedding_dim(std::int64_t h, std::int64_t w) {
  return kConvChannels * (h / 16) * (w / 16);
}

// Fan-in uniform init for conv/linear weights, zero biases, bn gamma 1 /
// beta 0, running stats (0, 1).
template <typename S>
ModelParams<S> init_model(std::int64_t image_h, std::int64_t image_w,
                          std::int64_t num_seen_classes, std::uint64_t seed,
                          std::int64_t metric_hidden = kMetricHidden) {
  if (image_h < 16 || image_w < 16 || image_h % 16 != 0 || image_w % 16 != 0)
    throw ShapeError("embedding input H,W must be multiples of 16 and >= 16, got " +
                     std::to_string(image_h) + "x" + std::to_string(image_w));
  if (num_seen_classes < 1) throw ConfigError("init_model: need at least one seen class");
  Rng rng(derive_seed(seed, "init"));

  ModelParams<S> p;
  for (std::int64_t b = 0; b < kNumBlocks; ++b) {
    const std::int64_t cin = (b == 0) ? 3 : kConvChannels;
    ConvBlock<S> blk;
    blk.conv_w = Tensor<S>({kConvChannels, cin, 3, 3});
    detail::init_uniform_fanin(blk.conv_w, cin * 9, rng);
    blk.conv_b = Tensor<S>({kConvChannels});
    blk.gamma = Tensor<S>::full({kConvChannels}, S(1));
    blk.beta = Tensor<S>({kConvChannels});
    blk.bn = BnState<S>(kConvChannels);
    p.blocks.push_back(std::move(blk));
  }
  const std::int64_t d = embedding_dim(image_h, image_w);
  p.metric_hidden_w = Tensor<S>({metric_hidden, 3 * d});
  detail::init_uniform_fanin(p.metric_hidden_w, 3 * d, rng);
  p.metric_hidden_b = Tensor<S>({metric_hidden});
  p.metric_out_w = Tensor<S>({1, metric_hidden});
  detail::init_uniform_fanin(p.metric_out_w, metric_hidden, rng);
  p.metric_out_b = Tensor<S>({1});
  p.aux_w = Tensor<S>({num_seen_classes, d});
  detail::init_uniform_fanin(p.aux_w, d, rng);
  p.aux_b = Tensor<S>({num_seen_classes});
  return p;
}

// Graph handles over one model's trainable tensors for a single episode
// graph. `entries` parallels the sweep order the optimizer uses.
template <typename S>
struct BoundModel {
  struct Entry {
    std::string name;
    Var<S> var;
    Tensor<S>* param;
    ParamKind kind;
  };
  std::vector<Entry> entries;

  struct Block {
    Var<S> w, b, gamma, beta;
    BnState<S>* bn;
  };
  std::vector<Block> blocks;
  Var<S> metric_hidden_w, metric_hidden_b, metric_out_w, metric_out_b;
  Var<S> aux_w, aux_b;
};

template <typename S>
BoundModel<S> bind(Graph<S>& g, ModelParams<S>& p, bool trainable = true) {
  BoundModel<S> bm;
  p.visit([&](const std::string& name, Tensor<S>& t, ParamKind kind) {
    if (kind == ParamKind::kBuffer) return;  // running stats stay outside the graph
    Var<S> v = g.leaf(t, trainable);
    bm.entries.push_back({name, v, &t, kind});
  });
  // entries follow visit order: per block w, b, gamma, beta, then the heads.
  for (std::int64_t b = 0; b < std::int64_t(p.blocks.size()); ++b) {
    const std::size_t e = std::size_t(b) * 4;
    bm.blocks.push_back({bm.entries[e].var, bm.entries[e + 1].var, bm.entries[e + 2].var,
                         bm.entries[e + 3].var, &p.blocks[std::size_t(b)].bn});
  }
  const std::size_t h = bm.blocks.size() * 4;
  bm.metric_hidden_w = bm.entries[h].var;
  bm.metric_hidden_b = bm.entries[h + 1].var;
  bm.metric_out_w = bm.entries[h + 2].var;
  bm.metric_out_b = bm.entries[h + 3].var;
  bm.aux_w = bm.entries[h + 4].var;
  bm.aux_b = bm.entries[h + 5].var;
  return bm;
}

// Four conv blocks then flatten: [N,3,H,W] -> [N, 64*(H/16)*(W/16)].
template <typename S>
Var<S> embed(Graph<S>& g, const BoundModel<S>& bm, Var<S> images, BnMode mode) {
  const Tensor<S>& x = images.value();
  if (x.rank() != 4 || x.dim(1) != 3)
    throw ShapeError("embed: input must be [N,3,H,W], got " + shape_str(x.shape()));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0)
    throw ShapeError("embed: H,W must be multiples of 16 and >= 16, got " + shape_str(x.shape()));
  Var<S> cur = images;
  for (const auto& blk : bm.blocks) {
    cur = conv2d(cur, blk.w, blk.b, 1);
    cur = batch_norm2d(cur, blk.gamma, blk.beta, *blk.bn, mode);
    cur = relu(cur);
    cur = max_pool2d(cur);
  }
  const Shape& s = cur.value().shape();
  return reshape(cur, {s[0], s[1] * s[2] * s[3]});
}

// Class centroids O_k = (C/|M_train|) * sum of class-k support embeddings.
// Requires a balanced support set, where the coefficient equals 1/S_tr and
// the centroid is the per-class mean.
template <typename S>
Var<S> compute_centroids(Graph<S>& g, Var<S> features, const std::vector<std::int32_t>& labels,
                         std::int64_t num_classes) {
  const std::int64_t m = features.value().dim(0);
  if (m % num_classes != 0)
    throw ShapeError("compute_centroids: " + std::to_string(m) + " rows cannot balance " +
                     std::to_string(num_classes) + " classes");
  std::vector<std::int64_t> counts(std::size_t(num_classes), 0);
  for (auto l : labels) {
    if (l < 0 || std::int64_t(l) >= num_classes)
      throw ShapeError("compute_centroids: label out of range");
    ++counts[std::size_t(l)];
  }
  const std::int64_t s_tr = m / num_classes;
  for (std::int64_t k = 0; k < num_classes; ++k)
    if (counts[std::size_t(k)] != s_tr)
      throw ShapeError("compute_centroids: unbalanced support, class " + std::to_string(k) +
                       " has " + std::to_string(counts[std::size_t(k)]) + " of " +
                       std::to_string(s_tr) + " shots");
  const S coeff = S(num_classes) / S(m);
  return scale(segment_sum(features, labels, num_classes), coeff);
}

// Pairwise metric scores [Nq, C]: two dense layers with a ReLU over
// [q | o | (q-o)^2] features. Lower score means closer.
template <typename S>
Var<S> metric_scores(Graph<S>& g, const BoundModel<S>& bm, Var<S> queries, Var<S> centroids) {
  const std::int64_t nq = queries.value().dim(0);
  const std::int64_t c = centroids.value().dim(0);
  Var<S> pf = pair_features(queries, centroids);
  Var<S> hidden = relu(linear(pf, bm.metric_hidden_w, bm.metric_hidden_b));
  Var<S> score = linear(hidden, bm.metric_out_w, bm.metric_out_b);
  return reshape(score, {nq, c});
}

// Single-pair convenience form of the learned metric.
template <typename S>
Var<S> metric_score(Graph<S>& g, const BoundModel<S>& bm, Var<S> query, Var<S> centroid) {
  return reshape(metric_scores(g, bm, query, centroid), Shape{1});
}

// log p(y=k|X) = log_softmax over negated scores.
template <typename S>
Var<S> log_posteriors(Graph<S>& g, Var<S> scores) {
  return log_softmax(negate(scores));
}

// Plain-tensor posterior rows from a score matrix.
template <typename S>
Tensor<S> posterior_from_scores(const Tensor<S>& scores) {
  Tensor<S> neg(scores.shape());
  neg.vec() = -scores.vec();
  Tensor<S> lp = log_softmax_rows(neg);
  for (std::int64_t i = 0; i < lp.numel(); ++i) lp[i] = S(std::exp(double(lp[i])));
  return lp;
}

enum class DistanceKind { kEuclidean, kCosine };

// Fixed distance baselines: squared L2, or 1 - cosine similarity. Both plug
// into the posterior in place of the learned score.
template <typename S>
S fixed_distance(DistanceKind kind, const S* q, const S* o, std::int64_t d) {
  if (kind == DistanceKind::kEuclidean) {
    double acc = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = double(q[j]) - double(o[j]);
      acc += diff * diff;
    }
    return S(acc);
  }
  double dot = 0, nq = 0, no = 0;
  for (std::int64_t j = 0; j < d; ++j) {
    dot += double(q[j]) * double(o[j]);
    nq += double(q[j]) * double(q[j]);
    no += double(o[j]) * double(o[j]);
  }
  if (nq == 0.0 || no == 0.0)
    throw NumericError("cosine distance undefined on a zero vector");
  return S(1.0 - dot / (std::sqrt(nq) * std::sqrt(no)));
}

template <typename S>
S fixed_distance(DistanceKind kind, const Tensor<S>& q, const Tensor<S>& o) {
  if (q.numel() != o.numel())
    throw ShapeError("fixed_distance: dimension mismatch " + shape_str(q.shape()) + " vs " +
                     shape_str(o.shape()));
  return fixed_distance(kind, q.data(), o.data(), q.numel());
}

// Score matrix [Nq, C] under a fixed distance.
template <typename S>
Tensor<S> fixed_distance_scores(DistanceKind kind, const Tensor<S>& queries,
                                const Tensor<S>& centroids) {
  const std::int64_t nq = queries.dim(0), c = centroids.dim(0), d = queries.dim(1);
  if (centroids.dim(1) != d) throw ShapeError("fixed_distance_scores: dimension mismatch");
  Tensor<S> out({nq, c});
  for (std::int64_t i = 0; i < nq; ++i)
    for (std::int64_t k = 0; k < c; ++k)
      out[i * c + k] = fixed_distance(kind, queries.data() + i * d, centroids.data() + k * d, d);
  return out;
}

// Argmax posterior == argmin score; ties broken by lowest class index.
template <typename S>
std::vector<std::int32_t> predict_from_scores(const Tensor<S>& scores) {
  const std::int64_t n = scores.dim(0), c = scores.dim(1);
  std::vector<std::int32_t> pred(std::size_t(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const S* row = scores.data() + i * c;
    std::int32_t best = 0;
    for (std::int64_t k = 1; k < c; ++k)
      if (row[k] < row[best]) best = std::int32_t(k);
    pred[std::size_t(i)] = best;
  }
  return pred;
}

}  // namespace fewshot
