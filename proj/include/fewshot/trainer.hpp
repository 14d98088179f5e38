#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "fewshot/checkpoint.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/episode.hpp"
#include "fewshot/losses.hpp"
#include "fewshot/model.hpp"
#include "fewshot/optimizer.hpp"

namespace fewshot {

struct TrainConfig {
  EpisodeSpec spec{5, 1, 5, 15};
  double lambda = 0.1;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::int64_t total_episodes = 10000;
  std::int64_t episodes_per_epoch = 100;
  std::int64_t lr_decay_every_epochs = 20;  // 0 disables the step decay
  double lr_decay_factor = 0.5;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 0;  // 0 = only at the end

  void validate() const {
    spec.validate();
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in [0,1]");
    // lr == 0 is permitted as an explicit no-op update for wiring checks.
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (total_episodes < 1) throw ConfigError("T must be >= 1");
    if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be >= 1");
    if (lr_decay_every_epochs < 0) throw ConfigError("lr_decay_every_epochs must be >= 0");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
      throw ConfigError("lr_decay_factor must be in (0,1]");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  }

  double lr_at(std::int64_t episode) const {
    if (lr_decay_every_epochs == 0) return lr;
    const std::int64_t epoch = episode / episodes_per_epoch;
    const std::int64_t steps = epoch / lr_decay_every_epochs;
    return lr * std::pow(lr_decay_factor, double(steps));
  }
};

struct TrainLogRecord {
  std::int64_t episode = 0;
  double l_bal = 0, l_g = 0, l_ce = 0;
  double episode_acc = 0;
  double lr = 0;
  double ms = 0;
};

template <typename S>
struct TrainResult {
  ModelParams<S> params;
  std::vector<TrainLogRecord> log;
};

template <typename S>
using CheckpointFn = std::function<void(std::int64_t episode, ModelParams<S>& params)>;

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRecord>& log);

namespace detail {

// Support labels mapped to aux-head rows: pool position of the global class.
inline std::vector<std::int32_t> aux_labels(const ClassPool& pool, const Episode& ep,
                                            const std::vector<std::int32_t>& local_labels) {
  std::vector<std::int32_t> out;
  out.reserve(local_labels.size());
  for (auto l : local_labels) {
    const std::int32_t global = ep.class_map[std::size_t(l)];
    std::int32_t row = -1;
    for (std::size_t i = 0; i < pool.entries.size(); ++i)
      if (pool.entries[i].class_id == global) {
        row = std::int32_t(i);
        break;
      }
    if (row < 0) throw DataError("episode class not present in the training pool");
    out.push_back(row);
  }
  return out;
}

template <typename S>
std::vector<typename SgdOptimizer<S>::Item> optimizer_items(const BoundModel<S>& bm) {
  std::vector<typename SgdOptimizer<S>::Item> items;
  items.reserve(bm.entries.size());
  for (const auto& e : bm.entries)
    items.push_back({e.param, &e.var.grad(), e.kind == ParamKind::kWeight});
  return items;
}

inline void check_pool_for_episodes(const ClassPool& pool, const EpisodeSpec& spec) {
  if (pool.size() < spec.c)
    throw DataError("training pool has " + std::to_string(pool.size()) +
                    " classes, episodes need C=" + std::to_string(spec.c));
  for (const auto& e : pool.entries) {
    const std::int64_t need = (spec.q == spec.c) ? spec.s_tr + spec.s_te : spec.s_tr;
    if (std::int64_t(e.samples.size()) < need)
      throw DataError("class " + std::to_string(e.class_id) + " has " +
                      std::to_string(e.samples.size()) + " samples, episodes need " +
                      std::to_string(need));
  }
}

template <typename S>
double batch_accuracy(const Tensor<S>& scores, const std::vector<std::int32_t>& labels,
                      bool lower_is_better) {
  Tensor<S> s = scores;
  if (!lower_is_better) s.vec() = -s.vec();
  const auto pred = predict_from_scores(s);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) ++correct;
  return double(correct) / double(pred.size());
}

}  // namespace detail

// Episodic training: per episode embed the support set (train mode, running
// stats updated), form centroids, embed queries (batch statistics, no
// update), score them against the centroids, and descend the balance loss.
// Bit-reproducible given (config, data, pool).
template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const Dataset& data, const ClassPool& pool,
                     CheckpointFn<S> checkpoint_cb = nullptr) {
  cfg.validate();
  detail::check_pool_for_episodes(pool, cfg.spec);
  const Shape& img = data.index.image_shape;

  TrainResult<S> result;
  result.params = init_model<S>(img[1], img[2], pool.size(), cfg.seed);
  SgdOptimizer<S> opt(cfg.momentum, cfg.weight_decay);
  EpisodeStream stream(pool, cfg.spec, derive_seed(cfg.seed, "train.episodes"));
  const LossConfig loss_cfg{cfg.lambda};

  for (std::int64_t t = 0; t < cfg.total_episodes; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr_t = cfg.lr_at(t);
    const Episode ep = stream.at(t);

    Graph<S> g;
    BoundModel<S> bm = bind(g, result.params);
    Var<S> support = g.leaf(assemble_batch<S>(data, ep.support_ids()));
    Var<S> queries = g.leaf(assemble_batch<S>(data, ep.query_ids()));

    Var<S> sup_emb = embed(g, bm, support, BnMode::kTrain);
    Var<S> cents = compute_centroids(g, sup_emb, ep.support_labels(), cfg.spec.c);
    Var<S> qry_emb = embed(g, bm, queries, BnMode::kBatch);
    Var<S> scores = metric_scores(g, bm, qry_emb, cents);
    Var<S> log_post = log_posteriors(g, scores);
    Var<S> l_g = generalization_loss(log_post, ep.query_labels());
    Var<S> aux_logits = linear(sup_emb, bm.aux_w, bm.aux_b);
    Var<S> l_ce = fit_loss(aux_logits, detail::aux_labels(pool, ep, ep.support_labels()));
    Var<S> l_bal = balance_loss(l_g, l_ce, loss_cfg);

    if (!std::isfinite(double(l_bal.value()[0])))
      throw NumericError("non-finite loss at episode " + std::to_string(t));

    g.backward(l_bal);
    opt.step(detail::optimizer_items(bm), lr_t);

    TrainLogRecord rec;
    rec.episode = t;
    rec.l_bal = double(l_bal.value()[0]);
    rec.l_g = double(l_g.value()[0]);
    rec.l_ce = double(l_ce.value()[0]);
    rec.episode_acc = detail::batch_accuracy(scores.value(), ep.query_labels(), true);
    rec.lr = lr_t;
    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);

    if (checkpoint_cb && cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 &&
        t + 1 < cfg.total_episodes)
      checkpoint_cb(t + 1, result.params);
  }
  if (checkpoint_cb) checkpoint_cb(cfg.total_episodes, result.params);
  return result;
}

// Meta-training ablation: plain shuffled mini-batch cross-entropy over the
// pool's classes through the aux head; no episodes, metric head untouched.
// Batch size matches the image count of one episodic step.
template <typename S>
TrainResult<S> train_no_meta(const TrainConfig& cfg, const Dataset& data, const ClassPool& pool,
                             CheckpointFn<S> checkpoint_cb = nullptr) {
  cfg.validate();
  const Shape& img = data.index.image_shape;
  const std::int64_t batch_size = cfg.spec.c * cfg.spec.s_tr + cfg.spec.q * cfg.spec.s_te;

  std::vector<std::pair<std::int32_t, std::int32_t>> all;  // (sample id, pool row)
  for (std::size_t r = 0; r < pool.entries.size(); ++r)
    for (auto sid : pool.entries[r].samples) all.emplace_back(sid, std::int32_t(r));
  if (std::int64_t(all.size()) < 2)
    throw DataError("no_meta training needs at least 2 samples in the pool");

  TrainResult<S> result;
  result.params = init_model<S>(img[1], img[2], pool.size(), cfg.seed);
  SgdOptimizer<S> opt(cfg.momentum, cfg.weight_decay);
  const std::uint64_t shuffle_base = derive_seed(cfg.seed, "no_meta.shuffle");

  std::int64_t t = 0, epoch = 0;
  while (t < cfg.total_episodes) {
    Rng rng(shuffle_base ^ std::uint64_t(epoch));
    rng.shuffle(all);
    for (std::size_t off = 0; off < all.size() && t < cfg.total_episodes;
         off += std::size_t(batch_size)) {
      const std::size_t end = std::min(all.size(), off + std::size_t(batch_size));
      if (end - off < 2) break;  // batchnorm needs 2+ rows; drop the tail
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<std::int32_t> ids, labels;
      for (std::size_t i = off; i < end; ++i) {
        ids.push_back(all[i].first);
        labels.push_back(all[i].second);
      }
      const double lr_t = cfg.lr_at(t);

      Graph<S> g;
      BoundModel<S> bm = bind(g, result.params);
      Var<S> batch = g.leaf(assemble_batch<S>(data, ids));
      Var<S> emb = embed(g, bm, batch, BnMode::kTrain);
      Var<S> logits = linear(emb, bm.aux_w, bm.aux_b);
      Var<S> l_ce = fit_loss(logits, labels);
      if (!std::isfinite(double(l_ce.value()[0])))
        throw NumericError("non-finite loss at step " + std::to_string(t));
      g.backward(l_ce);
      opt.step(detail::optimizer_items(bm), lr_t);

      TrainLogRecord rec;
      rec.episode = t;
      rec.l_ce = rec.l_bal = double(l_ce.value()[0]);
      rec.episode_acc = detail::batch_accuracy(logits.value(), labels, false);
      rec.lr = lr_t;
      rec.ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(rec);

      ++t;
      if (checkpoint_cb && cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 &&
          t < cfg.total_episodes)
        checkpoint_cb(t, result.params);
    }
    ++epoch;
  }
  if (checkpoint_cb) checkpoint_cb(cfg.total_episodes, result.params);
  return result;
}

// Metric-module ablation: episodic, but the balance loss collapses to
// lambda * L_CE on the support set; queries are never embedded and the
// metric head receives no gradient. Rejects lambda == 0, which would leave
// no training signal at all.
template <typename S>
TrainResult<S> train_no_metric(const TrainConfig& cfg, const Dataset& data, const ClassPool& pool,
                               CheckpointFn<S> checkpoint_cb = nullptr) {
  cfg.validate();
  if (cfg.lambda == 0.0)
    throw ConfigError("no_metric ablation with lambda=0 has zero training signal");
  detail::check_pool_for_episodes(pool, cfg.spec);
  const Shape& img = data.index.image_shape;

  TrainResult<S> result;
  result.params = init_model<S>(img[1], img[2], pool.size(), cfg.seed);
  SgdOptimizer<S> opt(cfg.momentum, cfg.weight_decay);
  EpisodeStream stream(pool, cfg.spec, derive_seed(cfg.seed, "train.episodes"));

  for (std::int64_t t = 0; t < cfg.total_episodes; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr_t = cfg.lr_at(t);
    const Episode ep = stream.at(t);

    Graph<S> g;
    BoundModel<S> bm = bind(g, result.params);
    Var<S> support = g.leaf(assemble_batch<S>(data, ep.support_ids()));
    Var<S> sup_emb = embed(g, bm, support, BnMode::kTrain);
    Var<S> logits = linear(sup_emb, bm.aux_w, bm.aux_b);
    const auto labels = detail::aux_labels(pool, ep, ep.support_labels());
    Var<S> l_ce = fit_loss(logits, labels);
    Var<S> loss = scale(l_ce, S(cfg.lambda));
    if (!std::isfinite(double(loss.value()[0])))
      throw NumericError("non-finite loss at episode " + std::to_string(t));
    g.backward(loss);
    opt.step(detail::optimizer_items(bm), lr_t);

    TrainLogRecord rec;
    rec.episode = t;
    rec.l_bal = double(loss.value()[0]);
    rec.l_ce = double(l_ce.value()[0]);
    rec.episode_acc = detail::batch_accuracy(logits.value(), labels, false);
    rec.lr = lr_t;
    rec.ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);

    if (checkpoint_cb && cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 &&
        t + 1 < cfg.total_episodes)
      checkpoint_cb(t + 1, result.params);
  }
  if (checkpoint_cb) checkpoint_cb(cfg.total_episodes, result.params);
  return result;
}

}  // namespace fewshot
