#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/model.hpp"
#include "fewshot/trainer.hpp"

namespace fewshot {

enum class EvalHead { kLearned, kEuclidean, kCosine };

inline const char* head_name(EvalHead h) {
  switch (h) {
    case EvalHead::kLearned: return "learned";
    case EvalHead::kEuclidean: return "euclidean";
    default: return "cosine";
  }
}

struct EvalConfig {
  std::int64_t q = 5;       // classes per test task
  std::int64_t shots = 1;   // L: labelled samples per class
  std::int64_t s_te = 15;   // queries per class; 0 = all remaining samples
  std::int64_t tasks = 20;  // M
  std::uint64_t seed = 1;
  EvalHead head = EvalHead::kLearned;
  bool bn_batch_stats = false;  // normalize by batch statistics instead of running stats

  void validate() const {
    if (tasks < 1) throw ConfigError("eval: M must be >= 1");
    if (q < 2) throw ConfigError("eval: Q must be >= 2");
    if (shots < 1) throw ConfigError("eval: shots must be >= 1");
    if (s_te < 0) throw ConfigError("eval: S_te must be >= 0 (0 = all remaining)");
  }
};

// Repeated-task accuracy report: per-task correct counts, mean +- std over
// tasks, and the row-stochastic confusion matrix over local labels.
struct EvalReport {
  EvalConfig config;
  std::int64_t s_te_effective = 0;

  struct Task {
    std::int64_t correct = 0;
    double acc = 0;
    std::vector<std::pair<std::int32_t, std::int32_t>> predictions;  // (true, predicted)
  };
  std::vector<Task> per_task;
  double mean_acc = 0;
  double std_acc = 0;
  std::vector<std::vector<double>> confusion;  // [Q][Q], rows sum to 1
  std::vector<bool> row_had_queries;
};

std::string eval_report_to_json(const EvalReport& report);

// One evaluation run: M tasks sampled from the unseen pool with C=Q and
// S_tr=L; centroids come from the L labelled shots, every query is argmaxed
// over the posterior under the configured head, ties to the lowest index.
template <typename S>
EvalReport evaluate(ModelParams<S>& params, const Dataset& data, const ClassPool& pool,
                    const EvalConfig& cfg) {
  cfg.validate();
  if (pool.size() < cfg.q)
    throw DataError("evaluation pool has " + std::to_string(pool.size()) +
                    " classes, tasks need Q=" + std::to_string(cfg.q));
  std::int64_t min_class = std::int64_t(1) << 60;
  for (const auto& e : pool.entries)
    min_class = std::min(min_class, std::int64_t(e.samples.size()));
  const std::int64_t s_te = cfg.s_te > 0 ? cfg.s_te : min_class - cfg.shots;
  if (s_te < 1 || min_class < cfg.shots + s_te)
    throw DataError("evaluation pool classes have " + std::to_string(min_class) +
                    " samples; tasks need L+S_te = " +
                    std::to_string(cfg.shots + std::max<std::int64_t>(s_te, 1)));

  EvalReport report;
  report.config = cfg;
  report.s_te_effective = s_te;
  report.confusion.assign(std::size_t(cfg.q), std::vector<double>(std::size_t(cfg.q), 0.0));
  report.row_had_queries.assign(std::size_t(cfg.q), false);

  const EpisodeSpec spec{cfg.q, cfg.shots, cfg.q, s_te};
  EpisodeStream stream(pool, spec, derive_seed(cfg.seed, "eval.episodes"));
  const BnMode mode = cfg.bn_batch_stats ? BnMode::kBatch : BnMode::kEval;

  std::vector<std::vector<std::int64_t>> counts(std::size_t(cfg.q),
                                                std::vector<std::int64_t>(std::size_t(cfg.q), 0));
  for (std::int64_t m = 0; m < cfg.tasks; ++m) {
    const Episode ep = stream.at(m);
    Graph<S> g;
    BoundModel<S> bm = bind(g, params, /*trainable=*/false);
    Var<S> sup_emb = embed(g, bm, g.leaf(assemble_batch<S>(data, ep.support_ids())), mode);
    Var<S> cents = compute_centroids(g, sup_emb, ep.support_labels(), cfg.q);
    Var<S> qry_emb = embed(g, bm, g.leaf(assemble_batch<S>(data, ep.query_ids())), mode);

    Tensor<S> scores;
    if (cfg.head == EvalHead::kLearned) {
      scores = metric_scores(g, bm, qry_emb, cents).value();
    } else {
      const DistanceKind kind =
          cfg.head == EvalHead::kEuclidean ? DistanceKind::kEuclidean : DistanceKind::kCosine;
      scores = fixed_distance_scores(kind, qry_emb.value(), cents.value());
    }

    const auto pred = predict_from_scores(scores);
    const auto truth = ep.query_labels();
    typename EvalReport::Task task;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      task.predictions.emplace_back(truth[i], pred[i]);
      counts[std::size_t(truth[i])][std::size_t(pred[i])] += 1;
      if (pred[i] == truth[i]) ++task.correct;
    }
    task.acc = double(task.correct) / double(cfg.q * s_te);
    report.per_task.push_back(std::move(task));
  }

  double sum = 0;
  for (const auto& t : report.per_task) sum += t.acc;
  report.mean_acc = sum / double(cfg.tasks);
  double ss = 0;
  for (const auto& t : report.per_task) ss += (t.acc - report.mean_acc) * (t.acc - report.mean_acc);
  report.std_acc = cfg.tasks > 1 ? std::sqrt(ss / double(cfg.tasks - 1)) : 0.0;

  for (std::int64_t r = 0; r < cfg.q; ++r) {
    std::int64_t row_total = 0;
    for (std::int64_t c = 0; c < cfg.q; ++c) row_total += counts[std::size_t(r)][std::size_t(c)];
    report.row_had_queries[std::size_t(r)] = row_total > 0;
    if (row_total > 0)
      for (std::int64_t c = 0; c < cfg.q; ++c)
        report.confusion[std::size_t(r)][std::size_t(c)] =
            double(counts[std::size_t(r)][std::size_t(c)]) / double(row_total);
  }
  return report;
}

// --- experiment drivers --------------------------------------------------

struct SweepRow {
  double lambda = 0;
  double mean_acc = 0;
  double std_acc = 0;
};

// One full train+evaluate per lambda, everything else fixed (seeds
// included); rows come back ordered by lambda.
template <typename S>
std::vector<SweepRow> sweep_lambda(const TrainConfig& base, std::vector<double> values,
                                   const Dataset& data, const ClassPool& seen_pool,
                                   const ClassPool& unseen_pool, const EvalConfig& eval_cfg) {
  std::sort(values.begin(), values.end());
  std::vector<SweepRow> rows;
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0))
      throw ConfigError("lambda sweep value " + std::to_string(v) + " outside [0,1]");
    TrainConfig cfg = base;
    cfg.lambda = v;
    TrainResult<S> tr = train<S>(cfg, data, seen_pool);
    EvalReport rep = evaluate(tr.params, data, unseen_pool, eval_cfg);
    rows.push_back({v, rep.mean_acc, rep.std_acc});
  }
  return rows;
}

enum class AblationMode { kNoMeta, kNoMetric };

// Ablations evaluate with the Euclidean nearest-centroid head: their metric
// module is either never episodically trained (no_meta) or removed outright
// (no_metric).
template <typename S>
EvalReport ablate(AblationMode mode, const TrainConfig& base, const Dataset& data,
                  const ClassPool& seen_pool, const ClassPool& unseen_pool,
                  const EvalConfig& eval_cfg) {
  TrainResult<S> tr = mode == AblationMode::kNoMeta
                          ? train_no_meta<S>(base, data, seen_pool)
                          : train_no_metric<S>(base, data, seen_pool);
  EvalConfig cfg = eval_cfg;
  cfg.head = EvalHead::kEuclidean;
  return evaluate(tr.params, data, unseen_pool, cfg);
}

struct RatioRow {
  SubsampleMode mode = SubsampleMode::kCategories;
  double ratio = 0;
  double mean_acc = 0;  // mean over repeats of per-run mean accuracy
  double std_acc = 0;   // std over repeats (0 for a single repeat)
};

// Tables-style ratio study: subsample the seen pool, train, evaluate;
// averaged over `repeats` reseeded runs. Repeat 0 runs on the base seed so a
// single-repeat study at ratio 1.0 reproduces the unablated pipeline
// bit-exactly.
template <typename S>
std::vector<RatioRow> ratio_study(SubsampleMode mode, const std::vector<double>& ratios,
                                  std::int64_t repeats, const TrainConfig& base,
                                  const Dataset& data, const ClassPool& seen_pool,
                                  const ClassPool& unseen_pool, const EvalConfig& eval_cfg) {
  if (repeats < 1) throw ConfigError("ratio study needs repeats >= 1");
  std::vector<RatioRow> rows;
  for (double ratio : ratios) {
    std::vector<double> means;
    for (std::int64_t r = 0; r < repeats; ++r) {
      TrainConfig cfg = base;
      if (r > 0) cfg.seed = splitmix64(base.seed ^ (0x5eedULL + std::uint64_t(r)));
      const ClassPool reduced =
          subsample_train(seen_pool, mode, ratio, derive_seed(cfg.seed, "ratio.subsample"),
                          mode == SubsampleMode::kCategories ? cfg.spec.c : 0,
                          mode == SubsampleMode::kScenes ? cfg.spec.s_tr + 1 : 0);
      TrainResult<S> tr = train<S>(cfg, data, reduced);
      EvalConfig ec = eval_cfg;
      if (r > 0) ec.seed = splitmix64(eval_cfg.seed ^ (0x5eedULL + std::uint64_t(r)));
      EvalReport rep = evaluate(tr.params, data, unseen_pool, ec);
      means.push_back(rep.mean_acc);
    }
    double mean = 0;
    for (double v : means) mean += v;
    mean /= double(means.size());
    double ss = 0;
    for (double v : means) ss += (v - mean) * (v - mean);
    rows.push_back({mode, ratio, mean,
                    means.size() > 1 ? std::sqrt(ss / double(means.size() - 1)) : 0.0});
  }
  return rows;
}

}  // namespace fewshot
