#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/dataset.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

// C-way layout of one meta-task: C support classes with S_tr shots each,
// Q <= C query classes with S_te shots each.
struct EpisodeSpec {
  std::int64_t c = 5;     // classes in the support set
  std::int64_t s_tr = 1;  // support shots per class
  std::int64_t q = 5;     // classes in the query set
  std::int64_t s_te = 15; // query shots per class

  void validate() const;
};

// One sampled meta-task. Local labels run 0..C-1 in sampled order; the
// support and query id sets never overlap.
struct Episode {
  std::vector<std::pair<std::int32_t, std::int32_t>> support;  // (sample id, local label)
  std::vector<std::pair<std::int32_t, std::int32_t>> query;
  std::vector<std::int32_t> class_map;  // local label -> global class id

  std::vector<std::int32_t> support_ids() const;
  std::vector<std::int32_t> query_ids() const;
  std::vector<std::int32_t> support_labels() const;
  std::vector<std::int32_t> query_labels() const;
};

// Draws one episode from the pool. Classes are sampled uniformly without
// replacement, then per class S_tr support shots; Q query classes are chosen
// from those C and get S_te further shots each, disjoint from the support.
Episode build_episode(const ClassPool& pool, const EpisodeSpec& spec, Rng& rng);

// Deterministic sequence of T episodes; episode t draws from an rng seeded
// with (seed xor t) so streams can be regenerated or consumed in parallel.
class EpisodeStream {
 public:
  EpisodeStream(const ClassPool& pool, const EpisodeSpec& spec, std::uint64_t seed)
      : pool_(&pool), spec_(spec), seed_(seed) {
    spec.validate();
  }

  Episode at(std::int64_t task_index) const {
    Rng rng(seed_ ^ std::uint64_t(task_index));
    return build_episode(*pool_, spec_, rng);
  }

 private:
  const ClassPool* pool_;
  EpisodeSpec spec_;
  std::uint64_t seed_;
};

inline std::vector<Episode> episode_stream(const ClassPool& pool, const EpisodeSpec& spec,
                                           std::int64_t t, std::uint64_t seed) {
  EpisodeStream stream(pool, spec, seed);
  std::vector<Episode> out;
  out.reserve(std::size_t(t));
  for (std::int64_t i = 0; i < t; ++i) out.push_back(stream.at(i));
  return out;
}

// Debug dump: JSON list of {support:[ids], query:[ids], class_map}.
std::string episodes_to_json(const std::vector<Episode>& episodes);

}  // namespace fewshot
