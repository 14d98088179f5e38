#include "fewshot/episode.hpp"

#include <json.hpp>

#include "fewshot/error.hpp"

namespace fewshot {

void EpisodeSpec::validate() const {
  if (c < 1) throw ConfigError("episode spec: C must be >= 1");
  if (q < 1 || q > c) throw ConfigError("episode spec: need 1 <= Q <= C, got Q=" +
                                        std::to_string(q) + " C=" + std::to_string(c));
  if (s_tr < 1) throw ConfigError("episode spec: S_tr must be >= 1");
  if (s_te < 1) throw ConfigError("episode spec: S_te must be >= 1");
}

std::vector<std::int32_t> Episode::support_ids() const {
  std::vector<std::int32_t> v;
  v.reserve(support.size());
  for (auto& p : support) v.push_back(p.first);
  return v;
}
std::vector<std::int32_t> Episode::query_ids() const {
  std::vector<std::int32_t> v;
  v.reserve(query.size());
  for (auto& p : query) v.push_back(p.first);
  return v;
}
std::vector<std::int32_t> Episode::support_labels() const {
  std::vector<std::int32_t> v;
  v.reserve(support.size());
  for (auto& p : support) v.push_back(p.second);
  return v;
}
std::vector<std::int32_t> Episode::query_labels() const {
  std::vector<std::int32_t> v;
  v.reserve(query.size());
  for (auto& p : query) v.push_back(p.second);
  return v;
}

Episode build_episode(const ClassPool& pool, const EpisodeSpec& spec, Rng& rng) {
  spec.validate();
  if (pool.size() < spec.c)
    throw DataError("episode needs " + std::to_string(spec.c) + " classes but the pool has " +
                    std::to_string(pool.size()));

  // Sample C classes without replacement.
  std::vector<std::size_t> class_order(std::size_t(pool.size()));
  for (std::size_t i = 0; i < class_order.size(); ++i) class_order[i] = i;
  rng.partial_shuffle(class_order, std::size_t(spec.c));

  Episode ep;
  ep.class_map.reserve(std::size_t(spec.c));
  // Per class, one partial shuffle covers both the support shots and any
  // later query shots: the first S_tr slots are support, query classes keep
  // consuming from slot S_tr on. That guarantees disjointness.
  std::vector<std::vector<std::int32_t>> shuffled(std::size_t(spec.c));
  for (std::int64_t k = 0; k < spec.c; ++k) {
    const auto& entry = pool.entries[class_order[std::size_t(k)]];
    ep.class_map.push_back(entry.class_id);
    if (std::int64_t(entry.samples.size()) < spec.s_tr)
      throw DataError("class " + std::to_string(entry.class_id) + " has " +
                      std::to_string(entry.samples.size()) + " samples, needs S_tr=" +
                      std::to_string(spec.s_tr));
    auto ids = entry.samples;
    rng.partial_shuffle(ids, std::size_t(spec.s_tr));
    for (std::int64_t s = 0; s < spec.s_tr; ++s)
      ep.support.emplace_back(ids[std::size_t(s)], std::int32_t(k));
    shuffled[std::size_t(k)] = std::move(ids);
  }

  // Choose the Q query classes among the C sampled ones.
  std::vector<std::int64_t> query_classes(std::size_t(spec.c));
  for (std::int64_t k = 0; k < spec.c; ++k) query_classes[std::size_t(k)] = k;
  if (spec.q < spec.c) rng.partial_shuffle(query_classes, std::size_t(spec.q));
  query_classes.resize(std::size_t(spec.q));

  for (std::int64_t qi = 0; qi < spec.q; ++qi) {
    const auto k = query_classes[std::size_t(qi)];
    auto& ids = shuffled[std::size_t(k)];
    if (std::int64_t(ids.size()) < spec.s_tr + spec.s_te)
      throw DataError("class " + std::to_string(ep.class_map[std::size_t(k)]) + " has " +
                      std::to_string(ids.size()) + " samples, needs S_tr+S_te=" +
                      std::to_string(spec.s_tr + spec.s_te));
    // Continue the per-class shuffle past the support block.
    for (std::int64_t s = 0; s < spec.s_te; ++s) {
      const std::size_t i = std::size_t(spec.s_tr + s);
      const std::size_t j = i + std::size_t(rng.uniform_int(std::uint64_t(ids.size() - i)));
      std::swap(ids[i], ids[j]);
      ep.query.emplace_back(ids[i], std::int32_t(k));
    }
  }
  return ep;
}

std::string episodes_to_json(const std::vector<Episode>& episodes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& ep : episodes) {
    nlohmann::json j;
    j["support"] = ep.support_ids();
    j["query"] = ep.query_ids();
    j["class_map"] = ep.class_map;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

}  // namespace fewshot
