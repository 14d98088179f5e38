#include "fewshot/trainer.hpp"

#include <cstdio>

namespace fewshot {

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRecord>& log) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw DataError("cannot open log for writing: " + path);
  std::fputs("episode,l_bal,l_g,l_ce,episode_acc,lr,ms\n", f);
  for (const auto& r : log)
    std::fprintf(f, "%lld,%.9g,%.9g,%.9g,%.6g,%.9g,%.3f\n", (long long)r.episode, r.l_bal, r.l_g,
                 r.l_ce, r.episode_acc, r.lr, r.ms);
  if (std::fclose(f) != 0) throw DataError("failed writing log: " + path);
}

}  // namespace fewshot
