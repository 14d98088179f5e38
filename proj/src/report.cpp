#include <json.hpp>
#include <sstream>

#include "fewshot/evaluate.hpp"
#include "fewshot/pca.hpp"

namespace fewshot {

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["config"] = {{"Q", report.config.q},
                 {"shots", report.config.shots},
                 {"S_te", report.s_te_effective},
                 {"tasks", report.config.tasks},
                 {"seed", report.config.seed},
                 {"head", head_name(report.config.head)},
                 {"bn_batch_stats", report.config.bn_batch_stats}};
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& t : report.per_task)
    tasks.push_back({{"r", t.correct}, {"acc", t.acc}});
  j["per_task"] = std::move(tasks);
  j["mean"] = report.mean_acc;
  j["std"] = report.std_acc;
  j["confusion"] = report.confusion;
  return j.dump(2) + "\n";
}

std::string pca_to_csv(const PcaProjection& p) {
  std::ostringstream os;
  os << "pc1,pc2,label\n";
  os.precision(9);
  for (std::size_t i = 0; i < p.pc1.size(); ++i)
    os << p.pc1[i] << ',' << p.pc2[i] << ',' << p.labels[i] << '\n';
  return os.str();
}

}  // namespace fewshot
