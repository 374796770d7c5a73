#pragma once

#include <iomanip>
#include <map>
#include <sstream>

#include "fisr/trainer.hpp"

// Ablation matrix: trains one model per cell on the same data and seed and
// tabulates the EMA-weight metrics (EMA is the primary reporting mode; raw
// weights are listed in the per-cell log lines).

namespace fisr {

struct AblationCell {
  std::string label;
  MetricRow ema;   // aggregate metrics under EMA weights
  MetricRow raw;   // aggregate metrics under raw weights
};

struct AblationReport {
  std::string table2, table3, table4;
  std::vector<AblationCell> cells;

  const AblationCell* find(const std::string& label) const {
    for (const AblationCell& c : cells)
      if (c.label == label) return &c;
    return nullptr;
  }
};

namespace detail {

inline std::string ablation_table(
    const std::string& title,
    const std::vector<std::pair<std::string, MetricRow>>& rows) {
  std::ostringstream os;
  os << title << '\n';
  os << std::left << std::setw(18) << "variant" << std::right << std::setw(10)
     << "psnr" << std::setw(10) << "ssim" << std::setw(10) << "rmse"
     << std::setw(10) << "mae" << '\n';
  for (const auto& [label, r] : rows)
    os << std::left << std::setw(18) << label << std::right << std::fixed
       << std::setprecision(4) << std::setw(10) << r.psnr << std::setw(10)
       << r.ssim << std::setw(10) << r.rmse_255 << std::setw(10) << r.mae_255
       << '\n';
  return os.str();
}

}  // namespace detail

// Trains and evaluates every distinct configuration needed by the three
// tables; identical configurations are trained once and shared.
template <typename T>
AblationReport run_ablation(const NetworkConfig& base_net,
                            const TrainConfig& base_train,
                            const std::vector<FlowSample<T>>& train_set,
                            const std::vector<FlowSample<T>>& eval_set,
                            std::ostream* log = nullptr) {
  AblationReport report;
  std::map<std::string, AblationCell> cache;

  auto cell_key = [](const NetworkConfig& c) {
    KvMap kv;
    network_config_to_kv(c, kv);
    std::string key;
    for (const auto& [k, v] : kv) key += k + '=' + v + ';';
    return key;
  };

  auto run_cell = [&](const std::string& label,
                      const NetworkConfig& cfg) -> AblationCell {
    const std::string key = cell_key(cfg);
    auto it = cache.find(key);
    if (it != cache.end()) {
      AblationCell copy = it->second;
      copy.label = label;
      return copy;
    }
    TrainConfig tcfg = base_train;
    tcfg.checkpoint_dir = base_train.checkpoint_dir + "/ablate_" + label;
    tcfg.eval_every = std::max(tcfg.iterations, 1);  // final eval only
    Trainer<T> trainer(cfg, tcfg, train_set, eval_set, nullptr);
    while (trainer.step_index() < tcfg.iterations) trainer.step();

    AblationCell cell;
    cell.label = label;
    cell.raw = evaluate_samples(&trainer.net(), eval_set, EvalMode::Model)
                   .aggregate();
    trainer.ema().swap_into(trainer.net().params());
    cell.ema = evaluate_samples(&trainer.net(), eval_set, EvalMode::Model)
                   .aggregate();
    trainer.ema().swap_into(trainer.net().params());
    if (log)
      (*log) << "# ablate " << label << " ema_psnr="
             << format_double(cell.ema.psnr) << " raw_psnr="
             << format_double(cell.raw.psnr) << '\n';
    cache[key] = cell;
    report.cells.push_back(cell);
    return cell;
  };

  auto with = [&](ConvVariant conv, bool qsm_on) {
    NetworkConfig c = base_net;
    c.conv_variant = conv;
    c.qsm_enabled = qsm_on;
    return c;
  };

  // Module on/off matrix.
  std::vector<std::pair<std::string, MetricRow>> t2;
  t2.emplace_back("baseline",
                  run_cell("baseline", with(ConvVariant::None, false)).ema);
  t2.emplace_back("+QSM", run_cell("qsm", with(ConvVariant::None, true)).ema);
  t2.emplace_back("+DFC", run_cell("dfc", with(ConvVariant::Dfc, false)).ema);
  t2.emplace_back("both", run_cell("both", with(ConvVariant::Dfc, true)).ema);
  report.table2 =
      detail::ablation_table("module ablation (EMA weights)", t2);

  // Convolution variant sweep; the spatial-modeling block stays on.
  std::vector<std::pair<std::string, MetricRow>> t3;
  t3.emplace_back("baseline",
                  run_cell("qsm", with(ConvVariant::None, true)).ema);
  t3.emplace_back("NDC", run_cell("ndc", with(ConvVariant::Ndc, true)).ema);
  t3.emplace_back("LDFC", run_cell("ldfc", with(ConvVariant::Ldfc, true)).ema);
  t3.emplace_back("RDFC", run_cell("rdfc", with(ConvVariant::Rdfc, true)).ema);
  t3.emplace_back("ADFC", run_cell("adfc", with(ConvVariant::Adfc, true)).ema);
  t3.emplace_back("DFC", run_cell("both", with(ConvVariant::Dfc, true)).ema);
  report.table3 =
      detail::ablation_table("convolution variant ablation (EMA weights)", t3);

  // Depth grid, reduced from the full 4..7 x 4..7 sweep.
  std::vector<std::pair<std::string, MetricRow>> t4;
  for (int feu : {1, 2})
    for (int ffb : {1, 2}) {
      NetworkConfig c = base_net;
      c.feu_per_ffb = feu;
      c.ffb_count = ffb;
      const std::string label =
          "feu" + std::to_string(feu) + "_ffb" + std::to_string(ffb);
      t4.emplace_back("FEU=" + std::to_string(feu) +
                          " FFB=" + std::to_string(ffb),
                      run_cell(label, c).ema);
    }
  report.table4 = detail::ablation_table(
      "depth grid (desk reduction of the 4..7 x 4..7 sweep, EMA weights)",
      t4);
  return report;
}

}  // namespace fisr
