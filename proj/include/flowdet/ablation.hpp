#pragma once

#include "flowdet/flops.hpp"
#include "flowdet/trainer.hpp"

namespace flowdet {

// Component-toggle, gate-weight and window-size harnesses. Each row trains
// the toy model from the same seed/config family and reports accuracy next
// to the analytic cost.

struct AblationRow {
  std::string mode;
  double ap = 0.0;
  double ap50 = 0.0;
  int64_t flops = 0;
  double latency_ms = 0.0;
};

inline void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
  os << "mode,ap,ap50,flops,latency_ms\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line.precision(6);
    line << r.mode << "," << r.ap << "," << r.ap50 << "," << r.flops << "," << r.latency_ms
         << "\n";
    os << line.str();
  }
}

namespace detail {

inline AblationRow run_mode(const std::string& name, ModelConfig cfg, const Dataset& train,
                            const Dataset& heldout, int64_t steps, bool measure_latency,
                            std::ostream* progress) {
  cfg.total_steps = steps;
  auto model = build_model<float>(cfg);
  AdamWState<float> state;
  if (progress) *progress << "[ablation] " << name << "\n";
  train_loop(model, train, state, steps, nullptr, nullptr);
  AblationRow row;
  row.mode = name;
  auto rep = evaluate_model(model, heldout);
  row.ap = rep.ap;
  row.ap50 = rep.ap50;
  row.flops = count_flops(cfg).total;
  if (measure_latency) {
    Tensor<float> image = stack_batch(heldout, {0});
    auto lat = latency_bench([&] { (void)forward(model, image); }, 20);
    row.latency_ms = lat.mean_ms;
  }
  return row;
}

}  // namespace detail

// Four-row component toggle table: {plain conv, PAFC} x {plain attention, SAA}.
inline std::vector<AblationRow> ablation_harness(const ModelConfig& base, const Dataset& train,
                                                 const Dataset& heldout, int64_t steps,
                                                 bool measure_latency = true,
                                                 std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  const std::pair<bool, bool> modes[4] = {{false, false}, {false, true}, {true, false}, {true, true}};
  for (auto [pafc, saa] : modes) {
    ModelConfig cfg = base;
    cfg.use_pafc = pafc;
    cfg.use_saa = saa;
    const std::string name = std::string(pafc ? "pafc" : "plain-conv") + "+" +
                             (saa ? "saa" : "plain-attn");
    rows.push_back(detail::run_mode(name, cfg, train, heldout, steps, measure_latency, progress));
  }
  return rows;
}

// Fixed-blend sweep: the gate map frozen at each published ratio
// (local weight = 1 - gate value).
inline std::vector<AblationRow> gate_sweep(const ModelConfig& base, const Dataset& train,
                                           const Dataset& heldout, int64_t steps,
                                           std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (double g : {0.3, 0.4, 0.5, 0.6, 0.7}) {
    ModelConfig cfg = base;
    cfg.use_saa = true;
    cfg.gate_freeze = g;
    std::ostringstream name;
    name << "gate=" << g;
    rows.push_back(detail::run_mode(name.str(), cfg, train, heldout, steps, false, progress));
  }
  return rows;
}

// Window sweep: analytic FLOPs always, latency optional, accuracy only when
// steps > 0 (cost trends do not need training).
inline std::vector<AblationRow> window_sweep(const ModelConfig& base, const Dataset& train,
                                             const Dataset& heldout, int64_t steps,
                                             bool measure_latency = true,
                                             std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (int64_t w : {1, 2, 4, 8}) {
    ModelConfig cfg = base;
    cfg.window = w;
    std::ostringstream name;
    name << "window=" << w;
    if (steps > 0) {
      rows.push_back(detail::run_mode(name.str(), cfg, train, heldout, steps, measure_latency,
                                      progress));
    } else {
      AblationRow row;
      row.mode = name.str();
      row.flops = count_flops(cfg).total;
      if (measure_latency) {
        auto model = build_model<float>(cfg);
        Tensor<float> image = stack_batch(heldout, {0});
        auto lat = latency_bench([&] { (void)forward(model, image); }, 20);
        row.latency_ms = lat.mean_ms;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace flowdet
