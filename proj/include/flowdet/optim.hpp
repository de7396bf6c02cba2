#pragma once

#include "flowdet/loss.hpp"

namespace flowdet {

// Cosine-annealed learning rate over the configured horizon, no warmup.
inline double cosine_lr(double base, int64_t step, int64_t total_steps) {
  if (total_steps <= 1) return base;
  const double t = double(std::min(step, total_steps)) / double(total_steps);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <typename T>
struct AdamWState {
  int64_t step = 0;  // completed optimizer steps
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<T>> m, v;  // first/second moment per parameter

  void ensure(const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
    if (!m.empty()) return;
    for (auto& [name, p] : params) {
      m.emplace_back(size_t(p->numel()), T(0));
      v.emplace_back(size_t(p->numel()), T(0));
    }
  }
};

// Decoupled weight decay update. With lr == 0 the write-back is an exact
// no-op on parameter bits; moments still advance.
template <typename T>
inline void adamw_update(std::vector<std::pair<std::string, Tensor<T>*>>& params,
                         AdamWState<T>& state, double lr, double weight_decay) {
  state.ensure(params);
  state.step++;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k].second;
    auto* st = p.storage();
    if (st->grad.size() != st->data.size()) continue;  // untouched this step
    auto data = p.mutable_data();
    const T* g = st->grad.data();
    T* mk = state.m[k].data();
    T* vk = state.v[k].data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      mk[i] = T(state.beta1) * mk[i] + T(1.0 - state.beta1) * g[i];
      vk[i] = T(state.beta2) * vk[i] + T(1.0 - state.beta2) * g[i] * g[i];
      const double mhat = double(mk[i]) / bc1;
      const double vhat = double(vk[i]) / bc2;
      const double update = lr * (mhat / (std::sqrt(vhat) + state.eps) + weight_decay * data[i]);
      data[size_t(i)] = T(double(data[size_t(i)]) - update);
    }
  }
}

// One training step: forward, Hungarian matching, set loss, backward, AdamW
// with the cosine schedule. Every decoder layer's predictions are supervised
// (matched independently, summed); the reported breakdown is that sum, so
// its components still combine linearly into the reported total.
// Deterministic given identical inputs and state.
template <typename T>
inline LossBreakdown train_step(Model<T>& model, const Tensor<T>& images,
                                const std::vector<GroundTruth>& targets, AdamWState<T>& state) {
  model.set_requires_grad(true);
  LossBreakdown breakdown;
  {
    Graph<T> graph;
    std::vector<BatchOutput<T>> outs = forward_all_layers(model, images);
    Tensor<T> total;
    for (size_t l = 0; l < outs.size(); ++l) {
      if (!outs[l].logits.all_finite() || !outs[l].boxes.all_finite())
        throw ValueError("train_step: non-finite model outputs at step " +
                         std::to_string(state.step));
      SetLossResult<T> loss = set_loss(outs[l], targets, model.cfg);
      breakdown.cls += loss.values.cls;
      breakdown.l1 += loss.values.l1;
      breakdown.giou += loss.values.giou;
      breakdown.total += loss.values.total;
      total = l == 0 ? loss.total : add(total, loss.total);
    }
    if (!std::isfinite(breakdown.total))
      throw ValueError("train_step: non-finite loss (cls=" + std::to_string(breakdown.cls) +
                       " l1=" + std::to_string(breakdown.l1) +
                       " giou=" + std::to_string(breakdown.giou) + ") at step " +
                       std::to_string(state.step));
    graph.backward(total);
    auto params = model.named_params();
    const double lr = cosine_lr(model.cfg.lr, state.step, model.cfg.total_steps);
    adamw_update(params, state, lr, model.cfg.weight_decay);
  }
  return breakdown;
}

}  // namespace flowdet
