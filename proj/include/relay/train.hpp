#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <vector>

#include "relay/loss_metrics.hpp"
#include "relay/model.hpp"
#include "relay/optim.hpp"
#include "relay/synthetic.hpp"

namespace relay {

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // mean per-sample loss over the epoch
  double f1 = 0;          // mean per-sample F1@0.5 of the epoch's forward passes
  double iou = 0;
  double lr = 0;          // learning rate of the epoch's last update
};

struct SampleMetrics {
  double f1 = 0;
  double iou = 0;
};

/// Training example in tensor form: clip [T, H, W, C], mask and edge band [T, H, W].
template <typename Scalar>
struct Example {
  Tensor<Scalar> clip;
  Tensor<Scalar> mask;
  Tensor<Scalar> edge;
  std::vector<std::uint8_t> gt;  // flattened binary mask
};

template <typename Scalar>
Example<Scalar> make_example(const SyntheticSample& s, std::size_t edge_width) {
  Example<Scalar> e;
  e.clip = s.clip<Scalar>();
  e.mask = s.mask<Scalar>();
  std::vector<BinaryMask> edges;
  for (const auto& m : s.masks) {
    edges.push_back(edge_mask_from_gt(m, edge_width));
    e.gt.insert(e.gt.end(), m.values.begin(), m.values.end());
  }
  e.edge = mask_tensor<Scalar>(edges);
  return e;
}

template <typename Scalar>
SampleMetrics sample_metrics(const Tensor<Scalar>& probabilities, std::span<const std::uint8_t> gt) {
  const auto pred = binarize(probabilities.data());
  const auto c = confusion(pred, gt);
  return {f1_score(c), iou_score(c)};
}

template <typename Scalar>
struct TrainResult {
  RelayModel<Scalar> model;
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

/// Optimizes a freshly initialized model on `dataset`. Each optimizer step
/// averages gradients over `accumulation_steps` single-sample passes; the
/// sample order is reshuffled every epoch from the run seed. Stops after
/// `config.steps` updates, logging the last (possibly partial) epoch too.
/// Throws NumericError on a non-finite loss.
template <typename Scalar>
TrainResult<Scalar> train(const RunConfig& config, const std::vector<SyntheticSample>& dataset,
                          const std::function<void(const EpochLog&)>& on_epoch = {}) {
  config.validate();
  if (dataset.empty()) throw ShapeError("train: empty dataset");
  TrainResult<Scalar> result{RelayModel<Scalar>::init(config.model, config.seed), {}, 0};
  auto& model = result.model;

  std::vector<Example<Scalar>> examples;
  for (const auto& s : dataset) examples.push_back(make_example<Scalar>(s, config.edge_width));

  const auto named = model.named_parameters();
  std::vector<Tensor<Scalar>> params;
  std::vector<bool> backbone_mask;
  for (const auto& p : named) {
    params.push_back(p.tensor);
    backbone_mask.push_back(p.group == ParamGroup::backbone);
  }
  AdamWConfig adam;
  adam.beta1 = config.optim.beta1;
  adam.beta2 = config.optim.beta2;
  adam.eps = config.optim.eps;
  adam.weight_decay = config.optim.weight_decay;
  adam.schedule = {config.optim.lr, config.optim.min_lr, config.optim.warmup_steps, config.steps};
  auto state = make_optim_state(params, adam);

  const std::size_t accum = config.optim.accumulation_steps;
  const Scalar grad_scale = Scalar(1) / static_cast<Scalar>(accum);
  std::size_t pending = 0;
  double last_lr = adam.schedule.lr_at(0);

  for (std::size_t epoch = 1; result.steps < config.steps; ++epoch) {
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle(config.seed, 1000 + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.range(0, i - 1)]);

    const bool freeze = config.freeze_backbone_first_epoch && epoch == 1;
    EpochLog log;
    log.epoch = epoch;
    std::size_t seen = 0;
    for (const std::size_t idx : order) {
      const auto& ex = examples[idx];
      const auto pred = forward(model, ex.clip, false);
      const auto loss = combined_loss_logits(pred.pixel_logits, ex.mask, ex.edge, config.edge_lambda);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(result.steps) + ", sample " + std::to_string(idx));
      }
      scale(loss, grad_scale).backward();
      const auto m = sample_metrics(pred.probabilities, ex.gt);
      log.loss += value;
      log.f1 += m.f1;
      log.iou += m.iou;
      ++seen;
      if (++pending == accum) {
        clip_grad_norm(params, config.optim.grad_clip);
        last_lr = adamw_step(params, state, freeze ? backbone_mask : std::vector<bool>{});
        zero_grad(params);
        pending = 0;
        if (++result.steps == config.steps) break;
      }
    }
    log.loss /= static_cast<double>(seen);
    log.f1 /= static_cast<double>(seen);
    log.iou /= static_cast<double>(seen);
    log.lr = last_lr;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

/// Per-sample metrics of the model's predictions.
template <typename Scalar>
std::vector<SampleMetrics> evaluate(const RelayModel<Scalar>& model, const std::vector<SyntheticSample>& dataset,
                                    bool one_shot) {
  NoGradGuard no_grad;
  std::vector<SampleMetrics> out;
  for (const auto& s : dataset) {
    const auto pred = forward(model, s.clip<Scalar>(), one_shot);
    std::vector<std::uint8_t> gt;
    for (const auto& m : s.masks) gt.insert(gt.end(), m.values.begin(), m.values.end());
    out.push_back(sample_metrics(pred.probabilities, gt));
  }
  return out;
}

inline SampleMetrics mean_metrics(const std::vector<SampleMetrics>& m) {
  SampleMetrics s;
  for (const auto& x : m) {
    s.f1 += x.f1;
    s.iou += x.iou;
  }
  if (!m.empty()) {
    s.f1 /= static_cast<double>(m.size());
    s.iou /= static_cast<double>(m.size());
  }
  return s;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "epoch,loss,f1,iou,lr\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_number(e.loss) << ',' << format_number(e.f1) << ',' << format_number(e.iou) << ','
        << format_number(e.lr) << '\n';
  }
}

}  // namespace relay
