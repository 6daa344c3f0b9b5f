#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stpf/framestack.hpp"
#include "stpf/layers.hpp"
#include "stpf/optimizer.hpp"
#include "stpf/rng.hpp"
#include "stpf/samples.hpp"
#include "stpf/tensor.hpp"

namespace stpf {

struct TrainConfig {
  int epochs = 30;
  int batch = 5;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  uint64_t seed = 42;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean training loss per epoch
};

// Copies the window's frames from a normalized stack into [B,L,H,W,1] order.
template <typename T>
Tensor<T> window_batch(const FrameStack& fs, const std::vector<int>& starts, int window) {
  const int B = static_cast<int>(starts.size());
  const int64_t cells = fs.cells();
  std::vector<T> data(size_t(B) * window * cells);
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < window; ++l) {
      auto f = fs.frame(starts[size_t(b)] + l);
      T* dst = data.data() + (int64_t(b) * window + l) * cells;
      for (int64_t i = 0; i < cells; ++i) dst[i] = static_cast<T>(f[size_t(i)]);
    }
  }
  return Tensor<T>::from_data({B, window, fs.height, fs.width, 1}, std::move(data));
}

// Minimizes the masked MSE over the sample set with Nadam. Batch statistics
// drive the batch norms; moving statistics update as a side effect. Runs are
// bit-reproducible for a fixed seed and precision.
template <typename T>
TrainResult train(Network<T>& net, const FrameStack& normalized_train, const SampleSet& samples,
                  const TrainConfig& cfg,
                  const std::function<void(int, double)>& on_epoch = {}) {
  if (samples.empty()) throw UsageError("train: empty sample set");
  if (cfg.epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (normalized_train.active_count() == 0) throw UsageError("train: empty mask");

  Nadam<T> opt(net.trainable_params(),
               {T(cfg.lr), T(cfg.beta1), T(cfg.beta2), T(cfg.epsilon)});
  auto params = net.trainable_params();

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(samples, cfg.batch, Rng::mix(cfg.seed, uint64_t(epoch)));
    double loss_sum = 0.0;
    int64_t sample_count = 0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<int> in_starts, out_starts;
      for (int s : batches[bi]) {
        in_starts.push_back(samples.samples[size_t(s)].input_begin);
        out_starts.push_back(samples.samples[size_t(s)].output_begin);
      }
      auto x = window_batch<T>(normalized_train, in_starts, samples.window);
      auto y = window_batch<T>(normalized_train, out_starts, samples.window);
      auto pred = net.forward(x, Mode::train);
      auto loss = masked_mse(pred, y, normalized_train.mask);
      const double lv = double(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           " batch " + std::to_string(bi + 1));
      }
      backward(loss);
      opt.step();
      for (auto& p : params) p.tensor.zero_grad();
      loss_sum += lv * double(batches[bi].size());
      sample_count += int64_t(batches[bi].size());
    }
    const double epoch_loss = loss_sum / double(sample_count);
    result.loss_history.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }
  return result;
}

}  // namespace stpf
