#pragma once

#include <vector>

#include "stpf/framestack.hpp"
#include "stpf/layers.hpp"

namespace stpf {

using Frame = std::vector<float>;
using FrameSeq = std::vector<Frame>;

// Maps an L-frame window to an L-frame output window (normalized units).
struct WindowForecaster {
  virtual ~WindowForecaster() = default;
  virtual FrameSeq predict_window(const FrameSeq& window) = 0;

  // Batched variant; the default just loops.
  virtual std::vector<FrameSeq> predict_windows(const std::vector<FrameSeq>& windows);
};

// Inference-mode wrapper around a trained network.
class NetworkForecaster : public WindowForecaster {
 public:
  NetworkForecaster(Network<float>& net, int height, int width, int max_batch = 8)
      : net_(net), height_(height), width_(width), max_batch_(max_batch) {}

  FrameSeq predict_window(const FrameSeq& window) override;
  std::vector<FrameSeq> predict_windows(const std::vector<FrameSeq>& windows) override;

 private:
  Network<float>& net_;
  int height_, width_;
  int max_batch_;
};

// One prediction per overlapping window: the final output frame of window
// [t, t+L-1] is the prediction for frame t+L. Yields T-L frames aligned to
// ground-truth frames [L, T).
FrameSeq predict_training_frames(WindowForecaster& forecaster, const FrameStack& normalized,
                                 int window);

// Autoregressive multi-step forecast: forward the window, keep the last
// output frame, append it and drop the oldest. After `window` steps the
// inputs are entirely self-predicted.
FrameSeq rollout(WindowForecaster& forecaster, const FrameSeq& seed_window, int horizon);

// Last `window` frames of a stack, as a rollout seed.
FrameSeq tail_window(const FrameStack& fs, int window);

// Packs predicted frames into a stack that shares the source's grid and mask.
FrameStack frames_to_stack(const FrameSeq& frames, const FrameStack& like,
                           const std::string& property);

}  // namespace stpf
