#include "stpf/forecast.hpp"

#include <algorithm>

namespace stpf {

std::vector<FrameSeq> WindowForecaster::predict_windows(const std::vector<FrameSeq>& windows) {
  std::vector<FrameSeq> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(predict_window(w));
  return out;
}

FrameSeq NetworkForecaster::predict_window(const FrameSeq& window) {
  return predict_windows({window}).front();
}

std::vector<FrameSeq> NetworkForecaster::predict_windows(const std::vector<FrameSeq>& windows) {
  std::vector<FrameSeq> out;
  out.reserve(windows.size());
  const int64_t cells = int64_t(height_) * width_;
  for (size_t begin = 0; begin < windows.size(); begin += size_t(max_batch_)) {
    const size_t end = std::min(windows.size(), begin + size_t(max_batch_));
    const int B = int(end - begin);
    const int L = int(windows[begin].size());
    std::vector<float> data(size_t(B) * L * cells);
    for (int b = 0; b < B; ++b) {
      const auto& w = windows[begin + size_t(b)];
      if (int(w.size()) != L) throw UsageError("predict_windows: ragged window lengths");
      for (int l = 0; l < L; ++l) {
        if (int64_t(w[size_t(l)].size()) != cells) {
          throw DimError("predict_windows: frame size does not match grid");
        }
        std::copy(w[size_t(l)].begin(), w[size_t(l)].end(),
                  data.begin() + (size_t(b) * L + size_t(l)) * size_t(cells));
      }
    }
    auto x = Tensor<float>::from_data({B, L, height_, width_, 1}, std::move(data));
    auto y = net_.forward(x, Mode::infer);
    for (int b = 0; b < B; ++b) {
      FrameSeq seq(size_t(L));
      for (int l = 0; l < L; ++l) {
        const float* p = y.data().data() + (size_t(b) * L + size_t(l)) * size_t(cells);
        seq[size_t(l)].assign(p, p + cells);
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

FrameSeq predict_training_frames(WindowForecaster& forecaster, const FrameStack& normalized,
                                 int window) {
  const int T = normalized.frame_count();
  if (window < 1) throw UsageError("predict_training_frames: window must be >= 1");
  if (T < window + 1) throw UsageError("predict_training_frames: need at least window+1 frames");

  std::vector<FrameSeq> inputs;
  inputs.reserve(size_t(T - window));
  for (int i = 0; i + window < T; ++i) {
    FrameSeq w(size_t(window));
    for (int l = 0; l < window; ++l) {
      auto f = normalized.frame(i + l);
      w[size_t(l)].assign(f.begin(), f.end());
    }
    inputs.push_back(std::move(w));
  }
  auto outputs = forecaster.predict_windows(inputs);
  FrameSeq predictions;
  predictions.reserve(outputs.size());
  for (auto& o : outputs) predictions.push_back(std::move(o.back()));
  return predictions;
}

FrameSeq rollout(WindowForecaster& forecaster, const FrameSeq& seed_window, int horizon) {
  if (horizon < 0) throw UsageError("rollout: negative horizon");
  if (seed_window.empty()) throw UsageError("rollout: empty seed window");
  FrameSeq window = seed_window;
  FrameSeq predicted;
  predicted.reserve(size_t(horizon));
  for (int step = 0; step < horizon; ++step) {
    auto out = forecaster.predict_window(window);
    if (out.size() != window.size()) {
      throw UsageError("rollout: forecaster changed the window length");
    }
    Frame next = std::move(out.back());
    window.erase(window.begin());
    window.push_back(next);
    predicted.push_back(std::move(next));
  }
  return predicted;
}

FrameSeq tail_window(const FrameStack& fs, int window) {
  const int T = fs.frame_count();
  if (window < 1 || window > T) throw UsageError("tail_window: window out of range");
  FrameSeq out(size_t(window));
  for (int l = 0; l < window; ++l) {
    auto f = fs.frame(T - window + l);
    out[size_t(l)].assign(f.begin(), f.end());
  }
  return out;
}

FrameStack frames_to_stack(const FrameSeq& frames, const FrameStack& like,
                           const std::string& property) {
  FrameStack out;
  out.property = property;
  out.height = like.height;
  out.width = like.width;
  out.mask = like.mask;
  out.frames.reserve(frames.size() * size_t(like.cells()));
  for (const auto& f : frames) {
    if (int64_t(f.size()) != like.cells()) {
      throw DimError("frames_to_stack: frame size does not match grid");
    }
    out.frames.insert(out.frames.end(), f.begin(), f.end());
  }
  return out;
}

}  // namespace stpf
