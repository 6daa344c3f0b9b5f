#pragma once

#include <cstdint>
#include <vector>

#include "stpf/errors.hpp"

namespace stpf {

enum class SampleScheme { overlapping, nonoverlapping };

// An input/output window pair over a frame stack; both windows have the
// sample set's window length.
struct WindowPair {
  int input_begin = 0;
  int output_begin = 0;
};

struct SampleSet {
  SampleScheme scheme = SampleScheme::overlapping;
  int window = 0;
  int stride = 1;
  std::vector<WindowPair> samples;

  bool empty() const { return samples.empty(); }
  int count() const { return static_cast<int>(samples.size()); }
};

// Overlapping: output window is the input window shifted one step forward.
// Non-overlapping: output window is the next block of `window` frames.
// Too few frames yields an empty set, which is a signal, not an error.
SampleSet make_samples(int frame_count, int window, SampleScheme scheme, int stride = 1);

// Seeded shuffle of sample indices, chunked; the final partial batch is kept.
std::vector<std::vector<int>> make_batches(const SampleSet& set, int batch, uint64_t seed);

}  // namespace stpf
