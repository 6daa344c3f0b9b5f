#include "stpf/samples.hpp"

#include <numeric>

#include "stpf/rng.hpp"

namespace stpf {

SampleSet make_samples(int frame_count, int window, SampleScheme scheme, int stride) {
  if (window < 1) throw UsageError("make_samples: window must be >= 1");
  if (stride < 1) throw UsageError("make_samples: stride must be >= 1");

  SampleSet set;
  set.scheme = scheme;
  set.window = window;
  set.stride = stride;

  const int shift = scheme == SampleScheme::overlapping ? 1 : window;
  // i + window - 1 + shift must stay within the stack
  const int last_start = frame_count - window - shift;
  for (int i = 0; i <= last_start; i += stride) {
    set.samples.push_back({i, i + shift});
  }
  return set;
}

std::vector<std::vector<int>> make_batches(const SampleSet& set, int batch, uint64_t seed) {
  if (batch < 1) throw UsageError("make_batches: batch must be >= 1");
  std::vector<int> idx(set.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());

  std::vector<std::vector<int>> batches;
  for (size_t i = 0; i < idx.size(); i += size_t(batch)) {
    const size_t end = std::min(idx.size(), i + size_t(batch));
    batches.emplace_back(idx.begin() + i, idx.begin() + end);
  }
  return batches;
}

}  // namespace stpf
