#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stpf/errors.hpp"

namespace stpf {

// Time series of 2-D property maps over a fixed masked grid. Frames are
// stored time-major, row-major, one float32 per cell; inactive cells carry 0
// in normalized form. Frame spacing is one month.
struct FrameStack {
  std::string property;             // pressure | oil_sat | gas_sat | water_sat | derived names
  int height = 0;
  int width = 0;
  std::vector<uint8_t> mask;        // height*width, nonzero = active
  std::vector<float> frames;        // frame_count * height * width

  static constexpr const char* time_unit = "months";

  int frame_count() const {
    const int64_t cells = int64_t(height) * width;
    return cells == 0 ? 0 : static_cast<int>(frames.size() / cells);
  }
  int64_t cells() const { return int64_t(height) * width; }
  int active_count() const;

  std::span<const float> frame(int t) const;
  std::span<float> frame(int t);
};

// FRMS container, little-endian:
//   magic "FRMS" | version u32=1 | name-length u16 + UTF-8 name |
//   T u32 | H u32 | W u32 | mask H*W bytes (0/1) | frames T*H*W float32
FrameStack load_framestack(const std::string& path);
void save_framestack(const FrameStack& fs, const std::string& path);

// CSV interchange: header "t,row,col,value"; a cell is active only if it is
// present in every frame, anything else is inactive and zero-filled.
FrameStack import_csv(const std::string& path, const std::string& property);

enum class NormKind { minmax, identity };

struct NormalizationSpec {
  NormKind kind = NormKind::identity;
  double min = 0.0;
  double max = 1.0;
};

// Saturations already live in [0,1]; everything else is min-max scaled with
// statistics taken from the training frames only.
NormKind normalization_kind_for(const std::string& property);

std::pair<FrameStack, NormalizationSpec> normalize(const FrameStack& fs, int train_frames);
FrameStack normalize_with(const FrameStack& fs, const NormalizationSpec& spec);
FrameStack denormalize(const FrameStack& fs, const NormalizationSpec& spec);

// Chronological split: first train_frames frames vs the rest.
std::pair<FrameStack, FrameStack> split(const FrameStack& fs, int train_frames);

}  // namespace stpf
