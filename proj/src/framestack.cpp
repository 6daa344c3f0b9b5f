#include "stpf/framestack.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace stpf {

namespace {

constexpr char kMagic[4] = {'F', 'R', 'M', 'S'};
constexpr uint32_t kVersion = 1;
// Guards against absurd headers before allocating.
constexpr int64_t kMaxExtent = 1 << 20;
constexpr int64_t kMaxTotal = int64_t(1) << 31;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }

struct Reader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  void need(size_t k, const char* what) const {
    if (off + k > n) {
      throw FormatError(std::string("truncated file: ") + what + " at byte offset " +
                        std::to_string(off));
    }
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = uint16_t(p[off]) | uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  const uint8_t* bytes(size_t k, const char* what) {
    need(k, what);
    const uint8_t* q = p + off;
    off += k;
    return q;
  }
};

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw FormatError("read failed for " + path);
  return buf;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw FormatError("write failed for " + path);
}

}  // namespace

int FrameStack::active_count() const {
  int n = 0;
  for (uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

std::span<const float> FrameStack::frame(int t) const {
  if (t < 0 || t >= frame_count()) throw UsageError("frame index out of range");
  return {frames.data() + int64_t(t) * cells(), size_t(cells())};
}

std::span<float> FrameStack::frame(int t) {
  if (t < 0 || t >= frame_count()) throw UsageError("frame index out of range");
  return {frames.data() + int64_t(t) * cells(), size_t(cells())};
}

void save_framestack(const FrameStack& fs, const std::string& path) {
  if (fs.cells() <= 0 || int64_t(fs.mask.size()) != fs.cells()) {
    throw UsageError("save_framestack: inconsistent grid/mask");
  }
  if (fs.frames.size() % size_t(fs.cells()) != 0) {
    throw UsageError("save_framestack: frames not a multiple of grid size");
  }
  if (fs.property.size() > std::numeric_limits<uint16_t>::max()) {
    throw UsageError("save_framestack: property name too long");
  }
  std::string out;
  out.reserve(32 + fs.mask.size() + 4 * fs.frames.size());
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u16(out, uint16_t(fs.property.size()));
  out.append(fs.property);
  put_u32(out, uint32_t(fs.frame_count()));
  put_u32(out, uint32_t(fs.height));
  put_u32(out, uint32_t(fs.width));
  for (uint8_t m : fs.mask) out.push_back(char(m ? 1 : 0));
  for (float v : fs.frames) put_f32(out, v);
  write_file(path, out);
}

FrameStack load_framestack(const std::string& path) {
  const auto buf = read_file(path);
  Reader r{buf.data(), buf.size()};

  const uint8_t* magic = r.bytes(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad magic at byte offset 0 in " + path);
  }
  const uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const uint16_t name_len = r.u16("property-name length");
  const uint8_t* name = r.bytes(name_len, "property name");

  FrameStack fs;
  fs.property.assign(reinterpret_cast<const char*>(name), name_len);
  const int64_t T = r.u32("frame count");
  const int64_t H = r.u32("height");
  const int64_t W = r.u32("width");
  if (H <= 0 || W <= 0 || H > kMaxExtent || W > kMaxExtent || T < 0 ||
      T * H * W > kMaxTotal) {
    throw FormatError("dimension overflow T=" + std::to_string(T) + " H=" + std::to_string(H) +
                      " W=" + std::to_string(W) + " at byte offset " +
                      std::to_string(r.off - 12));
  }
  fs.height = int(H);
  fs.width = int(W);
  const uint8_t* mask = r.bytes(size_t(H * W), "mask");
  fs.mask.assign(mask, mask + H * W);
  fs.frames.resize(size_t(T * H * W));
  for (auto& v : fs.frames) v = r.f32("frame data");
  if (r.off != buf.size()) {
    throw FormatError("trailing bytes at byte offset " + std::to_string(r.off));
  }
  return fs;
}

FrameStack import_csv(const std::string& path, const std::string& property) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,row,col,value", 0) != 0) {
    throw FormatError("expected header 't,row,col,value' in " + path);
  }

  struct Cell {
    int t, row, col;
    bool operator<(const Cell& o) const {
      return std::tie(t, row, col) < std::tie(o.t, o.row, o.col);
    }
  };
  std::map<Cell, float> entries;
  int max_t = -1, max_row = -1, max_col = -1;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    long vals[3];
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(ss, tok, ',')) {
        throw FormatError("short row at line " + std::to_string(line_no));
      }
      try {
        vals[i] = std::stol(tok);
      } catch (const std::exception&) {
        throw FormatError("bad integer '" + tok + "' at line " + std::to_string(line_no));
      }
      if (vals[i] < 0) throw FormatError("negative index at line " + std::to_string(line_no));
    }
    if (!std::getline(ss, tok)) {
      throw FormatError("missing value at line " + std::to_string(line_no));
    }
    float value;
    try {
      value = std::stof(tok);
    } catch (const std::exception&) {
      throw FormatError("bad value '" + tok + "' at line " + std::to_string(line_no));
    }
    const Cell c{int(vals[0]), int(vals[1]), int(vals[2])};
    if (!entries.emplace(c, value).second) {
      throw FormatError("duplicate cell at line " + std::to_string(line_no));
    }
    max_t = std::max(max_t, c.t);
    max_row = std::max(max_row, c.row);
    max_col = std::max(max_col, c.col);
  }
  if (entries.empty()) throw FormatError("no data rows in " + path);

  FrameStack fs;
  fs.property = property;
  fs.height = max_row + 1;
  fs.width = max_col + 1;
  const int T = max_t + 1;
  fs.frames.assign(size_t(T) * fs.cells(), 0.0f);

  std::vector<int> presence(size_t(fs.cells()), 0);
  for (const auto& [c, v] : entries) {
    presence[size_t(c.row) * fs.width + c.col] += 1;
    fs.frames[(size_t(c.t) * fs.height + c.row) * fs.width + c.col] = v;
  }
  fs.mask.resize(size_t(fs.cells()));
  for (int64_t i = 0; i < fs.cells(); ++i) {
    fs.mask[size_t(i)] = presence[size_t(i)] == T ? 1 : 0;
  }
  // zero anything that landed on an inactive cell
  for (int t = 0; t < T; ++t) {
    auto f = fs.frame(t);
    for (int64_t i = 0; i < fs.cells(); ++i) {
      if (!fs.mask[size_t(i)]) f[size_t(i)] = 0.0f;
    }
  }
  return fs;
}

NormKind normalization_kind_for(const std::string& property) {
  if (property == "oil_sat" || property == "gas_sat" || property == "water_sat") {
    return NormKind::identity;
  }
  return NormKind::minmax;
}

std::pair<FrameStack, NormalizationSpec> normalize(const FrameStack& fs, int train_frames) {
  NormalizationSpec spec;
  spec.kind = normalization_kind_for(fs.property);
  if (spec.kind == NormKind::minmax) {
    if (train_frames < 1 || train_frames > fs.frame_count()) {
      throw UsageError("normalize: train_frames out of range");
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < train_frames; ++t) {
      auto f = fs.frame(t);
      for (int64_t i = 0; i < fs.cells(); ++i) {
        if (!fs.mask[size_t(i)]) continue;
        lo = std::min(lo, double(f[size_t(i)]));
        hi = std::max(hi, double(f[size_t(i)]));
      }
    }
    if (!(hi > lo)) {
      throw UsageError("normalize: degenerate range, min == max over training frames");
    }
    spec.min = lo;
    spec.max = hi;
  }
  return {normalize_with(fs, spec), spec};
}

FrameStack normalize_with(const FrameStack& fs, const NormalizationSpec& spec) {
  FrameStack out = fs;
  const int T = out.frame_count();
  for (int t = 0; t < T; ++t) {
    auto f = out.frame(t);
    for (int64_t i = 0; i < out.cells(); ++i) {
      if (!out.mask[size_t(i)]) {
        f[size_t(i)] = 0.0f;
      } else if (spec.kind == NormKind::minmax) {
        f[size_t(i)] = float((double(f[size_t(i)]) - spec.min) / (spec.max - spec.min));
      }
    }
  }
  return out;
}

FrameStack denormalize(const FrameStack& fs, const NormalizationSpec& spec) {
  if (spec.kind == NormKind::minmax && !(spec.max > spec.min)) {
    throw UsageError("denormalize: degenerate range");
  }
  FrameStack out = fs;
  const int T = out.frame_count();
  for (int t = 0; t < T; ++t) {
    auto f = out.frame(t);
    for (int64_t i = 0; i < out.cells(); ++i) {
      if (!out.mask[size_t(i)]) {
        f[size_t(i)] = 0.0f;
      } else if (spec.kind == NormKind::minmax) {
        f[size_t(i)] = float(double(f[size_t(i)]) * (spec.max - spec.min) + spec.min);
      }
    }
  }
  return out;
}

std::pair<FrameStack, FrameStack> split(const FrameStack& fs, int train_frames) {
  const int T = fs.frame_count();
  if (train_frames <= 0 || train_frames >= T) {
    throw UsageError("split: train_frames must be in (0, " + std::to_string(T) + ")");
  }
  FrameStack train = fs, test = fs;
  const size_t cut = size_t(train_frames) * size_t(fs.cells());
  train.frames.assign(fs.frames.begin(), fs.frames.begin() + cut);
  test.frames.assign(fs.frames.begin() + cut, fs.frames.end());
  return {train, test};
}

}  // namespace stpf
