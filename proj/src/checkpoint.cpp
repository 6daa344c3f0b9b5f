#include "stpf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace stpf {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'S', 'T', 'P', 'F'};
constexpr uint32_t kVersion = 1;

const char* kB64Alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::vector<uint8_t>& in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (size_t i = 0; i < in.size(); i += 3) {
    uint32_t chunk = uint32_t(in[i]) << 16;
    if (i + 1 < in.size()) chunk |= uint32_t(in[i + 1]) << 8;
    if (i + 2 < in.size()) chunk |= uint32_t(in[i + 2]);
    out.push_back(kB64Alphabet[(chunk >> 18) & 63]);
    out.push_back(kB64Alphabet[(chunk >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? kB64Alphabet[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < in.size() ? kB64Alphabet[chunk & 63] : '=');
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& in) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(in.size() / 4 * 3);
  for (size_t i = 0; i < in.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=') {
        vals[k] = 0;
        ++pad;
      } else {
        vals[k] = value_of(c);
        if (vals[k] < 0 || pad > 0) throw FormatError("base64: invalid character");
      }
    }
    const uint32_t chunk = uint32_t(vals[0]) << 18 | uint32_t(vals[1]) << 12 |
                           uint32_t(vals[2]) << 6 | uint32_t(vals[3]);
    out.push_back(uint8_t(chunk >> 16));
    if (pad < 2) out.push_back(uint8_t(chunk >> 8));
    if (pad < 1) out.push_back(uint8_t(chunk));
  }
  return out;
}

void append_tensor(std::vector<float>& blob, const Tensor<float>& t) {
  blob.insert(blob.end(), t.data().begin(), t.data().end());
}

void append_vector(std::vector<float>& blob, const std::vector<float>& v) {
  blob.insert(blob.end(), v.begin(), v.end());
}

struct BlobReader {
  const float* p;
  size_t n;
  size_t off = 0;

  void read_into(std::span<float> dst, const char* what) {
    if (off + dst.size() > n) {
      throw FormatError(std::string("parameter blob too short for ") + what + " at float offset " +
                        std::to_string(off));
    }
    std::memcpy(dst.data(), p + off, dst.size() * sizeof(float));
    off += dst.size();
  }
  void read_tensor(Tensor<float>& t, const char* what) { read_into(t.mutable_data(), what); }
  void read_vector(std::vector<float>& v, const char* what) { read_into(v, what); }
};

// Declared layer order: bn1, recurrent 1, bn2, recurrent 2, bn3, conv3d 1,
// conv3d 2. Batch norms serialize gamma, beta, moving_mean, moving_var.
void build_blob(Network<float>& net, std::vector<float>& blob) {
  auto bn = [&](BatchNorm<float>& b) {
    append_tensor(blob, b.gamma);
    append_tensor(blob, b.beta);
    append_vector(blob, b.moving_mean);
    append_vector(blob, b.moving_var);
  };
  auto rnn = [&](int which) {
    if (net.config.cell == CellKind::convlstm) {
      auto& cell = which == 1 ? *net.lstm1 : *net.lstm2;
      append_tensor(blob, cell.w_x);
      append_tensor(blob, cell.w_h);
      append_tensor(blob, cell.b);
    } else {
      auto& cell = which == 1 ? *net.st1 : *net.st2;
      for (auto& p : cell.params("")) append_tensor(blob, p.tensor);
    }
  };
  bn(net.bn1);
  rnn(1);
  bn(net.bn2);
  rnn(2);
  bn(net.bn3);
  append_tensor(blob, net.conv_a.w);
  append_tensor(blob, net.conv_a.b);
  append_tensor(blob, net.conv_b.w);
  append_tensor(blob, net.conv_b.b);
}

void load_blob(Network<float>& net, BlobReader& r) {
  auto bn = [&](BatchNorm<float>& b, const char* what) {
    r.read_tensor(b.gamma, what);
    r.read_tensor(b.beta, what);
    r.read_vector(b.moving_mean, what);
    r.read_vector(b.moving_var, what);
  };
  auto rnn = [&](int which, const char* what) {
    if (net.config.cell == CellKind::convlstm) {
      auto& cell = which == 1 ? *net.lstm1 : *net.lstm2;
      r.read_tensor(cell.w_x, what);
      r.read_tensor(cell.w_h, what);
      r.read_tensor(cell.b, what);
    } else {
      auto& cell = which == 1 ? *net.st1 : *net.st2;
      for (auto& p : cell.params("")) {
        auto t = p.tensor;
        r.read_tensor(t, what);
      }
    }
  };
  bn(net.bn1, "bn1");
  rnn(1, "recurrent 1");
  bn(net.bn2, "bn2");
  rnn(2, "recurrent 2");
  bn(net.bn3, "bn3");
  r.read_tensor(net.conv_a.w, "conv3d 1");
  r.read_tensor(net.conv_a.b, "conv3d 1");
  r.read_tensor(net.conv_b.w, "conv3d 2");
  r.read_tensor(net.conv_b.b, "conv3d 2");
}

json layers_json(const NetworkConfig& c) {
  json bn1 = {{"kind", "batchnorm"},
              {"channels", c.in_channels},
              {"momentum", c.bn_momentum},
              {"epsilon", c.bn_epsilon}};
  json bn2 = bn1;
  bn2["channels"] = c.filters1;
  json bn3 = bn1;
  bn3["channels"] = c.filters2;
  const std::string cell = c.cell == CellKind::convlstm ? "convlstm" : "stlstm";
  json r1 = {{"kind", cell},
             {"in_channels", c.in_channels},
             {"filters", c.filters1},
             {"kernel", {c.kernel, c.kernel}},
             {"return_sequences", true}};
  json r2 = r1;
  r2["in_channels"] = c.filters1;
  r2["filters"] = c.filters2;
  if (c.cell == CellKind::stlstm) {
    r1["mem_channels"] = c.mem_channels;
    r2["mem_channels"] = c.mem_channels;
  }
  json c1 = {{"kind", "conv3d"},
             {"in_channels", c.filters2},
             {"filters", c.conv3d_filters},
             {"kernel", {c.conv3d_kernel, c.conv3d_kernel, c.conv3d_kernel}},
             {"activation", "relu"}};
  json c2 = {{"kind", "conv3d"},
             {"in_channels", c.conv3d_filters},
             {"filters", 1},
             {"kernel", {1, 1, 1}},
             {"activation", "sigmoid"}};
  return json::array({bn1, r1, bn2, r2, bn3, c1, c2});
}

NetworkConfig config_from_layers(const json& layers) {
  if (!layers.is_array() || layers.size() != 7) {
    throw FormatError("checkpoint header: expected 7 layers");
  }
  auto kind = [&](size_t i) { return layers[i].at("kind").get<std::string>(); };
  NetworkConfig c;
  if (kind(0) != "batchnorm" || kind(2) != "batchnorm" || kind(4) != "batchnorm" ||
      kind(5) != "conv3d" || kind(6) != "conv3d") {
    throw FormatError("checkpoint header: unexpected layer kinds");
  }
  const std::string cell = kind(1);
  if (cell != kind(3) || (cell != "convlstm" && cell != "stlstm")) {
    throw FormatError("checkpoint header: unexpected recurrent cell '" + cell + "'");
  }
  c.cell = cell == "convlstm" ? CellKind::convlstm : CellKind::stlstm;
  c.in_channels = layers[1].at("in_channels").get<int>();
  c.filters1 = layers[1].at("filters").get<int>();
  c.filters2 = layers[3].at("filters").get<int>();
  c.kernel = layers[1].at("kernel").at(0).get<int>();
  if (c.cell == CellKind::stlstm) c.mem_channels = layers[1].at("mem_channels").get<int>();
  c.conv3d_filters = layers[5].at("filters").get<int>();
  c.conv3d_kernel = layers[5].at("kernel").at(0).get<int>();
  c.bn_momentum = layers[0].at("momentum").get<double>();
  c.bn_epsilon = layers[0].at("epsilon").get<double>();
  return c;
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

}  // namespace

std::vector<float> parameter_blob(Network<float>& net) {
  std::vector<float> blob;
  blob.reserve(size_t(net.param_count().total));
  build_blob(net, blob);
  return blob;
}

void checkpoint_save(const std::string& path, Network<float>& net, const CheckpointMeta& meta) {
  json header;
  header["property"] = meta.property;
  header["layers"] = layers_json(net.config);
  header["normalization"] = {
      {"kind", meta.norm.kind == NormKind::minmax ? "minmax" : "identity"},
      {"min", meta.norm.min},
      {"max", meta.norm.max}};
  header["mask"] = base64_encode(meta.mask);
  header["grid"] = {{"height", meta.height}, {"width", meta.width}};
  header["seed"] = meta.seed;
  header["window"] = meta.window;
  header["train_frames"] = meta.train_frames;
  header["epochs"] = meta.loss_history.size();
  header["loss_history"] = meta.loss_history;

  const std::string header_str = header.dump();
  const auto blob = parameter_blob(net);
  const auto expected = net.param_count().total;
  if (int64_t(blob.size()) != expected) {
    throw UsageError("checkpoint: blob length " + std::to_string(blob.size()) +
                     " != param count " + std::to_string(expected));
  }

  std::string out;
  out.reserve(16 + header_str.size() + blob.size() * 4);
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, header_str.size());
  out.append(header_str);
  for (float v : blob) put_u32(out, std::bit_cast<uint32_t>(v));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw FormatError("write failed for " + path);
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 16) throw FormatError("truncated checkpoint at byte offset 0");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic at byte offset 0 in " + path);
  }
  uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= uint32_t(buf[4 + size_t(i)]) << (8 * i);
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                      " at byte offset 4");
  }
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= uint64_t(buf[8 + size_t(i)]) << (8 * i);
  if (16 + header_len > buf.size()) {
    throw FormatError("truncated checkpoint header at byte offset 16");
  }

  json header;
  try {
    header = json::parse(buf.begin() + 16, buf.begin() + 16 + std::ptrdiff_t(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header parse error: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    const NetworkConfig cfg = config_from_layers(header.at("layers"));
    out.net = Network<float>::build(cfg, 0);
    out.meta.property = header.at("property").get<std::string>();
    const auto& norm = header.at("normalization");
    out.meta.norm.kind =
        norm.at("kind").get<std::string>() == "minmax" ? NormKind::minmax : NormKind::identity;
    out.meta.norm.min = norm.at("min").get<double>();
    out.meta.norm.max = norm.at("max").get<double>();
    out.meta.mask = base64_decode(header.at("mask").get<std::string>());
    out.meta.height = header.at("grid").at("height").get<int>();
    out.meta.width = header.at("grid").at("width").get<int>();
    out.meta.seed = header.at("seed").get<uint64_t>();
    out.meta.window = header.at("window").get<int>();
    out.meta.train_frames = header.at("train_frames").get<int>();
    out.meta.loss_history = header.at("loss_history").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (int64_t(out.meta.mask.size()) != int64_t(out.meta.height) * out.meta.width) {
    throw FormatError("checkpoint header: mask length does not match grid");
  }

  const size_t blob_off = 16 + size_t(header_len);
  const size_t blob_bytes = buf.size() - blob_off;
  if (blob_bytes % 4 != 0) {
    throw FormatError("parameter blob has partial float at byte offset " +
                      std::to_string(blob_off));
  }
  std::vector<float> blob(blob_bytes / 4);
  for (size_t i = 0; i < blob.size(); ++i) {
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= uint32_t(buf[blob_off + i * 4 + size_t(k)]) << (8 * k);
    blob[i] = std::bit_cast<float>(v);
  }
  const int64_t expected = out.net.param_count().total;
  if (int64_t(blob.size()) != expected) {
    throw FormatError("parameter blob length " + std::to_string(blob.size()) +
                      " does not match declared layers (" + std::to_string(expected) + ")");
  }
  BlobReader reader{blob.data(), blob.size()};
  load_blob(out.net, reader);
  return out;
}

}  // namespace stpf
