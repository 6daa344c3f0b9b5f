#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stpf/rng.hpp"
#include "stpf/tensor.hpp"

namespace stpf {

enum class Mode { train, infer };
enum class CellKind { convlstm, stlstm };
enum class Activation { relu, sigmoid };

namespace detail {

// Glorot-style uniform init; fans follow the kernel layout [Cout,Cin,...].
template <typename T>
Tensor<T> glorot_uniform(Shape shape, Rng& rng) {
  int64_t receptive = 1;
  for (size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  const double fan_in = double(shape[1]) * double(receptive);
  const double fan_out = double(shape[0]) * double(receptive);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> data(size_t(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

}  // namespace detail

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
};

// ---------------------------------------------------------------------------

// Channel-wise batch normalization; gamma/beta are trainable, the moving
// statistics are not (4 parameters per channel, 2 of them trainable).
template <typename T>
struct BatchNorm {
  int channels = 0;
  T momentum = T(0.99);
  T epsilon = T(1e-3);
  Tensor<T> gamma, beta;
  std::vector<T> moving_mean, moving_var;

  static BatchNorm init(int channels, T momentum, T epsilon) {
    BatchNorm bn;
    bn.channels = channels;
    bn.momentum = momentum;
    bn.epsilon = epsilon;
    bn.gamma = Tensor<T>::filled({channels}, T(1), true);
    bn.beta = Tensor<T>::zeros({channels}, true);
    bn.moving_mean.assign(size_t(channels), T(0));
    bn.moving_var.assign(size_t(channels), T(1));
    return bn;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::infer) {
      return batchnorm_infer(x, gamma, beta, moving_mean, moving_var, epsilon);
    }
    std::vector<T> bm, bv;
    auto y = batchnorm_train(x, gamma, beta, epsilon, &bm, &bv);
    for (int c = 0; c < channels; ++c) {
      moving_mean[size_t(c)] = momentum * moving_mean[size_t(c)] + (T(1) - momentum) * bm[size_t(c)];
      moving_var[size_t(c)] = momentum * moving_var[size_t(c)] + (T(1) - momentum) * bv[size_t(c)];
    }
    return y;
  }

  int64_t param_count() const { return 4 * int64_t(channels); }
  int64_t trainable_count() const { return 2 * int64_t(channels); }
};

// ---------------------------------------------------------------------------

// 4-gate convolutional LSTM cell, no peephole terms. Gate weights are stored
// fused along the output-channel axis in the fixed order i, f, g, o.
template <typename T>
struct ConvLstm {
  int in_channels = 0;
  int filters = 0;
  int kh = 0, kw = 0;
  Tensor<T> w_x;  // [4F, Cin, kh, kw]
  Tensor<T> w_h;  // [4F, F, kh, kw]
  Tensor<T> b;    // [4F]

  static ConvLstm init(int in_channels, int filters, int kh, int kw, Rng& rng) {
    ConvLstm cell;
    cell.in_channels = in_channels;
    cell.filters = filters;
    cell.kh = kh;
    cell.kw = kw;
    cell.w_x = detail::glorot_uniform<T>({4 * filters, in_channels, kh, kw}, rng);
    cell.w_h = detail::glorot_uniform<T>({4 * filters, filters, kh, kw}, rng);
    // forget-gate bias 1 stabilizes early training
    std::vector<T> bias(size_t(4) * filters, T(0));
    for (int i = filters; i < 2 * filters; ++i) bias[size_t(i)] = T(1);
    cell.b = Tensor<T>::from_data({4 * filters}, std::move(bias), true);
    return cell;
  }

  struct State {
    Tensor<T> h;  // hidden map, in (-1,1)
    Tensor<T> c;  // temporal cell state
  };

  State zero_state(int batch, int height, int width) const {
    return {Tensor<T>::zeros({batch, filters, height, width}),
            Tensor<T>::zeros({batch, filters, height, width})};
  }

  // i = s(Wxi*x + Whi*h + bi); f = s(Wxf*x + Whf*h + bf);
  // g = tanh(Wxg*x + Whg*h + bg); c' = f.c + i.g;
  // o = s(Wxo*x + Who*h + bo);  h' = o.tanh(c')
  State step(const Tensor<T>& x, const State& prev) const {
    auto z = add(conv2d_same(x, w_x, b), conv2d_same(prev.h, w_h));
    const int F = filters;
    auto i = sigmoid(slice_channels(z, 0, F));
    auto f = sigmoid(slice_channels(z, F, 2 * F));
    auto g = stpf::tanh(slice_channels(z, 2 * F, 3 * F));
    auto o = sigmoid(slice_channels(z, 3 * F, 4 * F));
    auto c = add(mul(f, prev.c), mul(i, g));
    auto h = mul(o, stpf::tanh(c));
    return {h, c};
  }

  // Return-sequences pass over [B,Cin,D,H,W]; states start at zero.
  Tensor<T> forward_sequence(const Tensor<T>& x) const {
    const int B = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    State s = zero_state(B, H, W);
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(D));
    for (int t = 0; t < D; ++t) {
      s = step(slice_depth(x, t), s);
      outs.push_back(s.h);
    }
    return stack_depth(outs);
  }

  std::vector<ParamRef<T>> params(const std::string& prefix) const {
    return {{prefix + ".w_x", w_x}, {prefix + ".w_h", w_h}, {prefix + ".b", b}};
  }

  int64_t param_count() const { return w_x.size() + w_h.size() + b.size(); }
};

// ---------------------------------------------------------------------------

// Dual-memory recurrent cell: a temporal memory C updated across time and a
// spatial memory M passed through the layer stack within a time step, fused
// into the hidden state by a 1x1 convolution over [C, M].
template <typename T>
struct StLstm {
  int in_channels = 0;
  int filters = 0;       // channels of H, C
  int mem_channels = 0;  // channels of M, uniform across the stack
  int kh = 0, kw = 0;

  Tensor<T> w_xg, w_hg, b_g;
  Tensor<T> w_xi, w_hi, b_i;
  Tensor<T> w_xf, w_hf, b_f;
  Tensor<T> w_xg2, w_mg, b_g2;
  Tensor<T> w_xi2, w_mi, b_i2;
  Tensor<T> w_xf2, w_mf, b_f2;
  Tensor<T> w_xo, w_ho, w_co, w_mo, b_o;
  Tensor<T> w_fuse;  // [F, F+Cm, 1, 1], no bias

  static StLstm init(int in_channels, int filters, int mem_channels, int kh, int kw, Rng& rng) {
    StLstm cell;
    cell.in_channels = in_channels;
    cell.filters = filters;
    cell.mem_channels = mem_channels;
    cell.kh = kh;
    cell.kw = kw;
    const int F = filters, Cm = mem_channels, Ci = in_channels;
    auto conv = [&](int co, int ci) { return detail::glorot_uniform<T>({co, ci, kh, kw}, rng); };
    auto bias = [&](int co, T fill) { return Tensor<T>::filled({co}, fill, true); };

    cell.w_xg = conv(F, Ci);
    cell.w_hg = conv(F, F);
    cell.b_g = bias(F, T(0));
    cell.w_xi = conv(F, Ci);
    cell.w_hi = conv(F, F);
    cell.b_i = bias(F, T(0));
    cell.w_xf = conv(F, Ci);
    cell.w_hf = conv(F, F);
    cell.b_f = bias(F, T(1));
    cell.w_xg2 = conv(Cm, Ci);
    cell.w_mg = conv(Cm, Cm);
    cell.b_g2 = bias(Cm, T(0));
    cell.w_xi2 = conv(Cm, Ci);
    cell.w_mi = conv(Cm, Cm);
    cell.b_i2 = bias(Cm, T(0));
    cell.w_xf2 = conv(Cm, Ci);
    cell.w_mf = conv(Cm, Cm);
    cell.b_f2 = bias(Cm, T(1));
    cell.w_xo = conv(F, Ci);
    cell.w_ho = conv(F, F);
    cell.w_co = conv(F, F);
    cell.w_mo = conv(F, Cm);
    cell.b_o = bias(F, T(0));
    cell.w_fuse = detail::glorot_uniform<T>({F, F + Cm, 1, 1}, rng);
    return cell;
  }

  struct StepOut {
    Tensor<T> h, c, m;
  };

  // g  = tanh(Wxg*x + Whg*h + bg)        i  = s(Wxi*x + Whi*h + bi)
  // f  = s(Wxf*x + Whf*h + bf)           c' = f.c + i.g
  // g' = tanh(W'xg*x + Wmg*m + b'g)      i' = s(W'xi*x + Wmi*m + b'i)
  // f' = s(W'xf*x + Wmf*m + b'f)         m' = f'.m + i'.g'
  // o  = s(Wxo*x + Who*h + Wco*c' + Wmo*m' + bo)
  // h' = o.tanh(W1x1 * [c', m'])
  StepOut step(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c,
               const Tensor<T>& m) const {
    auto g = stpf::tanh(add(conv2d_same(x, w_xg, b_g), conv2d_same(h, w_hg)));
    auto i = sigmoid(add(conv2d_same(x, w_xi, b_i), conv2d_same(h, w_hi)));
    auto f = sigmoid(add(conv2d_same(x, w_xf, b_f), conv2d_same(h, w_hf)));
    auto c2 = add(mul(f, c), mul(i, g));

    auto g2 = stpf::tanh(add(conv2d_same(x, w_xg2, b_g2), conv2d_same(m, w_mg)));
    auto i2 = sigmoid(add(conv2d_same(x, w_xi2, b_i2), conv2d_same(m, w_mi)));
    auto f2 = sigmoid(add(conv2d_same(x, w_xf2, b_f2), conv2d_same(m, w_mf)));
    auto m2 = add(mul(f2, m), mul(i2, g2));

    auto o = sigmoid(add(add(conv2d_same(x, w_xo, b_o), conv2d_same(h, w_ho)),
                         add(conv2d_same(c2, w_co), conv2d_same(m2, w_mo))));
    auto h2 = mul(o, stpf::tanh(conv2d_same(concat_channels(c2, m2), w_fuse)));
    return {h2, c2, m2};
  }

  std::vector<ParamRef<T>> params(const std::string& p) const {
    return {{p + ".w_xg", w_xg},   {p + ".w_hg", w_hg}, {p + ".b_g", b_g},
            {p + ".w_xi", w_xi},   {p + ".w_hi", w_hi}, {p + ".b_i", b_i},
            {p + ".w_xf", w_xf},   {p + ".w_hf", w_hf}, {p + ".b_f", b_f},
            {p + ".w_xg2", w_xg2}, {p + ".w_mg", w_mg}, {p + ".b_g2", b_g2},
            {p + ".w_xi2", w_xi2}, {p + ".w_mi", w_mi}, {p + ".b_i2", b_i2},
            {p + ".w_xf2", w_xf2}, {p + ".w_mf", w_mf}, {p + ".b_f2", b_f2},
            {p + ".w_xo", w_xo},   {p + ".w_ho", w_ho}, {p + ".w_co", w_co},
            {p + ".w_mo", w_mo},   {p + ".b_o", b_o},   {p + ".w_fuse", w_fuse}};
  }

  // One pre-activation per bias (six memory gates plus the output gate).
  int gate_block_count() const {
    int n = 0;
    for (const auto& pr : params("c")) {
      if (pr.name.find(".b_") != std::string::npos) ++n;
    }
    return n;
  }
  int fusion_conv_count() const { return 1; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& pr : params("c")) n += pr.tensor.size();
    return n;
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct Conv3dLayer {
  int in_channels = 0;
  int filters = 0;
  int kd = 0, kh = 0, kw = 0;
  Activation activation = Activation::relu;
  Tensor<T> w;  // [F, Cin, kd, kh, kw]
  Tensor<T> b;  // [F]

  static Conv3dLayer init(int in_channels, int filters, int kd, int kh, int kw, Activation act,
                          Rng& rng) {
    Conv3dLayer layer;
    layer.in_channels = in_channels;
    layer.filters = filters;
    layer.kd = kd;
    layer.kh = kh;
    layer.kw = kw;
    layer.activation = act;
    layer.w = detail::glorot_uniform<T>({filters, in_channels, kd, kh, kw}, rng);
    layer.b = Tensor<T>::zeros({filters}, true);
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = conv3d_same(x, w, b);
    return activation == Activation::relu ? relu(y) : sigmoid(y);
  }

  std::vector<ParamRef<T>> params(const std::string& prefix) const {
    return {{prefix + ".w", w}, {prefix + ".b", b}};
  }

  int64_t param_count() const { return w.size() + b.size(); }
};

// ---------------------------------------------------------------------------

// BN(1) -> recurrent(filters1, return sequences) -> BN(filters1)
//       -> recurrent(filters2, return sequences) -> BN(filters2)
//       -> conv3D(conv3d_filters, relu) -> conv3D(1, 1x1x1, sigmoid)
struct NetworkConfig {
  CellKind cell = CellKind::convlstm;
  int in_channels = 1;
  int filters1 = 16;
  int filters2 = 8;
  int kernel = 3;
  int conv3d_filters = 4;
  int conv3d_kernel = 3;
  int mem_channels = 16;  // spatial-memory width when cell == stlstm
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
};

struct ParamCountRow {
  std::string layer;
  int64_t params = 0;
  int64_t trainable = 0;
};

struct ParamCountTable {
  std::vector<ParamCountRow> rows;
  int64_t total = 0;
  int64_t trainable = 0;
};

template <typename T>
struct Network {
  NetworkConfig config;
  BatchNorm<T> bn1, bn2, bn3;
  std::optional<ConvLstm<T>> lstm1, lstm2;
  std::optional<StLstm<T>> st1, st2;
  Conv3dLayer<T> conv_a, conv_b;

  static Network build(const NetworkConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    Network net;
    net.config = cfg;
    const T mom = T(cfg.bn_momentum), eps = T(cfg.bn_epsilon);
    net.bn1 = BatchNorm<T>::init(cfg.in_channels, mom, eps);
    if (cfg.cell == CellKind::convlstm) {
      net.lstm1 = ConvLstm<T>::init(cfg.in_channels, cfg.filters1, cfg.kernel, cfg.kernel, rng);
    } else {
      net.st1 = StLstm<T>::init(cfg.in_channels, cfg.filters1, cfg.mem_channels, cfg.kernel,
                                cfg.kernel, rng);
    }
    net.bn2 = BatchNorm<T>::init(cfg.filters1, mom, eps);
    if (cfg.cell == CellKind::convlstm) {
      net.lstm2 = ConvLstm<T>::init(cfg.filters1, cfg.filters2, cfg.kernel, cfg.kernel, rng);
    } else {
      net.st2 = StLstm<T>::init(cfg.filters1, cfg.filters2, cfg.mem_channels, cfg.kernel,
                                cfg.kernel, rng);
    }
    net.bn3 = BatchNorm<T>::init(cfg.filters2, mom, eps);
    net.conv_a = Conv3dLayer<T>::init(cfg.filters2, cfg.conv3d_filters, cfg.conv3d_kernel,
                                      cfg.conv3d_kernel, cfg.conv3d_kernel, Activation::relu,
                                      rng);
    net.conv_b = Conv3dLayer<T>::init(cfg.conv3d_filters, 1, 1, 1, 1, Activation::sigmoid, rng);
    return net;
  }

  // window: [B, L, H, W, 1] -> [B, L, H, W, 1], every output in (0,1).
  // Recurrent states start at zero for each window.
  Tensor<T> forward(const Tensor<T>& window, Mode mode) {
    if (window.ndim() != 5 || window.dim(4) != config.in_channels) {
      throw DimError("network forward: expected [B,L,H,W," +
                     std::to_string(config.in_channels) + "], got " +
                     shape_str(window.shape()));
    }
    if (config.in_channels != 1) {
      throw DimError("network forward: single-channel windows only");
    }
    const int B = window.dim(0), L = window.dim(1), H = window.dim(2), W = window.dim(3);
    // [B,L,H,W,1] and [B,1,L,H,W] share the same row-major layout
    auto x = reshape(window, {B, 1, L, H, W});

    Tensor<T> seq;
    if (config.cell == CellKind::convlstm) {
      seq = bn3.forward(lstm2->forward_sequence(bn2.forward(
                lstm1->forward_sequence(bn1.forward(x, mode)), mode)),
            mode);
    } else {
      seq = bn3.forward(stlstm_sequence(bn1.forward(x, mode), mode), mode);
    }
    auto y = conv_b.forward(conv_a.forward(seq));
    return reshape(y, {B, L, H, W, 1});
  }

  std::vector<ParamRef<T>> trainable_params() {
    std::vector<ParamRef<T>> out;
    auto bn = [&out](BatchNorm<T>& b, const std::string& prefix) {
      out.push_back({prefix + ".gamma", b.gamma});
      out.push_back({prefix + ".beta", b.beta});
    };
    bn(bn1, "bn1");
    append(out, config.cell == CellKind::convlstm ? lstm1->params("rnn1") : st1->params("rnn1"));
    bn(bn2, "bn2");
    append(out, config.cell == CellKind::convlstm ? lstm2->params("rnn2") : st2->params("rnn2"));
    bn(bn3, "bn3");
    append(out, conv_a.params("conv3d1"));
    append(out, conv_b.params("conv3d2"));
    return out;
  }

  ParamCountTable param_count() const {
    ParamCountTable t;
    const int64_t bn_total =
        bn1.param_count() + bn2.param_count() + bn3.param_count();
    const int64_t bn_train =
        bn1.trainable_count() + bn2.trainable_count() + bn3.trainable_count();
    const int64_t r1 = config.cell == CellKind::convlstm ? lstm1->param_count()
                                                         : st1->param_count();
    const int64_t r2 = config.cell == CellKind::convlstm ? lstm2->param_count()
                                                         : st2->param_count();
    const char* cell_name = config.cell == CellKind::convlstm ? "convLSTM" : "ST-LSTM";
    t.rows.push_back({std::string(cell_name) + " 1", r1, r1});
    t.rows.push_back({std::string(cell_name) + " 2", r2, r2});
    t.rows.push_back({"3D convolution 1", conv_a.param_count(), conv_a.param_count()});
    t.rows.push_back({"3D convolution 2", conv_b.param_count(), conv_b.param_count()});
    t.rows.push_back({"All batch normalizations", bn_total, bn_train});
    for (const auto& r : t.rows) {
      t.total += r.params;
      t.trainable += r.trainable;
    }
    return t;
  }

 private:
  static void append(std::vector<ParamRef<T>>& dst, std::vector<ParamRef<T>> src) {
    for (auto& p : src) dst.push_back(std::move(p));
  }

  // Lockstep pass: the spatial memory climbs the stack within a time step and
  // re-enters the bottom layer at the next step from the top layer. The
  // between-layer normalization runs per step; sequence-wide statistics would
  // depend on later hidden states through that memory path.
  Tensor<T> stlstm_sequence(const Tensor<T>& x, Mode mode) {
    const int B = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    auto h1 = Tensor<T>::zeros({B, config.filters1, H, W});
    auto c1 = Tensor<T>::zeros({B, config.filters1, H, W});
    auto h2 = Tensor<T>::zeros({B, config.filters2, H, W});
    auto c2 = Tensor<T>::zeros({B, config.filters2, H, W});
    auto m = Tensor<T>::zeros({B, config.mem_channels, H, W});
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(D));
    for (int t = 0; t < D; ++t) {
      auto s1 = st1->step(slice_depth(x, t), h1, c1, m);
      h1 = s1.h;
      c1 = s1.c;
      auto s2 = st2->step(bn2.forward(s1.h, mode), h2, c2, s1.m);
      h2 = s2.h;
      c2 = s2.c;
      m = s2.m;
      outs.push_back(s2.h);
    }
    return stack_depth(outs);
  }
};

}  // namespace stpf
