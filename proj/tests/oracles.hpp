#pragma once

// Independent reference implementations used only by tests. Everything here
// is written directly from the defining formulas so it shares no code with
// the library paths it verifies.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Quadruple-loop zero-padded "same" 2-D convolution.
template <typename T>
std::vector<T> conv2d_same(const std::vector<T>& x, int B, int Cin, int H, int W,
                           const std::vector<T>& k, int Cout, int kh, int kw,
                           const std::vector<T>& bias) {
  std::vector<T> y(size_t(B) * Cout * H * W, T(0));
  const int ph = kh / 2, pw = kw / 2;
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc)
      for (int oh = 0; oh < H; ++oh)
        for (int ow = 0; ow < W; ++ow) {
          T acc = bias.empty() ? T(0) : bias[oc];
          for (int ic = 0; ic < Cin; ++ic)
            for (int kr = 0; kr < kh; ++kr)
              for (int kc = 0; kc < kw; ++kc) {
                const int ih = oh + kr - ph;
                const int iw = ow + kc - pw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((size_t(b) * Cin + ic) * H + ih) * W + iw] *
                       k[((size_t(oc) * Cin + ic) * kh + kr) * kw + kc];
              }
          y[((size_t(b) * Cout + oc) * H + oh) * W + ow] = acc;
        }
  return y;
}

template <typename T>
std::vector<T> conv3d_same(const std::vector<T>& x, int B, int Cin, int D, int H, int W,
                           const std::vector<T>& k, int Cout, int kd, int kh, int kw,
                           const std::vector<T>& bias) {
  std::vector<T> y(size_t(B) * Cout * D * H * W, T(0));
  const int pd = kd / 2, ph = kh / 2, pw = kw / 2;
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc)
      for (int od = 0; od < D; ++od)
        for (int oh = 0; oh < H; ++oh)
          for (int ow = 0; ow < W; ++ow) {
            T acc = bias.empty() ? T(0) : bias[oc];
            for (int ic = 0; ic < Cin; ++ic)
              for (int ks = 0; ks < kd; ++ks)
                for (int kr = 0; kr < kh; ++kr)
                  for (int kc = 0; kc < kw; ++kc) {
                    const int id = od + ks - pd;
                    const int ih = oh + kr - ph;
                    const int iw = ow + kc - pw;
                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                    acc += x[(((size_t(b) * Cin + ic) * D + id) * H + ih) * W + iw] *
                           k[(((size_t(oc) * Cin + ic) * kd + ks) * kh + kr) * kw + kc];
                  }
            y[(((size_t(b) * Cout + oc) * D + od) * H + oh) * W + ow] = acc;
          }
  return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar 4-gate LSTM step on a 1x1 grid (convolutions degenerate to scalar
// products). Gate order i, f, g, o.
struct ScalarLstmIn {
  double w_xi, w_hi, b_i;
  double w_xf, w_hf, b_f;
  double w_xg, w_hg, b_g;
  double w_xo, w_ho, b_o;
};

inline void scalar_lstm_step(const ScalarLstmIn& p, double x, double h, double c, double* h_out,
                             double* c_out) {
  const double i = sigmoid(p.w_xi * x + p.w_hi * h + p.b_i);
  const double f = sigmoid(p.w_xf * x + p.w_hf * h + p.b_f);
  const double g = std::tanh(p.w_xg * x + p.w_hg * h + p.b_g);
  const double o = sigmoid(p.w_xo * x + p.w_ho * h + p.b_o);
  const double c2 = f * c + i * g;
  *c_out = c2;
  *h_out = o * std::tanh(c2);
}

// Scalar dual-memory (spatio-temporal) cell step, straight from its defining
// equations: temporal gates update C, spatial gates update M, the output gate
// mixes X, H, C, M, and H comes from a 1x1 fusion of [C, M].
struct ScalarStLstmIn {
  double w_xg, w_hg, b_g;
  double w_xi, w_hi, b_i;
  double w_xf, w_hf, b_f;
  double w_xg2, w_mg, b_g2;
  double w_xi2, w_mi, b_i2;
  double w_xf2, w_mf, b_f2;
  double w_xo, w_ho, w_co, w_mo, b_o;
  double w_fuse_c, w_fuse_m;  // 1x1 kernel over the [C, M] concat
};

inline void scalar_stlstm_step(const ScalarStLstmIn& p, double x, double h, double c, double m,
                               double* h_out, double* c_out, double* m_out) {
  const double g = std::tanh(p.w_xg * x + p.w_hg * h + p.b_g);
  const double i = sigmoid(p.w_xi * x + p.w_hi * h + p.b_i);
  const double f = sigmoid(p.w_xf * x + p.w_hf * h + p.b_f);
  const double c2 = f * c + i * g;
  const double g2 = std::tanh(p.w_xg2 * x + p.w_mg * m + p.b_g2);
  const double i2 = sigmoid(p.w_xi2 * x + p.w_mi * m + p.b_i2);
  const double f2 = sigmoid(p.w_xf2 * x + p.w_mf * m + p.b_f2);
  const double m2 = f2 * m + i2 * g2;
  const double o = sigmoid(p.w_xo * x + p.w_ho * h + p.w_co * c2 + p.w_mo * m2 + p.b_o);
  *c_out = c2;
  *m_out = m2;
  *h_out = o * std::tanh(p.w_fuse_c * c2 + p.w_fuse_m * m2);
}

// Scalar Nesterov-Adam reference. State t is 1-based at update time.
struct ScalarNadam {
  double m = 0, v = 0;
  long t = 1;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-7;

  double step(double theta, double g) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double m_hat = m / (1.0 - std::pow(beta1, double(t + 1)));
    const double v_hat = v / (1.0 - std::pow(beta2, double(t)));
    const double g_hat = g / (1.0 - std::pow(beta1, double(t)));
    theta -= lr * (beta1 * m_hat + (1.0 - beta1) * g_hat) / (std::sqrt(v_hat) + eps);
    t += 1;
    return theta;
  }
};

// Structural similarity from its component statistics: means, sample standard
// deviations (N-1 divisor) and covariance over the given points.
inline double ssim_direct(const std::vector<double>& x, const std::vector<double>& y, double c1,
                          double c2) {
  const size_t n = x.size();
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double vx = 0, vy = 0, cxy = 0;
  for (size_t i = 0; i < n; ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cxy += (x[i] - mx) * (y[i] - my);
  }
  vx /= double(n - 1);
  vy /= double(n - 1);
  cxy /= double(n - 1);
  return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
         ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace oracle
