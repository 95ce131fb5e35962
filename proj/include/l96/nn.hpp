#ifndef L96_NN_HPP_
#define L96_NN_HPP_

#include "l96/common.hpp"
#include "l96/random.hpp"

#include <cmath>
#include <vector>

namespace l96::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Fully connected ReLU network whose weights live in a caller-owned flat
/// parameter vector starting at `offset`. Dense layer l stores W_l (out x in,
/// column-major) followed by b_l.
struct Mlp {
  std::vector<int> sizes;  // in, hidden..., out
  Index offset = 0;

  Mlp() = default;
  Mlp(std::vector<int> layer_sizes, Index param_offset)
      : sizes(std::move(layer_sizes)), offset(param_offset) {}

  int n_layers() const { return static_cast<int>(sizes.size()) - 1; }
  int in_dim() const { return sizes.front(); }
  int out_dim() const { return sizes.back(); }

  Index n_params() const {
    Index n = 0;
    for (int l = 0; l < n_layers(); ++l) n += Index(sizes[l + 1]) * sizes[l] + sizes[l + 1];
    return n;
  }
  Index weight_offset(int l) const {
    Index o = offset;
    for (int i = 0; i < l; ++i) o += Index(sizes[i + 1]) * sizes[i] + sizes[i + 1];
    return o;
  }
  Index bias_offset(int l) const { return weight_offset(l) + Index(sizes[l + 1]) * sizes[l]; }

  Eigen::Map<const MatrixXd> W(const VectorXd& theta, int l) const {
    return {theta.data() + weight_offset(l), sizes[l + 1], sizes[l]};
  }
  Eigen::Map<MatrixXd> W(VectorXd& theta, int l) const {
    return {theta.data() + weight_offset(l), sizes[l + 1], sizes[l]};
  }
  Eigen::Map<const VectorXd> b(const VectorXd& theta, int l) const {
    return {theta.data() + bias_offset(l), sizes[l + 1]};
  }
  Eigen::Map<VectorXd> b(VectorXd& theta, int l) const {
    return {theta.data() + bias_offset(l), sizes[l + 1]};
  }

  /// He-normal hidden layers, zero output layer (network starts at 0).
  void init(VectorXd& theta, NoiseStream& noise, bool zero_output = true) const {
    for (int l = 0; l < n_layers(); ++l) {
      auto w = W(theta, l);
      const bool last = l == n_layers() - 1;
      const double sd = std::sqrt(2.0 / sizes[l]);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = (last && zero_output) ? 0.0 : sd * noise.normal();
      b(theta, l).setZero();
    }
  }
};

/// Activations kept for the backward pass; acts[0] is the input.
struct MlpCache {
  std::vector<MatrixXd> acts;
};

/// Batched forward pass; rows of `in` are samples.
inline MatrixXd forward(const Mlp& net, const VectorXd& theta, const MatrixXd& in,
                        MlpCache* cache = nullptr) {
  MatrixXd h = in;
  if (cache) {
    cache->acts.resize(static_cast<std::size_t>(net.n_layers()));
  }
  for (int l = 0; l < net.n_layers(); ++l) {
    if (cache) cache->acts[static_cast<std::size_t>(l)] = h;
    MatrixXd z = h * net.W(theta, l).transpose();
    z.rowwise() += net.b(theta, l).transpose();
    if (l + 1 < net.n_layers()) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

/// Accumulates parameter gradients into `grad` (same layout as theta) and
/// returns d(loss)/d(input) for upstream gradient `d_out`.
inline MatrixXd backward(const Mlp& net, const VectorXd& theta, const MlpCache& cache,
                         const MatrixXd& d_out, VectorXd& grad) {
  MatrixXd g = d_out;
  for (int l = net.n_layers() - 1; l >= 0; --l) {
    const MatrixXd& h_prev = cache.acts[static_cast<std::size_t>(l)];
    net.W(grad, l).noalias() += g.transpose() * h_prev;
    net.b(grad, l) += g.colwise().sum().transpose();
    MatrixXd g_prev = g * net.W(theta, l);
    if (l > 0) g_prev = g_prev.cwiseProduct((h_prev.array() > 0.0).cast<double>().matrix());
    g = std::move(g_prev);
  }
  return g;
}

/// Adam with the usual bias correction.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  VectorXd m;
  VectorXd v;
  long t = 0;

  void step(VectorXd& theta, const VectorXd& grad) {
    if (m.size() != theta.size()) {
      m = VectorXd::Zero(theta.size());
      v = VectorXd::Zero(theta.size());
      t = 0;
    }
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace l96::nn

#endif  // L96_NN_HPP_
