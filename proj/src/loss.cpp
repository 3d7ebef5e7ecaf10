// SPDX-License-Identifier: Apache-2.0
#include <lasd/loss.hpp>

#include <algorithm>
#include <cmath>

namespace lasd {

double TemperatureSchedule::at(int epoch) const {
  if (epoch < 0)
    throw Error("temperature: epoch must be non-negative, got " +
                std::to_string(epoch));
  const double tau = tau0 - alpha * epoch;
  if (!(tau > 0))
    throw Error("temperature: schedule reaches tau <= 0 at epoch " +
                std::to_string(epoch));
  return tau;
}

double temperature(int epoch) { return TemperatureSchedule{}.at(epoch); }

namespace {

double speaking_probability(double r_s, double r_ns, double tau) {
  const double d = (r_s - r_ns) / tau;
  // subtracting the larger logit keeps the exponent non-positive
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

void check_tau(double tau) {
  if (!(tau > 0))
    throw Error("softmax_temp: temperature must be positive, got " +
                std::to_string(tau));
}

template <typename T> std::size_t frame_count(const Tensor<T> &logits) {
  if (logits.shape().empty() || logits.shape().back() != 2)
    throw ShapeError("logits must end in an axis of 2, got " +
                     to_string(logits.shape()));
  return logits.size() / 2;
}

double clamp_p(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

} // namespace

template <typename T>
std::vector<double> softmax_temp(const Tensor<T> &logits, double tau) {
  check_tau(tau);
  const std::size_t n = frame_count(logits);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i)
    p[i] = speaking_probability(logits[2 * i], logits[2 * i + 1], tau);
  return p;
}

double sequence_loss(std::span<const double> p, std::span<const std::uint8_t> g) {
  if (p.size() != g.size())
    throw ShapeError("sequence_loss: " + std::to_string(p.size()) +
                     " probabilities but " + std::to_string(g.size()) +
                     " labels");
  if (p.empty())
    throw ShapeError("sequence_loss: empty sequence");
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_p(p[i]);
    acc += g[i] ? std::log(q) : std::log(1.0 - q);
  }
  return -acc / double(p.size());
}

template <typename T>
LossBreakdown combined_loss(const Tensor<T> &main_logits,
                            const Tensor<T> &visual_logits, const Labels &g,
                            double tau, double lambda) {
  LossBreakdown out;
  out.lambda = lambda;
  out.loss_av = sequence_loss(softmax_temp(main_logits, tau), g);
  out.loss_v = sequence_loss(softmax_temp(visual_logits, tau), g);
  out.loss_asd = out.loss_av + lambda * out.loss_v;
  return out;
}

template <typename T>
Var<T> temperature_bce(const Var<T> &logits, const Labels &g, double tau) {
  check_tau(tau);
  const Tensor<T> &z = logits.value();
  const std::size_t n = frame_count(z);
  if (g.size() != n)
    throw ShapeError("temperature_bce: " + std::to_string(n) +
                     " frames but " + std::to_string(g.size()) + " labels");
  auto p = softmax_temp(z, tau);
  const double loss = sequence_loss(p, g);
  Tensor<T> out({1});
  out[0] = T(loss);
  return record_op<T>(
    std::move(out), {&logits},
    [p = std::move(p), g, tau, n](OpNode<T> &self) {
      auto *dz = self.input_grad(0);
      if (!dz)
        return;
      const double scale = double(self.grad[0]) / double(n) / tau;
      for (std::size_t i = 0; i < n; ++i) {
        // the clamp is flat outside its range
        if (p[i] != clamp_p(p[i]))
          continue;
        const double d = (p[i] - double(g[i])) * scale;
        (*dz)[2 * i] += T(d);
        (*dz)[2 * i + 1] -= T(d);
      }
    });
}

#define LASD_INSTANTIATE(T)                                                    \
  template std::vector<double> softmax_temp(const Tensor<T> &, double);        \
  template LossBreakdown combined_loss(const Tensor<T> &, const Tensor<T> &,   \
                                       const Labels &, double, double);        \
  template Var<T> temperature_bce(const Var<T> &, const Labels &, double);

LASD_INSTANTIATE(float)
LASD_INSTANTIATE(double)
#undef LASD_INSTANTIATE

} // namespace lasd
