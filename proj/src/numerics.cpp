#include "transfed/numerics.hpp"

namespace transfed::numerics {

AdamState AdamState::for_params(const ParameterSet& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  return s;
}

void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state) {
  require_same_layout(params, grads, "adam_step gradients");
  require_same_layout(params, state.first_moment, "adam_step first moment");
  require_same_layout(params, state.second_moment, "adam_step second moment");

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double m_correction = 1.0 - std::pow(c.beta1, t);
  const double v_correction = 1.0 - std::pow(c.beta2, t);
  const double decay = c.learning_rate * c.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    const auto& g = grads[i].value;
    auto& m = state.first_moment[i].value;
    auto& v = state.second_moment[i].value;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
    p.array() -= c.learning_rate * (m.array() / m_correction) /
                 ((v.array() / v_correction).sqrt() + c.epsilon);
    if (decay != 0.0) p -= decay * p;
  }
}

}  // namespace transfed::numerics
