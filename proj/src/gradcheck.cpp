#include "boss/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace boss {

double GradcheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradcheckReport gradcheck(std::span<ParameterStore* const> stores, const BlockFn& block, const Shape& input_shape,
                          double tolerance, std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  ParameterStore input_store;
  Tensor& input = input_store.add("input", Tensor(input_shape));
  for (double& v : input.data) v = normal(rng);

  // Projection weights fixed on the first evaluation.
  std::vector<double> projection;
  auto evaluate = [&](Tape& tape) {
    Var out = block(tape, tape.param(input_store, "input"));
    if (projection.empty()) {
      projection.resize(out.value().size());
      for (double& v : projection) v = normal(rng);
    }
    Var r = tape.constant(Tensor(out.shape(), projection));
    return sum(mul(out, r));
  };

  {
    Tape tape(true);
    Var loss = evaluate(tape);
    tape.backward(loss);
  }
  for (auto* s : stores) {
    for (auto& [id, p] : s->params()) {
      if (!p.grad) p.grad = std::vector<double>(p.size(), 0.0);
    }
  }

  auto loss_value = [&]() {
    Tape tape(false);
    return evaluate(tape).value()[0];
  };

  auto rel_error = [](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
  };

  GradcheckReport report;
  report.tolerance = tolerance;
  auto check_tensor = [&](const std::string& name, Tensor& t) {
    const std::vector<double> analytic = *t.grad;
    double worst = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + h;
      const double up = loss_value();
      t.data[i] = orig - h;
      const double down = loss_value();
      t.data[i] = orig;
      worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * h)));
    }
    report.entries.push_back({name, worst});
  };

  check_tensor("input", input);
  std::size_t index = 0;
  for (auto* s : stores) {
    for (auto& [id, p] : s->params()) check_tensor(std::to_string(index) + ":" + id, p);
    ++index;
  }
  report.passed = std::all_of(report.entries.begin(), report.entries.end(),
                              [&](const GradcheckEntry& e) { return e.max_rel_error < tolerance; });
  return report;
}

}  // namespace boss
