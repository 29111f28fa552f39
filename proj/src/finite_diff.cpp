#include "trinity/finite_diff.hpp"

#include <cmath>
#include <stdexcept>

namespace trinity {

namespace {

double eval_at(const MultiTapeFn& f, std::span<const Tensor> xs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(xs.size());
  for (const Tensor& x : xs) vars.push_back(tape.input(x));
  Var out = f(tape, vars);
  return tape.value(out).scalar_value();
}

Tensor perturbed(const Tensor& t, int64_t coord, double delta) {
  std::vector<double> d(t.data().begin(), t.data().end());
  d[static_cast<size_t>(coord)] += delta;
  return Tensor::from_data(t.shape(), std::move(d));
}

}  // namespace

double finite_difference_check(const MultiTapeFn& f, std::span<const Tensor> xs, double h,
                               std::span<const std::pair<int, int64_t>> coords) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_check: h must be > 0");

  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : xs) vars.push_back(tape.input(x));
  Var out = f(tape, vars);
  std::vector<Tensor> analytic = tape.gradients(out, vars);

  std::vector<std::pair<int, int64_t>> probe(coords.begin(), coords.end());
  if (probe.empty()) {
    for (size_t i = 0; i < xs.size(); ++i) {
      for (int64_t c = 0; c < xs[i].numel(); ++c) probe.emplace_back(static_cast<int>(i), c);
    }
  }

  double worst = 0.0;
  std::vector<Tensor> work(xs.begin(), xs.end());
  for (auto [ti, coord] : probe) {
    const Tensor saved = work[static_cast<size_t>(ti)];
    work[static_cast<size_t>(ti)] = perturbed(saved, coord, h);
    const double fp = eval_at(f, work);
    work[static_cast<size_t>(ti)] = perturbed(saved, coord, -h);
    const double fm = eval_at(f, work);
    work[static_cast<size_t>(ti)] = saved;

    const double numeric = (fp - fm) / (2.0 * h);
    const double exact = analytic[static_cast<size_t>(ti)].at(coord);
    const double denom = std::max({std::fabs(exact), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(exact - numeric) / denom);
  }
  return worst;
}

double finite_difference_check(const TapeFn& f, const Tensor& x, double h) {
  MultiTapeFn wrapped = [&f](Tape& t, std::span<const Var> vs) { return f(t, vs[0]); };
  const Tensor xs[] = {x};
  return finite_difference_check(wrapped, xs, h);
}

}  // namespace trinity
