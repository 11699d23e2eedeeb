#include "tevit/gradcheck.hpp"

#include <cmath>
#include <vector>

#include "tevit/common.hpp"

namespace tevit {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  if (step <= 0.0) throw ContractError("finite_diff_check: step must be positive");

  Tensor probe = x.detached();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = f(probe);
    if (loss.numel() != 1) {
      throw ContractError("finite_diff_check: f must return a scalar");
    }
    backward(loss);
    auto g = probe.grad();
    analytic.assign(g.begin(), g.end());
  }

  Tensor work = x.detached();
  auto wv = work.values();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < wv.size(); ++i) {
    const double saved = wv[i];
    wv[i] = saved + step;
    const double up = f(work).item();
    wv[i] = saved - step;
    const double down = f(work).item();
    wv[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite intermediate value");
    }
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace tevit
