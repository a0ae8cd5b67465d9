#include "rxf/gradcheck.hpp"

#include "rxf/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rxf {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
  loss.backward();

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    const std::int64_t n = p.numel();
    const Array analytic = p.has_grad() ? p.grad() : Array::Zero(n);
    std::vector<std::int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > options.max_elements_per_tensor) {
      // partial Fisher-Yates
      for (std::int64_t i = 0; i < options.max_elements_per_tensor; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng.next() % static_cast<std::uint64_t>(n - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(options.max_elements_per_tensor);
    }
    for (auto i : idx) {
      Scalar& x = p.values()[i];
      const Scalar saved = x;
      x = saved + options.step;
      const double fp = evaluate(loss_fn);
      x = saved - options.step;
      const double fm = evaluate(loss_fn);
      x = saved;
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[i];
      if (!std::isfinite(a)) throw std::runtime_error("grad_check: non-finite analytic gradient");
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      ++report.elements_checked;
      if (rel > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        std::ostringstream os;
        os << t << "[" << i << "]: analytic=" << a << ", numeric=" << numeric;
        if (rel >= report.max_rel_error) report.worst = os.str();
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace rxf
