#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>

namespace tedm::heads::detail {

// Limited-memory BFGS with Armijo backtracking. `f(x, g)` returns the
// objective and writes the gradient into g.
template <typename F>
Eigen::VectorXd lbfgs_minimize(F&& f, Eigen::VectorXd x, std::size_t max_iterations, double gradient_tolerance,
                               std::size_t memory = 10) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd g(n), g_new(n), x_new(n);
  double fx = f(x, g);
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= gradient_tolerance) break;
    // two-loop recursion
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    double gamma = 1.0 / std::max(1.0, g.norm());
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    Eigen::VectorXd d = gamma * q;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(d);
      d += s_hist[i] * (alpha[i] - beta);
    }
    d = -d;
    double slope = g.dot(d);
    if (slope >= 0) {  // not a descent direction; restart from steepest descent
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = -g / std::max(1.0, g.norm());
      slope = g.dot(d);
    }
    double step = 1.0;
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * d;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Eigen::VectorXd s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * std::max(1.0, s.squaredNorm())) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const bool stalled = std::abs(fx - f_new) <= 1e-15 * std::max(1.0, std::abs(fx));
    x.swap(x_new);
    g.swap(g_new);
    fx = f_new;
    if (stalled) break;
  }
  return x;
}

}  // namespace tedm::heads::detail
