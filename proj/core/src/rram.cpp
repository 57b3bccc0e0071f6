#include "bnn/rram.hpp"

#include <cmath>

#include "bnn/rng.hpp"

namespace bnn {

namespace {

// Standard normal CDF via erfc; accurate deep into the lower tail.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / M_SQRT2); }

}  // namespace

void ResistanceDistribution::validate() const {
  if (!(sigma_log > 0.0) || !std::isfinite(mu_log))
    throw InvalidDistribution("ResistanceDistribution: sigma_log must be > 0");
}

const std::vector<ProgrammingCondition>& condition_catalogue() {
  static const std::vector<ProgrammingCondition> catalogue = {
      {"very_strong", 600.0, 2.5, 100.0, 1e-6, /*ber_is_upper_bound=*/true,
       120.0, 150.0, 100.0, /*cyclability_is_lower_bound=*/false},
      {"strong", 55.0, 2.5, 100.0, 9.7e-5, /*ber_is_upper_bound=*/false, 11.0,
       14.0, 1e4, /*cyclability_is_lower_bound=*/true},
      {"weak", 20.0, 1.5, 100.0, 3.3e-2, /*ber_is_upper_bound=*/false, 4.0,
       5.0, 1e6, /*cyclability_is_lower_bound=*/true},
  };
  return catalogue;
}

const ProgrammingCondition& lookup_condition(const std::string& name) {
  for (const auto& c : condition_catalogue())
    if (c.name == name) return c;
  throw Error("unknown programming condition: " + name);
}

double analytic_ber(const ResistanceDistribution& lrs,
                    const ResistanceDistribution& hrs, double read_threshold) {
  lrs.validate();
  hrs.validate();
  if (!(read_threshold > 0.0))
    throw InvalidDistribution("analytic_ber: read threshold must be > 0");
  if (!(hrs.mu_log >= lrs.mu_log))
    throw InvalidDistribution(
        "analytic_ber: hrs.mu_log must not be below lrs.mu_log");
  const double t = std::log(read_threshold);
  const double p_lrs_high = normal_cdf((lrs.mu_log - t) / lrs.sigma_log);
  const double p_hrs_low = normal_cdf((t - hrs.mu_log) / hrs.sigma_log);
  return 0.5 * p_lrs_high + 0.5 * p_hrs_low;
}

FittedCondition fit_condition_distributions(double target_ber) {
  if (!(target_ber > 0.0 && target_ber < 0.5))
    throw FitFailure("fit_condition_distributions: target " +
                     std::to_string(target_ber) + " outside (0, 0.5)");

  // Symmetric unit-sigma states with the threshold at the midpoint;
  // analytic_ber is then strictly decreasing in the separation.
  auto ber_at = [](double separation) {
    FittedCondition c;
    c.lrs = {0.0, 1.0};
    c.hrs = {separation, 1.0};
    c.read_threshold = std::exp(separation / 2.0);
    return c;
  };

  double lo = 0.0;    // ber -> 0.5
  double hi = 100.0;  // ber -> 0
  const double rel_tol = 0.01;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const FittedCondition c = ber_at(mid);
    const double b = analytic_ber(c.lrs, c.hrs, c.read_threshold);
    if (std::abs(b - target_ber) <= rel_tol * target_ber) return c;
    if (b > target_ber)
      lo = mid;
    else
      hi = mid;
  }
  throw FitFailure("fit_condition_distributions: no convergence for target " +
                   std::to_string(target_ber));
}

double monte_carlo_ber(const ResistanceDistribution& lrs,
                       const ResistanceDistribution& hrs,
                       double read_threshold, std::size_t n_samples,
                       std::uint64_t seed) {
  lrs.validate();
  hrs.validate();
  if (n_samples < 1000)
    throw InvalidDistribution("monte_carlo_ber: need at least 1000 samples");
  const double t = std::log(read_threshold);
  const std::size_t n_lrs = n_samples / 2;
  const std::size_t n_hrs = n_samples - n_lrs;

  rng::Stream rs(seed, "rram-mc");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < n_lrs; ++i)
    if (lrs.mu_log + lrs.sigma_log * rs.next_normal() > t) ++errors;
  for (std::size_t i = 0; i < n_hrs; ++i)
    if (hrs.mu_log + hrs.sigma_log * rs.next_normal() < t) ++errors;
  return static_cast<double>(errors) / static_cast<double>(n_samples);
}

ProgrammingCost programming_cost(std::size_t n_bits, double set_fraction,
                                 const ProgrammingCondition& condition) {
  if (!(set_fraction >= 0.0 && set_fraction <= 1.0))
    throw InvalidFraction("programming_cost: set_fraction " +
                          std::to_string(set_fraction) + " outside [0,1]");
  ProgrammingCost cost;
  cost.energy_pj =
      static_cast<double>(n_bits) * (set_fraction * condition.set_energy_pj +
                                     (1.0 - set_fraction) *
                                         condition.reset_energy_pj);
  cost.max_reprogram_cycles = condition.cyclability;
  cost.cycles_is_lower_bound = condition.cyclability_is_lower_bound;
  return cost;
}

}  // namespace bnn
