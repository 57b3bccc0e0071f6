#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnn/errors.hpp"

namespace bnn {

// One programming recipe with its measured consequences: error rate,
// energy per SET/RESET pulse and endurance.
struct ProgrammingCondition {
  std::string name;                  // very_strong | strong | weak
  double set_compliance_current_ua;  // uA
  double reset_voltage_v;            // V
  double programming_time_ns;        // ns
  double ber;                        // bit error rate
  bool ber_is_upper_bound;           // "<" entry
  double set_energy_pj;              // pJ per SET
  double reset_energy_pj;            // pJ per RESET
  double cyclability;                // programming cycles
  bool cyclability_is_lower_bound;   // ">" entry
};

// Log-normal resistance state: log R ~ N(mu_log, sigma_log^2).
struct ResistanceDistribution {
  double mu_log = 0.0;
  double sigma_log = 1.0;

  void validate() const;
};

// The fixed catalogue of measured programming conditions.
const std::vector<ProgrammingCondition>& condition_catalogue();
const ProgrammingCondition& lookup_condition(const std::string& name);

// Misread probability with equiprobable stored states: the average of
// P(LRS reads above threshold) and P(HRS reads below threshold), both
// from the Gaussian CDF on log-resistance. Requires hrs.mu_log > lrs.mu_log.
double analytic_ber(const ResistanceDistribution& lrs,
                    const ResistanceDistribution& hrs, double read_threshold);

struct FittedCondition {
  ResistanceDistribution lrs;
  ResistanceDistribution hrs;
  double read_threshold;
};

// Solve (by bisection on the sigma-normalized separation) for a
// symmetric pair of unit-sigma distributions whose analytic_ber matches
// target_ber within 1% relative. Works in sigma-normalized units; the
// curves carry no absolute resistance scale.
FittedCondition fit_condition_distributions(double target_ber);

// Empirical misread fraction over n_samples simulated cells, half
// programmed LRS and half HRS. Deterministic given seed.
double monte_carlo_ber(const ResistanceDistribution& lrs,
                       const ResistanceDistribution& hrs,
                       double read_threshold, std::size_t n_samples,
                       std::uint64_t seed);

struct ProgrammingCost {
  double energy_pj = 0.0;
  double max_reprogram_cycles = 0.0;
  bool cycles_is_lower_bound = false;
};

// Energy to program n_bits cells of which set_fraction get a SET pulse
// and the rest a RESET pulse, plus the endurance of the chosen condition.
ProgrammingCost programming_cost(std::size_t n_bits, double set_fraction,
                                 const ProgrammingCondition& condition);

}  // namespace bnn
