#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bnn/dataio.hpp"
#include "bnn/model.hpp"
#include "bnn/rram.hpp"
#include "bnn/train.hpp"

namespace bnn {

// Corrupt the model once with rate p_test (one programmed chip), then
// classify the whole set. redraw_every > 0 instead redraws the mask
// every that-many images, modeling per-read error draws.
double evaluate(const BnnModel& model, const Dataset& data, double p_test,
                std::uint64_t seed, std::size_t redraw_every = 0);

// Fraction of first-hidden-layer neurons whose binary output never
// changes across the set, under the same corruption as evaluate().
double dead_neuron_fraction(const BnnModel& model, const Dataset& data,
                            double p_test, std::uint64_t seed,
                            std::size_t redraw_every = 0);

struct EvalOutcome {
  double accuracy = 0.0;
  double dead_fraction = 0.0;
};

// Single pass computing both of the above (the corrupted model is
// shared, so the numbers agree with the individual calls).
EvalOutcome evaluate_outcome(const BnnModel& model, const Dataset& data,
                             double p_test, std::uint64_t seed,
                             std::size_t redraw_every = 0);

struct SweepConfig {
  // When model_path is set the sweep evaluates that fixed model and
  // p_train_values only label the rows; otherwise one model is trained
  // (or loaded from cache_dir) per p_train value.
  std::string model_path;
  TrainConfig train;
  std::vector<double> p_train_values{0.0};
  std::vector<double> p_test_values{0.0};
  std::size_t repetitions = 3;
  std::uint64_t master_seed = 1;
  std::string out_csv;     // written when non-empty
  std::string cache_dir;   // trained-model cache, optional
  std::size_t train_subset = 0;  // 0 = full training set
  std::size_t redraw_every = 0;

  void validate() const;
};

struct SweepRow {
  double p_train = 0.0;
  double p_test = 0.0;
  std::size_t rep = 0;
  double accuracy = 0.0;
  double dead_frac = 0.0;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

// Train-or-load per p_train, evaluate the grid with derived sub-seeds,
// sort rows, optionally write the CSV. A training divergence at one
// p_train records NaN accuracy for its rows and the sweep continues.
SweepResult run_sweep(const SweepConfig& config, const Dataset& train_data,
                      const Dataset& test_data);

std::string sweep_to_csv(const SweepResult& result);
void write_sweep_csv(const SweepResult& result, const std::string& path);
SweepResult parse_sweep_csv(const std::string& path);

struct AccuracyFloor {
  enum class Kind {
    kAbsolute,    // value is the floor itself
    kBelowClean,  // floor = clean accuracy at p_test=0 minus value
  };
  Kind kind = Kind::kBelowClean;
  double value = 0.01;
};

struct ConditionAssessment {
  std::string name;
  double ber = 0.0;  // evaluation point (the bound itself when quoted as one)
  bool ber_is_upper_bound = false;
  double accuracy = 0.0;  // interpolated at ber
  bool meets_floor = false;
  double set_energy_pj = 0.0;
  double reset_energy_pj = 0.0;
  double cyclability = 0.0;
  bool cyclability_is_lower_bound = false;
};

struct ModelReport {
  double p_train = 0.0;
  double clean_accuracy = 0.0;
  double floor = 0.0;  // resolved absolute floor
  std::vector<ConditionAssessment> conditions;  // cheapest SET energy first
  std::optional<std::string> selected;  // nullopt = no condition meets floor
};

struct RramReport {
  std::vector<ModelReport> models;  // one per p_train in the sweep
  double set_energy_ratio_very_strong_over_weak = 0.0;
};

// Map each catalogued programming condition onto the sweep: accuracy
// at its BER (log-linear interpolation between swept p_test points;
// linear on a bracket starting at p_test = 0), then pick the cheapest
// condition meeting the floor.
RramReport rram_report(const SweepResult& sweep, const AccuracyFloor& floor);

std::string format_rram_report(const RramReport& report);

}  // namespace bnn
