#include "bnn/sweep.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "bnn/errors.hpp"
#include "bnn/fault.hpp"
#include "bnn/rng.hpp"

namespace bnn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt_rate(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

int predict(const BnnModel& model, const BitVector& hidden) {
  const DenseLayer& last = model.layers.back();
  const auto popcounts = binary_matvec(last.weights, hidden);
  const auto n = static_cast<double>(last.in_features());
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < popcounts.size(); ++j) {
    const double signed_dot = 2.0 * static_cast<double>(popcounts[j]) - n;
    const double dot_threshold = 2.0 * last.thresholds[j] - n;
    const double score = last.threshold_sign[j] * (signed_dot - dot_threshold);
    if (score > best_score) {
      best_score = score;
      best = j;
    }
  }
  return static_cast<int>(best);
}

}  // namespace

EvalOutcome evaluate_outcome(const BnnModel& model, const Dataset& data,
                             double p_test, std::uint64_t seed,
                             std::size_t redraw_every) {
  model.validate();
  if (data.n == 0) throw InvalidSubset("evaluation dataset is empty");
  if (data.image_size != model.input_size()) {
    throw DimensionMismatch("dataset image size " + std::to_string(data.image_size) +
                            " does not match model input " +
                            std::to_string(model.input_size()));
  }
  FaultSpec spec;
  spec.p = p_test;
  spec.seed = seed;
  spec.validate();

  const bool has_hidden = model.layers.size() >= 2;
  const std::size_t n_first =
      has_hidden ? model.layers.front().out_features() : 0;

  BnnModel corrupted = model;
  if (p_test > 0.0 && redraw_every == 0) {
    corrupted = corrupt_model(model, spec, "test");
  }

  // A neuron is dead when its output bit never differs between the
  // union and intersection of activations over the whole run.
  BitVector seen_on(n_first), seen_all(n_first);
  for (std::size_t j = 0; j < n_first; ++j) seen_all.set(j, true);

  std::size_t correct = 0;
  std::size_t chunk = 0;
  for (std::size_t i = 0; i < data.n; ++i) {
    if (p_test > 0.0 && redraw_every > 0 && i % redraw_every == 0) {
      corrupted = corrupt_model(model, spec, "test-batch-" + std::to_string(chunk));
      ++chunk;
    }
    const BitVector input =
        binarize_input(data.image(i), corrupted.input_binarization_threshold);
    if (has_hidden) {
      BitVector act = layer_forward(corrupted.layers.front(), input);
      {
        auto on = seen_on.mutable_words();
        auto all = seen_all.mutable_words();
        const auto words = act.words();
        for (std::size_t w = 0; w < words.size(); ++w) {
          on[w] |= words[w];
          all[w] &= words[w];
        }
      }
      for (std::size_t k = 1; k + 1 < corrupted.layers.size(); ++k) {
        act = layer_forward(corrupted.layers[k], act);
      }
      if (predict(corrupted, act) == data.labels[i]) ++correct;
    } else {
      if (predict(corrupted, input) == data.labels[i]) ++correct;
    }
  }

  EvalOutcome out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.n);
  if (has_hidden) {
    std::size_t changing = 0;
    const auto on = seen_on.words();
    const auto all = seen_all.words();
    for (std::size_t w = 0; w < on.size(); ++w) {
      changing += static_cast<std::size_t>(std::popcount(on[w] ^ all[w]));
    }
    out.dead_fraction =
        static_cast<double>(n_first - changing) / static_cast<double>(n_first);
  } else {
    out.dead_fraction = kNaN;
  }
  return out;
}

double evaluate(const BnnModel& model, const Dataset& data, double p_test,
                std::uint64_t seed, std::size_t redraw_every) {
  return evaluate_outcome(model, data, p_test, seed, redraw_every).accuracy;
}

double dead_neuron_fraction(const BnnModel& model, const Dataset& data,
                            double p_test, std::uint64_t seed,
                            std::size_t redraw_every) {
  if (model.layers.size() < 2) {
    throw DimensionMismatch("dead_neuron_fraction requires a hidden layer");
  }
  return evaluate_outcome(model, data, p_test, seed, redraw_every).dead_fraction;
}

void SweepConfig::validate() const {
  for (double p : p_train_values) {
    if (!(p >= 0.0) || p > 1.0 || !std::isfinite(p)) {
      throw InvalidRate("p_train value " + fmt_rate(p) + " outside [0, 1]");
    }
  }
  for (double p : p_test_values) {
    if (!(p >= 0.0) || p > 1.0 || !std::isfinite(p)) {
      throw InvalidRate("p_test value " + fmt_rate(p) + " outside [0, 1]");
    }
  }
  if (p_train_values.empty()) throw InvalidConfig("no p_train values");
  if (p_test_values.empty()) throw InvalidConfig("no p_test values");
  if (repetitions == 0) throw InvalidConfig("repetitions must be >= 1");
  if (model_path.empty()) train.validate();
}

namespace {

// Cache key over everything that shapes the trained model, including a
// light fingerprint of the training data.
std::string model_cache_key(const TrainConfig& cfg, const Dataset& data,
                            std::size_t subset) {
  std::ostringstream os;
  os << "arch=";
  for (std::size_t h : cfg.hidden) os << h << ";";
  os << " classes=" << cfg.n_classes << " epochs=" << cfg.epochs
     << " batch=" << cfg.batch_size;
  char num[160];
  std::snprintf(num, sizeof num,
                " lr=%.17g decay=%.17g b1=%.17g b2=%.17g aeps=%.17g drop=%.17g"
                " ptrain=%.17g ithr=%.17g bneps=%.17g bnmom=%.17g",
                cfg.learning_rate, cfg.lr_decay, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_epsilon, cfg.dropout_rate, cfg.p_train,
                cfg.input_threshold, cfg.bn_epsilon, cfg.bn_momentum);
  os << num << " seed=" << cfg.seed << " subset=" << subset;
  os << " data=" << data.split << ":" << data.n << "x" << data.image_size;
  os << " labels="
     << fnv1a64({reinterpret_cast<const char*>(data.labels.data()),
                 data.labels.size()});
  const std::size_t probe = std::min<std::size_t>(data.images.size(), 4096);
  os << " pixels="
     << fnv1a64({reinterpret_cast<const char*>(data.images.data()),
                 probe * sizeof(float)});
  char key[24];
  std::snprintf(key, sizeof key, "%016llx",
                static_cast<unsigned long long>(fnv1a64(os.str())));
  return key;
}

}  // namespace

SweepResult run_sweep(const SweepConfig& config, const Dataset& train_data,
                      const Dataset& test_data) {
  config.validate();

  Dataset effective = train_data;
  if (config.model_path.empty() && config.train_subset > 0 &&
      config.train_subset < train_data.n) {
    effective = subset(train_data, config.train_subset, config.train.seed);
  }

  SweepResult result;
  for (double p_train : config.p_train_values) {
    BnnModel model;
    bool trained = true;
    if (!config.model_path.empty()) {
      model = load_model(config.model_path);
    } else {
      TrainConfig cfg = config.train;
      cfg.p_train = p_train;
      std::string cache_path;
      bool loaded = false;
      if (!config.cache_dir.empty()) {
        std::filesystem::create_directories(config.cache_dir);
        cache_path = config.cache_dir + "/model-" +
                     model_cache_key(cfg, effective, config.train_subset) + ".bnn";
        if (std::filesystem::exists(cache_path)) {
          try {
            model = load_model(cache_path);
            loaded = true;
          } catch (const ModelFormatError&) {
            loaded = false;  // stale or corrupt cache entry; retrain
          }
        }
      }
      if (!loaded) {
        try {
          model = train(effective, cfg).model;
          if (!cache_path.empty()) save_model(model, cache_path);
        } catch (const NumericalDivergence&) {
          trained = false;
        }
      }
    }

    for (double p_test : config.p_test_values) {
      for (std::size_t rep = 0; rep < config.repetitions; ++rep) {
        SweepRow row;
        row.p_train = p_train;
        row.p_test = p_test;
        row.rep = rep;
        row.seed = rng::derive(config.master_seed,
                               "eval/pt=" + fmt_rate(p_train) +
                                   "/pe=" + fmt_rate(p_test) +
                                   "/rep=" + std::to_string(rep));
        if (trained) {
          const EvalOutcome o = evaluate_outcome(model, test_data, p_test,
                                                 row.seed, config.redraw_every);
          row.accuracy = o.accuracy;
          row.dead_frac = o.dead_fraction;
        } else {
          row.accuracy = kNaN;
          row.dead_frac = kNaN;
        }
        result.rows.push_back(row);
      }
    }
  }

  std::sort(result.rows.begin(), result.rows.end(),
            [](const SweepRow& a, const SweepRow& b) {
              if (a.p_train != b.p_train) return a.p_train < b.p_train;
              if (a.p_test != b.p_test) return a.p_test < b.p_test;
              return a.rep < b.rep;
            });

  if (!config.out_csv.empty()) write_sweep_csv(result, config.out_csv);
  return result;
}

std::string sweep_to_csv(const SweepResult& result) {
  std::string out = "p_train,p_test,rep,accuracy,dead_frac,seed\n";
  for (const SweepRow& r : result.rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%s,%s,%zu,%.6f,%.6f,%llu\n",
                  fmt_rate(r.p_train).c_str(), fmt_rate(r.p_test).c_str(), r.rep,
                  r.accuracy, r.dead_frac,
                  static_cast<unsigned long long>(r.seed));
    out += line;
  }
  return out;
}

void write_sweep_csv(const SweepResult& result, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open CSV for writing: " + path);
  os << sweep_to_csv(result);
  if (!os) throw FormatError("CSV write failed: " + path);
}

SweepResult parse_sweep_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "p_train,p_test,rep,accuracy,dead_frac,seed") {
    throw FormatError("unexpected CSV header in " + path);
  }
  SweepResult result;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string_view rest = line;
    while (true) {
      const auto comma = rest.find(',');
      fields.emplace_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 6) {
      throw FormatError("CSV line " + std::to_string(line_no) + ": expected 6 fields");
    }
    try {
      SweepRow row;
      row.p_train = std::stod(fields[0]);
      row.p_test = std::stod(fields[1]);
      row.rep = static_cast<std::size_t>(std::stoull(fields[2]));
      row.accuracy = std::stod(fields[3]);
      row.dead_frac = std::stod(fields[4]);
      row.seed = std::stoull(fields[5]);
      result.rows.push_back(row);
    } catch (const std::exception&) {
      throw FormatError("CSV line " + std::to_string(line_no) + ": parse error");
    }
  }
  return result;
}

namespace {

struct CurvePoint {
  double p_test;
  double accuracy;
};

// Log-linear between positive rates; linear on a bracket that starts
// at p_test = 0 (log-linear is undefined there).
double interpolate_accuracy(const std::vector<CurvePoint>& curve, double ber) {
  if (curve.empty()) throw ExtrapolationRefused("no swept p_test points");
  for (const CurvePoint& pt : curve) {
    if (pt.p_test == ber) return pt.accuracy;
  }
  if (ber < curve.front().p_test) {
    throw ExtrapolationRefused("BER " + fmt_rate(ber) + " below swept range");
  }
  if (ber > curve.back().p_test) {
    throw ExtrapolationRefused("BER " + fmt_rate(ber) + " above swept range");
  }
  std::size_t hi = 1;
  while (curve[hi].p_test < ber) ++hi;
  const CurvePoint& a = curve[hi - 1];
  const CurvePoint& b = curve[hi];
  double t;
  if (a.p_test <= 0.0) {
    t = (ber - a.p_test) / (b.p_test - a.p_test);
  } else {
    t = (std::log(ber) - std::log(a.p_test)) /
        (std::log(b.p_test) - std::log(a.p_test));
  }
  return a.accuracy + t * (b.accuracy - a.accuracy);
}

}  // namespace

RramReport rram_report(const SweepResult& sweep, const AccuracyFloor& floor) {
  if (sweep.rows.empty()) throw ExtrapolationRefused("sweep has no rows");
  if (!std::isfinite(floor.value)) throw InvalidConfig("floor value must be finite");

  // Mean accuracy per (p_train, p_test), finite rows only.
  std::map<double, std::map<double, std::pair<double, std::size_t>>> grouped;
  for (const SweepRow& row : sweep.rows) {
    if (!std::isfinite(row.accuracy)) continue;
    auto& cell = grouped[row.p_train][row.p_test];
    cell.first += row.accuracy;
    cell.second += 1;
  }

  std::vector<ProgrammingCondition> catalogue = condition_catalogue();
  std::sort(catalogue.begin(), catalogue.end(),
            [](const ProgrammingCondition& a, const ProgrammingCondition& b) {
              return a.set_energy_pj < b.set_energy_pj;
            });

  RramReport report;
  report.set_energy_ratio_very_strong_over_weak =
      lookup_condition("very_strong").set_energy_pj /
      lookup_condition("weak").set_energy_pj;

  for (const auto& [p_train, by_p_test] : grouped) {
    ModelReport mr;
    mr.p_train = p_train;

    std::vector<CurvePoint> curve;
    curve.reserve(by_p_test.size());
    for (const auto& [p_test, acc] : by_p_test) {
      curve.push_back({p_test, acc.first / static_cast<double>(acc.second)});
    }
    mr.clean_accuracy = curve.front().p_test == 0.0 ? curve.front().accuracy : kNaN;

    if (floor.kind == AccuracyFloor::Kind::kAbsolute) {
      mr.floor = floor.value;
    } else {
      if (!std::isfinite(mr.clean_accuracy)) {
        throw ExtrapolationRefused(
            "floor is relative to clean accuracy but p_test=0 was not swept");
      }
      mr.floor = mr.clean_accuracy - floor.value;
    }

    for (const ProgrammingCondition& cond : catalogue) {
      ConditionAssessment ca;
      ca.name = cond.name;
      ca.ber = cond.ber;
      ca.ber_is_upper_bound = cond.ber_is_upper_bound;
      ca.accuracy = interpolate_accuracy(curve, cond.ber);
      ca.meets_floor = ca.accuracy >= mr.floor;
      ca.set_energy_pj = cond.set_energy_pj;
      ca.reset_energy_pj = cond.reset_energy_pj;
      ca.cyclability = cond.cyclability;
      ca.cyclability_is_lower_bound = cond.cyclability_is_lower_bound;
      if (ca.meets_floor && !mr.selected) mr.selected = cond.name;
      mr.conditions.push_back(std::move(ca));
    }
    report.models.push_back(std::move(mr));
  }
  return report;
}

std::string format_rram_report(const RramReport& report) {
  std::ostringstream os;
  char buf[256];
  for (const ModelReport& mr : report.models) {
    std::snprintf(buf, sizeof buf,
                  "model p_train=%s  clean accuracy %.4f  floor %.4f\n",
                  fmt_rate(mr.p_train).c_str(), mr.clean_accuracy, mr.floor);
    os << buf;
    for (const ConditionAssessment& ca : mr.conditions) {
      std::snprintf(buf, sizeof buf,
                    "  %-12s ber %s%-8s  accuracy %.4f  %s  SET %g pJ  RESET %g "
                    "pJ  cycles %s%g\n",
                    ca.name.c_str(), ca.ber_is_upper_bound ? "<" : "",
                    fmt_rate(ca.ber).c_str(), ca.accuracy,
                    ca.meets_floor ? "meets floor " : "below floor ",
                    ca.set_energy_pj, ca.reset_energy_pj,
                    ca.cyclability_is_lower_bound ? ">" : "", ca.cyclability);
      os << buf;
    }
    if (mr.selected) {
      os << "  selected: " << *mr.selected << "\n";
    } else {
      os << "  selected: none (no condition meets the floor)\n";
    }
  }
  std::snprintf(buf, sizeof buf,
                "SET energy ratio very_strong/weak: %.1f\n",
                report.set_energy_ratio_very_strong_over_weak);
  os << buf;
  return os.str();
}

}  // namespace bnn
