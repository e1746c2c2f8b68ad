#pragma once

#include "rlscale/envs.hpp"
#include "rlscale/nn.hpp"
#include "rlscale/types.hpp"

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlscale::telemetry {

// Online score: mean of the most recent `window` completed episode returns.
class ScoreTracker {
 public:
  explicit ScoreTracker(std::size_t window = 100);

  double record(double episode_return);
  std::optional<double> score() const;
  std::size_t episodes() const { return episodes_; }
  void add_steps(std::size_t n) { steps_ += n; }
  std::size_t steps() const { return steps_; }

 private:
  std::size_t window_;
  std::deque<double> recent_;
  double sum_ = 0.0;
  std::size_t episodes_ = 0;
  std::size_t steps_ = 0;
};

double record_score(ScoreTracker& tracker, double episode_return);

struct NormRecord {
  std::size_t step = 0;
  std::vector<std::string> layers;  // network order
  std::vector<double> param_norms;
  std::vector<double> grad_norms;  // averaged over the updates since the previous record
  std::vector<double> step_norms;
  double total_param_norm = 0.0;
  double total_grad_norm = 0.0;
  double total_step_norm = 0.0;
};

// Per-layer L2 norm of a flat vector: weights and biases of one layer form one group.
std::vector<double> layer_norms(const Vector& v, const std::vector<nn::LayerLayout>& layers);

NormRecord track_norms(const ParamVector& params, const GradVector& grad, const Vector& step,
                       const std::vector<nn::LayerLayout>& layers, std::size_t step_index = 0);

// Averages gradient and step norms over the updates between two emitted records.
class NormTracker {
 public:
  explicit NormTracker(std::vector<nn::LayerLayout> layers);
  void observe(const GradVector& grad, const Vector& step);
  std::size_t pending() const { return count_; }
  NormRecord emit(const ParamVector& params, std::size_t step_index);

 private:
  std::vector<nn::LayerLayout> layers_;
  std::vector<double> grad_sum_, step_sum_;
  double grad_total_ = 0.0, step_total_ = 0.0;
  std::size_t count_ = 0;
};

struct CosineResult {
  double cos_full_half = 0.0;
  double cos_half_half = 0.0;
};

double cosine(const Vector& a, const Vector& b);

// Gradient of the mean loss over the given rows.
using RowsGradFn = std::function<GradVector(std::span<const std::size_t> rows)>;

// Splits `rows` into its first and second halves; errors on an odd count.
CosineResult cosine_probe(std::span<const std::size_t> rows, const RowsGradFn& grad_of_rows);
CosineResult cosine_from_halves(const GradVector& g_h1, const GradVector& g_h2);

// Chooses an action for one observation.
using ActionFn = std::function<int(const envs::Observation& obs, Rng& rng)>;

struct EvalResult {
  std::optional<double> mean_return;  // absent when no episode completed
  std::size_t episodes = 0;
  std::size_t steps = 0;
};

// Runs the frozen policy for eval_steps steps, cutting episodes at max_path_len. The
// partial final episode is discarded.
EvalResult eval_pause(const ActionFn& policy, const std::function<std::unique_ptr<envs::Env>()>& env_factory,
                      std::size_t eval_steps, std::size_t max_path_len, std::uint64_t seed);

// Epsilon-greedy on Q values (expected values for atom heads); samples pi for policy heads.
ActionFn network_policy(const nn::Network& net, const ParamVector& params, double epsilon,
                        const Vector& support = {});

// Append-only CSV with a fixed header.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  CsvWriter(CsvWriter&&) = default;

  void row(const std::vector<std::string>& fields);
  void flush();
  const std::vector<std::string>& header() const { return header_; }

 private:
  std::ofstream out_;
  std::vector<std::string> header_;
};

// Shortest decimal text that parses back to the same double.
std::string fmt(double x);
std::string fmt(std::size_t x);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
  std::vector<double> numbers(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

// Writes header plus one row per record into run_dir/<family>.csv.
void write_metrics(const std::filesystem::path& run_dir, const std::string& family,
                   const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& records);

// Parameter file: "RLSPARAM", u32 format version, u32 reserved, u64 network hash,
// u64 count, count little-endian doubles.
void save_params(const std::filesystem::path& path, const nn::NetSpec& spec, const ParamVector& params);
ParamVector load_params(const std::filesystem::path& path, const nn::NetSpec& spec);

// Summary statistics recomputed from the CSVs of a run directory.
using Summary = std::map<std::string, double>;
Summary summarize(const std::filesystem::path& run_dir);
std::string format_summary(const Summary& s);
// Line plot of online score (and eval score when present) against env steps.
void write_score_plot(const std::filesystem::path& run_dir, const std::filesystem::path& svg_path);

}  // namespace rlscale::telemetry
