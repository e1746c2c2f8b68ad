#include "rlscale/telemetry.hpp"

#include "rlscale/algos.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace rlscale::telemetry {

// ---- scores ----

ScoreTracker::ScoreTracker(std::size_t window) : window_(window) {
  require_config(window >= 1, "score window must be >= 1");
}

double ScoreTracker::record(double episode_return) {
  recent_.push_back(episode_return);
  if (recent_.size() > window_) recent_.pop_front();
  ++episodes_;
  return *score();
}

std::optional<double> ScoreTracker::score() const {
  if (recent_.empty()) return std::nullopt;
  // Summed afresh so that the value can be recomputed from logged returns exactly.
  double s = 0.0;
  for (double r : recent_) s += r;
  return s / static_cast<double>(recent_.size());
}

double record_score(ScoreTracker& tracker, double episode_return) { return tracker.record(episode_return); }

// ---- norms ----

std::vector<double> layer_norms(const Vector& v, const std::vector<nn::LayerLayout>& layers) {
  std::vector<double> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    require_shape(l.end() <= static_cast<std::size_t>(v.size()), "layer map exceeds vector length");
    out.push_back(v.segment(static_cast<Eigen::Index>(l.begin()), static_cast<Eigen::Index>(l.end() - l.begin())).norm());
  }
  return out;
}

namespace {
double root_sum_squares(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x * x;
  return std::sqrt(s);
}
}  // namespace

NormRecord track_norms(const ParamVector& params, const GradVector& grad, const Vector& step,
                       const std::vector<nn::LayerLayout>& layers, std::size_t step_index) {
  require_shape(params.size() == grad.size() && params.size() == step.size(), "norm inputs differ in length");
  NormRecord r;
  r.step = step_index;
  for (const auto& l : layers) r.layers.push_back(l.name);
  r.param_norms = layer_norms(params, layers);
  r.grad_norms = layer_norms(grad, layers);
  r.step_norms = layer_norms(step, layers);
  r.total_param_norm = root_sum_squares(r.param_norms);
  r.total_grad_norm = root_sum_squares(r.grad_norms);
  r.total_step_norm = root_sum_squares(r.step_norms);
  return r;
}

NormTracker::NormTracker(std::vector<nn::LayerLayout> layers)
    : layers_(std::move(layers)), grad_sum_(layers_.size(), 0.0), step_sum_(layers_.size(), 0.0) {}

void NormTracker::observe(const GradVector& grad, const Vector& step) {
  const auto g = layer_norms(grad, layers_);
  const auto s = layer_norms(step, layers_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    grad_sum_[i] += g[i];
    step_sum_[i] += s[i];
  }
  grad_total_ += root_sum_squares(g);
  step_total_ += root_sum_squares(s);
  ++count_;
}

NormRecord NormTracker::emit(const ParamVector& params, std::size_t step_index) {
  NormRecord r;
  r.step = step_index;
  for (const auto& l : layers_) r.layers.push_back(l.name);
  r.param_norms = layer_norms(params, layers_);
  r.total_param_norm = root_sum_squares(r.param_norms);
  const double n = count_ ? static_cast<double>(count_) : 1.0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    r.grad_norms.push_back(grad_sum_[i] / n);
    r.step_norms.push_back(step_sum_[i] / n);
  }
  r.total_grad_norm = grad_total_ / n;
  r.total_step_norm = step_total_ / n;
  std::fill(grad_sum_.begin(), grad_sum_.end(), 0.0);
  std::fill(step_sum_.begin(), step_sum_.end(), 0.0);
  grad_total_ = step_total_ = 0.0;
  count_ = 0;
  return r;
}

// ---- cosine probe ----

double cosine(const Vector& a, const Vector& b) {
  require_shape(a.size() == b.size(), "cosine of vectors with different lengths");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

CosineResult cosine_from_halves(const GradVector& g_h1, const GradVector& g_h2) {
  const GradVector g_full = 0.5 * (g_h1 + g_h2);
  return {cosine(g_full, g_h1), cosine(g_h1, g_h2)};
}

CosineResult cosine_probe(std::span<const std::size_t> rows, const RowsGradFn& grad_of_rows) {
  require_config(!rows.empty() && rows.size() % 2 == 0, "cosine probe needs an even, nonzero batch size");
  const std::size_t h = rows.size() / 2;
  const GradVector g_full = grad_of_rows(rows);
  const GradVector g_h1 = grad_of_rows(rows.subspan(0, h));
  const GradVector g_h2 = grad_of_rows(rows.subspan(h));
  return {cosine(g_full, g_h1), cosine(g_h1, g_h2)};
}

// ---- evaluation ----

EvalResult eval_pause(const ActionFn& policy, const std::function<std::unique_ptr<envs::Env>()>& env_factory,
                      std::size_t eval_steps, std::size_t max_path_len, std::uint64_t seed) {
  require_config(max_path_len >= 1, "max path length must be >= 1");
  auto env = env_factory();
  Rng rng(mix_seed(seed, 0xe7a1));
  EvalResult out;
  double total = 0.0, ret = 0.0;
  std::size_t path = 0;
  env->reset(mix_seed(seed, 0));
  for (std::size_t i = 0; i < eval_steps; ++i) {
    const int a = policy(env->observation(), rng);
    const auto r = env->step(a);
    ret += r.reward;
    ++path;
    ++out.steps;
    if (r.done || path >= max_path_len) {
      total += ret;
      ++out.episodes;
      ret = 0.0;
      path = 0;
      env->reset();
    }
  }
  if (out.episodes) out.mean_return = total / static_cast<double>(out.episodes);
  return out;
}

ActionFn network_policy(const nn::Network& net, const ParamVector& params, double epsilon, const Vector& support) {
  const auto head = net.spec().head;
  return [&net, &params, epsilon, support, head](const envs::Observation& obs, Rng& rng) -> int {
    Matrix x = Eigen::Map<const Eigen::RowVectorXd>(obs.data(), static_cast<Eigen::Index>(obs.size()));
    if (head == nn::HeadKind::PolicyValue) {
      const auto pv = net.forward_policy_value(params, x);
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      double c = 0.0;
      const auto A = pv.probs.cols();
      for (Eigen::Index a = 0; a < A; ++a) {
        c += pv.probs(0, a);
        if (u < c) return static_cast<int>(a);
      }
      return static_cast<int>(A - 1);
    }
    Matrix q = head == nn::HeadKind::Q ? net.forward_q(params, x) : algos::expected_q(net.forward_q_dist(params, x), support);
    return algos::epsilon_greedy({q.data(), static_cast<std::size_t>(q.cols())}, epsilon, rng);
  };
}

// ---- CSV ----

std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (x == std::trunc(x) && std::fabs(x) < 1e15) return std::to_string(static_cast<long long>(x));
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string fmt(std::size_t x) { return std::to_string(x); }

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(path, std::ios::out | std::ios::trunc), header_(std::move(header)) {
  if (!out_) throw RuntimeError("cannot open " + path.string() + " for writing");
  row(header_);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  require_shape(fields.size() == header_.size(), "csv row width differs from header");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << fields[i];
  }
  out_ << '\n';
}

void CsvWriter::flush() { out_.flush(); }

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw RuntimeError("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::numbers(const std::string& name) const {
  const std::size_t c = column(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    if (r[c] == "nan") {
      out.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    double v = 0.0;
    const auto res = std::from_chars(r[c].data(), r[c].data() + r[c].size(), v);
    if (res.ec != std::errc()) throw RuntimeError("csv column '" + name + "' holds a non-number: " + r[c]);
    out.push_back(v);
  }
  return out;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!s.empty() && s.back() == ',') f.emplace_back();
    return f;
  };
  if (!std::getline(in, line)) throw RuntimeError(path.string() + " is empty");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != t.header.size()) throw RuntimeError(path.string() + ": ragged row");
    t.rows.push_back(std::move(f));
  }
  return t;
}

void write_metrics(const std::filesystem::path& run_dir, const std::string& family,
                   const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& records) {
  std::filesystem::create_directories(run_dir);
  CsvWriter w(run_dir / (family + ".csv"), header);
  for (const auto& r : records) w.row(r);
  w.flush();
}

// ---- parameter files ----

namespace {
constexpr char kMagic[8] = {'R', 'L', 'S', 'P', 'A', 'R', 'A', 'M'};
constexpr std::uint32_t kParamFormat = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::uint64_t u = 0;
  std::memcpy(&u, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw RuntimeError("truncated parameter file");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  T v;
  std::memcpy(&v, &u, sizeof(T));
  return v;
}
}  // namespace

void save_params(const std::filesystem::path& path, const nn::NetSpec& spec, const ParamVector& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kParamFormat);
  put_le<std::uint32_t>(out, 0);
  put_le<std::uint64_t>(out, spec.hash());
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) put_le<double>(out, params[i]);
}

ParamVector load_params(const std::filesystem::path& path, const nn::NetSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw ConfigError(path.string() + " is not a parameter file");
  if (get_le<std::uint32_t>(in) != kParamFormat) throw ConfigError("unsupported parameter file format");
  get_le<std::uint32_t>(in);
  if (get_le<std::uint64_t>(in) != spec.hash()) throw ConfigError("parameter file was written for a different network");
  const auto n = get_le<std::uint64_t>(in);
  if (n != nn::Network(spec).num_params()) throw ShapeError("parameter count does not match the network");
  ParamVector p(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = get_le<double>(in);
  return p;
}

// ---- report ----

Summary summarize(const std::filesystem::path& run_dir) {
  Summary s;
  const auto scores_path = run_dir / "scores.csv";
  if (std::filesystem::exists(scores_path)) {
    const auto t = read_csv(scores_path);
    const auto learner = t.numbers("learner");
    const auto ret = t.numbers("episode_return");
    std::vector<double> first;
    for (std::size_t i = 0; i < ret.size(); ++i)
      if (learner[i] == 0.0) first.push_back(ret[i]);
    s["episodes"] = static_cast<double>(ret.size());
    if (!first.empty()) {
      const std::size_t k = std::min<std::size_t>(100, first.size());
      double sum = 0.0;
      for (std::size_t i = first.size() - k; i < first.size(); ++i) sum += first[i];
      s["final_online_score"] = sum / static_cast<double>(k);
    }
  }
  const auto updates_path = run_dir / "updates.csv";
  if (std::filesystem::exists(updates_path)) {
    const auto t = read_csv(updates_path);
    const auto transitions = t.numbers("transitions");
    const auto used = t.numbers("samples_used");
    const auto updates = t.numbers("updates");
    const auto steps = t.numbers("env_steps");
    double tr = 0.0, us = 0.0, up = 0.0, st = 0.0;
    for (std::size_t i = 0; i < transitions.size(); ++i) {
      tr += transitions[i];
      us += used[i];
      up += updates[i];
      st = std::max(st, steps[i]);
    }
    s["updates"] = up;
    s["env_steps"] = st;
    if (tr > 0) s["measured_intensity"] = us / tr;
  }
  const auto evals_path = run_dir / "evals.csv";
  if (std::filesystem::exists(evals_path)) {
    const auto t = read_csv(evals_path);
    const auto v = t.numbers("eval_score");
    for (auto it = v.rbegin(); it != v.rend(); ++it)
      if (!std::isnan(*it)) {
        s["last_eval_score"] = *it;
        break;
      }
  }
  const auto cos_path = run_dir / "cosine.csv";
  if (std::filesystem::exists(cos_path)) {
    const auto t = read_csv(cos_path);
    const auto fh = t.numbers("cos_full_half");
    const auto hh = t.numbers("cos_half_half");
    if (!fh.empty()) {
      double a = 0.0, b = 0.0;
      for (std::size_t i = 0; i < fh.size(); ++i) {
        a += fh[i];
        b += hh[i];
      }
      s["cos_full_half_mean"] = a / static_cast<double>(fh.size());
      s["cos_half_half_mean"] = b / static_cast<double>(hh.size());
    }
  }
  return s;
}

std::string format_summary(const Summary& s) {
  std::size_t w = 0;
  for (const auto& [k, v] : s) w = std::max(w, k.size());
  std::ostringstream out;
  for (const auto& [k, v] : s) out << k << std::string(w - k.size() + 2, ' ') << fmt(v) << '\n';
  return out.str();
}

void write_score_plot(const std::filesystem::path& run_dir, const std::filesystem::path& svg_path) {
  const auto t = read_csv(run_dir / "scores.csv");
  const auto steps = t.numbers("env_steps");
  const auto learner = t.numbers("learner");
  const auto score = t.numbers("online_score");
  std::vector<std::pair<double, double>> online;
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (learner[i] == 0.0) online.emplace_back(steps[i], score[i]);
  std::vector<std::pair<double, double>> evals;
  if (std::filesystem::exists(run_dir / "evals.csv")) {
    const auto e = read_csv(run_dir / "evals.csv");
    const auto es = e.numbers("env_steps");
    const auto ev = e.numbers("eval_score");
    for (std::size_t i = 0; i < es.size(); ++i)
      if (!std::isnan(ev[i])) evals.emplace_back(es[i], ev[i]);
  }
  double x1 = 1.0, y0 = 0.0, y1 = 1.0;
  for (const auto* series : {&online, &evals})
    for (const auto& [x, y] : *series) {
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  const double W = 640, H = 400, pad = 40;
  auto px = [&](double x) { return pad + (W - 2 * pad) * x / x1; };
  auto py = [&](double y) { return H - pad - (H - 2 * pad) * (y - y0) / (y1 - y0); };
  std::ofstream out(svg_path);
  if (!out) throw RuntimeError("cannot write " + svg_path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << pad << "\" y=\"" << pad - 10 << "\" font-size=\"12\">score (y: " << fmt(y0) << " .. "
      << fmt(y1) << ", x: 0 .. " << fmt(x1) << " env steps)</text>\n";
  auto polyline = [&](const std::vector<std::pair<double, double>>& pts, const char* colour) {
    if (pts.empty()) return;
    out << "<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
    for (const auto& [x, y] : pts) out << px(x) << ',' << py(y) << ' ';
    out << "\"/>\n";
  };
  polyline(online, "steelblue");
  polyline(evals, "darkorange");
  out << "</svg>\n";
}

}  // namespace rlscale::telemetry
