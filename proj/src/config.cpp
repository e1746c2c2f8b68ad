#include "rlscale/config.hpp"

#include "rlscale/optim.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace rlscale::config {

using nlohmann::ordered_json;

std::string to_string(Topology t) {
  switch (t) {
    case Topology::Single:
      return "single";
    case Topology::Sync:
      return "sync";
    case Topology::Async:
      return "async";
  }
  return "single";
}

Topology topology_from_string(const std::string& s) {
  if (s == "single") return Topology::Single;
  if (s == "sync") return Topology::Sync;
  if (s == "async") return Topology::Async;
  throw ConfigError("unknown topology '" + s + "'");
}

void ExperimentConfig::validate() const {
  env.validate();
  sampler.validate();
  algo.validate();
  require_config(!hidden.empty(), "network needs at least one hidden layer");
  for (const auto& h : hidden) require_config(h.width >= 1, "hidden layer width must be >= 1");
  require_config(optim.kind == "adam" || optim.kind == "rmsprop", "optimizer must be adam or rmsprop");
  require_config(optim.lr > 0.0, "learning rate must be positive");
  require_config(optim.eps > 0.0 || optim.eps_coef > 0.0, "optimizer epsilon must be positive");
  require_config(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0,
                 "adam betas must be in [0, 1)");
  require_config(optim.max_grad_norm >= 0.0, "max_grad_norm must be >= 0");
  require_config(total_steps >= cycle_steps(), "total_steps must cover at least one sampling cycle");
  require_config(topology.learners >= 1, "topology needs at least one learner");
  require_config(topology.kind != Topology::Single || topology.learners == 1, "single topology has one learner");
  if (topology.kind == Topology::Async) {
    require_config(optim.kind == "adam", "async topology requires the adam optimizer");
    require_config(topology.chunks >= 1, "chunk count must be >= 1");
    require_config(topology.local_steps >= 1, "local_steps must be >= 1");
  } else {
    require_config(topology.local_steps == 1 && topology.pull_horizon == 0,
                   "local_steps and pull_horizon apply to the async topology only");
  }
  require_config(topology.pull_horizon <= sampler.horizon, "pull_horizon must not exceed the sampling horizon");

  const std::size_t bt = cycle_steps();
  if (algo.algo == algos::Algo::PPO)
    require_config(bt % algo.ppo.minibatches == 0, "ppo minibatch count must divide envs * horizon");
  if (!algos::is_policy_gradient(algo.algo)) {
    require_config(algos::updates_per_cycle(sampler.num_envs(), sampler.horizon, algo.dqn.batch_size,
                                            algo.training_intensity, algo.dqn.max_updates_per_cycle) >= 1,
                   "training intensity yields zero updates per cycle");
    require_config(algo.dqn.replay_capacity / sampler.num_envs() > algo.dqn.n_step,
                   "replay capacity per simulator must exceed n_step");
  }
  require_config(eval.epsilon >= 0.0 && eval.epsilon <= 1.0, "eval epsilon must be in [0, 1]");
  require_config(eval.interval_steps == 0 || (eval.eval_steps >= 1 && eval.max_path_len >= 1),
                 "eval steps and max path length must be >= 1");
  require_config(secondary.batch_size >= 1, "secondary batch size must be >= 1");
  require_config(bench.cycles >= 1 && bench.repeats >= 1, "bench cycles and repeats must be >= 1");
  net_spec().validate();
}

nn::NetSpec ExperimentConfig::net_spec() const {
  nn::NetSpec s;
  s.input_dim = env.obs_dim();
  s.hidden = hidden;
  s.actions = env.action_count();
  switch (algo.algo) {
    case algos::Algo::A2C:
    case algos::Algo::PPO:
      s.head = nn::HeadKind::PolicyValue;
      break;
    case algos::Algo::DQN:
      s.head = nn::HeadKind::Q;
      break;
    case algos::Algo::CatDQN:
      s.head = nn::HeadKind::QDist;
      s.atoms = algo.cat.atoms;
      break;
  }
  return s;
}

std::size_t ExperimentConfig::update_batch() const {
  switch (algo.algo) {
    case algos::Algo::A2C:
      return cycle_steps();
    case algos::Algo::PPO:
      return cycle_steps() / algo.ppo.minibatches;
    default:
      return algo.dqn.batch_size;
  }
}

double ExperimentConfig::resolved_lr() const {
  if (optim.lr_base_batch == 0) return optim.lr;
  return optim::scale_lr_sqrt(optim.lr, optim.lr_base_batch, update_batch());
}

double ExperimentConfig::resolved_eps() const {
  if (optim.eps_coef > 0.0) return optim::adam_eps_for_batch(optim.eps_coef, update_batch());
  return optim.eps;
}

namespace {

// Reads fields from one object and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const ordered_json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  const ordered_json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const ordered_json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename E, typename Parse>
void get_enum(Reader& r, const char* key, E& out, Parse parse) {
  std::string s;
  bool present = false;
  if (const auto* c = r.child(key)) {
    if (!c->is_string()) throw ConfigError(r.path(key) + ": expected a string");
    s = c->get<std::string>();
    present = true;
  }
  if (present) out = parse(s);
}

ordered_json env_json(const envs::EnvSpec& e) {
  return {{"kind", envs::to_string(e.kind)},
          {"max_episode_len", e.max_episode_len},
          {"width", e.width},
          {"height", e.height},
          {"reset_noise", e.reset_noise},
          {"latency_dist", envs::to_string(e.latency_dist)},
          {"latency_us", e.latency_us},
          {"lognormal_mu", e.lognormal_mu},
          {"lognormal_sigma", e.lognormal_sigma},
          {"latency_obs_dim", e.latency_obs_dim},
          {"latency_actions", e.latency_actions}};
}

void read_env(const ordered_json& j, envs::EnvSpec& e) {
  Reader r(j, "env");
  get_enum(r, "kind", e.kind, envs::env_kind_from_string);
  r.get("max_episode_len", e.max_episode_len);
  r.get("width", e.width);
  r.get("height", e.height);
  r.get("reset_noise", e.reset_noise);
  get_enum(r, "latency_dist", e.latency_dist, envs::latency_dist_from_string);
  r.get("latency_us", e.latency_us);
  r.get("lognormal_mu", e.lognormal_mu);
  r.get("lognormal_sigma", e.lognormal_sigma);
  r.get("latency_obs_dim", e.latency_obs_dim);
  r.get("latency_actions", e.latency_actions);
}

ordered_json sampler_json(const sampler::SamplerConfig& s) {
  return {{"n_workers", s.n_workers},
          {"m_per_worker", s.m_per_worker},
          {"groups", s.groups},
          {"horizon", s.horizon},
          {"max_decorrelation_steps", s.max_decorrelation_steps}};
}

void read_sampler(const ordered_json& j, sampler::SamplerConfig& s) {
  Reader r(j, "sampler");
  r.get("n_workers", s.n_workers);
  r.get("m_per_worker", s.m_per_worker);
  r.get("groups", s.groups);
  r.get("horizon", s.horizon);
  r.get("max_decorrelation_steps", s.max_decorrelation_steps);
}

ordered_json algo_json(const algos::AlgoConfig& a) {
  return {{"algo", algos::to_string(a.algo)},
          {"gamma", a.gamma},
          {"entropy_coef", a.entropy_coef},
          {"value_coef", a.value_coef},
          {"training_intensity", a.training_intensity},
          {"ppo", {{"clip", a.ppo.clip}, {"epochs", a.ppo.epochs}, {"minibatches", a.ppo.minibatches}}},
          {"dqn",
           {{"batch_size", a.dqn.batch_size},
            {"target_period", a.dqn.target_period},
            {"n_step", a.dqn.n_step},
            {"double_q", a.dqn.double_q},
            {"eps_start", a.dqn.eps_start},
            {"eps_end", a.dqn.eps_end},
            {"eps_fraction", a.dqn.eps_fraction},
            {"replay_capacity", a.dqn.replay_capacity},
            {"min_history_factor", a.dqn.min_history_factor},
            {"max_updates_per_cycle", a.dqn.max_updates_per_cycle}}},
          {"categorical",
           {{"atoms", a.cat.atoms},
            {"auto_support", a.cat.auto_support},
            {"z_min", a.cat.z_min},
            {"z_max", a.cat.z_max}}}};
}

void read_algo(const ordered_json& j, algos::AlgoConfig& a) {
  Reader r(j, "algo");
  get_enum(r, "algo", a.algo, algos::algo_from_string);
  r.get("gamma", a.gamma);
  r.get("entropy_coef", a.entropy_coef);
  r.get("value_coef", a.value_coef);
  r.get("training_intensity", a.training_intensity);
  if (const auto* c = r.child("ppo")) {
    Reader p(*c, "algo.ppo");
    p.get("clip", a.ppo.clip);
    p.get("epochs", a.ppo.epochs);
    p.get("minibatches", a.ppo.minibatches);
  }
  if (const auto* c = r.child("dqn")) {
    Reader d(*c, "algo.dqn");
    d.get("batch_size", a.dqn.batch_size);
    d.get("target_period", a.dqn.target_period);
    d.get("n_step", a.dqn.n_step);
    d.get("double_q", a.dqn.double_q);
    d.get("eps_start", a.dqn.eps_start);
    d.get("eps_end", a.dqn.eps_end);
    d.get("eps_fraction", a.dqn.eps_fraction);
    d.get("replay_capacity", a.dqn.replay_capacity);
    d.get("min_history_factor", a.dqn.min_history_factor);
    d.get("max_updates_per_cycle", a.dqn.max_updates_per_cycle);
  }
  if (const auto* c = r.child("categorical")) {
    Reader d(*c, "algo.categorical");
    d.get("atoms", a.cat.atoms);
    d.get("auto_support", a.cat.auto_support);
    d.get("z_min", a.cat.z_min);
    d.get("z_max", a.cat.z_max);
  }
}

ordered_json hidden_json(const std::vector<nn::HiddenLayer>& hidden) {
  ordered_json arr = ordered_json::array();
  for (const auto& h : hidden) arr.push_back({{"width", h.width}, {"activation", nn::to_string(h.activation)}});
  return arr;
}

void read_hidden(const ordered_json& j, std::vector<nn::HiddenLayer>& hidden) {
  if (!j.is_array()) throw ConfigError("network.hidden: expected an array");
  hidden.clear();
  for (const auto& e : j) {
    Reader r(e, "network.hidden[]");
    nn::HiddenLayer h;
    r.get("width", h.width);
    get_enum(r, "activation", h.activation, nn::activation_from_string);
    hidden.push_back(h);
  }
}

}  // namespace

std::string serialize(const ExperimentConfig& c) {
  ordered_json j;
  j["version"] = kConfigVersion;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["total_steps"] = c.total_steps;
  j["out_dir"] = c.out_dir;
  j["env"] = env_json(c.env);
  j["sampler"] = sampler_json(c.sampler);
  j["algo"] = algo_json(c.algo);
  j["network"] = {{"hidden", hidden_json(c.hidden)}};
  j["optimizer"] = {{"kind", c.optim.kind},           {"lr", c.optim.lr},
                    {"lr_base_batch", c.optim.lr_base_batch}, {"eps", c.optim.eps},
                    {"eps_coef", c.optim.eps_coef},   {"beta1", c.optim.beta1},
                    {"beta2", c.optim.beta2},         {"decay", c.optim.decay},
                    {"max_grad_norm", c.optim.max_grad_norm}};
  j["topology"] = {{"kind", to_string(c.topology.kind)},
                   {"learners", c.topology.learners},
                   {"chunks", c.topology.chunks},
                   {"local_steps", c.topology.local_steps},
                   {"pull_horizon", c.topology.pull_horizon}};
  j["eval"] = {{"interval_steps", c.eval.interval_steps},
               {"eval_steps", c.eval.eval_steps},
               {"max_path_len", c.eval.max_path_len},
               {"epsilon", c.eval.epsilon}};
  j["telemetry"] = {{"norm_interval", c.telemetry.norm_interval}, {"cosine_probe", c.telemetry.cosine_probe}};
  j["secondary"] = {{"batch_size", c.secondary.batch_size},
                    {"shared_minibatch_rng", c.secondary.shared_minibatch_rng}};
  j["bench"] = {{"n_workers", c.bench.n_workers},   {"m_per_worker", c.bench.m_per_worker},
                {"groups", c.bench.groups},         {"cycles", c.bench.cycles},
                {"repeats", c.bench.repeats},       {"inference_delay_us", c.bench.inference_delay_us}};
  return j.dump(2) + "\n";
}

ExperimentConfig parse(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  ExperimentConfig c;
  {
    Reader r(j, "config");
    int version = -1;
    r.get("version", version);
    if (version != kConfigVersion)
      throw ConfigError("unsupported config version " + std::to_string(version) + " (expected " +
                        std::to_string(kConfigVersion) + ")");
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("total_steps", c.total_steps);
    r.get("out_dir", c.out_dir);
    if (const auto* e = r.child("env")) read_env(*e, c.env);
    if (const auto* s = r.child("sampler")) read_sampler(*s, c.sampler);
    if (const auto* a = r.child("algo")) read_algo(*a, c.algo);
    if (const auto* n = r.child("network")) {
      Reader nr(*n, "network");
      if (const auto* h = nr.child("hidden")) read_hidden(*h, c.hidden);
    }
    if (const auto* o = r.child("optimizer")) {
      Reader orr(*o, "optimizer");
      orr.get("kind", c.optim.kind);
      orr.get("lr", c.optim.lr);
      orr.get("lr_base_batch", c.optim.lr_base_batch);
      orr.get("eps", c.optim.eps);
      orr.get("eps_coef", c.optim.eps_coef);
      orr.get("beta1", c.optim.beta1);
      orr.get("beta2", c.optim.beta2);
      orr.get("decay", c.optim.decay);
      orr.get("max_grad_norm", c.optim.max_grad_norm);
    }
    if (const auto* t = r.child("topology")) {
      Reader tr(*t, "topology");
      get_enum(tr, "kind", c.topology.kind, topology_from_string);
      tr.get("learners", c.topology.learners);
      tr.get("chunks", c.topology.chunks);
      tr.get("local_steps", c.topology.local_steps);
      tr.get("pull_horizon", c.topology.pull_horizon);
    }
    if (const auto* e = r.child("eval")) {
      Reader er(*e, "eval");
      er.get("interval_steps", c.eval.interval_steps);
      er.get("eval_steps", c.eval.eval_steps);
      er.get("max_path_len", c.eval.max_path_len);
      er.get("epsilon", c.eval.epsilon);
    }
    if (const auto* t = r.child("telemetry")) {
      Reader tr(*t, "telemetry");
      tr.get("norm_interval", c.telemetry.norm_interval);
      tr.get("cosine_probe", c.telemetry.cosine_probe);
    }
    if (const auto* s = r.child("secondary")) {
      Reader sr(*s, "secondary");
      sr.get("batch_size", c.secondary.batch_size);
      sr.get("shared_minibatch_rng", c.secondary.shared_minibatch_rng);
    }
    if (const auto* b = r.child("bench")) {
      Reader br(*b, "bench");
      br.get("n_workers", c.bench.n_workers);
      br.get("m_per_worker", c.bench.m_per_worker);
      br.get("groups", c.bench.groups);
      br.get("cycles", c.bench.cycles);
      br.get("repeats", c.bench.repeats);
      br.get("inference_delay_us", c.bench.inference_delay_us);
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void save(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << serialize(cfg);
}

}  // namespace rlscale::config
