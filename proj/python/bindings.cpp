#include "rlscale/algos.hpp"
#include "rlscale/cli.hpp"
#include "rlscale/config.hpp"
#include "rlscale/envs.hpp"
#include "rlscale/experiment.hpp"
#include "rlscale/nn.hpp"
#include "rlscale/optim.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace rlscale;

namespace {

nn::NetSpec make_spec(std::size_t input_dim, std::vector<std::size_t> hidden, const std::string& activation,
                      const std::string& head, std::size_t actions, std::size_t atoms) {
  nn::NetSpec s;
  s.input_dim = input_dim;
  s.hidden.clear();
  for (auto w : hidden) s.hidden.push_back({w, nn::activation_from_string(activation)});
  s.head = nn::head_from_string(head);
  s.actions = actions;
  s.atoms = atoms;
  s.validate();
  return s;
}

}  // namespace

PYBIND11_MODULE(_rlscale, m) {
  m.doc() = "Core operations of the rlscale library";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<RuntimeError>(m, "OperationError", PyExc_RuntimeError);

  py::class_<nn::Network>(m, "Network")
      .def(py::init([](std::size_t input_dim, std::vector<std::size_t> hidden, const std::string& activation,
                       const std::string& head, std::size_t actions, std::size_t atoms) {
             return nn::Network(make_spec(input_dim, std::move(hidden), activation, head, actions, atoms));
           }),
           py::arg("input_dim"), py::arg("hidden") = std::vector<std::size_t>{64, 64}, py::arg("activation") = "tanh",
           py::arg("head") = "policy_value", py::arg("actions") = 2, py::arg("atoms") = 1)
      .def_property_readonly("num_params", &nn::Network::num_params)
      .def("init", &nn::Network::init, py::arg("seed"))
      .def("forward", [](const nn::Network& n, const ParamVector& p, const Matrix& x) { return n.forward(p, x); })
      .def("backward", [](const nn::Network& n, const ParamVector& p, const Matrix& x, const Matrix& g) {
        return n.backward(p, x, g);
      });

  py::class_<optim::AdamState>(m, "AdamState")
      .def(py::init([](std::size_t n, double lr, double beta1, double beta2, double eps) {
             return optim::AdamState(n, optim::AdamHyper{lr, beta1, beta2, eps});
           }),
           py::arg("n"), py::arg("lr") = 1e-3, py::arg("beta1") = 0.9, py::arg("beta2") = 0.999, py::arg("eps") = 1e-8)
      .def_readonly("t", &optim::AdamState::t)
      .def_readonly("m", &optim::AdamState::m)
      .def_readonly("v", &optim::AdamState::v);

  m.def(
      "adam_step",
      [](optim::AdamState& s, ParamVector params, const GradVector& g) {
        Vector step = optim::adam_step(s, params, g);
        return py::make_tuple(params, step);
      },
      py::arg("state"), py::arg("params"), py::arg("grad"), "Returns (new_params, step).");

  m.def(
      "categorical_project",
      [](const std::vector<double>& rewards, const std::vector<std::uint8_t>& dones, const std::vector<double>& discounts,
         const Matrix& next_dist, const Vector& support) {
        return algos::categorical_project(rewards, dones, discounts, next_dist, support);
      },
      py::arg("rewards"), py::arg("dones"), py::arg("discounts"), py::arg("next_dist"), py::arg("support"));
  m.def("make_support", &algos::make_support, py::arg("atoms"), py::arg("z_min"), py::arg("z_max"));
  m.def("updates_per_cycle", &algos::updates_per_cycle, py::arg("sims"), py::arg("horizon"), py::arg("batch"),
        py::arg("intensity"), py::arg("cap") = 0);

  m.def(
      "catch_values",
      [](std::size_t w, std::size_t h) {
        const auto v = envs::catch_values(w, h);
        return py::dict(py::arg("optimal") = v.optimal_mean_return, py::arg("random") = v.random_mean_return);
      },
      py::arg("width") = 5, py::arg("height") = 10);

  py::class_<envs::Env>(m, "Env")
      .def("reset", py::overload_cast<std::uint64_t>(&envs::Env::reset), py::arg("seed"))
      .def("step",
           [](envs::Env& e, int a) {
             const auto r = e.step(a);
             return py::make_tuple(r.obs, r.reward, r.done, r.time_limit);
           })
      .def_property_readonly("obs_dim", &envs::Env::obs_dim)
      .def_property_readonly("action_count", &envs::Env::action_count);
  m.def(
      "make_env",
      [](const std::string& kind, std::size_t width, std::size_t height, std::size_t max_episode_len) {
        envs::EnvSpec s;
        s.kind = envs::env_kind_from_string(kind);
        s.width = width;
        s.height = height;
        s.max_episode_len = max_episode_len;
        return envs::make_env(s);
      },
      py::arg("kind") = "catch", py::arg("width") = 5, py::arg("height") = 10, py::arg("max_episode_len") = 1000);

  m.def(
      "parse_config", [](const std::string& text) { return config::serialize(config::parse(text)); }, py::arg("text"),
      "Validates a config and returns its canonical text.");
  m.def("default_config", [] { return config::serialize(config::ExperimentConfig{}); });

  m.def(
      "train",
      [](const std::string& text) {
        const auto cfg = config::parse(text);
        experiment::RunResult r;
        {
          py::gil_scoped_release release;
          r = experiment::run_experiment(cfg);
        }
        return py::dict(py::arg("run_dir") = r.run_dir.string(), py::arg("summary") = r.summary,
                        py::arg("final_params") = r.final_params);
      },
      py::arg("config_text"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command; returns (exit_code, stdout, stderr).");
}
