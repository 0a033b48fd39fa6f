#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mixdistill/distill.hpp"
#include "mixdistill/dynamics.hpp"
#include "mixdistill/errors.hpp"
#include "mixdistill/eval.hpp"
#include "mixdistill/experts.hpp"
#include "mixdistill/mixing.hpp"
#include "mixdistill/nn.hpp"
#include "mixdistill/pipeline.hpp"
#include "mixdistill/verify.hpp"

namespace py = pybind11;
using namespace mixdistill;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Box make_box(const std::vector<std::pair<double, double>>& bounds) {
  VectorXd lo(static_cast<Eigen::Index>(bounds.size())), hi(lo.size());
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    lo[static_cast<Eigen::Index>(i)] = bounds[i].first;
    hi[static_cast<Eigen::Index>(i)] = bounds[i].second;
  }
  return Box(lo, hi);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Expert mixing, robust distillation and Bernstein/interval verification for small control systems.";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<DependencyError>(m, "DependencyError", base.ptr());
  py::register_exception<CoverageError>(m, "CoverageError", base.ptr());
  py::register_exception<SynthesisError>(m, "SynthesisError", base.ptr());

  py::class_<Box>(m, "Box")
      .def(py::init(&make_box), py::arg("bounds"))
      .def_property_readonly("lo", [](const Box& b) { return b.lo(); })
      .def_property_readonly("hi", [](const Box& b) { return b.hi(); })
      .def_property_readonly("dim", &Box::dim)
      .def("contains", py::overload_cast<const VectorXd&>(&Box::contains, py::const_))
      .def("contains_box", py::overload_cast<const Box&>(&Box::contains, py::const_))
      .def("__repr__", [](const Box& b) {
        std::string s = "Box([";
        for (int i = 0; i < b.dim(); ++i) s += (i ? ", " : "") + std::to_string(b.lo(i)) + ".." + std::to_string(b.hi(i));
        return s + "])";
      });

  py::class_<SystemSpec>(m, "SystemSpec")
      .def_readonly("name", &SystemSpec::name)
      .def_readonly("state_dim", &SystemSpec::state_dim)
      .def_readonly("input_dim", &SystemSpec::input_dim)
      .def_readonly("disturbance_dim", &SystemSpec::disturbance_dim)
      .def_readonly("safe_region", &SystemSpec::safe_region)
      .def_readonly("initial_set", &SystemSpec::initial_set)
      .def_readonly("input_bound", &SystemSpec::input_bound)
      .def_readonly("disturbance_bound", &SystemSpec::disturbance_bound)
      .def_readonly("tau", &SystemSpec::tau)
      .def_readonly("horizon", &SystemSpec::horizon)
      .def("with_disturbance", &SystemSpec::with_disturbance);

  m.def("builtin_system", &builtin_system, py::arg("name"));
  m.def("load_system", &load_system, py::arg("path"));
  m.def("step", &step, py::arg("spec"), py::arg("state"), py::arg("control"), py::arg("disturbance"),
        "One step of the discrete-time plant.");

  py::class_<nn::Network>(m, "Network")
      .def_property_readonly("input_dim", &nn::Network::input_dim)
      .def_property_readonly("output_dim", &nn::Network::output_dim)
      .def_property_readonly("depth", &nn::Network::depth)
      .def("forward", [](const nn::Network& n, const VectorXd& x) { return nn::forward(n, x); })
      .def("forward_batch", [](const nn::Network& n, const MatrixXd& xs) { return nn::forward_batch(n, xs); },
           "Inputs one sample per column.")
      .def("input_gradient",
           [](const nn::Network& n, const VectorXd& x, const VectorXd& upstream) {
             return nn::backward(n, nn::record(n, x), upstream).input;
           })
      .def("lipschitz", [](const nn::Network& n) { return nn::lipschitz_upper_bound(n); })
      .def("save", [](const nn::Network& n, const std::filesystem::path& p) { nn::save_network(n, p); })
      .def("__eq__", &nn::Network::operator==);
  m.def("load_network", &nn::load_network, py::arg("path"));
  m.def("parse_network", &nn::parse_network, py::arg("text"));
  m.def(
      "linear_network",
      [](const MatrixXd& w, const VectorXd& b) {
        return nn::Network({nn::Layer{w, b, nn::Activation::kIdentity}});
      },
      py::arg("weights"), py::arg("bias"));

  py::class_<LqrResult>(m, "LqrResult")
      .def_readonly("cost_to_go", &LqrResult::cost_to_go)
      .def_readonly("gain", &LqrResult::gain)
      .def_readonly("iterations", &LqrResult::iterations)
      .def_readonly("closed_loop_spectral_radius", &LqrResult::closed_loop_spectral_radius);
  m.def(
      "lqr",
      [](const MatrixXd& a, const MatrixXd& b, const MatrixXd& q, const MatrixXd& r) {
        return lqr_synthesize(a, b, q, r);
      },
      py::arg("a"), py::arg("b"), py::arg("q"), py::arg("r"));
  m.def("linearize", [](const SystemSpec& s, const VectorXd& x, const VectorXd& u) { return linearize(s, x, u); });

  m.def("mix_control", &mix_control, py::arg("weights"), py::arg("expert_outputs"), py::arg("input_bound"));
  m.def("fgsm_perturb", &fgsm_perturb, py::arg("student"), py::arg("state"), py::arg("target"), py::arg("bound"));

  m.def(
      "safe_control_rate",
      [](const nn::Network& net, const SystemSpec& spec, int n, std::uint64_t seed) {
        Rng rng(seed);
        return safe_control_rate(make_network_controller(net, spec), spec, n, PerturbationModel::none(), rng);
      },
      py::arg("network"), py::arg("spec"), py::arg("n") = 500, py::arg("seed") = 0,
      "Clean safe-control rate of a network controller clipped to the input bound.");
  m.def(
      "attack_rate",
      [](const nn::Network& net, const SystemSpec& spec, int n, double bound, std::uint64_t seed) {
        Rng rng(seed);
        return attack_eval(net, spec, n, bound, rng).rate;
      },
      py::arg("network"), py::arg("spec"), py::arg("n") = 500, py::arg("bound") = 0.1, py::arg("seed") = 0);

  py::class_<BernsteinApprox>(m, "BernsteinApprox")
      .def_readonly("epsilon", &BernsteinApprox::epsilon)
      .def_readonly("target_met", &BernsteinApprox::target_met)
      .def_property_readonly("partitions", [](const BernsteinApprox& a) { return a.partitions.size(); })
      .def(
          "evaluate",
          [](const BernsteinApprox& a, const VectorXd& x) {
            for (const auto& p : a.partitions) {
              if (p.box.contains(x)) return p.poly.evaluate(x);
            }
            throw CoverageError("point outside the approximation domain");
          },
          py::arg("x"));
  m.def(
      "partition_and_fit",
      [](const nn::Network& net, const Box& domain, double target, int degree, int max_partitions) {
        PartitionConfig cfg;
        cfg.target_epsilon = target;
        cfg.degree = degree;
        cfg.max_partitions = max_partitions;
        return partition_and_fit(net, domain, cfg);
      },
      py::arg("network"), py::arg("domain"), py::arg("target_epsilon"), py::arg("degree") = 3,
      py::arg("max_partitions") = 256);

  py::class_<ReachResult>(m, "ReachResult")
      .def_readonly("boxes", &ReachResult::boxes)
      .def_readonly("safe", &ReachResult::safe)
      .def_readonly("inconclusive", &ReachResult::inconclusive)
      .def_readonly("failure_step", &ReachResult::failure_step)
      .def_readonly("diagnostic", &ReachResult::diagnostic);
  m.def("verify_reach", &verify_reach, py::arg("spec"), py::arg("approx"), py::arg("x0"), py::arg("steps"));
  m.def(
      "verify_invariant",
      [](const SystemSpec& s, const BernsteinApprox& a, const Box& c, int cells) {
        return verify_invariant(s, a, c, cells).invariant;
      },
      py::arg("spec"), py::arg("approx"), py::arg("candidate"), py::arg("cells_per_dim") = 8);

  m.def("stage_names", &stage_names);
  m.def(
      "run_stage",
      [](const std::filesystem::path& config, const std::string& stage, std::optional<std::uint64_t> seed,
         std::optional<std::filesystem::path> out) {
        ExperimentConfig cfg = load_config(config);
        if (seed) cfg.seed = *seed;
        if (out) cfg.output_dir = *out;
        const StageOutcome o = run_stage(cfg, stage);
        return py::dict(py::arg("stage") = o.stage, py::arg("artifacts") = o.artifacts,
                        py::arg("milliseconds") = o.milliseconds, py::arg("inconclusive") = o.inconclusive);
      },
      py::arg("config"), py::arg("stage"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::call_guard<py::gil_scoped_release>());
}
