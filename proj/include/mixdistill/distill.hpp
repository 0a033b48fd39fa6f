#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixdistill/dynamics.hpp"
#include "mixdistill/mixing.hpp"
#include "mixdistill/nn.hpp"

namespace mixdistill {

/// (state, teacher control) regression pairs.
struct DistillDataset {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> controls;
  std::vector<std::string> provenance;

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
  void add(Eigen::VectorXd s, Eigen::VectorXd u, std::string tag);
};

enum class CollectMode { kRollout, kGrid };
CollectMode parse_collect_mode(const std::string& name);

/// Rollout mode records (observed state, applied control) along closed-loop
/// trajectories from random initial states until n_states pairs exist. Grid
/// mode evaluates the teacher on a uniform grid over the state range, topped
/// up with uniform samples when n_states is not a perfect power.
DistillDataset collect_teacher_data(const Controller& teacher, const SystemSpec& spec, int n_states,
                                    CollectMode mode, Rng& rng);
DistillDataset collect_teacher_data(const MixingPolicy& policy, const std::vector<Expert>& experts,
                                    const SystemSpec& spec, int n_states, CollectMode mode, Rng& rng);

void save_dataset(const DistillDataset& data, const std::filesystem::path& path);
DistillDataset load_dataset(const std::filesystem::path& path);

struct DistillConfig {
  double adversarial_prob = 0.5;       // p
  Eigen::VectorXd perturbation_bound;  // Delta; empty -> default_perturbation_bound
  double l2_weight = 1e-3;             // lambda
  std::vector<int> hidden{32, 32};
  nn::Activation hidden_activation = nn::Activation::kTanh;
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int start_epoch = -1;  // N_E for interleaved mode; -1 -> half the mixing epochs
  std::uint64_t seed = 0;

  void validate(int state_dim) const;
  /// Plain regression settings (p = 0, lambda = 0) used for the direct student.
  DistillConfig direct() const;
};

/// `fraction` of each state dimension's half-range.
Eigen::VectorXd default_perturbation_bound(const SystemSpec& spec, double fraction = 0.1);

/// delta_i = Delta_i * sign(d l / d s_i) for l = mean squared error between
/// net(s) and u_target, with sign(0) = 0.
Eigen::VectorXd fgsm_perturb(const nn::Network& student, const Eigen::VectorXd& s,
                             const Eigen::VectorXd& u_target, const Eigen::VectorXd& bound);
/// Column-wise version over a batch.
Eigen::MatrixXd fgsm_perturb_batch(const nn::Network& student, const Eigen::MatrixXd& states,
                                   const Eigen::MatrixXd& targets, const Eigen::VectorXd& bound);

struct DistillStep {
  double loss = 0.0;  // MSE on the inputs used plus lambda * ||q||^2
  bool adversarial = false;
  Eigen::MatrixXd inputs;  // what the student was trained on
};

/// One optimizer step. Draws z ~ U[0,1] once per batch; z <= p selects FGSM
/// inputs (so p = 0 never perturbs). Throws TrainingError on a non-finite loss.
DistillStep robust_distill_step(nn::Network& student, nn::Adam& opt, const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& controls, const DistillConfig& cfg, Rng& rng);

struct DistillReport {
  double final_mse = 0.0;  // clean MSE over the full dataset
  double lipschitz = 0.0;
  double squared_parameter_norm = 0.0;
  std::vector<double> epoch_loss;
};

struct DistillResult {
  nn::Network student;
  DistillReport report;
};

/// Student network with the configured architecture, initialized from the
/// config seed alone so paired runs share their starting point.
nn::Network init_student(int state_dim, int input_dim, const DistillConfig& cfg);

/// Trains a fresh student on the dataset. Deterministic under cfg.seed.
/// Throws InputError on an empty dataset.
DistillResult distill(const DistillDataset& data, const DistillConfig& cfg);

/// Interleaved mode: trains the mixing policy and, from epoch N_E on, feeds
/// each epoch's (observed state, applied control) pairs to the student.
struct InterleavedResult {
  MixingResult mixing;
  DistillResult student;
  DistillDataset dataset;  // every pair the student was trained on
};
InterleavedResult train_mixing_interleaved(const SystemSpec& spec, const std::vector<Expert>& experts,
                                           const PerturbationModel& pm, const MixingConfig& mixing,
                                           const DistillConfig& distill_cfg);

/// Student used as a controller, output clipped to the input bound.
Controller make_network_controller(const nn::Network& net, const SystemSpec& spec);

}  // namespace mixdistill
