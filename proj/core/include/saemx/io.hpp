#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "saemx/inference.hpp"
#include "saemx/saem.hpp"
#include "saemx/trial.hpp"
#include "saemx/types.hpp"

namespace saemx {

// ---------------------------------------------------------------- datasets

// Long-format CSV with columns subject_id, unit, time, dv, dose, tau (tau
// optional/blank).  Rows are normalized to (subject, unit, time) order;
// malformed input raises ParseError naming the offending line.
Dataset read_dataset(const std::string& path);
Dataset dataset_from_csv(const std::string& content, const std::string& origin);

void write_dataset(const Dataset& data, const std::string& path);  // atomic
std::string dataset_to_csv(const Dataset& data);

// --------------------------------------------------------------- fit config

// Parsed run configuration; `init` fields are optional with documented
// fallbacks resolved against the data at fit time.
struct FitConfig {
  std::string structural_id;
  std::string error_name = "combined";
  CovStructure structure = CovStructure::Diagonal;

  int n_iterations = 500;
  int burn_in = 200;
  int n_chains = 0;
  double anneal_decay = 0.0;
  std::uint64_t seed = 0;
  KernelConfig kernels;

  struct Init {
    std::optional<Eigen::VectorXd> mu;
    std::optional<Eigen::MatrixXd> beta;
    std::optional<Eigen::MatrixXd> omega;
    std::optional<Eigen::MatrixXd> psi;
    std::optional<double> sigma2;
  } init;

  std::vector<std::string> beta_zero;  // constrained beta components, by name

  InferenceConfig inference;
  std::vector<std::string> tests;  // subset of {"wald", "lrt"}
  std::string test_component;
  double alpha = 0.05;

  struct Design {
    int n_subjects = 0;
    int n_units = 2;
    std::vector<std::vector<double>> times;
    std::vector<double> dose;
    std::optional<double> tau;
    std::optional<ThetaParams> theta_true;
  };
  std::optional<Design> design;

  int replicates = 100;
  int workers = 0;
  double max_failure_rate = 0.05;

  static FitConfig from_file(const std::string& path);
  static FitConfig from_json_text(const std::string& text, const std::string& origin);
};

ModelSpec model_from_config(const FitConfig& config);

// initial estimate: configured values where present, otherwise mu = 0,
// beta = 0, omega = psi = 0.1 I, sigma2 = var(dv) / 10
ThetaParams resolve_theta_init(const FitConfig& config, const Dataset& data);
// dims-only variant for runs that simulate their own data; sigma2 falls back to 0.1
ThetaParams resolve_theta_init(const FitConfig& config, int K);

BetaZeroMask resolve_beta_mask(const FitConfig& config, int K, const std::vector<std::string>& param_names);

SaemConfig saem_config_from(const FitConfig& config, const Dataset& data);

TrialDesign trial_design_from(const FitConfig& config);

// ----------------------------------------------------------------- results

// Everything a fit leaves behind; serialized as schema-versioned JSON that
// the test/loglik commands can reload.
struct FitRecord {
  int format_version = 1;
  std::string structural_id, error_name;
  CovStructure structure = CovStructure::Diagonal;
  std::string data_file;
  std::uint64_t seed = 0;
  int n_iterations = 0, burn_in = 0;
  std::vector<std::string> param_names;
  int n_subjects = 0, n_units = 0;
  std::vector<std::string> constraints;
  ThetaParams theta_hat;
  std::map<std::string, double> standard_errors;
  std::vector<std::string> se_excluded;
  double fim_condition = 0.0;
  bool fim_invertible = false;
  std::optional<LoglikEstimate> loglik;
  std::vector<TestResult> tests;
  KernelConfig kernels;
  InferenceConfig inference;
  // trace diagnostics
  bool stabilized = false;
  double max_rel_range_last50 = 0.0;
  int floored_iterations = 0;
  double acc_prior = 0.0, acc_rw_full = 0.0, acc_rw_component = 0.0;
};

void write_fit_json(const FitRecord& record, const std::string& path);  // atomic
FitRecord read_fit_json(const std::string& path);

void write_trace_csv(const std::vector<IterationRecord>& trace, const std::vector<std::string>& names,
                     const std::string& path);  // atomic

void write_gof_csv(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                   const std::vector<Eigen::MatrixXd>& phi_cond_mean, const std::string& path);

// report.csv (one parameter per row) plus .txt and .json siblings with the
// rejection rates and run metadata
void write_report(const ReplicationReport& report, const std::string& csv_path);

// shortest round-trip decimal formatting shared by all CSV writers
std::string format_double(double x);

std::string read_text_file(const std::string& path);
void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace saemx
