#pragma once

// Measured constants of the width / forgetting bounds and the evaluators that
// check those bounds against networks produced by the training protocol.
//
// Layer indices in this header are zero-based; task indices t, t' are
// one-based (M_t is record.snapshot(t - 1)), matching ExperimentRecord gaps.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "widthlab/continual.hpp"
#include "widthlab/dataset.hpp"
#include "widthlab/network.hpp"

namespace widthlab {

/// Norms at or below this are treated as zero by every ratio.
inline constexpr double kDegenerateNorm = 1e-12;

// ---- distance from initialization ----

struct DriftObservation {
  std::size_t width = 0;
  double alpha = 1.0;
  std::size_t layer = 0;
  /// ||A_{t+1}[S] - A_t[S]||_F / ||A_t[S]||_2 with S the task-(t+1) active rows.
  double drift = 0.0;
  /// Same ratio with a spectral numerator.
  double drift_spectral = 0.0;
  std::size_t active_count = 0;
};

/// One observation per maskable layer. Throws DegenerateError when
/// ||A_t[S]||_2 vanishes.
std::vector<DriftObservation> measure_drift(const ModelSnapshot& prev, const ModelSnapshot& next,
                                            const ActiveRowMask& next_mask);
std::vector<DriftObservation> measure_drift(const ExperimentRecord& rec, std::size_t t);

struct DriftPoint {
  double active_count = 0.0;
  double drift = 0.0;
};

struct DriftFit {
  double gamma = 0.0;
  double beta = 0.0;
  double residual = 0.0;         // sum of squared log residuals
  std::size_t points = 0;
  double log_correlation = 0.0;  // Pearson r of (log n, log drift)
};

/// Least squares of log drift = log gamma - beta log n. Needs >= 2 points
/// with >= 2 distinct counts; throws InvalidInput on a nonpositive value.
DriftFit fit_power_law(std::span<const DriftPoint> points);

// ---- active-row intersections ----

struct IntersectionStats {
  double empirical_mean = 0.0;
  double expected = 0.0;        // alpha^2 W
  double stderr_binomial = 0.0; // sqrt(alpha^2 (1 - alpha^2) W / trials)
  double stderr_sample = 0.0;
  std::size_t trials = 0;
};

IntersectionStats intersection_stats(double alpha, std::size_t width, std::size_t trials,
                                     std::uint64_t seed);

// ---- spectral ratios ----

struct LambdaEntry {
  std::size_t i = 0, j = 0;  // one-based tasks
  std::size_t layer = 0;
  double lambda = 0.0;
};

struct LambdaTable {
  std::vector<LambdaEntry> entries;  // all i <= j in [t, t'], every layer
  double lambda_bar = 1.0;           // max over i < j; 1 when t == t'
};

/// lambda^l_{i,j} = ||A_{l,j}[S_{l,i}]||_2 / ||A_{l,i}[S_{l,i}]||_2.
double lambda_ratio(const ModelSnapshot& mi, const ActiveRowMask& mask_i, const ModelSnapshot& mj,
                    std::size_t layer);
LambdaTable lambda_ratios(const ExperimentRecord& rec, std::size_t t, std::size_t t_prime);

double measure_chi(const TaskDataset& task);

// ---- noise stability ----

/// Layer cushion: per layer, max over probes of ||A|| ||u|| / ||A u|| with u
/// the layer input and A the masked weight matrix. Probes with ||A u|| below
/// kDegenerateNorm are skipped; throws DegenerateError if all are.
std::vector<double> layer_cushion(const ModelSnapshot& model, const ActiveRowMask& mask,
                                  const TaskDataset& task);

/// Activation contraction: per layer, max of ||x|| / ||phi(x)|| where x is the
/// pre-activation feeding that layer (the raw input for layer 0, where phi is
/// the identity). Same skip rule as layer_cushion.
std::vector<double> activation_contraction(const ModelSnapshot& model, const ActiveRowMask& mask,
                                           const TaskDataset& task);

struct NoiseStabilityConstants {
  std::vector<double> mu;
  std::vector<double> c;
  std::vector<double> kappa;  // L_i c_i mu_i
  double Gamma = 0.0;         // max ||M_t(x)||_2 over the task
};

NoiseStabilityConstants measure_noise_constants(const ModelSnapshot& model,
                                                const ActiveRowMask& mask,
                                                const TaskDataset& task);

/// Re-checks the defining inequalities of mu and c on every probe.
bool verify_noise_constants(const ModelSnapshot& model, const ActiveRowMask& mask,
                            const TaskDataset& task, const NoiseStabilityConstants& k);

// ---- bound evaluators ----

struct BoundInputs {
  std::size_t t = 1;
  std::size_t t_prime = 1;
  double lambda_bar = 1.0;
  double chi = 0.0;
  std::vector<double> layer_norms;  // ||A_{t,l}||_2, one per layer
  std::vector<double> lipschitz;    // L_l, one per layer
  double gamma = 0.0;
  double beta = 0.0;
  double alpha = 1.0;
  double width = 1.0;
};

/// (t'-t) L 2^L lambda_bar chi prod(L_l ||A_l||) gamma W^-beta alpha^((1-2 beta)/2)
double bound_theorem1(const BoundInputs& in);

/// eta = prod_i (kappa_i + kappa_i (t'-t) gamma lambda_bar mu_i) * sum_i kappa_i
double noise_eta(const BoundInputs& in, const NoiseStabilityConstants& k);
/// Gamma (t'-t) gamma lambda_bar W^-beta alpha^((1-2 beta)/2) eta
double bound_noise_stability(const BoundInputs& in, const NoiseStabilityConstants& k);

// ---- deterministic certificate ----

struct CertificateResult {
  std::vector<double> layer_norms;  // ||A_{a,l}[S_l]||_2
  std::vector<double> diff_norms;   // ||U_l||_2
  std::vector<double> ratios;       // ||U_l|| / ||A_{a,l}[S_l]||
  /// Every ratio <= 1, the condition under which the 2^L form is a theorem.
  bool premise_holds = true;
  double max_gap = 0.0;
  double mean_gap = 0.0;
  double bound_at_max_norm = 0.0;   // certificate evaluated at the largest ||x||
  std::size_t points = 0;
  std::size_t violations = 0;
  bool holds = true;
};

/// Evaluates, per probe point, 2^L ||x|| prod ||A_{a,l}[S_l]|| sum_l r_l with
/// measured U_l. When some r_l > 1 the always-valid form
/// ||x|| prod ||A_{a,l}[S_l]|| (prod (1 + r_l) - 1) is used instead.
CertificateResult perturbation_certificate(const ModelSnapshot& a, const ModelSnapshot& b,
                                           const ActiveRowMask& mask, const TaskDataset& probe,
                                           std::size_t probe_limit = 0);

// ---- expectation check for the per-layer drift lemma ----

struct Lemma2Layer {
  std::size_t layer = 0;
  double mean_lhs = 0.0;
  double mean_rhs = 0.0;
  bool holds = true;
};

struct Lemma2Report {
  std::size_t t = 0;
  std::size_t reseeds = 0;
  std::vector<Lemma2Layer> layers;
  bool holds = true;
};

/// Retrains task t+1 from M_t under `reseeds` fresh masks and compares the
/// mean of ||A_t[S_t] - A'_{t+1}[S_t]||_2 / ||A_t[S_t]||_2 with
/// lambda gamma W^-beta alpha^((1-2 beta)/2). `train_tasks` are the tasks
/// the record was trained on. With train.epochs == 0 the retrain is skipped.
Lemma2Report lemma2_check(const ExperimentRecord& rec, std::span<const TaskDataset> train_tasks,
                          std::size_t t, std::size_t reseeds, const DriftFit& fit,
                          const TrainConfig* train_override = nullptr);

// ---- report ----

struct BoundReport {
  std::size_t t = 1, t_prime = 1;
  BoundInputs inputs;
  NoiseStabilityConstants noise;
  double eta = 0.0;
  CertificateResult certificate;
  double measured_max_gap = 0.0;
  double measured_mean_gap = 0.0;
  double theorem1_bound = 0.0;
  double noise_stability_bound = 0.0;
  bool theorem1_holds = true;
  bool noise_stability_holds = true;
  bool alpha_exponent_nonpositive = false;  // beta >= 1/2
};

/// Measures every constant for M_t versus M_t' on probe data of task t.
BoundReport bound_report(const ModelSnapshot& mt, const ActiveRowMask& mask_t,
                         const ModelSnapshot& mtp, const ActiveRowMask& mask_tp,
                         const TaskDataset& probe, double gamma, double beta,
                         std::size_t probe_limit = 0);

std::string bound_report_json(const BoundReport& r);

}  // namespace widthlab
