#include "widthlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>

#include "json.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/metrics.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {
namespace {

RowIndexSet layer_rows(const ModelSnapshot& m, const ActiveRowMask& mask, std::size_t l) {
  if (l + 1 < m.num_layers() && !mask.rows.empty()) return mask.active_set(l);
  return RowIndexSet::all(m.layers[l].rows());
}

double checked_norm(const Matrix& m, const char* what, std::size_t layer) {
  const double n = spectral_norm(m);
  if (n <= kDegenerateNorm)
    throw DegenerateError(std::string(what) + ": vanishing spectral norm at layer " +
                          std::to_string(layer));
  return n;
}

Matrix first_rows(const TaskDataset& task, std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, task.n()) : task.n();
  Matrix x(n, task.d());
  std::copy_n(task.inputs.data().begin(), n * task.d(), x.data().begin());
  return x;
}

// Per layer: the input it sees and its masked pre-activation.
struct LayerwiseTrace {
  std::vector<Matrix> in;
  std::vector<Matrix> pre;
};

LayerwiseTrace layerwise(const ModelSnapshot& m, const ActiveRowMask& mask, const Matrix& x) {
  check_mask(m, mask);
  LayerwiseTrace tr;
  Matrix h = x;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Matrix z;
    kernels::matmul_nt(h, m.layers[l], z);
    if (l + 1 < m.num_layers() && !mask.rows.empty())
      for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t r = 0; r < z.cols(); ++r)
          if (!mask.rows[l][r]) z(i, r) = 0.0;
    Matrix next = z;
    if (m.specs[l].activation == Activation::relu)
      for (double& v : next.data()) v = std::max(v, 0.0);
    tr.in.push_back(std::move(h));
    tr.pre.push_back(std::move(z));
    h = std::move(next);
  }
  return tr;
}

double alpha_factor(double alpha, double beta) { return std::pow(alpha, (1.0 - 2.0 * beta) / 2.0); }

}  // namespace

// ---- drift ----

std::vector<DriftObservation> measure_drift(const ModelSnapshot& prev, const ModelSnapshot& next,
                                            const ActiveRowMask& next_mask) {
  if (!prev.same_architecture(next)) throw ShapeError("measure_drift: architectures differ");
  check_mask(next, next_mask);
  std::vector<DriftObservation> out;
  for (std::size_t l = 0; l + 1 < prev.num_layers(); ++l) {
    const RowIndexSet s = layer_rows(next, next_mask, l);
    const Matrix before = row_submatrix(prev.layers[l], s);
    const Matrix diff = row_submatrix(next.layers[l], s) - before;
    const double denom = spectral_norm(before);
    if (denom <= kDegenerateNorm)
      throw DegenerateError("measure_drift: zero active submatrix at layer " + std::to_string(l));
    DriftObservation o;
    o.width = prev.width;
    o.alpha = next_mask.alpha;
    o.layer = l;
    o.drift = frobenius_norm(diff) / denom;
    o.drift_spectral = spectral_norm(diff) / denom;
    o.active_count = s.size();
    out.push_back(o);
  }
  return out;
}

std::vector<DriftObservation> measure_drift(const ExperimentRecord& rec, std::size_t t) {
  if (t < 1 || t + 1 > rec.num_tasks())
    throw PreconditionError("measure_drift: need snapshots t and t+1");
  return measure_drift(rec.snapshot(t - 1), rec.snapshot(t), rec.masks.at(t));
}

DriftFit fit_power_law(std::span<const DriftPoint> points) {
  if (points.size() < 2) throw PreconditionError("fit_power_law: need at least 2 points");
  std::vector<double> lx, ly;
  for (const auto& p : points) {
    if (!(p.active_count > 0.0) || !(p.drift > 0.0))
      throw InvalidInput("fit_power_law: nonpositive point (log undefined)");
    lx.push_back(std::log(p.active_count));
    ly.push_back(std::log(p.drift));
  }
  const double n = static_cast<double>(lx.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (sxx == 0.0) throw PreconditionError("fit_power_law: need at least 2 distinct counts");
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  DriftFit fit;
  fit.gamma = std::exp(intercept);
  fit.beta = -slope;
  fit.points = points.size();
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double r = ly[i] - (intercept + slope * lx[i]);
    fit.residual += r * r;
  }
  fit.log_correlation = pearson(lx, ly);
  return fit;
}

// ---- intersections ----

IntersectionStats intersection_stats(double alpha, std::size_t width, std::size_t trials,
                                     std::uint64_t seed) {
  if (trials == 0) throw PreconditionError("intersection_stats: trials must be >= 1");
  IntersectionStats st;
  st.trials = trials;
  st.expected = alpha * alpha * static_cast<double>(width);
  st.stderr_binomial =
      std::sqrt(alpha * alpha * (1.0 - alpha * alpha) * static_cast<double>(width) /
                static_cast<double>(trials));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < trials; ++k) {
    const std::uint64_t s = derive_seed(seed, {k});
    const auto a = sample_mask(alpha, width, 1, s, 0);
    const auto b = sample_mask(alpha, width, 1, s, 1);
    double both = 0.0;
    for (std::size_t i = 0; i < width; ++i) both += (a.rows[0][i] && b.rows[0][i]) ? 1.0 : 0.0;
    sum += both;
    sum_sq += both * both;
  }
  const double n = static_cast<double>(trials);
  st.empirical_mean = sum / n;
  if (trials > 1) {
    const double var = std::max(0.0, (sum_sq - n * st.empirical_mean * st.empirical_mean) / (n - 1));
    st.stderr_sample = std::sqrt(var / n);
  }
  return st;
}

// ---- lambda ----

double lambda_ratio(const ModelSnapshot& mi, const ActiveRowMask& mask_i, const ModelSnapshot& mj,
                    std::size_t layer) {
  if (!mi.same_architecture(mj)) throw ShapeError("lambda_ratio: architectures differ");
  const RowIndexSet s = layer_rows(mi, mask_i, layer);
  const double denom = spectral_norm(row_submatrix(mi.layers[layer], s));
  if (denom <= kDegenerateNorm)
    throw DegenerateError("lambda_ratio: zero denominator at layer " + std::to_string(layer));
  return spectral_norm(row_submatrix(mj.layers[layer], s)) / denom;
}

LambdaTable lambda_ratios(const ExperimentRecord& rec, std::size_t t, std::size_t t_prime) {
  if (t < 1 || t_prime < t || t_prime > rec.num_tasks())
    throw PreconditionError("lambda_ratios: need 1 <= t <= t' <= T");
  LambdaTable tab;
  bool any_cross = false;
  double best = 0.0;
  for (std::size_t i = t; i <= t_prime; ++i) {
    const ModelSnapshot mi = rec.snapshot(i - 1);
    for (std::size_t j = i; j <= t_prime; ++j) {
      const ModelSnapshot mj = j == i ? mi : rec.snapshot(j - 1);
      for (std::size_t l = 0; l < mi.num_layers(); ++l) {
        const double lam = j == i ? 1.0 : lambda_ratio(mi, rec.masks.at(i - 1), mj, l);
        tab.entries.push_back({i, j, l, lam});
        if (j != i) {
          best = any_cross ? std::max(best, lam) : lam;
          any_cross = true;
        }
      }
    }
  }
  tab.lambda_bar = any_cross ? best : 1.0;
  return tab;
}

double measure_chi(const TaskDataset& task) {
  double chi = 0.0;
  for (std::size_t i = 0; i < task.n(); ++i) chi = std::max(chi, l2_norm(task.inputs.row(i)));
  return chi;
}

// ---- noise stability ----

std::vector<double> layer_cushion(const ModelSnapshot& model, const ActiveRowMask& mask,
                                  const TaskDataset& task) {
  if (task.n() == 0) throw PreconditionError("layer_cushion: empty task");
  const LayerwiseTrace tr = layerwise(model, mask, task.inputs);
  std::vector<double> mu;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const double a_norm = spectral_norm(row_submatrix(model.layers[l], layer_rows(model, mask, l)));
    double best = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < task.n(); ++i) {
      const double out = l2_norm(tr.pre[l].row(i));
      if (out < kDegenerateNorm) continue;
      best = std::max(best, a_norm * l2_norm(tr.in[l].row(i)) / out);
      any = true;
    }
    if (!any)
      throw DegenerateError("layer_cushion: every probe degenerate at layer " + std::to_string(l));
    mu.push_back(best);
  }
  return mu;
}

std::vector<double> activation_contraction(const ModelSnapshot& model, const ActiveRowMask& mask,
                                           const TaskDataset& task) {
  if (task.n() == 0) throw PreconditionError("activation_contraction: empty task");
  const LayerwiseTrace tr = layerwise(model, mask, task.inputs);
  std::vector<double> c;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    double best = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < task.n(); ++i) {
      // Layer 0 sees the raw input through the identity.
      const double x = l == 0 ? l2_norm(tr.in[0].row(i)) : l2_norm(tr.pre[l - 1].row(i));
      const double phi = l2_norm(tr.in[l].row(i));
      if (phi < kDegenerateNorm) continue;
      best = std::max(best, x / phi);
      any = true;
    }
    if (!any)
      throw DegenerateError("activation_contraction: every probe degenerate at layer " +
                            std::to_string(l));
    c.push_back(best);
  }
  return c;
}

NoiseStabilityConstants measure_noise_constants(const ModelSnapshot& model,
                                                const ActiveRowMask& mask,
                                                const TaskDataset& task) {
  NoiseStabilityConstants k;
  k.mu = layer_cushion(model, mask, task);
  k.c = activation_contraction(model, mask, task);
  for (std::size_t l = 0; l < model.num_layers(); ++l)
    k.kappa.push_back(model.specs[l].lipschitz * k.c[l] * k.mu[l]);
  const Matrix logits = forward_batch(model, mask, task.inputs);
  for (std::size_t i = 0; i < logits.rows(); ++i) k.Gamma = std::max(k.Gamma, l2_norm(logits.row(i)));
  return k;
}

bool verify_noise_constants(const ModelSnapshot& model, const ActiveRowMask& mask,
                            const TaskDataset& task, const NoiseStabilityConstants& k) {
  const LayerwiseTrace tr = layerwise(model, mask, task.inputs);
  constexpr double kSlack = 1.0 + 1e-12;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const double a_norm = spectral_norm(row_submatrix(model.layers[l], layer_rows(model, mask, l)));
    for (std::size_t i = 0; i < task.n(); ++i) {
      const double out = l2_norm(tr.pre[l].row(i));
      const double in = l2_norm(tr.in[l].row(i));
      if (out >= kDegenerateNorm && a_norm * in > k.mu[l] * out * kSlack) return false;
      const double x = l == 0 ? in : l2_norm(tr.pre[l - 1].row(i));
      if (in >= kDegenerateNorm && x > k.c[l] * in * kSlack) return false;
    }
  }
  return true;
}

// ---- bounds ----

double bound_theorem1(const BoundInputs& in) {
  if (in.t_prime < in.t) throw PreconditionError("bound_theorem1: t' < t");
  if (in.layer_norms.empty() || in.lipschitz.size() != in.layer_norms.size())
    throw PreconditionError("bound_theorem1: one norm and Lipschitz constant per layer required");
  if (!(in.alpha > 0.0 && in.alpha <= 1.0) || !(in.width >= 1.0))
    throw PreconditionError("bound_theorem1: alpha in (0,1] and W >= 1 required");
  const double gap = static_cast<double>(in.t_prime - in.t);
  const double L = static_cast<double>(in.layer_norms.size());
  double prod = 1.0;
  for (std::size_t l = 0; l < in.layer_norms.size(); ++l) prod *= in.lipschitz[l] * in.layer_norms[l];
  return gap * L * std::pow(2.0, L) * in.lambda_bar * in.chi * prod * in.gamma *
         std::pow(in.width, -in.beta) * alpha_factor(in.alpha, in.beta);
}

double noise_eta(const BoundInputs& in, const NoiseStabilityConstants& k) {
  if (k.kappa.empty() || k.mu.size() != k.kappa.size())
    throw PreconditionError("noise_eta: missing noise-stability constants");
  const double drift = static_cast<double>(in.t_prime - in.t) * in.gamma * in.lambda_bar;
  double prod = 1.0, sum = 0.0;
  for (std::size_t i = 0; i < k.kappa.size(); ++i) {
    prod *= k.kappa[i] + k.kappa[i] * drift * k.mu[i];
    sum += k.kappa[i];
  }
  return prod * sum;
}

double bound_noise_stability(const BoundInputs& in, const NoiseStabilityConstants& k) {
  if (in.t_prime < in.t) throw PreconditionError("bound_noise_stability: t' < t");
  const double eta = noise_eta(in, k);
  return k.Gamma * static_cast<double>(in.t_prime - in.t) * in.gamma * in.lambda_bar *
         std::pow(in.width, -in.beta) * alpha_factor(in.alpha, in.beta) * eta;
}

// ---- certificate ----

CertificateResult perturbation_certificate(const ModelSnapshot& a, const ModelSnapshot& b,
                                           const ActiveRowMask& mask, const TaskDataset& probe,
                                           std::size_t probe_limit) {
  if (!a.same_architecture(b)) throw ShapeError("perturbation_certificate: architectures differ");
  CertificateResult res;
  const std::size_t L = a.num_layers();
  double prod = 1.0, sum_r = 0.0, prod_1r = 1.0;
  for (std::size_t l = 0; l < L; ++l) {
    const RowIndexSet s = layer_rows(a, mask, l);
    const Matrix sub_a = row_submatrix(a.layers[l], s);
    const double na = checked_norm(sub_a, "perturbation_certificate", l);
    const double nu = spectral_norm(sub_a - row_submatrix(b.layers[l], s));
    const double r = nu / na;
    res.layer_norms.push_back(na);
    res.diff_norms.push_back(nu);
    res.ratios.push_back(r);
    prod *= a.specs[l].lipschitz * na;
    sum_r += r;
    prod_1r *= 1.0 + r;
    if (r > 1.0) res.premise_holds = false;
  }
  const double per_unit_input = res.premise_holds
                                    ? std::pow(2.0, static_cast<double>(L)) * prod * sum_r
                                    : prod * (prod_1r - 1.0);

  const Matrix x = first_rows(probe, probe_limit);
  const Matrix ya = forward_batch(a, mask, x);
  const Matrix yb = forward_batch(b, mask, x);
  res.points = x.rows();
  double max_norm = 0.0, gap_sum = 0.0;
  // Norms are iterative estimates; allow 1e-9 relative.
  constexpr double kSlack = 1.0 + 1e-9;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < ya.cols(); ++c) {
      const double d = ya(i, c) - yb(i, c);
      s += d * d;
    }
    const double gap = std::sqrt(s);
    const double xn = l2_norm(x.row(i));
    if (gap > per_unit_input * xn * kSlack) ++res.violations;
    res.max_gap = std::max(res.max_gap, gap);
    gap_sum += gap;
    max_norm = std::max(max_norm, xn);
  }
  res.mean_gap = res.points ? gap_sum / static_cast<double>(res.points) : 0.0;
  res.bound_at_max_norm = per_unit_input * max_norm;
  res.holds = res.violations == 0;
  return res;
}

// ---- per-layer drift expectation ----

Lemma2Report lemma2_check(const ExperimentRecord& rec, std::span<const TaskDataset> train_tasks,
                          std::size_t t, std::size_t reseeds, const DriftFit& fit,
                          const TrainConfig* train_override) {
  if (t < 1 || t + 1 > rec.num_tasks() || t + 1 > train_tasks.size())
    throw PreconditionError("lemma2_check: need tasks t and t+1");
  if (reseeds == 0) throw PreconditionError("lemma2_check: reseeds must be >= 1");
  const ProtocolConfig& cfg = rec.config;
  const ModelSnapshot base = rec.snapshot(t - 1);
  const ActiveRowMask& mask_t = rec.masks.at(t - 1);
  const double scale = fit.gamma * std::pow(static_cast<double>(cfg.width), -fit.beta) *
                       alpha_factor(cfg.alpha, fit.beta);

  TrainConfig tc = train_override ? *train_override : cfg.train;
  tc.seed = derive_seed(cfg.seed, {stream::kShuffle, t});

  const std::size_t L = base.num_layers();
  std::vector<double> lhs(L, 0.0), rhs(L, 0.0);
  std::vector<double> denom(L);
  std::vector<Matrix> before(L);
  for (std::size_t l = 0; l < L; ++l) {
    before[l] = row_submatrix(base.layers[l], layer_rows(base, mask_t, l));
    denom[l] = checked_norm(before[l], "lemma2_check", l);
  }

  // Reseeded retraining runs are independent; sums are merged in seed order.
  std::vector<std::vector<double>> lhs_k(reseeds), rhs_k(reseeds);
  std::vector<std::exception_ptr> errors(reseeds);
  const int outer =
      static_cast<int>(std::min(reseeds, static_cast<std::size_t>(kernels::threads())));
#pragma omp parallel for schedule(dynamic) num_threads(outer)
  for (std::size_t k = 0; k < reseeds; ++k) {
    try {
      ModelSnapshot next = base;
      const ActiveRowMask mask = sample_mask(cfg.alpha, cfg.width, cfg.hidden_layers,
                                             derive_seed(cfg.seed, {stream::kReseed, k}), t);
      if (tc.epochs > 0) train_epochs(next, mask, train_tasks[t], tc);
      for (std::size_t l = 0; l < L; ++l) {
        const Matrix after = row_submatrix(next.layers[l], layer_rows(base, mask_t, l));
        lhs_k[k].push_back(spectral_norm(before[l] - after) / denom[l]);
        rhs_k[k].push_back(spectral_norm(after) / denom[l] * scale);
      }
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (std::size_t k = 0; k < reseeds; ++k) {
    if (errors[k]) std::rethrow_exception(errors[k]);
    for (std::size_t l = 0; l < L; ++l) {
      lhs[l] += lhs_k[k][l];
      rhs[l] += rhs_k[k][l];
    }
  }

  Lemma2Report rep;
  rep.t = t;
  rep.reseeds = reseeds;
  for (std::size_t l = 0; l < L; ++l) {
    Lemma2Layer row{l, lhs[l] / static_cast<double>(reseeds), rhs[l] / static_cast<double>(reseeds),
                    true};
    row.holds = row.mean_lhs <= row.mean_rhs;
    rep.holds = rep.holds && row.holds;
    rep.layers.push_back(row);
  }
  return rep;
}

// ---- report ----

BoundReport bound_report(const ModelSnapshot& mt, const ActiveRowMask& mask_t,
                         const ModelSnapshot& mtp, const ActiveRowMask& mask_tp,
                         const TaskDataset& probe, double gamma, double beta,
                         std::size_t probe_limit) {
  if (!mt.same_architecture(mtp)) throw ShapeError("bound_report: architectures differ");
  if (mtp.task_id < mt.task_id) throw PreconditionError("bound_report: t' must not precede t");
  BoundReport r;
  r.t = mt.task_id;
  r.t_prime = mtp.task_id;

  TaskDataset p;
  p.num_classes = probe.num_classes;
  p.inputs = first_rows(probe, probe_limit);
  p.labels.assign(probe.labels.begin(), probe.labels.begin() + static_cast<long>(p.inputs.rows()));

  const GapStats gap = output_gap(mt, mtp, p, mask_t);
  r.measured_max_gap = gap.max_gap;
  r.measured_mean_gap = gap.mean_gap;

  BoundInputs& in = r.inputs;
  in.t = r.t;
  in.t_prime = r.t_prime;
  in.chi = measure_chi(p);
  for (std::size_t l = 0; l < mt.num_layers(); ++l) {
    in.layer_norms.push_back(spectral_norm(mt.layers[l]));
    in.lipschitz.push_back(mt.specs[l].lipschitz);
  }
  in.gamma = gamma;
  in.beta = beta;
  in.alpha = mask_t.alpha;
  in.width = static_cast<double>(mt.width);
  if (r.t_prime > r.t) {
    double best = 0.0;
    for (std::size_t l = 0; l < mt.num_layers(); ++l)
      best = std::max({best, lambda_ratio(mt, mask_t, mtp, l), lambda_ratio(mtp, mask_tp, mt, l)});
    in.lambda_bar = best;
  }

  r.noise = measure_noise_constants(mt, mask_t, p);
  r.eta = noise_eta(in, r.noise);
  r.certificate = perturbation_certificate(mt, mtp, mask_t, p);
  r.theorem1_bound = bound_theorem1(in);
  r.noise_stability_bound = bound_noise_stability(in, r.noise);
  r.theorem1_holds = r.theorem1_bound >= r.measured_max_gap;
  r.noise_stability_holds = r.noise_stability_bound >= r.measured_max_gap;
  r.alpha_exponent_nonpositive = beta >= 0.5;
  return r;
}

std::string bound_report_json(const BoundReport& r) {
  using nlohmann::json;
  const auto ratio = [&](double bound) {
    return r.measured_max_gap > 0.0 ? json(bound / r.measured_max_gap) : json(nullptr);
  };
  json j;
  j["t"] = r.t;
  j["t_prime"] = r.t_prime;
  j["W"] = r.inputs.width;
  j["L"] = r.inputs.layer_norms.size();
  j["alpha"] = r.inputs.alpha;
  j["gamma"] = r.inputs.gamma;
  j["beta"] = r.inputs.beta;
  j["lambda_bar"] = r.inputs.lambda_bar;
  j["chi"] = r.inputs.chi;
  j["layer_spectral_norms"] = r.inputs.layer_norms;
  j["lipschitz"] = r.inputs.lipschitz;
  j["mu"] = r.noise.mu;
  j["c"] = r.noise.c;
  j["kappa"] = r.noise.kappa;
  j["eta"] = r.eta;
  j["Gamma_t"] = r.noise.Gamma;
  j["measured_max_gap"] = r.measured_max_gap;
  j["measured_mean_gap"] = r.measured_mean_gap;
  j["theorem1_bound"] = r.theorem1_bound;
  j["theorem1_holds"] = r.theorem1_holds;
  j["theorem1_bound_over_gap"] = ratio(r.theorem1_bound);
  j["noise_stability_bound"] = r.noise_stability_bound;
  j["noise_stability_holds"] = r.noise_stability_holds;
  j["noise_stability_bound_over_gap"] = ratio(r.noise_stability_bound);
  j["alpha_exponent_nonpositive"] = r.alpha_exponent_nonpositive;
  const auto& c = r.certificate;
  j["certificate"] = {{"bound_at_max_norm", c.bound_at_max_norm},
                      {"max_gap", c.max_gap},
                      {"mean_gap", c.mean_gap},
                      {"U_norms", c.diff_norms},
                      {"active_layer_norms", c.layer_norms},
                      {"ratios", c.ratios},
                      {"premise_holds", c.premise_holds},
                      {"points", c.points},
                      {"violations", c.violations},
                      {"holds", c.holds}};
  return j.dump(2);
}

}  // namespace widthlab
