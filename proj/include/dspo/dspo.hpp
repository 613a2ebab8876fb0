#pragma once

// Scale/shift/high-error-disparity optimization against the monocular prior,
// alternated with dense bundle adjustment.

#include <cmath>
#include <vector>

#include "dspo/dba.hpp"
#include "dspo/depth_fusion.hpp"

namespace dspo {

/// Reciprocal of the monocular depth, i.e. the prior in disparity units.
inline ScalarMap mono_disparity(const Keyframe& kf) {
  ScalarMap m(kf.mono_depth.width(), kf.mono_depth.height(), 0.0);
  for (std::size_t p = 0; p < m.size(); ++p)
    if (kf.mono_valid[p] && kf.mono_depth[p] > 0.0) m[p] = 1.0 / kf.mono_depth[p];
  return m;
}

inline bool is_high_error(const Keyframe& kf, std::size_t p) {
  return kf.validity_mask.empty() || !kf.validity_mask[p];
}

/// Initial prior alignment from the low-error disparities. Leaves the current
/// values in place when the fit is degenerate.
inline bool init_prior_alignment(Keyframe& kf) {
  if (kf.validity_mask.empty() || kf.mono_valid.empty()) return false;
  try {
    const auto fit = fit_scale_shift(mono_disparity(kf), kf.mono_valid, kf.disparity, kf.validity_mask);
    if (!(fit.scale > 0.0)) return false;
    kf.scale = fit.scale;
    kf.shift = fit.shift;
    return true;
  } catch (const DegeneratePrior&) {
    return false;
  }
}

/// Unknown layout of the scale/shift system.
struct DspoLayout {
  std::vector<int> scale_slot;             // per keyframe, -1 when not optimized
  std::vector<std::vector<long>> dh_index;  // per keyframe, per pixel; -1 if not d^h
  std::vector<ScalarMap> mono;             // per keyframe prior disparity (empty if unused)
  std::vector<int> degenerate;
  int scale_count = 0;
  long dh_count = 0;

  DspoLayout(const Graph& g, const BaProblem& p)
      : scale_slot(static_cast<std::size_t>(g.size()), -1),
        dh_index(static_cast<std::size_t>(g.size())),
        mono(static_cast<std::size_t>(g.size())) {
    for (int k : p.disparity_frames) {
      const auto& kf = g.keyframes[static_cast<std::size_t>(k)];
      auto& idx = dh_index[static_cast<std::size_t>(k)];
      idx.assign(kf.disparity.size(), -1);
      for (std::size_t q = 0; q < idx.size(); ++q)
        if (is_high_error(kf, q)) idx[q] = dh_count++;
      if (kf.mono_valid.empty()) {
        degenerate.push_back(k);
        continue;
      }
      mono[static_cast<std::size_t>(k)] = mono_disparity(kf);
      const auto& m = mono[static_cast<std::size_t>(k)];
      double n = 0.0, mean = 0.0, sq = 0.0;
      for (std::size_t q = 0; q < m.size(); ++q)
        if (kf.mono_valid[q]) {
          n += 1.0;
          mean += m[q];
        }
      if (n >= 2.0) {
        mean /= n;
        for (std::size_t q = 0; q < m.size(); ++q)
          if (kf.mono_valid[q]) sq += (m[q] - mean) * (m[q] - mean);
      }
      if (n < 2.0 || !(sq > 1e-12 * n * mean * mean)) {
        degenerate.push_back(k);
        continue;
      }
      scale_slot[static_cast<std::size_t>(k)] = scale_count++;
    }
  }
};

/// Stacked DSPO residuals: reprojection rows (2 per pixel) for every edge
/// pixel whose source disparity is high-error, then one prior row
/// t = d - (scale * m + shift) per pixel with a monocular value, weighted
/// alpha1 (high-error) or alpha2 (low-error).
inline Residuals dspo_residuals(const Graph& g, const BaProblem& p, const SolverConfig& cfg) {
  const DspoLayout layout(g, p);
  std::vector<double> r, w;
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    const auto& idx = layout.dh_index[static_cast<std::size_t>(e.src)];
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u) {
        if (idx[ki.disparity.index(u, v)] < 0) continue;
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), false);
        for (int c = 0; c < 2; ++c) {
          r.push_back(t.valid ? t.residual[c] : 0.0);
          w.push_back(t.valid ? t.weight[c] : 0.0);
        }
      }
  }
  for (int k : p.disparity_frames) {
    const auto& kf = g.keyframes[static_cast<std::size_t>(k)];
    const auto& m = layout.mono[static_cast<std::size_t>(k)];
    if (m.empty()) continue;
    for (std::size_t q = 0; q < m.size(); ++q) {
      if (!kf.mono_valid[q]) continue;
      r.push_back(kf.disparity[q] - (kf.scale * m[q] + kf.shift));
      w.push_back(is_high_error(kf, q) ? cfg.alpha1 : cfg.alpha2);
    }
  }
  return {Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(r.size())),
          Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()))};
}

struct DspoJacobians {
  Eigen::SparseMatrix<double> scale_shift;  // rows x 2 * keyframes; (scale, shift) per keyframe
  Eigen::SparseMatrix<double> disparity;    // rows x |d^h|
};

inline DspoJacobians dspo_jacobians(const Graph& g, const BaProblem& p) {
  const DspoLayout layout(g, p);
  std::vector<Eigen::Triplet<double>> ts, td;
  Eigen::Index row = 0;
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    const auto& idx = layout.dh_index[static_cast<std::size_t>(e.src)];
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u) {
        const long col = idx[ki.disparity.index(u, v)];
        if (col < 0) continue;
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), true);
        if (t.valid) {
          td.emplace_back(row, col, t.d_disparity[0]);
          td.emplace_back(row + 1, col, t.d_disparity[1]);
        }
        row += 2;
      }
  }
  for (int k : p.disparity_frames) {
    const auto& kf = g.keyframes[static_cast<std::size_t>(k)];
    const auto& m = layout.mono[static_cast<std::size_t>(k)];
    if (m.empty()) continue;
    const auto& idx = layout.dh_index[static_cast<std::size_t>(k)];
    const bool free_s = layout.scale_slot[static_cast<std::size_t>(k)] >= 0;
    for (std::size_t q = 0; q < m.size(); ++q) {
      if (!kf.mono_valid[q]) continue;
      if (free_s) {
        ts.emplace_back(row, 2 * k, -m[q]);
        ts.emplace_back(row, 2 * k + 1, -1.0);
      }
      if (idx[q] >= 0) td.emplace_back(row, idx[q], 1.0);
      ++row;
    }
  }
  DspoJacobians out;
  out.scale_shift.resize(row, 2 * g.size());
  out.scale_shift.setFromTriplets(ts.begin(), ts.end());
  out.disparity.resize(row, layout.dh_count);
  out.disparity.setFromTriplets(td.begin(), td.end());
  return out;
}

struct DspoStepReport : StepReport {
  std::vector<int> degenerate;  // keyframes whose scale/shift could not be observed
  long high_error_count = 0;
};

/// One damped Gauss-Newton step on per-keyframe (scale, shift) and the
/// high-error disparities, poses held fixed. Low-error disparities are read
/// but never written.
inline DspoStepReport dspo_step(Graph& g, const BaProblem& p, const SolverConfig& cfg,
                                Damping& damping) {
  const DspoLayout layout(g, p);
  const int ns = 2 * layout.scale_count;
  LinearSystem sys;
  sys.B = Eigen::MatrixXd::Zero(ns, ns);
  sys.C = Eigen::VectorXd::Zero(layout.dh_count);
  sys.v = Eigen::VectorXd::Zero(ns);
  sys.w = Eigen::VectorXd::Zero(layout.dh_count);
  std::vector<Eigen::Triplet<double>> et;
  double cost = 0.0;

  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    const auto& idx = layout.dh_index[static_cast<std::size_t>(e.src)];
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u) {
        const long col = idx[ki.disparity.index(u, v)];
        if (col < 0) continue;
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), true);
        if (!t.valid) continue;
        const Vec2 wjd = t.weight.cwiseProduct(t.d_disparity);
        sys.C[col] += t.d_disparity.dot(wjd);
        sys.w[col] -= wjd.dot(t.residual);
        cost += t.weight.dot(t.residual.cwiseProduct(t.residual));
      }
  }
  for (int k : p.disparity_frames) {
    const auto& kf = g.keyframes[static_cast<std::size_t>(k)];
    const auto& m = layout.mono[static_cast<std::size_t>(k)];
    if (m.empty()) continue;
    const auto& idx = layout.dh_index[static_cast<std::size_t>(k)];
    const int slot = layout.scale_slot[static_cast<std::size_t>(k)];
    for (std::size_t q = 0; q < m.size(); ++q) {
      if (!kf.mono_valid[q]) continue;
      const double a = idx[q] >= 0 ? cfg.alpha1 : cfg.alpha2;
      const double t = kf.disparity[q] - (kf.scale * m[q] + kf.shift);
      cost += a * t * t;
      const Vec2 js(-m[q], -1.0);
      if (slot >= 0) {
        sys.B.block<2, 2>(2 * slot, 2 * slot) += a * js * js.transpose();
        sys.v.segment<2>(2 * slot) -= a * js * t;
        if (idx[q] >= 0) {
          et.emplace_back(2 * slot, idx[q], a * js[0]);
          et.emplace_back(2 * slot + 1, idx[q], a * js[1]);
        }
      }
      if (idx[q] >= 0) {
        sys.C[idx[q]] += a;
        sys.w[idx[q]] -= a * t;
      }
    }
  }
  sys.E.resize(ns, layout.dh_count);
  sys.E.setFromTriplets(et.begin(), et.end());

  struct State {
    std::vector<ScaleShift> alignment;
    std::vector<DisparityMap> disparities;
  } state;
  for (int k : p.disparity_frames) {
    const auto& kf = g.keyframes[static_cast<std::size_t>(k)];
    state.alignment.push_back({kf.scale, kf.shift});
    state.disparities.push_back(kf.disparity);
  }
  auto write = [&](Graph& target, const State& s) {
    for (std::size_t f = 0; f < p.disparity_frames.size(); ++f) {
      auto& kf = target.keyframes[static_cast<std::size_t>(p.disparity_frames[f])];
      kf.scale = s.alignment[f].scale;
      kf.shift = s.alignment[f].shift;
      kf.disparity = s.disparities[f];
    }
  };
  auto propose = [&](State& s, const SchurSolution& sol) {
    for (std::size_t f = 0; f < p.disparity_frames.size(); ++f) {
      const int k = p.disparity_frames[f];
      const int slot = layout.scale_slot[static_cast<std::size_t>(k)];
      if (slot >= 0) {
        s.alignment[f].scale += sol.dx[2 * slot];
        s.alignment[f].shift += sol.dx[2 * slot + 1];
      }
      const auto& idx = layout.dh_index[static_cast<std::size_t>(k)];
      auto& d = s.disparities[f];
      for (std::size_t q = 0; q < d.size(); ++q)
        if (idx[q] >= 0) d[q] = std::max(d[q] + sol.dy[idx[q]], kMinDisparity);
    }
    Graph trial;
    trial.intrinsics = g.intrinsics;
    trial.keyframes = g.keyframes;
    write(trial, s);
    std::swap(trial.edges, g.edges);
    const double c = dspo_residuals(trial, p, cfg).weighted_cost();
    std::swap(trial.edges, g.edges);
    return c;
  };

  DspoStepReport rep;
  static_cast<StepReport&>(rep) = detail::damped_step(state, sys, cost, damping, cfg, propose);
  rep.degenerate = layout.degenerate;
  rep.high_error_count = layout.dh_count;
  if (rep.accepted) write(g, state);
  return rep;
}

struct DspoRoundLog {
  StepReport dba;
  DspoStepReport prior;
};

/// Alternates one DBA step and one DSPO step per round, DBA first.
inline std::vector<DspoRoundLog> dspo_optimize(Graph& g, const BaProblem& p, const SolverConfig& cfg,
                                               int rounds) {
  Damping dba_damping{cfg.lambda_init};
  Damping prior_damping{cfg.lambda_init};
  std::vector<DspoRoundLog> log;
  for (int r = 0; r < rounds; ++r) {
    DspoRoundLog entry;
    entry.dba = dba_step(g, p, cfg, dba_damping);
    entry.prior = dspo_step(g, p, cfg, prior_damping);
    log.push_back(std::move(entry));
    const auto& last = log.back();
    if (last.dba.accepted && last.dba.converged(cfg.step_tolerance) && last.prior.accepted &&
        last.prior.converged(cfg.step_tolerance))
      break;
  }
  return log;
}

}  // namespace dspo
