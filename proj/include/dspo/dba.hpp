#pragma once

// Dense bundle adjustment over keyframe poses and per-pixel disparities,
// solved by damped Gauss-Newton with the disparity block eliminated.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "dspo/factor_graph.hpp"
#include "dspo/geometry.hpp"
#include "dspo/linear_system.hpp"

namespace dspo {

struct SolverConfig {
  double alpha1 = 0.01;  // prior weight on high-error disparities
  double alpha2 = 0.1;   // prior weight on low-error disparities
  double lambda_init = 1e-4;
  double lambda_floor = 1e-8;
  int max_retries = 5;
  int max_iters = 20;
  double step_tolerance = 1e-8;
};

/// Mutable Levenberg damping carried across steps.
struct Damping {
  double lambda = 1e-4;
};

/// Which edges enter the objective and which unknowns move.
struct BaProblem {
  std::vector<int> edges;
  std::vector<int> free_poses;        // never includes gauge-fixed keyframes
  std::vector<int> disparity_frames;  // sources of `edges`, ascending
};

inline BaProblem make_problem(const Graph& g, std::vector<int> edges,
                              const std::function<bool(int)>& pose_candidate = {}) {
  BaProblem p;
  p.edges = std::move(edges);
  std::vector<char> pose(static_cast<std::size_t>(g.size()), 0), disp(pose.size(), 0);
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    for (int k : {e.src, e.dst})
      if (!g.pose_fixed(k) && (!pose_candidate || pose_candidate(k)))
        pose[static_cast<std::size_t>(k)] = 1;
    disp[static_cast<std::size_t>(e.src)] = 1;
  }
  for (int k = 0; k < g.size(); ++k) {
    if (pose[static_cast<std::size_t>(k)]) p.free_poses.push_back(k);
    if (disp[static_cast<std::size_t>(k)]) p.disparity_frames.push_back(k);
  }
  return p;
}

inline BaProblem full_problem(const Graph& g) {
  std::vector<int> edges(g.edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = static_cast<int>(i);
  return make_problem(g, std::move(edges));
}

/// Edges touching the active window; only window poses move.
inline BaProblem local_problem(const Graph& g) {
  std::vector<int> edges;
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    if (std::max(e.src, e.dst) >= g.window_begin) edges.push_back(static_cast<int>(i));
  }
  const int begin = g.window_begin;
  return make_problem(g, std::move(edges), [begin](int k) { return k >= begin; });
}

/// Lookup tables from keyframe index to unknown offsets.
struct UnknownLayout {
  std::vector<int> pose_slot;        // -1 if fixed
  std::vector<long> disparity_base;  // -1 if not optimized
  long disparity_count = 0;
  int pose_count = 0;

  UnknownLayout(const Graph& g, const BaProblem& p)
      : pose_slot(static_cast<std::size_t>(g.size()), -1),
        disparity_base(static_cast<std::size_t>(g.size()), -1) {
    for (int k : p.free_poses) pose_slot[static_cast<std::size_t>(k)] = pose_count++;
    for (int k : p.disparity_frames) {
      disparity_base[static_cast<std::size_t>(k)] = disparity_count;
      disparity_count += static_cast<long>(g.keyframes[static_cast<std::size_t>(k)].disparity.size());
    }
  }
};

/// Residual and derivatives of one correspondence. Derivatives are of
/// r = target - pi(K T_j^-1 T_i (1/d) K^-1 [u,v,1]) with respect to left
/// se(3) perturbations exp(xi) * T of each pose and to d.
struct PixelTerm {
  bool valid = false;
  Vec2 residual = Vec2::Zero();
  Vec2 weight = Vec2::Zero();
  Eigen::Matrix<double, 2, 6> d_pose_i;
  Eigen::Matrix<double, 2, 6> d_pose_j;
  Vec2 d_disparity = Vec2::Zero();
};

inline PixelTerm pixel_term(const SE3Pose& ti, const SE3Pose& tj, const Intrinsics& k, int u, int v,
                            double disparity, const Vec2& target, const Vec2& weight,
                            bool with_jacobians) {
  PixelTerm t;
  if (!(weight.x() > 0.0 && weight.y() > 0.0)) return t;
  const double d = std::max(disparity, kMinDisparity);
  const Vec3 xi = k.ray(u, v) / d;
  const Vec3 pw = ti * xi;
  const Mat3 rjt = tj.rotation().transpose();
  const Vec3 pj = rjt * (pw - tj.translation());
  if (!(pj.z() > kMinDepth)) return t;
  const double iz = 1.0 / pj.z();
  const Vec2 pred(k.fx * pj.x() * iz + k.cx, k.fy * pj.y() * iz + k.cy);
  if (!(pred.x() >= -1.0 && pred.x() <= k.width && pred.y() >= -1.0 && pred.y() <= k.height))
    return t;
  t.valid = true;
  t.residual = target - pred;
  t.weight = weight;
  if (!with_jacobians) return t;

  Eigen::Matrix<double, 2, 3> dpi;
  dpi << k.fx * iz, 0.0, -k.fx * pj.x() * iz * iz,
         0.0, k.fy * iz, -k.fy * pj.y() * iz * iz;
  Eigen::Matrix<double, 3, 6> dpw;  // d(exp(xi) pw)/dxi = [I, -[pw]x]
  dpw.leftCols<3>() = Mat3::Identity();
  dpw.rightCols<3>() = -hat(pw);
  const Eigen::Matrix<double, 2, 3> a = dpi * rjt;
  t.d_pose_i = -(a * dpw);
  t.d_pose_j = a * dpw;
  t.d_disparity = a * (ti.rotation() * xi) / d;  // -(-a R_i xi / d)
  return t;
}

struct Residuals {
  Eigen::VectorXd r;
  Eigen::VectorXd w;

  double weighted_cost() const { return (w.array() * r.array().square()).sum(); }
};

/// Stacked residuals: edges in problem order, pixels row-major, (u, v)
/// components. Masked pixels contribute zero rows with zero weight.
inline Residuals dba_residuals(const Graph& g, const BaProblem& p) {
  std::size_t rows = 0;
  for (int ei : p.edges) rows += 2 * g.edges[static_cast<std::size_t>(ei)].target.size();
  Residuals out{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows)),
                Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows))};
  Eigen::Index row = 0;
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u, row += 2) {
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), false);
        if (!t.valid) continue;
        out.r.segment<2>(row) = t.residual;
        out.w.segment<2>(row) = t.weight;
      }
  }
  return out;
}

struct DbaJacobians {
  Eigen::SparseMatrix<double> pose;       // rows x 6 * graph size; fixed poses zero
  Eigen::SparseMatrix<double> disparity;  // rows x optimized disparities
};

inline DbaJacobians dba_jacobians(const Graph& g, const BaProblem& p) {
  const UnknownLayout layout(g, p);
  std::vector<Eigen::Triplet<double>> tp, td;
  Eigen::Index row = 0;
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    const long dbase = layout.disparity_base[static_cast<std::size_t>(e.src)];
    const bool free_i = layout.pose_slot[static_cast<std::size_t>(e.src)] >= 0;
    const bool free_j = layout.pose_slot[static_cast<std::size_t>(e.dst)] >= 0;
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u, row += 2) {
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), true);
        if (!t.valid) continue;
        for (int c = 0; c < 2; ++c) {
          for (int q = 0; q < 6; ++q) {
            if (free_i) tp.emplace_back(row + c, 6 * e.src + q, t.d_pose_i(c, q));
            if (free_j) tp.emplace_back(row + c, 6 * e.dst + q, t.d_pose_j(c, q));
          }
          td.emplace_back(row + c, dbase + static_cast<long>(ki.disparity.index(u, v)),
                          t.d_disparity[c]);
        }
      }
  }
  DbaJacobians out;
  out.pose.resize(row, 6 * g.size());
  out.pose.setFromTriplets(tp.begin(), tp.end());
  out.disparity.resize(row, layout.disparity_count);
  out.disparity.setFromTriplets(td.begin(), td.end());
  return out;
}

struct StepReport {
  bool accepted = false;
  double cost_before = 0.0;
  double cost_after = 0.0;
  double max_pose_step = 0.0;       // |dT|_inf of the applied step
  double max_disparity_step = 0.0;  // |dd|_inf of the applied step
  double lambda = 0.0;

  bool converged(double tol) const {
    return max_pose_step < tol && max_disparity_step < tol;
  }
};

namespace detail {

inline void apply_damping(LinearSystem& sys, double lambda) {
  for (Eigen::Index i = 0; i < sys.B.rows(); ++i) sys.B(i, i) += lambda * sys.B(i, i) + lambda;
  sys.C = sys.C * (1.0 + lambda) + Eigen::VectorXd::Constant(sys.C.size(), lambda);
}

/// Shared accept/reject loop: `solve_and_apply` proposes and applies a step to
/// a copy of the state and returns the new cost.
template <typename State, typename Propose>
StepReport damped_step(State& state, const LinearSystem& undamped, double cost_before,
                       Damping& damping, const SolverConfig& cfg, Propose&& propose) {
  StepReport rep;
  rep.cost_before = cost_before;
  rep.cost_after = cost_before;
  bool factor_failed_every_time = true;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    LinearSystem sys = undamped;
    apply_damping(sys, damping.lambda);
    SchurSolution sol;
    try {
      sol = schur_solve(sys);
    } catch (const NotPositiveDefinite&) {
      damping.lambda *= 10.0;
      continue;
    }
    factor_failed_every_time = false;
    State candidate = state;
    const double cost = propose(candidate, sol);
    if (cost <= cost_before) {
      state = std::move(candidate);
      rep.accepted = true;
      rep.cost_after = cost;
      rep.max_pose_step = sol.dx.size() ? sol.dx.lpNorm<Eigen::Infinity>() : 0.0;
      rep.max_disparity_step = sol.dy.size() ? sol.dy.lpNorm<Eigen::Infinity>() : 0.0;
      damping.lambda = std::max(damping.lambda * 0.5, cfg.lambda_floor);
      rep.lambda = damping.lambda;
      return rep;
    }
    damping.lambda *= 10.0;
  }
  if (factor_failed_every_time) throw NotPositiveDefinite();
  rep.lambda = damping.lambda;
  return rep;
}

}  // namespace detail

/// Undamped normal equations of the DBA objective at the current state.
inline LinearSystem assemble_dba_system(const Graph& g, const BaProblem& p, double* cost = nullptr) {
  const UnknownLayout layout(g, p);
  const int np = 6 * layout.pose_count;
  LinearSystem sys;
  sys.B = Eigen::MatrixXd::Zero(np, np);
  sys.C = Eigen::VectorXd::Zero(layout.disparity_count);
  sys.v = Eigen::VectorXd::Zero(np);
  sys.w = Eigen::VectorXd::Zero(layout.disparity_count);
  std::vector<Eigen::Triplet<double>> et;
  double total = 0.0;
  for (int ei : p.edges) {
    const auto& e = g.edges[static_cast<std::size_t>(ei)];
    const auto& ki = g.keyframes[static_cast<std::size_t>(e.src)];
    const auto& kj = g.keyframes[static_cast<std::size_t>(e.dst)];
    const long dbase = layout.disparity_base[static_cast<std::size_t>(e.src)];
    const int si = layout.pose_slot[static_cast<std::size_t>(e.src)];
    const int sj = layout.pose_slot[static_cast<std::size_t>(e.dst)];
    for (int v = 0; v < e.height(); ++v)
      for (int u = 0; u < e.width(); ++u) {
        auto t = pixel_term(ki.pose, kj.pose, g.intrinsics, u, v, ki.disparity(u, v),
                            e.target(u, v), e.weight(u, v), true);
        if (!t.valid) continue;
        const Eigen::DiagonalMatrix<double, 2> w(t.weight);
        total += t.weight.dot(t.residual.cwiseProduct(t.residual));
        const long k = dbase + static_cast<long>(ki.disparity.index(u, v));
        const Vec2 wjd = w * t.d_disparity;
        sys.C[k] += t.d_disparity.dot(wjd);
        sys.w[k] -= wjd.dot(t.residual);
        const Vec2 wr = w * t.residual;
        if (si >= 0) {
          const Eigen::Matrix<double, 6, 2> jwi = t.d_pose_i.transpose() * w;
          sys.B.block<6, 6>(6 * si, 6 * si) += jwi * t.d_pose_i;
          sys.v.segment<6>(6 * si) -= t.d_pose_i.transpose() * wr;
          const Vec6 e_col = jwi * t.d_disparity;
          for (int q = 0; q < 6; ++q) et.emplace_back(6 * si + q, k, e_col[q]);
          if (sj >= 0) {
            const Eigen::Matrix<double, 6, 6> bij = jwi * t.d_pose_j;
            sys.B.block<6, 6>(6 * si, 6 * sj) += bij;
            sys.B.block<6, 6>(6 * sj, 6 * si) += bij.transpose();
          }
        }
        if (sj >= 0) {
          const Eigen::Matrix<double, 6, 2> jwj = t.d_pose_j.transpose() * w;
          sys.B.block<6, 6>(6 * sj, 6 * sj) += jwj * t.d_pose_j;
          sys.v.segment<6>(6 * sj) -= t.d_pose_j.transpose() * wr;
          const Vec6 e_col = jwj * t.d_disparity;
          for (int q = 0; q < 6; ++q) et.emplace_back(6 * sj + q, k, e_col[q]);
        }
      }
  }
  sys.E.resize(np, layout.disparity_count);
  sys.E.setFromTriplets(et.begin(), et.end());
  if (cost) *cost = total;
  return sys;
}

/// One damped Gauss-Newton step on poses and disparities. Poses are retracted
/// as exp(dT) * T; disparities are clamped at kMinDisparity. A step that would
/// increase the weighted squared residual is rejected and re-damped.
inline StepReport dba_step(Graph& g, const BaProblem& p, const SolverConfig& cfg, Damping& damping) {
  double cost = 0.0;
  const LinearSystem sys = assemble_dba_system(g, p, &cost);
  const UnknownLayout layout(g, p);
  struct State {
    std::vector<SE3Pose> poses;
    std::vector<DisparityMap> disparities;
  } state;
  for (const auto& kf : g.keyframes) state.poses.push_back(kf.pose);
  for (int k : p.disparity_frames) state.disparities.push_back(g.keyframes[static_cast<std::size_t>(k)].disparity);

  auto propose = [&](State& s, const SchurSolution& sol) {
    for (int k : p.free_poses) {
      const int slot = layout.pose_slot[static_cast<std::size_t>(k)];
      s.poses[static_cast<std::size_t>(k)] =
          se3_exp(sol.dx.segment<6>(6 * slot)) * s.poses[static_cast<std::size_t>(k)];
    }
    for (std::size_t f = 0; f < p.disparity_frames.size(); ++f) {
      const long base = layout.disparity_base[static_cast<std::size_t>(p.disparity_frames[f])];
      auto& d = s.disparities[f];
      for (std::size_t q = 0; q < d.size(); ++q)
        d[q] = std::max(d[q] + sol.dy[base + static_cast<long>(q)], kMinDisparity);
    }
    // Evaluate on a scratch graph sharing the edges by reference.
    Graph trial;
    trial.intrinsics = g.intrinsics;
    trial.gauge_fixed = g.gauge_fixed;
    trial.keyframes.resize(g.keyframes.size());
    for (std::size_t k = 0; k < g.keyframes.size(); ++k) {
      trial.keyframes[k].pose = s.poses[k];
      trial.keyframes[k].disparity = g.keyframes[k].disparity;
    }
    for (std::size_t f = 0; f < p.disparity_frames.size(); ++f)
      trial.keyframes[static_cast<std::size_t>(p.disparity_frames[f])].disparity = s.disparities[f];
    std::swap(trial.edges, g.edges);
    const double c = dba_residuals(trial, p).weighted_cost();
    std::swap(trial.edges, g.edges);
    return c;
  };
  auto rep = detail::damped_step(state, sys, cost, damping, cfg, propose);
  if (rep.accepted) {
    for (int k : p.free_poses) g.keyframes[static_cast<std::size_t>(k)].pose = state.poses[static_cast<std::size_t>(k)];
    for (std::size_t f = 0; f < p.disparity_frames.size(); ++f)
      g.keyframes[static_cast<std::size_t>(p.disparity_frames[f])].disparity = std::move(state.disparities[f]);
  }
  return rep;
}

/// Runs dba_step until the step falls below the tolerance or max_iters.
inline std::vector<StepReport> dba_optimize(Graph& g, const BaProblem& p, const SolverConfig& cfg,
                                            int max_iters) {
  Damping damping{cfg.lambda_init};
  std::vector<StepReport> log;
  for (int it = 0; it < max_iters; ++it) {
    log.push_back(dba_step(g, p, cfg, damping));
    if (log.back().accepted && log.back().converged(cfg.step_tolerance)) break;
  }
  return log;
}

/// Root-mean-square reprojection error (pixels) over weighted rows.
inline double reprojection_rmse(const Graph& g, const BaProblem& p) {
  const auto res = dba_residuals(g, p);
  double sum = 0.0;
  long n = 0;
  for (Eigen::Index i = 0; i < res.r.size(); ++i)
    if (res.w[i] > 0.0) {
      sum += res.r[i] * res.r[i];
      ++n;
    }
  return n ? std::sqrt(sum / static_cast<double>(n)) : 0.0;
}

}  // namespace dspo
