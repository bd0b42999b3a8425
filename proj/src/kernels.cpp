#include "labdyn/kernels.hpp"

#include <cmath>
#include <limits>

#include "labdyn/math.hpp"
#include "labdyn/parallel.hpp"

namespace labdyn {

void WeightedBlock::resize(Eigen::Index rows, Eigen::Index cols) {
  features.resize(rows, cols);
  outcome.resize(rows);
  y.resize(rows);
  weight.resize(rows);
}

void WeightedDataset::push(const Eigen::Ref<const Eigen::VectorXd>& features, int outcome, double y, double weight) {
  if (cols_ == 0 && weight_.empty()) cols_ = features.size();
  if (features.size() != cols_) throw InvalidInput("row has wrong number of features");
  if (!(weight >= 0.0) || !std::isfinite(weight)) throw InvalidInput("weights must be finite and >= 0");
  features_.insert(features_.end(), features.data(), features.data() + features.size());
  outcome_.push_back(outcome);
  y_.push_back(y);
  weight_.push_back(weight);
}

void WeightedDataset::add(const Eigen::Ref<const Eigen::VectorXd>& features, int outcome, double weight) {
  push(features, outcome, 0.0, weight);
}

void WeightedDataset::add(const Eigen::Ref<const Eigen::VectorXd>& features, double y, double weight) {
  push(features, 0, y, weight);
}

std::size_t WeightedDataset::num_blocks() const {
  return num_partitions(weight_.size(), static_cast<std::size_t>(kBlockRows));
}

void WeightedDataset::fill_block(std::size_t b, WeightedBlock& out) const {
  const Eigen::Index begin = static_cast<Eigen::Index>(b) * kBlockRows;
  const Eigen::Index n = std::min<Eigen::Index>(kBlockRows, rows() - begin);
  out.resize(n, cols_);
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  out.features = Eigen::Map<const RowMajor>(features_.data() + begin * cols_, n, cols_);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.outcome[i] = outcome_[begin + i];
    out.y[i] = y_[begin + i];
    out.weight[i] = weight_[begin + i];
  }
}

void MappedOutcomeSource::fill_block(std::size_t b, WeightedBlock& out) const {
  inner_.fill_block(b, out);
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.y[i] = map_(out.y[i]);
}

std::string to_string(FitStatus s) {
  switch (s) {
    case FitStatus::Converged: return "converged";
    case FitStatus::IterationCap: return "iteration_cap";
    case FitStatus::Diverged: return "diverged";
    case FitStatus::Stalled: return "stalled";
  }
  return "unknown";
}

namespace {

struct MlogitPartial {
  CompensatedSum loglik;
  CompensatedSum weight;
  Eigen::MatrixXd grad;  // classes x features
  Eigen::MatrixXd hess;  // free x free
};

// Maps class j to its free-parameter slot, or -1 for the base.
int free_slot(int j, int base) { return j == base ? -1 : (j < base ? j : j - 1); }

}  // namespace

double mlogit_objective(const DesignSource& data, int num_classes, int base, const Eigen::MatrixXd& coefficients,
                        Eigen::VectorXd* gradient, Eigen::MatrixXd* hessian) {
  const Eigen::Index F = data.num_features();
  const int J = num_classes;
  if (J < 2) throw InvalidInput("multinomial logit needs at least two classes");
  if (base < 0 || base >= J) throw InvalidInput("base class out of range");
  if (coefficients.rows() != J || coefficients.cols() != F) throw InvalidInput("coefficient matrix has wrong shape");
  const Eigen::Index P = static_cast<Eigen::Index>(J - 1) * F;
  const bool want_grad = gradient != nullptr || hessian != nullptr;

  MlogitPartial init;
  if (want_grad) init.grad = Eigen::MatrixXd::Zero(J, F);
  if (hessian) init.hess = Eigen::MatrixXd::Zero(P, P);

  Eigen::MatrixXd beta = coefficients;
  beta.row(base).setZero();

  auto total = map_reduce(
      data.num_blocks(), init,
      [&](std::size_t b, MlogitPartial& part) {
        WeightedBlock blk;
        data.fill_block(b, blk);
        const Eigen::Index n = blk.rows();
        Eigen::MatrixXd scores = blk.features * beta.transpose();  // n x J
        Eigen::MatrixXd prob(n, J);
        for (Eigen::Index i = 0; i < n; ++i) {
          const int y = blk.outcome[i];
          if (y < 0 || y >= J) throw InvalidInput("categorical outcome out of range");
          const double m = scores.row(i).maxCoeff();
          prob.row(i) = (scores.row(i).array() - m).exp();
          const double total = prob.row(i).sum();
          prob.row(i) /= total;
          const double w = blk.weight[i];
          part.weight += w;
          if (w != 0.0) part.loglik += w * (scores(i, y) - m - std::log(total));
        }
        if (!want_grad) return;
        Eigen::MatrixXd resid = -prob;
        for (Eigen::Index i = 0; i < n; ++i) resid(i, blk.outcome[i]) += 1.0;
        resid.array().colwise() *= blk.weight.array();
        part.grad.noalias() += resid.transpose() * blk.features;
        if (!hessian) return;
        // All (j, k) blocks from one product so the design is packed once.
        std::vector<std::pair<int, int>> pairs;
        for (int j = 0; j < J; ++j)
          for (int k = j; k < J; ++k)
            if (free_slot(j, base) >= 0 && free_slot(k, base) >= 0) pairs.emplace_back(j, k);
        Eigen::MatrixXd scaled(n, static_cast<Eigen::Index>(pairs.size()) * F);
        for (std::size_t q = 0; q < pairs.size(); ++q) {
          const auto [j, k] = pairs[q];
          const Eigen::VectorXd c =
              blk.weight.array() * prob.col(j).array() * ((j == k ? 1.0 : 0.0) - prob.col(k).array());
          scaled.middleCols(static_cast<Eigen::Index>(q) * F, F) = c.asDiagonal() * blk.features;
        }
        const Eigen::MatrixXd all = blk.features.transpose() * scaled;
        for (std::size_t q = 0; q < pairs.size(); ++q) {
          const auto [j, k] = pairs[q];
          const int sj = free_slot(j, base), sk = free_slot(k, base);
          const auto h = all.middleCols(static_cast<Eigen::Index>(q) * F, F);
          part.hess.block(sj * F, sk * F, F, F) -= h;
          if (j != k) part.hess.block(sk * F, sj * F, F, F) -= h.transpose();
        }
      },
      [&](MlogitPartial& acc, const MlogitPartial& p) {
        acc.loglik += p.loglik;
        acc.weight += p.weight;
        if (want_grad) acc.grad += p.grad;
        if (hessian) acc.hess += p.hess;
      });

  const double W = total.weight.value();
  if (!(W > 0.0)) throw InvalidInput("dataset needs at least one strictly positive weight");
  if (gradient) {
    gradient->resize(P);
    for (int j = 0; j < J; ++j) {
      const int s = free_slot(j, base);
      if (s >= 0) gradient->segment(s * F, F) = total.grad.row(j).transpose() / W;
    }
  }
  if (hessian) *hessian = total.hess / W;
  return total.loglik.value() / W;
}

namespace {

Eigen::VectorXd pack_free(const Eigen::MatrixXd& m, int base) {
  const int J = static_cast<int>(m.rows());
  const Eigen::Index F = m.cols();
  Eigen::VectorXd v((J - 1) * F);
  for (int j = 0; j < J; ++j) {
    const int s = free_slot(j, base);
    if (s >= 0) v.segment(s * F, F) = m.row(j).transpose();
  }
  return v;
}

Eigen::MatrixXd unpack_free(const Eigen::VectorXd& v, int J, Eigen::Index F, int base) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(J, F);
  for (int j = 0; j < J; ++j) {
    const int s = free_slot(j, base);
    if (s >= 0) m.row(j) = v.segment(s * F, F).transpose();
  }
  return m;
}

}  // namespace

Eigen::VectorXd solve_regularized(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double ridge, bool& ridge_used) {
  const Eigen::Index n = A.rows();
  if (n == 0) return Eigen::VectorXd();
  const double scale = std::max(A.diagonal().cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  auto ok = [&](const Eigen::LDLT<Eigen::MatrixXd>& f) {
    if (f.info() != Eigen::Success) return false;
    const auto d = f.vectorD();
    return d.minCoeff() > 1e-12 * scale;
  };
  if (ok(ldlt)) return ldlt.solve(b);
  ridge_used = true;
  const double trace_scale = std::max(A.trace() / static_cast<double>(n), std::numeric_limits<double>::min());
  for (double lambda = ridge * trace_scale; lambda < 1e12 * trace_scale; lambda *= 10.0) {
    Eigen::MatrixXd R = A;
    R.diagonal().array() += lambda;
    ldlt.compute(R);
    if (ok(ldlt)) return ldlt.solve(b);
  }
  return Eigen::VectorXd::Zero(n);
}

namespace {
constexpr double kSeparationStep = 0.1;
}  // namespace

FitReport fit_weighted_mlogit(const DesignSource& data, int num_classes, int base, const MlogitOptions& options) {
  const Eigen::Index F = data.num_features();
  const int J = num_classes;
  const double bound = options.coefficient_bound;

  Eigen::MatrixXd start = Eigen::MatrixXd::Zero(J, F);
  if (options.start) {
    if (options.start->rows() != J || options.start->cols() != F) throw InvalidInput("warm start has wrong shape");
    start = *options.start;
  }
  Eigen::VectorXd theta = pack_free(start, base).cwiseMax(-bound).cwiseMin(bound);
  const Eigen::Index P = theta.size();

  FitReport report;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  double f = mlogit_objective(data, J, base, unpack_free(theta, J, F, base), &grad);

  for (int it = 0;; ++it) {
    report.iterations = it;
    std::vector<Eigen::Index> free;
    Eigen::VectorXd pg = grad;
    bool any_active = false;
    for (Eigen::Index i = 0; i < P; ++i) {
      const bool at_upper = theta[i] >= bound && grad[i] > 0.0;
      const bool at_lower = theta[i] <= -bound && grad[i] < 0.0;
      if (at_upper || at_lower) {
        pg[i] = 0.0;
        any_active = true;
      } else {
        free.push_back(i);
      }
    }
    report.gradient_norm = pg.norm();
    const bool small_gradient = report.gradient_norm <= options.tol;
    if (small_gradient && free.empty()) {
      report.status = FitStatus::Diverged;
      break;
    }
    if (!small_gradient && it >= options.max_iterations) {
      report.status = FitStatus::IterationCap;
      break;
    }

    mlogit_objective(data, J, base, unpack_free(theta, J, F, base), nullptr, &hess);
    const Eigen::Index nf = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd A(nf, nf);
    Eigen::VectorXd g(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      g[a] = grad[free[a]];
      for (Eigen::Index b = 0; b < nf; ++b) A(a, b) = -hess(free[a], free[b]);
    }
    const Eigen::VectorXd step = solve_regularized(A, g, 1e-8, report.ridge_used);
    if (small_gradient) {
      // a flat gradient with a long Newton step is a separated direction: keep going to the bound
      if (step.cwiseAbs().maxCoeff() <= kSeparationStep || it >= options.max_iterations) {
        report.status = any_active ? FitStatus::Diverged : FitStatus::Converged;
        break;
      }
    }
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(P);
    for (Eigen::Index a = 0; a < nf; ++a) dir[free[a]] = step[a];

    bool accepted = false;
    // separated: jump to the bound along the step, then back off by halving
    double alpha = small_gradient ? std::max(1.0, 2.0 * bound / dir.cwiseAbs().maxCoeff()) : 1.0;
    for (int halving = 0; halving < 60; ++halving, alpha *= 0.5) {
      const Eigen::VectorXd cand = (theta + alpha * dir).cwiseMax(-bound).cwiseMin(bound);
      Eigen::VectorXd gc;
      const double fc = mlogit_objective(data, J, base, unpack_free(cand, J, F, base), &gc);
      if (std::isfinite(fc) && fc >= f) {
        accepted = fc > f || (cand - theta).norm() > 0.0;
        theta = cand;
        f = fc;
        grad = gc;
        break;
      }
    }
    if (!accepted) {
      // at a small gradient the objective is flat to rounding
      report.status = small_gradient ? (any_active ? FitStatus::Diverged : FitStatus::Converged) : FitStatus::Stalled;
      break;
    }
  }

  bool at_bound = false;
  for (Eigen::Index i = 0; i < P; ++i) at_bound = at_bound || std::abs(theta[i]) >= bound;
  if (report.status == FitStatus::Converged && at_bound) report.status = FitStatus::Diverged;
  report.converged = report.status == FitStatus::Converged;
  report.final_objective = f;
  report.coefficients = unpack_free(theta, J, F, base);
  return report;
}

namespace {

struct OlsPartial {
  Eigen::MatrixXd xtx;
  Eigen::VectorXd xty;
  CompensatedSum weight;
  CompensatedSum yy;
};

OlsPartial ols_accumulate(const DesignSource& data) {
  const Eigen::Index F = data.num_features();
  OlsPartial init;
  init.xtx = Eigen::MatrixXd::Zero(F, F);
  init.xty = Eigen::VectorXd::Zero(F);
  auto total = map_reduce(
      data.num_blocks(), init,
      [&](std::size_t b, OlsPartial& part) {
        WeightedBlock blk;
        data.fill_block(b, blk);
        for (Eigen::Index i = 0; i < blk.rows(); ++i) {
          const double w = blk.weight[i];
          if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInput("weights must be finite and >= 0");
          if (!std::isfinite(blk.y[i])) throw InvalidInput("regression outcome must be finite");
          part.weight += w;
          part.yy += w * blk.y[i] * blk.y[i];
        }
        const Eigen::MatrixXd wx = blk.weight.asDiagonal() * blk.features;
        part.xtx.noalias() += wx.transpose() * blk.features;
        part.xty.noalias() += wx.transpose() * blk.y;
      },
      [](OlsPartial& acc, const OlsPartial& p) {
        acc.xtx += p.xtx;
        acc.xty += p.xty;
        acc.weight += p.weight;
        acc.yy += p.yy;
      });
  if (!(total.weight.value() > 0.0)) throw InvalidInput("dataset needs at least one strictly positive weight");
  return total;
}

}  // namespace

double ols_objective(const DesignSource& data, const Eigen::VectorXd& coefficients, Eigen::VectorXd* gradient) {
  if (coefficients.size() != data.num_features()) throw InvalidInput("coefficient vector has wrong length");
  struct Partial {
    CompensatedSum sse;
    CompensatedSum weight;
    Eigen::VectorXd grad;
  };
  Partial init;
  init.grad = Eigen::VectorXd::Zero(data.num_features());
  auto total = map_reduce(
      data.num_blocks(), init,
      [&](std::size_t b, Partial& part) {
        WeightedBlock blk;
        data.fill_block(b, blk);
        const Eigen::VectorXd r = blk.y - blk.features * coefficients;
        for (Eigen::Index i = 0; i < blk.rows(); ++i) {
          part.sse += blk.weight[i] * r[i] * r[i];
          part.weight += blk.weight[i];
        }
        if (gradient) part.grad.noalias() += blk.features.transpose() * (blk.weight.array() * r.array()).matrix();
      },
      [](Partial& acc, const Partial& p) {
        acc.sse += p.sse;
        acc.weight += p.weight;
        acc.grad += p.grad;
      });
  const double W = total.weight.value();
  if (!(W > 0.0)) throw InvalidInput("dataset needs at least one strictly positive weight");
  if (gradient) *gradient = total.grad / W;
  return -0.5 * total.sse.value() / W;
}

FitReport fit_weighted_ols(const DesignSource& data, const OlsOptions& options) {
  const auto acc = ols_accumulate(data);
  const Eigen::Index F = data.num_features();
  FitReport report;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(acc.xtx, Eigen::EigenvaluesOnly);
  const double max_ev = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  Eigen::VectorXd beta;
  if (eig.eigenvalues().minCoeff() > 1e-11 * max_ev) {
    beta = acc.xtx.ldlt().solve(acc.xty);
  } else {
    report.ridge_used = true;
    Eigen::MatrixXd R = acc.xtx;
    R.diagonal().array() += options.ridge * std::max(acc.xtx.trace() / static_cast<double>(F), 1e-300);
    beta = R.ldlt().solve(acc.xty);
  }
  const double W = acc.weight.value();
  const Eigen::VectorXd grad = (acc.xty - acc.xtx * beta) / W;
  report.coefficients = beta;
  report.gradient_norm = grad.norm();
  report.final_objective = -0.5 * (acc.yy.value() - 2.0 * beta.dot(acc.xty) + beta.dot(acc.xtx * beta)) / W;
  report.iterations = 1;
  report.status = FitStatus::Converged;
  report.converged = true;
  return report;
}

FitReport fit_log_variance(const DesignSource& residuals, const OlsOptions& options) {
  MappedOutcomeSource logsq(residuals, [](double r) {
    if (!std::isfinite(r)) throw InvalidInput("residuals must be finite");
    return std::log(std::max(r * r, kResidualFloor));
  });
  return fit_weighted_ols(logsq, options);
}

FitReport fit_fisher_link(const DesignSource& covariances, const OlsOptions& options) {
  MappedOutcomeSource f(covariances, [](double c) {
    if (!std::isfinite(c)) throw InvalidInput("covariance estimates must be finite");
    const double lim = 1.0 - kCovarianceClamp;
    return fisher_link(std::clamp(c, -lim, lim));
  });
  return fit_weighted_ols(f, options);
}

}  // namespace labdyn
