#include "labdyn/em.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>

#include "labdyn/math.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"

namespace labdyn {

namespace {

constexpr double kSigmaFloor = 1e-6;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t part_end(std::size_t p, std::size_t n) { return std::min(n, (p + 1) * kPartitionSize); }

// Builds a source whose blocks are the fixed person partitions.
template <typename CountFn, typename RowsFn>
GeneratedSource person_source(std::size_t n, Eigen::Index features, CountFn count, RowsFn rows) {
  const std::size_t parts = num_partitions(n);
  std::vector<Eigen::Index> sizes(parts, 0);
  for (std::size_t p = 0; p < parts; ++p)
    for (std::size_t i = p * kPartitionSize; i < part_end(p, n); ++i) sizes[p] += count(i);
  return GeneratedSource(features, parts, [n, features, sizes = std::move(sizes), rows](std::size_t p, WeightedBlock& blk) {
    blk.resize(sizes[p], features);
    Eigen::Index r = 0;
    for (std::size_t i = p * kPartitionSize; i < part_end(p, n); ++i) rows(i, blk, r);
    if (r != sizes[p]) throw std::logic_error("generated block size mismatch");
  });
}

// ---------------------------------------------------------------- mobility

// Class effects enter the initial-state and transition logits additively and
// do not interact with covariates, so each score is base + per-class offset.
struct MobilityOffsets {
  Eigen::MatrixXd chi0;  // states x classes
  Eigen::MatrixXd chi;
};

MobilityOffsets mobility_offsets(const MobilityParams& p) {
  const auto& d = p.designs();
  const int K = p.num_classes();
  MobilityOffsets off;
  off.chi0.resize(kNumStates, K);
  off.chi.resize(kNumStates, K);
  const FixedCovariates zf0;
  const TimeVaryingCovariates zv0;
  const Eigen::VectorXd r00 = d.chi0_row(zf0, 0);
  const Eigen::VectorXd r0 = d.chi_row(EmploymentState::NonEmployed, zv0, zf0, 0);
  for (int k = 0; k < K; ++k) {
    off.chi0.col(k) = p.chi0 * (d.chi0_row(zf0, k) - r00);
    off.chi.col(k) = p.chi * (d.chi_row(EmploymentState::NonEmployed, zv0, zf0, k) - r0);
  }
  return off;
}

struct MobilityScratch {
  Eigen::VectorXd kappa_row, chi0_row, chi_row;
  Eigen::Matrix<double, kNumStates, 1> base, v;
};

// Log prior and per-class mobility log-likelihood of one person.
void mobility_person(const MobilityParams& p, const MobilityOffsets& off, const IndividualHistory& h,
                     MobilityScratch& s, Eigen::VectorXd& log_prior, Eigen::VectorXd& ll) {
  const auto& d = p.designs();
  const int K = p.num_classes();
  s.kappa_row.resize(d.kappa_m().size());
  s.chi0_row.resize(d.chi0().size());
  s.chi_row.resize(d.chi().size());
  d.kappa_m_row(h.zf, s.kappa_row);
  log_prior = log_softmax(Eigen::VectorXd(p.kappa_m * s.kappa_row));
  ll.setZero(K);
  if (h.years.empty()) return;
  d.chi0_row(h.zf, 0, s.chi0_row);
  s.base = p.chi0 * s.chi0_row;
  const int s0 = code(h.years.front().state);
  for (int k = 0; k < K; ++k) {
    s.v = s.base + off.chi0.col(k);
    ll[k] += s.v[s0] - log_sum_exp(s.v);
  }
  for (std::size_t t = 1; t < h.years.size(); ++t) {
    const auto& prev = h.years[t - 1];
    d.chi_row(prev.state, prev.zv, h.zf, 0, s.chi_row);
    s.base = p.chi * s.chi_row;
    const int st = code(h.years[t].state);
    for (int k = 0; k < K; ++k) {
      s.v = s.base + off.chi.col(k);
      ll[k] += s.v[st] - log_sum_exp(s.v);
    }
  }
}

// ---------------------------------------------------------------- income

struct IncObs {
  EmploymentState state;
  EmploymentState prev;
  bool cont;
  double y;
  TimeVaryingCovariates zv;
  TimeVaryingCovariates zv_prev;
};

struct IncomeData {
  std::vector<std::size_t> begin;  // person i owns obs [begin[i], begin[i+1])
  std::vector<IncObs> obs;

  explicit IncomeData(const Panel& panel) {
    begin.reserve(panel.size() + 1);
    for (const auto& h : panel) {
      begin.push_back(obs.size());
      for (std::size_t t = 0; t < h.years.size(); ++t) {
        const auto& yr = h.years[t];
        if (!is_employed(yr.state)) continue;
        if (!yr.log_wage) throw InvalidInput("employed year without a wage for person " + h.id);
        IncObs o{yr.state, EmploymentState::NonEmployed, false, *yr.log_wage, yr.zv, {}};
        if (continues_employed_run(h, t)) {
          o.cont = true;
          o.prev = h.years[t - 1].state;
          o.zv_prev = h.years[t - 1].zv;
        }
        obs.push_back(o);
      }
    }
    begin.push_back(obs.size());
  }

  std::size_t persons() const { return begin.size() - 1; }
  Eigen::Index count(std::size_t i) const { return static_cast<Eigen::Index>(begin[i + 1] - begin[i]); }
  Eigen::Index count_cont(std::size_t i) const {
    Eigen::Index c = 0;
    for (std::size_t o = begin[i]; o < begin[i + 1]; ++o) c += obs[o].cont ? 1 : 0;
    return c;
  }
};

struct IncomeOffsets {
  int km = 1, ky = 1;
  std::vector<double> mu, sig, xi;

  double mu_at(EmploymentState s, int k) const { return mu[code(s) * ky + k]; }
  double sig_at(EmploymentState s, int m, int k) const { return sig[(code(s) * km + m) * ky + k]; }
  double xi_at(EmploymentState c, EmploymentState p, int m, int k) const {
    return xi[((code(c) * kNumStates + code(p)) * km + m) * ky + k];
  }
};

IncomeOffsets income_offsets(const IncomeParams& p) {
  const auto& d = p.designs();
  IncomeOffsets off;
  off.km = p.num_mobility_classes;
  off.ky = p.num_classes();
  const FixedCovariates zf0;
  const TimeVaryingCovariates zv0;
  off.mu.assign(static_cast<std::size_t>(kNumStates * off.ky), 0.0);
  off.sig.assign(static_cast<std::size_t>(kNumStates * off.km * off.ky), 0.0);
  off.xi.assign(static_cast<std::size_t>(kNumStates * kNumStates * off.km * off.ky), 0.0);
  for (int s = 1; s < kNumStates; ++s) {
    const auto st = static_cast<EmploymentState>(s);
    const double mu0 = d.mu_row(st, zv0, zf0, 0).dot(p.mu);
    const double sig0 = d.sigma_row(st, zv0, zf0, 0, 0).dot(p.sigma);
    for (int k = 0; k < off.ky; ++k) off.mu[s * off.ky + k] = d.mu_row(st, zv0, zf0, k).dot(p.mu) - mu0;
    for (int m = 0; m < off.km; ++m)
      for (int k = 0; k < off.ky; ++k)
        off.sig[(s * off.km + m) * off.ky + k] = d.sigma_row(st, zv0, zf0, m, k).dot(p.sigma) - sig0;
    for (int q = 1; q < kNumStates; ++q) {
      const auto pv = static_cast<EmploymentState>(q);
      const double xi0 = d.xi_row(st, pv, zv0, zv0, 0, 0).dot(p.xi);
      for (int m = 0; m < off.km; ++m)
        for (int k = 0; k < off.ky; ++k)
          off.xi[((s * kNumStates + q) * off.km + m) * off.ky + k] = d.xi_row(st, pv, zv0, zv0, m, k).dot(p.xi) - xi0;
    }
  }
  return off;
}

// Scores of every employed observation at the base classes.
struct BaseScores {
  std::vector<double> mu, sig, xi;
};

BaseScores base_scores(const Panel& panel, const IncomeData& data, const IncomeParams& p) {
  const auto& d = p.designs();
  BaseScores b;
  b.mu.resize(data.obs.size());
  b.sig.resize(data.obs.size());
  b.xi.assign(data.obs.size(), 0.0);
  const std::size_t n = data.persons();
  parallel_for(num_partitions(n), [&](std::size_t part) {
    Eigen::VectorXd rm(d.mu().size()), rs(d.sigma().size()), rx(d.xi().size());
    for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i) {
      const auto& zf = panel[i].zf;
      for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o) {
        const auto& ob = data.obs[o];
        d.mu_row(ob.state, ob.zv, zf, 0, rm);
        d.sigma_row(ob.state, ob.zv, zf, 0, 0, rs);
        b.mu[o] = rm.dot(p.mu);
        b.sig[o] = rs.dot(p.sigma);
        if (ob.cont) {
          d.xi_row(ob.state, ob.prev, ob.zv, ob.zv_prev, 0, 0, rx);
          b.xi[o] = rx.dot(p.xi);
        }
      }
    }
  });
  return b;
}

struct Evaluated {
  double ytilde, log_var;
  Correlation tau;
};

double person_income_ll(const IncomeData& data, const BaseScores& b, const IncomeOffsets& off, std::size_t i, int km,
                        int ky) {
  double ll = 0.0;
  double prev = 0.0;
  for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o) {
    const auto& ob = data.obs[o];
    const double m = b.mu[o] + off.mu_at(ob.state, ky);
    const double lv = b.sig[o] + off.sig_at(ob.state, km, ky);
    const double yt = (ob.y - m) * std::exp(-0.5 * lv);
    if (ob.cont) {
      const Correlation tau =
          Correlation::from_score(b.xi[o] + off.xi_at(ob.state, ob.prev, km, ky)).clamped(kCorrelationClamp);
      ll += conditional_normal_logpdf(yt, prev, tau);
    } else {
      ll += normal_logpdf(yt);
    }
    ll -= 0.5 * lv;
    prev = yt;
  }
  return ll;
}

struct IncomeModel {
  const Panel& panel;
  const IncomeData& data;
  const JointPosterior& post;

  double q(const IncomeParams& p) const {
    const BaseScores b = base_scores(panel, data, p);
    const IncomeOffsets off = income_offsets(p);
    const std::size_t n = data.persons();
    CompensatedSum total = map_reduce(
        num_partitions(n), CompensatedSum{},
        [&](std::size_t part, CompensatedSum& acc) {
          for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i)
            for (int m = 0; m < post.num_mobility; ++m)
              for (int k = 0; k < post.num_income; ++k) {
                const double w = post.at(static_cast<Eigen::Index>(i), m, k);
                if (w != 0.0) acc.add(w * person_income_ll(data, b, off, i, m, k));
              }
        },
        [](CompensatedSum& acc, const CompensatedSum& p) { acc += p; });
    return total.value();
  }
};

void check_posterior(const Panel& panel, const JointPosterior& post) {
  if (post.prob.rows() != static_cast<Eigen::Index>(panel.size()) ||
      post.prob.cols() != static_cast<Eigen::Index>(post.num_mobility) * post.num_income)
    throw InvalidInput("posterior does not match the panel and class configuration");
}

}  // namespace

// ---------------------------------------------------------------- posteriors

Eigen::MatrixXd JointPosterior::mobility_marginal() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(prob.rows(), num_mobility);
  for (int a = 0; a < num_mobility; ++a)
    for (int b = 0; b < num_income; ++b) m.col(a) += prob.col(a * num_income + b);
  return m;
}

Eigen::MatrixXd JointPosterior::income_marginal() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(prob.rows(), num_income);
  for (int a = 0; a < num_mobility; ++a)
    for (int b = 0; b < num_income; ++b) m.col(b) += prob.col(a * num_income + b);
  return m;
}

MobilityPosterior e_step_mobility(const Panel& panel, const MobilityParams& theta_m, double* loglik) {
  theta_m.validate();
  const int K = theta_m.num_classes();
  const auto off = mobility_offsets(theta_m);
  MobilityPosterior post;
  post.prob.resize(static_cast<Eigen::Index>(panel.size()), K);
  const std::size_t n = panel.size();
  CompensatedSum total = map_reduce(
      num_partitions(n), CompensatedSum{},
      [&](std::size_t part, CompensatedSum& acc) {
        MobilityScratch s;
        Eigen::VectorXd lp, ll;
        for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i) {
          check_covariates(panel[i].zf);
          mobility_person(theta_m, off, panel[i], s, lp, ll);
          const Eigen::VectorXd joint = lp + ll;
          const double lse = log_sum_exp(joint);
          acc.add(lse);
          post.prob.row(static_cast<Eigen::Index>(i)) = (joint.array() - lse).exp().transpose();
        }
      },
      [](CompensatedSum& acc, const CompensatedSum& p) { acc += p; });
  if (loglik) *loglik = total.value();
  return post;
}

double observed_loglik_mobility(const Panel& panel, const MobilityParams& theta_m) {
  double ll = 0.0;
  e_step_mobility(panel, theta_m, &ll);
  return ll;
}

JointPosterior e_step_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                            double* loglik) {
  theta_m.validate();
  theta_y.validate();
  const int Km = theta_m.num_classes();
  const int Ky = theta_y.num_classes();
  if (theta_y.num_mobility_classes != Km) throw InvalidInput("income parameters expect a different Km");
  const IncomeData data(panel);
  const BaseScores b = base_scores(panel, data, theta_y);
  const IncomeOffsets ioff = income_offsets(theta_y);
  const auto moff = mobility_offsets(theta_m);
  const auto& dy = theta_y.designs();

  JointPosterior post;
  post.num_mobility = Km;
  post.num_income = Ky;
  post.prob.resize(static_cast<Eigen::Index>(panel.size()), Km * Ky);
  const std::size_t n = panel.size();
  CompensatedSum total = map_reduce(
      num_partitions(n), CompensatedSum{},
      [&](std::size_t part, CompensatedSum& acc) {
        MobilityScratch s;
        Eigen::VectorXd lp, ll, row(dy.kappa_y().size()), joint(Km * Ky);
        for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i) {
          const auto& h = panel[i];
          check_covariates(h.zf);
          mobility_person(theta_m, moff, h, s, lp, ll);
          for (int m = 0; m < Km; ++m) {
            dy.kappa_y_row(h.zf, m, row);
            const Eigen::VectorXd lpy = log_softmax(Eigen::VectorXd(theta_y.kappa_y * row));
            for (int k = 0; k < Ky; ++k)
              joint[m * Ky + k] = lp[m] + ll[m] + lpy[k] + person_income_ll(data, b, ioff, i, m, k);
          }
          const double lse = log_sum_exp(joint);
          acc.add(lse);
          post.prob.row(static_cast<Eigen::Index>(i)) = (joint.array() - lse).exp().transpose();
        }
      },
      [](CompensatedSum& acc, const CompensatedSum& p) { acc += p; });
  if (loglik) *loglik = total.value();
  return post;
}

double observed_loglik_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y) {
  double ll = 0.0;
  e_step_joint(panel, theta_m, theta_y, &ll);
  return ll;
}

// ---------------------------------------------------------------- M-steps

namespace {

void note_fit(std::vector<std::string>* notes, const std::string& what, const FitReport& r) {
  if (notes && r.status != FitStatus::Converged) notes->push_back(what + ": " + to_string(r.status));
}

}  // namespace

MobilityParams m_step_mobility(const Panel& panel, const Eigen::MatrixXd& class_weights,
                               const MobilityParams* warm_start, MStepReport* report) {
  const std::size_t n = panel.size();
  const int K = static_cast<int>(class_weights.cols());
  if (class_weights.rows() != static_cast<Eigen::Index>(n) || K < 1)
    throw InvalidInput("class weights do not match the panel");
  if (warm_start && warm_start->num_classes() != K) throw InvalidInput("warm start has a different class count");
  const auto& d = designs_for(K, 1);
  MobilityParams out = MobilityParams::zeros(K);
  std::vector<std::string>* notes = report ? &report->notes : nullptr;

  if (K >= 2) {
    auto src = person_source(
        n, d.kappa_m().size(), [&](std::size_t) { return static_cast<Eigen::Index>(K); },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          const Eigen::VectorXd row = d.kappa_m_row(panel[i].zf);
          for (int k = 0; k < K; ++k, ++r) {
            blk.features.row(r) = row.transpose();
            blk.outcome[r] = k;
            blk.y[r] = 0.0;
            blk.weight[r] = class_weights(static_cast<Eigen::Index>(i), k);
          }
        });
    MlogitOptions opt;
    if (warm_start) opt.start = warm_start->kappa_m;
    const auto fit = fit_weighted_mlogit(src, K, 0, opt);
    note_fit(notes, "kappa_m", fit);
    out.kappa_m = fit.coefficients;
  }

  {
    auto src = person_source(
        n, d.chi0().size(), [&](std::size_t i) { return panel[i].years.empty() ? 0 : static_cast<Eigen::Index>(K); },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          const auto& h = panel[i];
          if (h.years.empty()) return;
          for (int k = 0; k < K; ++k, ++r) {
            blk.features.row(r) = d.chi0_row(h.zf, k).transpose();
            blk.outcome[r] = code(h.years.front().state);
            blk.y[r] = 0.0;
            blk.weight[r] = class_weights(static_cast<Eigen::Index>(i), k);
          }
        });
    MlogitOptions opt;
    if (warm_start) opt.start = warm_start->chi0;
    const auto fit = fit_weighted_mlogit(src, kNumStates, 0, opt);
    note_fit(notes, "chi0", fit);
    out.chi0 = fit.coefficients;
  }

  {
    auto src = person_source(
        n, d.chi().size(),
        [&](std::size_t i) {
          const auto T = static_cast<Eigen::Index>(panel[i].years.size());
          return T > 1 ? (T - 1) * K : 0;
        },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          const auto& h = panel[i];
          Eigen::VectorXd row(d.chi().size());
          for (std::size_t t = 1; t < h.years.size(); ++t) {
            const auto& prev = h.years[t - 1];
            for (int k = 0; k < K; ++k, ++r) {
              d.chi_row(prev.state, prev.zv, h.zf, k, row);
              blk.features.row(r) = row.transpose();
              blk.outcome[r] = code(h.years[t].state);
              blk.y[r] = 0.0;
              blk.weight[r] = class_weights(static_cast<Eigen::Index>(i), k);
            }
          }
        });
    MlogitOptions opt;
    if (warm_start) opt.start = warm_start->chi;
    const auto fit = fit_weighted_mlogit(src, kNumStates, 0, opt);
    note_fit(notes, "chi", fit);
    out.chi = fit.coefficients;
  }
  return out;
}

double expected_income_loglik(const Panel& panel, const JointPosterior& posterior, const IncomeParams& theta_y) {
  check_posterior(panel, posterior);
  const IncomeData data(panel);
  return IncomeModel{panel, data, posterior}.q(theta_y);
}

namespace {

// Gradient and Hessian of the expected income log-likelihood with respect to
// the sigma (log-variance) or xi (correlation score) coefficients.
void block_derivatives(const Panel& panel, const IncomeData& data, const JointPosterior& post, const IncomeParams& p,
                       bool sigma_block, Eigen::VectorXd& gradient, Eigen::MatrixXd& hessian) {
  const auto& d = p.designs();
  const Eigen::Index P = sigma_block ? d.sigma().size() : d.xi().size();
  const BaseScores b = base_scores(panel, data, p);
  const IncomeOffsets off = income_offsets(p);
  const int Km = post.num_mobility, Ky = post.num_income;
  const std::size_t n = data.persons();

  struct Partial {
    Eigen::VectorXd g;
    Eigen::MatrixXd h;
  };
  Partial init{Eigen::VectorXd::Zero(P), Eigen::MatrixXd::Zero(P, P)};
  auto total = map_reduce(
      num_partitions(n), init,
      [&](std::size_t part, Partial& acc) {
        Eigen::Index rows = 0;
        for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i)
          rows += (sigma_block ? data.count(i) : data.count_cont(i)) * Km * Ky;
        RowMatrix X = RowMatrix::Zero(rows, P);
        RowMatrix Xp;
        if (sigma_block) Xp = RowMatrix::Zero(rows, P);
        Eigen::VectorXd a = Eigen::VectorXd::Zero(rows), c = Eigen::VectorXd::Zero(rows),
                        g = Eigen::VectorXd::Zero(rows);
        Eigen::VectorXd row(P), prev_row(P);
        std::vector<double> yt, q, r, tau;
        Eigen::Index at = 0;
        for (std::size_t i = part * kPartitionSize; i < part_end(part, n); ++i) {
          const auto& zf = panel[i].zf;
          const std::size_t b0 = data.begin[i], e0 = data.begin[i + 1];
          const std::size_t len = e0 - b0;
          yt.assign(len, 0.0);
          q.assign(len, 0.0);
          r.assign(len, 0.0);
          tau.assign(len, 0.0);
          for (int m = 0; m < Km; ++m)
            for (int k = 0; k < Ky; ++k) {
              const double w = post.at(static_cast<Eigen::Index>(i), m, k);
              for (std::size_t j = 0; j < len; ++j) {
                const auto& ob = data.obs[b0 + j];
                const double mu = b.mu[b0 + j] + off.mu_at(ob.state, k);
                const double lv = b.sig[b0 + j] + off.sig_at(ob.state, m, k);
                yt[j] = (ob.y - mu) * std::exp(-0.5 * lv);
                if (ob.cont) {
                  const double score = b.xi[b0 + j] + off.xi_at(ob.state, ob.prev, m, k);
                  const Correlation tc = Correlation::from_score(score).clamped(kCorrelationClamp);
                  tau[j] = tc.value();
                  q[j] = 1.0 / tc.one_minus_sq();
                  r[j] = yt[j] - tau[j] * yt[j - 1];
                }
              }
              for (std::size_t j = 0; j < len; ++j) {
                const auto& ob = data.obs[b0 + j];
                if (sigma_block) {
                  const bool next = j + 1 < len && data.obs[b0 + j + 1].cont;
                  double gj = -0.5, hd = 0.0, ho = 0.0;
                  if (ob.cont) {
                    gj += q[j] * r[j] * yt[j] / 2.0;
                    hd += -q[j] * (yt[j] * yt[j] / 4.0 + r[j] * yt[j] / 4.0);
                    ho = q[j] * tau[j] * yt[j] * yt[j - 1] / 4.0;
                  } else {
                    gj += yt[j] * yt[j] / 2.0;
                    hd += -yt[j] * yt[j] / 2.0;
                  }
                  if (next) {
                    const double qn = q[j + 1], rn = r[j + 1], tn = tau[j + 1];
                    gj += -qn * rn * tn * yt[j] / 2.0;
                    hd += -qn * (tn * tn * yt[j] * yt[j] / 4.0 - rn * tn * yt[j] / 4.0);
                  }
                  d.sigma_row(ob.state, ob.zv, zf, m, k, row);
                  X.row(at) = row.transpose();
                  if (ob.cont) Xp.row(at) = prev_row.transpose();
                  prev_row = row;
                  g[at] = w * gj;
                  a[at] = w * hd;
                  c[at] = w * ho;
                  ++at;
                } else if (ob.cont) {
                  const double A = yt[j], B = yt[j - 1];
                  const Correlation tc =
                      Correlation::from_score(b.xi[b0 + j] + off.xi_at(ob.state, ob.prev, m, k));
                  const double t = tc.value(), D = tc.one_minus_sq();
                  const double u = A - t * B;
                  const double lx = 0.5 * (t + u * B - t * u * u / D);
                  const double lxx = 0.25 * (D * (1.0 - B * B) - u * u) + 0.5 * t * u * B - 0.5 * t * t * u * u / D;
                  d.xi_row(ob.state, ob.prev, ob.zv, ob.zv_prev, m, k, row);
                  X.row(at) = row.transpose();
                  g[at] = w * lx;
                  a[at] = w * lxx;
                  ++at;
                }
              }
            }
        }
        acc.g.noalias() += X.transpose() * g;
        acc.h.noalias() += X.transpose() * (a.asDiagonal() * X);
        if (sigma_block) {
          const Eigen::MatrixXd cross = X.transpose() * (c.asDiagonal() * Xp);
          acc.h += cross + cross.transpose();
        }
      },
      [](Partial& acc, const Partial& p) {
        acc.g += p.g;
        acc.h += p.h;
      });
  gradient = total.g;
  hessian = total.h;
}

// Exact maximizer of the expected income log-likelihood in mu given sigma and
// xi: runs are whitened (first year scaled by 1/sd, continuations by the
// conditional normal) and mu solves the resulting weighted least squares.
Eigen::VectorXd gls_mu(const Panel& panel, const IncomeData& data, const JointPosterior& post, const IncomeParams& p) {
  const auto& d = p.designs();
  const BaseScores b = base_scores(panel, data, p);
  const IncomeOffsets off = income_offsets(p);
  const int Km = post.num_mobility, Ky = post.num_income;
  const Eigen::Index P = d.mu().size();
  auto src = person_source(
      data.persons(), P, [&](std::size_t i) { return data.count(i) * Km * Ky; },
      [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
        const auto& zf = panel[i].zf;
        Eigen::VectorXd row(P), prev_row(P);
        for (int m = 0; m < Km; ++m)
          for (int k = 0; k < Ky; ++k) {
            const double w = post.at(static_cast<Eigen::Index>(i), m, k);
            double prev_scale = 0.0, prev_y = 0.0;
            for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o, ++r) {
              const auto& ob = data.obs[o];
              d.mu_row(ob.state, ob.zv, zf, k, row);
              const double scale = std::exp(-0.5 * (b.sig[o] + off.sig_at(ob.state, m, k)));
              if (ob.cont) {
                const Correlation tc =
                    Correlation::from_score(b.xi[o] + off.xi_at(ob.state, ob.prev, m, k)).clamped(kCorrelationClamp);
                const double t = tc.value(), sq = 1.0 / std::sqrt(tc.one_minus_sq());
                blk.features.row(r) = (sq * (scale * row - t * prev_scale * prev_row)).transpose();
                blk.y[r] = sq * (scale * ob.y - t * prev_scale * prev_y);
              } else {
                blk.features.row(r) = (scale * row).transpose();
                blk.y[r] = scale * ob.y;
              }
              blk.outcome[r] = 0;
              blk.weight[r] = w;
              prev_row = row;
              prev_scale = scale;
              prev_y = ob.y;
            }
          }
      });
  return fit_weighted_ols(src).coefficients;
}

// One Levenberg-Marquardt ascent step on a coefficient block; returns true when
// the objective improved.
template <typename SetFn>
bool lm_step(const Eigen::VectorXd& gradient, const Eigen::MatrixXd& hessian, const Eigen::VectorXd& current,
             double& q_now, SetFn&& evaluate) {
  if (!gradient.allFinite() || !hessian.allFinite()) return false;
  const Eigen::Index n = current.size();
  const Eigen::MatrixXd A = -hessian;
  const double scale = std::max(A.diagonal().cwiseAbs().sum() / static_cast<double>(n), 1e-300);
  for (double lambda : {0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2}) {
    Eigen::MatrixXd M = A;
    M.diagonal().array() += lambda * scale;
    Eigen::LDLT<Eigen::MatrixXd> f(M);
    if (f.info() != Eigen::Success || f.vectorD().minCoeff() <= 1e-13 * scale) continue;
    const Eigen::VectorXd step = f.solve(gradient);
    if (!step.allFinite()) continue;
    double alpha = 1.0;
    for (int h = 0; h < 4; ++h, alpha *= 0.5) {
      const Eigen::VectorXd cand = current + alpha * step;
      const double qc = evaluate(cand);
      if (std::isfinite(qc) && qc > q_now) {
        q_now = qc;
        return true;
      }
    }
  }
  return false;
}

}  // namespace

void income_block_derivatives(const Panel& panel, const JointPosterior& posterior, const IncomeParams& theta_y,
                              bool sigma_block, Eigen::VectorXd* gradient, Eigen::MatrixXd* hessian) {
  check_posterior(panel, posterior);
  const IncomeData data(panel);
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  block_derivatives(panel, data, posterior, theta_y, sigma_block, g, h);
  if (gradient) *gradient = g;
  if (hessian) *hessian = h;
}

IncomeParams m_step_income(const Panel& panel, const JointPosterior& posterior, const IncomeParams& current,
                           const IncomeMStepOptions& options, IncomeMStepReport* report) {
  check_posterior(panel, posterior);
  current.validate();
  const int Km = posterior.num_mobility, Ky = posterior.num_income;
  if (current.num_mobility_classes != Km || current.num_classes() != Ky)
    throw InvalidInput("income parameters do not match the posterior classes");
  const auto& d = designs_for(Km, Ky);
  const IncomeData data(panel);
  const std::size_t n = data.persons();
  std::vector<std::string>* notes = report ? &report->notes : nullptr;
  auto W = [&](std::size_t i, int m, int k) { return posterior.at(static_cast<Eigen::Index>(i), m, k); };

  IncomeParams cand = current;

  // mu: weighted OLS on the income-class copies (the mean does not depend on km).
  {
    auto src = person_source(
        n, d.mu().size(), [&](std::size_t i) { return data.count(i) * Ky; },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          Eigen::VectorXd row(d.mu().size());
          for (int k = 0; k < Ky; ++k) {
            double w = 0.0;
            for (int m = 0; m < Km; ++m) w += W(i, m, k);
            for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o, ++r) {
              const auto& ob = data.obs[o];
              d.mu_row(ob.state, ob.zv, panel[i].zf, k, row);
              blk.features.row(r) = row.transpose();
              blk.y[r] = ob.y;
              blk.outcome[r] = 0;
              blk.weight[r] = w;
            }
          }
        });
    const auto fit = fit_weighted_ols(src);
    if (fit.ridge_used && notes) notes->push_back("mu: ridge");
    cand.mu = fit.coefficients;
  }

  BaseScores b = base_scores(panel, data, cand);
  IncomeOffsets off = income_offsets(cand);

  // sigma: log squared residuals on the 12 copies.
  {
    auto src = person_source(
        n, d.sigma().size(), [&](std::size_t i) { return data.count(i) * Km * Ky; },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          Eigen::VectorXd row(d.sigma().size());
          for (int m = 0; m < Km; ++m)
            for (int k = 0; k < Ky; ++k)
              for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o, ++r) {
                const auto& ob = data.obs[o];
                d.sigma_row(ob.state, ob.zv, panel[i].zf, m, k, row);
                blk.features.row(r) = row.transpose();
                blk.y[r] = ob.y - (b.mu[o] + off.mu_at(ob.state, k));
                blk.outcome[r] = 0;
                blk.weight[r] = W(i, m, k);
              }
        });
    const auto fit = fit_log_variance(src);
    if (fit.ridge_used && notes) notes->push_back("sigma: ridge");
    cand.sigma = fit.coefficients;
  }

  b = base_scores(panel, data, cand);
  off = income_offsets(cand);

  // xi: renormalized residual products through the f-transform.
  {
    auto ytilde = [&](std::size_t o, int m, int k) {
      const auto& ob = data.obs[o];
      const double mu = b.mu[o] + off.mu_at(ob.state, k);
      const double sd = std::max(std::exp(0.5 * (b.sig[o] + off.sig_at(ob.state, m, k))), kSigmaFloor);
      return (ob.y - mu) / sd;
    };
    bool any_pairs = false;
    for (const auto& ob : data.obs) any_pairs = any_pairs || ob.cont;
    if (any_pairs) {
      auto src = person_source(
          n, d.xi().size(), [&](std::size_t i) { return data.count_cont(i) * Km * Ky; },
          [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
            Eigen::VectorXd row(d.xi().size());
            for (int m = 0; m < Km; ++m)
              for (int k = 0; k < Ky; ++k)
                for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o) {
                  const auto& ob = data.obs[o];
                  if (!ob.cont) continue;
                  d.xi_row(ob.state, ob.prev, ob.zv, ob.zv_prev, m, k, row);
                  blk.features.row(r) = row.transpose();
                  blk.y[r] = ytilde(o, m, k) * ytilde(o - 1, m, k);
                  blk.outcome[r] = 0;
                  blk.weight[r] = W(i, m, k);
                  ++r;
                }
          });
      const auto fit = fit_fisher_link(src);
      if (fit.ridge_used && notes) notes->push_back("xi: ridge");
      cand.xi = fit.coefficients;
    }
  }

  // kappa_y: income-class membership on (zf, km).
  if (Ky >= 2) {
    auto src = person_source(
        n, d.kappa_y().size(), [&](std::size_t) { return static_cast<Eigen::Index>(Km * Ky); },
        [&](std::size_t i, WeightedBlock& blk, Eigen::Index& r) {
          for (int m = 0; m < Km; ++m) {
            const Eigen::VectorXd row = d.kappa_y_row(panel[i].zf, m);
            for (int k = 0; k < Ky; ++k, ++r) {
              blk.features.row(r) = row.transpose();
              blk.outcome[r] = k;
              blk.y[r] = 0.0;
              blk.weight[r] = W(i, m, k);
            }
          }
        });
    MlogitOptions opt;
    opt.start = current.kappa_y;
    const auto fit = fit_weighted_mlogit(src, Ky, 0, opt);
    note_fit(notes, "kappa_y", fit);
    cand.kappa_y = fit.coefficients;
  }

  auto report_moments = [&](const IncomeParams& p) {
    if (!report) return;
    const BaseScores bs = base_scores(panel, data, p);
    const IncomeOffsets of = income_offsets(p);
    CompensatedSum sw, s1, s2;
    for (std::size_t i = 0; i < n; ++i)
      for (int m = 0; m < Km; ++m)
        for (int k = 0; k < Ky; ++k)
          for (std::size_t o = data.begin[i]; o < data.begin[i + 1]; ++o) {
            const auto& ob = data.obs[o];
            const double sd = std::max(std::exp(0.5 * (bs.sig[o] + of.sig_at(ob.state, m, k))), kSigmaFloor);
            const double w = W(i, m, k), yt = (ob.y - bs.mu[o] - of.mu_at(ob.state, k)) / sd;
            sw.add(w);
            s1.add(w * yt);
            s2.add(w * yt * yt);
          }
    if (sw.value() > 0.0) {
      report->ytilde_mean = s1.value() / sw.value();
      report->ytilde_var = s2.value() / sw.value() - report->ytilde_mean * report->ytilde_mean;
    }
  };

  if (!options.refine) {
    report_moments(cand);
    return cand;
  }

  const IncomeModel model{panel, data, posterior};
  const double q_cur = model.q(current);
  const double q_cand = cand.all_finite() ? model.q(cand) : -std::numeric_limits<double>::infinity();
  IncomeParams best = cand;
  double q = q_cand;
  if (!(q_cand > q_cur)) {
    best.mu = current.mu;
    best.sigma = current.sigma;
    best.xi = current.xi;
    q = q_cur;
  }
  if (report) {
    report->q_current = q_cur;
    report->q_candidate = q_cand;
    report->candidate_used = q_cand > q_cur;
  }

  for (int round = 0; round < options.refine_rounds; ++round) {
    {
      IncomeParams trial = best;
      trial.mu = gls_mu(panel, data, posterior, best);
      const double qt = trial.mu.allFinite() ? model.q(trial) : -std::numeric_limits<double>::infinity();
      if (qt > q) {
        best = trial;
        q = qt;
      }
    }
    for (bool sigma_block : {true, false}) {
      if (!sigma_block && data.obs.empty()) continue;
      Eigen::VectorXd g;
      Eigen::MatrixXd h;
      block_derivatives(panel, data, posterior, best, sigma_block, g, h);
      IncomeParams trial = best;
      const Eigen::VectorXd start = sigma_block ? best.sigma : best.xi;
      const bool improved = lm_step(g, h, start, q, [&](const Eigen::VectorXd& v) {
        (sigma_block ? trial.sigma : trial.xi) = v;
        return model.q(trial);
      });
      if (improved) best = trial;
    }
  }
  if (report) report->q_final = q;
  report_moments(best);
  return best;
}

// ---------------------------------------------------------------- drivers

MobilityParams random_mobility_params(int num_classes, std::uint64_t seed) {
  MobilityParams p = MobilityParams::zeros(num_classes);
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 1; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(eng);
  };
  fill(p.kappa_m);
  fill(p.chi0);
  fill(p.chi);
  return p;
}

IncomeParams random_income_params(int num_mobility_classes, int num_income_classes, std::uint64_t seed) {
  IncomeParams p = IncomeParams::zeros(num_mobility_classes, num_income_classes);
  std::mt19937_64 eng(seed ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (Eigen::Index r = 1; r < p.kappa_y.rows(); ++r)
    for (Eigen::Index c = 0; c < p.kappa_y.cols(); ++c) p.kappa_y(r, c) = u(eng);
  for (auto* v : {&p.mu, &p.sigma, &p.xi})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = u(eng);
  return p;
}

namespace {

struct Monitor {
  const EmOptions& options;
  EmResult& result;
  std::string phase;
  bool have_prev = false;
  double prev = 0.0;

  void observe(double ll) {
    if (have_prev) {
      const double drop = prev - ll;
      result.max_drop = std::max(result.max_drop, drop);
      if (options.check_monotone && drop > options.monotone_tol)
        throw std::logic_error(phase + ": observed-data log-likelihood decreased by " + std::to_string(drop));
    }
    have_prev = true;
    prev = ll;
  }

  void record(int iteration, double ll, double distance) {
    TraceRecord rec{phase, iteration, ll, distance};
    result.trace.push_back(rec);
    if (options.on_iteration) options.on_iteration(rec);
  }
};

void validate_options(const EmOptions& o) {
  if (!(o.tol > 0.0)) throw InvalidInput("EM tolerance must be positive");
  if (o.max_iterations < 1) throw InvalidInput("EM iteration cap must be >= 1");
  if (o.restarts < 1) throw InvalidInput("restart count must be >= 1");
}

// One EM phase over a flattened coefficient vector.
struct EmMap {
  // E-step at x (log-likelihood into ll) followed by the M-step.
  std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double& ll, std::vector<std::string>& notes)> step;
  std::function<void(int iteration, const Eigen::VectorXd& x)> checkpoint;
};

Eigen::VectorXd run_phase(const EmMap& map, Eigen::VectorXd x, const EmOptions& options, Monitor& mon) {
  EmResult& res = mon.result;
  std::vector<std::string> notes;
  for (int it = 1; it <= options.max_iterations; ++it) {
    double ll = 0.0;
    notes.clear();
    Eigen::VectorXd next = map.step(x, ll, notes);
    mon.observe(ll);
    const double dist = coefficient_distance(x, next);
    x = std::move(next);
    res.iterations = it;
    mon.record(it, ll, dist);
    if (options.checkpoint_every > 0 && map.checkpoint && it % options.checkpoint_every == 0) map.checkpoint(it, x);
    if (dist < options.tol) {
      res.converged = true;
      break;
    }
  }
  res.notes = notes;
  return x;
}

Eigen::VectorXd concat(const MobilityParams& m, const IncomeParams& y) {
  const Eigen::VectorXd a = m.flatten(), b = y.flatten();
  Eigen::VectorXd v(a.size() + b.size());
  v << a, b;
  return v;
}

MobilityParams mobility_from(const Eigen::VectorXd& x, int K) {
  MobilityParams p = MobilityParams::zeros(K);
  p.unflatten(x.head(p.flatten().size()));
  return p;
}

IncomeParams income_from(const Eigen::VectorXd& x, int Km, int Ky) {
  IncomeParams p = IncomeParams::zeros(Km, Ky);
  p.unflatten(x.tail(p.flatten().size()));
  return p;
}

}  // namespace

EmResult run_em_mobility(const Panel& panel, const MobilityParams& init, const EmOptions& options) {
  validate_options(options);
  init.validate();
  const int K = init.num_classes();
  EmResult res;
  Monitor mon{options, res, "mobility"};
  EmMap map;
  map.step = [&](const Eigen::VectorXd& x, double& ll, std::vector<std::string>& notes) {
    const MobilityParams th = mobility_from(x, K);
    const auto post = e_step_mobility(panel, th, &ll);
    MStepReport rep;
    const MobilityParams next = m_step_mobility(panel, post, &th, &rep);
    notes = rep.notes;
    return next.flatten();
  };
  map.checkpoint = [&](int it, const Eigen::VectorXd& x) {
    if (options.on_checkpoint) options.on_checkpoint("mobility", it, mobility_from(x, K), nullptr);
  };
  res.mobility = mobility_from(run_phase(map, init.flatten(), options, mon), K);
  res.loglik = observed_loglik_mobility(panel, res.mobility);
  mon.observe(res.loglik);
  return res;
}

EmResult run_em_income(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& init,
                       const EmOptions& options) {
  validate_options(options);
  init.validate();
  const int Km = init.num_mobility_classes, Ky = init.num_classes();
  EmResult res;
  res.mobility = theta_m;
  Monitor mon{options, res, "income"};
  EmMap map;
  map.step = [&](const Eigen::VectorXd& x, double& ll, std::vector<std::string>& notes) {
    const IncomeParams th = income_from(x, Km, Ky);
    const auto post = e_step_joint(panel, theta_m, th, &ll);
    IncomeMStepReport rep;
    const IncomeParams next = m_step_income(panel, post, th, options.income, &rep);
    notes = rep.notes;
    return next.flatten();
  };
  map.checkpoint = [&](int it, const Eigen::VectorXd& x) {
    if (options.on_checkpoint) {
      const IncomeParams y = income_from(x, Km, Ky);
      options.on_checkpoint("income", it, theta_m, &y);
    }
  };
  res.income = income_from(run_phase(map, init.flatten(), options, mon), Km, Ky);
  res.loglik = observed_loglik_joint(panel, theta_m, res.income);
  mon.observe(res.loglik);
  return res;
}

EmResult run_em_joint(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y,
                      const EmOptions& options) {
  validate_options(options);
  theta_m.validate();
  theta_y.validate();
  const int Km = theta_m.num_classes(), Ky = theta_y.num_classes();
  EmResult res;
  Monitor mon{options, res, "joint"};
  EmMap map;
  map.step = [&](const Eigen::VectorXd& x, double& ll, std::vector<std::string>& notes) {
    const MobilityParams m = mobility_from(x, Km);
    const IncomeParams y = income_from(x, Km, Ky);
    const auto post = e_step_joint(panel, m, y, &ll);
    MStepReport mrep;
    const MobilityParams next_m = m_step_mobility(panel, post.mobility_marginal(), &m, &mrep);
    IncomeMStepReport yrep;
    const IncomeParams next_y = m_step_income(panel, post, y, options.income, &yrep);
    notes = mrep.notes;
    notes.insert(notes.end(), yrep.notes.begin(), yrep.notes.end());
    return concat(next_m, next_y);
  };
  map.checkpoint = [&](int it, const Eigen::VectorXd& x) {
    if (options.on_checkpoint) {
      const IncomeParams y = income_from(x, Km, Ky);
      options.on_checkpoint("joint", it, mobility_from(x, Km), &y);
    }
  };
  const Eigen::VectorXd x = run_phase(map, concat(theta_m, theta_y), options, mon);
  res.mobility = mobility_from(x, Km);
  res.income = income_from(x, Km, Ky);
  res.loglik = observed_loglik_joint(panel, res.mobility, res.income);
  mon.observe(res.loglik);
  return res;
}

EstimateResult estimate(const Panel& panel, const ModelConfig& config, const EmOptions& options) {
  config.validate();
  EstimateResult out;
  const int Km = config.num_mobility_classes, Ky = config.num_income_classes;
  bool have = false;
  for (int r = 0; r < options.restarts; ++r) {
    const std::uint64_t seed = options.seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(r);
    EmResult res = run_em_mobility(panel, random_mobility_params(Km, seed), options);
    if (!have || res.loglik > out.mobility.loglik) {
      out.mobility = std::move(res);
      have = true;
    }
  }
  out.income = run_em_income(panel, out.mobility.mobility, random_income_params(Km, Ky, options.seed), options);
  out.joint = run_em_joint(panel, out.mobility.mobility, out.income.income, options);
  return out;
}

}  // namespace labdyn
