#include "labdyn/params.hpp"

#include <map>
#include <memory>
#include <mutex>

namespace labdyn {

const Designs& designs_for(int num_mobility_classes, int num_income_classes) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::unique_ptr<Designs>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{num_mobility_classes, num_income_classes}];
  if (!slot) slot = std::make_unique<Designs>(num_mobility_classes, num_income_classes);
  return *slot;
}

namespace {

void check_shape(const char* block, Eigen::Index rows, Eigen::Index cols, Eigen::Index want_rows,
                 Eigen::Index want_cols) {
  if (rows != want_rows || cols != want_cols)
    throw InvalidInput(std::string("coefficient block '") + block + "' has shape " + std::to_string(rows) + "x" +
                       std::to_string(cols) + ", expected " + std::to_string(want_rows) + "x" +
                       std::to_string(want_cols));
}

void check_block(const char* block, const Eigen::MatrixXd& m, bool base_row_zero) {
  if (!m.allFinite()) throw InvalidInput(std::string("coefficient block '") + block + "' has non-finite entries");
  if (base_row_zero && m.rows() > 0 && !m.row(0).isZero(0.0))
    throw InvalidInput(std::string("coefficient block '") + block + "' base row must be zero");
}

template <typename... Blocks>
Eigen::VectorXd concat(const Blocks&... blocks) {
  Eigen::Index n = (blocks.size() + ...);
  Eigen::VectorXd v(n);
  Eigen::Index at = 0;
  auto put = [&](const auto& b) {
    // Row-major flattening for matrices so rows (outcomes) stay contiguous.
    for (Eigen::Index r = 0; r < b.rows(); ++r)
      for (Eigen::Index c = 0; c < b.cols(); ++c) v[at++] = b(r, c);
  };
  (put(blocks), ...);
  return v;
}

template <typename... Blocks>
void split(const Eigen::Ref<const Eigen::VectorXd>& v, Blocks&... blocks) {
  Eigen::Index n = (blocks.size() + ...);
  if (v.size() != n) throw InvalidInput("flattened coefficient vector has wrong length");
  Eigen::Index at = 0;
  auto take = [&](auto& b) {
    for (Eigen::Index r = 0; r < b.rows(); ++r)
      for (Eigen::Index c = 0; c < b.cols(); ++c) b(r, c) = v[at++];
  };
  (take(blocks), ...);
}

}  // namespace

MobilityParams MobilityParams::zeros(int num_classes) {
  const auto& d = designs_for(num_classes, 1);
  MobilityParams p;
  p.kappa_m = Eigen::MatrixXd::Zero(num_classes, d.kappa_m().size());
  p.chi0 = Eigen::MatrixXd::Zero(kNumStates, d.chi0().size());
  p.chi = Eigen::MatrixXd::Zero(kNumStates, d.chi().size());
  return p;
}

Eigen::VectorXd MobilityParams::flatten() const { return concat(kappa_m, chi0, chi); }

void MobilityParams::unflatten(const Eigen::Ref<const Eigen::VectorXd>& v) { split(v, kappa_m, chi0, chi); }

bool MobilityParams::all_finite() const { return kappa_m.allFinite() && chi0.allFinite() && chi.allFinite(); }

void MobilityParams::validate() const {
  if (kappa_m.rows() < 1) throw InvalidInput("mobility parameters need at least one class");
  const auto& d = designs();
  check_shape("kappa_m", kappa_m.rows(), kappa_m.cols(), kappa_m.rows(), d.kappa_m().size());
  check_shape("chi0", chi0.rows(), chi0.cols(), kNumStates, d.chi0().size());
  check_shape("chi", chi.rows(), chi.cols(), kNumStates, d.chi().size());
  check_block("kappa_m", kappa_m, true);
  check_block("chi0", chi0, true);
  check_block("chi", chi, true);
}

IncomeParams IncomeParams::zeros(int num_mobility_classes, int num_income_classes) {
  const auto& d = designs_for(num_mobility_classes, num_income_classes);
  IncomeParams p;
  p.num_mobility_classes = num_mobility_classes;
  p.kappa_y = Eigen::MatrixXd::Zero(num_income_classes, d.kappa_y().size());
  p.mu = Eigen::VectorXd::Zero(d.mu().size());
  p.sigma = Eigen::VectorXd::Zero(d.sigma().size());
  p.xi = Eigen::VectorXd::Zero(d.xi().size());
  return p;
}

Eigen::VectorXd IncomeParams::flatten() const { return concat(kappa_y, mu, sigma, xi); }

void IncomeParams::unflatten(const Eigen::Ref<const Eigen::VectorXd>& v) { split(v, kappa_y, mu, sigma, xi); }

bool IncomeParams::all_finite() const {
  return kappa_y.allFinite() && mu.allFinite() && sigma.allFinite() && xi.allFinite();
}

void IncomeParams::validate() const {
  if (kappa_y.rows() < 1 || num_mobility_classes < 1) throw InvalidInput("income parameters need at least one class");
  const auto& d = designs();
  check_shape("kappa_y", kappa_y.rows(), kappa_y.cols(), kappa_y.rows(), d.kappa_y().size());
  check_shape("mu", mu.size(), 1, d.mu().size(), 1);
  check_shape("sigma", sigma.size(), 1, d.sigma().size(), 1);
  check_shape("xi", xi.size(), 1, d.xi().size(), 1);
  check_block("kappa_y", kappa_y, true);
  check_block("mu", mu, false);
  check_block("sigma", sigma, false);
  check_block("xi", xi, false);
}

double coefficient_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw InvalidInput("coefficient vectors differ in length");
  return (a - b).norm();
}

}  // namespace labdyn
