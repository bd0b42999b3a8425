#include "labdyn/design.hpp"

#include <algorithm>

namespace labdyn {

namespace {

std::string num(int i) { return std::to_string(i); }

void add_fixed(std::vector<std::string>& n) {
  n.insert(n.end(), {"female", "educ_med", "educ_high", "first_xp"});
}

void add_class_dummies(std::vector<std::string>& n, const char* prefix, int classes) {
  for (int k = 1; k < classes; ++k) n.push_back(std::string(prefix) + num(k));
}

// Writes female, educ_med, educ_high, first_xp.
template <typename Out>
Eigen::Index put_fixed(const FixedCovariates& zf, Out& out, Eigen::Index i) {
  out[i++] = zf.female ? 1.0 : 0.0;
  out[i++] = zf.educ == Education::Medium ? 1.0 : 0.0;
  out[i++] = zf.educ == Education::High ? 1.0 : 0.0;
  out[i++] = zf.first_xp;
  return i;
}

template <typename Out>
Eigen::Index put_dummies(int value, int classes, Out& out, Eigen::Index i) {
  for (int k = 1; k < classes; ++k) out[i++] = value == k ? 1.0 : 0.0;
  return i;
}

}  // namespace

Eigen::Index Layout::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InvalidInput("unknown coefficient name: " + name);
  return static_cast<Eigen::Index>(it - names.begin());
}

Designs::Designs(int num_mobility_classes, int num_income_classes)
    : km_(num_mobility_classes), ky_(num_income_classes) {
  if (km_ < 1 || ky_ < 1) throw InvalidInput("class counts must be >= 1");

  auto& a = kappa_m_.names;
  add_fixed(a);
  a.push_back("const");

  auto& b = chi0_.names;
  add_fixed(b);
  add_class_dummies(b, "km_", km_);
  b.push_back("const");

  auto& c = chi_.names;
  for (int s = 1; s <= 4; ++s) c.push_back("prev_state_" + num(s));
  c.push_back("xp_prev");
  for (int s = 1; s <= 4; ++s) c.push_back("xp_prev_x_prev_state_" + num(s));
  c.push_back("xp_prev_sq");
  add_fixed(c);
  add_class_dummies(c, "km_", km_);
  c.push_back("const");

  auto& d = kappa_y_.names;
  add_fixed(d);
  add_class_dummies(d, "km_", km_);
  d.push_back("const");

  auto& m = mu_.names;
  for (int s = 2; s <= 4; ++s) m.push_back("state_" + num(s));
  m.push_back("xp");
  for (int s = 2; s <= 4; ++s) m.push_back("xp_x_state_" + num(s));
  m.push_back("xp_sq");
  add_fixed(m);
  for (int s = 1; s <= 4; ++s)
    for (int k = 1; k < ky_; ++k) m.push_back("state_" + num(s) + "_x_ky_" + num(k));
  m.push_back("const");

  auto& g = sigma_.names;
  for (int s = 2; s <= 4; ++s) g.push_back("state_" + num(s));
  g.push_back("xp");
  for (int s = 2; s <= 4; ++s) g.push_back("xp_x_state_" + num(s));
  for (int s = 1; s <= 4; ++s) g.push_back("xp_sq_x_state_" + num(s));
  add_fixed(g);
  add_class_dummies(g, "km_", km_);
  for (int s = 1; s <= 4; ++s)
    for (int k = 1; k < ky_; ++k) g.push_back("state_" + num(s) + "_x_ky_" + num(k));
  g.push_back("const");

  auto& x = xi_.names;
  for (int s = 2; s <= 4; ++s) x.push_back("cur_state_" + num(s));
  for (int s = 1; s <= 4; ++s) x.push_back("prev_state_" + num(s));
  x.push_back("xp");
  x.push_back("xp_sq");
  x.push_back("xp_prev");
  for (int s = 1; s <= 4; ++s) x.push_back("xp_prev_x_prev_state_" + num(s));
  add_class_dummies(x, "ky_", ky_);
  add_class_dummies(x, "km_", km_);
  for (int k = 1; k < ky_; ++k)
    for (int s = 2; s <= 4; ++s) x.push_back("ky_" + num(k) + "_x_cur_state_" + num(s));
  x.push_back("const");
}

void Designs::check_mobility_class(int km) const {
  if (km < 0 || km >= km_) throw InvalidInput("mobility class index out of range: " + num(km));
}

void Designs::check_income_class(int ky) const {
  if (ky < 0 || ky >= ky_) throw InvalidInput("income class index out of range: " + num(ky));
}

void Designs::kappa_m_row(const FixedCovariates& zf, Eigen::Ref<Eigen::VectorXd> out) const {
  Eigen::Index i = put_fixed(zf, out, 0);
  out[i] = 1.0;
}

void Designs::chi0_row(const FixedCovariates& zf, int km, Eigen::Ref<Eigen::VectorXd> out) const {
  Eigen::Index i = put_fixed(zf, out, 0);
  i = put_dummies(km, km_, out, i);
  out[i] = 1.0;
}

void Designs::chi_row(EmploymentState prev, const TimeVaryingCovariates& zv_prev, const FixedCovariates& zf, int km,
                      Eigen::Ref<Eigen::VectorXd> out) const {
  const int p = code(prev);
  Eigen::Index i = 0;
  for (int s = 1; s <= 4; ++s) out[i++] = p == s ? 1.0 : 0.0;
  out[i++] = zv_prev.xp;
  for (int s = 1; s <= 4; ++s) out[i++] = p == s ? zv_prev.xp : 0.0;
  out[i++] = zv_prev.xp_sq;
  i = put_fixed(zf, out, i);
  i = put_dummies(km, km_, out, i);
  out[i] = 1.0;
}

void Designs::kappa_y_row(const FixedCovariates& zf, int km, Eigen::Ref<Eigen::VectorXd> out) const {
  Eigen::Index i = put_fixed(zf, out, 0);
  i = put_dummies(km, km_, out, i);
  out[i] = 1.0;
}

void Designs::mu_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int ky,
                     Eigen::Ref<Eigen::VectorXd> out) const {
  const int c = code(s);
  Eigen::Index i = 0;
  for (int t = 2; t <= 4; ++t) out[i++] = c == t ? 1.0 : 0.0;
  out[i++] = zv.xp;
  for (int t = 2; t <= 4; ++t) out[i++] = c == t ? zv.xp : 0.0;
  out[i++] = zv.xp_sq;
  i = put_fixed(zf, out, i);
  for (int t = 1; t <= 4; ++t)
    for (int k = 1; k < ky_; ++k) out[i++] = (c == t && ky == k) ? 1.0 : 0.0;
  out[i] = 1.0;
}

void Designs::sigma_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf, int km, int ky,
                        Eigen::Ref<Eigen::VectorXd> out) const {
  const int c = code(s);
  Eigen::Index i = 0;
  for (int t = 2; t <= 4; ++t) out[i++] = c == t ? 1.0 : 0.0;
  out[i++] = zv.xp;
  for (int t = 2; t <= 4; ++t) out[i++] = c == t ? zv.xp : 0.0;
  for (int t = 1; t <= 4; ++t) out[i++] = c == t ? zv.xp_sq : 0.0;
  i = put_fixed(zf, out, i);
  i = put_dummies(km, km_, out, i);
  for (int t = 1; t <= 4; ++t)
    for (int k = 1; k < ky_; ++k) out[i++] = (c == t && ky == k) ? 1.0 : 0.0;
  out[i] = 1.0;
}

void Designs::xi_row(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
                     const TimeVaryingCovariates& zv_prev, int km, int ky, Eigen::Ref<Eigen::VectorXd> out) const {
  const int c = code(cur);
  const int p = code(prev);
  Eigen::Index i = 0;
  for (int t = 2; t <= 4; ++t) out[i++] = c == t ? 1.0 : 0.0;
  for (int t = 1; t <= 4; ++t) out[i++] = p == t ? 1.0 : 0.0;
  out[i++] = zv.xp;
  out[i++] = zv.xp_sq;
  out[i++] = zv_prev.xp;
  for (int t = 1; t <= 4; ++t) out[i++] = p == t ? zv_prev.xp : 0.0;
  i = put_dummies(ky, ky_, out, i);
  i = put_dummies(km, km_, out, i);
  for (int k = 1; k < ky_; ++k)
    for (int t = 2; t <= 4; ++t) out[i++] = (ky == k && c == t) ? 1.0 : 0.0;
  out[i] = 1.0;
}

Eigen::VectorXd Designs::kappa_m_row(const FixedCovariates& zf) const {
  Eigen::VectorXd v(kappa_m_.size());
  kappa_m_row(zf, v);
  return v;
}

Eigen::VectorXd Designs::chi0_row(const FixedCovariates& zf, int km) const {
  Eigen::VectorXd v(chi0_.size());
  chi0_row(zf, km, v);
  return v;
}

Eigen::VectorXd Designs::chi_row(EmploymentState prev, const TimeVaryingCovariates& zv_prev,
                                 const FixedCovariates& zf, int km) const {
  Eigen::VectorXd v(chi_.size());
  chi_row(prev, zv_prev, zf, km, v);
  return v;
}

Eigen::VectorXd Designs::kappa_y_row(const FixedCovariates& zf, int km) const {
  Eigen::VectorXd v(kappa_y_.size());
  kappa_y_row(zf, km, v);
  return v;
}

Eigen::VectorXd Designs::mu_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf,
                                int ky) const {
  Eigen::VectorXd v(mu_.size());
  mu_row(s, zv, zf, ky, v);
  return v;
}

Eigen::VectorXd Designs::sigma_row(EmploymentState s, const TimeVaryingCovariates& zv, const FixedCovariates& zf,
                                   int km, int ky) const {
  Eigen::VectorXd v(sigma_.size());
  sigma_row(s, zv, zf, km, ky, v);
  return v;
}

Eigen::VectorXd Designs::xi_row(EmploymentState cur, EmploymentState prev, const TimeVaryingCovariates& zv,
                                const TimeVaryingCovariates& zv_prev, int km, int ky) const {
  Eigen::VectorXd v(xi_.size());
  xi_row(cur, prev, zv, zv_prev, km, ky, v);
  return v;
}

}  // namespace labdyn
