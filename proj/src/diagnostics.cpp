#include "labdyn/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "labdyn/em.hpp"
#include "labdyn/model.hpp"
#include "labdyn/parallel.hpp"

namespace labdyn {

namespace {

struct Counts {
  Eigen::MatrixXd pairs = Eigen::MatrixXd::Zero(kNumStates, kNumStates);
  Eigen::RowVectorXd states = Eigen::RowVectorXd::Zero(kNumStates);
};

void fold_counts(Counts& acc, const Counts& part) {
  acc.pairs += part.pairs;
  acc.states += part.states;
}

std::size_t part_end(std::size_t p, std::size_t n) { return std::min(n, (p + 1) * kPartitionSize); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

TransitionMatrix matrix_from_counts(const Eigen::MatrixXd& counts, const Eigen::RowVectorXd& state_totals) {
  if (counts.rows() != kNumStates || counts.cols() != kNumStates || state_totals.size() != kNumStates)
    throw InvalidInput("transition counts must be 5x5 with 5 state totals");
  TransitionMatrix m;
  m.counts = counts;
  m.transitions = counts.sum();
  m.observations = state_totals.sum();
  m.empty = !(m.transitions > 0.0);
  for (int a = 0; a < kNumStates; ++a) {
    const double row = counts.row(a).sum();
    m.empty_row[a] = !(row > 0.0);
    if (!m.empty_row[a]) m.prob.row(a) = counts.row(a) / row;
  }
  if (m.observations > 0.0) m.occupancy = state_totals / m.observations;
  return m;
}

TransitionMatrix transition_matrix(const Panel& panel, const PersonFilter& keep) {
  const std::size_t n = panel.size();
  Counts c = map_reduce(
      num_partitions(n), Counts{},
      [&](std::size_t p, Counts& acc) {
        for (std::size_t i = p * kPartitionSize; i < part_end(p, n); ++i) {
          const auto& h = panel[i];
          if (keep && !keep(h)) continue;
          for (std::size_t t = 0; t < h.years.size(); ++t) {
            acc.states(code(h.years[t].state)) += 1.0;
            if (t > 0 && h.years[t].year == h.years[t - 1].year + 1)
              acc.pairs(code(h.years[t - 1].state), code(h.years[t].state)) += 1.0;
          }
        }
      },
      fold_counts);
  return matrix_from_counts(c.pairs, c.states);
}

TransitionMatrix implied_transition_matrix(const Panel& panel, const MobilityParams& theta_m, const PersonFilter& keep) {
  theta_m.validate();
  const std::size_t n = panel.size();
  const int km_count = theta_m.num_classes();
  Counts c = map_reduce(
      num_partitions(n), Counts{},
      [&](std::size_t p, Counts& acc) {
        for (std::size_t i = p * kPartitionSize; i < part_end(p, n); ++i) {
          const auto& h = panel[i];
          if ((keep && !keep(h)) || h.years.empty()) continue;
          const int span = h.years.back().year - h.years.front().year + 1;
          const Eigen::VectorXd prior = class_prior_mobility(h.zf, theta_m);
          for (int k = 0; k < km_count; ++k) {
            // dist(a, e): mass in state a after e employed years
            Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(kNumStates, span);
            dist.col(0) = initial_state_probs(h.zf, k, theta_m);
            std::vector<Eigen::VectorXd> cache(static_cast<std::size_t>(kNumStates * span));
            for (int t = 0; t < span; ++t) {
              for (int a = 0; a < kNumStates; ++a) acc.states(a) += prior(k) * dist.row(a).sum();
              if (t + 1 == span) break;
              Eigen::MatrixXd next = Eigen::MatrixXd::Zero(kNumStates, span);
              for (int e = 0; e <= t; ++e) {
                for (int a = 0; a < kNumStates; ++a) {
                  const double mass = dist(a, e);
                  if (mass == 0.0) continue;
                  auto& probs = cache[static_cast<std::size_t>(a * span + e)];
                  if (probs.size() == 0) {
                    const auto zv = TimeVaryingCovariates::at(h.zf.first_xp + kExperienceStep * e);
                    probs = transition_probs(state_from_code(a), zv, h.zf, k, theta_m);
                  }
                  acc.pairs.row(a) += (prior(k) * mass) * probs.transpose();
                  next.col(e + (a != 0 ? 1 : 0)) += mass * probs;
                }
              }
              dist.swap(next);
            }
          }
        }
      },
      fold_counts);
  return matrix_from_counts(c.pairs, c.states);
}

double matrix_distance(const TransitionMatrix& a, const TransitionMatrix& b) {
  if (a.prob.rows() != b.prob.rows() || a.prob.cols() != b.prob.cols())
    throw InvalidInput("transition matrices differ in shape");
  if (a.prob.size() == 0) return 0.0;
  return (a.prob - b.prob).cwiseAbs().maxCoeff();
}

std::string to_string(HistogramGroup g) {
  switch (g) {
    case HistogramGroup::All: return "all";
    case HistogramGroup::State: return "state";
    case HistogramGroup::Sector: return "sector";
    case HistogramGroup::Gender: return "gender";
    case HistogramGroup::IncomeClass: return "income_class";
  }
  return "all";
}

HistogramGroup histogram_group_from_string(const std::string& s) {
  for (auto g : {HistogramGroup::All, HistogramGroup::State, HistogramGroup::Sector, HistogramGroup::Gender,
                 HistogramGroup::IncomeClass})
    if (to_string(g) == s) return g;
  throw InvalidInput("unknown histogram group: " + s);
}

double Histogram::mass() const {
  double m = 0.0;
  for (double d : density) m += d * width;
  return m;
}

std::vector<Histogram> wage_histogram(const Panel& panel, double width, HistogramGroup by) {
  if (!(width > 0.0) || !std::isfinite(width)) throw InvalidInput("bin width must be positive");
  std::vector<std::string> labels;
  switch (by) {
    case HistogramGroup::All: labels = {"all"}; break;
    case HistogramGroup::State:
      labels = {"state=1", "state=2", "state=3", "state=4"};
      break;
    case HistogramGroup::Sector: labels = {"private", "public"}; break;
    case HistogramGroup::Gender: labels = {"male", "female"}; break;
    case HistogramGroup::IncomeClass: {
      int top = -1;
      for (const auto& h : panel) {
        if (!h.ky) throw InvalidInput("income-class histogram needs attached classes (" + h.id + ")");
        top = std::max(top, *h.ky);
      }
      for (int k = 0; k <= top; ++k) labels.push_back("ky=" + std::to_string(k));
      break;
    }
  }
  auto level = [&](const IndividualHistory& h, EmploymentState s) -> std::size_t {
    switch (by) {
      case HistogramGroup::All: return 0;
      case HistogramGroup::State: return static_cast<std::size_t>(code(s) - 1);
      case HistogramGroup::Sector: return is_public(s) ? 1 : 0;
      case HistogramGroup::Gender: return h.zf.female ? 1 : 0;
      case HistogramGroup::IncomeClass: return static_cast<std::size_t>(*h.ky);
    }
    return 0;
  };
  std::vector<std::map<long, std::size_t>> bins(labels.size());
  std::vector<std::size_t> counts(labels.size(), 0);
  for (const auto& h : panel)
    for (const auto& y : h.years) {
      if (!is_employed(y.state) || !y.log_wage) continue;
      const std::size_t g = level(h, y.state);
      ++bins[g][static_cast<long>(std::floor(*y.log_wage / width))];
      ++counts[g];
    }
  std::vector<Histogram> out;
  for (std::size_t g = 0; g < labels.size(); ++g) {
    Histogram hist;
    hist.group = labels[g];
    hist.width = width;
    hist.count = counts[g];
    hist.empty = counts[g] == 0;
    if (!hist.empty) {
      hist.first_bin = bins[g].begin()->first;
      hist.density.assign(static_cast<std::size_t>(bins[g].rbegin()->first - hist.first_bin + 1), 0.0);
      for (const auto& [b, c] : bins[g])
        hist.density[static_cast<std::size_t>(b - hist.first_bin)] =
            static_cast<double>(c) / (static_cast<double>(counts[g]) * width);
    }
    out.push_back(std::move(hist));
  }
  return out;
}

double histogram_l1(const Histogram& a, const Histogram& b) {
  if (a.width != b.width || a.anchor != b.anchor) throw InvalidInput("histograms use different bins");
  if (a.empty && b.empty) return 0.0;
  if (a.empty) return b.mass();
  if (b.empty) return a.mass();
  const long lo = std::min(a.first_bin, b.first_bin);
  const long hi = std::max(a.first_bin + static_cast<long>(a.density.size()),
                           b.first_bin + static_cast<long>(b.density.size()));
  auto at = [](const Histogram& h, long j) {
    const long k = j - h.first_bin;
    return (k >= 0 && k < static_cast<long>(h.density.size())) ? h.density[static_cast<std::size_t>(k)] : 0.0;
  };
  double s = 0.0;
  for (long j = lo; j < hi; ++j) s += std::abs(at(a, j) - at(b, j));
  return s * a.width;
}

int age_band(double age) {
  if (age <= 30.0) return 0;
  if (age <= 45.0) return 1;
  return 2;
}

CompositionTable composition_table(const Panel& panel, ClassKind kind, const EntryAgeRule& ages) {
  CompositionTable t;
  t.kind = kind;
  std::vector<CompositionRow> rows;
  std::vector<double> female, educ[3], band[3];
  for (const auto& h : panel) {
    const auto& cls = kind == ClassKind::Mobility ? h.km : h.ky;
    if (!cls) throw InvalidInput("composition table needs attached classes (" + h.id + ")");
    if (*cls < 0) throw InvalidInput("negative class index for " + h.id);
    const auto k = static_cast<std::size_t>(*cls);
    if (rows.size() <= k) rows.resize(k + 1);
    auto& r = rows[k];
    ++r.count;
    r.female += h.zf.female ? 1.0 : 0.0;
    r.educ[static_cast<std::size_t>(h.zf.educ)] += 1.0;
    r.age_band[static_cast<std::size_t>(age_band(ages.age_at_first(h.zf)))] += 1.0;
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto& r = rows[k];
    r.cls = static_cast<int>(k);
    r.share = panel.empty() ? 0.0 : static_cast<double>(r.count) / static_cast<double>(panel.size());
    if (r.count == 0) continue;
    const double c = static_cast<double>(r.count);
    r.female /= c;
    for (auto& v : r.educ) v /= c;
    for (auto& v : r.age_band) v /= c;
  }
  t.rows = std::move(rows);
  return t;
}

namespace {

struct MomentSums {
  std::array<double, kNumStates> m1{}, m2{}, w{};
};

void add_moments(MomentSums& s, const MomentSums& p) {
  for (int a = 0; a < kNumStates; ++a) {
    s.m1[a] += p.m1[a];
    s.m2[a] += p.m2[a];
    s.w[a] += p.w[a];
  }
}

StateWageMoments finish(const MomentSums& s) {
  StateWageMoments out;
  for (int a = 1; a < kNumStates; ++a) {
    out.weight[a] = s.w[a];
    if (!(s.w[a] > 0.0)) continue;
    out.mean[a] = s.m1[a] / s.w[a];
    out.sd[a] = std::sqrt(std::max(0.0, s.m2[a] / s.w[a] - out.mean[a] * out.mean[a]));
  }
  return out;
}

template <typename WeightFn>
StateWageMoments wage_moments(const Panel& panel, int km_count, int ky_count, const IncomeParams& theta_y,
                              WeightFn&& weight) {
  const std::size_t n = panel.size();
  MomentSums s = map_reduce(
      num_partitions(n), MomentSums{},
      [&](std::size_t p, MomentSums& acc) {
        for (std::size_t i = p * kPartitionSize; i < part_end(p, n); ++i) {
          const auto& h = panel[i];
          for (const auto& y : h.years) {
            if (!is_employed(y.state)) continue;
            const int a = code(y.state);
            double m1 = 0.0, m2 = 0.0;
            for (int km = 0; km < km_count; ++km)
              for (int ky = 0; ky < ky_count; ++ky) {
                const double w = weight(i, km, ky);
                if (w == 0.0) continue;
                const double mu = income_mean(y.state, y.zv, h.zf, ky, theta_y);
                const double sd = income_sd(y.state, y.zv, h.zf, km, ky, theta_y);
                m1 += w * mu;
                m2 += w * (sd * sd + mu * mu);
              }
            acc.m1[a] += m1;
            acc.m2[a] += m2;
            acc.w[a] += 1.0;
          }
        }
      },
      add_moments);
  return finish(s);
}

}  // namespace

StateWageMoments posterior_wage_moments(const Panel& panel, const MobilityParams& theta_m, const IncomeParams& theta_y) {
  const JointPosterior post = e_step_joint(panel, theta_m, theta_y);
  return wage_moments(panel, post.num_mobility, post.num_income, theta_y,
                      [&](std::size_t i, int km, int ky) { return post.at(static_cast<Eigen::Index>(i), km, ky); });
}

StateWageMoments class_wage_moments(const Panel& panel, const IncomeParams& theta_y) {
  for (const auto& h : panel)
    if (!h.km || !h.ky) throw InvalidInput("class wage moments need attached classes (" + h.id + ")");
  return wage_moments(panel, theta_y.num_mobility_classes, theta_y.num_classes(), theta_y,
                      [&](std::size_t i, int km, int ky) { return (*panel[i].km == km && *panel[i].ky == ky) ? 1.0 : 0.0; });
}

std::vector<int> align_classes(const Eigen::MatrixXd& weights, const std::vector<int>& true_classes, int num_true) {
  const int k = static_cast<int>(weights.cols());
  if (static_cast<std::size_t>(weights.rows()) != true_classes.size()) throw InvalidInput("weights/classes length mismatch");
  if (k != num_true) throw InvalidInput("alignment needs equal class counts");
  if (k > 8) throw InvalidInput("alignment limited to 8 classes");
  Eigen::MatrixXd confusion = Eigen::MatrixXd::Zero(k, k);  // estimated x true
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    const int c = true_classes[static_cast<std::size_t>(i)];
    if (c < 0 || c >= k) throw InvalidInput("true class out of range");
    confusion.col(c) += weights.row(i).transpose();
  }
  std::vector<int> perm(static_cast<std::size_t>(k)), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_score = -1.0;
  do {
    double s = 0.0;
    for (int e = 0; e < k; ++e) s += confusion(e, perm[static_cast<std::size_t>(e)]);
    if (s > best_score) {
      best_score = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::string to_csv(const TransitionMatrix& m, const std::string& label) {
  std::ostringstream os;
  os << "label,from,to,prob,count,empty_row\n";
  for (int a = 0; a < kNumStates; ++a)
    for (int b = 0; b < kNumStates; ++b)
      os << label << ',' << a << ',' << b << ',' << fmt(m.prob(a, b)) << ',' << fmt(m.counts(a, b)) << ','
         << (m.empty_row[a] ? 1 : 0) << '\n';
  for (int b = 0; b < kNumStates; ++b)
    os << label << ",occupancy," << b << ',' << fmt(m.occupancy(b)) << ',' << fmt(m.occupancy(b) * m.observations)
       << ",0\n";
  return os.str();
}

std::string to_csv(const std::vector<Histogram>& hs) {
  std::ostringstream os;
  os << "group,bin_lo,bin_hi,density,count,empty\n";
  for (const auto& h : hs) {
    if (h.empty) {
      os << h.group << ",,,,0,1\n";
      continue;
    }
    for (std::size_t j = 0; j < h.density.size(); ++j) {
      const long b = h.first_bin + static_cast<long>(j);
      os << h.group << ',' << fmt(h.anchor + h.width * static_cast<double>(b)) << ','
         << fmt(h.anchor + h.width * static_cast<double>(b + 1)) << ',' << fmt(h.density[j]) << ',' << h.count
         << ",0\n";
    }
  }
  return os.str();
}

std::string to_csv(const CompositionTable& t) {
  std::ostringstream os;
  os << "kind,class,count,share,female,educ_low,educ_medium,educ_high,age_le30,age_31_45,age_gt45\n";
  const char* kind = t.kind == ClassKind::Mobility ? "km" : "ky";
  for (const auto& r : t.rows) {
    os << kind << ',' << r.cls << ',' << r.count << ',' << fmt(r.share) << ',' << fmt(r.female);
    for (double v : r.educ) os << ',' << fmt(v);
    for (double v : r.age_band) os << ',' << fmt(v);
    os << '\n';
  }
  return os.str();
}

std::string compare_report(const Panel& a, const Panel& b, double bin_width) {
  std::ostringstream os;
  const std::pair<const char*, PersonFilter> groups[] = {
      {"aggregate", {}},
      {"men", [](const IndividualHistory& h) { return !h.zf.female; }},
      {"women", [](const IndividualHistory& h) { return h.zf.female; }},
  };
  std::ostringstream dist;
  dist << "measure,group,value\n";
  for (const auto& [name, filter] : groups) {
    const auto ma = transition_matrix(a, filter);
    const auto mb = transition_matrix(b, filter);
    os << "# transitions " << name << " a\n" << to_csv(ma, std::string(name) + "/a");
    os << "# transitions " << name << " b\n" << to_csv(mb, std::string(name) + "/b");
    dist << "matrix_sup," << name << ',' << fmt(matrix_distance(ma, mb)) << '\n';
  }
  std::vector<HistogramGroup> hist_groups = {HistogramGroup::All, HistogramGroup::State, HistogramGroup::Sector,
                                             HistogramGroup::Gender};
  const auto has_ky = [](const Panel& p) {
    return !p.empty() && std::all_of(p.begin(), p.end(), [](const IndividualHistory& h) { return h.ky.has_value(); });
  };
  const auto has_km = [](const Panel& p) {
    return !p.empty() && std::all_of(p.begin(), p.end(), [](const IndividualHistory& h) { return h.km.has_value(); });
  };
  if (has_ky(a) && has_ky(b)) hist_groups.push_back(HistogramGroup::IncomeClass);
  for (auto g : hist_groups) {
    auto ha = wage_histogram(a, bin_width, g);
    auto hb = wage_histogram(b, bin_width, g);
    std::map<std::string, const Histogram*> by_b;
    for (const auto& h : hb) by_b[h.group] = &h;
    for (const auto& h : ha) {
      auto it = by_b.find(h.group);
      if (it == by_b.end()) continue;
      dist << "histogram_l1," << h.group << ',' << fmt(histogram_l1(h, *it->second)) << '\n';
    }
    os << "# histograms " << to_string(g) << " a\n" << to_csv(ha);
    os << "# histograms " << to_string(g) << " b\n" << to_csv(hb);
  }
  if (has_km(a) && has_km(b)) {
    os << "# composition km a\n" << to_csv(composition_table(a, ClassKind::Mobility));
    os << "# composition km b\n" << to_csv(composition_table(b, ClassKind::Mobility));
  }
  if (has_ky(a) && has_ky(b)) {
    os << "# composition ky a\n" << to_csv(composition_table(a, ClassKind::Income));
    os << "# composition ky b\n" << to_csv(composition_table(b, ClassKind::Income));
  }
  os << "# distances\n" << dist.str();
  return os.str();
}

}  // namespace labdyn
