#pragma once

// Random instance generators and deliberately naive reference implementations used as oracles.
// The references favour plain loops over std::vector<double> and avoid the library's helpers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "xmatch/xmatch.hpp"

namespace xt {

using namespace xmatch;
using Vec = std::vector<double>;

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Random one-to-one partial matching of size rows x cols.
inline BinaryMatrix random_one_to_one(int rows, int cols, std::mt19937_64& rng, double density = 0.7) {
  BinaryMatrix m = BinaryMatrix::Zero(rows, cols);
  std::vector<int> perm(static_cast<std::size_t>(cols));
  for (int j = 0; j < cols; ++j) perm[static_cast<std::size_t>(j)] = j;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::bernoulli_distribution keep(density);
  for (int i = 0; i < std::min(rows, cols); ++i)
    if (keep(rng)) m(i, perm[static_cast<std::size_t>(i)]) = 1;
  // Shuffle rows too so matched rows are not always the leading ones.
  std::vector<int> rp(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) rp[static_cast<std::size_t>(i)] = i;
  std::shuffle(rp.begin(), rp.end(), rng);
  BinaryMatrix out(rows, cols);
  for (int i = 0; i < rows; ++i) out.row(i) = m.row(rp[static_cast<std::size_t>(i)]);
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("xmatch-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// ---- reference formulas -------------------------------------------------------------------

inline Vec softmax_ref(const Classifier& w, const Eigen::VectorXd& f) {
  const auto c = static_cast<std::size_t>(w.weight.cols());
  Vec z(c);
  for (std::size_t k = 0; k < c; ++k) {
    double s = w.bias(static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < f.size(); ++i) s += w.weight(i, static_cast<Eigen::Index>(k)) * f(i);
    z[k] = s;
  }
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : z) sum += (v = std::exp(v - mx));
  for (double& v : z) v /= sum;
  return z;
}

inline double ce_ref(const Classifier& w, const Eigen::MatrixXd& f, const std::vector<int>& y) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0) continue;
    const Vec p = softmax_ref(w, f.col(static_cast<Eigen::Index>(i)));
    s += -std::log(std::min(std::max(p[static_cast<std::size_t>(y[i])], 1e-12), 1.0 - 1e-12));
    ++n;
  }
  return n == 0 ? 0.0 : s / n;
}

inline double dist_ref(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < a.rows(); ++k) s += (a(k, i) - b(k, j)) * (a(k, i) - b(k, j));
  return std::sqrt(s);
}

/// WRT by enumerating positive and negative sets per anchor without any max-shift.
inline double wrt_ref(const BatchView& b, bool cross) {
  struct S {
    bool vis;
    int label;
    int matched;
    Eigen::VectorXd f;
  };
  std::vector<S> all;
  for (std::size_t i = 0; i < b.labels_vis.size(); ++i)
    all.push_back({true, b.labels_vis[i], b.matched_vis.empty() ? -1 : b.matched_vis[i],
                   b.emb_vis.col(static_cast<Eigen::Index>(i))});
  for (std::size_t i = 0; i < b.labels_ir.size(); ++i)
    all.push_back({false, b.labels_ir[i], -1, b.emb_ir.col(static_cast<Eigen::Index>(i))});
  double sums[2] = {0, 0};
  int counts[2] = {0, 0};
  for (std::size_t a = 0; a < all.size(); ++a) {
    Vec dp;
    Vec dn;
    for (std::size_t o = 0; o < all.size(); ++o) {
      if (o == a) continue;
      const double d = (all[a].f - all[o].f).norm();
      if (all[a].vis == all[o].vis) {
        (all[a].label == all[o].label ? dp : dn).push_back(d);
      } else if (cross) {
        const S& v = all[a].vis ? all[a] : all[o];
        const S& r = all[a].vis ? all[o] : all[a];
        (v.matched >= 0 && v.matched == r.label ? dp : dn).push_back(d);
      }
    }
    if (dp.empty() || dn.empty()) continue;
    double zp = 0, sp = 0, zn = 0, sn = 0;
    for (double d : dp) zp += std::exp(d);
    for (double d : dp) sp += std::exp(d) / zp * d;
    for (double d : dn) zn += std::exp(-d);
    for (double d : dn) sn += std::exp(-d) / zn * d;
    const int side = all[a].vis ? 0 : 1;
    sums[side] += std::log(1.0 + std::exp(sp - sn));
    ++counts[side];
  }
  double total = 0.0;
  for (int s = 0; s < 2; ++s)
    if (counts[s] > 0) total += sums[s] / counts[s];
  return total;
}

inline double weak_ref(const Vec& p, const std::vector<int>& k) {
  double loss = 0.0;
  for (std::size_t l = 0; l < p.size(); ++l) {
    bool below_all = true;
    for (int c : k)
      if (!(p[l] < p[static_cast<std::size_t>(c)])) below_all = false;
    if (below_all) loss += -std::log(1.0 - p[l] + 1e-10);
  }
  return loss;
}

inline double entropy_ref(const Vec& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

/// Expert-consistency loss straight from its definition.
inline double homo_ref(const BatchView& b, const ModelState& m) {
  const PrototypeBank& bank = *b.prototypes;
  auto side = [&](bool vis, double& loss, double& mean_h) {
    const Classifier& w = vis ? m.expert_vis : m.expert_ir;
    const auto& labels = vis ? b.labels_vis : b.labels_ir;
    const auto& matched = vis ? b.matched_vis : b.matched_ir;
    const auto& emb = vis ? b.emb_vis : b.emb_ir;
    const Eigen::MatrixXd& protos = vis ? bank.protos_ir : bank.protos_vis;
    const auto& init = vis ? bank.initialized_ir : bank.initialized_vis;
    int n = 0;
    double sq = 0.0;
    double h = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (matched.empty() || matched[i] < 0 || !init[static_cast<std::size_t>(matched[i])]) continue;
      const Vec ps = softmax_ref(w, emb.col(static_cast<Eigen::Index>(i)));
      const Vec pc = softmax_ref(w, protos.col(matched[i]));
      for (std::size_t l = 0; l < ps.size(); ++l) sq += (ps[l] - pc[l]) * (ps[l] - pc[l]);
      h += entropy_ref(pc);
      ++n;
    }
    loss = n == 0 ? 0.0 : sq / (n * static_cast<double>(w.weight.cols()));
    mean_h = n == 0 ? 0.0 : h / n;
    return n;
  };
  double lv, hv, lr, hr;
  const int nv = side(true, lv, hv);
  const int nr = side(false, lr, hr);
  double wv = 0.5;
  double wr = 0.5;
  if (nv > 0 && nr == 0) wv = 1, wr = 0;
  else if (nv == 0 && nr > 0) wv = 0, wr = 1;
  else if (nv > 0 && nr > 0 && hv + hr > 0) wv = hv / (hv + hr), wr = hr / (hv + hr);
  return wv * lv + wr * lr;
}

// ---- CRE references ----------------------------------------------------------------------

inline BinaryMatrix consistent_ref(const BinaryMatrix& vr, const BinaryMatrix& rv) {
  BinaryMatrix out = BinaryMatrix::Zero(vr.rows(), vr.cols());
  for (int i = 0; i < vr.rows(); ++i)
    for (int j = 0; j < vr.cols(); ++j) out(i, j) = (vr(i, j) == 1 && rv(j, i) == 1) ? 1 : 0;
  return out;
}

inline BinaryMatrix single_ref(const BinaryMatrix& fwd, const BinaryMatrix& rev) {
  BinaryMatrix out = BinaryMatrix::Zero(fwd.rows(), fwd.cols());
  for (int i = 0; i < fwd.rows(); ++i)
    for (int j = 0; j < fwd.cols(); ++j) {
      if (fwd(i, j) != 1) continue;
      bool untouched = true;
      for (int k = 0; k < rev.cols(); ++k)
        if (rev(j, k)) untouched = false;
      for (int k = 0; k < rev.rows(); ++k)
        if (rev(k, i)) untouched = false;
      out(i, j) = untouched ? 1 : 0;
    }
  return out;
}

/// Greedy matching by repeated full scans for the largest count among free rows and columns.
inline BinaryMatrix cps_ref(const Eigen::MatrixXi& c, int min_count = 1) {
  BinaryMatrix out = BinaryMatrix::Zero(c.rows(), c.cols());
  std::vector<bool> ru(static_cast<std::size_t>(c.rows()), false);
  std::vector<bool> cu(static_cast<std::size_t>(c.cols()), false);
  while (true) {
    int best = -1, bi = -1, bj = -1;
    for (int i = 0; i < c.rows(); ++i)
      for (int j = 0; j < c.cols(); ++j)
        if (!ru[static_cast<std::size_t>(i)] && !cu[static_cast<std::size_t>(j)] && c(i, j) >= min_count &&
            c(i, j) > best)
          best = c(i, j), bi = i, bj = j;
    if (bi < 0) break;
    out(bi, bj) = 1;
    ru[static_cast<std::size_t>(bi)] = true;
    cu[static_cast<std::size_t>(bj)] = true;
  }
  return out;
}

// ---- metric references -------------------------------------------------------------------

struct MetricsRef {
  Vec cmc;
  double map = 0.0;
  double minp = 0.0;
  int used = 0;
};

inline MetricsRef metrics_ref(const std::vector<std::vector<char>>& rel) {
  MetricsRef r;
  std::size_t len = 0;
  for (const auto& q : rel) len = std::max(len, q.size());
  r.cmc.assign(len, 0.0);
  for (const auto& q : rel) {
    int nrel = 0;
    for (char x : q) nrel += x ? 1 : 0;
    if (nrel == 0) continue;
    ++r.used;
    for (std::size_t k = 0; k < len; ++k) {
      bool hit = false;
      for (std::size_t t = 0; t <= k && t < q.size(); ++t) hit = hit || q[t];
      if (hit) r.cmc[k] += 1.0;
    }
    double ap = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (!q[k]) continue;
      int seen = 0;
      for (std::size_t t = 0; t <= k; ++t) seen += q[t] ? 1 : 0;
      ap += static_cast<double>(seen) / static_cast<double>(k + 1);
    }
    r.map += ap / nrel;
    std::size_t last = 0;
    for (std::size_t k = 0; k < q.size(); ++k)
      if (q[k]) last = k;
    r.minp += static_cast<double>(nrel) / static_cast<double>(last + 1);
  }
  if (r.used > 0) {
    for (double& v : r.cmc) v /= r.used;
    r.map /= r.used;
    r.minp /= r.used;
  }
  return r;
}

// ---- gradient checking ---------------------------------------------------------------------

/// Small model: in -> 4 (front) -> 4 -> 3 (trunk), three classifiers.
inline ModelState small_model(int in, int cv, int cr, std::uint64_t seed, int front_layers = 1) {
  ModelConfig mc;
  mc.dims = {in, 4, 4, 3};
  mc.front_layers = front_layers;
  mc.shared_front_init = false;
  ModelState m = init_model(mc, cv, cr, seed);
  // Non-zero biases so their gradients are exercised.
  std::mt19937_64 rng(seed + 99);
  visit_params(
      [&](const std::string& name, bool, auto& t) {
        if (name.find("bias") != std::string::npos) t = random_matrix(t.rows(), t.cols(), rng, 0.3);
      },
      m);
  return m;
}

struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t params = 0;
  std::size_t checked = 0;
};

/// Central differences over every parameter of the model. An entry passes outright when
/// |a - n| <= floor; otherwise its error is |a - n| / max(|a|, |n|).
template <typename LossFn>
GradCheck check_model_gradient(const ModelState& model, const ModelState& analytic, LossFn&& loss, double h = 1e-5,
                               double floor = 1e-7) {
  GradCheck gc;
  ModelState probe = model;
  visit_params(
      [&](const std::string&, bool, auto& p, const auto& g) {
        for (Eigen::Index k = 0; k < p.size(); ++k) {
          const double orig = p.data()[k];
          p.data()[k] = orig + h;
          const double lp = loss(probe);
          p.data()[k] = orig - h;
          const double lm = loss(probe);
          p.data()[k] = orig;
          const double num = (lp - lm) / (2 * h);
          const double ana = g.data()[k];
          ++gc.params;
          gc.max_abs = std::max(gc.max_abs, std::abs(num - ana));
          if (std::max(std::abs(num), std::abs(ana)) > floor) ++gc.checked;
          if (std::abs(num - ana) <= floor) continue;
          gc.max_rel = std::max(gc.max_rel, std::abs(num - ana) / std::max(std::abs(num), std::abs(ana)));
        }
      },
      probe, analytic);
  return gc;
}

inline PrototypeBank initialized_bank(Eigen::Index d, int c, double momentum, std::mt19937_64& rng) {
  PrototypeBank b = empty_bank(d, c, c, momentum);
  b.protos_vis = random_matrix(d, c, rng);
  b.protos_ir = random_matrix(d, c, rng);
  std::fill(b.initialized_vis.begin(), b.initialized_vis.end(), 1);
  std::fill(b.initialized_ir.begin(), b.initialized_ir.end(), 1);
  return b;
}

inline std::vector<std::vector<char>> random_relevance(std::mt19937_64& rng, int queries, int gallery, double p) {
  std::bernoulli_distribution hit(p);
  std::vector<std::vector<char>> r(static_cast<std::size_t>(queries));
  for (auto& q : r) {
    q.resize(static_cast<std::size_t>(gallery));
    for (auto& x : q) x = hit(rng) ? 1 : 0;
  }
  return r;
}

struct Problem {
  ModelState model;
  Eigen::MatrixXd x_vis;
  Eigen::MatrixXd x_ir;
  BatchView view;
  PrototypeBank bank;
};

// P=2 identities x K=2 samples per modality over 3 identities each, with random correspondences.
inline Problem random_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Problem p;
  const int in = 3;
  const int c = 3;
  p.model = small_model(in, c, c, seed);
  p.x_vis = random_matrix(in, 4, rng);
  p.x_ir = random_matrix(in, 4, rng);
  auto& v = p.view;
  const int a = uniform_int(rng, 0, c - 1);
  const int b = (a + 1 + uniform_int(rng, 0, c - 2)) % c;
  v.labels_vis = {a, a, b, b};
  const int ra = uniform_int(rng, 0, c - 1);
  const int rb = (ra + 1 + uniform_int(rng, 0, c - 2)) % c;
  v.labels_ir = {ra, ra, rb, rb};
  // Per-identity annotations, as the trainer produces them.
  std::vector<int> pseudo(c), matched(c), matched_inv(c, kNoMatch);
  std::vector<std::vector<int>> conflicts(c);
  std::vector<int> perm = {0, 1, 2};
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int id = 0; id < c; ++id) {
    pseudo[id] = uniform_int(rng, 0, 3) == 0 ? kNoMatch : perm[id];
    matched[id] = uniform_int(rng, 0, 3) == 0 ? kNoMatch : perm[id];
    if (matched[id] != kNoMatch) matched_inv[matched[id]] = id;
    if (pseudo[id] == kNoMatch) conflicts[id] = {perm[id], perm[(id + 1) % c]};
  }
  // Identity a always carries a conflict set and an M_c partner so every term is active.
  pseudo[a] = kNoMatch;
  conflicts[a] = {perm[a], perm[(a + 1) % c]};
  if (matched[a] == kNoMatch) {
    matched[a] = perm[a];
    for (auto& inv : matched_inv)
      if (inv == a) inv = kNoMatch;
    matched_inv[perm[a]] = a;
  }
  for (int y : v.labels_vis) {
    v.pseudo_vis.push_back(pseudo[y]);
    v.matched_vis.push_back(matched[y]);
    v.conflicts_vis.push_back(conflicts[y]);
  }
  for (int y : v.labels_ir) v.matched_ir.push_back(matched_inv[y]);
  p.bank = empty_bank(p.model.embedding_dim(), c, c, 0.8);
  p.bank.protos_vis = random_matrix(p.model.embedding_dim(), c, rng);
  p.bank.protos_ir = random_matrix(p.model.embedding_dim(), c, rng);
  std::fill(p.bank.initialized_vis.begin(), p.bank.initialized_vis.end(), 1);
  std::fill(p.bank.initialized_ir.begin(), p.bank.initialized_ir.end(), 1);
  return p;
}

inline GradCheck check_problem(const Problem& p, const LossSpec& spec) {
  BatchView view = p.view;
  view.prototypes = &p.bank;
  const auto ev = evaluate_objective(p.model, p.x_vis, p.x_ir, view, spec, true);
  return check_model_gradient(p.model, ev.grad, [&](const ModelState& m) {
    return evaluate_objective(m, p.x_vis, p.x_ir, view, spec, false).total;
  });
}

}  // namespace xt
