#include "bondlab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bondlab {

namespace {

constexpr double kKernelClamp = 1e-12;  // lambda < clamp * lambda_1 is kernel
constexpr double kClusterRel = 1e-8;
// Components below this are treated as an exact zero when scanning the
// standard basis: the construction is stated in exact arithmetic, and a
// floor well above eigenvector perturbation noise keeps the selected basis
// order (hence g0, g1) stable under 1e-12 operator perturbations.
constexpr double kProjectionFloor = 1e-4;

}  // namespace

std::vector<Index> SpectralDecomposition::kernel_indices() const {
  std::vector<Index> out;
  for (Index i = 0; i < eigenvalues.size(); ++i)
    if (eigenvalues[i] == 0.0) out.push_back(i);
  return out;
}

SpectralDecomposition decompose_psd(const Mat& K) {
  if (K.rows() != K.cols()) throw InvalidInput("decompose_psd: not square");
  const double scale = std::max(1.0, K.cwiseAbs().maxCoeff());
  const double asym = (K - K.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * scale)
    throw InvalidInput("decompose_psd: asymmetry beyond tolerance");

  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (K + K.transpose()));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("decompose_psd: eigensolver failed");

  const Index n = K.rows();
  SpectralDecomposition d;
  d.eigenvalues.resize(n);
  d.eigenvectors.resize(n, n);
  // Eigen returns ascending order; flip to descending.
  for (Index i = 0; i < n; ++i) {
    d.eigenvalues[i] = es.eigenvalues()[n - 1 - i];
    d.eigenvectors.col(i) = es.eigenvectors().col(n - 1 - i);
  }

  const double lam1 = std::max(0.0, d.eigenvalues[0]);
  if (d.eigenvalues[n - 1] < -1e-10 * std::max(1.0, lam1))
    throw InvalidInput("decompose_psd: matrix is not PSD");
  for (Index i = 0; i < n; ++i) {
    if (d.eigenvalues[i] < kKernelClamp * lam1) d.eigenvalues[i] = 0.0;
  }

  // deterministic sign: largest-magnitude entry positive
  for (Index i = 0; i < n; ++i) {
    Index arg = 0;
    d.eigenvectors.col(i).cwiseAbs().maxCoeff(&arg);
    if (d.eigenvectors(arg, i) < 0.0) d.eigenvectors.col(i) *= -1.0;
  }

  d.cluster_tol = kClusterRel * std::max(lam1, 1e-300);
  Index i = 0;
  while (i < n) {
    std::vector<Index> cluster{i};
    Index j = i + 1;
    while (j < n && d.eigenvalues[i] - d.eigenvalues[j] <= d.cluster_tol) {
      cluster.push_back(j);
      ++j;
    }
    d.clusters.push_back(std::move(cluster));
    i = j;
  }
  return d;
}

Mat functional_calculus(const SpectralDecomposition& d,
                        const std::function<double(double)>& f) {
  Vec fl(d.size());
  for (Index i = 0; i < d.size(); ++i) {
    const double v = f(d.eigenvalues[i]);
    if (!std::isfinite(v))
      throw std::domain_error(
          "functional_calculus: f undefined at eigenvalue " +
          std::to_string(d.eigenvalues[i]));
    fl[i] = v;
  }
  return d.eigenvectors * fl.asDiagonal() * d.eigenvectors.transpose();
}

PolarIsometry polar_isometry(const Mat& B, const HSpace& space) {
  if (B.rows() != space.size())
    throw InvalidInput("polar_isometry: column length does not match grid");
  PolarIsometry p;
  p.A = B.transpose() * space.gram() * B;
  p.decomp = decompose_psd(p.A);

  const Index n = p.A.rows();
  Vec inv_sqrt = Vec::Zero(n);
  Vec proj = Vec::Zero(n);
  for (Index i = 0; i < n; ++i) {
    if (p.decomp.eigenvalues[i] > 0.0) {
      inv_sqrt[i] = 1.0 / std::sqrt(p.decomp.eigenvalues[i]);
      proj[i] = 1.0;
      ++p.rank;
    }
  }
  const Mat& V = p.decomp.eigenvectors;
  p.S = B * (V * inv_sqrt.asDiagonal() * V.transpose());
  p.positive_projector = V * proj.asDiagonal() * V.transpose();
  return p;
}

Vec polar_apply(const PolarIsometry& p, const Vec& x) {
  const Vec px = p.positive_projector * x;
  const double drop = (x - px).norm();
  if (drop > 1e-8 * std::max(1.0, x.norm()))
    throw std::range_error(
        "polar_apply: vector has mass outside the positive eigenspace");
  return p.S * px;
}

Vec min_norm_solve(const Mat& K, const Vec& y) {
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(K);
  return cod.solve(y);
}

namespace {

// Schmidt orthonormalization of the projected standard basis inside one
// eigencluster; returns v_1 + ... + v_m.
Vec cluster_h(const SpectralDecomposition& d,
              const std::vector<Index>& cluster) {
  const Index n = d.size();
  const Mat Vc = d.eigenvectors(Eigen::all, cluster);
  const Index m = static_cast<Index>(cluster.size());
  Mat basis(n, m);
  Index found = 0;
  Vec h = Vec::Zero(n);
  for (Index u = 0; u < n && found < m; ++u) {
    // project e_u onto the cluster eigenspace, then against what we have
    Vec cand = Vc * (Vc.transpose().col(u));
    for (Index b = 0; b < found; ++b)
      cand -= basis.col(b).dot(cand) * basis.col(b);
    const double nn = cand.norm();
    if (nn > kProjectionFloor) {
      basis.col(found) = cand / nn;
      h += basis.col(found);
      ++found;
    }
  }
  return h;
}

}  // namespace

ObstructionResult construct_obstructions(const Mat& K) {
  ObstructionResult out;
  const Index n = K.rows();

  auto build_g1 = [](const Mat& Kn) -> std::pair<Vec, Vec> {
    SpectralDecomposition d = decompose_psd(Kn);
    const Index m = Kn.rows();

    // g0: normalized kernel projection of the first standard basis vector
    // that meets the kernel.
    Vec g0 = Vec::Zero(m);
    const auto kernel = d.kernel_indices();
    if (!kernel.empty()) {
      std::vector<Index> kc(kernel.begin(), kernel.end());
      const Mat Vk = d.eigenvectors(Eigen::all, kc);
      for (Index u = 0; u < m; ++u) {
        Vec cand = Vk * (Vk.transpose().col(u));
        if (cand.norm() > kProjectionFloor) {
          g0 = cand / cand.norm();
          break;
        }
      }
    }

    Vec g1p = g0;
    SpectralDecomposition dd = std::move(d);
    for (const auto& cluster : dd.clusters) {
      const double lam = dd.eigenvalues[cluster.front()];
      if (lam == 0.0) continue;
      g1p += lam * cluster_h(dd, cluster);
    }
    const double nn = g1p.norm();
    if (nn == 0.0)
      return {g0, Vec::Zero(m)};  // K = 0 with full kernel handled by caller
    return {g0, Vec(g1p / nn)};
  };

  auto [g0full, g1full] = build_g1(K);
  out.g0 = g0full;
  out.g1 = g1full;

  // Doubling sweep of leading principal truncations, smallest 8.
  std::vector<Index> sweep;
  for (Index m = std::min<Index>(8, n); m <= n; m *= 2) {
    sweep.push_back(m);
    if (m == n) break;
    if (m * 2 > n) {
      sweep.push_back(n);
      break;
    }
  }
  for (Index m : sweep) {
    const Mat Km = K.topLeftCorner(m, m);
    const Vec g1m = build_g1(Km).second;
    const Vec z = min_norm_solve(Km, g1m);
    out.preimage_norm_curve.emplace_back(m, z.norm());
  }
  return out;
}

}  // namespace bondlab
