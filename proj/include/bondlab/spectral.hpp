#pragma once

#include <functional>
#include <vector>

#include "bondlab/curve_spaces.hpp"
#include "bondlab/types.hpp"

namespace bondlab {

// Spectral machinery for truncated compact operators: PSD eigensystems with a
// deterministic sign and clustering convention, functional calculus, the
// polar-decomposition isometry, and the constructive kernel / out-of-range
// directions used to witness non-attainability.

struct SpectralDecomposition {
  Vec eigenvalues;   // descending, clamped at zero
  Mat eigenvectors;  // orthonormal columns, matching order
  std::vector<std::vector<Index>> clusters;  // indices grouped by equal value
  double cluster_tol = 0.0;

  Index size() const { return eigenvalues.size(); }
  /// Indices with eigenvalue treated as exactly zero.
  std::vector<Index> kernel_indices() const;
};

/// Eigensystem of a symmetric PSD matrix. Asymmetry beyond 1e-12 (relative)
/// is rejected; eigenvalues below -1e-10 * scale are rejected, small negative
/// ones are clamped to zero. Each eigenvector is normalized so its largest-
/// magnitude entry is positive.
SpectralDecomposition decompose_psd(const Mat& K);

/// V f(Lambda) V'. Throws std::domain_error naming the eigenvalue if f is not
/// finite there.
Mat functional_calculus(const SpectralDecomposition& d,
                        const std::function<double(double)>& f);

struct PolarIsometry {
  Mat A;               // B' G B
  SpectralDecomposition decomp;  // of A
  Mat S;               // B A^{-1/2} on the positive eigenspace
  Mat positive_projector;        // onto the positive eigenspace of A
  Index rank = 0;
};

/// Polar factor of B as an operator from factor space into the curve space
/// with inner product `gram`: A = B' G B and S = B A^{-1/2}, the latter
/// restricted to the positive eigenspace of A where it is an isometry.
PolarIsometry polar_isometry(const Mat& B, const HSpace& space);

/// Apply S to x. x must lie in the positive eigenspace (up to 1e-8 of its
/// norm), otherwise a range error is thrown.
Vec polar_apply(const PolarIsometry& p, const Vec& x);

struct ObstructionResult {
  Vec g0;  // unit kernel direction, or zero when the kernel is trivial
  Vec g1;  // unit vector outside the range of K by construction
  // (truncation level N', minimal-norm solution norm of K z = g1 at N')
  std::vector<std::pair<Index, double>> preimage_norm_curve;
};

/// Constructive obstruction directions for a symmetric PSD truncation K.
/// g0 projects the first standard basis vector that meets the kernel; g1
/// normalizes sum_lambda lambda h(K, lambda) + g0 where h Schmidt-
/// orthonormalizes the standard basis inside each eigencluster. The preimage
/// curve records minimal-norm least-squares solutions of K z = g1 over a
/// doubling sweep of leading principal truncations, the finite-dimensional
/// witness of g1 escaping the range: every truncation is solvable, but the
/// preimage norm grows without bound.
ObstructionResult construct_obstructions(const Mat& K);

/// Minimal-norm least-squares solution of K z = y.
Vec min_norm_solve(const Mat& K, const Vec& y);

}  // namespace bondlab
