//! Orthonormal eigenbasis of the Stokes operator on the periodic channel
//! T_a x (-1, 1) with no-slip walls.
//!
//! For wavenumber index k = 0 the eigenproblem reduces to the 1D Dirichlet
//! Laplacian acting on the horizontal velocity. For k != 0 it is the clamped
//! stream-function pencil
//!
//!   (D^2 - kappa^2)^2 psi = alpha (kappa^2 - D^2) psi,
//!   psi(+-1) = psi'(+-1) = 0,   kappa = 2 pi k / a,
//!
//! discretized by a Legendre-Galerkin method. Testing against a clamped test
//! function and integrating by parts yields the symmetric-definite pair
//!
//!   A_ij = int (phi_i'' - kappa^2 phi_i)(phi_j'' - kappa^2 phi_j),
//!   B_ij = int phi_i' phi_j' + kappa^2 int phi_i phi_j,
//!
//! which is solved through a Cholesky reduction to a standard symmetric
//! eigenproblem. The symmetric formulation keeps the pencil free of the
//! spurious modes that plague collocation discretizations of the fourth-order
//! problem; a two-resolution cross-check guards the retained eigenvalues.

use crate::error::{Error, Result};
use crate::quadrature::{eval_series, gauss_legendre, legendre_table};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Relative agreement required between the order-M and order-2M solves.
pub const REFINEMENT_TOL: f64 = 1e-10;

const CACHE_MAGIC: &str = "viscosim basis cache v1";

/// Channel geometry and discretization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGeometry {
    /// Period a of the horizontal direction.
    pub period: f64,
    /// Max |k| of retained Fourier modes.
    pub fourier_cutoff: usize,
    /// Number of wall-direction polynomial coefficients per profile.
    pub wall_order: usize,
    /// Number of retained basis modes J.
    pub basis_size: usize,
    /// Quadrature points in x1 (uniform, trapezoidal).
    pub n1: usize,
    /// Quadrature points in x2 (Gauss-Legendre).
    pub n2: usize,
}

impl ChannelGeometry {
    /// Geometry with grid sizes chosen so that all quadratic and cubic
    /// products of basis fields are integrated exactly.
    pub fn new(period: f64, fourier_cutoff: usize, wall_order: usize, basis_size: usize) -> Result<Self> {
        let n1 = (3 * fourier_cutoff + 2).max(8);
        let n2 = (3 * wall_order / 2 + 2).max(wall_order + 2);
        Self::with_grid(period, fourier_cutoff, wall_order, basis_size, n1, n2)
    }

    pub fn with_grid(
        period: f64,
        fourier_cutoff: usize,
        wall_order: usize,
        basis_size: usize,
        n1: usize,
        n2: usize,
    ) -> Result<Self> {
        let g = Self {
            period,
            fourier_cutoff,
            wall_order,
            basis_size,
            n1,
            n2,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.period > 0.0) {
            problems.push(format!("period must be positive, got {}", self.period));
        }
        if self.wall_order < 8 {
            problems.push(format!("wall order must be >= 8, got {}", self.wall_order));
        }
        if self.basis_size < 1 {
            problems.push("basis size must be >= 1".into());
        }
        if self.basis_size > self.total_modes() {
            problems.push(format!(
                "basis size {} exceeds the {} modes available at (K = {}, M = {})",
                self.basis_size,
                self.total_modes(),
                self.fourier_cutoff,
                self.wall_order
            ));
        }
        if self.n1 < (3 * self.fourier_cutoff).max(3) {
            problems.push(format!(
                "n1 = {} below the dealiasing margin 3K = {}",
                self.n1,
                3 * self.fourier_cutoff
            ));
        }
        if self.n2 < self.wall_order + 2 {
            problems.push(format!(
                "n2 = {} must be at least M + 2 = {}",
                self.n2,
                self.wall_order + 2
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Geometry(problems.join("; ")))
        }
    }

    /// Modes available from the (K, M) discretization: M - 2 Dirichlet modes
    /// at k = 0 plus a cos/sin pair for each of the M - 4 clamped profiles at
    /// every k in 1..=K.
    pub fn total_modes(&self) -> usize {
        let dir = self.wall_order.saturating_sub(2);
        let clamped = self.wall_order.saturating_sub(4);
        dir + 2 * clamped * self.fourier_cutoff
    }

    /// Content hash identifying the basis cache for this geometry.
    pub fn cache_key(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{}|a={:?}|K={}|M={}|J={}|n1={}|n2={}",
            CACHE_MAGIC,
            self.period,
            self.fourier_cutoff,
            self.wall_order,
            self.basis_size,
            self.n1,
            self.n2
        );
        let digest = Sha256::digest(s.as_bytes());
        hex::encode(&digest[..16])
    }
}

/// Horizontal symmetry of a mode: cosine-type or sine-type.
///
/// For k != 0 this is the trigonometric factor in x1 of the stream function;
/// for k = 0 it is the parity of the wall profile (even = cos, odd = sin).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Parity {
    Cos,
    Sin,
}

impl Parity {
    pub fn index(self) -> usize {
        match self {
            Parity::Cos => 0,
            Parity::Sin => 1,
        }
    }
}

/// One eigenmode of the Stokes operator.
#[derive(Debug, Clone)]
pub struct StokesMode {
    /// Non-negative wavenumber index; the +-k pair is encoded by parity.
    pub wavenumber: usize,
    pub parity: Parity,
    /// Eigenvalue alpha > 0.
    pub alpha: f64,
    /// Legendre coefficients (length M) of the wall profile: the stream
    /// function psi for k != 0, the horizontal velocity for k = 0.
    pub profile: Vec<f64>,
    /// Scale factor making the velocity field unit-norm in L^2(D).
    pub normalization: f64,
}

/// Velocity components and gradients of a reconstructed field on the
/// quadrature grid (flattened as i1 * n2 + i2).
#[derive(Debug, Clone)]
pub struct GridField {
    pub u1: DVector<f64>,
    pub u2: DVector<f64>,
    pub d1u1: DVector<f64>,
    pub d2u1: DVector<f64>,
    pub d1u2: DVector<f64>,
    pub d2u2: DVector<f64>,
}

/// The assembled orthonormal basis with cached grid evaluations.
pub struct StokesBasis {
    pub geometry: ChannelGeometry,
    pub modes: Vec<StokesMode>,
    /// Uniform x1 nodes.
    pub x1: Vec<f64>,
    /// Gauss-Legendre x2 nodes and weights.
    pub x2: Vec<f64>,
    pub w2: Vec<f64>,
    /// Combined quadrature weight per grid point.
    pub weights: DVector<f64>,
    // Grid evaluations, one column per mode.
    e1: DMatrix<f64>,
    e2: DMatrix<f64>,
    d1e1: DMatrix<f64>,
    d2e1: DMatrix<f64>,
    d1e2: DMatrix<f64>,
    d2e2: DMatrix<f64>,
}

/// Smallest `count` eigenpairs of the wall eigenproblem at wavenumber index k.
///
/// Profiles are returned as Legendre coefficient vectors of length M,
/// unnormalized, with the sign fixed so the largest coefficient is positive.
/// Each eigenvalue is cross-checked against a solve at order 2M; disagreement
/// beyond `REFINEMENT_TOL` is reported as a resolution error.
pub fn solve_wall_eigenproblem(
    k: usize,
    geometry: &ChannelGeometry,
    count: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    if k > geometry.fourier_cutoff {
        return Err(Error::Geometry(format!(
            "wavenumber index {k} exceeds cutoff {}",
            geometry.fourier_cutoff
        )));
    }
    let m = geometry.wall_order;
    let dim = if k == 0 { m - 2 } else { m - 4 };
    if count < 1 || count > dim {
        return Err(Error::Capacity {
            requested: count,
            available: dim,
        });
    }
    let kappa = 2.0 * std::f64::consts::PI * k as f64 / geometry.period;
    let coarse = wall_spectrum(k, kappa, m, count)?;
    let fine = wall_spectrum(k, kappa, 2 * m, count)?;
    for (i, (a_c, a_f)) in coarse.iter().map(|p| p.0).zip(fine.iter().map(|p| p.0)).enumerate() {
        let rel = (a_c - a_f).abs() / a_f.abs().max(f64::MIN_POSITIVE);
        if rel > REFINEMENT_TOL {
            return Err(Error::Resolution {
                order: m,
                index: i,
                rel,
                tol: REFINEMENT_TOL,
            });
        }
    }
    Ok(coarse)
}

/// Solve the order-`m` Galerkin pencil and return the `count` smallest
/// positive eigenpairs, the profile given as a Legendre series of degree < m.
fn wall_spectrum(k: usize, kappa: f64, m: usize, count: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let dim = if k == 0 { m - 2 } else { m - 4 };
    let nq = m + 4;
    let (xq, wq) = gauss_legendre(nq);

    // Trial functions phi_i and derivatives at the quadrature nodes.
    let mut phi = DMatrix::zeros(nq, dim);
    let mut dphi = DMatrix::zeros(nq, dim);
    let mut ddphi = DMatrix::zeros(nq, dim);
    for (q, &x) in xq.iter().enumerate() {
        let (p, dp, ddp) = legendre_table(dim, x);
        let (w, dw, ddw) = if k == 0 {
            (1.0 - x * x, -2.0 * x, -2.0)
        } else {
            let s = 1.0 - x * x;
            (s * s, -4.0 * x * s, 12.0 * x * x - 4.0)
        };
        for i in 0..dim {
            phi[(q, i)] = w * p[i];
            dphi[(q, i)] = dw * p[i] + w * dp[i];
            ddphi[(q, i)] = ddw * p[i] + 2.0 * dw * dp[i] + w * ddp[i];
        }
    }

    let mut amat = DMatrix::zeros(dim, dim);
    let mut bmat = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let (mut a, mut b) = (0.0, 0.0);
            for q in 0..nq {
                if k == 0 {
                    a += wq[q] * dphi[(q, i)] * dphi[(q, j)];
                    b += wq[q] * phi[(q, i)] * phi[(q, j)];
                } else {
                    let ri = ddphi[(q, i)] - kappa * kappa * phi[(q, i)];
                    let rj = ddphi[(q, j)] - kappa * kappa * phi[(q, j)];
                    a += wq[q] * ri * rj;
                    b += wq[q]
                        * (dphi[(q, i)] * dphi[(q, j)] + kappa * kappa * phi[(q, i)] * phi[(q, j)]);
                }
            }
            amat[(i, j)] = a;
            amat[(j, i)] = a;
            bmat[(i, j)] = b;
            bmat[(j, i)] = b;
        }
    }

    let pairs = generalized_symmetric_eig(&amat, &bmat)?;
    let mut out = Vec::with_capacity(count);
    for (alpha, coeffs) in pairs.into_iter().filter(|p| p.0.is_finite() && p.0 > 0.0) {
        // Evaluate psi at the quadrature nodes and project onto P_n.
        let mut series = vec![0.0; m];
        let mut psi_vals = vec![0.0; nq];
        for q in 0..nq {
            let mut v = 0.0;
            for i in 0..dim {
                v += coeffs[i] * phi[(q, i)];
            }
            psi_vals[q] = v;
        }
        for n in 0..m {
            let mut pn = 0.0;
            for (q, &x) in xq.iter().enumerate() {
                let (p, _, _) = legendre_table(n + 1, x);
                pn += wq[q] * psi_vals[q] * p[n];
            }
            series[n] = (n as f64 + 0.5) * pn;
        }
        fix_sign(&mut series);
        out.push((alpha, series));
        if out.len() == count {
            break;
        }
    }
    if out.len() < count {
        return Err(Error::Capacity {
            requested: count,
            available: out.len(),
        });
    }
    Ok(out)
}

fn fix_sign(series: &mut [f64]) {
    let mut best = 0usize;
    for (n, c) in series.iter().enumerate() {
        if c.abs() > series[best].abs() {
            best = n;
        }
    }
    if series[best] < 0.0 {
        for c in series.iter_mut() {
            *c = -*c;
        }
    }
}

/// Solve A x = alpha B x with A symmetric, B symmetric positive definite,
/// via Cholesky reduction. Eigenvectors are B-orthonormal; pairs are sorted
/// by ascending eigenvalue.
fn generalized_symmetric_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<(f64, Vec<f64>)>> {
    let dim = a.nrows();
    let chol = Cholesky::new(b.clone()).ok_or_else(|| {
        Error::Geometry("wall mass matrix is not positive definite (ill-conditioned order)".into())
    })?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Geometry("singular Cholesky factor".into()))?;
    let c_t = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::Geometry("singular Cholesky factor".into()))?;
    let c = 0.5 * (&c_t + c_t.transpose());
    let eig = SymmetricEigen::new(c);
    let lt = l.transpose();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(dim);
    for i in 0..dim {
        let yi = eig.eigenvectors.column(i).into_owned();
        let xi = lt
            .solve_upper_triangular(&yi)
            .ok_or_else(|| Error::Geometry("singular Cholesky factor".into()))?;
        pairs.push((eig.eigenvalues[i], xi.iter().copied().collect()));
    }
    pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    Ok(pairs)
}

/// Assemble the full basis: eigenpairs from all |k| <= K merged, sorted by
/// (alpha, |k|, parity), truncated to J modes, with grid evaluations.
pub fn assemble_basis(geometry: &ChannelGeometry) -> Result<StokesBasis> {
    geometry.validate()?;
    let m = geometry.wall_order;
    let j = geometry.basis_size;

    // Sizing pass: ungated spectra decide how many wall profiles each
    // wavenumber contributes to the lowest-J selection, so the refinement
    // gate only has to certify eigenvalues that end up in the basis.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..=geometry.fourier_cutoff {
        let dim = if k == 0 { m - 2 } else { m - 4 };
        let count = dim.min(j);
        if count == 0 {
            continue;
        }
        let kappa = 2.0 * std::f64::consts::PI * k as f64 / geometry.period;
        for (idx, (alpha, _)) in wall_spectrum(k, kappa, m, count)?.iter().enumerate() {
            for _ in 0..if k == 0 { 1 } else { 2 } {
                candidates.push((*alpha, k, idx));
            }
        }
    }
    if candidates.len() < j {
        return Err(Error::Capacity {
            requested: j,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut need = vec![0usize; geometry.fourier_cutoff + 1];
    for &(_, k, idx) in candidates.iter().take(j) {
        need[k] = need[k].max(idx + 1);
    }

    let mut modes: Vec<StokesMode> = Vec::new();
    for (k, &count) in need.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let pairs = solve_wall_eigenproblem(k, geometry, count)?;
        for (alpha, profile) in pairs {
            if k == 0 {
                modes.push(StokesMode {
                    wavenumber: 0,
                    parity: profile_parity(&profile),
                    alpha,
                    profile,
                    normalization: 0.0,
                });
            } else {
                for parity in [Parity::Cos, Parity::Sin] {
                    modes.push(StokesMode {
                        wavenumber: k,
                        parity,
                        alpha,
                        profile: profile.clone(),
                        normalization: 0.0,
                    });
                }
            }
        }
    }
    modes.sort_by(|a, b| {
        a.alpha
            .partial_cmp(&b.alpha)
            .unwrap()
            .then(a.wavenumber.cmp(&b.wavenumber))
            .then(a.parity.cmp(&b.parity))
    });
    if modes.len() < j {
        return Err(Error::Capacity {
            requested: j,
            available: modes.len(),
        });
    }
    modes.truncate(j);
    StokesBasis::finish(geometry.clone(), modes)
}

/// Parity of a k = 0 profile from its dominant Legendre coefficient.
fn profile_parity(profile: &[f64]) -> Parity {
    let mut best = 0usize;
    for (n, c) in profile.iter().enumerate() {
        if c.abs() > profile[best].abs() {
            best = n;
        }
    }
    if best % 2 == 0 {
        Parity::Cos
    } else {
        Parity::Sin
    }
}

impl StokesBasis {
    /// Compute normalizations and grid evaluations for an ordered mode list.
    fn finish(geometry: ChannelGeometry, mut modes: Vec<StokesMode>) -> Result<Self> {
        let (n1, n2) = (geometry.n1, geometry.n2);
        let a = geometry.period;
        let x1: Vec<f64> = (0..n1).map(|i| a * i as f64 / n1 as f64).collect();
        let (x2, w2) = gauss_legendre(n2);
        let w1 = a / n1 as f64;

        // Wall-direction normalization integrals.
        for mode in modes.iter_mut() {
            let kappa = 2.0 * std::f64::consts::PI * mode.wavenumber as f64 / a;
            let (mut ipsi2, mut idpsi2) = (0.0, 0.0);
            for (q, &x) in x2.iter().enumerate() {
                let (v, d, _) = eval_series(&mode.profile, x);
                ipsi2 += w2[q] * v * v;
                idpsi2 += w2[q] * d * d;
            }
            let norm2 = if mode.wavenumber == 0 {
                a * ipsi2
            } else {
                0.5 * a * (idpsi2 + kappa * kappa * ipsi2)
            };
            if !(norm2 > 0.0) {
                return Err(Error::Geometry("degenerate mode with zero norm".into()));
            }
            mode.normalization = 1.0 / norm2.sqrt();
        }

        let n = n1 * n2;
        let jm = modes.len();
        let mut e1 = DMatrix::zeros(n, jm);
        let mut e2 = DMatrix::zeros(n, jm);
        let mut d1e1 = DMatrix::zeros(n, jm);
        let mut d2e1 = DMatrix::zeros(n, jm);
        let mut d1e2 = DMatrix::zeros(n, jm);
        let mut d2e2 = DMatrix::zeros(n, jm);
        let mut weights = DVector::zeros(n);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                weights[i1 * n2 + i2] = w1 * w2[i2];
            }
        }

        for (jcol, mode) in modes.iter().enumerate() {
            let kappa = 2.0 * std::f64::consts::PI * mode.wavenumber as f64 / a;
            let nc = mode.normalization;
            // Wall profile values per x2 node.
            let prof: Vec<(f64, f64, f64)> =
                x2.iter().map(|&x| eval_series(&mode.profile, x)).collect();
            for (i1, &x) in x1.iter().enumerate() {
                let (c, s) = ((kappa * x).cos(), (kappa * x).sin());
                for (i2, &(psi, dpsi, ddpsi)) in prof.iter().enumerate() {
                    let row = i1 * n2 + i2;
                    if mode.wavenumber == 0 {
                        e1[(row, jcol)] = nc * psi;
                        d2e1[(row, jcol)] = nc * dpsi;
                    } else {
                        match mode.parity {
                            Parity::Cos => {
                                e1[(row, jcol)] = nc * dpsi * c;
                                e2[(row, jcol)] = nc * kappa * psi * s;
                                d1e1[(row, jcol)] = -nc * kappa * dpsi * s;
                                d2e1[(row, jcol)] = nc * ddpsi * c;
                                d1e2[(row, jcol)] = nc * kappa * kappa * psi * c;
                                d2e2[(row, jcol)] = nc * kappa * dpsi * s;
                            }
                            Parity::Sin => {
                                e1[(row, jcol)] = nc * dpsi * s;
                                e2[(row, jcol)] = -nc * kappa * psi * c;
                                d1e1[(row, jcol)] = nc * kappa * dpsi * c;
                                d2e1[(row, jcol)] = nc * ddpsi * s;
                                d1e2[(row, jcol)] = nc * kappa * kappa * psi * s;
                                d2e2[(row, jcol)] = -nc * kappa * dpsi * c;
                            }
                        }
                    }
                }
            }
        }

        Ok(Self {
            geometry,
            modes,
            x1,
            x2,
            w2,
            weights,
            e1,
            e2,
            d1e1,
            d2e1,
            d1e2,
            d2e2,
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.alpha).collect()
    }

    pub fn alpha_min(&self) -> f64 {
        self.modes[0].alpha
    }

    /// L^2(D) inner product of two grid fields by quadrature.
    pub fn inner(&self, f: &GridField, g: &GridField) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.weights.len() {
            acc += self.weights[i] * (f.u1[i] * g.u1[i] + f.u2[i] * g.u2[i]);
        }
        acc
    }

    /// Gram matrix (e_i, e_j) over the quadrature grid.
    pub fn gram(&self) -> DMatrix<f64> {
        let jm = self.len();
        let mut g = DMatrix::zeros(jm, jm);
        for i in 0..jm {
            for j in i..jm {
                let mut acc = 0.0;
                for r in 0..self.weights.len() {
                    acc += self.weights[r]
                        * (self.e1[(r, i)] * self.e1[(r, j)] + self.e2[(r, i)] * self.e2[(r, j)]);
                }
                g[(i, j)] = acc;
                g[(j, i)] = acc;
            }
        }
        g
    }

    /// Quadrature value of ||grad e_j||^2; equals alpha_j for an exact mode.
    pub fn grad_norm_sq(&self, j: usize) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.weights.len() {
            acc += self.weights[r]
                * (self.d1e1[(r, j)].powi(2)
                    + self.d2e1[(r, j)].powi(2)
                    + self.d1e2[(r, j)].powi(2)
                    + self.d2e2[(r, j)].powi(2));
        }
        acc
    }

    /// Reconstruct u = sum_j c_j e_j and its gradient on the grid.
    pub fn pointwise_field(&self, coefficients: &[f64]) -> Result<GridField> {
        if coefficients.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: coefficients.len(),
            });
        }
        let c = DVector::from_column_slice(coefficients);
        Ok(GridField {
            u1: &self.e1 * &c,
            u2: &self.e2 * &c,
            d1u1: &self.d1e1 * &c,
            d2u1: &self.d2e1 * &c,
            d1u2: &self.d1e2 * &c,
            d2u2: &self.d2e2 * &c,
        })
    }

    /// Column view of mode j as a GridField (copies the cached columns).
    pub fn mode_field(&self, j: usize) -> GridField {
        GridField {
            u1: self.e1.column(j).into_owned(),
            u2: self.e2.column(j).into_owned(),
            d1u1: self.d1e1.column(j).into_owned(),
            d2u1: self.d2e1.column(j).into_owned(),
            d1u2: self.d1e2.column(j).into_owned(),
            d2u2: self.d2e2.column(j).into_owned(),
        }
    }

    /// Project a pointwise vector field (v1, v2) onto each basis mode.
    pub fn project(&self, v1: &DVector<f64>, v2: &DVector<f64>) -> DVector<f64> {
        let jm = self.len();
        let mut out = DVector::zeros(jm);
        for j in 0..jm {
            let mut acc = 0.0;
            for r in 0..self.weights.len() {
                acc += self.weights[r] * (self.e1[(r, j)] * v1[r] + self.e2[(r, j)] * v2[r]);
            }
            out[j] = acc;
        }
        out
    }

    /// Write the eigenpairs to a cache file keyed by the geometry hash.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "{CACHE_MAGIC}");
        let _ = writeln!(s, "key {}", g.cache_key());
        let _ = writeln!(
            s,
            "geometry a={:.17e} K={} M={} J={} n1={} n2={}",
            g.period, g.fourier_cutoff, g.wall_order, g.basis_size, g.n1, g.n2
        );
        let _ = writeln!(s, "modes {}", self.modes.len());
        for m in &self.modes {
            let _ = write!(
                s,
                "{} {} {:.17e} {:.17e}",
                m.wavenumber,
                m.parity.index(),
                m.alpha,
                m.normalization
            );
            for c in &m.profile {
                let _ = write!(s, " {:.17e}", c);
            }
            let _ = writeln!(s);
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Load a cache written for exactly this geometry; grid evaluations are
    /// recomputed. Returns Ok(None) on key mismatch so callers can rebuild.
    pub fn load_cache(path: &Path, geometry: &ChannelGeometry) -> Result<Option<StokesBasis>> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut lines = text.lines();
        let bad = |detail: &str| Error::Format {
            kind: "basis cache",
            detail: detail.to_string(),
        };
        if lines.next() != Some(CACHE_MAGIC) {
            return Err(bad("missing magic line"));
        }
        let key_line = lines.next().ok_or_else(|| bad("missing key"))?;
        let key = key_line
            .strip_prefix("key ")
            .ok_or_else(|| bad("malformed key line"))?;
        if key != geometry.cache_key() {
            return Ok(None);
        }
        let _geom = lines.next().ok_or_else(|| bad("missing geometry line"))?;
        let count_line = lines.next().ok_or_else(|| bad("missing mode count"))?;
        let count: usize = count_line
            .strip_prefix("modes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("malformed mode count"))?;
        let mut modes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated mode list"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 4 + geometry.wall_order {
                return Err(bad("mode record has wrong field count"));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("non-numeric field"));
            let wavenumber: usize = vals[0].parse().map_err(|_| bad("bad wavenumber"))?;
            let parity = match vals[1] {
                "0" => Parity::Cos,
                "1" => Parity::Sin,
                _ => return Err(bad("bad parity")),
            };
            let alpha = parse(vals[2])?;
            let normalization = parse(vals[3])?;
            let profile = vals[4..]
                .iter()
                .map(|v| parse(v))
                .collect::<Result<Vec<f64>>>()?;
            modes.push(StokesMode {
                wavenumber,
                parity,
                alpha,
                profile,
                normalization,
            });
        }
        let basis = StokesBasis::finish(geometry.clone(), modes)?;
        Ok(Some(basis))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn geom_k0(m: usize, j: usize) -> ChannelGeometry {
        ChannelGeometry::new(2.0 * PI, 0, m, j).unwrap()
    }

    #[test]
    fn k0_spectrum_matches_dirichlet_laplacian() {
        // -psi'' = alpha psi on (-1,1) with psi(+-1) = 0: alpha_n = (n pi/2)^2.
        let g = geom_k0(32, 2);
        let pairs = solve_wall_eigenproblem(0, &g, 2).unwrap();
        assert_relative_eq!(pairs[0].0, (PI / 2.0).powi(2), max_relative = 1e-10);
        assert_relative_eq!(pairs[1].0, PI.powi(2), max_relative = 1e-10);
        // Profiles proportional to cos(pi x/2) and sin(pi x).
        let (v0, _, _) = eval_series(&pairs[0].1, 0.0);
        let (v0b, _, _) = eval_series(&pairs[0].1, 0.5);
        assert_relative_eq!(v0b / v0, (PI / 4.0).cos(), max_relative = 1e-8);
        let (v1, _, _) = eval_series(&pairs[1].1, 0.5);
        let (v1b, _, _) = eval_series(&pairs[1].1, 0.25);
        assert_relative_eq!(v1b / v1, (PI / 4.0).sin() / (PI / 2.0).sin(), max_relative = 1e-8);
    }

    #[test]
    fn profiles_vanish_on_walls() {
        let g = geom_k0(32, 1);
        let pairs = solve_wall_eigenproblem(0, &g, 1).unwrap();
        for x in [-1.0, 1.0] {
            let (v, _, _) = eval_series(&pairs[0].1, x);
            assert!(v.abs() < 1e-12, "profile at wall = {v}");
        }
    }

    #[test]
    fn k1_eigenvalue_stable_under_refinement() {
        let g32 = ChannelGeometry::new(2.0 * PI, 1, 32, 4).unwrap();
        let g64 = ChannelGeometry::new(2.0 * PI, 1, 64, 4).unwrap();
        let a32 = solve_wall_eigenproblem(1, &g32, 1).unwrap()[0].0;
        let a64 = solve_wall_eigenproblem(1, &g64, 1).unwrap()[0].0;
        assert_relative_eq!(a32, a64, max_relative = 1e-10);
        assert!(a32 > 0.0);
    }

    #[test]
    fn count_beyond_capacity_is_rejected() {
        let g = geom_k0(16, 1);
        let err = solve_wall_eigenproblem(0, &g, 15).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn assembled_k0_basis_has_closed_form_spectrum() {
        let basis = assemble_basis(&geom_k0(32, 4)).unwrap();
        for (n, mode) in basis.modes.iter().enumerate() {
            let exact = ((n as f64 + 1.0) * PI / 2.0).powi(2);
            assert_relative_eq!(mode.alpha, exact, max_relative = 1e-10);
        }
        // Sorted ascending.
        let alphas = basis.alphas();
        assert!(alphas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gram_matrix_is_identity() {
        let g = ChannelGeometry::new(2.0 * PI, 2, 48, 16).unwrap();
        let basis = assemble_basis(&g).unwrap();
        let gram = basis.gram();
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - expect).abs() < 1e-10,
                    "Gram[{i},{j}] = {}",
                    gram[(i, j)]
                );
            }
        }
    }

    #[test]
    fn eigenrelation_grad_norm_equals_alpha() {
        let g = ChannelGeometry::new(2.0 * PI, 2, 40, 12).unwrap();
        let basis = assemble_basis(&g).unwrap();
        for j in 0..basis.len() {
            assert_relative_eq!(basis.grad_norm_sq(j), basis.modes[j].alpha, max_relative = 1e-6);
        }
    }

    #[test]
    fn modes_are_divergence_free_and_no_slip() {
        let g = ChannelGeometry::new(2.0 * PI, 2, 40, 12).unwrap();
        let basis = assemble_basis(&g).unwrap();
        for j in 0..basis.len() {
            let f = basis.mode_field(j);
            let scale = f.d1u1.amax().max(f.d2u2.amax()).max(1.0);
            for r in 0..f.u1.len() {
                assert!((f.d1u1[r] + f.d2u2[r]).abs() <= 1e-8 * scale);
            }
            // Walls are not grid points (Gauss nodes are interior), so check
            // the profile end values directly.
            let mode = &basis.modes[j];
            for x in [-1.0_f64, 1.0] {
                let (v, d, _) = eval_series(&mode.profile, x);
                assert!(v.abs() < 1e-10);
                if mode.wavenumber != 0 {
                    assert!(d.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn refinement_keeps_retained_alphas() {
        let g1 = ChannelGeometry::new(2.0 * PI, 1, 32, 8).unwrap();
        let g2 = ChannelGeometry::new(2.0 * PI, 1, 64, 8).unwrap();
        let b1 = assemble_basis(&g1).unwrap();
        let b2 = assemble_basis(&g2).unwrap();
        for (m1, m2) in b1.modes.iter().zip(&b2.modes) {
            assert_relative_eq!(m1.alpha, m2.alpha, max_relative = 1e-8);
        }
    }

    #[test]
    fn pointwise_field_zero_and_identity_cases() {
        let g = ChannelGeometry::new(2.0 * PI, 1, 24, 6).unwrap();
        let basis = assemble_basis(&g).unwrap();
        let zero = basis.pointwise_field(&vec![0.0; 6]).unwrap();
        assert_eq!(zero.u1.amax(), 0.0);
        assert_eq!(zero.u2.amax(), 0.0);
        let mut c = vec![0.0; 6];
        c[3] = 1.0;
        let f = basis.pointwise_field(&c).unwrap();
        let m = basis.mode_field(3);
        assert_relative_eq!((f.u1 - m.u1).amax(), 0.0, epsilon = 1e-14);
        assert_relative_eq!((f.u2 - m.u2).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pointwise_field_norm_matches_coefficients() {
        let g = ChannelGeometry::new(2.0 * PI, 1, 24, 6).unwrap();
        let basis = assemble_basis(&g).unwrap();
        let c = [0.3, -1.1, 0.7, 0.05, -0.4, 0.9];
        let f = basis.pointwise_field(&c).unwrap();
        let quad = basis.inner(&f, &f);
        let sum: f64 = c.iter().map(|x| x * x).sum();
        assert_relative_eq!(quad, sum, max_relative = 1e-8);
    }

    #[test]
    fn pointwise_field_length_mismatch() {
        let g = ChannelGeometry::new(2.0 * PI, 0, 16, 4).unwrap();
        let basis = assemble_basis(&g).unwrap();
        assert!(matches!(
            basis.pointwise_field(&[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cache_roundtrip_reproduces_basis() {
        let g = ChannelGeometry::new(2.0 * PI, 1, 24, 6).unwrap();
        let basis = assemble_basis(&g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.cache");
        basis.save_cache(&path).unwrap();
        let loaded = StokesBasis::load_cache(&path, &g).unwrap().unwrap();
        for (a, b) in basis.modes.iter().zip(&loaded.modes) {
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.normalization, b.normalization);
            assert_eq!(a.profile, b.profile);
        }
        // Key mismatch -> None.
        let other = ChannelGeometry::new(2.0 * PI, 1, 24, 5).unwrap();
        assert!(StokesBasis::load_cache(&path, &other).unwrap().is_none());
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(ChannelGeometry::new(-1.0, 1, 16, 4).is_err());
        assert!(ChannelGeometry::new(2.0 * PI, 0, 16, 200).is_err());
        assert!(ChannelGeometry::with_grid(2.0 * PI, 2, 16, 4, 3, 40).is_err());
    }
}
