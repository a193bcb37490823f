//! Affine approximation of `F_n = T^n o S`, the hyperbolic spectrum of its
//! linear part and simultaneous near-diagonalization over a range of `n`.

use crate::annulus::{frac_mul, wrap_centered, MapFamily, MapModel};
use crate::error::{Error, Result};
use crate::numerics::inf_norm;
use nalgebra::{DMatrix, DVector};

/// Block matrix `[[I + n eps A B, n A], [eps B, I]]`.
pub fn affine_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64, n: u64) -> DMatrix<f64> {
    let d = a.nrows();
    let nf = n as f64;
    let mut m = DMatrix::identity(2 * d, 2 * d);
    let ab = a * b;
    for i in 0..d {
        for k in 0..d {
            m[(i, k)] += nf * eps * ab[(i, k)];
            m[(i, d + k)] = nf * a[(i, k)];
            m[(d + i, k)] = eps * b[(i, k)];
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineApprox {
    pub n: u64,
    pub eps: f64,
    /// `(wrap(n beta), 0)`.
    pub b_n: DVector<f64>,
    pub a_n: DMatrix<f64>,
    /// Orders of the neglected terms, one entry per block row.
    pub error_terms: Vec<String>,
}

impl AffineApprox {
    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.b_n + &self.a_n * z
    }
}

pub fn build_affine(model: &MapModel, eps: f64, n: u64, c_max: f64) -> Result<AffineApprox> {
    if n as f64 * eps > c_max {
        return Err(Error::OutOfRange(format!("n*eps = {} exceeds {c_max}", n as f64 * eps)));
    }
    let d = model.d();
    let b_n = DVector::from_fn(2 * d, |k, _| if k < d { frac_mul(n as i64, model.inner.beta[k]) } else { 0.0 });
    Ok(AffineApprox {
        n,
        eps,
        b_n,
        a_n: affine_matrix(&model.inner.a, &model.b(), eps, n),
        error_terms: vec![
            "phi: O(n eps |phi|^2 + n |J|^2 + eps^2)".into(),
            "J: O(eps |phi|^2 + eps |J|)".into(),
        ],
    })
}

/// `F_n(z) = T^n(S(z))` on lifted coordinates.
pub fn compose_fn(model: &MapModel, eps: f64, n: u64, z: &DVector<f64>) -> Result<DVector<f64>> {
    let s = model.scatterings[0].eval(eps, z);
    model.inner.eval_pow(eps, &s, n as i64)
}

/// Max distance between `F_n` and its affine approximation on a grid of
/// `|phi_i| <= phi_r`, `|J_i| <= j_r` (`m` points per axis).
pub fn affine_error(model: &MapModel, eps: f64, n: u64, phi_r: f64, j_r: f64, m: usize) -> Result<f64> {
    let d = model.d();
    let approx = build_affine(model, eps, n, f64::INFINITY)?;
    let space = model.space();
    let axis = |i: usize, r: f64| if m == 1 { 0.0 } else { -r + 2.0 * r * i as f64 / (m - 1) as f64 };
    let total = m.pow(2 * d as u32);
    let mut worst: f64 = 0.0;
    for idx in 0..total {
        let mut rem = idx;
        let z = DVector::from_fn(2 * d, |k, _| {
            let i = rem % m;
            rem /= m;
            axis(i, if k < d { phi_r } else { j_r })
        });
        let exact = compose_fn(model, eps, n, &z)?;
        worst = worst.max(space.dist(&approx.eval(&z), &exact));
    }
    Ok(worst)
}

/// Largest `l` in a doubling ladder with affine error `<= tol` for `|J| <= l eps`.
pub fn calibrate_ell(model: &MapModel, eps: f64, n: u64, phi_r: f64, tol: f64) -> Result<f64> {
    let mut best = 0.0;
    let mut l = 0.125;
    while l <= 1024.0 {
        if affine_error(model, eps, n, phi_r, l * eps, 5)? <= tol {
            best = l;
        } else {
            break;
        }
        l *= 2.0;
    }
    Ok(best)
}

/// Diagonalization of `AB` with simple real nonzero spectrum (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct AbSpectrum {
    pub alphas: Vec<f64>,
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
}

pub fn ab_spectrum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<AbSpectrum> {
    let ab = a * b;
    let d = ab.nrows();
    let scale = ab.amax().max(1e-300);
    let ev = ab.complex_eigenvalues();
    let mut alphas = Vec::with_capacity(d);
    for e in ev.iter() {
        if e.im.abs() > 1e-9 * scale {
            return Err(Error::NonHyperbolic(format!("AB has complex eigenvalue {e}")));
        }
        if e.re.abs() <= 1e-12 * scale.max(1.0) {
            return Err(Error::NonHyperbolic("AB has a zero eigenvalue".into()));
        }
        alphas.push(e.re);
    }
    alphas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for w in alphas.windows(2) {
        if (w[1] - w[0]).abs() <= 1e-9 * scale {
            return Err(Error::NonHyperbolic("AB has a repeated eigenvalue".into()));
        }
    }
    let mut cols = Vec::with_capacity(d);
    for &al in &alphas {
        let m = &ab - DMatrix::identity(d, d) * al;
        let svd = m.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Singular("svd of AB - alpha".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut v: DVector<f64> = vt.row(imin).transpose();
        // deterministic sign: largest component positive
        let (kmax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[kmax] < 0.0 {
            v = -v;
        }
        cols.push(v);
    }
    let q = DMatrix::from_columns(&cols);
    let q_inv = q.clone().try_inverse().ok_or_else(|| Error::Singular("Q".into()))?;
    Ok(AbSpectrum { alphas, q, q_inv })
}

/// The root of `l^2 - (2 + alpha) l + 1 = 0` with `|l| < 1`.
pub fn hyperbolic_root(alpha: f64) -> Result<f64> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite("alpha".into()));
    }
    if (-4.0..=0.0).contains(&alpha) {
        return Err(Error::NonHyperbolic(format!("alpha = {alpha} lies in [-4, 0]")));
    }
    let disc = (alpha * alpha + 4.0 * alpha).sqrt();
    // the larger-modulus root is computed without cancellation
    let big = if alpha > 0.0 { (alpha + 2.0 + disc) / 2.0 } else { (alpha + 2.0 - disc) / 2.0 };
    Ok(1.0 / big)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    pub alphas_n: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub inv_lambdas: Vec<f64>,
}

/// Hyperbolic eigenvalues for `alpha_i^(n) = n eps alpha_i`.
pub fn eigen_an(alphas: &[f64], eps: f64, n: u64) -> Result<Eigenpairs> {
    let alphas_n: Vec<f64> = alphas.iter().map(|a| n as f64 * eps * a).collect();
    let lambdas = alphas_n.iter().map(|&a| hyperbolic_root(a)).collect::<Result<Vec<_>>>()?;
    let inv_lambdas = lambdas.iter().map(|l| 1.0 / l).collect();
    Ok(Eigenpairs { alphas_n, lambdas, inv_lambdas })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub n: u64,
    pub eps: f64,
    pub lambdas: Vec<f64>,
    pub q_n: DMatrix<f64>,
    pub q_n_inv: DMatrix<f64>,
    /// `diag(lambda_1..lambda_d, 1/lambda_1..1/lambda_d)`.
    pub d_n: DMatrix<f64>,
}

pub fn spectral_data(spec: &AbSpectrum, b: &DMatrix<f64>, eps: f64, n: u64) -> Result<SpectralData> {
    let d = spec.alphas.len();
    let pairs = eigen_an(&spec.alphas, eps, n)?;
    let bq = b * &spec.q * eps;
    let mut q_n = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        let (l, li) = (pairs.lambdas[i], pairs.inv_lambdas[i]);
        for r in 0..d {
            q_n[(r, i)] = spec.q[(r, i)];
            q_n[(r, d + i)] = spec.q[(r, i)];
            q_n[(d + r, i)] = bq[(r, i)] / (l - 1.0);
            q_n[(d + r, d + i)] = bq[(r, i)] / (li - 1.0);
        }
    }
    let q_n_inv = q_n.clone().try_inverse().ok_or_else(|| Error::Singular("Q_n".into()))?;
    let mut d_n = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        d_n[(i, i)] = pairs.lambdas[i];
        d_n[(d + i, d + i)] = pairs.inv_lambdas[i];
    }
    Ok(SpectralData { n, eps, lambdas: pairs.lambdas, q_n, q_n_inv, d_n })
}

/// `|| Q_N^-1 A_n Q_N - D_n ||_inf` with `Q_N` built at `n_eps`.
pub fn simultaneous_diag(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64, n_eps: u64, n: u64) -> Result<f64> {
    if n < n_eps {
        return Err(Error::Precondition("n must be at least N_eps".into()));
    }
    let spec = ab_spectrum(a, b)?;
    let base = spectral_data(&spec, b, eps, n_eps)?;
    let here = spectral_data(&spec, b, eps, n)?;
    let conj = &base.q_n_inv * affine_matrix(a, b, eps, n) * &base.q_n;
    Ok(inf_norm(&(conj - here.d_n)))
}

/// The slack bound `c * eps * N_* / N_0`.
pub fn diag_bound(eps: f64, n_star: u64, n0: f64, slack: f64) -> f64 {
    slack * eps * n_star as f64 / n0
}

/// Least `t = n eps` on a grid of step `step` with every `t alpha_i`
/// outside `[-4.5, 0.5]`.
pub fn compute_n0(alphas: &[f64], step: f64) -> Result<f64> {
    let mut k = 1u64;
    loop {
        let t = k as f64 * step;
        if alphas.iter().all(|a| {
            let x = t * a;
            !(-4.5..=0.5).contains(&x)
        }) {
            return Ok(t);
        }
        k += 1;
        if t > 1e6 {
            return Err(Error::Budget("no admissible N0 below 1e6".into()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquidistReport {
    pub radius: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Covering radius of `{wrap(k beta)}_{k=1..n}` on the torus.
///
/// Exact (half the largest circular gap) for `d = 1`; sampled on a grid of
/// 64 points per axis otherwise.
pub fn equidistribution_window(beta: &[f64], gamma: f64, n: u64) -> Result<EquidistReport> {
    let d = beta.len();
    if d == 0 || n == 0 {
        return Err(Error::Precondition("d >= 1 and N >= 1 required".into()));
    }
    let radius = if d == 1 {
        let mut pts: Vec<f64> = (1..=n as i64).map(|k| frac_mul(k, beta[0])).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut gap = pts[0] + 1.0 - pts[pts.len() - 1];
        for w in pts.windows(2) {
            gap = gap.max(w[1] - w[0]);
        }
        gap / 2.0
    } else {
        let pts: Vec<Vec<f64>> = (1..=n as i64).map(|k| beta.iter().map(|&b| frac_mul(k, b)).collect()).collect();
        let m = 64usize;
        let mut worst: f64 = 0.0;
        for idx in 0..m.pow(d as u32) {
            let mut rem = idx;
            let g: Vec<f64> = (0..d)
                .map(|_| {
                    let i = rem % m;
                    rem /= m;
                    (i as f64 + 0.5) / m as f64
                })
                .collect();
            let best = pts
                .iter()
                .map(|p| p.iter().zip(&g).map(|(a, b)| wrap_centered(a - b).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        worst
    };
    let bound = 1.0 / (gamma * (n as f64).powf(1.0 / d as f64));
    Ok(EquidistReport { radius, bound, within_bound: radius <= bound })
}

/// One row of the linearization table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizeRecord {
    pub n: u64,
    pub alphas_n: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub residual: f64,
}

pub fn linearize_table(model: &MapModel, eps: f64, n_eps: u64, ns: &[u64]) -> Result<Vec<LinearizeRecord>> {
    let spec = ab_spectrum(&model.inner.a, &model.b())?;
    ns.iter()
        .map(|&n| {
            let pairs = eigen_an(&spec.alphas, eps, n)?;
            Ok(LinearizeRecord {
                n,
                alphas_n: pairs.alphas_n,
                lambdas: pairs.lambdas,
                residual: simultaneous_diag(&model.inner.a, &model.b(), eps, n_eps, n)?,
            })
        })
        .collect()
}
