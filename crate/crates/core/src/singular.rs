//! Hyperbolic equilibria: location, stable/unstable splitting, chart
//! coordinates and the constants governing passages near the singularity.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{eval_field, integrate_until, FieldSpec, FlowError};
use crate::linalg::{column_basis, eigenvalues, matrix_sign, Eigenvalue, Matrix};
use crate::sampling::{random_in_ball, random_radius, random_unit};
use crate::scalar::{norm2, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingularError {
    #[error("Newton iteration did not converge after {0} iterations (residual {1:e})")]
    NoConvergence(usize, f64),
    #[error("equilibrium is not hyperbolic: eigenvalue with real part {0:e}")]
    NotHyperbolic(f64),
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("eigen-decomposition failed")]
    Decomposition,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Distance used by [`estimate_speed_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    /// `max(|v^s|, |v^u|)` in chart coordinates.
    #[default]
    Box,
    Euclidean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularityProfile<T> {
    pub sigma: Vec<T>,
    /// Orthonormal basis vectors of `E^s` and `E^u`.
    #[serde(rename = "Es_basis")]
    pub es_basis: Vec<Vec<T>>,
    #[serde(rename = "Eu_basis")]
    pub eu_basis: Vec<Vec<T>>,
    pub lambda: T,
    pub lambda_prime: T,
    /// Expansion rate of `-X` in the stable cone, `e^{min |Re λ_s|}`.
    pub lambda_backward: T,
    #[serde(rename = "L0")]
    pub l0: T,
    #[serde(rename = "L1")]
    pub l1: T,
    pub beta1: T,
    pub r: T,
    #[serde(rename = "K0")]
    pub k0: T,
    #[serde(rename = "K1")]
    pub k1: T,
    pub n0: i64,
    pub alpha0: T,
    #[serde(rename = "T_alpha0")]
    pub t_alpha0: T,
    pub d0: T,
    pub d1: T,
    #[serde(rename = "Cc")]
    pub c: T,
    #[serde(rename = "Cc_prime")]
    pub c_prime: T,
    #[serde(skip, default = "OnceLock::new")]
    chart: OnceLock<Matrix<T>>,
}

impl<T: Real> SingularityProfile<T> {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn ds(&self) -> usize {
        self.es_basis.len()
    }

    pub fn du(&self) -> usize {
        self.eu_basis.len()
    }

    /// Inverse of the matrix with columns `[Es | Eu]`.
    fn chart_matrix(&self) -> &Matrix<T> {
        self.chart.get_or_init(|| {
            let cols: Vec<Vec<T>> = self
                .es_basis
                .iter()
                .chain(&self.eu_basis)
                .cloned()
                .collect();
            Matrix::from_columns(&cols, self.dim())
                .inverse()
                .expect("stable and unstable bases span the ambient space")
        })
    }

    /// Coordinates `(v^s, v^u)` of `x − σ` along the splitting.
    pub fn chart(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let v: Vec<T> = x.iter().zip(&self.sigma).map(|(&a, &b)| a - b).collect();
        let mut c = self.chart_matrix().mul_vec(&v);
        let vu = c.split_off(self.ds());
        (c, vu)
    }

    /// `σ + Es·vs + Eu·vu`.
    pub fn from_chart(&self, vs: &[T], vu: &[T]) -> Vec<T> {
        let mut x = self.sigma.clone();
        for (b, &a) in self.es_basis.iter().zip(vs) {
            x.iter_mut().zip(b).for_each(|(xi, &bi)| *xi = *xi + a * bi);
        }
        for (b, &a) in self.eu_basis.iter().zip(vu) {
            x.iter_mut().zip(b).for_each(|(xi, &bi)| *xi = *xi + a * bi);
        }
        x
    }

    pub fn box_norm(&self, x: &[T]) -> T {
        let (vs, vu) = self.chart(x);
        norm2(&vs).max(norm2(&vu))
    }

    /// `|v^s| − |v^u|`.
    pub fn defect(&self, x: &[T]) -> T {
        let (vs, vu) = self.chart(x);
        norm2(&vs) - norm2(&vu)
    }

    /// Uniform random point of the box ball `{|v^s| ≤ ρ, |v^u| ≤ ρ}`.
    pub fn sample_box_ball(&self, rho: T, rng: &mut ChaCha8Rng) -> Vec<T> {
        let vs = random_in_ball(self.ds(), rho, rng);
        let vu = random_in_ball(self.du(), rho, rng);
        self.from_chart(&vs, &vu)
    }

    /// Random point with `|v^s| = |v^u| = ρ`.
    pub fn section_point(&self, rho: T, rng: &mut ChaCha8Rng) -> Vec<T> {
        let vs: Vec<T> = random_unit(self.ds(), rng);
        let vu: Vec<T> = random_unit(self.du(), rng);
        let vs: Vec<T> = vs.into_iter().map(|a| a * rho).collect();
        let vu: Vec<T> = vu.into_iter().map(|a| a * rho).collect();
        self.from_chart(&vs, &vu)
    }

    /// Random point of the shell `e^{-(n+1)} ≤ |v^s| = |v^u| < e^{-n}`,
    /// with radius uniform in the section's own measure.
    pub fn layer_point(&self, n: i64, rng: &mut ChaCha8Rng) -> Vec<T> {
        let lo = T::lit(-(n as f64) - 1.0).exp();
        let hi = T::lit(-(n as f64)).exp();
        let section_dim = self.dim() - 1;
        let mut rho = random_radius(lo, hi, section_dim, rng);
        if rho >= hi {
            rho = lo;
        }
        self.section_point(rho, rng)
    }

    /// `log λ` used for backward passages and for the upper exit-time slope.
    pub fn slowest_log_rate(&self) -> T {
        self.lambda.ln().min(self.lambda_backward.ln())
    }

    pub fn to_json(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error>
    where
        T: for<'de> Deserialize<'de>,
    {
        serde_json::from_str(s)
    }
}

fn eigen<T: Real>(j: &Matrix<T>) -> Result<Vec<Eigenvalue<T>>, SingularError> {
    eigenvalues(j).ok_or(SingularError::Decomposition)
}

fn check_hyperbolic<T: Real>(ev: &[Eigenvalue<T>], tol: T) -> Result<(), SingularError> {
    match ev.iter().find(|e| e.0.abs() < tol) {
        Some(e) => Err(SingularError::NotHyperbolic(e.0.as_f64())),
        None => Ok(()),
    }
}

/// Damped Newton iteration on `X` from `seed`.
pub fn locate_singularity<T: Real>(
    spec: &FieldSpec<T>,
    seed: &[T],
    tol: T,
) -> Result<Vec<T>, SingularError> {
    spec.validate()?;
    let max_iter = 200;
    let mut x = seed.to_vec();
    let mut f = eval_field(spec, &x);
    let mut res = norm2(&f);
    for _ in 0..max_iter {
        if res <= tol {
            let ev = eigen(&spec.jacobian(&x))?;
            check_hyperbolic(&ev, tol.max(T::lit(1e-12)))?;
            return Ok(x);
        }
        let j = spec.jacobian(&x);
        let neg: Vec<T> = f.iter().map(|&a| -a).collect();
        let Some(dx) = j.solve(&neg) else {
            return Err(SingularError::NoConvergence(0, res.as_f64()));
        };
        let mut alpha = T::one();
        loop {
            let trial: Vec<T> = x.iter().zip(&dx).map(|(&a, &b)| a + alpha * b).collect();
            let ft = eval_field(spec, &trial);
            let rt = norm2(&ft);
            if rt < res || alpha < T::lit(1e-6) {
                x = trial;
                f = ft;
                res = rt;
                break;
            }
            alpha = alpha * T::lit(0.5);
        }
    }
    if res <= tol {
        return Ok(x);
    }
    Err(SingularError::NoConvergence(max_iter, res.as_f64()))
}

fn nan_profile<T: Real>(sigma: Vec<T>, es: Vec<Vec<T>>, eu: Vec<Vec<T>>) -> SingularityProfile<T> {
    let nan = T::nan();
    SingularityProfile {
        sigma,
        es_basis: es,
        eu_basis: eu,
        lambda: nan,
        lambda_prime: nan,
        lambda_backward: nan,
        l0: nan,
        l1: nan,
        beta1: nan,
        r: nan,
        k0: nan,
        k1: nan,
        n0: 0,
        alpha0: T::lit(0.5),
        t_alpha0: nan,
        d0: nan,
        d1: nan,
        c: nan,
        c_prime: nan,
        chart: OnceLock::new(),
    }
}

/// Stable and unstable subspaces of `DX|_σ` and the rates `λ`, `λ′`.
/// The subspaces are the ranges of the spectral projectors `(I ∓ S)/2` of
/// the matrix sign `S`, so complex pairs are handled as real 2-planes.
pub fn hyperbolic_splitting<T: Real>(
    spec: &FieldSpec<T>,
    sigma: &[T],
    tol: T,
) -> Result<SingularityProfile<T>, SingularError> {
    let j = spec.jacobian(sigma);
    let ev = eigen(&j)?;
    check_hyperbolic(&ev, tol)?;
    let d = spec.dim;
    let du = ev.iter().filter(|e| e.0 > T::zero()).count();
    let ds = d - du;
    if du == 0 || ds == 0 {
        return Err(SingularError::DegenerateSpectrum(
            "singularity must have both stable and unstable directions".into(),
        ));
    }
    let s = matrix_sign(&j).ok_or(SingularError::Decomposition)?;
    let id = Matrix::identity(d);
    let half = T::lit(0.5);
    let ps = id.sub(&s).scale(half);
    let pu = id.add(&s).scale(half);
    let es = column_basis(&ps, ds);
    let eu = column_basis(&pu, du);
    let min_u = ev.iter().filter(|e| e.0 > T::zero()).map(|e| e.0).fold(T::infinity(), T::min);
    let min_s = ev.iter().filter(|e| e.0 < T::zero()).map(|e| -e.0).fold(T::infinity(), T::min);
    let max_abs = ev.iter().map(|e| e.0.abs()).fold(T::zero(), T::max);
    let mut p = nan_profile(sigma.to_vec(), es, eu);
    p.lambda = min_u.exp();
    p.lambda_backward = min_s.exp();
    p.lambda_prime = max_abs.exp();
    Ok(p)
}

/// Orthogonal projector onto the span of orthonormal `basis`.
pub fn orthogonal_projector<T: Real>(basis: &[Vec<T>], d: usize) -> Matrix<T> {
    let mut p = Matrix::zeros(d, d);
    for b in basis {
        for i in 0..d {
            for k in 0..d {
                p[(i, k)] = p[(i, k)] + b[i] * b[k];
            }
        }
    }
    p
}

/// `max_i ‖(I − P_i) DX|_σ P_i‖` over the two subspaces.
pub fn invariance_defect<T: Real>(spec: &FieldSpec<T>, profile: &SingularityProfile<T>) -> T {
    let d = profile.dim();
    let j = spec.jacobian(&profile.sigma);
    let id = Matrix::identity(d);
    [&profile.es_basis, &profile.eu_basis]
        .iter()
        .map(|b| {
            let p = orthogonal_projector(b, d);
            id.sub(&p).mul(&j).mul(&p).spectral_norm()
        })
        .fold(T::zero(), T::max)
}

/// `(min, max)` of `|X(x)|/d(x, σ)` over uniform samples of the box ball of
/// radius `beta1`, widened by 1% outward.
pub fn estimate_speed_lipschitz<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    sample_count: usize,
    rng_seed: u64,
    norm: DistanceNorm,
) -> (T, T) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mut lo, mut hi) = (T::infinity(), T::zero());
    let mut taken = 0;
    while taken < sample_count {
        let x = profile.sample_box_ball(profile.beta1, &mut rng);
        let dist = match norm {
            DistanceNorm::Box => profile.box_norm(&x),
            DistanceNorm::Euclidean => crate::scalar::dist2(&x, &profile.sigma),
        };
        if dist <= T::zero() {
            continue;
        }
        taken += 1;
        let ratio = norm2(&eval_field(spec, &x)) / dist;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    (lo * T::lit(0.99), hi * T::lit(1.01))
}

/// Largest `ρ ≤ 0.1` (on a geometric grid) with relative linearization
/// defect `‖X(x) − DX|_σ (x − σ)‖ / ‖DX|_σ (x − σ)‖ ≤ 0.2` at every sample.
pub fn default_beta1<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    sample_count: usize,
    rng_seed: u64,
) -> T {
    let j = spec.jacobian(&profile.sigma);
    let mut rho = T::lit(0.1);
    for _ in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let ok = (0..sample_count).all(|_| {
            let x = profile.sample_box_ball(rho, &mut rng);
            let v: Vec<T> = x.iter().zip(&profile.sigma).map(|(&a, &b)| a - b).collect();
            let lin = j.mul_vec(&v);
            let f = eval_field(spec, &x);
            let num = crate::scalar::dist2(&f, &lin);
            let den = norm2(&lin);
            den == T::zero() || num <= T::lit(0.2) * den
        });
        if ok {
            return rho;
        }
        rho = rho * T::lit(0.9);
    }
    rho
}

/// Constants entering the two-sided exit-time bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassageConstants<T> {
    pub d0: T,
    pub d1: T,
    pub c: T,
    pub c_prime: T,
    pub t_alpha0: T,
}

/// Passage constants estimated along orbits from the shells `D_n`,
/// `n ∈ layers`, for both `X` (cone `|v^s| < α0 |v^u|`) and `−X` (cone
/// `|v^u| < α0 |v^s|`), combined to the worst case and widened by 1%.
pub fn estimate_passage_constants<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    layers: std::ops::RangeInclusive<i64>,
    samples_per_layer: usize,
    rng_seed: u64,
) -> Result<PassageConstants<T>, SingularError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let inf = T::infinity();
    let mut out = PassageConstants {
        d0: inf,
        d1: T::zero(),
        c: inf,
        c_prime: T::zero(),
        t_alpha0: T::zero(),
    };
    let a0 = profile.alpha0;
    let r = profile.r;
    let time_tol = T::lit(1e-9);
    for n in layers {
        let tau_max = T::lit(20.0 * (n as f64 + 5.0)) / profile.slowest_log_rate();
        for _ in 0..samples_per_layer {
            let x = profile.layer_point(n, &mut rng);
            let speed0 = norm2(&eval_field(spec, &x));
            for backward in [false, true] {
                let (log_lo, log_hi) = if backward {
                    (profile.lambda_backward.ln(), profile.lambda_prime.ln())
                } else {
                    (profile.lambda.ln(), profile.lambda_prime.ln())
                };
                let cone = |y: &[T]| {
                    let (vs, vu) = profile.chart(y);
                    let (s, u) = (norm2(&vs), norm2(&vu));
                    if backward {
                        a0 * s - u
                    } else {
                        a0 * u - s
                    }
                };
                let Some(turn) = integrate_until(spec, &x, backward, tau_max, cone, time_tol, |_, _| {})? else {
                    continue;
                };
                let speed_u = norm2(&eval_field(spec, &turn.state));
                let ratio = speed_u / speed0;
                out.d0 = out.d0.min(ratio);
                out.d1 = out.d1.max(ratio);
                out.t_alpha0 = out.t_alpha0.max(turn.tau);
                let mut c = T::one();
                let mut cp = T::one();
                let exit = |y: &[T]| profile.box_norm(y) - r;
                let hit = integrate_until(spec, &turn.state, backward, tau_max, exit, time_tol, |tau, y| {
                    let rr = norm2(&eval_field(spec, y)) / speed_u;
                    c = c.min(rr / (log_lo * tau).exp());
                    cp = cp.max(rr / (log_hi * tau).exp());
                })?;
                if let Some(h) = hit {
                    let rr = norm2(&eval_field(spec, &h.state)) / speed_u;
                    c = c.min(rr / (log_lo * h.tau).exp());
                    cp = cp.max(rr / (log_hi * h.tau).exp());
                }
                out.c = out.c.min(c);
                out.c_prime = out.c_prime.max(cp);
            }
        }
    }
    if !(out.d0.is_finite() && out.c.is_finite()) {
        return Err(SingularError::DegenerateSpectrum(
            "no passage reached the turning cone".into(),
        ));
    }
    let lo = T::lit(0.99);
    let hi = T::lit(1.01);
    out.d0 = out.d0 * lo;
    out.d1 = out.d1 * hi;
    out.c = out.c * lo;
    out.c_prime = out.c_prime * hi;
    out.t_alpha0 = out.t_alpha0 * hi;
    Ok(out)
}

/// Slopes `K0 = 1/(2 log λ′)`, `K1 = 2/log λ` and the base layer `n0`.
///
/// `λ` here is the slower of the forward rate in the unstable cone and the
/// backward rate in the stable cone, since the backward exit time is bounded
/// by applying the same argument to `−X`. `n0` is the least integer for which
/// the two-sided bound
/// `(n + log(L0 r/(C′ d1 L1)))/log λ′ ≤ t ≤ (n + log(L1 r/(C d0 L0)))/log λ + T^{α0}`
/// lies inside `[K0 n, K1 n]`, raised to `ceil(−log r) + 2` if smaller.
pub fn derive_time_constants<T: Real>(
    profile: &SingularityProfile<T>,
) -> Result<(T, T, i64), SingularError> {
    let log_l = profile.slowest_log_rate();
    let log_lp = profile.lambda_prime.ln();
    if !(log_l > T::zero()) || !(log_lp > T::zero()) {
        return Err(SingularError::DegenerateSpectrum(format!(
            "log lambda = {}",
            log_l
        )));
    }
    let k0 = T::one() / (T::lit(2.0) * log_lp);
    let k1 = T::lit(2.0) / log_l;
    let p = profile;
    let a = (p.l0 * p.r / (p.c_prime * p.d1 * p.l1)).ln();
    let b = (p.l1 * p.r / (p.c * p.d0 * p.l0)).ln();
    // lower: (n + a)/log λ′ ≥ n/(2 log λ′)  ⇔  n ≥ −2a
    // upper: (n + b)/log λ + T ≤ 2n/log λ   ⇔  n ≥ b + T log λ
    let mut n0 = i64::MIN;
    for v in [-(a + a), b + p.t_alpha0 * log_l] {
        if v.is_finite() {
            n0 = n0.max(v.ceil().to_i64().unwrap_or(i64::MAX));
        }
    }
    let fallback = (-p.r.ln()).ceil().to_i64().unwrap_or(0) + 2;
    Ok((k0, k1, n0.max(fallback)))
}

/// `K1` evaluated with the forward rate only.
pub fn forward_k1<T: Real>(profile: &SingularityProfile<T>) -> T {
    T::lit(2.0) / profile.lambda.ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOptions {
    pub newton_tol: f64,
    pub beta1: Option<f64>,
    pub r: Option<f64>,
    pub alpha0: f64,
    pub lipschitz_samples: usize,
    pub beta1_samples: usize,
    pub distance: DistanceNorm,
    pub passage_layers: usize,
    pub passage_samples: usize,
    pub rng_seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            beta1: None,
            r: None,
            alpha0: 0.5,
            lipschitz_samples: 10_000,
            beta1_samples: 10_000,
            distance: DistanceNorm::Box,
            passage_layers: 8,
            passage_samples: 24,
            rng_seed: 0,
        }
    }
}

/// Locates the singularity near `seed` and derives its full profile.
pub fn build_profile<T: Real>(
    spec: &FieldSpec<T>,
    seed: &[T],
    opts: &ProfileOptions,
) -> Result<SingularityProfile<T>, SingularError> {
    let tol = T::lit(opts.newton_tol);
    let sigma = locate_singularity(spec, seed, tol)?;
    let mut p = hyperbolic_splitting(spec, &sigma, tol)?;
    p.alpha0 = T::lit(opts.alpha0);
    p.beta1 = match opts.beta1 {
        Some(b) => T::lit(b),
        None => default_beta1(spec, &p, opts.beta1_samples, opts.rng_seed),
    };
    p.r = opts.r.map_or(p.beta1, T::lit);
    if p.r > p.beta1 {
        return Err(SingularError::DegenerateSpectrum(format!(
            "working radius {} exceeds beta1 {}",
            p.r, p.beta1
        )));
    }
    let (l0, l1) = estimate_speed_lipschitz(spec, &p, opts.lipschitz_samples, opts.rng_seed ^ 0x51, opts.distance);
    p.l0 = l0;
    p.l1 = l1;
    let first = (-p.r.ln()).ceil().to_i64().unwrap_or(0) + 1;
    let last = first + opts.passage_layers.max(1) as i64 - 1;
    let pc = estimate_passage_constants(spec, &p, first..=last, opts.passage_samples, opts.rng_seed ^ 0xa7)?;
    p.d0 = pc.d0;
    p.d1 = pc.d1;
    p.c = pc.c;
    p.c_prime = pc.c_prime;
    p.t_alpha0 = pc.t_alpha0;
    let (k0, k1, n0) = derive_time_constants(&p)?;
    p.k0 = k0;
    p.k1 = k1;
    p.n0 = n0;
    Ok(p)
}
