//! Countable partitions near singularities, the regular flow-box cover, and
//! the global partition with its truncations and itineraries.
//!
//! Layer cells of `ℬ_n` are cut on the section `D_n`; a point of
//! `C_n = φ_{[0,1)}(D_n)` is assigned by flowing it back to its crossing.
//! Shallow layers whose cells are resolvable get Voronoi cells over a maximal
//! separated set; every other layer uses a closed-form lattice in the section
//! parametrization `(ρ, a, b) ↦ σ + ρ(Es·a + Eu·b)`, `a, b` unit vectors.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::SQRT_2;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{eval_field, integrate_flow, integrate_until, FieldSpec, FlowError, Stepper};
use crate::scalar::{dist2, dot, norm2, sub};
use crate::section::{exit_budget, shell_of, OrbitEvent, OrbitWalker, SectionError, SECTION_TOL};
use crate::singular::SingularityProfile;

/// Layers materialize as Voronoi cells only below this many cells.
pub const MATERIALIZE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("layer {layer}: predicted cell count e^{log_count:.1} cannot be indexed")]
    BudgetExceeded { layer: i64, log_count: f64 },
    #[error("regular cover needs more than {0} flow boxes")]
    CoverFailure(usize),
    #[error("flow box {0} lies in O(sigma {1})")]
    OverlapDetected(usize, usize),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Section(#[from] SectionError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Multi-index of a layer cell. Components are integer valued; lattice
/// components can exceed every integer type, so they are kept as `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellIndex(pub Vec<f64>);

impl PartialEq for CellIndex {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CellIndex {}

impl PartialOrd for CellIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        let n = self.0.len().cmp(&other.0.len());
        if n != Ordering::Equal {
            return n;
        }
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        Ordering::Equal
    }
}

impl Hash for CellIndex {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.len().hash(state);
        for v in &self.0 {
            (v + 0.0).to_bits().hash(state);
        }
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Element of the global partition (or of one of its projections).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementId {
    RegularCell { k: usize },
    LayerCell { sigma: usize, n: i64, j: CellIndex },
    BMinus { sigma: usize },
    BPlus { sigma: usize },
    /// `⋃_{m>N} C_m` after truncation at `N`.
    TailCell { sigma: usize },
    /// `C_n` itself, in projections onto the coarse partition.
    Layer { sigma: usize, n: i64 },
    /// Everything a per-singularity projection does not resolve.
    Rest { sigma: usize },
    Outside,
}

impl ElementId {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::RegularCell { .. } => "regular",
            Self::LayerCell { .. } => "layer_cell",
            Self::BMinus { .. } => "b_minus",
            Self::BPlus { .. } => "b_plus",
            Self::TailCell { .. } => "tail",
            Self::Layer { .. } => "layer",
            Self::Rest { .. } => "rest",
            Self::Outside => "outside",
        }
    }

    pub fn sigma(&self) -> Option<usize> {
        match self {
            Self::LayerCell { sigma, .. }
            | Self::BMinus { sigma }
            | Self::BPlus { sigma }
            | Self::TailCell { sigma }
            | Self::Layer { sigma, .. }
            | Self::Rest { sigma } => Some(*sigma),
            _ => None,
        }
    }

    /// Layer index for `LayerCell` and `Layer`.
    pub fn layer(&self) -> Option<i64> {
        match self {
            Self::LayerCell { n, .. } | Self::Layer { n, .. } => Some(*n),
            _ => None,
        }
    }

    /// Projection onto `𝒜_σ = {ℬ_n cells, B^-, B^+, O(σ)^c}`.
    pub fn refined_for(&self, s: usize) -> ElementId {
        match self {
            Self::LayerCell { sigma, .. } | Self::BMinus { sigma } | Self::BPlus { sigma } | Self::TailCell { sigma }
                if *sigma == s =>
            {
                self.clone()
            }
            _ => Self::Rest { sigma: s },
        }
    }

    /// Projection onto `𝒞_σ = {C_n} ∪ {complement}`.
    pub fn coarse_for(&self, s: usize) -> ElementId {
        match self {
            Self::LayerCell { sigma, n, .. } if *sigma == s => Self::Layer { sigma: s, n: *n },
            _ => Self::Rest { sigma: s },
        }
    }

    /// The element of `truncate(·, N)` containing this one.
    pub fn truncated(&self, cut: i64) -> ElementId {
        match self {
            Self::LayerCell { sigma, n, .. } if *n > cut => Self::TailCell { sigma: *sigma },
            _ => self.clone(),
        }
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RegularCell { k } => write!(f, "R{k}"),
            Self::LayerCell { sigma, n, j } => write!(f, "L{sigma}.{n}.{j}"),
            Self::BMinus { sigma } => write!(f, "B-{sigma}"),
            Self::BPlus { sigma } => write!(f, "B+{sigma}"),
            Self::TailCell { sigma } => write!(f, "T{sigma}"),
            Self::Layer { sigma, n } => write!(f, "C{sigma}.{n}"),
            Self::Rest { sigma } => write!(f, "X{sigma}"),
            Self::Outside => f.write_str("O"),
        }
    }
}

/// `r_n = β·L^{-K1·n}·L0·e^{-(n+1)}`.
pub fn layer_radius(beta: f64, l: f64, k1: f64, l0: f64, n: i64) -> f64 {
    let n = n as f64;
    (beta.ln() - k1 * n * l.ln() + l0.ln() - (n + 1.0)).exp()
}

/// `(c0, L′, L″) = (L0/e, L^{K1}·e, (L^{K1}·e)^{dim})`.
pub fn cell_constants(l: f64, k1: f64, l0: f64, dim: usize) -> (f64, f64, f64) {
    let lp = l.powf(k1) * std::f64::consts::E;
    (l0 / std::f64::consts::E, lp, lp.powi(dim as i32))
}

/// Greedy maximal `radius`-separated subset, scanning in input order.
/// Chosen points are pairwise more than `radius` apart and every input point
/// is within `radius` of a chosen one.
pub fn max_separated_set(points: &[Vec<f64>], radius: f64) -> Vec<usize> {
    assert!(radius > 0.0, "separation radius must be positive");
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    let mut chosen = Vec::new();
    let key = |p: &[f64]| -> Vec<i64> { p.iter().map(|&v| (v / radius).floor() as i64).collect() };
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let d = k.len();
        let mut near = false;
        let mut offs = vec![-1i64; d];
        'outer: loop {
            let nk: Vec<i64> = k.iter().zip(&offs).map(|(a, b)| a + b).collect();
            if let Some(ids) = grid.get(&nk) {
                if ids.iter().any(|&j| dist2(&points[j], p) <= radius) {
                    near = true;
                    break 'outer;
                }
            }
            let mut c = 0;
            loop {
                if c == d {
                    break 'outer;
                }
                offs[c] += 1;
                if offs[c] <= 1 {
                    break;
                }
                offs[c] = -1;
                c += 1;
            }
        }
        if !near {
            grid.entry(k).or_default().push(i);
            chosen.push(i);
        }
    }
    chosen
}

fn sphere_log_count(k: usize, m: f64) -> f64 {
    (2.0 * k as f64).ln() + (k as f64 - 1.0) * m.ln()
}

fn sphere_diam(k: usize, m: f64) -> f64 {
    if k > 1 {
        2.0 * ((k - 1) as f64).sqrt() / m
    } else {
        0.0
    }
}

/// Cube-face cells of the unit sphere: face = signed axis of the largest
/// coordinate (lowest axis on ties), the other coordinates divided by it are
/// cut into `m` equal pieces of `[-1, 1]`.
fn face_index(a: &[f64], m: f64, out: &mut Vec<f64>) {
    let (mut axis, mut best) = (0, -1.0);
    for (i, &v) in a.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            axis = i;
        }
    }
    out.push((2 * axis + usize::from(a[axis] < 0.0)) as f64);
    for (i, &v) in a.iter().enumerate() {
        if i != axis {
            let c = v / best;
            out.push(((c + 1.0) * 0.5 * m).floor().clamp(0.0, m - 1.0));
        }
    }
}

fn face_sample(k: usize, idx: &[f64], m: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let face = idx[0] as usize;
    let axis = face / 2;
    let mut p = vec![0.0; k];
    p[axis] = if face % 2 == 1 { -1.0 } else { 1.0 };
    let mut it = idx[1..].iter();
    for (i, pi) in p.iter_mut().enumerate() {
        if i != axis {
            let c = *it.next().expect("face index has k components");
            *pi = -1.0 + 2.0 * (c + rng.gen::<f64>()) / m;
        }
    }
    let n = norm2(&p);
    p.into_iter().map(|v| v / n).collect()
}

/// Closed-form cells of `D_n`: `m_rho` radial slabs times cube-face cells of
/// both unit spheres, sized so the ambient diameter is at most `target`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lattice {
    pub lo: f64,
    pub hi: f64,
    pub m_rho: f64,
    pub m_s: f64,
    pub m_u: f64,
    pub ds: usize,
    pub du: usize,
}

impl Lattice {
    pub fn new(ds: usize, du: usize, n: i64, target: f64) -> Self {
        // |[Es|Eu] w| ≤ √dim·|w| for unit columns
        let g = ((ds + du) as f64).sqrt();
        let lo = (-(n as f64) - 1.0).exp();
        let hi = (-(n as f64)).exp();
        let terms = 1 + usize::from(ds > 1) + usize::from(du > 1);
        // slack keeps the rounded diameter bound at or below the target
        let share = target * (1.0 - 1e-12) / (terms as f64 * g);
        let sphere = |k: usize| {
            if k > 1 {
                (2.0 * ((k - 1) as f64).sqrt() * hi / share).ceil().max(1.0)
            } else {
                1.0
            }
        };
        Self {
            lo,
            hi,
            m_rho: (SQRT_2 * (hi - lo) / share).ceil().max(1.0),
            m_s: sphere(ds),
            m_u: sphere(du),
            ds,
            du,
        }
    }

    pub fn resolvable(&self) -> bool {
        [self.m_rho, self.m_s, self.m_u].iter().all(|m| m.is_finite()) && self.h_rho() > 0.0
    }

    fn h_rho(&self) -> f64 {
        (self.hi - self.lo) / self.m_rho
    }

    pub fn log_count(&self) -> f64 {
        self.m_rho.ln() + sphere_log_count(self.ds, self.m_s) + sphere_log_count(self.du, self.m_u)
    }

    /// Upper bound on the ambient diameter of one cell.
    pub fn diameter_bound(&self) -> f64 {
        let g = ((self.ds + self.du) as f64).sqrt();
        g * (SQRT_2 * self.h_rho() + self.hi * (sphere_diam(self.ds, self.m_s) + sphere_diam(self.du, self.m_u)))
    }

    fn index(&self, vs: &[f64], vu: &[f64]) -> CellIndex {
        let (s, u) = (norm2(vs), norm2(vu));
        let rho = 0.5 * (s + u);
        let mut c = vec![((rho - self.lo) / self.h_rho()).floor().clamp(0.0, self.m_rho - 1.0)];
        let a: Vec<f64> = vs.iter().map(|v| v / s).collect();
        let b: Vec<f64> = vu.iter().map(|v| v / u).collect();
        face_index(&a, self.m_s, &mut c);
        face_index(&b, self.m_u, &mut c);
        CellIndex(c)
    }

    fn random_cell(&self, rng: &mut ChaCha8Rng) -> CellIndex {
        let mut c = vec![(rng.gen::<f64>() * self.m_rho).floor().min(self.m_rho - 1.0)];
        for (k, m) in [(self.ds, self.m_s), (self.du, self.m_u)] {
            c.push(rng.gen_range(0..2 * k) as f64);
            for _ in 1..k {
                c.push((rng.gen::<f64>() * m).floor().min(m - 1.0));
            }
        }
        CellIndex(c)
    }

    /// Chart coordinates of a uniform-ish random point of the cell.
    fn sample(&self, idx: &CellIndex, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let c = &idx.0;
        let rho = (self.lo + (c[0] + rng.gen::<f64>()) * self.h_rho()).min(self.hi);
        let a = face_sample(self.ds, &c[1..1 + self.ds], self.m_s, rng);
        let b = face_sample(self.du, &c[1 + self.ds..], self.m_u, rng);
        (a.into_iter().map(|v| v * rho).collect(), b.into_iter().map(|v| v * rho).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerCells {
    Voronoi { centers: Vec<Vec<f64>> },
    Lattice(Lattice),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerInfo {
    pub n: i64,
    pub r_n: f64,
    pub count: f64,
    pub log_count: f64,
    /// Measured on the construction sample for Voronoi layers, the
    /// closed-form cell bound for lattice layers.
    pub max_diameter: f64,
    /// `c0·β·(L′)^{-n}`.
    pub diameter_bound: f64,
    pub cells: LayerCells,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinedPartition {
    pub profile: SingularityProfile<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub beta: f64,
    pub n_max: i64,
    /// Lower bound `N0` for `L`, when the caller computed it.
    #[serde(rename = "N0")]
    pub n0_bound: Option<f64>,
    pub c0: f64,
    pub c1: f64,
    pub log_c1: f64,
    #[serde(rename = "Lp")]
    pub lp: f64,
    #[serde(rename = "Lpp")]
    pub lpp: f64,
    pub layers: Vec<LayerInfo>,
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn build_layer(
    profile: &SingularityProfile<f64>,
    n: i64,
    r_n: f64,
    samples: usize,
    materialize_cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LayerInfo, PartitionError> {
    let lat = Lattice::new(profile.ds(), profile.du(), n, r_n);
    if !lat.resolvable() || lat.log_count() > 700.0 {
        return Err(PartitionError::BudgetExceeded {
            layer: n,
            log_count: lat.log_count(),
        });
    }
    let hi = (-(n as f64)).exp();
    let voronoi = samples > 0 && lat.log_count() <= (materialize_cap as f64).ln() && r_n > 1e-9 * hi;
    if !voronoi {
        return Ok(LayerInfo {
            n,
            r_n,
            count: lat.log_count().exp(),
            log_count: lat.log_count(),
            max_diameter: lat.diameter_bound(),
            diameter_bound: r_n,
            cells: LayerCells::Lattice(lat),
        });
    }
    let pts: Vec<Vec<f64>> = (0..samples).map(|_| profile.layer_point(n, rng)).collect();
    // separation r_n/2 keeps every cell inside a ball of radius r_n/2
    let centers: Vec<Vec<f64>> = max_separated_set(&pts, 0.5 * r_n)
        .into_iter()
        .map(|i| pts[i].clone())
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, p) in pts.iter().enumerate() {
        members[nearest(&centers, p)].push(i);
    }
    let mut diam: f64 = 0.0;
    for m in &members {
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                diam = diam.max(dist2(&pts[i], &pts[j]));
            }
        }
    }
    let count = centers.len() as f64;
    Ok(LayerInfo {
        n,
        r_n,
        count,
        log_count: count.ln(),
        max_diameter: diam,
        diameter_bound: r_n,
        cells: LayerCells::Voronoi { centers },
    })
}

/// `ℬ_n` for `n0 < n ≤ n_max` with `r_n`, counts and diameters; `c1` is the
/// smallest constant with `#ℬ_n ≤ c1·(L″)^n` over the built layers.
pub fn build_refined(
    profile: &SingularityProfile<f64>,
    l: f64,
    beta: f64,
    samples_per_layer: usize,
    n_max: i64,
    rng_seed: u64,
) -> Result<RefinedPartition, PartitionError> {
    build_refined_with(profile, l, beta, samples_per_layer, n_max, rng_seed, MATERIALIZE_CAP)
}

pub fn build_refined_with(
    profile: &SingularityProfile<f64>,
    l: f64,
    beta: f64,
    samples_per_layer: usize,
    n_max: i64,
    rng_seed: u64,
    materialize_cap: usize,
) -> Result<RefinedPartition, PartitionError> {
    if !(l > 1.0) || !(beta > 0.0) {
        return Err(PartitionError::Invalid(format!("need L > 1 and beta > 0, got L = {l}, beta = {beta}")));
    }
    if n_max <= profile.n0 {
        return Err(PartitionError::Invalid(format!("n_max = {n_max} must exceed n0 = {}", profile.n0)));
    }
    let (c0, lp, lpp) = cell_constants(l, profile.k1, profile.l0, profile.dim());
    let mut layers = Vec::new();
    let mut log_c1 = f64::NEG_INFINITY;
    for n in profile.n0 + 1..=n_max {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let r_n = layer_radius(beta, l, profile.k1, profile.l0, n);
        let info = build_layer(profile, n, r_n, samples_per_layer, materialize_cap, &mut rng)?;
        log_c1 = log_c1.max(info.log_count - n as f64 * lpp.ln());
        layers.push(info);
    }
    Ok(RefinedPartition {
        profile: profile.clone(),
        l,
        beta,
        n_max,
        n0_bound: None,
        c0,
        c1: log_c1.exp(),
        log_c1,
        lp,
        lpp,
        layers,
    })
}

impl RefinedPartition {
    pub fn n0(&self) -> i64 {
        self.profile.n0
    }

    pub fn layer(&self, n: i64) -> Option<&LayerInfo> {
        if n <= self.n0() {
            return None;
        }
        self.layers.get((n - self.n0() - 1) as usize)
    }

    pub fn r_n(&self, n: i64) -> f64 {
        layer_radius(self.beta, self.l, self.profile.k1, self.profile.l0, n)
    }

    /// Lattice used for layer `n`, built on demand below `n_max`.
    fn lattice(&self, n: i64) -> Option<Lattice> {
        match self.layer(n).map(|l| &l.cells) {
            Some(LayerCells::Lattice(lat)) => Some(lat.clone()),
            Some(LayerCells::Voronoi { .. }) => None,
            None => Some(Lattice::new(self.profile.ds(), self.profile.du(), n, self.r_n(n))),
        }
    }

    /// Cell of a section point `y ∈ D_n`. Beyond f64 resolution the whole
    /// layer is one cell.
    pub fn cell_of(&self, n: i64, y: &[f64]) -> CellIndex {
        if let Some(LayerCells::Voronoi { centers }) = self.layer(n).map(|l| &l.cells) {
            return CellIndex(vec![nearest(centers, y) as f64]);
        }
        match self.lattice(n) {
            Some(lat) if lat.resolvable() => {
                let (vs, vu) = self.profile.chart(y);
                lat.index(&vs, &vu)
            }
            _ => CellIndex(Vec::new()),
        }
    }

    pub fn random_cell(&self, n: i64, rng: &mut ChaCha8Rng) -> CellIndex {
        match self.layer(n).map(|l| &l.cells) {
            Some(LayerCells::Voronoi { centers }) => CellIndex(vec![rng.gen_range(0..centers.len()) as f64]),
            _ => match self.lattice(n) {
                Some(lat) if lat.resolvable() => lat.random_cell(rng),
                _ => CellIndex(Vec::new()),
            },
        }
    }

    /// Random point of `D_n` in the given cell.
    pub fn point_in_cell(&self, n: i64, idx: &CellIndex, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.profile;
        if let Some(LayerCells::Voronoi { centers }) = self.layer(n).map(|l| &l.cells) {
            let j = idx.0[0] as usize;
            let c = &centers[j];
            let (cs, cu) = p.chart(c);
            let rho = norm2(&cs);
            let spread = 0.25 * self.r_n(n);
            for _ in 0..1000 {
                let a: Vec<f64> = cs.iter().map(|v| v + spread * (2.0 * rng.gen::<f64>() - 1.0)).collect();
                let b: Vec<f64> = cu.iter().map(|v| v + spread * (2.0 * rng.gen::<f64>() - 1.0)).collect();
                let rr = (rho + spread * (2.0 * rng.gen::<f64>() - 1.0)).clamp((-(n as f64) - 1.0).exp(), (-(n as f64)).exp());
                let (na, nb) = (norm2(&a), norm2(&b));
                let a: Vec<f64> = a.iter().map(|v| v * rr / na).collect();
                let b: Vec<f64> = b.iter().map(|v| v * rr / nb).collect();
                let y = p.from_chart(&a, &b);
                if shell_of(rr) == Some(n) && nearest(centers, &y) == j {
                    return y;
                }
            }
            return c.clone();
        }
        match self.lattice(n) {
            Some(lat) if lat.resolvable() && !idx.0.is_empty() => {
                let (a, b) = lat.sample(idx, rng);
                p.from_chart(&a, &b)
            }
            _ => p.layer_point(n, rng),
        }
    }

    /// `Σ n·μ(C_n)`-style helper: `log #ℬ_n`, closed form beyond `n_max`.
    pub fn log_count(&self, n: i64) -> f64 {
        match self.layer(n) {
            Some(l) => l.log_count,
            None => Lattice::new(self.profile.ds(), self.profile.du(), n, self.r_n(n)).log_count(),
        }
    }
}

/// `C_n = φ_{[0,1)}(D_n)` for `n > n0`, plus the complement.
#[derive(Debug, Clone)]
pub struct CoarsePartition {
    pub profile: SingularityProfile<f64>,
}

pub fn build_coarse(profile: &SingularityProfile<f64>) -> CoarsePartition {
    CoarsePartition {
        profile: profile.clone(),
    }
}

impl CoarsePartition {
    /// Box-norm range `[e^{-(n+1)}, e^{-n})` of the base `D_n`.
    pub fn layer_bounds(&self, n: i64) -> Option<(f64, f64)> {
        (n > self.profile.n0).then(|| ((-(n as f64) - 1.0).exp(), (-(n as f64)).exp()))
    }

    /// `Some((n, s))` when `x = φ_s(y)` with `y ∈ D_n`, `n > n0`, `0 ≤ s < 1`.
    pub fn member(&self, spec: &FieldSpec<f64>, x: &[f64]) -> Option<(i64, f64)> {
        match locate_passage(spec, &self.profile, x) {
            PassageLocation::Crossing { layer, s, .. } if layer > self.profile.n0 && (0.0..1.0).contains(&s) => {
                Some((layer, s))
            }
            _ => None,
        }
    }
}

/// Where the passage of a point through `B_r(σ)` crosses `D_σ`.
#[derive(Debug, Clone, PartialEq)]
pub enum PassageLocation {
    /// `x = φ_s(point)` with `point ∈ D_layer`.
    Crossing { layer: i64, s: f64, point: Vec<f64> },
    /// The passage leaves `B_r(σ)` on both sides without crossing, or `x`
    /// is outside `B_r(σ)`.
    NoCrossing,
    /// The crossing could not be computed (time budget, singular point).
    Unresolved,
}

enum WalkEnd {
    Crossing(f64, Vec<f64>, i64),
    Exited,
    Unresolved,
}

fn walk(spec: &FieldSpec<f64>, profile: &SingularityProfile<f64>, x: &[f64], backward: bool, budget: f64) -> WalkEnd {
    let mut w = OrbitWalker::new(spec, profile, x, backward);
    let mut ev = Vec::new();
    while w.tau() < budget {
        if w.step(budget, &mut ev).is_err() {
            return WalkEnd::Unresolved;
        }
        for e in ev.drain(..) {
            match e {
                OrbitEvent::Crossing(c) => return WalkEnd::Crossing(c.time, c.point, c.layer),
                OrbitEvent::Exit { .. } => return WalkEnd::Exited,
                OrbitEvent::Entry { .. } => {}
            }
        }
    }
    WalkEnd::Unresolved
}

pub fn locate_passage(spec: &FieldSpec<f64>, profile: &SingularityProfile<f64>, x: &[f64]) -> PassageLocation {
    let (vs, vu) = profile.chart(x);
    let (s, u) = (norm2(&vs), norm2(&vu));
    let b = s.max(u);
    if !(b < profile.r) {
        return PassageLocation::NoCrossing;
    }
    if !(norm2(&eval_field(spec, x)) >= spec.regular_threshold) {
        return PassageLocation::Unresolved;
    }
    if (s - u).abs() <= SECTION_TOL * b {
        return match shell_of(b) {
            Some(n) => PassageLocation::Crossing {
                layer: n,
                s: 0.0,
                point: x.to_vec(),
            },
            None => PassageLocation::Unresolved,
        };
    }
    let budget = exit_budget(profile, b);
    match walk(spec, profile, x, true, budget) {
        WalkEnd::Crossing(t, p, n) => {
            return PassageLocation::Crossing { layer: n, s: t, point: p };
        }
        WalkEnd::Unresolved => return PassageLocation::Unresolved,
        WalkEnd::Exited => {}
    }
    match walk(spec, profile, x, false, budget) {
        WalkEnd::Crossing(t, p, n) => PassageLocation::Crossing { layer: n, s: -t, point: p },
        WalkEnd::Exited => PassageLocation::NoCrossing,
        WalkEnd::Unresolved => PassageLocation::Unresolved,
    }
}

/// Membership in `O(σ)` (`cut = None`) or `O^N(σ)` (`cut = Some(N)`), read
/// from the layer of the passage's crossing. Unresolved passages count as
/// members.
pub fn in_o_region(spec: &FieldSpec<f64>, profile: &SingularityProfile<f64>, x: &[f64], cut: Option<i64>) -> bool {
    let floor = cut.unwrap_or(profile.n0).max(profile.n0);
    match locate_passage(spec, profile, x) {
        PassageLocation::Crossing { layer, .. } => layer > floor,
        PassageLocation::NoCrossing => false,
        PassageLocation::Unresolved => true,
    }
}

fn cone_element(profile: &SingularityProfile<f64>, x: &[f64], sigma: usize) -> ElementId {
    let (vs, vu) = profile.chart(x);
    if norm2(&vs) < norm2(&vu) {
        ElementId::BMinus { sigma }
    } else {
        ElementId::BPlus { sigma }
    }
}

/// Element of `𝒜_σ` containing `x`, or `None` for `O(σ)^c`.
pub fn classify_near(spec: &FieldSpec<f64>, rp: &RefinedPartition, sigma: usize, x: &[f64]) -> Option<ElementId> {
    classify_near_traced(spec, rp, sigma, x).map(|(id, _)| id)
}

/// As [`classify_near`], also returning the layer of the passage's
/// crossing (`i64::MAX` when the crossing could not be computed).
pub fn classify_near_traced(
    spec: &FieldSpec<f64>,
    rp: &RefinedPartition,
    sigma: usize,
    x: &[f64],
) -> Option<(ElementId, i64)> {
    let p = &rp.profile;
    if !(p.box_norm(x) < p.r) {
        return None;
    }
    match locate_passage(spec, p, x) {
        PassageLocation::Crossing { layer, s, point } => {
            if layer <= p.n0 {
                None
            } else if (0.0..1.0).contains(&s) {
                let j = rp.cell_of(layer, &point);
                Some((ElementId::LayerCell { sigma, n: layer, j }, layer))
            } else {
                Some((cone_element(p, x, sigma), layer))
            }
        }
        PassageLocation::NoCrossing => None,
        PassageLocation::Unresolved => Some((cone_element(p, x, sigma), i64::MAX)),
    }
}

/// `B(x) = φ_{(-1/4, 1/4)}(N_x(radius))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowBox {
    pub center: Vec<f64>,
    pub field: Vec<f64>,
    pub radius: f64,
    /// Euclidean distance from the center beyond which no point belongs.
    pub reach: f64,
}

const FLOWBOX_HALF: f64 = 0.25;

fn flowbox_contains(spec: &FieldSpec<f64>, fb: &FlowBox, y: &[f64]) -> bool {
    if dist2(y, &fb.center) > fb.reach {
        return false;
    }
    let g = |w: &[f64]| w.iter().zip(&fb.center).zip(&fb.field).map(|((a, c), f)| (a - c) * f).sum::<f64>();
    let gy = g(y);
    if gy == 0.0 {
        return dist2(y, &fb.center) <= fb.radius;
    }
    let backward = gy > 0.0;
    let ev = |w: &[f64]| if backward { -g(w) } else { g(w) };
    match integrate_until(spec, y, backward, FLOWBOX_HALF, ev, 1e-12, |_, _| {}) {
        Ok(Some(h)) => h.tau < FLOWBOX_HALF && dist2(&h.state, &fb.center) <= fb.radius,
        _ => false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularOptions {
    pub samples: usize,
    pub max_cells: usize,
    pub rng_seed: u64,
}

impl Default for RegularOptions {
    fn default() -> Self {
        Self {
            samples: 20_000,
            max_cells: 50_000,
            rng_seed: 0,
        }
    }
}

/// Flow boxes covering `C_reg`, refined by intersection signature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularCover {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub beta: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub boxes: Vec<FlowBox>,
    /// Cell `k` is the set of points covered by exactly the boxes
    /// `signatures[k]`.
    pub signatures: Vec<Vec<u32>>,
    /// Fraction of a fresh `C_reg` sample covered by some box.
    pub coverage: f64,
    #[serde(skip)]
    lookup: BTreeMap<Vec<u32>, usize>,
    #[serde(skip)]
    grid: BoxGrid,
}

#[derive(Debug, Clone, Default)]
struct BoxGrid {
    per_dim: usize,
    lo: Vec<f64>,
    width: Vec<f64>,
    cells: Vec<Vec<u32>>,
}

impl BoxGrid {
    fn new(lo: &[f64], hi: &[f64]) -> Self {
        let d = lo.len();
        let per_dim = match d {
            0..=2 => 64,
            3 => 24,
            _ => 6,
        };
        Self {
            per_dim,
            lo: lo.to_vec(),
            width: lo.iter().zip(hi).map(|(a, b)| (b - a) / per_dim as f64).collect(),
            cells: vec![Vec::new(); per_dim.pow(d as u32)],
        }
    }

    fn coord(&self, i: usize, v: f64) -> usize {
        (((v - self.lo[i]) / self.width[i]).floor().max(0.0) as usize).min(self.per_dim - 1)
    }

    fn flat(&self, c: &[usize]) -> usize {
        c.iter().rev().fold(0, |acc, &v| acc * self.per_dim + v)
    }

    fn insert(&mut self, id: u32, center: &[f64], reach: f64) {
        let lo: Vec<usize> = center.iter().enumerate().map(|(i, &v)| self.coord(i, v - reach)).collect();
        let hi: Vec<usize> = center.iter().enumerate().map(|(i, &v)| self.coord(i, v + reach)).collect();
        let mut c = lo.clone();
        loop {
            let f = self.flat(&c);
            self.cells[f].push(id);
            let mut k = 0;
            loop {
                if k == c.len() {
                    return;
                }
                c[k] += 1;
                if c[k] <= hi[k] {
                    break;
                }
                c[k] = lo[k];
                k += 1;
            }
        }
    }

    fn candidates(&self, x: &[f64]) -> &[u32] {
        let c: Vec<usize> = x.iter().enumerate().map(|(i, &v)| self.coord(i, v)).collect();
        &self.cells[self.flat(&c)]
    }
}

fn inside_box(lo: &[f64], hi: &[f64], x: &[f64]) -> bool {
    x.iter().zip(lo.iter().zip(hi)).all(|(&v, (&a, &b))| v >= a && v <= b)
}

impl RegularCover {
    fn covering(&self, spec: &FieldSpec<f64>, x: &[f64]) -> Vec<u32> {
        if !inside_box(&self.lo, &self.hi, x) {
            return Vec::new();
        }
        let mut ids: Vec<u32> = self
            .grid
            .candidates(x)
            .iter()
            .copied()
            .filter(|&i| flowbox_contains(spec, &self.boxes[i as usize], x))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Index of the regular cell containing `x`. Signatures not met during
    /// construction fall back to the cell of their lowest box, points covered
    /// by no box to the cell of the nearest center.
    pub fn cell_of(&self, spec: &FieldSpec<f64>, x: &[f64]) -> usize {
        let sig = self.covering(spec, x);
        if let Some(&k) = self.lookup.get(&sig) {
            return k;
        }
        let first = match sig.first() {
            Some(&i) => i,
            None => nearest(&self.boxes.iter().map(|b| b.center.clone()).collect::<Vec<_>>(), x) as u32,
        };
        self.lookup[&vec![first]]
    }

    /// Rebuilds the lookup structures after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self.signatures.iter().cloned().enumerate().map(|(k, s)| (s, k)).collect();
        self.grid = BoxGrid::new(&self.lo, &self.hi);
        for (i, b) in self.boxes.iter().enumerate() {
            self.grid.insert(i as u32, &b.center, b.reach);
        }
    }

    /// Generating box of a cell (its lowest box).
    pub fn generator(&self, k: usize) -> &FlowBox {
        &self.boxes[self.signatures[k][0] as usize]
    }
}

fn lipschitz_estimate(spec: &FieldSpec<f64>, lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let mut lip: f64 = 0.0;
    for _ in 0..256 {
        let x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.gen::<f64>()).collect();
        lip = lip.max(spec.jacobian(&x).frobenius());
    }
    1.2 * lip
}

/// Greedy cover of `C_reg = box ∖ ⋃ O(σ)` by flow boxes with normal radius
/// `β/(2L)·|X|`, placed at sample points not yet covered, then refined by
/// intersection signature over the same sample.
pub fn build_regular(
    spec: &FieldSpec<f64>,
    refined: &[RefinedPartition],
    beta: f64,
    l: f64,
    lo: &[f64],
    hi: &[f64],
    opts: &RegularOptions,
) -> Result<RegularCover, PartitionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let lip = lipschitz_estimate(spec, lo, hi, &mut rng);
    let in_reg = |x: &[f64]| {
        norm2(&eval_field(spec, x)) >= spec.regular_threshold
            && refined.iter().all(|rp| !in_o_region(spec, &rp.profile, x, None))
    };
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.gen::<f64>()).collect() };
    let mut samples = Vec::with_capacity(opts.samples);
    while samples.len() < opts.samples {
        let x = draw(&mut rng);
        if in_reg(&x) {
            samples.push(x);
        }
    }
    let mut cover = RegularCover {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        beta,
        l,
        boxes: Vec::new(),
        signatures: Vec::new(),
        coverage: 0.0,
        lookup: BTreeMap::new(),
        grid: BoxGrid::new(lo, hi),
    };
    for x in &samples {
        if !cover.covering(spec, x).is_empty() {
            continue;
        }
        if cover.boxes.len() >= opts.max_cells {
            return Err(PartitionError::CoverFailure(opts.max_cells));
        }
        let field = eval_field(spec, x);
        let radius = beta / (2.0 * l) * norm2(&field);
        let mut ext: f64 = 0.0;
        for k in 1..=8 {
            let t = FLOWBOX_HALF * k as f64 / 8.0;
            for sgn in [1.0, -1.0] {
                if let Ok(y) = integrate_flow(spec, x, sgn * t) {
                    ext = ext.max(dist2(&y, x));
                }
            }
        }
        let reach = 1.1 * ext + (lip * FLOWBOX_HALF).exp() * radius;
        let id = cover.boxes.len() as u32;
        cover.grid.insert(id, x, reach);
        cover.boxes.push(FlowBox {
            center: x.clone(),
            field,
            radius,
            reach,
        });
    }
    let mut lookup: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    let mut signatures = Vec::new();
    for i in 0..cover.boxes.len() as u32 {
        lookup.insert(vec![i], signatures.len());
        signatures.push(vec![i]);
    }
    for x in &samples {
        let sig = cover.covering(spec, x);
        if !sig.is_empty() && !lookup.contains_key(&sig) {
            lookup.insert(sig.clone(), signatures.len());
            signatures.push(sig);
        }
    }
    cover.lookup = lookup;
    cover.signatures = signatures;
    let fresh = (opts.samples / 4).max(1);
    let mut hit = 0;
    let mut seen = 0;
    while seen < fresh {
        let x = draw(&mut rng);
        if in_reg(&x) {
            seen += 1;
            hit += usize::from(!cover.covering(spec, &x).is_empty());
        }
    }
    cover.coverage = hit as f64 / fresh as f64;
    Ok(cover)
}

/// `𝒜 = 𝒜_reg ∨ ⋁_σ 𝒜_σ` over a compact box, possibly truncated.
#[derive(Debug, Clone)]
pub struct GlobalPartition {
    pub spec: FieldSpec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub refined: Vec<RefinedPartition>,
    /// `None`: `C_reg` is kept as the single element `RegularCell(0)`.
    pub regular: Option<RegularCover>,
    pub truncation: Option<i64>,
}

pub fn assemble_global(
    spec: &FieldSpec<f64>,
    lo: &[f64],
    hi: &[f64],
    regular: Option<RegularCover>,
    refined: Vec<RefinedPartition>,
) -> Result<GlobalPartition, PartitionError> {
    if lo.len() != spec.dim || hi.len() != spec.dim || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(PartitionError::Invalid("box bounds do not match the field".into()));
    }
    if let Some(first) = refined.first() {
        if refined.iter().any(|rp| rp.beta != first.beta || rp.l != first.l) {
            return Err(PartitionError::Invalid("singular partitions built with different beta or L".into()));
        }
    }
    if let Some(rc) = &regular {
        for (i, b) in rc.boxes.iter().enumerate() {
            for (s, rp) in refined.iter().enumerate() {
                if in_o_region(spec, &rp.profile, &b.center, None) {
                    return Err(PartitionError::OverlapDetected(i, s));
                }
            }
        }
    }
    Ok(GlobalPartition {
        spec: spec.clone(),
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        refined,
        regular,
        truncation: None,
    })
}

/// Glues every `LayerCell(σ, m, ·)` with `m > N` into `TailCell(σ)`.
pub fn truncate(gp: &GlobalPartition, cut: i64) -> GlobalPartition {
    let mut out = gp.clone();
    out.truncation = Some(gp.truncation.map_or(cut, |t| t.min(cut)));
    out
}

/// Element containing `x`: `O(σ)` regions first (in singularity order), then
/// regular cells, then `Outside`.
pub fn classify(gp: &GlobalPartition, x: &[f64]) -> ElementId {
    classify_traced(gp, x).id
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub id: ElementId,
    /// `(σ, layer)` of the passage crossing when `x ∈ O(σ)`.
    pub passage: Option<(usize, i64)>,
}

pub fn classify_traced(gp: &GlobalPartition, x: &[f64]) -> Classified {
    if !inside_box(&gp.lo, &gp.hi, x) {
        return Classified {
            id: ElementId::Outside,
            passage: None,
        };
    }
    for (s, rp) in gp.refined.iter().enumerate() {
        if let Some((id, layer)) = classify_near_traced(&gp.spec, rp, s, x) {
            let id = match gp.truncation {
                Some(cut) => id.truncated(cut),
                None => id,
            };
            return Classified {
                id,
                passage: Some((s, layer)),
            };
        }
    }
    let id = match &gp.regular {
        Some(rc) => ElementId::RegularCell {
            k: rc.cell_of(&gp.spec, x),
        },
        None => ElementId::RegularCell { k: 0 },
    };
    Classified { id, passage: None }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Itinerary {
    pub start: Vec<f64>,
    pub j_min: i64,
    pub j_max: i64,
    /// `ids[k] = 𝒜(φ_{j_min + k}(start))`.
    pub ids: Vec<ElementId>,
}

/// States `φ_j(x)` for `j_min ≤ j ≤ j_max`.
pub fn orbit_at_integers(spec: &FieldSpec<f64>, x: &[f64], j_min: i64, j_max: i64) -> Result<Vec<Vec<f64>>, FlowError> {
    let mut back = Vec::new();
    if j_min < 0 {
        let mut st = Stepper::new(spec, spec, x, true);
        for k in 1..=(-j_min) {
            st.run_to(k as f64)?;
            if -k <= j_max {
                back.push(st.state().to_vec());
            }
        }
    }
    back.reverse();
    let mut out = back;
    if j_min <= 0 && 0 <= j_max {
        out.push(x.to_vec());
    }
    if j_max > 0 {
        let mut st = Stepper::new(spec, spec, x, false);
        for k in 1..=j_max {
            st.run_to(k as f64)?;
            if k >= j_min {
                out.push(st.state().to_vec());
            }
        }
    }
    Ok(out)
}

pub fn itinerary(gp: &GlobalPartition, x: &[f64], j_min: i64, j_max: i64) -> Result<Itinerary, PartitionError> {
    if j_max < j_min {
        return Err(PartitionError::Invalid(format!("empty window [{j_min}, {j_max}]")));
    }
    let states = orbit_at_integers(&gp.spec, x, j_min, j_max)?;
    Ok(Itinerary {
        start: x.to_vec(),
        j_min,
        j_max,
        ids: states.iter().map(|y| classify(gp, y)).collect(),
    })
}

/// CSV columns: `j, kind, sigma, n, cell` (empty where not applicable).
pub fn write_itinerary_csv<W: Write>(it: &Itinerary, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["j", "kind", "sigma", "n", "cell"])?;
    for (k, id) in it.ids.iter().enumerate() {
        let j = (it.j_min + k as i64).to_string();
        let sigma = id.sigma().map(|s| s.to_string()).unwrap_or_default();
        let n = id.layer().map(|n| n.to_string()).unwrap_or_default();
        let cell = match id {
            ElementId::LayerCell { j, .. } => j.to_string(),
            ElementId::RegularCell { k } => k.to_string(),
            _ => String::new(),
        };
        w.write_record([j.as_str(), id.tag(), sigma.as_str(), n.as_str(), cell.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Serializable summary of a global partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionMetadata {
    pub field: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub truncation: Option<i64>,
    pub singular: Vec<SingularSummary>,
    pub regular_cells: Option<usize>,
    pub regular_boxes: Option<usize>,
    pub regular_coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularSummary {
    pub sigma: Vec<f64>,
    pub n0: i64,
    #[serde(rename = "L")]
    pub l: f64,
    pub beta: f64,
    #[serde(rename = "N0")]
    pub n0_bound: Option<f64>,
    pub c0: f64,
    pub c1: f64,
    #[serde(rename = "Lp")]
    pub lp: f64,
    #[serde(rename = "Lpp")]
    pub lpp: f64,
    pub layers: Vec<LayerSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSummary {
    pub n: i64,
    pub r_n: f64,
    pub log_count: f64,
    pub max_diameter: f64,
    pub diameter_bound: f64,
    pub materialized: bool,
}

impl GlobalPartition {
    pub fn metadata(&self) -> PartitionMetadata {
        PartitionMetadata {
            field: self.spec.name(),
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            truncation: self.truncation,
            singular: self
                .refined
                .iter()
                .map(|rp| SingularSummary {
                    sigma: rp.profile.sigma.clone(),
                    n0: rp.n0(),
                    l: rp.l,
                    beta: rp.beta,
                    n0_bound: rp.n0_bound,
                    c0: rp.c0,
                    c1: rp.c1,
                    lp: rp.lp,
                    lpp: rp.lpp,
                    layers: rp
                        .layers
                        .iter()
                        .map(|l| LayerSummary {
                            n: l.n,
                            r_n: l.r_n,
                            log_count: l.log_count,
                            max_diameter: l.max_diameter,
                            diameter_bound: l.diameter_bound,
                            materialized: matches!(l.cells, LayerCells::Voronoi { .. }),
                        })
                        .collect(),
                })
                .collect(),
            regular_cells: self.regular.as_ref().map(|r| r.signatures.len()),
            regular_boxes: self.regular.as_ref().map(|r| r.boxes.len()),
            regular_coverage: self.regular.as_ref().map(|r| r.coverage),
        }
    }
}

/// Normal component of `y − x` relative to `X(x)`; used by tests and the
/// regular-cell tube check.
pub fn normal_offset_norm(spec: &FieldSpec<f64>, x: &[f64], y: &[f64]) -> f64 {
    let f = eval_field(spec, x);
    let d = sub(y, x);
    let c = dot(&d, &f) / dot(&f, &f);
    let n: Vec<f64> = d.iter().zip(&f).map(|(a, b)| a - c * b).collect();
    norm2(&n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::singular::{build_profile, ProfileOptions};
    use proptest::prelude::*;
    use rand::Rng;

    fn saddle() -> (FieldSpec<f64>, SingularityProfile<f64>) {
        let s = FieldSpec::linear_saddle(1.0, 1.0);
        let o = ProfileOptions {
            beta1: Some(1.0),
            r: Some((-2.0f64).exp()),
            lipschitz_samples: 2000,
            passage_samples: 8,
            ..Default::default()
        };
        let p = build_profile(&s, &[0.01, 0.01], &o).unwrap();
        (s, p)
    }

    fn saddle_global(n_max: i64) -> GlobalPartition {
        let (s, p) = saddle();
        let rp = build_refined(&p, 3.0, 0.05, 0, n_max, 1).unwrap();
        assemble_global(&s, &[-0.5, -0.5], &[0.5, 0.5], None, vec![rp]).unwrap()
    }

    /// Point of `D_n` with chart coordinates `(ρ, ρ)` in the unstable-first axes.
    fn diag_point(p: &SingularityProfile<f64>, rho: f64) -> Vec<f64> {
        p.from_chart(&[rho], &[rho])
    }

    #[test]
    fn layer_radius_example() {
        let r = layer_radius(0.01, 3.0, 2.0, 1.0, 3);
        let oracle = 0.01 / 729.0 / 4.0f64.exp();
        assert!((r / oracle - 1.0).abs() < 1e-12);
        assert!((r - 2.512e-7).abs() < 5e-10);
        let (c0, lp, lpp) = cell_constants(3.0, 2.0, 1.0, 2);
        assert!((c0 * 0.01 * lp.powi(-3) / r - 1.0).abs() < 1e-12);
        assert!((lpp - (9.0 * std::f64::consts::E).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn separated_set_example() {
        let pts: Vec<Vec<f64>> = [0.0, 0.4, 0.9, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
        assert_eq!(max_separated_set(&pts, 0.5), vec![0, 2, 4]);
        let line: Vec<Vec<f64>> = [0.0, 0.5, 1.0].iter().map(|&v| vec![v]).collect();
        assert_eq!(max_separated_set(&line, 0.6), vec![0, 2]);
        // no 3-subset of the line is 0.6-separated, so 2 is the maximum
        assert!(dist2(&line[0], &line[1]) <= 0.6 && dist2(&line[1], &line[2]) <= 0.6);
        assert_eq!(max_separated_set(&line[..1], 0.6), vec![0]);
        assert_eq!(max_separated_set(&line, 0.1), vec![0, 1, 2]);
    }

    #[test]
    fn o_region_examples() {
        let (s, p) = saddle();
        let d = |n: i64| diag_point(&p, (-(n as f64) - 0.5).exp());
        assert!(in_o_region(&s, &p, &d(9), Some(8)));
        assert!(!in_o_region(&s, &p, &d(8), Some(8)));
        assert!(in_o_region(&s, &p, &d(8), None));
        assert!(!in_o_region(&s, &p, &d(5), None));
        let x = integrate_flow(&s, &d(9), 2.0).unwrap();
        assert!(in_o_region(&s, &p, &x, Some(8)));
        assert!(!in_o_region(&s, &p, &[0.3, 0.3], None));
    }

    proptest! {
        #[test]
        fn separated_set_is_separated_and_maximal(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..120),
            r in 0.05f64..0.6,
        ) {
            let c = max_separated_set(&pts, r);
            for (a, &i) in c.iter().enumerate() {
                for &j in &c[a + 1..] {
                    prop_assert!(dist2(&pts[i], &pts[j]) > r);
                }
            }
            for p in &pts {
                prop_assert!(c.iter().any(|&i| dist2(&pts[i], p) <= r));
            }
        }

        #[test]
        fn lattice_cells_respect_diameter(seed in 0u64..1000, n in 6i64..40, ds in 1usize..3, du in 1usize..3) {
            let target = 1e-2 * (-(n as f64)).exp();
            let lat = Lattice::new(ds, du, n, target);
            prop_assert!(lat.diameter_bound() <= target * (1.0 + 1e-12));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = lat.random_cell(&mut rng);
            let (a1, b1) = lat.sample(&idx, &mut rng);
            let (a2, b2) = lat.sample(&idx, &mut rng);
            prop_assert_eq!(lat.index(&a1, &b1), idx.clone());
            prop_assert_eq!(lat.index(&a2, &b2), idx);
            let mut d = 0.0;
            for (x, y) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
                d += (x - y) * (x - y);
            }
            // chart columns are orthonormal here, so chart distance is ambient
            prop_assert!(d.sqrt() <= lat.diameter_bound());
        }

        #[test]
        fn o_regions_nest(u in -0.13f64..0.13, v in -0.13f64..0.13) {
            let (s, p) = saddle();
            let x = [u, v];
            let deep = in_o_region(&s, &p, &x, Some(9));
            let mid = in_o_region(&s, &p, &x, Some(7));
            let all = in_o_region(&s, &p, &x, None);
            prop_assert!(!deep || mid);
            prop_assert!(!mid || all);
        }
    }

    #[test]
    fn lattice_count_matches_bound() {
        let lat = Lattice::new(1, 2, 10, 1e-8);
        let direct = lat.m_rho * 2.0 * 4.0 * lat.m_u;
        assert!((lat.log_count() - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn coarse_membership_examples() {
        let (s, p) = saddle();
        let c = build_coarse(&p);
        let y = diag_point(&p, (-7.5f64).exp());
        let x = integrate_flow(&s, &y, 0.5).unwrap();
        let (n, t) = c.member(&s, &x).unwrap();
        assert_eq!(n, 7);
        assert!((t - 0.5).abs() < 1e-6);
        let x = integrate_flow(&s, &y, 1.5).unwrap();
        assert!(c.member(&s, &x).is_none());
        assert_eq!(c.member(&s, &y), Some((7, 0.0)));
        // layer 4 is inside B_r but not above n0
        let y = diag_point(&p, (-4.5f64).exp());
        assert!(c.member(&s, &y).is_none());
    }

    #[test]
    fn classify_examples() {
        let gp = saddle_global(12);
        assert_eq!(classify(&gp, &[0.0, 0.0]), ElementId::BPlus { sigma: 0 });
        let it = itinerary(&gp, &[0.0, 0.0], -3, 3).unwrap();
        assert!(it.ids.iter().all(|e| *e == ElementId::BPlus { sigma: 0 }));
        assert_eq!(it.ids.len(), 7);
        assert_eq!(classify(&gp, &[3.0, 0.0]), ElementId::Outside);
        assert_eq!(classify(&gp, &[0.4, 0.4]), ElementId::RegularCell { k: 0 });
        let p = &gp.refined[0].profile;
        let y = diag_point(p, (-8.5f64).exp());
        match classify(&gp, &y) {
            ElementId::LayerCell { sigma: 0, n: 8, .. } => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(classify(&gp, &y), classify(&gp, &y));
        let before = integrate_flow(&gp.spec, &y, -0.5).unwrap();
        assert_eq!(classify(&gp, &before), ElementId::BPlus { sigma: 0 });
        let after = integrate_flow(&gp.spec, &y, 1.5).unwrap();
        assert_eq!(classify(&gp, &after), ElementId::BMinus { sigma: 0 });
    }

    #[test]
    fn truncation_composes() {
        let gp = saddle_global(14);
        let a = truncate(&truncate(&gp, 10), 8);
        assert_eq!(a.truncation, Some(8));
        assert_eq!(truncate(&truncate(&gp, 8), 10).truncation, Some(8));
        let p = &gp.refined[0].profile;
        let y = diag_point(p, (-12.5f64).exp());
        assert_eq!(classify(&a, &y), ElementId::TailCell { sigma: 0 });
        let y = diag_point(p, (-7.5f64).exp());
        assert!(matches!(classify(&a, &y), ElementId::LayerCell { n: 7, .. }));
        // truncation only merges elements
        let full = classify(&gp, &y);
        assert_eq!(full.truncated(8), classify(&a, &y));
    }

    #[test]
    fn saddle_itinerary_has_expected_blocks() {
        let gp = saddle_global(14);
        let p = &gp.refined[0].profile;
        let n = 9;
        let y = diag_point(p, (-(n as f64) - 0.5).exp());
        let x = integrate_flow(&gp.spec, &y, -2.5).unwrap();
        let it = itinerary(&gp, &x, 0, 12).unwrap();
        let tags: Vec<&str> = it.ids.iter().map(|e| e.tag()).collect();
        assert_eq!(&tags[..3], &["b_plus"; 3]);
        assert_eq!(tags[3], "layer_cell");
        assert_eq!(it.ids[3].layer(), Some(n));
        // the exit from B_r after the crossing takes about n - 1.5 time units
        let minus = tags[4..].iter().take_while(|t| **t == "b_minus").count();
        assert!((minus as i64 - (n - 2)).abs() <= 1, "b_minus block {minus}");
        assert_eq!(tags[4 + minus], "regular");
        let mut buf = Vec::new();
        write_itinerary_csv(&it, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("j,kind,sigma,n,cell\n0,b_plus,0,,\n"));
    }

    #[test]
    fn voronoi_layer_cells_are_small() {
        let (_, p) = saddle();
        let rp = build_refined(&p, 1.01, 1.0, 600, 8, 3).unwrap();
        let l = rp.layer(6).unwrap();
        assert!(matches!(l.cells, LayerCells::Voronoi { .. }));
        assert!(l.max_diameter <= l.r_n);
        assert!(l.count >= 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let j = rp.random_cell(6, &mut rng);
            let y = rp.point_in_cell(6, &j, &mut rng);
            assert_eq!(rp.cell_of(6, &y), j);
        }
        assert!(rp.log_c1.is_finite());
    }

    #[test]
    fn unresolvable_layer_is_reported() {
        let (_, p) = saddle();
        let e = build_refined(&p, 1e200, 1.0, 0, 8, 0).unwrap_err();
        assert!(matches!(e, PartitionError::BudgetExceeded { .. }));
    }

    #[test]
    fn regular_cover_cells_sit_in_their_boxes() {
        let (s, p) = saddle();
        let rp = build_refined(&p, 3.0, 0.2, 0, 10, 1).unwrap();
        let lo = [0.2, 0.2];
        let hi = [0.4, 0.4];
        let opts = RegularOptions {
            samples: 400,
            max_cells: 5000,
            rng_seed: 2,
        };
        let rc = build_regular(&s, std::slice::from_ref(&rp), 0.2, 3.0, &lo, &hi, &opts).unwrap();
        assert!(rc.coverage > 0.95, "coverage {}", rc.coverage);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + (b - a) * rng.gen::<f64>()).collect();
            let sig = rc.covering(&s, &x);
            if sig.is_empty() || !rc.lookup.contains_key(&sig) {
                continue;
            }
            let k = rc.cell_of(&s, &x);
            assert!(flowbox_contains(&s, rc.generator(k), &x));
        }
        let gp = assemble_global(&s, &lo, &hi, Some(rc.clone()), vec![rp]).unwrap();
        assert!(matches!(classify(&gp, &[0.3, 0.3]), ElementId::RegularCell { .. }));
        let json = serde_json::to_string(&rc).unwrap();
        let mut back: RegularCover = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.cell_of(&s, &[0.3, 0.31]), rc.cell_of(&s, &[0.3, 0.31]));
    }
}
