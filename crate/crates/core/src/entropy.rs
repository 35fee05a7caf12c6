//! Empirical measures over partition elements, Shannon and block entropies,
//! Mañé's bound, and the measured side of the tower-sum, entropy and
//! truncation inequalities.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{FlowError, Stepper};
use crate::partition::{classify_traced, ElementId, GlobalPartition, RefinedPartition};
use crate::report::fmt_f64;
use crate::scalar::norm2;
use crate::section::shell_of;
use crate::singular::SingularityProfile;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("{k}-blocks have average occupancy {occupancy:.1}, need at least {required}")]
    InsufficientData { k: usize, occupancy: f64, required: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Minimum average number of samples per observed `k_max`-block.
pub const MIN_OCCUPANCY: f64 = 50.0;

/// `−Σ w log w` with `0 log 0 = 0`.
pub fn entropy_of<'a>(weights: impl IntoIterator<Item = &'a f64>) -> f64 {
    // `+ 0.0` turns a `−0` from `−1·ln 1` into `0`
    weights.into_iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum::<f64>() + 0.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureSource {
    pub orbits: usize,
    /// Orbits dropped after an integration failure.
    pub dropped: usize,
    /// Orbits that left the chart domain; their later samples count as `Outside`.
    pub escaped: usize,
    pub horizon: f64,
    pub burn_in: f64,
    pub samples: usize,
}

/// Probability weights on partition elements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmpiricalMeasure {
    pub weights: BTreeMap<ElementId, f64>,
    /// `k ↦ (k-block ↦ weight)`.
    pub blocks: BTreeMap<usize, BTreeMap<Vec<ElementId>, f64>>,
    /// `σ ↦ (layer ↦ weight)` over points of `O(σ)`, by the layer of their
    /// passage's crossing (`i64::MAX` for unresolved passages).
    pub o_layers: BTreeMap<usize, BTreeMap<i64, f64>>,
    pub source: MeasureSource,
}

#[derive(Serialize, Deserialize)]
struct WeightRow {
    id: ElementId,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct MeasureDoc {
    weights: Vec<WeightRow>,
    o_layers: BTreeMap<usize, BTreeMap<i64, f64>>,
    source: MeasureSource,
}

impl EmpiricalMeasure {
    /// Normalizes non-negative masses.
    pub fn from_masses(masses: BTreeMap<ElementId, f64>) -> Result<Self, EntropyError> {
        let total: f64 = masses.values().sum();
        if !(total > 0.0) || masses.values().any(|&w| !(w >= 0.0)) {
            return Err(EntropyError::Invalid("masses must be non-negative with positive total".into()));
        }
        Ok(Self {
            weights: masses.into_iter().map(|(k, v)| (k, v / total)).collect(),
            ..Default::default()
        })
    }

    pub fn dirac(id: ElementId) -> Self {
        Self {
            weights: BTreeMap::from([(id, 1.0)]),
            ..Default::default()
        }
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn mass(&self, pred: impl Fn(&ElementId) -> bool) -> f64 {
        self.weights.iter().filter(|(k, _)| pred(k)).map(|(_, w)| w).sum()
    }

    pub fn pushforward(&self, map: impl Fn(&ElementId) -> ElementId) -> Self {
        let mut weights = BTreeMap::new();
        for (k, w) in &self.weights {
            *weights.entry(map(k)).or_insert(0.0) += w;
        }
        Self {
            weights,
            blocks: BTreeMap::new(),
            o_layers: self.o_layers.clone(),
            source: self.source.clone(),
        }
    }

    /// `n ↦ μ(C_n)` for singularity `sigma`.
    pub fn layer_masses(&self, sigma: usize) -> BTreeMap<i64, f64> {
        let mut out = BTreeMap::new();
        for (k, w) in &self.weights {
            match k {
                ElementId::LayerCell { sigma: s, n, .. } | ElementId::Layer { sigma: s, n } if *s == sigma => {
                    *out.entry(*n).or_insert(0.0) += w;
                }
                _ => {}
            }
        }
        out
    }

    /// `μ(O^N(σ))`, or `μ(O(σ))` for `cut = None`.
    pub fn o_mass(&self, sigma: usize, cut: Option<i64>) -> f64 {
        self.o_layers
            .get(&sigma)
            .map(|m| m.iter().filter(|(&n, _)| cut.map_or(true, |c| n > c)).map(|(_, w)| w).sum())
            .unwrap_or(0.0)
    }

    /// Largest deviation of a block marginal from the single-element weights.
    pub fn block_marginal_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for blocks in self.blocks.values() {
            let mut first: BTreeMap<&ElementId, f64> = BTreeMap::new();
            for (b, w) in blocks {
                *first.entry(&b[0]).or_insert(0.0) += w;
            }
            for (k, w) in &first {
                worst = worst.max((w - self.weights.get(*k).copied().unwrap_or(0.0)).abs());
            }
        }
        worst
    }

    pub fn to_json(&self) -> String {
        let doc = MeasureDoc {
            weights: self
                .weights
                .iter()
                .map(|(id, &weight)| WeightRow { id: id.clone(), weight })
                .collect(),
            o_layers: self.o_layers.clone(),
            source: self.source.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("measure serializes")
    }

    /// CSV columns: `id, kind, weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "kind", "weight"])?;
        for (id, &v) in &self.weights {
            w.write_record([id.to_string(), id.tag().to_string(), fmt_f64(v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn shannon_entropy(m: &EmpiricalMeasure) -> f64 {
    entropy_of(m.weights.values())
}

/// `H(fine | coarse_map)` = `H(fine) − H(coarse_map_* fine)`.
pub fn conditional_entropy(fine: &EmpiricalMeasure, coarse_map: impl Fn(&ElementId) -> ElementId) -> f64 {
    let mut fibers: BTreeMap<ElementId, Vec<f64>> = BTreeMap::new();
    for (k, &w) in &fine.weights {
        fibers.entry(coarse_map(k)).or_default().push(w);
    }
    // Σ_c μ(c) H(fine | c), summed fiber by fiber to avoid cancellation
    fibers
        .values()
        .map(|ws| {
            let t: f64 = ws.iter().sum();
            if t > 0.0 {
                ws.iter().filter(|&&w| w > 0.0).map(|&w| -w * (w / t).ln()).sum::<f64>() + 0.0
            } else {
                0.0
            }
        })
        .sum()
}

/// Interned element ids for compact symbol sequences.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    pub ids: Vec<ElementId>,
    index: HashMap<ElementId, u32>,
}

impl SymbolTable {
    pub fn intern(&mut self, id: &ElementId) -> u32 {
        if let Some(&k) = self.index.get(id) {
            return k;
        }
        let k = self.ids.len() as u32;
        self.ids.push(id.clone());
        self.index.insert(id.clone(), k);
        k
    }

    /// Sequences relabelled through `map` (e.g. a truncation).
    pub fn relabel(&self, seqs: &[Vec<u32>], map: impl Fn(&ElementId) -> ElementId) -> (SymbolTable, Vec<Vec<u32>>) {
        let mut t = SymbolTable::default();
        let lut: Vec<u32> = self.ids.iter().map(|id| t.intern(&map(id))).collect();
        let out = seqs.iter().map(|s| s.iter().map(|&v| lut[v as usize]).collect()).collect();
        (t, out)
    }
}

/// Result of [`birkhoff_measure`].
#[derive(Debug, Clone)]
pub struct BirkhoffRun {
    pub measure: EmpiricalMeasure,
    pub symbols: SymbolTable,
    /// Per orbit, the symbols at integer times in `(burn_in, horizon]`.
    pub sequences: Vec<Vec<u32>>,
    /// Per singularity, crossings of the section `|v^s| = |v^u|` inside
    /// `B_r(σ)` at layers above `n0`, detected from sign changes between
    /// accepted steps.
    pub section_crossings: Vec<usize>,
    /// Per singularity, entries of the continuous orbits into `B_r(σ)`.
    pub ball_entries: Vec<usize>,
}

impl BirkhoffRun {
    /// Crossings per unit time and per orbit, which for an invariant
    /// measure equals `μ(⋃_{n>n0} C_n)`.
    pub fn flux(&self, sigma: usize) -> f64 {
        let kept = self.measure.source.orbits - self.measure.source.dropped;
        let span = self.measure.source.horizon - self.measure.source.burn_in;
        if kept == 0 || span <= 0.0 {
            return 0.0;
        }
        self.section_crossings[sigma] as f64 / (kept as f64 * span)
    }
}

struct OrbitTrace {
    seq: Vec<ElementId>,
    o_layers: Vec<(usize, i64)>,
    crossings: Vec<usize>,
    entries: Vec<usize>,
    escaped: bool,
}

fn section_sign(p: &SingularityProfile<f64>, x: &[f64]) -> Option<(f64, f64)> {
    let (vs, vu) = p.chart(x);
    let (s, u) = (norm2(&vs), norm2(&vu));
    let b = s.max(u);
    (b < p.r).then_some((s - u, b))
}

fn trace_orbit(gp: &GlobalPartition, x0: &[f64], horizon: f64, burn_in: f64) -> Result<OrbitTrace, FlowError> {
    let mut spec = gp.spec.clone();
    spec.step_budget = usize::MAX;
    let ns = gp.refined.len();
    let mut tr = OrbitTrace {
        seq: Vec::new(),
        o_layers: Vec::new(),
        crossings: vec![0; ns],
        entries: vec![0; ns],
        escaped: false,
    };
    let box_in_chart = gp.lo.iter().chain(&gp.hi).all(|v| v.abs() < spec.chart_radius);
    let mut st = Stepper::new(&spec, &spec, x0, false);
    let mut prev: Vec<Option<(f64, f64)>> = gp.refined.iter().map(|rp| section_sign(&rp.profile, x0)).collect();
    let first = burn_in.floor() as i64 + 1;
    let last = horizon.floor() as i64;
    for j in 1..=last {
        while st.tau() < j as f64 {
            match st.advance(j as f64) {
                Ok(_) => {}
                Err(FlowError::LeftChart(_)) if box_in_chart => {
                    tr.escaped = true;
                    let from = j.max(first);
                    tr.seq.extend((from..=last).map(|_| ElementId::Outside));
                    return Ok(tr);
                }
                Err(e) => return Err(e),
            }
            if st.tau() <= burn_in {
                for (s, rp) in gp.refined.iter().enumerate() {
                    prev[s] = section_sign(&rp.profile, st.state());
                }
                continue;
            }
            for (s, rp) in gp.refined.iter().enumerate() {
                let now = section_sign(&rp.profile, st.state());
                match (prev[s], now) {
                    (None, Some(_)) => tr.entries[s] += 1,
                    (Some((d0, _)), Some((d1, b))) if (d0 > 0.0) != (d1 > 0.0) => {
                        if shell_of(b).is_some_and(|n| n > rp.profile.n0) {
                            tr.crossings[s] += 1;
                        }
                    }
                    _ => {}
                }
                prev[s] = now;
            }
        }
        if j >= first {
            let c = classify_traced(gp, st.state());
            if let Some(p) = c.passage {
                tr.o_layers.push(p);
            }
            tr.seq.push(c.id);
        }
    }
    Ok(tr)
}

/// Time average of `classify` over integer times in `(burn_in, horizon]`,
/// averaged over the start points with equal weight per sample. Block
/// weights are recorded for `k ≤ block_len`.
pub fn birkhoff_measure(
    gp: &GlobalPartition,
    starts: &[Vec<f64>],
    horizon: f64,
    burn_in: f64,
    block_len: usize,
) -> Result<BirkhoffRun, EntropyError> {
    if !(horizon > burn_in) || burn_in < 0.0 {
        return Err(EntropyError::Invalid(format!("need horizon > burn_in >= 0, got {horizon}, {burn_in}")));
    }
    if starts.is_empty() {
        return Err(EntropyError::Invalid("no start points".into()));
    }
    let traces: Vec<Result<OrbitTrace, FlowError>> = starts.par_iter().map(|x| trace_orbit(gp, x, horizon, burn_in)).collect();
    let ns = gp.refined.len();
    let mut symbols = SymbolTable::default();
    let mut sequences = Vec::new();
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut o_counts: BTreeMap<(usize, i64), u64> = BTreeMap::new();
    let mut source = MeasureSource {
        orbits: starts.len(),
        horizon,
        burn_in,
        ..Default::default()
    };
    let mut section_crossings = vec![0; ns];
    let mut ball_entries = vec![0; ns];
    for t in traces {
        let Ok(t) = t else {
            source.dropped += 1;
            continue;
        };
        source.escaped += usize::from(t.escaped);
        let seq: Vec<u32> = t.seq.iter().map(|id| symbols.intern(id)).collect();
        for &v in &seq {
            *counts.entry(v).or_insert(0) += 1;
        }
        for p in t.o_layers {
            *o_counts.entry(p).or_insert(0) += 1;
        }
        for s in 0..ns {
            section_crossings[s] += t.crossings[s];
            ball_entries[s] += t.entries[s];
        }
        sequences.push(seq);
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(EntropyError::Invalid("every orbit was dropped or the window is empty".into()));
    }
    source.samples = total as usize;
    let tf = total as f64;
    let mut measure = EmpiricalMeasure {
        weights: counts.iter().map(|(&k, &c)| (symbols.ids[k as usize].clone(), c as f64 / tf)).collect(),
        source,
        ..Default::default()
    };
    for ((s, n), c) in o_counts {
        *measure.o_layers.entry(s).or_default().entry(n).or_insert(0.0) += c as f64 / tf;
    }
    for k in 2..=block_len {
        let mut bc: HashMap<&[u32], u64> = HashMap::new();
        let mut n = 0u64;
        for seq in &sequences {
            for w in seq.windows(k) {
                *bc.entry(w).or_insert(0) += 1;
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let blocks = bc
            .into_iter()
            .map(|(b, c)| (b.iter().map(|&v| symbols.ids[v as usize].clone()).collect(), c as f64 / n as f64))
            .collect();
        measure.blocks.insert(k, blocks);
    }
    Ok(BirkhoffRun {
        measure,
        symbols,
        sequences,
        section_crossings,
        ball_entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntropy {
    /// Miller–Madow corrected `H_k`, `k = 1..=k_max`.
    pub h_k: Vec<f64>,
    pub h_per_k: Vec<f64>,
    /// `H_k − H_{k−1}` with `H_0 = 0`.
    pub diffs: Vec<f64>,
    /// Average samples per observed block, per `k`.
    pub occupancy: Vec<f64>,
    /// Last difference.
    pub h: f64,
}

/// Block entropies of stationary symbol sequences, pooled over sequences.
pub fn block_entropy_rate<S: Hash + Eq>(seqs: &[Vec<S>], k_max: usize) -> Result<BlockEntropy, EntropyError> {
    if k_max == 0 {
        return Err(EntropyError::Invalid("k_max must be positive".into()));
    }
    let mut out = BlockEntropy {
        h_k: Vec::new(),
        h_per_k: Vec::new(),
        diffs: Vec::new(),
        occupancy: Vec::new(),
        h: 0.0,
    };
    let mut prev = 0.0;
    for k in 1..=k_max {
        let mut counts: HashMap<&[S], u64> = HashMap::new();
        let mut n = 0u64;
        for s in seqs {
            for w in s.windows(k) {
                *counts.entry(w).or_insert(0) += 1;
                n += 1;
            }
        }
        let occupancy = if counts.is_empty() { 0.0 } else { n as f64 / counts.len() as f64 };
        if occupancy < MIN_OCCUPANCY {
            return Err(EntropyError::InsufficientData {
                k,
                occupancy,
                required: MIN_OCCUPANCY,
            });
        }
        let nf = n as f64;
        let plug: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum();
        let h = plug + (counts.len() as f64 - 1.0) / (2.0 * nf);
        out.h_k.push(h);
        out.h_per_k.push(h / k as f64);
        out.diffs.push(h - prev);
        out.occupancy.push(occupancy);
        prev = h;
    }
    out.h = *out.diffs.last().expect("k_max >= 1");
    Ok(out)
}

/// Largest `k ≤ k_cap` for which [`block_entropy_rate`] has enough data.
pub fn max_block_length<S: Hash + Eq>(seqs: &[Vec<S>], k_cap: usize) -> usize {
    let mut best = 0;
    for k in 1..=k_cap {
        let mut counts: HashMap<&[S], u64> = HashMap::new();
        let mut n = 0u64;
        for s in seqs {
            for w in s.windows(k) {
                *counts.entry(w).or_insert(0) += 1;
                n += 1;
            }
        }
        if counts.is_empty() || (n as f64 / counts.len() as f64) < MIN_OCCUPANCY {
            break;
        }
        best = k;
    }
    best
}

/// Entropy of the normalized geometric family `x_j ∝ e^{-bj}`,
/// `0 ≤ j ≤ n_grid`, or `-∞` when its mean exceeds `budget`.
fn geometric_entropy(b: f64, budget: f64, n_grid: usize) -> f64 {
    let (mut s0, mut m0) = (0.0, 0.0);
    for j in 0..=n_grid {
        let e = (-b * j as f64).exp();
        if e == 0.0 {
            break;
        }
        s0 += e;
        m0 += j as f64 * e;
    }
    if m0 / s0 > budget {
        return f64::NEG_INFINITY;
    }
    s0.ln() + b * m0 / s0
}

/// Supremum of `−Σ_{j≥0} x_j log x_j` over probability vectors on
/// `{0, 1, …, n_grid}` with `Σ j·x_j ≤ budget`. Index 0 carries the mass a
/// sub-probability sequence leaves unassigned, so the value also bounds
/// `−Σ_{n≥1} x_n log x_n` for sub-probabilities with `Σ n·x_n ≤ budget`.
/// Maximizers are geometric (Lagrange conditions), found by a scan over
/// the decay rate.
pub fn mane_bound(budget: f64, n_grid: usize) -> f64 {
    if !(budget > 0.0) {
        return 0.0;
    }
    let f = |lb: f64| geometric_entropy(lb.exp(), budget, n_grid);
    let (lo, hi, steps) = (-12.0, 6.0, 360);
    let h = (hi - lo) / steps as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for i in 0..=steps {
        let lb = lo + h * i as f64;
        let v = f(lb);
        if v > best.0 {
            best = (v, lb);
        }
    }
    // golden-section refinement around the best grid point
    let (mut a, mut b) = (best.1 - h, best.1 + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    best.0.max(fc).max(fd)
}

/// Default truncation of the index set in [`mane_bound`].
pub const MANE_GRID: usize = 200_000;

/// `μ` seen through one singularity's partitions: layer masses, the
/// conditional entropy of `ℬ_n` cells inside each `C_n`, the split of the
/// rest into `B^-`, `B^+`, `O(σ)^c`, and `μ(O(σ))` by passage layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TowerMeasure {
    pub layers: BTreeMap<i64, LayerMass>,
    pub b_minus: f64,
    pub b_plus: f64,
    pub outside_o: f64,
    pub o_layers: BTreeMap<i64, f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerMass {
    pub mass: f64,
    /// `H(ℬ_n | C_n)` under the conditional measure on `C_n`.
    pub cell_entropy: f64,
}

impl TowerMeasure {
    pub fn from_empirical(m: &EmpiricalMeasure, sigma: usize) -> Self {
        let mut cells: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        let mut t = TowerMeasure::default();
        for (id, &w) in &m.weights {
            match id {
                ElementId::LayerCell { sigma: s, n, .. } | ElementId::Layer { sigma: s, n } if *s == sigma => {
                    cells.entry(*n).or_default().push(w);
                }
                ElementId::BMinus { sigma: s } if *s == sigma => t.b_minus += w,
                ElementId::BPlus { sigma: s } if *s == sigma => t.b_plus += w,
                _ => t.outside_o += w,
            }
        }
        for (n, ws) in cells {
            let mass: f64 = ws.iter().sum();
            let cell_entropy = ws.iter().filter(|&&w| w > 0.0).map(|&w| -(w / mass) * (w / mass).ln()).sum::<f64>() + 0.0;
            t.layers.insert(n, LayerMass { mass, cell_entropy });
        }
        t.o_layers = m.o_layers.get(&sigma).cloned().unwrap_or_default();
        t
    }

    pub fn layer_total(&self) -> f64 {
        self.layers.values().map(|l| l.mass).sum()
    }

    pub fn tail_mass(&self, cut: i64) -> f64 {
        self.layers.range(cut + 1..).map(|(_, l)| l.mass).sum()
    }

    pub fn first_moment(&self) -> f64 {
        self.layers.iter().map(|(&n, l)| n as f64 * l.mass).sum()
    }

    pub fn o_mass(&self, cut: i64) -> f64 {
        self.o_layers.range(cut + 1..).map(|(_, w)| w).sum()
    }

    /// `H_μ(𝒞_σ)`.
    pub fn coarse_entropy(&self) -> f64 {
        let rest = (1.0 - self.layer_total()).max(0.0);
        entropy_of(self.layers.values().map(|l| &l.mass)) + entropy_of([&rest])
    }

    /// `H_μ(𝒜_σ | 𝒞_σ)` restricted to the layers.
    pub fn layer_conditional(&self) -> f64 {
        self.layers.values().map(|l| l.mass * l.cell_entropy).sum()
    }

    /// Contribution of the split of `M ∖ ⋃ C_n` into `B^-`, `B^+`, `O(σ)^c`.
    pub fn rest_conditional(&self) -> f64 {
        let parts = [self.b_minus, self.b_plus, self.outside_o];
        let rest: f64 = parts.iter().sum();
        if rest > 0.0 {
            entropy_of(&parts) - entropy_of([&rest])
        } else {
            0.0
        }
    }

    /// `H_μ(𝒜_σ)`.
    pub fn refined_entropy(&self) -> f64 {
        self.coarse_entropy() + self.layer_conditional() + self.rest_conditional()
    }

    /// `H_μ(𝒜_σ | 𝒜_{σ,N})`: only the cells of `C^N = ⋃_{m>N} C_m` are merged.
    pub fn truncation_conditional(&self, cut: i64) -> f64 {
        let total = self.tail_mass(cut);
        if total <= 0.0 {
            return 0.0;
        }
        self.layers
            .range(cut + 1..)
            .map(|(_, l)| {
                let inner = if l.mass > 0.0 { -l.mass * (l.mass / total).ln() } else { 0.0 };
                l.mass * l.cell_entropy + inner
            })
            .sum()
    }
}

/// Pass rule `measured ≤ bound·(1 + relative) + absolute`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allowance {
    pub relative: f64,
    pub absolute: f64,
}

impl Allowance {
    pub const EXACT: Allowance = Allowance {
        relative: 0.0,
        absolute: 1e-9,
    };
    pub const INVARIANCE: Allowance = Allowance {
        relative: 0.1,
        absolute: 1e-12,
    };

    pub fn check(&self, measured: f64, bound: f64) -> bool {
        measured <= bound * (1.0 + self.relative) + self.absolute
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub bound: f64,
    pub measured: f64,
    pub margin: f64,
    pub pass: bool,
}

impl BoundEntry {
    pub fn new(measured: f64, bound: f64, allow: Allowance) -> Self {
        // empty f64 sums are −0
        let measured = measured + 0.0;
        Self {
            bound,
            measured,
            margin: bound - measured,
            pass: allow.check(measured, bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerReport {
    /// `Σ n μ(C_n) ≤ 1/K0`.
    pub first_moment: BoundEntry,
    /// `(N, μ(⋃_{n>N} C_n) ≤ 1/(K0·N))`.
    pub tails: Vec<(i64, BoundEntry)>,
    pub pass: bool,
}

pub fn verify_tower_sums(t: &TowerMeasure, profile: &SingularityProfile<f64>, cuts: &[i64], allow: Allowance) -> TowerReport {
    let k0 = profile.k0;
    let first_moment = BoundEntry::new(t.first_moment(), 1.0 / k0, allow);
    let tails: Vec<(i64, BoundEntry)> = cuts
        .iter()
        .map(|&n| (n, BoundEntry::new(t.tail_mass(n), 1.0 / (k0 * n as f64), allow)))
        .collect();
    let pass = first_moment.pass && tails.iter().all(|(_, e)| e.pass);
    TowerReport {
        first_moment,
        tails,
        pass,
    }
}

/// `log c1` as it enters upper bounds; values below zero are replaced by 0
/// because the bounds multiply it by masses at most 1.
fn log_c1_term(rp: &RefinedPartition) -> f64 {
    rp.log_c1.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBoundReport {
    pub h1: f64,
    pub h2: f64,
    /// `H_μ(𝒞_σ) ≤ H1`.
    pub coarse: BoundEntry,
    /// `H_μ(𝒜_σ) ≤ H2`.
    pub refined: BoundEntry,
    /// Layer part of `H_μ(𝒜_σ | 𝒞_σ) ≤ log c1 + log L″/K0`.
    pub conditional: BoundEntry,
    /// `Σ_n μ(C_n) log #ℬ_n`, the intermediate bound on the layer part.
    pub cardinality_sum: f64,
    /// Split of `M ∖ ⋃ C_n` into `B^±` and `O(σ)^c`, reported only.
    pub rest_conditional: f64,
    pub pass: bool,
}

pub fn entropy_bound_check(t: &TowerMeasure, rp: &RefinedPartition, allow: Allowance) -> EntropyBoundReport {
    let k0 = rp.profile.k0;
    let h1 = mane_bound(1.0 / k0, MANE_GRID);
    let cond_bound = log_c1_term(rp) + rp.lpp.ln() / k0;
    let h2 = cond_bound + h1;
    let coarse = BoundEntry::new(t.coarse_entropy(), h1, allow);
    let refined = BoundEntry::new(t.refined_entropy(), h2, allow);
    let conditional = BoundEntry::new(t.layer_conditional(), cond_bound, allow);
    let cardinality_sum = t.layers.iter().map(|(&n, l)| l.mass * rp.log_count(n)).sum();
    let pass = coarse.pass && refined.pass && conditional.pass;
    EntropyBoundReport {
        h1,
        h2,
        coarse,
        refined,
        conditional,
        cardinality_sum,
        rest_conditional: t.rest_conditional(),
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    #[serde(rename = "N")]
    pub cut: i64,
    /// `H_μ(𝒜 | 𝒜_N)`.
    pub conditional: f64,
    /// Block-rate gap `h(𝒜) − h(𝒜_N)`, when block data were supplied.
    pub rate_gap: Option<f64>,
    pub mu_o_n: f64,
    pub mu_c_n: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    /// `log c1/(K0·N)`.
    pub u_cardinality: f64,
    /// `μ(C^N)·|log μ(C^N)|`.
    pub u_tail_mass: f64,
    /// `(2/e)·Σ_{m>N} e^{-m/2}`.
    pub u_exponential: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

/// `H_μ(𝒜_σ | 𝒜_{σ,N}) ≤ L2·μ(O^N(σ)) + u(N)` with
/// `L2 = (log L″ + 1)/K0`. A supplied block-rate gap must satisfy the same
/// bound.
pub fn truncation_gap(t: &TowerMeasure, rp: &RefinedPartition, cut: i64, rate_gap: Option<f64>, allow: Allowance) -> GapReport {
    let k0 = rp.profile.k0;
    let l2 = (rp.lpp.ln() + 1.0) / k0;
    let mu_o_n = t.o_mass(cut);
    let mu_c_n = t.tail_mass(cut);
    let u_cardinality = log_c1_term(rp) / (k0 * cut as f64);
    let u_tail_mass = if mu_c_n > 0.0 { -mu_c_n * mu_c_n.ln() } else { 0.0 };
    let u_exponential = 2.0 / std::f64::consts::E * (-(cut as f64 + 1.0) / 2.0).exp() / (1.0 - (-0.5f64).exp());
    let bound = l2 * mu_o_n + u_cardinality + u_tail_mass + u_exponential;
    let conditional = t.truncation_conditional(cut);
    let worst = rate_gap.map_or(conditional, |g| g.max(conditional));
    GapReport {
        cut,
        conditional,
        rate_gap,
        mu_o_n,
        mu_c_n,
        l2,
        u_cardinality,
        u_tail_mass,
        u_exponential,
        bound,
        margin: bound - worst,
        pass: allow.check(worst, bound),
    }
}

/// Curve-length families `j ↦ |I_j|` by log length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LengthFamily {
    Constant { length: f64 },
    /// `base^{|j|}`.
    Geometric { base: f64 },
    /// Passages of `t_plus + 1` steps repeating; inside a passage at step
    /// `p`, length `c·λ^{-(t_plus − p)}`.
    PassageDecay { c: f64, lambda: f64, t_plus: i64 },
    Table { lengths: BTreeMap<i64, f64> },
}

impl LengthFamily {
    pub fn log_length(&self, j: i64) -> f64 {
        match self {
            Self::Constant { length } => length.ln(),
            Self::Geometric { base } => j.unsigned_abs() as f64 * base.ln(),
            Self::PassageDecay { c, lambda, t_plus } => {
                let p = j.rem_euclid(t_plus + 1);
                c.ln() - (t_plus - p) as f64 * lambda.ln()
            }
            Self::Table { lengths } => lengths.get(&j).map_or(f64::NEG_INFINITY, |v| v.ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub n: Vec<i64>,
    /// `log count(n)`, `count(n) = (C_geom/ε²)·Σ_{|j|≤n} |I_j|`.
    pub log_count: Vec<f64>,
    /// `(1/n) log count(n)` at the largest `n`.
    pub rate: f64,
    /// Slope of `log count` between the two largest `n`.
    pub slope: f64,
    pub zero_rate: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Spanning-count bound from curve lengths.
pub fn shadowed_entropy_bound(lengths: &LengthFamily, epsilon: f64, c_geom: f64, n_list: &[i64]) -> Result<ShadowReport, EntropyError> {
    if !(epsilon > 0.0) || !(c_geom > 0.0) {
        return Err(EntropyError::Invalid("epsilon and C_geom must be positive".into()));
    }
    let mut ns: Vec<i64> = n_list.iter().copied().filter(|&n| n > 0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() {
        return Err(EntropyError::Invalid("n_list needs a positive entry".into()));
    }
    let pre = c_geom.ln() - 2.0 * epsilon.ln();
    let mut acc = lengths.log_length(0);
    let mut reached = 0;
    let mut log_count = Vec::new();
    for &n in &ns {
        for j in reached + 1..=n {
            acc = log_add(acc, lengths.log_length(j));
            acc = log_add(acc, lengths.log_length(-j));
        }
        reached = n;
        log_count.push(pre + acc);
    }
    let k = ns.len() - 1;
    let rate = log_count[k] / ns[k] as f64;
    let slope = if k > 0 {
        (log_count[k] - log_count[k - 1]) / (ns[k] - ns[k - 1]) as f64
    } else {
        rate
    };
    Ok(ShadowReport {
        n: ns,
        log_count,
        rate,
        slope,
        zero_rate: slope.abs() < 1e-3,
    })
}

/// Bound ledger of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    #[serde(rename = "H_C")]
    pub h_c: f64,
    #[serde(rename = "H_A")]
    pub h_a: f64,
    pub h_rate: Option<f64>,
    pub bounds: BTreeMap<String, BoundEntry>,
    pub constants: BTreeMap<String, f64>,
    /// Estimators that could not run as configured.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl EntropyReport {
    pub fn pass(&self) -> bool {
        self.bounds.values().all(|b| b.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV columns: `name, bound, measured, margin, pass`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "bound", "measured", "margin", "pass"])?;
        for (k, b) in &self.bounds {
            w.write_record([k.clone(), fmt_f64(b.bound), fmt_f64(b.measured), fmt_f64(b.margin), b.pass.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::FieldSpec;
    use crate::partition::{assemble_global, build_refined, CellIndex};
    use crate::singular::{build_profile, ProfileOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn reg(k: usize) -> ElementId {
        ElementId::RegularCell { k }
    }

    fn cell(n: i64, j: usize) -> ElementId {
        ElementId::LayerCell {
            sigma: 0,
            n,
            j: CellIndex(vec![j as f64]),
        }
    }

    fn saddle_refined() -> RefinedPartition {
        let s = FieldSpec::linear_saddle(1.0, 1.0);
        let o = ProfileOptions {
            beta1: Some(1.0),
            r: Some((-2.0f64).exp()),
            lipschitz_samples: 2000,
            passage_samples: 8,
            ..Default::default()
        };
        let p = build_profile(&s, &[0.01, 0.01], &o).unwrap();
        build_refined(&p, std::f64::consts::E.powi(2), 0.05, 0, p.n0 + 12, 1).unwrap()
    }

    #[test]
    fn shannon_examples() {
        let u = EmpiricalMeasure::from_masses((0..4).map(|k| (reg(k), 1.0)).collect()).unwrap();
        assert!((shannon_entropy(&u) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(shannon_entropy(&EmpiricalMeasure::dirac(reg(0))), 0.0);
        let m = EmpiricalMeasure::from_masses(BTreeMap::from([(reg(0), 0.5), (reg(1), 0.25), (reg(2), 0.25)])).unwrap();
        assert!((shannon_entropy(&m) - 1.0397207708399179).abs() < 1e-15);
        assert!(EmpiricalMeasure::from_masses(BTreeMap::new()).is_err());
    }

    #[test]
    fn conditional_examples() {
        let m = EmpiricalMeasure::from_masses(BTreeMap::from([(reg(0), 1.0), (reg(1), 1.0), (reg(2), 1.0)])).unwrap();
        assert_eq!(conditional_entropy(&m, |id| id.clone()), 0.0);
        let glue = |id: &ElementId| if *id == reg(1) { reg(0) } else { id.clone() };
        assert!((conditional_entropy(&m, glue) - 2.0 / 3.0 * LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn conditional_is_entropy_difference(ws in prop::collection::vec(0.0f64..1.0, 2..40), groups in 1usize..6) {
            prop_assume!(ws.iter().sum::<f64>() > 1e-3);
            let m = EmpiricalMeasure::from_masses(ws.iter().enumerate().map(|(k, &w)| (reg(k), w)).collect()).unwrap();
            let map = |id: &ElementId| match id { ElementId::RegularCell { k } => reg(k % groups), o => o.clone() };
            let c = conditional_entropy(&m, map);
            let d = shannon_entropy(&m) - shannon_entropy(&m.pushforward(map));
            prop_assert!((c - d).abs() < 1e-12);
            prop_assert!(c >= -1e-15);
        }

        #[test]
        fn mane_dominates_random_sequences(seed in 0u64..u64::MAX, budget_ix in 0usize..4) {
            let budget = [0.5, 1.0, 2.0, 5.0][budget_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.gen_range(1..60);
            let mut x: Vec<f64> = (0..len).map(|_| rng.gen::<f64>().powi(3)).collect();
            let mass: f64 = x.iter().sum();
            let moment: f64 = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
            let scale = (1.0 / mass).min(budget / moment) * rng.gen::<f64>();
            x.iter_mut().for_each(|v| *v *= scale);
            prop_assert!(entropy_of(&x) <= mane_bound(budget, 20_000));
        }
    }

    #[test]
    fn mane_matches_geometric_closed_form() {
        for budget in [0.05f64, 0.5, 1.0, 2.0, 5.0, 1.0 / 0.0219] {
            let exact = (1.0 + budget) * (1.0 + budget).ln() - budget * budget.ln();
            let h = mane_bound(budget, MANE_GRID);
            assert!((h - exact).abs() < 1e-6 * exact.max(1.0), "N = {budget}: {h} vs {exact}");
        }
        assert!(mane_bound(1e-9, 1000) < 1e-7);
        assert_eq!(mane_bound(0.0, 1000), 0.0);
        let mut last = 0.0;
        for k in 1..40 {
            let h = mane_bound(0.25 * k as f64, 20_000);
            assert!(h > last);
            last = h;
        }
        assert!(entropy_of(&[0.5]) <= mane_bound(1.0, MANE_GRID));
        assert!((entropy_of(&[0.5]) - 0.34657359027997264).abs() < 1e-15);
    }

    fn bernoulli(len: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0..2)).collect()
    }

    #[test]
    fn block_entropy_examples() {
        let c = block_entropy_rate(&[vec![7u8; 10_000]], 6).unwrap();
        assert!(c.h_k.iter().all(|&h| h == 0.0) && c.h == 0.0);
        let seqs: Vec<Vec<u8>> = (0..4).map(|s| bernoulli(250_000, s)).collect();
        let b = block_entropy_rate(&seqs, 10).unwrap();
        assert!((b.h - LN_2).abs() < 0.05, "h = {}", b.h);
        let p: Vec<u8> = (0..100_000).map(|i| (i % 2) as u8).collect();
        let r = block_entropy_rate(&[p], 8).unwrap();
        assert!(r.h.abs() <= 0.01);
        assert!((r.h_k[0] - LN_2).abs() < 1e-4);
        let short = bernoulli(500, 9);
        assert!(matches!(block_entropy_rate(&[short.clone()], 8), Err(EntropyError::InsufficientData { .. })));
        assert!(max_block_length(&[short], 12) < 8);
    }

    #[test]
    fn block_entropies_are_subadditive() {
        let seqs: Vec<Vec<u8>> = (0..2).map(|s| {
            // a Markov chain with entropy rate below log 2
            let mut rng = ChaCha8Rng::seed_from_u64(30 + s);
            let mut x = 0u8;
            (0..200_000).map(|_| { if rng.gen::<f64>() < 0.2 { x ^= 1; } x }).collect()
        }).collect();
        let b = block_entropy_rate(&seqs, 8).unwrap();
        for k in 1..8 {
            for m in 1..=8 - k {
                assert!(b.h_k[k + m - 1] <= b.h_k[k - 1] + b.h_k[m - 1] + 1e-3);
            }
        }
        let exact = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
        assert!((b.h - exact).abs() < 0.01);
    }

    /// `μ(C_n) = 2^{-n}` for `n > n0`, `cells` uniform cells per layer, rest
    /// on the regular part.
    fn geometric_tower(n0: i64, n_max: i64, cells: usize) -> EmpiricalMeasure {
        let mut m = BTreeMap::new();
        let mut used = 0.0;
        for n in n0 + 1..=n_max {
            let a = 0.5f64.powi(n as i32);
            used += a;
            for j in 0..cells {
                m.insert(cell(n, j), a / cells as f64);
            }
        }
        m.insert(reg(0), 1.0 - used);
        let mut e = EmpiricalMeasure::from_masses(m).unwrap();
        // columns φ_{[-t⁻, t⁺]}(D_n) of the saddle have length ≈ 2n − 3
        let o: BTreeMap<i64, f64> = (n0 + 1..=n_max).map(|n| (n, 0.5f64.powi(n as i32) * (2 * n - 3) as f64)).collect();
        e.o_layers.insert(0, o);
        e
    }

    #[test]
    fn tower_sums_on_geometric_measure() {
        let rp = saddle_refined();
        let n0 = rp.n0();
        let m = geometric_tower(n0, 60, 1);
        let t = TowerMeasure::from_empirical(&m, 0);
        // Σ_{n>n0} n 2^{-n} = (n0 + 2) 2^{-n0}
        let exact = (n0 + 2) as f64 * 0.5f64.powi(n0 as i32);
        assert!((t.first_moment() - exact).abs() < 1e-12);
        let r = verify_tower_sums(&t, &rp.profile, &[10, 20, 40], Allowance::EXACT);
        assert!(r.pass);
        assert!((r.tails[0].1.measured - 0.5f64.powi(10)).abs() < 1e-15);
        let d = verify_tower_sums(&TowerMeasure::from_empirical(&EmpiricalMeasure::dirac(ElementId::BPlus { sigma: 0 }), 0), &rp.profile, &[10], Allowance::EXACT);
        assert!(d.pass && d.first_moment.measured == 0.0);
    }

    #[test]
    fn tower_entropies_match_direct_computation() {
        let rp = saddle_refined();
        let mut m = geometric_tower(rp.n0(), 30, 3);
        // uneven cells on one layer
        *m.weights.get_mut(&cell(8, 0)).unwrap() *= 1.5;
        *m.weights.get_mut(&cell(8, 1)).unwrap() *= 0.5;
        m.weights.insert(ElementId::BMinus { sigma: 0 }, 0.0);
        let t = TowerMeasure::from_empirical(&m, 0);
        let coarse = shannon_entropy(&m.pushforward(|id| id.coarse_for(0)));
        assert!((t.coarse_entropy() - coarse).abs() < 1e-12);
        let refined = shannon_entropy(&m.pushforward(|id| id.refined_for(0)));
        assert!((t.refined_entropy() - refined).abs() < 1e-12);
        for cut in [7, 10, 15, 40] {
            let direct = conditional_entropy(&m, |id| id.truncated(cut));
            assert!((t.truncation_conditional(cut) - direct).abs() < 1e-12, "N = {cut}");
        }
    }

    #[test]
    fn entropy_bounds_on_uniform_cells() {
        let rp = saddle_refined();
        let n0 = rp.n0();
        let mut t = TowerMeasure::default();
        let mut used = 0.0;
        for n in n0 + 1..=n0 + 12 {
            let a = 0.5f64.powi(n as i32);
            used += a;
            t.layers.insert(n, LayerMass { mass: a, cell_entropy: rp.log_count(n) });
        }
        t.outside_o = 1.0 - used;
        let r = entropy_bound_check(&t, &rp, Allowance::EXACT);
        assert!((r.conditional.measured - r.cardinality_sum).abs() < 1e-12);
        assert!(r.pass, "{r:?}");
        let exact_h1 = 3.0 * 3f64.ln() - 2.0 * 2f64.ln();
        assert!((r.h1 - exact_h1).abs() < 1e-6);
        let d = entropy_bound_check(&TowerMeasure { outside_o: 1.0, ..Default::default() }, &rp, Allowance::EXACT);
        assert!(d.pass && d.refined.measured == 0.0);
    }

    #[test]
    fn truncation_gap_examples() {
        let rp = saddle_refined();
        let m = geometric_tower(rp.n0(), 40, 4);
        let t = TowerMeasure::from_empirical(&m, 0);
        let above = truncation_gap(&t, &rp, 41, None, Allowance::EXACT);
        assert_eq!(above.conditional, 0.0);
        assert!(above.pass);
        let mut last = f64::INFINITY;
        for cut in rp.n0() + 1..=40 {
            let g = truncation_gap(&t, &rp, cut, None, Allowance::EXACT);
            assert!(g.pass, "{g:?}");
            assert!(g.conditional <= last + 1e-15);
            last = g.conditional;
            // uniform cells: Σ_{m>N} a_m (log 4 − log(a_m / A))
            let a_tot: f64 = (cut + 1..=40).map(|n| 0.5f64.powi(n as i32)).sum();
            let exact: f64 = (cut + 1..=40)
                .map(|n| {
                    let a = 0.5f64.powi(n as i32);
                    a * (4f64.ln() - (a / a_tot).ln())
                })
                .sum();
            assert!((g.conditional - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn shadowed_rates() {
        let ns: Vec<i64> = vec![10, 100, 1000, 5000, 10_000];
        let c = shadowed_entropy_bound(&LengthFamily::Constant { length: 1.0 }, 0.1, 1.0, &ns).unwrap();
        assert!((c.log_count[0] - (100.0f64 * 21.0).ln()).abs() < 1e-9);
        assert!(c.rate.abs() <= 0.01 && c.zero_rate);
        let g = shadowed_entropy_bound(&LengthFamily::Geometric { base: 2.0 }, 0.1, 1.0, &ns).unwrap();
        assert!((g.rate - LN_2).abs() <= 0.01 && !g.zero_rate);
        assert!((g.slope - LN_2).abs() < 1e-9);
        let d = LengthFamily::PassageDecay { c: 2.0, lambda: 1.5, t_plus: 12 };
        let r = shadowed_entropy_bound(&d, 0.1, 1.0, &ns).unwrap();
        assert!(r.rate <= 0.01 && r.zero_rate);
        assert!(shadowed_entropy_bound(&d, 0.0, 1.0, &ns).is_err());
    }

    fn pendulum() -> FieldSpec<f64> {
        FieldSpec::custom("pendulum", 2, |x: &[f64], o: &mut [f64]| {
            o[0] = x[1];
            o[1] = -x[0].sin();
        })
        .with_tol(1e-10)
    }

    #[test]
    fn birkhoff_trivial_cases() {
        let s = FieldSpec::linear_saddle(1.0, 1.0);
        let o = ProfileOptions {
            beta1: Some(1.0),
            r: Some((-2.0f64).exp()),
            lipschitz_samples: 2000,
            passage_samples: 8,
            ..Default::default()
        };
        let p = build_profile(&s, &[0.01, 0.01], &o).unwrap();
        let rp = build_refined(&p, 3.0, 0.05, 0, p.n0 + 6, 1).unwrap();
        let gp = assemble_global(&s, &[-1.0, -1.0], &[1.0, 1.0], None, vec![rp]).unwrap();
        let d = birkhoff_measure(&gp, &[vec![0.0, 0.0]], 20.0, 2.0, 2).unwrap();
        assert_eq!(d.measure.weights, BTreeMap::from([(ElementId::BPlus { sigma: 0 }, 1.0)]));
        let starts: Vec<Vec<f64>> = (1..=8).map(|k| vec![0.05 * k as f64, 0.3]).collect();
        let mut last = 0.0;
        for horizon in [10.0, 40.0, 160.0] {
            let r = birkhoff_measure(&gp, &starts, horizon, 0.0, 1).unwrap();
            let out = r.measure.mass(|id| *id == ElementId::Outside);
            assert!(out > last);
            assert!((r.measure.total() - 1.0).abs() < 1e-12);
            last = out;
        }
        assert!(last > 0.95);
        assert!(birkhoff_measure(&gp, &starts, 1.0, 2.0, 1).is_err());
    }

    #[test]
    fn pendulum_layer_mass_matches_section_flux() {
        let s = pendulum();
        let o = ProfileOptions {
            lipschitz_samples: 2000,
            passage_samples: 8,
            beta1_samples: 2000,
            ..Default::default()
        };
        let p = build_profile(&s, &[3.1, 0.0], &o).unwrap();
        let rp = build_refined(&p, 3.0, 0.05, 0, p.n0 + 8, 1).unwrap();
        let gp = assemble_global(&s, &[-4.0, -3.0], &[4.0, 3.0], None, vec![rp]).unwrap();
        // librations whose turning point is at distance a from the saddle
        let starts: Vec<Vec<f64>> = [7.3, 7.9, 8.6, 9.2]
            .iter()
            .map(|&k: &f64| {
                let a = (-k).exp();
                vec![0.0, (2.0 * (1.0 + a.cos())).sqrt()]
            })
            .collect();
        let run = birkhoff_measure(&gp, &starts, 4000.0, 100.0, 3).unwrap();
        let m = &run.measure;
        let layer = m.mass(|id| matches!(id, ElementId::LayerCell { .. }));
        let flux = run.flux(0);
        assert!(flux > 0.0 && run.ball_entries[0] > 0);
        assert!((layer / flux - 1.0).abs() < 0.2, "layer mass {layer}, flux {flux}");
        assert!(m.block_marginal_defect() < 1e-3);
        let t = TowerMeasure::from_empirical(m, 0);
        assert!(t.layers.len() >= 2);
        assert!(verify_tower_sums(&t, &gp.refined[0].profile, &[8, 10], Allowance::INVARIANCE).pass);
        assert!(entropy_bound_check(&t, &gp.refined[0], Allowance::INVARIANCE).pass);
        assert!(t.o_mass(p.n0) >= t.layer_total());
        let again = birkhoff_measure(&gp, &starts, 4000.0, 100.0, 3).unwrap();
        assert_eq!(again.measure, run.measure);
    }
}
