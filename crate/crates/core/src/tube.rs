//! Normal disks, Poincaré hit maps between them, and containment of nearby
//! orbits in scaled tubular neighborhoods.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flowcore::{
    eval_field, integrate_flow, integrate_until, locate_first, normal_basis, project_normal, FieldSpec, FlowError, SampleRegion, Stepper,
};
use crate::partition::GlobalPartition;
use crate::sampling::random_unit;
use crate::section::exit_times;
use crate::scalar::{dist2, dot, norm2, Real};

/// Default cap `β₀` on tube scales.
pub const BETA0: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn backward(self) -> bool {
        self == Direction::Backward
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeSpec<T> {
    pub x: Vec<T>,
    pub length: T,
    pub beta: T,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit<T> {
    pub point: Vec<T>,
    /// Signed time along the orbit of `y`.
    pub tau: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeReport<T> {
    pub contained: bool,
    /// Largest `(normal distance)/(β·speed)` over the matched hits.
    pub max_ratio: T,
    pub hits_checked: usize,
    /// Largest time between consecutive matched hits.
    pub max_hit_time: T,
}

fn require_regular<T: Real>(spec: &FieldSpec<T>, x: &[T]) -> Result<Vec<T>, FlowError> {
    let f = eval_field(spec, x);
    let s = norm2(&f);
    if !(s >= spec.regular_threshold.max(T::hard_floor())) {
        return Err(FlowError::AtSingularity(s.as_f64()));
    }
    Ok(f)
}

/// Coordinates of `y` in the normal space `𝒩_x` (in the basis of
/// [`normal_basis`]) when `y` lies on the normal disk of radius `β|X(x)|`.
pub fn normal_disk_project<T: Real>(spec: &FieldSpec<T>, x: &[T], y: &[T], beta: T) -> Result<Option<Vec<T>>, FlowError> {
    let fx = require_regular(spec, x)?;
    let v: Vec<T> = y.iter().zip(x).map(|(&a, &b)| a - b).collect();
    let radius = beta * norm2(&fx);
    let along = dot(&v, &fx) / norm2(&fx);
    if along.abs() > T::lit(1e-6) * radius.max(norm2(&v)) {
        return Ok(None);
    }
    let vn = project_normal(&v, &fx);
    if norm2(&vn) > radius {
        return Ok(None);
    }
    Ok(Some(normal_basis(&fx).iter().map(|b| dot(b, &vn)).collect()))
}

/// Crossing after elapsed time `min_tau` of the orbit of `y` (in the
/// direction of `backward`) with the normal plane at `z`, landing within
/// distance `radius` of `z`. The first crossing within `near` is taken;
/// failing that, the closest one found before `budget`.
#[allow(clippy::too_many_arguments)]
fn hit_plane<T: Real>(
    spec: &FieldSpec<T>,
    z: &[T],
    fz: &[T],
    y: &[T],
    backward: bool,
    radius: T,
    near: T,
    min_tau: T,
    budget: T,
) -> Result<Option<Hit<T>>, FlowError> {
    let sgn = if backward { -T::one() } else { T::one() };
    let g = |w: &[T]| sgn * w.iter().zip(z).zip(fz).map(|((&a, &b), &c)| (a - b) * c).sum::<T>();
    let within = |w: &[T]| dist2(w, z) <= radius;
    // distance to the plane below what rounding of the coordinates can resolve
    let plane_tol = T::lit(64.0) * T::epsilon() * (crate::scalar::norm_inf(z) + radius);
    if min_tau == T::zero() && (g(y) / norm2(fz)).abs() <= plane_tol && within(y) {
        return Ok(Some(Hit {
            point: y.to_vec(),
            tau: T::zero(),
        }));
    }
    let mut st = Stepper::new(spec, spec, y, backward);
    let mut prev = g(y);
    let mut best: Option<(T, Hit<T>)> = None;
    while st.tau() < budget {
        let rec = st.advance(budget)?;
        let cur = g(st.state());
        if prev < T::zero() && cur >= T::zero() && st.tau() >= min_tau {
            let (tau, w) = locate_first(&mut st, &rec, &g, T::lit(1e-13));
            let d = dist2(&w, z);
            if within(&w) && tau >= min_tau && best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                let close = d <= near;
                best = Some((d, Hit { point: w, tau: sgn * tau }));
                if close {
                    break;
                }
            }
        }
        prev = cur;
    }
    Ok(best.map(|(_, h)| h))
}

/// `𝒫_{x,t}(y)`: first hit of the orbit of `y` with the normal disk of radius
/// `β|X(φ_t x)|` at `φ_t(x)` within `|t|/2 ≤ |τ| ≤ budget`; negative `t`
/// searches backward. Earlier crossings of a strongly curved orbit with the
/// same plane are not matched hits.
pub fn poincare_hit<T: Real>(
    spec: &FieldSpec<T>,
    x: &[T],
    t: T,
    y: &[T],
    beta: T,
    budget: T,
) -> Result<Option<Hit<T>>, FlowError> {
    require_regular(spec, x)?;
    let z = integrate_flow(spec, x, t)?;
    let fz = require_regular(spec, &z)?;
    if dist2(x, y) == T::zero() {
        return Ok(Some(Hit { point: z, tau: t }));
    }
    let half = T::lit(0.5) * t.abs();
    hit_plane(spec, &z, &fz, y, t < T::zero(), beta * norm2(&fz), beta * norm2(&fz), half, budget)
}

/// Projects `y` onto `N_x` along its own orbit, searching both directions.
fn initial_hit<T: Real>(spec: &FieldSpec<T>, x: &[T], fx: &[T], y: &[T], radius: T) -> Result<Option<Hit<T>>, FlowError> {
    let budget = T::one();
    let f = hit_plane(spec, x, fx, y, false, radius, radius, T::zero(), budget)?;
    let b = hit_plane(spec, x, fx, y, true, radius, radius, T::zero(), budget)?;
    Ok(match (f, b) {
        (Some(f), Some(b)) => Some(if f.tau.abs() <= b.tau.abs() { f } else { b }),
        (f, b) => f.or(b),
    })
}

/// Matched-hit containment test of the orbit of `y` in the `β`-scaled tube
/// around `φ_{[0, T]}(x)` in the tube's direction. Hits are matched at the
/// integer times `1, …, ⌊T⌋` and at `T` itself when it is fractional.
pub fn tube_contains<T: Real>(spec: &FieldSpec<T>, tube: &TubeSpec<T>, y: &[T]) -> Result<TubeReport<T>, FlowError> {
    let backward = tube.direction.backward();
    let sgn = if backward { -T::one() } else { T::one() };
    let beta = tube.beta;
    let slack = T::lit(10.0);
    let fx = require_regular(spec, &tube.x)?;
    let mut report = TubeReport {
        contained: true,
        max_ratio: T::zero(),
        hits_checked: 0,
        max_hit_time: T::zero(),
    };
    let fail = |mut r: TubeReport<T>| {
        r.contained = false;
        r.max_ratio = T::infinity();
        r
    };
    if dist2(&tube.x, y) == T::zero() {
        // the orbit of x itself: every matched hit is the base point
        return Ok(report);
    }
    let mut w = {
        match initial_hit(spec, &tube.x, &fx, y, slack * beta * norm2(&fx))? {
            Some(h) => h.point,
            None => return Ok(fail(report)),
        }
    };
    let ratio0 = dist2(&w, &tube.x) / (beta * norm2(&fx));
    report.max_ratio = ratio0;
    let mut times: Vec<T> = Vec::new();
    let whole = tube.length.floor().to_usize().unwrap_or(0);
    for j in 1..=whole {
        times.push(T::from_usize(j).unwrap());
    }
    if tube.length > T::from_usize(whole).unwrap() {
        times.push(tube.length);
    }
    let mut z = tube.x.clone();
    let mut t_prev = T::zero();
    for &t in &times {
        let dt = t - t_prev;
        z = match integrate_flow(spec, &z, sgn * dt) {
            Ok(v) => v,
            Err(FlowError::AtSingularity(_)) => return Ok(fail(report)),
            Err(e) => return Err(e),
        };
        let fz = eval_field(spec, &z);
        let speed = norm2(&fz);
        if !(speed >= spec.regular_threshold) {
            return Ok(fail(report));
        }
        let budget = T::lit(2.0) * dt + T::one();
        let min_tau = T::lit(0.5) * dt;
        let Some(h) = hit_plane(spec, &z, &fz, &w, backward, slack * beta * speed, beta * speed, min_tau, budget)? else {
            report.hits_checked += 1;
            return Ok(fail(report));
        };
        report.hits_checked += 1;
        report.max_hit_time = report.max_hit_time.max(h.tau.abs());
        let ratio = dist2(&h.point, &z) / (beta * speed);
        report.max_ratio = report.max_ratio.max(ratio);
        w = h.point;
        t_prev = t;
    }
    report.contained = report.max_ratio <= T::one();
    Ok(report)
}

/// Forward containment over `[0, T]`.
pub fn tube_contains_orbit<T: Real>(spec: &FieldSpec<T>, x: &[T], y: &[T], length: T, beta: T) -> Result<TubeReport<T>, FlowError> {
    tube_contains(
        spec,
        &TubeSpec {
            x: x.to_vec(),
            length,
            beta,
            direction: Direction::Forward,
        },
        y,
    )
}

/// Point of `N_x` at scaled offset `q` (so distance `q·β|X(x)|`) along a
/// random normal direction.
pub fn normal_offset<T: Real>(spec: &FieldSpec<T>, x: &[T], q: T, beta: T, rng: &mut ChaCha8Rng) -> Vec<T> {
    let c: Vec<T> = random_unit(spec.dim.saturating_sub(1), rng);
    offset_along(spec, x, &c, q, beta)
}

/// Point of `N_x` at scaled offset `q` along the unit direction with
/// coordinates `c` in the normal basis at `x`.
pub fn offset_along<T: Real>(spec: &FieldSpec<T>, x: &[T], c: &[T], q: T, beta: T) -> Vec<T> {
    let fx = eval_field(spec, x);
    let basis = normal_basis(&fx);
    let scale = q * beta * norm2(&fx);
    let mut y = x.to_vec();
    for (b, &ci) in basis.iter().zip(c) {
        y.iter_mut().zip(b).for_each(|(yi, &bi)| *yi = *yi + scale * ci * bi);
    }
    y
}

struct Start<T> {
    x: Vec<T>,
    dir: Vec<T>,
}

/// Smallest `L` on the grid `{1.25^k}` such that every sampled start on the
/// boundary of `N_x((β/L)|X(x)|)` stays `β`-tube-contained for unit time in
/// `direction`. Each base point gets one random normal direction; base points
/// whose unit-time segment meets an excluded ball are skipped, and a cloud
/// region is used whole when `samples` covers it. After each grid search the
/// starts nearest to failing are refined along their orbit and over normal
/// directions, and the search is repeated until refinement finds no failure.
pub fn empirical_tube_constant<T: Real>(
    spec: &FieldSpec<T>,
    region: &SampleRegion<T>,
    direction: Direction,
    beta: T,
    samples: usize,
    rng_seed: u64,
) -> Result<T, FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ndim = spec.dim.saturating_sub(1);
    let clearance = |w: &[T]| {
        region
            .exclusions
            .iter()
            .map(|(c, r)| *r - dist2(w, c))
            .fold(-T::infinity(), T::max)
    };
    let usable = |x: &[T]| -> bool {
        if norm2(&eval_field(spec, x)) < spec.regular_threshold || region.excluded(x) {
            return false;
        }
        if region.is_box() && !region.contains(x) {
            return false;
        }
        matches!(
            integrate_until(spec, x, direction.backward(), T::one(), clearance, T::lit(1e-6), |_, _| {}),
            Ok(None)
        )
    };
    let mut starts: Vec<Start<T>> = Vec::with_capacity(samples);
    if !region.is_box() && samples >= region.points.len() {
        // the whole cloud
        for x in &region.points {
            if usable(x) {
                starts.push(Start { x: x.clone(), dir: random_unit(ndim, &mut rng) });
            }
        }
    } else {
        let mut attempts = 0;
        while starts.len() < samples && attempts < samples * 20 {
            attempts += 1;
            let x = region.sample(&mut rng);
            if usable(&x) {
                starts.push(Start { x, dir: random_unit(ndim, &mut rng) });
            }
        }
    }
    let ratio = |x: &[T], q: T, c: &[T]| -> T {
        let y = offset_along(spec, x, c, q, beta);
        let tube = TubeSpec {
            x: x.to_vec(),
            length: T::one(),
            beta,
            direction,
        };
        match tube_contains(spec, &tube, &y) {
            Ok(rep) => rep.max_ratio,
            Err(_) => T::infinity(),
        }
    };
    let base = T::lit(1.25);
    let level = |k: i32| T::one() / base.powi(k);
    let passes = |st: &[Start<T>], k: i32| st.iter().all(|s| ratio(&s.x, level(k), &s.dir) <= T::one());
    let probe = T::lit(1e-6);
    let growth = starts
        .iter()
        .map(|s| ratio(&s.x, probe, &s.dir) / probe)
        .filter(|g| g.is_finite())
        .fold(T::one(), T::max);
    let mut k = (growth.ln() / base.ln()).ceil().max(T::zero()).to_i32().unwrap_or(0);
    loop {
        while !passes(&starts, k) && k < 400 {
            k += 1;
        }
        while k > 0 && passes(&starts, k - 1) {
            k -= 1;
        }
        if k >= 400 {
            break;
        }
        // refine the starts closest to failing at the accepted level, along
        // their orbit and over normal directions
        let q = level(k);
        let mut scored: Vec<(T, usize)> = starts.iter().enumerate().map(|(i, s)| (ratio(&s.x, q, &s.dir), i)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut found = Vec::new();
        for &(r0, i) in scored.iter().take(32) {
            let (mut best, mut x, mut c) = (r0, starts[i].x.clone(), starts[i].dir.clone());
            for _ in 0..2 {
                let x0 = x.clone();
                for j in -20i32..=20 {
                    let Ok(y) = integrate_flow(spec, &x0, T::lit(0.01 * j as f64)) else {
                        continue;
                    };
                    if !usable(&y) {
                        continue;
                    }
                    let r = ratio(&y, q, &c);
                    if r > best {
                        best = r;
                        x = y;
                    }
                }
                for _ in 0..24 {
                    let cand = random_unit(ndim, &mut rng);
                    let r = ratio(&x, q, &cand);
                    if r > best {
                        best = r;
                        c = cand;
                    }
                }
            }
            if best > T::one() {
                found.push(Start { x, dir: c });
            }
        }
        if found.is_empty() {
            break;
        }
        starts.extend(found);
    }
    Ok(base.powi(k))
}

/// Which pairs `partition_tube_test` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Both points in one cell of `ℬ_n`.
    SameCell,
    /// Points in two different cells of `ℬ_n` (negative control).
    DistinctCells,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pairs: usize,
    pub passed: usize,
    /// Pairs whose two points differ in f64.
    pub distinct_pairs: usize,
    pub fraction: f64,
    pub max_ratio: f64,
}

/// Draws pairs `(x, y)` from cells of layer `n` of singularity `sigma` and
/// checks that `y` stays in the `β`-scaled tube of `x` forward to `t⁺_x`
/// and backward to `t⁻_x`. Flow failures count as failed pairs.
pub fn partition_tube_test(
    spec: &FieldSpec<f64>,
    gp: &GlobalPartition,
    sigma: usize,
    n: i64,
    pair_count: usize,
    beta: f64,
    pairing: Pairing,
    rng_seed: u64,
) -> PairReport {
    let rp = &gp.refined[sigma];
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rep = PairReport {
        pairs: pair_count,
        passed: 0,
        distinct_pairs: 0,
        fraction: 0.0,
        max_ratio: 0.0,
    };
    for _ in 0..pair_count {
        let j = rp.random_cell(n, &mut rng);
        let x = rp.point_in_cell(n, &j, &mut rng);
        let y = match pairing {
            Pairing::SameCell => rp.point_in_cell(n, &j, &mut rng),
            Pairing::DistinctCells => {
                let mut k = rp.random_cell(n, &mut rng);
                for _ in 0..64 {
                    if k != j {
                        break;
                    }
                    k = rp.random_cell(n, &mut rng);
                }
                rp.point_in_cell(n, &k, &mut rng)
            }
        };
        if x != y {
            rep.distinct_pairs += 1;
        }
        let Ok((t_minus, t_plus)) = exit_times(spec, &rp.profile, &x) else {
            continue;
        };
        let mut ok = true;
        for (length, direction) in [(t_plus, Direction::Forward), (t_minus, Direction::Backward)] {
            let tube = TubeSpec {
                x: x.clone(),
                length,
                beta,
                direction,
            };
            match tube_contains(spec, &tube, &y) {
                Ok(r) => {
                    rep.max_ratio = rep.max_ratio.max(r.max_ratio);
                    ok &= r.contained;
                }
                Err(_) => ok = false,
            }
        }
        rep.passed += usize::from(ok);
    }
    rep.fraction = if pair_count == 0 { 1.0 } else { rep.passed as f64 / pair_count as f64 };
    rep
}
