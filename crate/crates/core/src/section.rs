//! The cross section `D_σ = {|v^s| = |v^u|}` near a singularity, its layers
//! `D_n`, exit times from `B_r(σ)`, cones and crossing detection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{eval_field, integrate_flow, integrate_until, locate_first, FieldSpec, FlowError, StepRecord, Stepper};
use crate::report::fmt_f64;
use crate::scalar::{norm2, Real};
use crate::singular::SingularityProfile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SectionError {
    #[error("point lies outside the chart (box norm {0:e} > beta1)")]
    OutOfChart(f64),
    #[error("point is not on the section (relative defect {0:e})")]
    NotOnSection(f64),
    #[error("exit not reached within {0} time units")]
    TimeBudgetExceeded(f64),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Relative defect tolerance `|defect| ≤ tol · box-norm` for section points.
pub const SECTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingEvent<T> {
    /// Elapsed time from the start of the orbit segment.
    pub time: T,
    pub point: Vec<T>,
    /// Shell index, `e^{-(n+1)} ≤ box-norm < e^{-n}`.
    pub layer: i64,
    pub defect_residual: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSample<T> {
    pub layer: i64,
    pub points: Vec<Vec<T>>,
    /// Filled by [`fill_exit_times`]; `NaN` where the time budget ran out.
    pub exit_minus: Vec<T>,
    pub exit_plus: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    StableCone,
    UnstableCone,
    Neither,
}

fn check_chart<T: Real>(profile: &SingularityProfile<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>), SectionError> {
    let (vs, vu) = profile.chart(x);
    let b = norm2(&vs).max(norm2(&vu));
    if b > profile.beta1 * (T::one() + T::lit(1e-12)) {
        return Err(SectionError::OutOfChart(b.as_f64()));
    }
    Ok((vs, vu))
}

/// Chart coordinates `(v^s, v^u)`.
pub fn chart_coords<T: Real>(profile: &SingularityProfile<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>), SectionError> {
    check_chart(profile, x)
}

/// `|v^s| − |v^u|`.
pub fn section_defect<T: Real>(profile: &SingularityProfile<T>, x: &[T]) -> Result<T, SectionError> {
    let (vs, vu) = check_chart(profile, x)?;
    Ok(norm2(&vs) - norm2(&vu))
}

/// Shell index of a box norm: the `n` with `e^{-(n+1)} ≤ b < e^{-n}`.
pub fn shell_of<T: Real>(b: T) -> Option<i64> {
    if !(b > T::zero()) || !b.is_finite() {
        return None;
    }
    let mut n = (-b.ln()).floor().to_i64()?;
    let top = |n: i64| T::lit(-(n as f64)).exp();
    while b >= top(n) {
        n -= 1;
    }
    while b < top(n + 1) {
        n += 1;
    }
    Some(n)
}

/// Layer of a section point: `Some(n)` for `n > n0` inside `B_r(σ)`.
pub fn layer_index<T: Real>(profile: &SingularityProfile<T>, x: &[T]) -> Result<Option<i64>, SectionError> {
    let (vs, vu) = check_chart(profile, x)?;
    let (s, u) = (norm2(&vs), norm2(&vu));
    let b = s.max(u);
    if b == T::zero() {
        return Ok(None);
    }
    let rel = (s - u).abs() / b;
    if rel > T::lit(SECTION_TOL) {
        return Err(SectionError::NotOnSection(rel.as_f64()));
    }
    if b >= profile.r {
        return Ok(None);
    }
    Ok(shell_of(b).filter(|&n| n > profile.n0))
}

/// Time budget for exits from a start at box norm `b`: `10·K1·(n + 5)`.
pub fn exit_budget<T: Real>(profile: &SingularityProfile<T>, b: T) -> T {
    let n = shell_of(b).unwrap_or(0).max(0);
    T::lit(10.0) * profile.k1 * T::lit(n as f64 + 5.0)
}

fn exit_one_side<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    x: &[T],
    backward: bool,
    budget: T,
) -> Result<T, SectionError> {
    let r = profile.r;
    let g = |y: &[T]| profile.box_norm(y) - r;
    let tol = T::lit(1e-9);
    if g(x) >= T::zero() {
        // on the boundary: zero if the orbit leaves immediately on this side
        let probe = T::lit(1e-6);
        let sgn = if backward { -T::one() } else { T::one() };
        let y = integrate_flow(spec, x, sgn * probe)?;
        if profile.box_norm(&y) >= profile.box_norm(x) {
            return Ok(T::zero());
        }
        return match integrate_until(spec, &y, backward, budget, g, tol, |_, _| {})? {
            Some(h) => Ok(h.tau + probe),
            None => Err(SectionError::TimeBudgetExceeded(budget.as_f64())),
        };
    }
    match integrate_until(spec, x, backward, budget, g, tol, |_, _| {})? {
        Some(h) => Ok(h.tau),
        None => Err(SectionError::TimeBudgetExceeded(budget.as_f64())),
    }
}

/// `(t⁻_x, t⁺_x)`: first exit times from `B_r(σ)` backward and forward.
pub fn exit_times<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    x: &[T],
) -> Result<(T, T), SectionError> {
    let b = check_chart(profile, x).map(|(s, u)| norm2(&s).max(norm2(&u)))?;
    let budget = exit_budget(profile, b);
    let minus = exit_one_side(spec, profile, x, true, budget)?;
    let plus = exit_one_side(spec, profile, x, false, budget)?;
    Ok((minus, plus))
}

/// `x^u < α x^s` → stable cone, `x^s < α x^u` → unstable cone.
pub fn cone_classify<T: Real>(profile: &SingularityProfile<T>, x: &[T], alpha: T) -> Result<Cone, SectionError> {
    let (vs, vu) = check_chart(profile, x)?;
    let (s, u) = (norm2(&vs), norm2(&vu));
    Ok(if u < alpha * s {
        Cone::StableCone
    } else if s < alpha * u {
        Cone::UnstableCone
    } else {
        Cone::Neither
    })
}

/// `count` points uniform on `D_n`, deterministic per seed.
pub fn sample_layer<T: Real>(profile: &SingularityProfile<T>, n: i64, count: usize, rng_seed: u64) -> LayerSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let points = (0..count).map(|_| profile.layer_point(n, &mut rng)).collect();
    LayerSample {
        layer: n,
        points,
        exit_minus: Vec::new(),
        exit_plus: Vec::new(),
    }
}

/// Computes exit times for every sample point. Returns the number of points
/// whose budget ran out (their times are `NaN`).
pub fn fill_exit_times<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    sample: &mut LayerSample<T>,
) -> Result<usize, SectionError> {
    let mut flagged = 0;
    sample.exit_minus.clear();
    sample.exit_plus.clear();
    for x in &sample.points {
        match exit_times(spec, profile, x) {
            Ok((m, p)) => {
                sample.exit_minus.push(m);
                sample.exit_plus.push(p);
            }
            Err(SectionError::TimeBudgetExceeded(_)) => {
                flagged += 1;
                sample.exit_minus.push(T::nan());
                sample.exit_plus.push(T::nan());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(flagged)
}

/// Events seen while walking an orbit.
#[derive(Debug, Clone, PartialEq)]
pub enum OrbitEvent<T> {
    Entry { time: T, point: Vec<T> },
    Exit { time: T, point: Vec<T> },
    Crossing(CrossingEvent<T>),
}

impl<T: Real> OrbitEvent<T> {
    pub fn time(&self) -> T {
        match self {
            Self::Entry { time, .. } | Self::Exit { time, .. } => *time,
            Self::Crossing(c) => c.time,
        }
    }
}

/// Steps an orbit and reports entries to / exits from `B_r(σ)` and crossings
/// of `D_σ` inside `B_r(σ)`, each located by bisection within the step.
pub struct OrbitWalker<'a, T: Real> {
    spec: &'a FieldSpec<T>,
    profile: &'a SingularityProfile<T>,
    stepper: Stepper<'a, T, FieldSpec<T>>,
    inside: bool,
    defect: T,
    time_tol: T,
}

impl<'a, T: Real> OrbitWalker<'a, T> {
    pub fn new(spec: &'a FieldSpec<T>, profile: &'a SingularityProfile<T>, x0: &[T], backward: bool) -> Self {
        let stepper = Stepper::new(spec, spec, x0, backward);
        let inside = profile.box_norm(x0) < profile.r;
        let defect = profile.defect(x0);
        Self {
            spec,
            profile,
            stepper,
            inside,
            defect,
            time_tol: T::lit(1e-12),
        }
    }

    pub fn inside(&self) -> bool {
        self.inside
    }

    pub fn tau(&self) -> T {
        self.stepper.tau()
    }

    pub fn state(&self) -> &[T] {
        self.stepper.state()
    }

    pub fn steps(&self) -> usize {
        self.stepper.steps
    }

    pub fn spec(&self) -> &FieldSpec<T> {
        self.spec
    }

    /// One accepted step (not beyond `tau_limit`); events inside it are
    /// appended to `events` in time order.
    pub fn step(&mut self, tau_limit: T, events: &mut Vec<OrbitEvent<T>>) -> Result<StepRecord<T>, FlowError> {
        let rec = self.stepper.advance(tau_limit)?;
        let p = self.profile;
        let r = p.r;
        let end = self.stepper.state();
        let inside_end = p.box_norm(end) < r;
        let defect_end = p.defect(end);
        let start = events.len();
        if inside_end != self.inside {
            let was_inside = self.inside;
            let g = |y: &[T]| {
                let v = p.box_norm(y) - r;
                if was_inside {
                    v
                } else {
                    -v - T::min_positive_value()
                }
            };
            let (t, x) = locate_first(&mut self.stepper, &rec, g, self.time_tol);
            events.push(if was_inside {
                OrbitEvent::Exit { time: t, point: x }
            } else {
                OrbitEvent::Entry { time: t, point: x }
            });
        }
        let sign_change = (self.defect > T::zero()) != (defect_end > T::zero());
        if sign_change {
            let positive_start = self.defect > T::zero();
            let g = |y: &[T]| {
                let d = p.defect(y);
                if positive_start {
                    -d
                } else {
                    d - T::min_positive_value()
                }
            };
            let (t, x) = locate_first(&mut self.stepper, &rec, g, self.time_tol);
            let b = p.box_norm(&x);
            if b < r {
                events.push(OrbitEvent::Crossing(CrossingEvent {
                    time: t,
                    layer: shell_of(b).unwrap_or(i64::MAX),
                    defect_residual: p.defect(&x),
                    point: x,
                }));
            }
        }
        events[start..].sort_by(|a, b| a.time().partial_cmp(&b.time()).unwrap());
        self.inside = inside_end;
        self.defect = defect_end;
        Ok(rec)
    }
}

/// All `D_σ` crossings inside `B_r(σ)` along `φ_{[0, t_span]}(x0)`
/// (backward for negative `t_span`; times are then elapsed times).
pub fn detect_section_crossings<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    x0: &[T],
    t_span: T,
) -> Result<Vec<CrossingEvent<T>>, SectionError> {
    let mut w = OrbitWalker::new(spec, profile, x0, t_span < T::zero());
    let end = t_span.abs();
    let mut ev = Vec::new();
    let mut out = Vec::new();
    while w.tau() < end {
        w.step(end, &mut ev)?;
        for e in ev.drain(..) {
            if let OrbitEvent::Crossing(c) = e {
                out.push(c);
            }
        }
    }
    Ok(out)
}

/// One visit of an orbit to `B_r(σ)`.
#[derive(Debug, Clone)]
pub struct Passage<T> {
    pub entry_time: Option<T>,
    pub exit_time: Option<T>,
    pub crossings: Vec<CrossingEvent<T>>,
}

/// Splits `φ_{[0, t_span]}(x0)` into visits of `B_r(σ)`.
pub fn passages<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    x0: &[T],
    t_span: T,
) -> Result<Vec<Passage<T>>, SectionError> {
    let mut w = OrbitWalker::new(spec, profile, x0, false);
    let mut out = Vec::new();
    let mut cur = if w.inside() {
        Some(Passage {
            entry_time: None,
            exit_time: None,
            crossings: Vec::new(),
        })
    } else {
        None
    };
    let mut ev = Vec::new();
    while w.tau() < t_span {
        w.step(t_span, &mut ev)?;
        for e in ev.drain(..) {
            match e {
                OrbitEvent::Entry { time, .. } => {
                    cur = Some(Passage {
                        entry_time: Some(time),
                        exit_time: None,
                        crossings: Vec::new(),
                    });
                }
                OrbitEvent::Exit { time, .. } => {
                    if let Some(mut p) = cur.take() {
                        p.exit_time = Some(time);
                        out.push(p);
                    }
                }
                OrbitEvent::Crossing(c) => {
                    if let Some(p) = cur.as_mut() {
                        p.crossings.push(c);
                    }
                }
            }
        }
    }
    if let Some(p) = cur {
        out.push(p);
    }
    Ok(out)
}

/// The first complete visit of `φ_{[0, t_max]}(x0)` to `B_r(σ)`, stopping
/// at its exit. `None` if no visit completes in time.
pub fn first_passage<T: Real>(
    spec: &FieldSpec<T>,
    profile: &SingularityProfile<T>,
    x0: &[T],
    t_max: T,
) -> Result<Option<Passage<T>>, SectionError> {
    let mut w = OrbitWalker::new(spec, profile, x0, false);
    let mut cur: Option<Passage<T>> = None;
    let mut ev = Vec::new();
    while w.tau() < t_max {
        w.step(t_max, &mut ev)?;
        for e in ev.drain(..) {
            match e {
                OrbitEvent::Entry { time, .. } => {
                    cur = Some(Passage {
                        entry_time: Some(time),
                        exit_time: None,
                        crossings: Vec::new(),
                    });
                }
                OrbitEvent::Exit { time, .. } => {
                    if let Some(mut p) = cur.take() {
                        p.exit_time = Some(time);
                        return Ok(Some(p));
                    }
                }
                OrbitEvent::Crossing(c) => {
                    if let Some(p) = cur.as_mut() {
                        p.crossings.push(c);
                    }
                }
            }
        }
    }
    Ok(None)
}

/// Writes a layer sample as CSV: `layer, x0..x{d-1}, t_minus, t_plus, speed`.
pub fn write_layer_csv<W: Write>(
    spec: &FieldSpec<f64>,
    sample: &LayerSample<f64>,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let d = spec.dim;
    let mut header = vec!["layer".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend(["t_minus", "t_plus", "speed"].map(String::from));
    w.write_record(&header)?;
    for (k, x) in sample.points.iter().enumerate() {
        let mut row = vec![sample.layer.to_string()];
        row.extend(x.iter().map(|&v| fmt_f64(v)));
        let tm = sample.exit_minus.get(k).copied().unwrap_or(f64::NAN);
        let tp = sample.exit_plus.get(k).copied().unwrap_or(f64::NAN);
        row.push(fmt_f64(tm));
        row.push(fmt_f64(tp));
        row.push(fmt_f64(norm2(&eval_field(spec, x))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes crossing events as CSV: `time, layer, x0..x{d-1}, defect_residual`.
pub fn write_crossings_csv<W: Write>(events: &[CrossingEvent<f64>], dim: usize, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string(), "layer".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("defect_residual".into());
    w.write_record(&header)?;
    for e in events {
        let mut row = vec![fmt_f64(e.time), e.layer.to_string()];
        row.extend(e.point.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(e.defect_residual));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::singular::{build_profile, ProfileOptions};
    use proptest::prelude::*;

    fn saddle_profile() -> (FieldSpec<f64>, SingularityProfile<f64>) {
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

    #[test]
    fn chart_examples() {
        let (_, p) = saddle_profile();
        let (vs, vu) = chart_coords(&p, &[0.3, 0.4]).unwrap();
        assert!((vu[0].abs() - 0.3).abs() < 1e-15 && (vs[0].abs() - 0.4).abs() < 1e-15);
        let (vs, vu) = chart_coords(&p, &[0.0, 0.0]).unwrap();
        assert_eq!((vs[0], vu[0]), (0.0, 0.0));
        assert!(matches!(chart_coords(&p, &[2.0, 0.0]), Err(SectionError::OutOfChart(_))));
    }

    #[test]
    fn defect_examples() {
        let (_, p) = saddle_profile();
        assert_eq!(section_defect(&p, &[0.2, 0.2]).unwrap(), 0.0);
        assert_eq!(section_defect(&p, &[0.0, 0.3]).unwrap(), 0.3);
        let d = section_defect(&p, &[(-10.0f64).exp(), (-2.0f64).exp()]).unwrap();
        assert!((d - ((-2.0f64).exp() - (-10.0f64).exp())).abs() < 1e-16);
    }

    #[test]
    fn layer_index_examples() {
        assert_eq!(shell_of((-6.0f64).exp()), Some(5));
        assert_eq!(shell_of(0.3), Some(1));
        assert_eq!(shell_of(0.0f64), None);
        let (_, mut p) = saddle_profile();
        let e6 = (-6.0f64).exp();
        p.n0 = 4;
        assert_eq!(layer_index(&p, &[e6, e6]).unwrap(), Some(5));
        p.n0 = 5;
        assert_eq!(layer_index(&p, &[e6, e6]).unwrap(), None);
        assert_eq!(layer_index(&p, &[0.0, 0.0]).unwrap(), None);
        p.r = 0.5;
        p.n0 = 1;
        assert_eq!(layer_index(&p, &[0.3, 0.3]).unwrap(), None);
        p.n0 = 0;
        assert_eq!(layer_index(&p, &[0.3, 0.3]).unwrap(), Some(1));
        assert!(matches!(layer_index(&p, &[0.3, 0.1]), Err(SectionError::NotOnSection(_))));
    }

    #[test]
    fn exit_time_examples() {
        let (s, p) = saddle_profile();
        let e10 = (-10.0f64).exp();
        let (m, pl) = exit_times(&s, &p, &[e10, e10]).unwrap();
        assert!((m - 8.0).abs() < 1e-6 && (pl - 8.0).abs() < 1e-6, "{m} {pl}");
        for n in 6..=15 {
            let x = (-(n as f64)).exp();
            let (_, tp) = exit_times(&s, &p, &[x, x]).unwrap();
            assert!((tp - (n as f64 - 2.0)).abs() < 1e-6);
            let k = tp / n as f64;
            assert!(k >= p.k0 && k <= p.k1);
        }
        let rr = p.r;
        let (m, pl) = exit_times(&s, &p, &[rr, 0.5 * rr]).unwrap();
        assert_eq!(pl, 0.0);
        assert!(m > 0.0);
    }

    #[test]
    fn exit_budget_flags_invariant_manifolds() {
        let (s, p) = saddle_profile();
        let x = [1e-300, 1e-3];
        assert!(matches!(exit_times(&s, &p, &x), Err(SectionError::TimeBudgetExceeded(_))));
    }

    #[test]
    fn crossing_examples() {
        let (s, p) = saddle_profile();
        let x0 = [(-10.0f64).exp(), (-2.0f64).exp() * (1.0 - 1e-12)];
        let c = detect_section_crossings(&s, &p, &x0, 8.0).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0].time - 4.0).abs() < 1e-7, "{}", c[0].time);
        assert!((c[0].point[0] / (-6.0f64).exp() - 1.0).abs() < 1e-6);
        assert_eq!(c[0].layer, 5);
        let c = detect_section_crossings(&s, &p, &[0.0, 0.1], 8.0).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn cone_examples() {
        let (_, p) = saddle_profile();
        assert_eq!(cone_classify(&p, &[0.05, 0.0], 0.01).unwrap(), Cone::UnstableCone);
        assert_eq!(cone_classify(&p, &[0.05, 0.05], 0.9).unwrap(), Cone::Neither);
        assert_eq!(cone_classify(&p, &[1e-3, 1e-5], 0.1).unwrap(), Cone::UnstableCone);
        assert_eq!(cone_classify(&p, &[1e-5, 1e-3], 0.1).unwrap(), Cone::StableCone);
    }

    #[test]
    fn layer_samples_lie_on_their_layer() {
        let (s, mut p) = saddle_profile();
        p.n0 = 5;
        let sample = sample_layer(&p, 10, 200, 4);
        for x in &sample.points {
            assert!(section_defect(&p, x).unwrap().abs() <= 1e-12);
            assert_eq!(layer_index(&p, x).unwrap(), Some(10));
            let sp = norm2(&eval_field(&s, x));
            assert!(sp >= p.l0 * (-11.0f64).exp() && sp <= p.l1 * (-10.0f64).exp());
        }
        let again = sample_layer(&p, 10, 200, 4);
        assert_eq!(again.points, sample.points);
    }

    #[test]
    fn layer_csv_has_documented_columns() {
        let (s, p) = saddle_profile();
        let mut sample = sample_layer(&p, 7, 3, 1);
        fill_exit_times(&s, &p, &mut sample).unwrap();
        let mut buf = Vec::new();
        write_layer_csv(&s, &sample, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "layer,x0,x1,t_minus,t_plus,speed");
        assert_eq!(lines.count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn saddle_defect_strictly_decreasing(u in 1e-8f64..0.1, s in 1e-8f64..0.1, t in 0.01f64..1.0) {
            let (sp, p) = saddle_profile();
            prop_assume!(u.max(s) < p.r && u * t.exp() < p.r);
            let y = integrate_flow(&sp, &[u, s], t).unwrap();
            prop_assert!(section_defect(&p, &y).unwrap() < section_defect(&p, &[u, s]).unwrap());
        }

        #[test]
        fn saddle_exit_times_match_closed_form(n in 6i64..16, seed in 0u64..1000) {
            let (sp, p) = saddle_profile();
            let sample = sample_layer(&p, n, 1, seed);
            let x = &sample.points[0];
            let (tm, tp) = exit_times(&sp, &p, x).unwrap();
            let b = p.box_norm(x);
            prop_assert!((tp - (p.r / b).ln()).abs() < 1e-6);
            prop_assert!((tm - (p.r / b).ln()).abs() < 1e-6);
        }
    }
}
