//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use singflow::entropy::{entropy_of, Allowance};
use singflow::harness::{
    blocks_suite, crossings_suite, entropy_bounds_suite, exit_times_suite, mane_suite, partition_suite, shadowed_suite, speeds_suite, tower_suite,
    truncation_gap_suite, tubes_suite, Experiment, ExperimentConfig, HarnessError, LabeledMeasure, SuiteReport,
};
use singflow::partition::assemble_global;
use singflow::section::{exit_times, sample_layer};

fn saddle_config(l: f64, samples_per_layer: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "rng_seed": 7,
  "field": {{ "type": "linear_saddle", "unstable": [1.0], "stable": [1.0] }},
  "box": {{ "lo": [-1.0, -1.0], "hi": [1.0, 1.0] }},
  "singularities": [ {{ "seed": [0.01, 0.01], "beta1": 1.0, "r": 0.1353352832366127 }} ],
  "partition": {{ "L": {l}, "beta": 0.04, "samples_per_layer": {samples_per_layer} }}
}}"#
    );
    ExperimentConfig::from_json(&text).expect("saddle config")
}

fn lorenz_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
  "schema_version": 1,
  "rng_seed": 11,
  "field": { "type": "lorenz", "sigma": 10.0, "rho": 28.0, "beta": 2.6666666666666665 },
  "box": { "lo": [-30.0, -35.0, -5.0], "hi": [30.0, 35.0, 60.0] },
  "singularities": [ { "seed": [0.5, 0.5, 0.5] } ],
  "partition": { "L": 1.4e8, "N0": 1.38e8, "beta": 0.04, "truncation": [10, 20, 40] },
  "measure": { "type": "birkhoff", "orbits": 64, "horizon": 100000.0 }
}"#,
    )
    .expect("lorenz config")
}

fn perturbed_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
  "schema_version": 1,
  "rng_seed": 7,
  "field": { "type": "perturbed_linear", "matrix": [[1.0, 0.0], [0.0, -1.0]], "amplitude": 0.05 },
  "box": { "lo": [-1.0, -1.0], "hi": [1.0, 1.0] },
  "singularities": [ { "seed": [0.01, 0.01], "beta1": 1.0, "r": 0.1353352832366127 } ],
  "partition": { "L": 7.38905609893065, "beta": 0.04 }
}"#,
    )
    .expect("perturbed config")
}

const E2: f64 = 7.38905609893065;

struct Outcome {
    pass: bool,
    detail: String,
}

fn failures(reps: &[&SuiteReport]) -> String {
    let f: Vec<String> = reps
        .iter()
        .flat_map(|r| r.failures().into_iter().map(move |c| format!("{}:{} measured {} bound {}", r.suite, c.name, c.measured, c.bound)))
        .collect();
    if f.is_empty() {
        String::new()
    } else {
        format!("; failed: {}", f.join(", "))
    }
}

fn check(reps: &[&SuiteReport]) -> bool {
    reps.iter().all(|r| r.pass())
}

fn value(r: &SuiteReport, name: &str) -> f64 {
    r.checks
        .iter()
        .find(|c| c.name == name)
        .map(|c| c.measured)
        .or_else(|| r.values.get(name).copied())
        .unwrap_or(f64::NAN)
}

fn exit_time_slope() -> Result<Outcome, HarnessError> {
    let exp = Experiment::build(&saddle_config(E2, 0))?;
    let t0 = Instant::now();
    let rep = exit_times_suite(&exp)?;
    let elapsed = t0.elapsed();
    let p = &exp.global.refined[0].profile;
    // x' = x, y' = -y with the identity chart: t⁺ = log(r/|x|), t⁻ = log(r/|y|)
    let (mut dev, mut ratio_bad, mut edge) = (0.0f64, 0usize, 0.0f64);
    for n in p.n0..=p.n0 + 10 {
        for x in &sample_layer(p, n, 200, 99).points {
            let (tm, tp) = exit_times(&exp.spec, p, x)?;
            dev = dev.max((tp - (p.r / x[0].abs()).ln()).abs()).max((tm - (p.r / x[1].abs()).ln()).abs());
            ratio_bad += [tm, tp].iter().filter(|t| !(0.5..=2.0).contains(&(**t / n as f64))).count();
            let off = tp - (n as f64 + p.r.ln());
            edge = edge.max((-off).max(off - 1.0));
        }
    }
    let pass = check(&[&rep]) && dev <= 1e-6 && ratio_bad == 0 && edge <= 1e-6 && elapsed < Duration::from_secs(30);
    Ok(Outcome {
        pass,
        detail: format!(
            "n0 = {}, layers n0..n0+10 x 200 points, max |t - closed form| = {dev:.2e}, t/n violations = {ratio_bad}, shell-edge excess = {edge:.1e}, suite time {:.2} s{}",
            p.n0,
            elapsed.as_secs_f64(),
            failures(&[&rep])
        ),
    })
}

fn flow_speed(lorenz: &Experiment) -> Result<Outcome, HarnessError> {
    let saddle = Experiment::build(&saddle_config(E2, 0))?;
    let a = speeds_suite(&saddle, 10_000);
    let b = speeds_suite(lorenz, 10_000);
    Ok(Outcome {
        pass: check(&[&a, &b]),
        detail: format!(
            "saddle: {} violations / {} samples; lorenz: {} violations / {} samples (L0 = {:.4}, L1 = {:.4}){}",
            value(&a, "sigma0.violations"),
            value(&a, "sigma0.samples"),
            value(&b, "sigma0.violations"),
            value(&b, "sigma0.samples"),
            value(&b, "sigma0.L0"),
            value(&b, "sigma0.L1"),
            failures(&[&a, &b])
        ),
    })
}

fn unique_crossing(lorenz: &Experiment) -> Result<Outcome, HarnessError> {
    let r = crossings_suite(lorenz, 1000)?;
    Ok(Outcome {
        pass: check(&[&r]),
        detail: format!(
            "1000 passages: {} multi-crossing, {} without crossing, {} incomplete{}",
            value(&r, "sigma0.multi_crossing_passages"),
            value(&r, "sigma0.passages_without_crossing"),
            value(&r, "sigma0.incomplete_passages"),
            failures(&[&r])
        ),
    })
}

struct LorenzRun {
    measures: Vec<LabeledMeasure>,
    summary: String,
}

fn lorenz_measures(lorenz: &Experiment) -> Result<LorenzRun, HarnessError> {
    let t0 = Instant::now();
    let run = lorenz.birkhoff()?;
    let src = &run.measure.source;
    let summary = format!(
        "{} orbits x {} time units ({} dropped, {} escaped), B_r entries {}, section crossings {}, {:.0} s",
        src.orbits,
        src.horizon,
        src.dropped,
        src.escaped,
        run.ball_entries[0],
        run.section_crossings[0],
        t0.elapsed().as_secs_f64()
    );
    let mut measures = vec![lorenz.synthetic_measure()?];
    measures.push(LabeledMeasure {
        label: "empirical".into(),
        measure: run.measure,
        allowance: Allowance::INVARIANCE,
    });
    Ok(LorenzRun { measures, summary })
}

fn tower_sums(lorenz: &Experiment, run: &LorenzRun) -> Outcome {
    let emp: Vec<LabeledMeasure> = run.measures.iter().filter(|m| m.label == "empirical").cloned().collect();
    let r = tower_suite(lorenz, &emp);
    Outcome {
        pass: check(&[&r]) && emp.len() == 1 && emp[0].measure.source.orbits >= 64 && emp[0].measure.source.horizon >= 1e5,
        detail: format!(
            "sum n mu(C_n) = {:e} <= 1/K0 = {:.3}; tails at N = 10, 20, 40: {:e}, {:e}, {:e}; {}{}",
            value(&r, "empirical.sigma0.first_moment"),
            r.checks[0].bound,
            value(&r, "empirical.sigma0.tail_N10"),
            value(&r, "empirical.sigma0.tail_N20"),
            value(&r, "empirical.sigma0.tail_N40"),
            run.summary,
            failures(&[&r])
        ),
    }
}

fn partition_bounds() -> Result<Outcome, HarnessError> {
    let deep = Experiment::build(&saddle_config(E2, 0))?;
    let shallow = Experiment::build(&saddle_config(1.01, 600))?;
    let a = partition_suite(&deep);
    let b = partition_suite(&shallow);
    let materialized = shallow.global.refined[0]
        .layers
        .iter()
        .filter(|l| matches!(l.cells, singflow::partition::LayerCells::Voronoi { .. }))
        .count();
    Ok(Outcome {
        pass: check(&[&a, &b]) && materialized > 0,
        detail: format!(
            "L = e^2: max diameter/bound {:.6}, pair distance/bound {:.3}, c1 spread {:.1e}; L = 1.01: {} Voronoi layers, max diameter/bound {:.3}, c1 spread {:.3}{}",
            value(&a, "sigma0.max_diameter_over_bound"),
            value(&a, "sigma0.max_pair_distance_over_bound"),
            value(&a, "sigma0.c1_spread"),
            materialized,
            value(&b, "sigma0.max_diameter_over_bound"),
            value(&b, "sigma0.c1_spread"),
            failures(&[&a, &b])
        ),
    })
}

/// `(1+N)log(1+N) − N log N`.
fn mane_closed_form(n: f64) -> f64 {
    (1.0 + n) * (1.0 + n).ln() - n * n.ln()
}

/// Layer masses `2^{-n} ` for `n0 < n ≤ n_max` of the synthetic measure.
fn geometric_layers(lorenz: &Experiment) -> Vec<(i64, f64)> {
    let rp = &lorenz.global.refined[0];
    (rp.n0() + 1..=rp.n_max).map(|n| (n, 0.5f64.powi(n as i32))).collect()
}

fn entropy_finiteness(lorenz: &Experiment, run: &LorenzRun) -> Outcome {
    let r = entropy_bounds_suite(lorenz, &run.measures);
    let rp = &lorenz.global.refined[0];
    let layers = geometric_layers(lorenz);
    let used: f64 = layers.iter().map(|l| l.1).sum();
    let coarse = entropy_of(layers.iter().map(|l| &l.1)) + entropy_of(&[1.0 - used]);
    let h1 = mane_closed_form(1.0 / rp.profile.k0);
    let coarse_dev = (value(&r, "geometric.sigma0.coarse_le_H1") - coarse).abs();
    let h1_dev = (value(&r, "geometric.sigma0.H1") - h1).abs() / h1;
    Outcome {
        pass: check(&[&r]) && coarse_dev <= 1e-12 && h1_dev <= 1e-6,
        detail: format!(
            "synthetic: H(C) = {:.6} <= H1 = {:.4}, H(A) = {:.6} <= H2 = {:.4} (oracle deviations {coarse_dev:.1e}, {h1_dev:.1e}); lorenz empirical: H(C) = {:e}, H(A) = {:e}{}",
            value(&r, "geometric.sigma0.coarse_le_H1"),
            value(&r, "geometric.sigma0.H1"),
            value(&r, "geometric.sigma0.refined_le_H2"),
            value(&r, "geometric.sigma0.H2"),
            value(&r, "empirical.sigma0.coarse_le_H1"),
            value(&r, "empirical.sigma0.refined_le_H2"),
            failures(&[&r])
        ),
    }
}

fn mane(exp: &Experiment) -> Outcome {
    let r = mane_suite(exp);
    Outcome {
        pass: check(&[&r]),
        detail: format!(
            "10^4 sequences per N in {{0.5, 1, 2, 5}}: violations {} {} {} {}, bound values {:.4} {:.4} {:.4} {:.4}{}",
            value(&r, "N0.5.violations"),
            value(&r, "N1.violations"),
            value(&r, "N2.violations"),
            value(&r, "N5.violations"),
            r.checks[1].bound,
            r.checks[4].bound,
            r.checks[8].bound,
            r.checks[12].bound,
            failures(&[&r])
        ),
    }
}

fn tube_summary(r: &SuiteReport) -> (f64, f64, f64) {
    let mut worst = 1.0f64;
    let mut ctrl = 0.0f64;
    let mut distinct = 0.0f64;
    for c in &r.checks {
        if c.name.ends_with("same_cell_fraction") {
            worst = worst.min(c.measured);
        }
    }
    for (k, v) in &r.values {
        if k.ends_with("control_fraction") {
            ctrl = ctrl.max(*v);
        }
        if k.ends_with("same_cell_distinct_pairs") {
            distinct += v;
        }
    }
    (worst, ctrl, distinct)
}

fn tubes(exp: &Experiment) -> SuiteReport {
    let n0 = exp.global.refined[0].n0();
    tubes_suite(exp, &[n0 + 1, n0 + 3, n0 + 5], 1000)
}

fn tube_containment() -> Result<Outcome, HarnessError> {
    let deep = Experiment::build(&saddle_config(E2, 0))?;
    let shallow = Experiment::build(&saddle_config(1.01, 0))?;
    let a = tubes(&deep);
    let b = tubes(&shallow);
    let (wa, ca, da) = tube_summary(&a);
    let (wb, cb, db) = tube_summary(&b);
    Ok(Outcome {
        pass: check(&[&a, &b]),
        detail: format!(
            "layers n0+1, n0+3, n0+5 x 1000 pairs; L = e^2: min same-cell pass {wa:.3}, max control pass {ca:.3}, {da} non-identical pairs; L = 1.01: min {wb:.3}, control {cb:.3}, {db} non-identical pairs{}",
            failures(&[&a, &b])
        ),
    })
}

fn truncation_gap(lorenz: &Experiment, run: &LorenzRun) -> Result<Outcome, HarnessError> {
    let r = truncation_gap_suite(lorenz, &run.measures);
    let saddle = Experiment::build(&saddle_config(E2, 0))?;
    let s = truncation_gap_suite(&saddle, &saddle.measures()?);
    // four uniform cells per layer: H(A|A_N) = Σ_{m>N} a_m (log 4 − log(a_m/A))
    let layers = geometric_layers(lorenz);
    let mut dev = 0.0f64;
    for n in [10, 20, 40] {
        let tail: Vec<f64> = layers.iter().filter(|l| l.0 > n).map(|l| l.1).collect();
        let a: f64 = tail.iter().sum();
        let exact: f64 = tail.iter().map(|&m| m * (4f64.ln() - (m / a).ln())).sum();
        dev = dev.max((value(&r, &format!("geometric.sigma0.gap_N{n}")) - exact).abs());
    }
    let margins: Vec<String> = r
        .checks
        .iter()
        .filter(|c| c.name.starts_with("geometric") && !c.name.ends_with("non_increasing"))
        .map(|c| format!("{:.3e}", c.margin))
        .collect();
    Ok(Outcome {
        pass: check(&[&r, &s]) && dev <= 1e-12,
        detail: format!(
            "synthetic margins at N = 10, 20, 40: {} (oracle deviation {dev:.1e}); lorenz gaps {:e} {:e} {:e}, non-increasing{}",
            margins.join(" "),
            value(&r, "empirical.sigma0.gap_N10"),
            value(&r, "empirical.sigma0.gap_N20"),
            value(&r, "empirical.sigma0.gap_N40"),
            failures(&[&r, &s])
        ),
    })
}

fn shadowed(exp: &Experiment) -> Result<Outcome, HarnessError> {
    let r = shadowed_suite(exp)?;
    Ok(Outcome {
        pass: check(&[&r]),
        detail: format!(
            "constant |rate| = {:.2e}, doubling |rate - log 2| = {:.2e}, passage decay rate = {:.2e}{}",
            value(&r, "constant.abs_rate"),
            value(&r, "doubling.rate_error"),
            value(&r, "passage_decay.rate"),
            failures(&[&r])
        ),
    })
}

fn block_entropy(exp: &Experiment) -> Result<Outcome, HarnessError> {
    let r = blocks_suite(exp)?;
    Ok(Outcome {
        pass: check(&[&r]),
        detail: format!(
            "bernoulli |h - log 2| = {:.2e}, period-2 h = {:.2e}{}",
            value(&r, "bernoulli.rate_error"),
            value(&r, "period2.rate"),
            failures(&[&r])
        ),
    })
}

fn robustness() -> Result<Outcome, HarnessError> {
    let linear = Experiment::build(&saddle_config(E2, 0))?;
    let cfg = perturbed_config();
    let spec = cfg.field_spec();
    // partitions and constants of the unperturbed saddle on the perturbed flow
    let global = assemble_global(&spec, &cfg.region.lo, &cfg.region.hi, None, linear.global.refined.clone())?;
    let exp = Experiment { config: cfg, spec, global };
    let p = &exp.global.refined[0].profile;
    let exits = exit_times_suite(&exp)?;
    let speeds = speeds_suite(&exp, 10_000);
    let part = partition_suite(&exp);
    let tube = tubes(&exp);
    let mut linear_dev = 0.0f64;
    for x in &sample_layer(p, p.n0 + 5, 200, 99).points {
        let (_, tp) = exit_times(&exp.spec, p, x)?;
        linear_dev = linear_dev.max((tp - (p.r / x[0].abs()).ln()).abs());
    }
    let (w, c, _) = tube_summary(&tube);
    Ok(Outcome {
        pass: check(&[&exits, &speeds, &part, &tube]),
        detail: format!(
            "amplitude 0.05: t/n in [{:.3}, {:.3}], deviation from reference {:.1e} (from the linear closed form {:.1e}), speed violations {}, diameter violations {}, same-cell pass {w:.3} vs control {c:.3}{}",
            value(&exits, "sigma0.min_t_over_n"),
            value(&exits, "sigma0.max_t_over_n"),
            value(&exits, "sigma0.oracle_deviation"),
            linear_dev,
            value(&speeds, "sigma0.violations"),
            value(&part, "sigma0.diameter_violations"),
            failures(&[&exits, &speeds, &part, &tube])
        ),
    })
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let lorenz = Experiment::build(&lorenz_config()).expect("lorenz experiment");
    let saddle = Experiment::build(&saddle_config(E2, 0)).expect("saddle experiment");
    let mut all = true;
    let mut emit = |id: u32, title: &str, o: Result<Outcome, HarnessError>| {
        let o = o.unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        all &= o.pass;
        println!("criterion {id:>2} [{title}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    emit(1, "exit-time slope", exit_time_slope());
    emit(2, "flow-speed layer bound", flow_speed(&lorenz));
    emit(3, "unique crossing", unique_crossing(&lorenz));
    let run = lorenz_measures(&lorenz);
    match &run {
        Ok(run) => emit(4, "tower sums", Ok(tower_sums(&lorenz, run))),
        Err(e) => emit(4, "tower sums", Err(HarnessError::Config(e.to_string()))),
    }
    emit(5, "partition bounds", partition_bounds());
    match &run {
        Ok(run) => emit(6, "entropy finiteness", Ok(entropy_finiteness(&lorenz, run))),
        Err(e) => emit(6, "entropy finiteness", Err(HarnessError::Config(e.to_string()))),
    }
    emit(7, "Mane lemma", Ok(mane(&saddle)));
    emit(8, "tube containment", tube_containment());
    match &run {
        Ok(run) => emit(9, "truncation gap", truncation_gap(&lorenz, run)),
        Err(e) => emit(9, "truncation gap", Err(HarnessError::Config(e.to_string()))),
    }
    emit(10, "shadowed-set rate", shadowed(&saddle));
    emit(11, "block-entropy sanity", block_entropy(&saddle));
    emit(12, "robustness", robustness());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
