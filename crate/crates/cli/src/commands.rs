use std::path::{Path, PathBuf};

use anyhow::Context as _;
use prac_core::estimator::{
    expected_projector_moment, gradient_estimator_study, mc_projector_second_moment,
    mc_reconstruction_study, spectral_profile, DegenerateProfile, MomentReport, MonteCarloStudy,
    MIN_TRIALS,
};
use prac_core::ledger::{block_ledger, reconcile, Ledger};
use prac_core::linalg::{derive_seed, sample_gaussian, thin_qr};
use prac_core::projector::ProjectionMode;
use prac_core::train::demos::{
    bounded_variance_demo, counterexample_run, first_hit, BoundedVarianceParams,
    CounterexamplePoint, CounterexampleVariant, HarmonicSchedule,
};
use prac_core::train::{self, CompressionMode, RunSummary, StepRecord};
use prac_core::{Error, Matrix};
use serde::Serialize;

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::output::{report, write_csv, write_json, Check};
use crate::Failure;

pub struct Context<'a> {
    loaded: &'a LoadedConfig,
    out: PathBuf,
}

impl<'a> Context<'a> {
    /// Validates the config, creates the output directory and writes
    /// `effective-config.json`.
    pub fn prepare(loaded: &'a LoadedConfig) -> Result<Self, Failure> {
        validate(loaded)?;
        let out = loaded.config.output_dir.clone();
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        let ctx = Self { loaded, out };
        write_json(&ctx.path("effective-config.json"), ctx.cfg())?;
        Ok(ctx)
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Parameter errors are blamed on `section` of the config; anything
    /// else is a runtime failure.
    fn core(&self, section: &'static str) -> impl Fn(Error) -> Failure + '_ {
        move |e| match e {
            Error::Parameter(_) => Failure::Config(self.loaded.error_in(section, e)),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn validate(loaded: &LoadedConfig) -> Result<(), Failure> {
    let cfg = &loaded.config;
    let fail = |section: &str, msg: String| Failure::Config(loaded.error_in(section, msg));
    cfg.policy
        .validate()
        .map_err(|e| fail("policy", e.to_string()))?;
    cfg.train
        .validate()
        .map_err(|e| fail("train", e.to_string()))?;
    cfg.arch
        .validate()
        .map_err(|e| fail("arch", e.to_string()))?;
    if cfg.trials < MIN_TRIALS {
        return Err(fail(
            "trials",
            format!("trials must be at least {MIN_TRIALS}, got {}", cfg.trials),
        ));
    }
    if cfg.steps == 0 {
        return Err(fail("steps", "steps must be positive".into()));
    }
    for (name, z) in [
        ("entry_z", cfg.estimator.entry_z),
        ("mse_z", cfg.estimator.mse_z),
        ("entry_z", cfg.projector_moment.entry_z),
    ] {
        if !(z.is_finite() && z > 0.0) {
            return Err(fail(name, format!("{name} must be positive, got {z}")));
        }
    }
    if let Some(m) = cfg
        .k_sweep
        .multipliers
        .iter()
        .find(|m| !(m.is_finite() && **m > 0.0))
    {
        return Err(fail(
            "multipliers",
            format!("multipliers must be positive, got {m}"),
        ));
    }
    if cfg.sgd_bound.runs == 0 {
        return Err(fail("runs", "runs must be positive".into()));
    }
    Ok(())
}

fn finish(checks: &[Check]) -> Result<(), Failure> {
    let failed = report(checks);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    sigma: f64,
    energy: f64,
    cumulative_energy: f64,
}

#[derive(Serialize)]
struct ProfileOutput<'a> {
    matrix: String,
    rows: usize,
    cols: usize,
    rank_for_energy_90: usize,
    rank_for_energy_99: usize,
    profile: &'a DegenerateProfile,
}

pub fn profile_spectrum(ctx: &Context<'_>) -> Result<(), Failure> {
    let section = &ctx.cfg().profile;
    let x = section
        .matrix
        .build()
        .map_err(|m| Failure::Config(ctx.loaded.error_in("profile", m)))?;
    let profile = spectral_profile(&x, section.head).map_err(ctx.core("profile"))?;
    let rows = profile
        .sigma
        .iter()
        .zip(&profile.cumulative_energy)
        .enumerate()
        .map(|(i, (&sigma, &cumulative_energy))| SpectrumRow {
            index: i + 1,
            sigma,
            energy: sigma * sigma,
            cumulative_energy,
        });
    write_csv(&ctx.path("spectrum.csv"), rows)?;
    write_json(
        &ctx.path("profile.json"),
        &ProfileOutput {
            matrix: section.matrix.label(),
            rows: x.rows(),
            cols: x.cols(),
            rank_for_energy_90: profile.rank_for_energy(0.9),
            rank_for_energy_99: profile.rank_for_energy(0.99),
            profile: &profile,
        },
    )?;
    println!(
        "{}: s = {}, q = {:.6e}, total energy {:.6e}",
        section.matrix.label(),
        profile.head,
        profile.tail,
        profile.total_energy
    );
    Ok(())
}

#[derive(Serialize)]
struct StudySummary {
    #[serde(flatten)]
    report: MomentReport,
    max_entry_z: f64,
}

impl From<MonteCarloStudy> for StudySummary {
    fn from(s: MonteCarloStudy) -> Self {
        Self {
            max_entry_z: s.max_entry_z(),
            report: s.report,
        }
    }
}

#[derive(Serialize)]
struct CellReport {
    matrix: String,
    mode: ProjectionMode,
    r1: usize,
    r2: usize,
    reconstruction: StudySummary,
    gradient: Option<StudySummary>,
}

#[derive(Serialize)]
struct EstimatorOutput {
    trials: usize,
    seed: u64,
    entry_z: f64,
    mse_z: f64,
    cells: Vec<CellReport>,
    checks: Vec<Check>,
    passed: bool,
}

pub fn estimator_test(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let section = &cfg.estimator;
    let (entry_z, mse_z) = (section.entry_z, section.mse_z);
    let mut cells = Vec::new();
    let mut checks = Vec::new();
    for (i, cell) in section.cells.iter().enumerate() {
        let x = cell
            .matrix
            .build()
            .map_err(|m| Failure::Config(ctx.loaded.error_in("cells", m)))?;
        let seed = derive_seed(cfg.seed, i as u64);
        let name = format!(
            "cell {i} {} {}(r1={}, r2={})",
            cell.matrix.label(),
            cell.mode,
            cell.r1,
            cell.r2
        );
        let random = cell.mode != ProjectionMode::Pac;

        let rec = mc_reconstruction_study(&x, cell.mode, cell.r1, cell.r2, cfg.trials, seed)
            .map_err(ctx.core("cells"))?;
        if random {
            checks.push(Check::new(
                format!("{name} reconstruction unbiased"),
                rec.entries_within(entry_z),
                format!("max entry |z| = {:.2} (limit {entry_z})", rec.max_entry_z()),
            ));
        }
        checks.push(Check::new(
            format!("{name} reconstruction mse"),
            rec.report.mse_matches_theory(mse_z),
            format!(
                "mse {:.6} +- {:.6}, closed form {:.6} (z = {:.2}, limit {mse_z})",
                rec.report.mse,
                rec.report.mse_stderr,
                rec.report.theory_mse,
                rec.report.mse_z()
            ),
        ));

        let gradient = match cell.gradient_cols {
            None => None,
            Some(cols) => {
                let gy = sample_gaussian(x.rows(), cols, derive_seed(seed, 1));
                let grad = gradient_estimator_study(
                    &x,
                    &gy,
                    cell.mode,
                    cell.r1,
                    cell.r2,
                    cfg.trials,
                    derive_seed(seed, 2),
                )
                .map_err(ctx.core("cells"))?;
                if random {
                    checks.push(Check::new(
                        format!("{name} weight gradient unbiased"),
                        grad.entries_within(entry_z),
                        format!(
                            "max entry |z| = {:.2} (limit {entry_z})",
                            grad.max_entry_z()
                        ),
                    ));
                }
                checks.push(Check::new(
                    format!("{name} weight gradient mse bound"),
                    grad.report.mse_within_bound(mse_z),
                    format!(
                        "mse {:.6} +- {:.6}, bound {:.6}",
                        grad.report.mse, grad.report.mse_stderr, grad.report.theory_mse
                    ),
                ));
                Some(grad.into())
            }
        };
        cells.push(CellReport {
            matrix: cell.matrix.label(),
            mode: cell.mode,
            r1: cell.r1,
            r2: cell.r2,
            reconstruction: rec.into(),
            gradient,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    write_json(
        &ctx.path("estimator-report.json"),
        &EstimatorOutput {
            trials: cfg.trials,
            seed: cfg.seed,
            entry_z,
            mse_z,
            cells,
            checks: checks.clone(),
            passed,
        },
    )?;
    finish(&checks)
}

#[derive(Serialize)]
struct MomentCaseReport {
    dim: usize,
    r1: usize,
    r2: usize,
    seed: u64,
    max_entry_z: f64,
    trace: f64,
    expected_trace: f64,
    passed: bool,
}

#[derive(Serialize)]
struct MomentOutput {
    trials: usize,
    entry_z: f64,
    cases: Vec<MomentCaseReport>,
    passed: bool,
}

pub fn projector_moment(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let entry_z = cfg.projector_moment.entry_z;
    let mut cases = Vec::new();
    let mut checks = Vec::new();
    for (i, case) in cfg.projector_moment.cases.iter().enumerate() {
        let seed = derive_seed(cfg.seed, i as u64);
        if case.r1 >= case.dim {
            return Err(Failure::Config(ctx.loaded.error_in(
                "cases",
                format!("r1 = {} must be below dim = {}", case.r1, case.dim),
            )));
        }
        let q1 = if case.r1 == 0 {
            Matrix::zeros(case.dim, 0)
        } else {
            thin_qr(&sample_gaussian(case.dim, case.r1, derive_seed(seed, 0)))
                .map_err(ctx.core("cases"))?
        };
        let estimate = mc_projector_second_moment(&q1, case.r2, cfg.trials, derive_seed(seed, 1))
            .map_err(ctx.core("cases"))?;
        let expected = expected_projector_moment(&q1, case.r2);
        let max_entry_z = estimate
            .mean
            .as_slice()
            .iter()
            .zip(expected.as_slice())
            .zip(estimate.stderr.as_slice())
            .map(|((m, e), se)| if *se > 0.0 { (m - e).abs() / se } else { 0.0 })
            .fold(0.0, f64::max);
        let passed = estimate.matches(&expected, entry_z);
        checks.push(Check::new(
            format!("moment dim={} r1={} r2={}", case.dim, case.r1, case.r2),
            passed,
            format!("max entry |z| = {max_entry_z:.2} (limit {entry_z})"),
        ));
        cases.push(MomentCaseReport {
            dim: case.dim,
            r1: case.r1,
            r2: case.r2,
            seed,
            max_entry_z,
            trace: estimate.trace(),
            expected_trace: expected.trace(),
            passed,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    write_json(
        &ctx.path("projector-moment.json"),
        &MomentOutput {
            trials: cfg.trials,
            entry_z,
            cases,
            passed,
        },
    )?;
    finish(&checks)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    mode: CompressionMode,
    seed: u64,
    tail_loss_100: Option<f64>,
    #[serde(flatten)]
    summary: &'a RunSummary,
}

pub fn train(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let metrics =
        train::train(&cfg.train, &cfg.policy, cfg.steps, cfg.seed).map_err(ctx.core("policy"))?;
    write_csv(&ctx.path("metrics.csv"), &metrics.records)?;
    let tail = metrics.tail_loss(100);
    write_json(
        &ctx.path("summary.json"),
        &TrainOutput {
            mode: cfg.policy.mode,
            seed: cfg.seed,
            tail_loss_100: tail.is_finite().then_some(tail),
            summary: &metrics.summary,
        },
    )?;
    let s = &metrics.summary;
    match s.diverged_at {
        Some(t) => println!("{}: diverged at step {t}", cfg.policy.mode),
        None => println!(
            "{}: {} steps, final loss {:.6e}, {} activation scalars, {} SVD / {} QR",
            cfg.policy.mode,
            s.steps_completed,
            s.final_loss.unwrap_or(f64::NAN),
            s.peak_activation_scalars,
            s.svd_count,
            s.qr_count
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct CounterexampleVerdict {
    steps: u64,
    lr_scale: f64,
    /// Biased run: every iterate keeps its starting second coordinate.
    w2_constant: bool,
    biased_final: CounterexamplePoint,
    /// Maximum-selection run: no update taken while `|w1| < 2` moves `w2`.
    max_selection_w2_constant: bool,
    max_selection_steps_checked: u64,
    max_selection_final: CounterexamplePoint,
    unbiased_steps: u64,
    unbiased_lr_scale: f64,
    threshold: f64,
    unbiased_first_hit: Option<u64>,
    unbiased_final: CounterexamplePoint,
}

pub fn counterexample(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let c = &cfg.counterexample;
    let run = |variant, steps, scale, start: [f64; 2], stream| {
        counterexample_run(
            steps,
            HarmonicSchedule { scale },
            variant,
            (start[0], start[1]),
            derive_seed(cfg.seed, stream),
        )
        .map_err(ctx.core("counterexample"))
    };
    let biased = run(
        CounterexampleVariant::Biased,
        c.steps,
        c.lr_scale,
        c.start,
        0,
    )?;
    let max_sel = run(
        CounterexampleVariant::MaxSelection,
        c.steps,
        c.lr_scale,
        c.max_selection_start,
        1,
    )?;
    let unbiased = run(
        CounterexampleVariant::Unbiased,
        c.unbiased_steps,
        c.unbiased_lr_scale,
        c.start,
        2,
    )?;
    write_csv(&ctx.path("trajectory-biased.csv"), &biased)?;
    write_csv(&ctx.path("trajectory-max-selection.csv"), &max_sel)?;
    write_csv(&ctx.path("trajectory-unbiased.csv"), &unbiased)?;

    let w2_constant = biased.iter().all(|p| p.w2 == c.start[1]);
    let small: Vec<_> = max_sel.windows(2).filter(|w| w[0].w1.abs() < 2.0).collect();
    let max_selection_w2_constant = small.iter().all(|w| w[1].w2 == w[0].w2);
    let hit = first_hit(&unbiased, c.threshold);
    let last = |t: &[CounterexamplePoint]| *t.last().expect("trajectories are non-empty");

    let checks = vec![
        Check::new(
            "biased update leaves w2 constant",
            w2_constant,
            format!("final w = ({:.6}, {})", last(&biased).w1, last(&biased).w2),
        ),
        Check::new(
            "max-selection leaves w2 constant while |w1| < 2",
            max_selection_w2_constant,
            format!("{} updates checked", small.len()),
        ),
        Check::new(
            "unbiased update reaches the threshold",
            hit.is_some(),
            match hit {
                Some(t) => format!("|grad f| <= {} at step {t}", c.threshold),
                None => format!("not reached in {} steps", c.unbiased_steps),
            },
        ),
    ];
    write_json(
        &ctx.path("counterexample-verdict.json"),
        &CounterexampleVerdict {
            steps: c.steps,
            lr_scale: c.lr_scale,
            w2_constant,
            biased_final: last(&biased),
            max_selection_w2_constant,
            max_selection_steps_checked: small.len() as u64,
            max_selection_final: last(&max_sel),
            unbiased_steps: c.unbiased_steps,
            unbiased_lr_scale: c.unbiased_lr_scale,
            threshold: c.threshold,
            unbiased_first_hit: hit,
            unbiased_final: last(&unbiased),
        },
    )?;
    finish(&checks)
}

#[derive(Serialize)]
struct SgdRow {
    point: usize,
    run: u64,
    step: usize,
    grad_norm_sq: f64,
}

#[derive(Serialize)]
struct SgdRun {
    point: usize,
    run: u64,
    seed: u64,
    #[serde(flatten)]
    params: BoundedVarianceParams,
    step_size: f64,
    min_grad_norm_sq: f64,
    bound: f64,
    within_bound: bool,
}

#[derive(Serialize)]
struct SgdVerdict {
    runs: Vec<SgdRun>,
    all_within_bound: bool,
}

pub fn sgd_bound(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let section = &cfg.sgd_bound;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut checks = Vec::new();
    for (point, &params) in section.grid.iter().enumerate() {
        for run in 0..section.runs {
            let seed = derive_seed(cfg.seed, point as u64 * section.runs + run);
            let out = bounded_variance_demo(params, seed).map_err(ctx.core("grid"))?;
            rows.extend(
                out.grad_norm_sq
                    .iter()
                    .enumerate()
                    .map(|(step, &g)| SgdRow {
                        point,
                        run,
                        step,
                        grad_norm_sq: g,
                    }),
            );
            checks.push(Check::new(
                format!(
                    "L={} gap={} sigma={} T={} run {run}",
                    params.smoothness, params.initial_gap, params.noise, params.steps
                ),
                out.within_bound(),
                format!(
                    "min |grad f|^2 = {:.6e}, bound {:.6e}",
                    out.min_grad_norm_sq, out.bound
                ),
            ));
            runs.push(SgdRun {
                point,
                run,
                seed,
                params,
                step_size: out.step_size,
                min_grad_norm_sq: out.min_grad_norm_sq,
                bound: out.bound,
                within_bound: out.within_bound(),
            });
        }
    }
    write_csv(&ctx.path("sgd-bound.csv"), rows)?;
    write_json(
        &ctx.path("sgd-bound-verdict.json"),
        &SgdVerdict {
            all_within_bound: runs.iter().all(|r| r.within_bound),
            runs,
        },
    )?;
    finish(&checks)
}

#[derive(Serialize)]
struct ReconcileOutput {
    run_dir: PathBuf,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<prac_core::ledger::ReconcileReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
}

pub fn memory_report(ctx: &Context<'_>, run_dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let ledger: Ledger = block_ledger(&cfg.arch, &cfg.policy).map_err(ctx.core("policy"))?;
    write_csv(&ctx.path("ledger.csv"), &ledger.rows)?;
    let text = ledger.to_text(cfg.element_bytes);
    std::fs::write(ctx.path("ledger.txt"), &text).context("writing ledger.txt")?;
    write_json(&ctx.path("ledger.json"), &ledger)?;
    print!("{text}");

    let Some(dir) = run_dir else {
        return Ok(());
    };
    let summary: RunSummary = {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    let per_step: Vec<u64> = {
        let path = dir.join("metrics.csv");
        let mut reader =
            csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        reader
            .deserialize::<StepRecord>()
            .map(|r| r.map(|r| r.act_scalars))
            .collect::<Result<_, _>>()
            .with_context(|| format!("parsing {}", path.display()))?
    };
    let outcome = reconcile(&ledger, &summary, &per_step);
    let (passed, report, failure) = match outcome {
        Ok(r) => (true, Some(r), None),
        Err(e @ Error::Reconciliation { .. }) => (false, None, Some(e.to_string())),
        Err(e) => return Err(ctx.core("arch")(e)),
    };
    write_json(
        &ctx.path("reconcile.json"),
        &ReconcileOutput {
            run_dir: dir.to_path_buf(),
            passed,
            report,
            failure: failure.clone(),
        },
    )?;
    let detail = match &failure {
        Some(f) => f.clone(),
        None => format!("engine rows match over {} steps", per_step.len()),
    };
    finish(&[Check::new("reconcile", passed, detail)])
}

#[derive(Serialize)]
struct KSweepRow {
    multiplier: f64,
    step: u64,
    loss: f64,
    grad_norm: f64,
    act_scalars: u64,
}

#[derive(Serialize)]
struct KSweepRun {
    multiplier: f64,
    final_loss: Option<f64>,
    tail_loss_100: Option<f64>,
    diverged: bool,
    diverged_at: Option<u64>,
}

pub fn k_sweep(ctx: &Context<'_>) -> Result<(), Failure> {
    let cfg = ctx.cfg();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &multiplier in &cfg.k_sweep.multipliers {
        let policy = train::CompressionPolicy {
            scale_multiplier: multiplier,
            ..cfg.policy
        };
        let metrics =
            train::train(&cfg.train, &policy, cfg.steps, cfg.seed).map_err(ctx.core("policy"))?;
        rows.extend(metrics.records.iter().map(|r| KSweepRow {
            multiplier,
            step: r.step,
            loss: r.loss,
            grad_norm: r.grad_norm,
            act_scalars: r.act_scalars,
        }));
        let tail = metrics.tail_loss(100);
        println!(
            "k x {multiplier}: {}",
            if metrics.summary.diverged {
                "diverged".to_string()
            } else {
                format!("tail loss {tail:.6e}")
            }
        );
        runs.push(KSweepRun {
            multiplier,
            final_loss: metrics.summary.final_loss,
            tail_loss_100: tail.is_finite().then_some(tail),
            diverged: metrics.summary.diverged,
            diverged_at: metrics.summary.diverged_at,
        });
    }
    write_csv(&ctx.path("k-sweep.csv"), rows)?;
    write_json(&ctx.path("k-sweep.json"), &runs)?;
    Ok(())
}
