//! Experiment orchestration: runs configured experiments and writes CSV,
//! JSON and SVG results tagged with the configuration digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{blob_digest, LoadedConfig, RunConfig};
use crate::dynamics::{
    evolve_pair, force_gradient_error, write_trajectory_rows, PairOutcome, TRAJECTORY_CSV_HEADER,
};
use crate::error::{Error, Result};
use crate::gibbs::{
    verify_marginal_bounds, verify_partition_bounds, CheckStatus, GibbsParams, MarginalReport,
    PartitionBoundReport,
};
use crate::metrics::{
    anchored_envelope, estimate_q, fit_linear_growth, Envelope, InitialShiftStats, LinearFit,
    QRun, TheoremParams,
};
use crate::plot::{line_plot, Series};
use crate::potential::{DerivativeBoundReport, PotentialSpec};
use crate::seed::{derive_seed, stream};
use crate::shifts::{
    beta_prime, tilde_mu_ratio_from_kinetic, tilde_mu_ratio_quadrature, verify_condition_psi2,
    ConditionReport, ShiftSpec,
};
use crate::state::PhaseState;
use crate::torus::TorusVector;

pub const QCURVE_CSV_HEADER: &str = "t,estimate,stderr,M_effective";
pub const PROOF_TERMS_CSV_HEADER: &str =
    "t,s1,s1_stderr,s1_delta,s1_delta_stderr,s2_majorant,s2_majorant_stderr";
pub const SWEEP_CSV_HEADER: &str = "cell,n,alpha,beta,epsilon,sigma,seed,delta_n,q0,q_end,\
fit_slope,fit_slope_stderr,envelope_slope,ls_max_positive_residual,pooled_stderr,\
s2_time_average,M_effective";

/// Command-line overrides of a configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub dump_trajectories: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gibbs,
    Shift,
    Potential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QCurveSummary {
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub shift: ShiftSpec,
    pub theorem: TheoremParams,
    pub delta_n: f64,
    pub l: usize,
    pub l_capped: bool,
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit: LinearFit,
    pub envelope: Envelope,
    pub m_requested: usize,
    pub m_effective: usize,
    pub rejections: BTreeMap<String, usize>,
    pub total_halvings: u64,
    pub max_velocity_term: f64,
    pub velocity_term_holds: bool,
    pub s2_time_average: Option<f64>,
    pub overlap: Option<Vec<f64>>,
    pub initial_shift: InitialShiftStats,
    pub pre_evolve: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCheck {
    pub velocity: [f64; 3],
    pub closed_form: f64,
    pub quadrature: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceCheck {
    pub states: usize,
    pub n: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChecksSummary {
    pub partition: Option<PartitionBoundReport>,
    pub marginals: Vec<MarginalReport>,
    pub condition: Option<ConditionReport>,
    pub beta_prime: Option<f64>,
    pub closed_form: Vec<ClosedFormCheck>,
    pub derivative_bounds: Option<DerivativeBoundReport>,
    pub force_consistency: Option<ForceCheck>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub directory: String,
    pub summary: QCurveSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    /// `max B_N / min B_N` over cells (envelope slopes).
    pub envelope_slope_ratio: f64,
    /// `max / min` of the S₂ majorant time average, when recorded.
    pub s2_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordOutput {
    Qcurve(Box<QCurveSummary>),
    Checks(Box<ChecksSummary>),
    Sweep(Box<SweepSummary>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub command: String,
    pub config_origin: String,
    pub config_sha256: String,
    /// Blob-style digest of the configuration text and effective master seed.
    pub inputs_digest: String,
    pub master_seed: u64,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub status: CheckStatus,
    pub rejections: BTreeMap<String, usize>,
    pub files: Vec<String>,
    pub output: RecordOutput,
}

pub struct Harness {
    loaded: LoadedConfig,
    options: RunOptions,
}

impl Harness {
    pub fn new(loaded: LoadedConfig, options: RunOptions) -> Result<Self> {
        if options.workers == Some(0) {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        Ok(Self { loaded, options })
    }

    pub fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    pub fn seed(&self) -> u64 {
        self.options.seed.unwrap_or(self.config().monte_carlo.seed)
    }

    pub fn workers(&self) -> usize {
        self.options.workers.unwrap_or(self.config().monte_carlo.workers)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.options
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(&self.config().output.directory))
    }

    fn digest_line(&self) -> String {
        format!("# config_sha256={}", self.loaded.digest)
    }

    fn inputs_digest(&self) -> String {
        let mut bytes = self.loaded.source.clone().into_bytes();
        bytes.extend_from_slice(format!("\nseed={}\n", self.seed()).as_bytes());
        blob_digest(&bytes)
    }

    fn record(
        &self,
        command: &str,
        started: Instant,
        status: CheckStatus,
        rejections: BTreeMap<String, usize>,
        files: Vec<String>,
        output: RecordOutput,
    ) -> ResultRecord {
        ResultRecord {
            command: command.into(),
            config_origin: self.loaded.origin.clone(),
            config_sha256: self.loaded.digest.clone(),
            inputs_digest: self.inputs_digest(),
            master_seed: self.seed(),
            workers: self.workers(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            status,
            rejections,
            files,
            output,
        }
    }

    fn write_record(&self, dir: &Path, record: &mut ResultRecord) -> Result<()> {
        if self.config().output.wants("json") {
            record.files.push("summary.json".into());
            let text = serde_json::to_string_pretty(record)?;
            fs::write(dir.join("summary.json"), text + "\n")?;
        }
        Ok(())
    }

    /// Q(t) for the configured shift, with fit, envelope and plots.
    pub fn run_qcurve(&self) -> Result<ResultRecord> {
        self.run_q_command("qcurve", 0.0)
    }

    /// Position-shift recipe: shift velocities at `-τ`, evolve to 0, then measure Q.
    pub fn run_position_shift_recipe(&self, tau: Option<f64>) -> Result<ResultRecord> {
        let tau = tau.unwrap_or(self.config().recipe.tau);
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau = {tau} must be >= 0")));
        }
        self.run_q_command("position-recipe", tau)
    }

    fn run_q_command(&self, command: &str, tau: f64) -> Result<ResultRecord> {
        let started = Instant::now();
        let dir = self.out_dir();
        fs::create_dir_all(&dir)?;
        let spec = self.config().potential_spec()?;
        let (summary, files) = self.q_experiment(self.config(), spec, self.seed(), tau, &dir)?;
        let rejections = summary.rejections.clone();
        let status = if summary.velocity_term_holds {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        let mut rec = self.record(
            command,
            started,
            status,
            rejections,
            files,
            RecordOutput::Qcurve(Box::new(summary)),
        );
        self.write_record(&dir, &mut rec)?;
        Ok(rec)
    }

    fn q_experiment(
        &self,
        config: &RunConfig,
        spec: PotentialSpec,
        seed: u64,
        tau: f64,
        dir: &Path,
    ) -> Result<(QCurveSummary, Vec<String>)> {
        let setup = config.q_setup(spec, seed, tau)?;
        info!(
            "estimating Q: n = {}, alpha = {}, beta = {}, samples = {}",
            setup.params.n,
            setup.params.spec.alpha(),
            setup.params.beta,
            setup.samples
        );
        let run = estimate_q(&setup, self.workers())?;
        let fit = fit_linear_growth(&run.curve)?;
        let envelope = anchored_envelope(&run.curve)?;
        let (l, l_capped) = setup.neighbor_count();
        let summary = QCurveSummary {
            n: setup.params.n,
            alpha: setup.params.spec.alpha(),
            beta: setup.params.beta,
            shift: setup.shift,
            theorem: setup.theorem.clone(),
            delta_n: run.curve.delta_n,
            l,
            l_capped,
            times: run.curve.times.clone(),
            q: run.curve.q.clone(),
            stderr: run.curve.stderr.clone(),
            fit,
            envelope,
            m_requested: run.curve.m_requested,
            m_effective: run.curve.m_effective,
            rejections: run.curve.rejections.clone(),
            total_halvings: run.total_halvings,
            max_velocity_term: run.max_velocity_term,
            velocity_term_holds: run.velocity_term_holds,
            s2_time_average: run.proof_terms.as_ref().map(|p| p.s2_time_average()),
            overlap: run.overlap.clone(),
            initial_shift: run.initial_shift.clone(),
            pre_evolve: tau,
        };
        let mut files = self.write_q_files(config, &run, &summary, dir)?;
        if self.options.dump_trajectories {
            files.push(self.dump_trajectories(&setup, dir)?);
        }
        Ok((summary, files))
    }

    fn write_q_files(
        &self,
        config: &RunConfig,
        run: &QRun,
        summary: &QCurveSummary,
        dir: &Path,
    ) -> Result<Vec<String>> {
        let mut files = Vec::new();
        if config.output.wants("csv") {
            fs::write(dir.join("qcurve.csv"), qcurve_csv(&self.digest_line(), run))?;
            files.push("qcurve.csv".into());
            if let Some(p) = &run.proof_terms {
                let mut s = String::new();
                let _ = writeln!(s, "{}", self.digest_line());
                let _ = writeln!(s, "# L={} capped={}", p.l, p.l_capped);
                let _ = writeln!(s, "{PROOF_TERMS_CSV_HEADER}");
                for k in 0..p.times.len() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        p.times[k],
                        p.s1[k],
                        p.s1_stderr[k],
                        p.s1_delta[k],
                        p.s1_delta_stderr[k],
                        p.s2_majorant[k],
                        p.s2_majorant_stderr[k]
                    );
                }
                fs::write(dir.join("proof_terms.csv"), s)?;
                files.push("proof_terms.csv".into());
            }
            if let Some(ov) = &run.overlap {
                let mut s = String::new();
                let _ = writeln!(s, "{}", self.digest_line());
                let _ = writeln!(s, "t,overlap");
                for (t, o) in run.curve.times.iter().zip(ov) {
                    let _ = writeln!(s, "{t},{o}");
                }
                fs::write(dir.join("overlap.csv"), s)?;
                files.push("overlap.csv".into());
            }
        }
        if config.output.wants("svg") {
            let t = &summary.times;
            let fit_line: Vec<f64> = t
                .iter()
                .map(|x| summary.fit.intercept + summary.fit.slope * x)
                .collect();
            let env_line: Vec<f64> = t
                .iter()
                .map(|x| summary.envelope.q0 + summary.envelope.slope * x)
                .collect();
            let title = format!(
                "Q(t), N = {}, alpha = {}, beta = {}, M = {}",
                summary.n, summary.alpha, summary.beta, summary.m_effective
            );
            let svg = line_plot(
                &title,
                "t",
                "Q(t)",
                &[
                    Series {
                        label: "estimate",
                        x: t,
                        y: &summary.q,
                        err: Some(&summary.stderr),
                        color: "#1f4e9c",
                        dashed: false,
                    },
                    Series {
                        label: "least-squares fit",
                        x: t,
                        y: &fit_line,
                        err: None,
                        color: "#c0392b",
                        dashed: true,
                    },
                    Series {
                        label: "affine envelope",
                        x: t,
                        y: &env_line,
                        err: None,
                        color: "#555555",
                        dashed: true,
                    },
                ],
                &format!("config_sha256={}", self.loaded.digest),
            );
            fs::write(dir.join("qcurve.svg"), svg)?;
            files.push("qcurve.svg".into());
        }
        Ok(files)
    }

    /// Writes both trajectories of sample 0 at the observation times.
    fn dump_trajectories(&self, setup: &crate::metrics::QSetup, dir: &Path) -> Result<String> {
        let mut out = Vec::new();
        out.extend_from_slice(format!("{}\ntrajectory,{TRAJECTORY_CSV_HEADER}\n", self.digest_line()).as_bytes());
        match setup.start_pair(0)? {
            Ok((a, b)) => {
                let outcome = evolve_pair(&a, &b, &setup.params.spec, &setup.integrator, |t, x, y| {
                    let mut rows = Vec::new();
                    for (tag, s) in [("base", x), ("shifted", y)] {
                        let mut buf = Vec::new();
                        let _ = write_trajectory_rows(&mut buf, t, s);
                        for line in String::from_utf8_lossy(&buf).lines() {
                            rows.push(format!("{tag},{line}\n"));
                        }
                    }
                    rows.concat()
                })?;
                match outcome {
                    PairOutcome::Accepted { records, .. } => {
                        for r in records {
                            out.extend_from_slice(r.observed.as_bytes());
                        }
                    }
                    PairOutcome::Rejected { reason, .. } => {
                        out.extend_from_slice(format!("# rejected: {}\n", reason.as_str()).as_bytes());
                    }
                }
            }
            Err(reason) => {
                out.extend_from_slice(format!("# rejected: {}\n", reason.as_str()).as_bytes());
            }
        }
        fs::write(dir.join("trajectories.csv"), out)?;
        Ok("trajectories.csv".into())
    }

    /// Runs one family of analytic-bound checks.
    pub fn run_checks(&self, which: CheckKind) -> Result<ResultRecord> {
        let started = Instant::now();
        let dir = self.out_dir();
        fs::create_dir_all(&dir)?;
        let cfg = self.config();
        let spec = cfg.potential_spec()?;
        let seed = self.seed();
        let mut summary = ChecksSummary::default();
        let mut statuses = Vec::new();
        let command = match which {
            CheckKind::Gibbs => {
                let pair = GibbsParams::new(cfg.gibbs.beta, 2, spec.clone())?;
                let p = verify_partition_bounds(&pair, &cfg.quadrature_config())?;
                statuses.push(p.status);
                summary.partition = Some(p);
                let params = GibbsParams::new(cfg.gibbs.beta, cfg.gibbs.n, spec)?;
                for k in [1usize, 2] {
                    let mut rng = stream(seed, k as u64, "check-marginal");
                    let m = verify_marginal_bounds(
                        &params,
                        k,
                        cfg.checks.marginal_samples,
                        cfg.checks.bins_per_side,
                        &cfg.chain,
                        &mut rng,
                    )?;
                    statuses.push(if m.holds {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    });
                    summary.marginals.push(m);
                }
                "check-gibbs"
            }
            CheckKind::Shift => {
                let params = GibbsParams::new(cfg.gibbs.beta, cfg.gibbs.n, spec)?;
                match cfg.shift {
                    ShiftSpec::GaussianVelocity { sigma } => {
                        summary.beta_prime = Some(beta_prime(cfg.gibbs.beta, sigma, cfg.gibbs.n));
                        for v in [[0.0, 0.0, 0.0], [0.7, -0.2, 1.1], [2.0, 0.5, -1.5]] {
                            let kin = 0.5 * crate::torus::norm_sq(v);
                            let closed_form = tilde_mu_ratio_from_kinetic(cfg.gibbs.beta, sigma, 1, kin);
                            let quadrature = tilde_mu_ratio_quadrature(cfg.gibbs.beta, sigma, v);
                            let relative_error = ((quadrature - closed_form) / closed_form).abs();
                            statuses.push(if relative_error < 1e-6 {
                                CheckStatus::Pass
                            } else {
                                CheckStatus::Fail
                            });
                            summary.closed_form.push(ClosedFormCheck {
                                velocity: v,
                                closed_form,
                                quadrature,
                                relative_error,
                            });
                        }
                    }
                    ShiftSpec::CompactVelocity { .. } => {
                        summary
                            .notes
                            .push("compact velocity shift: no closed-form image density".into());
                        statuses.push(CheckStatus::Inconclusive);
                    }
                    _ => {}
                }
                if !matches!(cfg.shift, ShiftSpec::CompactVelocity { .. }) {
                    let mut rng = stream(seed, 0, "check-shift");
                    let shift = cfg.shift.resolve(cfg.gibbs.n, cfg.theorem_params().delta_n(cfg.gibbs.n));
                    let c = verify_condition_psi2(
                        &params,
                        &shift,
                        cfg.checks.psi_samples,
                        &cfg.chain,
                        &mut rng,
                    )?;
                    statuses.push(c.status);
                    summary.condition = Some(c);
                }
                "check-shift"
            }
            CheckKind::Potential => {
                let d = spec.certify_derivative_bounds();
                statuses.push(if d.all_finite {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                });
                summary.derivative_bounds = Some(d);
                let n = cfg.gibbs.n.min(16);
                let mut rng = stream(seed, 0, "check-potential");
                let mut worst: f64 = 0.0;
                let states = 20;
                for _ in 0..states {
                    let s = random_positions(n, &mut rng)?;
                    worst = worst.max(force_gradient_error(&s, &spec, 1e-6)?);
                }
                let tolerance = 1e-5;
                statuses.push(if worst < tolerance {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                });
                summary.force_consistency = Some(ForceCheck {
                    states,
                    n,
                    max_relative_error: worst,
                    tolerance,
                });
                "check-potential"
            }
        };
        let status = combine(&statuses);
        let mut rec = self.record(
            command,
            started,
            status,
            BTreeMap::new(),
            Vec::new(),
            RecordOutput::Checks(Box::new(summary)),
        );
        self.write_record(&dir, &mut rec)?;
        Ok(rec)
    }

    /// Cross product of the sweep lists; cell `k` uses seed `derive_seed(master, k, "sweep-cell")`.
    pub fn run_sweep(&self) -> Result<ResultRecord> {
        let started = Instant::now();
        let dir = self.out_dir();
        fs::create_dir_all(&dir)?;
        let base = self.config();
        let sw = &base.sweep;
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let ns = if sw.n.is_empty() { vec![base.gibbs.n] } else { sw.n.clone() };
        let alphas = or(&sw.alpha, base.potential.alpha);
        let betas = or(&sw.beta, base.gibbs.beta);
        let sigma0 = shift_scale(&base.shift);
        let sigmas: Vec<Option<f64>> = if sw.sigma.is_empty() {
            vec![sigma0]
        } else {
            sw.sigma.iter().map(|s| Some(*s)).collect()
        };
        let mut specs: Vec<(f64, PotentialSpec)> = Vec::new();
        let mut cells = Vec::new();
        let mut rejections: BTreeMap<String, usize> = BTreeMap::new();
        let mut index = 0usize;
        for &alpha in &alphas {
            let eps_default = base.theorem.epsilon.unwrap_or(TheoremParams::for_alpha(alpha).epsilon);
            let epsilons = or(&sw.epsilon, eps_default);
            for &beta in &betas {
                for &epsilon in &epsilons {
                    for sigma in &sigmas {
                        for &n in &ns {
                            let mut cfg = match sigma {
                                Some(s) => base.with_sigma(*s),
                                None => base.clone(),
                            };
                            cfg.potential.alpha = alpha;
                            cfg.gibbs.beta = beta;
                            cfg.gibbs.n = n;
                            cfg.theorem.epsilon = Some(epsilon);
                            if cfg.theorem.a.is_some_and(|a| a <= 2.0 * alpha / 3.0) {
                                cfg.theorem.a = None;
                            }
                            cfg.validate_with_source(&self.loaded.source, &self.loaded.origin)?;
                            let spec = match specs.iter().find(|(a, _)| *a == alpha) {
                                Some((_, s)) => s.clone(),
                                None => {
                                    let s = cfg.potential_spec()?;
                                    specs.push((alpha, s.clone()));
                                    s
                                }
                            };
                            let seed = derive_seed(self.seed(), index as u64, "sweep-cell");
                            let name = format!("cell_{index:03}");
                            let cell_dir = dir.join(&name);
                            fs::create_dir_all(&cell_dir)?;
                            let (summary, _) = self.q_experiment(&cfg, spec, seed, 0.0, &cell_dir)?;
                            for (k, v) in &summary.rejections {
                                *rejections.entry(k.clone()).or_default() += v;
                            }
                            cells.push(SweepCell {
                                index,
                                n,
                                alpha,
                                beta,
                                epsilon,
                                sigma: *sigma,
                                seed,
                                directory: name,
                                summary,
                            });
                            index += 1;
                        }
                    }
                }
            }
        }
        let ratio = |xs: Vec<f64>| {
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            max / min
        };
        let envelope_slope_ratio = ratio(cells.iter().map(|c| c.summary.envelope.slope).collect());
        let s2: Vec<f64> = cells.iter().filter_map(|c| c.summary.s2_time_average).collect();
        let s2_ratio = (s2.len() == cells.len() && !s2.is_empty()).then(|| ratio(s2));
        let mut files = Vec::new();
        if base.output.wants("csv") {
            fs::write(dir.join("sweep.csv"), sweep_csv(&self.digest_line(), &cells))?;
            files.push("sweep.csv".into());
        }
        let status = if cells.iter().all(|c| c.summary.velocity_term_holds) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        let mut rec = self.record(
            "sweep",
            started,
            status,
            rejections,
            files,
            RecordOutput::Sweep(Box::new(SweepSummary {
                cells,
                envelope_slope_ratio,
                s2_ratio,
            })),
        );
        self.write_record(&dir, &mut rec)?;
        Ok(rec)
    }
}

fn shift_scale(s: &ShiftSpec) -> Option<f64> {
    match *s {
        ShiftSpec::GaussianVelocity { sigma } => Some(sigma),
        ShiftSpec::CompactVelocity { delta_m } => Some(delta_m),
        _ => None,
    }
}

fn combine(statuses: &[CheckStatus]) -> CheckStatus {
    if statuses.contains(&CheckStatus::Fail) {
        CheckStatus::Fail
    } else if statuses.contains(&CheckStatus::Inconclusive) {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::Pass
    }
}

fn random_positions(n: usize, rng: &mut impl rand::Rng) -> Result<PhaseState> {
    let pos = (0..n)
        .map(|_| TorusVector::new([rng.random(), rng.random(), rng.random()]))
        .collect();
    PhaseState::new(pos, vec![[0.0; 3]; n])
}

/// The Q(t) table: digest comment, header, one row per observation time.
pub fn qcurve_csv(digest_line: &str, run: &QRun) -> String {
    let c = &run.curve;
    let mut s = String::new();
    let _ = writeln!(s, "{digest_line}");
    let _ = writeln!(s, "{QCURVE_CSV_HEADER}");
    for k in 0..c.times.len() {
        let _ = writeln!(s, "{},{},{},{}", c.times[k], c.q[k], c.stderr[k], c.m_effective);
    }
    s
}

fn sweep_csv(digest_line: &str, cells: &[SweepCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{digest_line}");
    let _ = writeln!(s, "{SWEEP_CSV_HEADER}");
    for c in cells {
        let m = &c.summary;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.index,
            c.n,
            c.alpha,
            c.beta,
            c.epsilon,
            c.sigma.map(|x| x.to_string()).unwrap_or_default(),
            c.seed,
            m.delta_n,
            m.q[0],
            m.q[m.q.len() - 1],
            m.fit.slope,
            m.fit.slope_stderr,
            m.envelope.slope,
            m.envelope.ls_max_positive_residual,
            m.envelope.pooled_stderr,
            m.s2_time_average.map(|x| x.to_string()).unwrap_or_default(),
            m.m_effective
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
[potential]
alpha = 1.5

[gibbs]
beta = 1.0
n = 8

[chain]
burn_in_sweeps = 20

[shift]
kind = "zero"

[integrator]
dt = 0.001
t_end = 0.02
observations = 4

[monte_carlo]
samples = 3
seed = 5
"#;

    fn harness(src: &str, dir: &Path) -> Harness {
        let loaded = RunConfig::parse(src, "t.toml").unwrap();
        Harness::new(
            loaded,
            RunOptions {
                out_dir: Some(dir.to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_shift_qcurve_writes_zero_column() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = harness(CFG, tmp.path()).run_qcurve().unwrap();
        let csv = fs::read_to_string(tmp.path().join("qcurve.csv")).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# config_sha256="));
        assert_eq!(lines.next().unwrap(), QCURVE_CSV_HEADER);
        for l in lines {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols[1], "0");
            assert_eq!(cols[2], "0");
        }
        assert!(tmp.path().join("qcurve.svg").exists());
        let json = fs::read_to_string(tmp.path().join("summary.json")).unwrap();
        assert!(json.contains(&rec.config_sha256));
    }

    #[test]
    fn recipe_with_zero_tau_equals_qcurve() {
        let src = CFG.replace("kind = \"zero\"", "kind = \"gaussian_velocity\"\nsigma = 1.0");
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        harness(&src, a.path()).run_qcurve().unwrap();
        harness(&src, b.path()).run_position_shift_recipe(Some(0.0)).unwrap();
        assert_eq!(
            fs::read(a.path().join("qcurve.csv")).unwrap(),
            fs::read(b.path().join("qcurve.csv")).unwrap()
        );
    }

    #[test]
    fn sweep_runs_cross_product() {
        let src = CFG.replace("kind = \"zero\"", "kind = \"gaussian_velocity\"\nsigma = 1.0")
            + "\n[sweep]\nn = [4, 6]\nsigma = [0.5, 1.0]\n";
        let tmp = tempfile::tempdir().unwrap();
        let rec = harness(&src, tmp.path()).run_sweep().unwrap();
        let RecordOutput::Sweep(s) = rec.output else {
            panic!()
        };
        assert_eq!(s.cells.len(), 4);
        let seeds: std::collections::HashSet<u64> = s.cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 4);
        let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2 + 4);
        assert!(tmp.path().join("cell_003/qcurve.csv").exists());
    }

    #[test]
    fn free_case_checks_pass() {
        let src = CFG.replace("alpha = 1.5", "alpha = 1.5\namplitude = 0.0")
            + "\n[checks]\nmarginal_samples = 20000\npsi_samples = 50\n";
        let tmp = tempfile::tempdir().unwrap();
        let h = harness(&src, tmp.path());
        for kind in [CheckKind::Potential, CheckKind::Shift] {
            assert_eq!(h.run_checks(kind).unwrap().status, CheckStatus::Pass);
        }
        let g = h.run_checks(CheckKind::Gibbs).unwrap();
        let RecordOutput::Checks(c) = g.output else {
            panic!()
        };
        let p = c.partition.unwrap();
        assert!((p.b2 - p.lower_bound).abs() <= 1e-8 * p.lower_bound);
    }

    #[test]
    fn trajectories_are_dumped() {
        let tmp = tempfile::tempdir().unwrap();
        let loaded = RunConfig::parse(CFG, "t.toml").unwrap();
        let h = Harness::new(
            loaded,
            RunOptions {
                out_dir: Some(tmp.path().to_path_buf()),
                dump_trajectories: true,
                ..Default::default()
            },
        )
        .unwrap();
        h.run_qcurve().unwrap();
        let text = fs::read_to_string(tmp.path().join("trajectories.csv")).unwrap();
        // 5 observation times x 2 trajectories x 8 particles, plus two header lines
        assert_eq!(text.lines().count(), 2 + 5 * 2 * 8);
    }
}
