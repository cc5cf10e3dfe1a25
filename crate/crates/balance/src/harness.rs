//! Baselines, the brute-force prefix oracle, and the experiment runner
//! behind the CLI: seeded trials, per-trial CSV rows, and an aggregate
//! JSON summary.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{
    balance_to_zero_sum, generate_random, load_instance, InstanceError, NormMode, VectorInstance,
};
use crate::walk::{self, AbortPolicy, Mode, ModeParams, RunReport, WalkConfig, WalkError};

pub const BRUTE_FORCE_MAX_N: usize = 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("brute force limited to n <= {BRUTE_FORCE_MAX_N}, got n = {0}")]
    TooLarge(usize),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "FULL_ASI")]
    FullAsi,
    #[serde(rename = "SI_ONLY")]
    SiOnly,
    #[serde(rename = "RANDOM")]
    Random,
    #[serde(rename = "BRUTE_FORCE")]
    BruteForce,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algorithm::FullAsi => "FULL_ASI",
            Algorithm::SiOnly => "SI_ONLY",
            Algorithm::Random => "RANDOM",
            Algorithm::BruteForce => "BRUTE_FORCE",
        };
        write!(f, "{s}")
    }
}

/// Where the input comes from: a file or a seeded generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceSpec {
    Path {
        path: PathBuf,
    },
    Generate {
        generate: GenerateSpec,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub n: usize,
    pub d: usize,
    pub norm_mode: NormMode,
    pub seed: u64,
    #[serde(default)]
    pub zero_sum: bool,
}

impl InstanceSpec {
    pub fn resolve(&self) -> Result<VectorInstance, HarnessError> {
        match self {
            InstanceSpec::Path { path } => Ok(load_instance(path)?),
            InstanceSpec::Generate { generate } => {
                let inst = generate_random(generate.n, generate.d, generate.norm_mode, generate.seed);
                Ok(if generate.zero_sum {
                    balance_to_zero_sum(&inst)
                } else {
                    inst
                })
            }
        }
    }
}

/// The run/experiment configuration accepted by `balance run --config`.
/// A single run when `trials`/`seeds` are absent; an experiment sweep
/// otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub instance: InstanceSpec,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub mode: Mode,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policy")]
    pub abort_policy: AbortPolicy,
    #[serde(rename = "C_tau", default = "default_c")]
    pub c_tau: f64,
    #[serde(rename = "C_lambda", default = "default_c")]
    pub c_lambda: f64,
    #[serde(default = "default_tol")]
    pub resolve_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_sdp_iter: usize,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub trajectory_csv: Option<PathBuf>,
    #[serde(default)]
    pub report_json: Option<PathBuf>,
    #[serde(default)]
    pub merge_log_jsonl: Option<PathBuf>,
    #[serde(default)]
    pub sdp_debug_dir: Option<PathBuf>,
    /// output stem for experiment mode: writes `{output}.csv` and
    /// `{output}.json`
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_dt() -> f64 {
    0.01
}
fn default_policy() -> AbortPolicy {
    AbortPolicy::WarnContinue
}
fn default_c() -> f64 {
    5.0
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    5000
}

impl RunConfigFile {
    pub fn walk_config(&self) -> WalkConfig {
        WalkConfig {
            dt: self.dt,
            c_tau: self.c_tau,
            c_lambda: self.c_lambda,
            abort_policy: self.abort_policy,
            resolve_tol: self.resolve_tol,
            max_sdp_iter: self.max_sdp_iter,
            si_only: self.algorithm == Algorithm::SiOnly,
            record_history: false,
            sdp_debug_dir: self.sdp_debug_dir.clone(),
        }
    }
}

/// Uniform random coloring with exact discrepancy evaluation.
pub fn baseline_random(inst: &VectorInstance, seed: u64) -> (Vec<i8>, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coloring: Vec<i8> = (0..inst.n())
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    let (l2, linf) = walk::evaluate_coloring(inst, &coloring);
    (coloring, l2, linf)
}

/// The walk with every ASI row removed (spectral independence only);
/// blocking prefixes are retained in `l2` mode. Isolates the ASI
/// contribution.
pub fn baseline_si_only(
    inst: &VectorInstance,
    mode: Mode,
    config: &WalkConfig,
    seed: u64,
) -> Result<RunReport, WalkError> {
    let cfg = WalkConfig {
        si_only: true,
        ..config.clone()
    };
    let params = ModeParams::derive(mode, inst.n(), inst.d(), cfg);
    walk::run(inst, params, seed)
}

/// Exact minimum over all `2^n` colorings of the max prefix `l2` norm.
pub fn brute_force_prefix_opt(inst: &VectorInstance) -> Result<f64, HarnessError> {
    let n = inst.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(HarnessError::TooLarge(n));
    }
    let d = inst.d();
    let a = inst.matrix();
    let mut best = f64::INFINITY;
    let mut sum: DVector<f64> = DVector::zeros(d);
    for mask in 0u32..(1u32 << n) {
        sum.fill(0.0);
        let mut worst = 0.0f64;
        for j in 0..n {
            let sign = if mask & (1 << j) != 0 { 1.0 } else { -1.0 };
            for i in 0..d {
                sum[i] += sign * a[(i, j)];
            }
            let norm = sum.norm();
            if norm > worst {
                worst = norm;
            }
            if worst >= best {
                break; // prune: cannot improve
            }
        }
        if worst < best {
            best = worst;
        }
    }
    Ok(best)
}

/// The additive target form the discrepancy is compared against when
/// calibrating constants: `sqrt(d) + d^{1/4} log2(n)^{7/4}` in `l2`
/// mode, `d + d^{3/4} log2(n) + d^{1/4} log2(n)^{3/2}` in `linf` mode.
pub fn calibration_form(mode: Mode, n: usize, d: usize) -> f64 {
    let df = d as f64;
    let log = (n.max(2) as f64).log2();
    match mode {
        Mode::L2ToL2 => df.sqrt() + df.powf(0.25) * log.powf(1.75),
        Mode::LinfToL2 => df + df.powf(0.75) * log + df.powf(0.25) * log.powf(1.5),
    }
}

/// One row of the per-trial CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub algorithm: String,
    pub n: usize,
    pub d: usize,
    pub mode: Mode,
    pub final_max_l2: f64,
    pub final_max_linf: f64,
    pub steps: u64,
    pub clip_events: u64,
    pub aborts: u64,
    pub fallbacks: u64,
    pub not_converged: bool,
    /// `final_max_l2 / calibration_form(mode, n, d)`
    pub ratio: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

pub const TRIAL_CSV_HEADER: &str = "trial,seed,algorithm,n,d,mode,final_max_l2,final_max_linf,\
                                    steps,clip_events,aborts,fallbacks,not_converged,ratio";

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::L2ToL2 => "L2_TO_L2",
        Mode::LinfToL2 => "LINF_TO_L2",
    }
}

impl TrialRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.trial,
            self.seed,
            self.algorithm,
            self.n,
            self.d,
            mode_name(self.mode),
            self.final_max_l2,
            self.final_max_linf,
            self.steps,
            self.clip_events,
            self.aborts,
            self.fallbacks,
            self.not_converged,
            self.ratio
        )
    }
}

/// Aggregate over the trial set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub algorithm: String,
    pub mode: Mode,
    pub n: usize,
    pub d: usize,
    pub median_max_l2: f64,
    pub max_max_l2: f64,
    pub median_max_linf: f64,
    pub median_ratio: f64,
    pub abort_count: u64,
    pub fallback_count: u64,
    pub not_converged_count: usize,
    pub total_wall_secs: f64,
    pub records: Vec<TrialRecord>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Runs one trial of the configured algorithm.
pub fn run_trial(
    inst: &VectorInstance,
    cfg: &RunConfigFile,
    trial: usize,
    seed: u64,
) -> Result<(TrialRecord, Option<RunReport>), HarnessError> {
    let record = |l2: f64, linf: f64, steps, clips, aborts, fallbacks, nc, wall| TrialRecord {
        trial,
        seed,
        algorithm: cfg.algorithm.to_string(),
        n: inst.n(),
        d: inst.d(),
        mode: cfg.mode,
        final_max_l2: l2,
        final_max_linf: linf,
        steps,
        clip_events: clips,
        aborts,
        fallbacks,
        not_converged: nc,
        ratio: l2 / calibration_form(cfg.mode, inst.n(), inst.d()),
        wall_secs: wall,
    };
    match cfg.algorithm {
        Algorithm::Random => {
            let start = std::time::Instant::now();
            let (_, l2, linf) = baseline_random(inst, seed);
            Ok((
                record(l2, linf, 0, 0, 0, 0, false, start.elapsed().as_secs_f64()),
                None,
            ))
        }
        Algorithm::BruteForce => {
            let start = std::time::Instant::now();
            let l2 = brute_force_prefix_opt(inst)?;
            Ok((
                record(l2, f64::NAN, 0, 0, 0, 0, false, start.elapsed().as_secs_f64()),
                None,
            ))
        }
        Algorithm::FullAsi | Algorithm::SiOnly => {
            let params = ModeParams::derive(cfg.mode, inst.n(), inst.d(), cfg.walk_config());
            let report = walk::run(inst, params, seed)?;
            let rec = record(
                report.final_max_l2_prefix_disc,
                report.final_max_linf_prefix_disc,
                report.steps,
                report.clip_total,
                report.abort_total,
                report.fallback_events.len() as u64,
                report.not_converged,
                report.wall_time_secs,
            );
            Ok((rec, Some(report)))
        }
    }
}

/// Executes the configured trials and writes `{output}.csv` plus
/// `{output}.json`. Outputs are byte-reproducible for fixed seeds
/// (wall-clock times only appear in the JSON summary).
pub fn run_experiment(cfg: &RunConfigFile) -> Result<ExperimentSummary, HarnessError> {
    let inst = cfg.instance.resolve()?;
    if cfg.algorithm == Algorithm::BruteForce && inst.n() > BRUTE_FORCE_MAX_N {
        return Err(HarnessError::TooLarge(inst.n()));
    }
    let seeds: Vec<u64> = match (&cfg.seeds, cfg.trials) {
        (Some(s), _) => s.clone(),
        (None, Some(k)) => (0..k as u64).map(|i| cfg.seed + i).collect(),
        (None, None) => vec![cfg.seed],
    };

    let mut records = Vec::with_capacity(seeds.len());
    for (trial, &seed) in seeds.iter().enumerate() {
        let (rec, _) = run_trial(&inst, cfg, trial, seed)?;
        records.push(rec);
    }

    let mut l2s: Vec<f64> = records.iter().map(|r| r.final_max_l2).collect();
    let mut linfs: Vec<f64> = records.iter().map(|r| r.final_max_linf).collect();
    let mut ratios: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    let summary = ExperimentSummary {
        trials: records.len(),
        algorithm: cfg.algorithm.to_string(),
        mode: cfg.mode,
        n: inst.n(),
        d: inst.d(),
        median_max_l2: median(&mut l2s),
        max_max_l2: records
            .iter()
            .map(|r| r.final_max_l2)
            .fold(f64::NEG_INFINITY, f64::max),
        median_max_linf: median(&mut linfs),
        median_ratio: median(&mut ratios),
        abort_count: records.iter().map(|r| r.aborts).sum(),
        fallback_count: records.iter().map(|r| r.fallbacks).sum(),
        not_converged_count: records.iter().filter(|r| r.not_converged).count(),
        total_wall_secs: records.iter().map(|r| r.wall_secs).sum(),
        records,
    };

    if let Some(stem) = &cfg.output {
        write_experiment_outputs(stem, &summary)?;
    }
    Ok(summary)
}

pub fn write_experiment_outputs(
    stem: &Path,
    summary: &ExperimentSummary,
) -> Result<(), HarnessError> {
    let csv_path = stem.with_extension("csv");
    let mut csv = String::new();
    csv.push_str(TRIAL_CSV_HEADER);
    csv.push('\n');
    for r in &summary.records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv).map_err(|source| HarnessError::Io {
        path: csv_path.clone(),
        source,
    })?;

    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(&json_path, text).map_err(|source| HarnessError::Io {
        path: json_path,
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn brute_force_hand_cases() {
        // two identical 1-d unit columns: the first prefix is always 1
        let a = DMatrix::from_column_slice(1, 2, &[1.0, 1.0]);
        let inst = VectorInstance::new(a, NormMode::L2Unit, false).unwrap();
        assert_abs_diff_eq!(brute_force_prefix_opt(&inst).unwrap(), 1.0, epsilon = 1e-12);

        // three ones: (+,-,+) achieves 1
        let a = DMatrix::from_column_slice(1, 3, &[1.0, 1.0, 1.0]);
        let inst = VectorInstance::new(a, NormMode::L2Unit, false).unwrap();
        assert_abs_diff_eq!(brute_force_prefix_opt(&inst).unwrap(), 1.0, epsilon = 1e-12);

        // single column: either sign gives its norm
        let a = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let inst = VectorInstance::new(a, NormMode::L2Unit, false).unwrap();
        assert_abs_diff_eq!(brute_force_prefix_opt(&inst).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_rejects_large() {
        let inst = generate_random(17, 2, NormMode::L2Unit, 1);
        assert!(matches!(
            brute_force_prefix_opt(&inst),
            Err(HarnessError::TooLarge(17))
        ));
    }

    #[test]
    fn random_baseline_deterministic_and_exact() {
        let inst = generate_random(1, 3, NormMode::L2Unit, 4);
        let (_, l2, _) = baseline_random(&inst, 9);
        assert_abs_diff_eq!(l2, inst.column(0).norm(), epsilon = 1e-12);

        let inst = generate_random(20, 3, NormMode::L2Unit, 4);
        let (c1, ..) = baseline_random(&inst, 9);
        let (c2, ..) = baseline_random(&inst, 9);
        assert_eq!(c1, c2);
    }

    #[test]
    fn oracle_lower_bounds_walk_and_random() {
        for seed in 0..4 {
            let inst = generate_random(10, 2, NormMode::L2Unit, seed);
            let opt = brute_force_prefix_opt(&inst).unwrap();
            let (_, rand_l2, _) = baseline_random(&inst, seed);
            assert!(rand_l2 >= opt - 1e-9);

            let params = ModeParams::derive(Mode::L2ToL2, 10, 2, WalkConfig::default());
            let report = walk::run(&inst, params, seed).unwrap();
            assert!(report.final_max_l2_prefix_disc >= opt - 1e-9);
        }
    }

    #[test]
    fn si_only_runs_and_matches_structure() {
        let inst = generate_random(30, 2, NormMode::L2Unit, 6);
        let full = {
            let params = ModeParams::derive(Mode::L2ToL2, 30, 2, WalkConfig::default());
            walk::run(&inst, params, 11).unwrap()
        };
        let si = baseline_si_only(&inst, Mode::L2ToL2, &WalkConfig::default(), 11).unwrap();
        assert!(si.si_only);
        assert!(!full.si_only);
        // identical configuration apart from the SDP constraint family
        assert_eq!(full.n, si.n);
        assert_eq!(full.dt, si.dt);
        assert!(si.step_records.iter().all(|r| r.asi_row_count == 0));
        assert!(full.step_records.iter().all(|r| r.asi_row_count > 0));
    }

    #[test]
    fn experiment_zero_trials_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("exp");
        let cfg = RunConfigFile {
            instance: InstanceSpec::Generate {
                generate: GenerateSpec {
                    n: 8,
                    d: 2,
                    norm_mode: NormMode::L2Unit,
                    seed: 1,
                    zero_sum: false,
                },
            },
            algorithm: Algorithm::Random,
            mode: Mode::L2ToL2,
            dt: 0.01,
            seed: 0,
            abort_policy: AbortPolicy::WarnContinue,
            c_tau: 5.0,
            c_lambda: 5.0,
            resolve_tol: 1e-6,
            max_sdp_iter: 5000,
            trials: Some(0),
            seeds: None,
            trajectory_csv: None,
            report_json: None,
            merge_log_jsonl: None,
            sdp_debug_dir: None,
            output: Some(stem.clone()),
        };
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.trials, 0);
        let text = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("trial,seed,algorithm"));
    }

    #[test]
    fn experiment_outputs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str| {
            let stem = dir.path().join(name);
            RunConfigFile {
                instance: InstanceSpec::Generate {
                    generate: GenerateSpec {
                        n: 16,
                        d: 2,
                        norm_mode: NormMode::L2Unit,
                        seed: 3,
                        zero_sum: false,
                    },
                },
                algorithm: Algorithm::FullAsi,
                mode: Mode::L2ToL2,
                dt: 0.02,
                seed: 5,
                abort_policy: AbortPolicy::WarnContinue,
                c_tau: 5.0,
                c_lambda: 5.0,
                resolve_tol: 1e-6,
                max_sdp_iter: 5000,
                trials: Some(2),
                seeds: None,
                trajectory_csv: None,
                report_json: None,
                merge_log_jsonl: None,
                sdp_debug_dir: None,
                output: Some(stem.clone()),
            }
        };
        let a = mk("a");
        let b = mk("b");
        run_experiment(&a).unwrap();
        run_experiment(&b).unwrap();
        let ca = std::fs::read(dir.path().join("a.csv")).unwrap();
        let cb = std::fs::read(dir.path().join("b.csv")).unwrap();
        assert_eq!(ca, cb, "trial CSVs must be byte-identical");
    }

    #[test]
    fn config_parses_spec_fields() {
        let text = r#"{
            "instance": {"generate": {"n": 8, "d": 2, "norm_mode": "L2_UNIT", "seed": 1}},
            "mode": "L2_TO_L2",
            "dt": 0.05,
            "seed": 9,
            "abort_policy": "HALT",
            "C_tau": 4.0,
            "C_lambda": 3.5,
            "resolve_tol": 1e-7,
            "max_sdp_iter": 100
        }"#;
        let cfg: RunConfigFile = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.dt, 0.05);
        assert_eq!(cfg.abort_policy, AbortPolicy::Halt);
        assert_eq!(cfg.c_tau, 4.0);
        assert_eq!(cfg.c_lambda, 3.5);
        assert_eq!(cfg.max_sdp_iter, 100);
        assert_eq!(cfg.algorithm, Algorithm::FullAsi);
        let wc = cfg.walk_config();
        assert_eq!(wc.resolve_tol, 1e-7);
    }
}
