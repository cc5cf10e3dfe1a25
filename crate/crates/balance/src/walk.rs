//! The SDP-guided coloring walk: sliding-window lifecycle, per-step SDP
//! assembly from tree state, sampling, clipping, prefix-discrepancy
//! tracking, abort thresholds, and final rounding.
//!
//! Two variants share the machinery. The `linf`-input mode guards
//! prefixes with the alive-count tree only; the `l2`-input mode adds `d`
//! per-row squared-mass trees whose guarded prefixes become blocking
//! constraints, plus an `linf` abort threshold.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{NormMode, VectorInstance};
use crate::merge_tree::{
    accumulated_error_set, GuardSet, Interval, MergeTree, SizeMeasure, StepWindow, TreeEvent,
    WindowView,
};
use crate::sdp::{self, AsiRow, SdpError, SdpProblem};

/// Which prefix-discrepancy regime the walk runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "LINF_TO_L2")]
    LinfToL2,
    #[serde(rename = "L2_TO_L2")]
    L2ToL2,
}

/// What to do when a prefix exceeds its abort threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortPolicy {
    #[serde(rename = "HALT")]
    Halt,
    #[serde(rename = "WARN_CONTINUE")]
    WarnContinue,
}

/// Tunable run configuration; `ModeParams::derive` adds the per-mode
/// derived quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WalkConfig {
    pub dt: f64,
    pub c_tau: f64,
    pub c_lambda: f64,
    pub abort_policy: AbortPolicy,
    pub resolve_tol: f64,
    pub max_sdp_iter: usize,
    /// Drop every ASI row from the SDP (spectral independence only).
    pub si_only: bool,
    /// Record per-step updates and guard sets for post-run audits.
    pub record_history: bool,
    /// Directory receiving a JSON dump of (problem, U, report) when a
    /// step's SDP fails its residual check.
    pub sdp_debug_dir: Option<std::path::PathBuf>,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            c_tau: 5.0,
            c_lambda: 5.0,
            abort_policy: AbortPolicy::WarnContinue,
            resolve_tol: 1e-6,
            max_sdp_iter: 5000,
            si_only: false,
            record_history: false,
            sdp_debug_dir: None,
        }
    }
}

/// Per-mode derived parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeParams {
    pub mode: Mode,
    pub gamma_asi: f64,
    pub tau: f64,
    pub lambda: Option<f64>,
    /// Base interval size for the guard tree, clamped to >= 2.
    pub s: f64,
    pub s_clamped: bool,
    /// Base squared-mass for the per-row blocking trees.
    pub s0: Option<f64>,
    pub theta_dead: f64,
    pub config: WalkConfig,
}

impl ModeParams {
    pub fn derive(mode: Mode, n: usize, d: usize, config: WalkConfig) -> Self {
        let df = d as f64;
        let log = (n.max(2) as f64).log2();
        let (gamma_asi, tau, lambda, s0) = match mode {
            Mode::LinfToL2 => {
                let gamma = 100.0 * df.sqrt() * log;
                let tau =
                    config.c_tau * (df + df.powf(0.75) * log + df.powf(0.25) * log.powf(1.5));
                (gamma, tau, None, None)
            }
            Mode::L2ToL2 => {
                let gamma = 100.0 * df.sqrt() / log.sqrt();
                let tau = config.c_tau * (df.sqrt() + df.powf(0.25) * log.powf(1.75));
                let lambda = config.c_lambda * log.powf(1.5);
                (gamma, tau, Some(lambda), Some(20.0 * log))
            }
        };
        let s_formula = 20.0 * df * log / gamma_asi;
        let s = s_formula.max(2.0);
        let theta_dead = (1.0 / (2.0 * n as f64 * df)).max(config.dt.sqrt() / 2.0);
        Self {
            mode,
            gamma_asi,
            tau,
            lambda,
            s,
            s_clamped: s_formula < 2.0,
            s0,
            theta_dead,
            config,
        }
    }
}

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("instance norm mode {inst} does not match walk mode {mode:?}")]
    ModeMismatch { inst: NormMode, mode: Mode },
    #[error("sdp failure at step {step} after retry: {source}")]
    SdpFailure { step: u64, source: SdpError },
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("{alive} columns ({frac:.2}%) still alive at budget exhaustion")]
    NotConverged { alive: usize, frac: f64 },
    #[error("per-step history unavailable; run with record_history")]
    HistoryUnavailable,
}

/// Per-step trajectory record. The CSV export uses the first ten fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    /// first window column (0-based)
    pub window_lo: usize,
    /// one past the last window column
    pub window_hi: usize,
    pub n_guards: usize,
    pub max_l2_prefix_disc: f64,
    pub max_linf_prefix_disc: f64,
    pub sdp_psd_residual: f64,
    pub sdp_window_residual: f64,
    pub sdp_trace: f64,
    pub clip_events: u64,
    pub window_cols: usize,
    pub sdp_cycles: usize,
    pub sdp_si_min_eig: f64,
    pub sdp_asi_min_eig: f64,
    pub blocking_dim: usize,
    pub asi_row_count: usize,
    pub blocking_guard_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortKind {
    L2,
    Linf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortEvent {
    pub step: u64,
    pub prefix: usize,
    pub norm: f64,
    pub kind: AbortKind,
    pub halted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FallbackKind {
    AsiGuardBudget,
    AsiRowsSuppressed,
    BlockingGuardBudget,
    BlockingGuardDropped,
    XBlockDropped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FallbackEvent {
    pub step: u64,
    pub kind: FallbackKind,
    pub detail: String,
}

/// Everything a finished run reports. Includes the raw material for
/// post-run audits: per-step window spans, per-column death steps, and
/// the tree event logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub d: usize,
    pub mode: Mode,
    pub seed: u64,
    pub dt: f64,
    pub gamma_asi: f64,
    pub tau: f64,
    pub lambda: Option<f64>,
    pub s: f64,
    pub s_clamped: bool,
    pub s0: Option<f64>,
    pub theta_dead: f64,
    pub si_only: bool,
    pub steps: u64,
    pub max_steps: u64,
    pub step_records: Vec<StepRecord>,
    pub abort_events: Vec<AbortEvent>,
    pub abort_total: u64,
    pub fallback_events: Vec<FallbackEvent>,
    pub clip_total: u64,
    pub sdp_retries: u64,
    pub w1_violations: u64,
    pub w2_violations: u64,
    pub w3_violations: u64,
    pub neutrality_violations: u64,
    pub transfer_violations: u64,
    pub tree_violations: u64,
    pub alive_at_end: usize,
    pub not_converged: bool,
    pub halted: bool,
    pub final_coloring: Vec<i8>,
    pub final_max_l2_prefix_disc: f64,
    pub final_max_linf_prefix_disc: f64,
    pub trajectory_max_l2: f64,
    pub trajectory_max_linf: f64,
    pub rounding_delta_max_l2: f64,
    pub rounding_delta_bound: f64,
    pub windows: Vec<StepWindow>,
    pub death_step: Vec<u32>,
    pub asi_tree_events: Vec<TreeEvent>,
    pub blocking_tree_events: Vec<Vec<TreeEvent>>,
    pub asi_final_leaves: Vec<(u32, Interval)>,
    pub blocking_final_leaves: Vec<Vec<(u32, Interval)>>,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Writes the trajectory CSV: one row per step with the documented
    /// column set.
    pub fn write_trajectory_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "step,t,window_lo,window_hi,n_guards,max_l2_prefix_disc,\
             max_linf_prefix_disc,sdp_psd_residual,sdp_window_residual,clip_events"
        )?;
        for r in &self.step_records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.t,
                r.window_lo,
                r.window_hi,
                r.n_guards,
                r.max_l2_prefix_disc,
                r.max_linf_prefix_disc,
                r.sdp_psd_residual,
                r.sdp_window_residual,
                r.clip_events
            )?;
        }
        Ok(())
    }
}

/// Optional per-step history for decomposition audits.
#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    /// window columns and sampled update per step
    pub updates: Vec<(Vec<usize>, DVector<f64>)>,
    /// ASI guard set per step
    pub guard_sets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Stepped,
    AbortedHalt,
}

/// Result of rounding the fractional coloring.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub coloring: Vec<i8>,
    /// max over prefixes of the l2 norm of the rounding-induced change
    pub delta_max_l2: f64,
    /// upper bound sum_j (1 - |x_j|) max_i |A_ij|
    pub delta_bound: f64,
    pub alive_count: usize,
}

pub struct WalkState {
    inst: VectorInstance,
    pub params: ModeParams,
    x: DVector<f64>,
    steps: u64,
    max_steps: u64,
    alive: Vec<bool>,
    death_step: Vec<u32>,
    window: Vec<usize>,
    span_lo: usize,
    span_hi: usize,
    rows_enforced: bool,
    ever_dropped_rows: bool,
    x_drop_logged: bool,
    asi_suppress_logged: bool,
    x_blocked: bool,
    phi: DMatrix<f64>,
    asi_tree: MergeTree,
    inf_trees: Vec<MergeTree>,
    rng: ChaCha8Rng,
    warm: Option<(Vec<usize>, DMatrix<f64>)>,
    report: RunReport,
    history: Option<RunHistory>,
    frozen_phi: Vec<Option<DVector<f64>>>,
    frozen_upto: usize,
    entry_hi: usize,
    halted: bool,
}

impl WalkState {
    /// Starts a walk at `x = 0` with the window over the first
    /// `min(10 d, n)` columns and both tree families initialized and
    /// activated.
    pub fn init(inst: &VectorInstance, params: ModeParams, seed: u64) -> Result<Self, WalkError> {
        match (params.mode, inst.norm_mode()) {
            (Mode::LinfToL2, NormMode::LinfUnit) | (Mode::L2ToL2, NormMode::L2Unit) => {}
            _ => {
                return Err(WalkError::ModeMismatch {
                    inst: inst.norm_mode(),
                    mode: params.mode,
                })
            }
        }
        let n = inst.n();
        let d = inst.d();
        let a = inst.matrix();
        let asi_tree = MergeTree::init(n, params.s, SizeMeasure::AliveCount, a);
        let inf_trees = match params.mode {
            Mode::L2ToL2 => {
                let s0 = params.s0.expect("l2 mode has s0");
                (0..d)
                    .map(|row| MergeTree::init(n, s0, SizeMeasure::L2SqMass { row }, a))
                    .collect()
            }
            Mode::LinfToL2 => Vec::new(),
        };
        let max_steps = ((n as f64 / params.config.dt).ceil() * 1.1).ceil() as u64;
        let report = RunReport {
            n,
            d,
            mode: params.mode,
            seed,
            dt: params.config.dt,
            gamma_asi: params.gamma_asi,
            tau: params.tau,
            lambda: params.lambda,
            s: params.s,
            s_clamped: params.s_clamped,
            s0: params.s0,
            theta_dead: params.theta_dead,
            si_only: params.config.si_only,
            steps: 0,
            max_steps,
            step_records: Vec::new(),
            abort_events: Vec::new(),
            abort_total: 0,
            fallback_events: Vec::new(),
            clip_total: 0,
            sdp_retries: 0,
            w1_violations: 0,
            w2_violations: 0,
            w3_violations: 0,
            neutrality_violations: 0,
            transfer_violations: 0,
            tree_violations: 0,
            alive_at_end: n,
            not_converged: false,
            halted: false,
            final_coloring: Vec::new(),
            final_max_l2_prefix_disc: 0.0,
            final_max_linf_prefix_disc: 0.0,
            trajectory_max_l2: 0.0,
            trajectory_max_linf: 0.0,
            rounding_delta_max_l2: 0.0,
            rounding_delta_bound: 0.0,
            windows: Vec::new(),
            death_step: Vec::new(),
            asi_tree_events: Vec::new(),
            blocking_tree_events: Vec::new(),
            asi_final_leaves: Vec::new(),
            blocking_final_leaves: Vec::new(),
            wall_time_secs: 0.0,
        };
        let record_history = params.config.record_history;
        let mut state = Self {
            inst: inst.clone(),
            params,
            x: DVector::zeros(n),
            steps: 0,
            max_steps,
            alive: vec![true; n],
            death_step: vec![u32::MAX; n],
            window: Vec::new(),
            span_lo: 0,
            span_hi: 0,
            rows_enforced: true,
            ever_dropped_rows: false,
            x_drop_logged: false,
            asi_suppress_logged: false,
            x_blocked: true,
            phi: DMatrix::zeros(d, n),
            asi_tree,
            inf_trees,
            rng: ChaCha8Rng::seed_from_u64(seed),
            warm: None,
            report,
            history: record_history.then(RunHistory::default),
            frozen_phi: vec![None; n],
            frozen_upto: 0,
            entry_hi: 0,
            halted: false,
        };
        state.advance_window();
        let alive = state.alive.clone();
        let view = WindowView {
            span_lo: state.span_lo,
            span_hi: state.span_hi,
            alive: &alive,
        };
        state.asi_tree.activate(&view, 0);
        state.asi_tree.merge_pass(&alive, 0);
        for tree in &mut state.inf_trees {
            tree.activate(&view, 0);
            tree.merge_pass(&alive, 0);
        }
        Ok(state)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn max_steps(&self) -> u64 {
        self.max_steps
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn window(&self) -> &[usize] {
        &self.window
    }

    pub fn rows_enforced(&self) -> bool {
        self.rows_enforced
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn history(&self) -> Option<&RunHistory> {
        self.history.as_ref()
    }

    pub fn asi_tree(&self) -> &MergeTree {
        &self.asi_tree
    }

    pub fn inf_trees(&self) -> &[MergeTree] {
        &self.inf_trees
    }

    /// Refreshes the dead mask from the alive predicate and recomputes
    /// the window as the first `10 d` alive columns (all remaining when
    /// fewer). Once at most `10 d` columns are alive the window has hit
    /// the end of the input and the window-row constraints are dropped.
    pub fn advance_window(&mut self) {
        let n = self.inst.n();
        let cap = 10 * self.inst.d();
        let theta = self.params.theta_dead;
        for j in 0..n {
            if self.alive[j] && self.x[j].abs() > 1.0 - theta {
                self.alive[j] = false;
                self.death_step[j] = self.steps as u32;
            }
        }
        self.window.clear();
        for j in 0..n {
            if self.alive[j] {
                if self.window.len() < cap {
                    self.window.push(j);
                }
            }
        }
        self.span_lo = self.window.first().copied().unwrap_or(n);
        self.span_hi = self.window.last().map(|&j| j + 1).unwrap_or(n);
        // The window-row constraints are enforced while the window leaves
        // enough dimensions for a nonzero update; below 2 d alive columns
        // they would pin the update to ~0 and are dropped.
        self.rows_enforced = self.window.len() >= 2 * self.inst.d();

        // prefix-entry drift check (W2), valid while window rows were
        // enforced for the whole run so far
        if !self.ever_dropped_rows && self.span_hi > self.entry_hi {
            let limit = self.steps as f64 * 1e-4;
            for p in (self.entry_hi + 1)..=self.span_hi {
                let drift = self.phi.column(p - 1).amax();
                if drift > limit {
                    self.report.w2_violations += 1;
                }
            }
            self.entry_hi = self.span_hi;
        }
        if !self.rows_enforced {
            self.ever_dropped_rows = true;
        }

        // freeze check (W3): prefixes whose columns are all dead must
        // keep bitwise-constant discrepancies
        let new_frozen = self.span_lo;
        for p in (self.frozen_upto + 1)..=new_frozen {
            self.frozen_phi[p - 1] = Some(self.phi.column(p - 1).into_owned());
        }
        if new_frozen > self.frozen_upto {
            self.frozen_upto = new_frozen;
        }
        for p in 1..=self.frozen_upto {
            if let Some(snap) = &self.frozen_phi[p - 1] {
                if self.phi.column(p - 1) != *snap {
                    self.report.w3_violations += 1;
                }
            }
        }
    }

    /// ASI guard budget: `gamma` many guards, further capped so the
    /// `d * #guards` ASI rows fit the SDP row budget. Zero when the
    /// window is so small that even one guard's rows overflow.
    fn asi_guard_budget(&self) -> usize {
        let m = self.window.len().max(1) as f64;
        let d = self.inst.d() as f64;
        let by_rows = (sdp::ASI_ROW_COEFF * self.params.gamma_asi * m / d).floor();
        by_rows.min(self.params.gamma_asi.floor()).max(0.0) as usize
    }

    /// Total blocking-guard budget: `0.1 |W| - 1`, one dimension being
    /// reserved for the fractional coloring itself.
    fn blocking_budget(&self) -> usize {
        let m = self.window.len() as f64;
        let b = (sdp::BLOCKING_DIM_COEFF * m).floor() - 1.0;
        if b < 0.0 {
            0
        } else {
            b as usize
        }
    }

    /// Activates and merges the trees for the current window, enforcing
    /// guard budgets through forced merges, and returns the ASI guard
    /// set (with a flag when the rows cannot be emitted at all) plus
    /// per-row blocking guard prefixes.
    fn update_trees(&mut self) -> (GuardSet, bool, Vec<Vec<usize>>) {
        let step = self.steps;
        let alive = self.alive.clone();
        let view = WindowView {
            span_lo: self.span_lo,
            span_hi: self.span_hi,
            alive: &alive,
        };

        self.asi_tree.activate(&view, step);
        self.asi_tree.merge_pass(&alive, step);
        let budget = self.asi_guard_budget();
        let mut asi_suppressed = false;
        if budget == 0 {
            // a window this small cannot budget even one guard's rows
            asi_suppressed = true;
            if !self.asi_suppress_logged {
                self.report.fallback_events.push(FallbackEvent {
                    step,
                    kind: FallbackKind::AsiRowsSuppressed,
                    detail: format!("window of {} cannot budget d ASI rows", self.window.len()),
                });
                self.asi_suppress_logged = true;
            }
        }
        let guards = loop {
            match self
                .asi_tree
                .guards(&view, true, if asi_suppressed { usize::MAX } else { budget })
            {
                Ok(g) => break g,
                Err(e) => {
                    if let Some(absorbed) = self.asi_tree.force_merge_pair(&alive, step) {
                        self.report.fallback_events.push(FallbackEvent {
                            step,
                            kind: FallbackKind::AsiGuardBudget,
                            detail: format!(
                                "{e}; forced merge of [{}, {})",
                                absorbed.lo, absorbed.hi
                            ),
                        });
                        self.asi_tree.merge_pass(&alive, step);
                    } else {
                        // single leaf left; accept whatever remains
                        break self
                            .asi_tree
                            .guards(&view, true, usize::MAX)
                            .expect("unbounded budget");
                    }
                }
            }
        };

        let mut blocking: Vec<Vec<usize>> = Vec::with_capacity(self.inf_trees.len());
        if !self.inf_trees.is_empty() {
            for tree in &mut self.inf_trees {
                tree.activate(&view, step);
                tree.merge_pass(&alive, step);
            }
            for tree in &self.inf_trees {
                let g = tree
                    .guards(&view, false, usize::MAX)
                    .expect("unbounded budget");
                blocking.push(g.as_slice().to_vec());
            }
            let budget = self.blocking_budget();
            let mut total: usize = blocking.iter().map(Vec::len).sum();
            while total > budget {
                // merge within the row holding the most guards
                let row = blocking
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, g)| g.len())
                    .map(|(i, _)| i)
                    .unwrap();
                if blocking[row].len() > 1
                    && self.inf_trees[row].force_merge_pair(&alive, step).is_some()
                {
                    self.report.fallback_events.push(FallbackEvent {
                        step,
                        kind: FallbackKind::BlockingGuardBudget,
                        detail: format!("row {row} forced merge"),
                    });
                    self.inf_trees[row].merge_pass(&alive, step);
                    let g = self.inf_trees[row]
                        .guards(&view, false, usize::MAX)
                        .expect("unbounded budget");
                    blocking[row] = g.as_slice().to_vec();
                } else if blocking[row].pop().is_some() {
                    // single-interval rows cannot merge further: drop the
                    // largest-prefix guard from the fullest row
                    self.report.fallback_events.push(FallbackEvent {
                        step,
                        kind: FallbackKind::BlockingGuardDropped,
                        detail: format!("row {row} guard dropped"),
                    });
                } else {
                    break;
                }
                total = blocking.iter().map(Vec::len).sum();
            }
        }

        self.report.tree_violations += self.validate_trees(&alive);

        (guards, asi_suppressed, blocking)
    }

    /// Counts structural violations (no-small-left-leaf, contiguous
    /// tiling, window leaf-count bound) across all trees.
    fn validate_trees(&self, alive: &[bool]) -> u64 {
        let mut violations = 0u64;
        let n = self.inst.n();
        let log = (n.max(2) as f64).log2();
        let window_cols = self.window.len() as f64;
        let trees = std::iter::once(&self.asi_tree).chain(self.inf_trees.iter());
        for tree in trees {
            let leaves = tree.active_leaves();
            for pair in leaves.windows(2) {
                if pair[0].iv.hi != pair[1].iv.lo {
                    violations += 1;
                }
            }
            for (idx, leaf) in leaves.iter().enumerate() {
                if idx + 1 == leaves.len() {
                    continue;
                }
                // only left children are required to be non-small
                if leaf.node > 1 && leaf.node % 2 == 0 {
                    let size = tree.measure().evaluate(leaf.iv, alive, self.inst.matrix());
                    if size < tree.base_size() / 2.0 {
                        violations += 1;
                    }
                }
            }
            let in_window = leaves
                .iter()
                .filter(|l| l.iv.lo < self.span_hi && l.iv.hi > self.span_lo)
                .count() as f64;
            let cap = 2.0 * window_cols * log / tree.base_size() + 1.0;
            if in_window > cap {
                violations += 1;
            }
        }
        violations
    }

    /// Builds the SDP for the current step: window rows (unless dropped
    /// at end-of-input), one masked ASI row per guard and matrix row,
    /// and the blocking vectors (per-row guarded prefixes plus the
    /// fractional coloring itself).
    fn assemble_constraints(
        &mut self,
        guards: &GuardSet,
        asi_suppressed: bool,
        blocking_guards: &[Vec<usize>],
    ) -> Result<SdpProblem, SdpError> {
        let m = self.window.len();
        let d = self.inst.d();
        let a = self.inst.matrix();
        let window = &self.window;

        let window_rows: Vec<DVector<f64>> = if self.rows_enforced {
            (0..d)
                .map(|i| DVector::from_fn(m, |k, _| a[(i, window[k])]))
                .collect()
        } else {
            Vec::new()
        };

        let mut asi_rows = Vec::new();
        if !self.params.config.si_only && !asi_suppressed {
            for &p in guards.as_slice() {
                let masked_len = window.partition_point(|&j| j < p);
                for i in 0..d {
                    let row = DVector::from_fn(m, |k, _| {
                        if k < masked_len {
                            a[(i, window[k])]
                        } else {
                            0.0
                        }
                    });
                    asi_rows.push(AsiRow { masked_len, row });
                }
            }
        }

        let mut blocking = Vec::new();
        for (i, prefixes) in blocking_guards.iter().enumerate() {
            for &p in prefixes {
                let masked_len = window.partition_point(|&j| j < p);
                if masked_len == 0 {
                    continue;
                }
                let row = DVector::from_fn(m, |k, _| {
                    if k < masked_len {
                        a[(i, window[k])]
                    } else {
                        0.0
                    }
                });
                blocking.push(row);
            }
        }
        // the coloring itself is always blocked so that u stays
        // orthogonal to x and the norm clock holds; windows below ten
        // columns cannot budget the extra dimension and lose the clock
        self.x_blocked = (sdp::BLOCKING_DIM_COEFF * m as f64) >= 1.0;
        if self.x_blocked {
            blocking.push(DVector::from_fn(m, |k, _| self.x[window[k]]));
        } else if !self.x_drop_logged {
            self.report.fallback_events.push(FallbackEvent {
                step: self.steps,
                kind: FallbackKind::XBlockDropped,
                detail: format!("window of {m} cannot budget the coloring block"),
            });
            self.x_drop_logged = true;
        }

        SdpProblem::build(m, window_rows, blocking, asi_rows, self.params.gamma_asi)
    }

    fn warm_start(&self) -> Option<DMatrix<f64>> {
        let (old_cols, old_u) = self.warm.as_ref()?;
        let m = self.window.len();
        let mut pos = vec![usize::MAX; self.inst.n()];
        for (k, &j) in old_cols.iter().enumerate() {
            pos[j] = k;
        }
        let map: Vec<usize> = self.window.iter().map(|&j| pos[j]).collect();
        let mut init = DMatrix::identity(m, m);
        for k in 0..m {
            if map[k] == usize::MAX {
                continue;
            }
            for l in 0..m {
                if map[l] != usize::MAX {
                    init[(k, l)] = old_u[(map[k], map[l])];
                }
            }
        }
        Some(init)
    }

    /// One walk step: window advance, tree maintenance, SDP solve and
    /// check, sampling, coloring update with clipping, incremental
    /// prefix-discrepancy update, and the abort check.
    pub fn step(&mut self) -> Result<StepOutcome, WalkError> {
        self.advance_window();
        if self.window.is_empty() {
            return Ok(StepOutcome::Stepped);
        }
        let (guards, asi_suppressed, blocking_guards) = self.update_trees();
        let problem = self.assemble_constraints(&guards, asi_suppressed, &blocking_guards)?;
        let tol = self.params.config.resolve_tol;
        let max_iter = self.params.config.max_sdp_iter;

        let solution = match sdp::solve_feasibility(&problem, tol, max_iter, self.warm_start()) {
            Ok(s) => s,
            Err(SdpError::MaxIterExceeded { .. }) | Err(SdpError::NumericalBreakdown) => {
                // retry once from a randomized PSD start
                self.report.sdp_retries += 1;
                let m = problem.m();
                let r = DMatrix::from_fn(m, m, |_, _| self.rng.random_range(-1.0..1.0));
                let init = &r * r.transpose() / m as f64;
                match sdp::solve_feasibility(&problem, tol, max_iter, Some(init)) {
                    Ok(s) => s,
                    Err(source) => {
                        if let (Some(dir), SdpError::MaxIterExceeded { best }) =
                            (&self.params.config.sdp_debug_dir, &source)
                        {
                            let dump = sdp::SdpDebugDump::new(
                                &problem,
                                &best.u,
                                &best.residual_report,
                            );
                            let path = dir.join(format!("sdp_fail_step_{}.json", self.steps));
                            if let Ok(text) = serde_json::to_string_pretty(&dump) {
                                let _ = std::fs::write(path, text);
                            }
                        }
                        return Err(WalkError::SdpFailure {
                            step: self.steps,
                            source,
                        })
                    }
                }
            }
            Err(e) => return Err(e.into()),
        };

        let mut u = match &solution.factors {
            Some((q, lambda)) => sdp::sample_from_factors(q, lambda, &mut self.rng)?,
            None => sdp::sample_update(&solution.u, &mut self.rng)?,
        };

        // Re-impose the equality constraints on the sample: the solver's
        // U annihilates the blocked subspace only to residual precision,
        // and the Rademacher signs do not cancel those residuals. One
        // exact projection keeps the window update and the norm clock at
        // machine precision.
        for b in problem.joint_basis() {
            let c = b.dot(&u);
            u.axpy(-c, b, 1.0);
        }
        let un = u.norm();
        if un > 0.0 {
            u /= un;
        }

        // constraint transfer onto the sample: window rows must see a
        // near-zero update
        let m = problem.m();
        let trace = solution.residual_report.trace.max(f64::MIN_POSITIVE);
        let transfer_limit = (tol * m as f64 / trace).sqrt();
        for row in problem.window_rows() {
            let ip = row.dot(&u).abs();
            if ip > transfer_limit {
                self.report.transfer_violations += 1;
            }
            if ip > 1e-5 {
                self.report.neutrality_violations += 1;
            }
        }

        // coloring update with clipping
        let sq = self.params.config.dt.sqrt();
        let mut clips = 0u64;
        for (k, &j) in self.window.iter().enumerate() {
            self.x[j] += u[k] * sq;
            if self.x[j] > 1.0 {
                self.x[j] = 1.0;
                clips += 1;
            } else if self.x[j] < -1.0 {
                self.x[j] = -1.0;
                clips += 1;
            }
        }
        self.report.clip_total += clips;

        // incremental prefix update: one cumulative sweep per row
        let n = self.inst.n();
        let d = self.inst.d();
        let a = self.inst.matrix();
        for i in 0..d {
            let mut acc = 0.0;
            let mut k = 0usize;
            for p in (self.span_lo + 1)..=n {
                while k < self.window.len() && self.window[k] < p {
                    acc += a[(i, self.window[k])] * u[k] * sq;
                    k += 1;
                }
                self.phi[(i, p - 1)] += acc;
            }
        }

        // norm clock (W1), scoped to the pre-clipping phase with the
        // coloring block still in force
        self.steps += 1;
        let t = self.steps as f64 * self.params.config.dt;
        if self.report.clip_total == 0 && self.x_blocked {
            let drift = (self.x.norm_squared() - t).abs();
            if drift > 1e-3 * t {
                self.report.w1_violations += 1;
            }
        }

        // discrepancy scan and abort check
        let (max_l2, max_linf, argmax_l2, argmax_linf) = self.scan_discrepancy();
        self.report.trajectory_max_l2 = self.report.trajectory_max_l2.max(max_l2);
        self.report.trajectory_max_linf = self.report.trajectory_max_linf.max(max_linf);

        let mut outcome = StepOutcome::Stepped;
        let halt = self.params.config.abort_policy == AbortPolicy::Halt;
        if let Some(kind) = abort_check_values(max_l2, max_linf, &self.params) {
            self.report.abort_total += 1;
            if self.report.abort_events.len() < 32 {
                let (prefix, norm) = match kind {
                    AbortKind::L2 => (argmax_l2, max_l2),
                    AbortKind::Linf => (argmax_linf, max_linf),
                };
                self.report.abort_events.push(AbortEvent {
                    step: self.steps - 1,
                    prefix,
                    norm,
                    kind,
                    halted: halt,
                });
            }
            if halt {
                self.halted = true;
                self.report.halted = true;
                outcome = StepOutcome::AbortedHalt;
            }
        }

        self.report.step_records.push(StepRecord {
            step: self.steps - 1,
            t,
            window_lo: self.span_lo,
            window_hi: self.span_hi,
            n_guards: guards.len(),
            max_l2_prefix_disc: max_l2,
            max_linf_prefix_disc: max_linf,
            sdp_psd_residual: solution.residual_report.psd_min_eig,
            sdp_window_residual: solution.residual_report.window_residual,
            sdp_trace: solution.residual_report.trace,
            clip_events: clips,
            window_cols: self.window.len(),
            sdp_cycles: solution.solve_iterations,
            sdp_si_min_eig: solution.residual_report.si_min_eig,
            sdp_asi_min_eig: solution.residual_report.asi_min_eig,
            blocking_dim: problem.blocking_dim(),
            asi_row_count: problem.asi_row_count(),
            blocking_guard_total: blocking_guards.iter().map(Vec::len).sum(),
        });
        self.report.windows.push(StepWindow {
            step: self.steps - 1,
            span_lo: self.span_lo,
            span_hi: self.span_hi,
        });
        if let Some(h) = &mut self.history {
            h.updates.push((self.window.clone(), u));
            h.guard_sets.push(guards.as_slice().to_vec());
        }
        self.warm = Some((self.window.clone(), solution.u));
        Ok(outcome)
    }

    fn scan_discrepancy(&self) -> (f64, f64, usize, usize) {
        let n = self.inst.n();
        let d = self.inst.d();
        let mut max_l2 = 0.0f64;
        let mut max_linf = 0.0f64;
        let mut argmax_l2 = 0usize;
        let mut argmax_linf = 0usize;
        for p in 0..n {
            let mut sq = 0.0;
            for i in 0..d {
                let v = self.phi[(i, p)];
                sq += v * v;
                if v.abs() > max_linf {
                    max_linf = v.abs();
                    argmax_linf = p + 1;
                }
            }
            if sq > max_l2 {
                max_l2 = sq;
                argmax_l2 = p + 1;
            }
        }
        (max_l2.sqrt(), max_linf, argmax_l2, argmax_linf)
    }

    /// Rounds every column to its sign (ties toward `+1`). Errors when
    /// more than 1% of columns are still alive.
    pub fn round_final(&self) -> Result<RoundOutcome, WalkError> {
        let alive = self.alive_count();
        let frac = alive as f64 / self.inst.n() as f64;
        if frac > 0.01 {
            return Err(WalkError::NotConverged {
                alive,
                frac: frac * 100.0,
            });
        }
        Ok(self.force_round())
    }

    fn force_round(&self) -> RoundOutcome {
        let n = self.inst.n();
        let d = self.inst.d();
        let a = self.inst.matrix();
        let coloring: Vec<i8> = (0..n)
            .map(|j| if self.x[j] >= 0.0 { 1 } else { -1 })
            .collect();

        let mut delta_bound = 0.0;
        for j in 0..n {
            let gap = 1.0 - self.x[j].abs();
            let mut amax = 0.0f64;
            for i in 0..d {
                amax = amax.max(a[(i, j)].abs());
            }
            delta_bound += gap * amax;
        }

        let mut delta_max_sq = 0.0f64;
        let mut delta: DVector<f64> = DVector::zeros(d);
        for j in 0..n {
            let shift = coloring[j] as f64 - self.x[j];
            for i in 0..d {
                delta[i] += a[(i, j)] * shift;
            }
            let nsq = delta.norm_squared();
            if nsq > delta_max_sq {
                delta_max_sq = nsq;
            }
        }

        RoundOutcome {
            coloring,
            delta_max_l2: delta_max_sq.sqrt(),
            delta_bound,
            alive_count: self.alive_count(),
        }
    }

    /// Finishes the run: rounds the coloring, computes the exact prefix
    /// discrepancies of the rounded coloring, and seals the report.
    pub fn finalize(mut self, started: Instant) -> RunReport {
        // register deaths from the very last update
        let theta = self.params.theta_dead;
        for j in 0..self.inst.n() {
            if self.alive[j] && self.x[j].abs() > 1.0 - theta {
                self.alive[j] = false;
                self.death_step[j] = self.steps as u32;
            }
        }
        let round = match self.round_final() {
            Ok(r) => r,
            Err(_) => {
                self.report.not_converged = true;
                self.force_round()
            }
        };
        self.report.alive_at_end = round.alive_count;
        self.report.rounding_delta_max_l2 = round.delta_max_l2;
        self.report.rounding_delta_bound = round.delta_bound;

        let (l2, linf) = evaluate_coloring(&self.inst, &round.coloring);
        self.report.final_max_l2_prefix_disc = l2;
        self.report.final_max_linf_prefix_disc = linf;
        self.report.final_coloring = round.coloring;
        self.report.steps = self.steps;
        self.report.death_step = self.death_step.clone();
        self.report.asi_tree_events = self.asi_tree.events().to_vec();
        self.report.blocking_tree_events = self
            .inf_trees
            .iter()
            .map(|t| t.events().to_vec())
            .collect();
        let leaves = |t: &MergeTree| -> Vec<(u32, Interval)> {
            t.active_leaves().iter().map(|l| (l.node, l.iv)).collect()
        };
        self.report.asi_final_leaves = leaves(&self.asi_tree);
        self.report.blocking_final_leaves = self.inf_trees.iter().map(leaves).collect();
        self.report.wall_time_secs = started.elapsed().as_secs_f64();
        self.report
    }

    #[cfg(test)]
    pub(crate) fn inject_phi(&mut self, i: usize, p: usize, value: f64) {
        self.phi[(i, p - 1)] = value;
    }

    #[cfg(test)]
    pub(crate) fn scan_for_tests(&self) -> (f64, f64, usize, usize) {
        self.scan_discrepancy()
    }
}

/// Abort predicate on the current maxima: an `l2` violation when any
/// prefix exceeds `tau`, an `linf` violation (l2 mode only) when any
/// entry exceeds `lambda`.
pub fn abort_check_values(max_l2: f64, max_linf: f64, params: &ModeParams) -> Option<AbortKind> {
    if max_l2 > params.tau {
        return Some(AbortKind::L2);
    }
    if let Some(lambda) = params.lambda {
        if max_linf > lambda {
            return Some(AbortKind::Linf);
        }
    }
    None
}

/// Exact prefix discrepancies of a full coloring: `(max l2, max linf)`.
pub fn evaluate_coloring(inst: &VectorInstance, coloring: &[i8]) -> (f64, f64) {
    let n = inst.n();
    let d = inst.d();
    let a = inst.matrix();
    let mut sum = DVector::zeros(d);
    let mut max_l2 = 0.0f64;
    let mut max_linf = 0.0f64;
    for j in 0..n {
        let c = coloring[j] as f64;
        for i in 0..d {
            sum[i] += c * a[(i, j)];
        }
        max_l2 = max_l2.max(sum.norm());
        max_linf = max_linf.max(sum.amax());
    }
    (max_l2, max_linf)
}

/// Runs a walk to completion (all columns dead or step budget reached)
/// and rounds. With the halt policy, stops at the first violation.
pub fn run(inst: &VectorInstance, params: ModeParams, seed: u64) -> Result<RunReport, WalkError> {
    let started = Instant::now();
    let mut state = WalkState::init(inst, params, seed)?;
    loop {
        if state.alive_count() == 0 || state.steps >= state.max_steps {
            break;
        }
        match state.step()? {
            StepOutcome::AbortedHalt => break,
            StepOutcome::Stepped => {}
        }
    }
    Ok(state.finalize(started))
}

/// Decomposition audit for one prefix: per step, the discrepancy change
/// splits into the guard part (columns up to the prefix's ASI guard)
/// and the error part (columns strictly between guard and prefix); the
/// two must reconstruct the full change, and the union of error columns
/// must match the replayed error set.
#[derive(Debug)]
pub struct PrefixAudit {
    pub prefix: usize,
    pub guard_trace: Vec<Option<usize>>,
    pub phi_asi: DVector<f64>,
    pub phi_err: DVector<f64>,
    pub max_recon_error: f64,
    pub error_cols: BTreeSet<usize>,
    pub replayed_error_cols: BTreeSet<usize>,
}

pub fn audit_decomposition(
    inst: &VectorInstance,
    report: &RunReport,
    history: &RunHistory,
    p: usize,
) -> Result<PrefixAudit, WalkError> {
    if history.updates.len() != report.windows.len() {
        return Err(WalkError::HistoryUnavailable);
    }
    let d = inst.d();
    let a = inst.matrix();
    let sq = report.dt.sqrt();
    let mut phi_asi = DVector::zeros(d);
    let mut phi_err = DVector::zeros(d);
    let mut guard_trace = Vec::with_capacity(history.updates.len());
    let mut error_cols = BTreeSet::new();
    let mut max_recon = 0.0f64;

    for (t, (window, u)) in history.updates.iter().enumerate() {
        let guards = &history.guard_sets[t];
        let guard = match guards.binary_search(&p) {
            Ok(_) => Some(p),
            Err(0) => None,
            Err(i) => Some(guards[i - 1]),
        };
        guard_trace.push(guard);
        let g = guard.unwrap_or(0);
        for i in 0..d {
            let mut full = 0.0;
            let mut asi = 0.0;
            let mut err = 0.0;
            for (k, &j) in window.iter().enumerate() {
                if j >= p {
                    break;
                }
                let c = a[(i, j)] * u[k] * sq;
                full += c;
                if j < g {
                    asi += c;
                } else {
                    err += c;
                }
            }
            phi_asi[i] += asi;
            phi_err[i] += err;
            max_recon = max_recon.max((asi + err - full).abs());
        }
        if guard != Some(p) {
            for &j in window.iter() {
                if j >= p {
                    break;
                }
                if j >= g {
                    error_cols.insert(j);
                }
            }
        }
    }

    let replayed = accumulated_error_set(
        &report.asi_tree_events,
        &report.windows,
        &report.death_step,
        p,
    );
    Ok(PrefixAudit {
        prefix: p,
        guard_trace,
        phi_asi,
        phi_err,
        max_recon_error: max_recon,
        error_cols,
        replayed_error_cols: replayed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::generate_random;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn problem_asi_row(problem: &SdpProblem, idx: usize) -> DVector<f64> {
        problem.asi_rows_for_tests()[idx].row.clone()
    }

    fn l2_params(n: usize, d: usize) -> ModeParams {
        ModeParams::derive(Mode::L2ToL2, n, d, WalkConfig::default())
    }

    fn linf_params(n: usize, d: usize) -> ModeParams {
        ModeParams::derive(Mode::LinfToL2, n, d, WalkConfig::default())
    }

    #[test]
    fn param_formulas() {
        let p = l2_params(128, 8);
        assert_abs_diff_eq!(
            p.gamma_asi,
            100.0 * 8f64.sqrt() / 7f64.sqrt(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(p.s, 20.0 * 8.0 * 7.0 / p.gamma_asi, epsilon = 1e-9);
        assert!(!p.s_clamped);
        assert_eq!(p.s0, Some(140.0));
        assert!(p.lambda.is_some());

        let p = linf_params(64, 4);
        assert_abs_diff_eq!(p.gamma_asi, 100.0 * 2.0 * 6.0, epsilon = 1e-9);
        assert!(p.s_clamped);
        assert_eq!(p.s, 2.0);
        assert!(p.lambda.is_none());
    }

    #[test]
    fn init_rejects_mode_mismatch() {
        let inst = generate_random(16, 2, NormMode::L2Unit, 1);
        match WalkState::init(&inst, linf_params(16, 2), 1) {
            Err(WalkError::ModeMismatch { .. }) => {}
            Err(other) => panic!("expected ModeMismatch, got {other:?}"),
            Ok(_) => panic!("expected ModeMismatch, got Ok"),
        }
    }

    #[test]
    fn init_state_is_zero() {
        let inst = generate_random(32, 2, NormMode::L2Unit, 1);
        let st = WalkState::init(&inst, l2_params(32, 2), 7).unwrap();
        assert_eq!(st.x().norm(), 0.0);
        assert_eq!(st.phi().norm(), 0.0);
        assert_eq!(st.window().len(), 20); // min(10 d, n)
        assert!(st.rows_enforced());
    }

    #[test]
    fn small_instance_window_covers_all() {
        let inst = generate_random(8, 2, NormMode::L2Unit, 1);
        let st = WalkState::init(&inst, l2_params(8, 2), 7).unwrap();
        assert_eq!(st.window().len(), 8);
        assert!(st.rows_enforced(), "8 >= 2 d: rows still enforced");

        // below 2 d alive columns the rows are dropped
        let inst = generate_random(3, 2, NormMode::L2Unit, 1);
        let st = WalkState::init(&inst, l2_params(3, 2), 7).unwrap();
        assert!(!st.rows_enforced());
    }

    #[test]
    fn init_is_deterministic() {
        let inst = generate_random(24, 2, NormMode::L2Unit, 3);
        let mut a = WalkState::init(&inst, l2_params(24, 2), 9).unwrap();
        let mut b = WalkState::init(&inst, l2_params(24, 2), 9).unwrap();
        for _ in 0..5 {
            a.step().unwrap();
            b.step().unwrap();
        }
        assert_eq!(a.x(), b.x());
    }

    #[test]
    fn norm_clock_advances_with_dt() {
        let inst = generate_random(40, 2, NormMode::L2Unit, 11);
        let mut st = WalkState::init(&inst, l2_params(40, 2), 5).unwrap();
        for k in 1..=20u64 {
            st.step().unwrap();
            if st.report().clip_total > 0 {
                break;
            }
            let t = k as f64 * st.params.config.dt;
            let drift = (st.x().norm_squared() - t).abs();
            assert!(
                drift <= 1e-9 * t.max(1e-12),
                "step {k}: ||x||^2 = {} vs t = {t}",
                st.x().norm_squared()
            );
        }
        assert_eq!(st.report().w1_violations, 0);
    }

    #[test]
    fn window_neutrality_per_step() {
        let inst = generate_random(60, 3, NormMode::L2Unit, 2);
        let mut st = WalkState::init(&inst, l2_params(60, 3), 4).unwrap();
        for _ in 0..25 {
            st.step().unwrap();
        }
        assert_eq!(st.report().neutrality_violations, 0);
        assert_eq!(st.report().transfer_violations, 0);
    }

    #[test]
    fn frozen_prefixes_stay_bitwise_constant() {
        let inst = generate_random(30, 1, NormMode::L2Unit, 8);
        let params = ModeParams::derive(
            Mode::L2ToL2,
            30,
            1,
            WalkConfig {
                dt: 0.05,
                ..WalkConfig::default()
            },
        );
        let mut st = WalkState::init(&inst, params, 3).unwrap();
        let budget = st.max_steps();
        for _ in 0..budget {
            if st.alive_count() == 0 {
                break;
            }
            st.step().unwrap();
        }
        assert_eq!(st.report().w3_violations, 0, "frozen prefixes moved");
        assert_eq!(st.report().w2_violations, 0, "entry drift violations");
    }

    #[test]
    fn abort_check_examples() {
        let params = l2_params(64, 4);
        assert!(abort_check_values(0.0, 0.0, &params).is_none());
        assert_eq!(
            abort_check_values(params.tau + 1.0, 0.0, &params),
            Some(AbortKind::L2)
        );
        let lambda = params.lambda.unwrap();
        assert_eq!(
            abort_check_values(params.tau / 2.0, lambda + 0.5, &params),
            Some(AbortKind::Linf)
        );
        // linf mode has no lambda check
        let lp = linf_params(64, 4);
        assert!(abort_check_values(1.0, 1e9, &lp).is_none());
    }

    #[test]
    fn synthetic_phi_is_seen_by_the_scan() {
        let inst = generate_random(20, 2, NormMode::L2Unit, 5);
        let mut st = WalkState::init(&inst, l2_params(20, 2), 6).unwrap();
        st.inject_phi(0, 5, st.params.tau + 1.0);
        let (l2, _, argmax, _) = st.scan_for_tests();
        assert!(l2 > st.params.tau);
        assert_eq!(argmax, 5);
    }

    #[test]
    fn tiny_run_reaches_good_coloring() {
        // two antipodal unit columns: optimum max prefix discrepancy is 1
        let a = DMatrix::from_column_slice(1, 2, &[1.0, -1.0]);
        let inst = VectorInstance::new(a, NormMode::L2Unit, false).unwrap();
        let params = ModeParams::derive(Mode::L2ToL2, 2, 1, WalkConfig::default());
        let report = run(&inst, params, 42).unwrap();
        assert!(report.final_coloring.iter().all(|&c| c == 1 || c == -1));
        // theta_dead here is 0.25, so rounding slack is up to 0.5
        assert!(
            report.final_max_l2_prefix_disc <= 1.5,
            "disc = {}",
            report.final_max_l2_prefix_disc
        );
    }

    #[test]
    fn run_is_deterministic() {
        let inst = generate_random(24, 2, NormMode::L2Unit, 3);
        let r1 = run(&inst, l2_params(24, 2), 9).unwrap();
        let r2 = run(&inst, l2_params(24, 2), 9).unwrap();
        assert_eq!(r1.final_coloring, r2.final_coloring);
        assert_eq!(r1.steps, r2.steps);
        let s1 = serde_json::to_string(&r1.step_records).unwrap();
        let s2 = serde_json::to_string(&r2.step_records).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn full_run_kills_all_columns() {
        let inst = generate_random(30, 2, NormMode::L2Unit, 13);
        let report = run(&inst, l2_params(30, 2), 21).unwrap();
        assert_eq!(report.alive_at_end, 0);
        assert!(!report.not_converged);
        assert!(report.final_coloring.iter().all(|&c| c == 1 || c == -1));
    }

    #[test]
    fn audit_reconstructs_decomposition() {
        let inst = generate_random(40, 2, NormMode::L2Unit, 17);
        let params = ModeParams::derive(
            Mode::L2ToL2,
            40,
            2,
            WalkConfig {
                record_history: true,
                ..WalkConfig::default()
            },
        );
        let started = Instant::now();
        let mut st = WalkState::init(&inst, params, 23).unwrap();
        for _ in 0..60 {
            if st.alive_count() == 0 {
                break;
            }
            st.step().unwrap();
        }
        let phi_snapshot = st.phi().clone();
        let history = st.history().cloned().unwrap();
        let report = st.finalize(started);

        for p in [1, 7, 15, 23, 31, 40] {
            let audit = audit_decomposition(&inst, &report, &history, p).unwrap();
            assert!(
                audit.max_recon_error <= 1e-9,
                "prefix {p}: recon error {}",
                audit.max_recon_error
            );
            assert_eq!(
                audit.error_cols, audit.replayed_error_cols,
                "prefix {p} error sets diverge"
            );
            // decomposition totals match the tracked phi column
            for i in 0..inst.d() {
                let total = audit.phi_asi[i] + audit.phi_err[i];
                assert_abs_diff_eq!(total, phi_snapshot[(i, p - 1)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rounding_ties_go_positive() {
        let inst = generate_random(10, 1, NormMode::L2Unit, 2);
        let st = WalkState::init(&inst, l2_params(10, 1), 1).unwrap();
        let round = st.force_round();
        assert!(round.coloring.iter().all(|&c| c == 1), "x = 0 rounds to +1");
    }

    #[test]
    fn si_and_asi_variance_transfer() {
        // Freeze a live state, solve its SDP once, and resample the
        // update 1e4 times. Spectral independence must cap the variance
        // of any window test vector at 10x the diagonal surrogate, and
        // affine spectral independence must cap every guarded prefix's
        // directional variance at gamma times its diagonal surrogate
        // (5% sampling slack on both).
        use rand::SeedableRng;
        let inst = generate_random(40, 3, NormMode::L2Unit, 29);
        let mut st = WalkState::init(&inst, l2_params(40, 3), 31).unwrap();
        for _ in 0..12 {
            st.step().unwrap();
        }
        st.advance_window();
        let (guards, suppressed, blocking) = st.update_trees();
        assert!(!suppressed);
        let problem = st
            .assemble_constraints(&guards, suppressed, &blocking)
            .unwrap();
        let solution =
            sdp::solve_feasibility(&problem, 1e-6, 5000, st.warm_start()).unwrap();

        let draws = 10_000usize;
        let m = problem.m();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let samples: Vec<DVector<f64>> = (0..draws)
            .map(|_| sdp::sample_update(&solution.u, &mut rng).unwrap())
            .collect();

        let mut coord_var = vec![0.0f64; m];
        for s in &samples {
            for k in 0..m {
                coord_var[k] += s[k] * s[k];
            }
        }
        for v in coord_var.iter_mut() {
            *v /= draws as f64;
        }

        // W5: random unit test vectors on the window
        let mut trng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            use rand::Rng;
            let a = DVector::from_fn(m, |_, _| trng.random_range(-1.0..1.0f64));
            let mut var = 0.0;
            for s in &samples {
                let ip = a.dot(s);
                var += ip * ip;
            }
            var /= draws as f64;
            let surrogate: f64 = (0..m).map(|k| a[k] * a[k] * coord_var[k]).sum();
            assert!(
                var <= 10.0 * surrogate * 1.05,
                "SI transfer: var {var} > 10 x {surrogate} x 1.05"
            );
        }

        // W6: per guarded prefix, directional variance of the masked-row
        // image against gamma times its diagonal
        let d = inst.d();
        let gamma = st.params.gamma_asi;
        for (g_idx, _) in guards.as_slice().iter().enumerate() {
            // images of this guard's d masked rows under each sample
            let rows: Vec<usize> = (g_idx * d..(g_idx + 1) * d).collect();
            let mut images: Vec<DVector<f64>> = Vec::with_capacity(draws);
            for s in &samples {
                let img = DVector::from_fn(d, |i, _| {
                    problem_asi_row(&problem, rows[i]).dot(s)
                });
                images.push(img);
            }
            let mut diag_var = vec![0.0f64; d];
            for img in &images {
                for i in 0..d {
                    diag_var[i] += img[i] * img[i];
                }
            }
            for v in diag_var.iter_mut() {
                *v /= draws as f64;
            }
            for t in 0..3 {
                use rand::Rng;
                let mut theta = DVector::from_fn(d, |_, _| trng.random_range(-1.0..1.0f64));
                let norm = theta.norm();
                if norm == 0.0 {
                    continue;
                }
                theta /= norm;
                let _ = t;
                let mut var = 0.0;
                for img in &images {
                    let ip = theta.dot(img);
                    var += ip * ip;
                }
                var /= draws as f64;
                let surrogate: f64 =
                    (0..d).map(|i| theta[i] * theta[i] * diag_var[i]).sum();
                assert!(
                    var <= gamma * surrogate * 1.05 + 1e-15,
                    "ASI transfer: var {var} > gamma {gamma} x {surrogate} x 1.05"
                );
            }
        }
    }

    #[test]
    fn not_converged_error_carries_counts() {
        let inst = generate_random(10, 1, NormMode::L2Unit, 2);
        let st = WalkState::init(&inst, l2_params(10, 1), 1).unwrap();
        match st.round_final() {
            Err(WalkError::NotConverged { alive: 10, .. }) => {}
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }
}
