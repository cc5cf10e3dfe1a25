//! Global interval trees: fixed base intervals over the column range,
//! activation as the sliding window advances, and merge rules that keep
//! small intervals from accumulating. One tree with the alive-count
//! measure maintains the ASI-guarded prefixes; `d` trees with per-row
//! squared-mass measures maintain the blocking-guarded prefixes.
//!
//! The tree is a complete binary tree over the base intervals (padded to
//! a power of two with empty leaves). Base intervals activate once they
//! are fully inside the covered column range and still contain an alive
//! window column; intervals only merge, never split. Every structural
//! change is appended to an event log from which the active partition
//! and per-prefix error sets can be replayed exactly.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open column interval `[lo, hi)` (0-based columns). The right
/// endpoint doubles as a prefix length: prefix `hi` covers columns
/// `0..hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn contains(&self, col: usize) -> bool {
        self.lo <= col && col < self.hi
    }
}

/// Size measure for tree leaves: alive-column count, or the squared
/// entries of one matrix row summed over alive columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeMeasure {
    AliveCount,
    L2SqMass { row: usize },
}

impl SizeMeasure {
    /// Measure of `interval` under the given alive mask.
    pub fn evaluate(&self, interval: Interval, alive: &[bool], a: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for j in interval.lo..interval.hi {
            if alive[j] {
                total += match self {
                    SizeMeasure::AliveCount => 1.0,
                    SizeMeasure::L2SqMass { row } => a[(*row, j)] * a[(*row, j)],
                };
            }
        }
        total
    }
}

/// The column range the sliding window currently covers, plus the alive
/// mask. `span_lo` is the first alive column; `span_hi` is one past the
/// last window column, i.e. `max{W_t}` as a prefix length.
#[derive(Debug, Clone, Copy)]
pub struct WindowView<'a> {
    pub span_lo: usize,
    pub span_hi: usize,
    pub alive: &'a [bool],
}

/// `span_lo`/`span_hi` of one executed step, for post-run replay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepWindow {
    pub step: u64,
    pub span_lo: usize,
    pub span_hi: usize,
}

/// Append-only structural log. `Absorb` is a merge: the absorbed
/// interval's columns join the absorbing interval (recording the alive
/// columns handed over). `Promote` re-labels an active leaf by its
/// parent node without changing the partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TreeEvent {
    Activate {
        step: u64,
        node: u32,
        iv: Interval,
    },
    Absorb {
        step: u64,
        absorbed_node: u32,
        absorbed: Interval,
        into_node: u32,
        into: Interval,
        alive_cols: Vec<u32>,
        forced: bool,
    },
    Promote {
        step: u64,
        from_node: u32,
        parent: u32,
    },
}

impl TreeEvent {
    pub fn step(&self) -> u64 {
        match self {
            TreeEvent::Activate { step, .. }
            | TreeEvent::Absorb { step, .. }
            | TreeEvent::Promote { step, .. } => *step,
        }
    }
}

#[derive(Debug, Error)]
pub enum MergeTreeError {
    #[error("guard budget exceeded: {count} guards > budget {budget}")]
    GuardBudgetExceeded { count: usize, budget: usize },
}

/// An active leaf: the tree node currently representing the interval.
/// The interval may extend left of the node's own base span after
/// absorbing earlier intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveLeaf {
    pub node: u32,
    pub iv: Interval,
}

/// Ascending guarded prefixes for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardSet {
    guards: Vec<usize>,
}

impl GuardSet {
    pub fn as_slice(&self) -> &[usize] {
        &self.guards
    }

    pub fn len(&self) -> usize {
        self.guards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guards.is_empty()
    }

    /// The maximum guarded prefix `<= p`, or `None` when no guard
    /// precedes `p` (the prefix is frozen: all of its columns are dead).
    pub fn guard_of(&self, p: usize) -> Option<usize> {
        match self.guards.binary_search(&p) {
            Ok(_) => Some(p),
            Err(0) => None,
            Err(i) => Some(self.guards[i - 1]),
        }
    }
}

/// Statistics under the tree's measure. The trailing active leaf is
/// exempt from merging and may be arbitrarily small while the window
/// frontier crosses it, so a small trailing leaf is excluded from
/// `mean_size`/`min_size`; `None` means no non-exempt leaves remain.
#[derive(Debug, Clone, Copy)]
pub struct TreeStats {
    pub active_leaf_count: usize,
    pub in_window_count: usize,
    pub mean_size: Option<f64>,
    pub min_size: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MergeTree {
    n: usize,
    base_size: f64,
    measure: SizeMeasure,
    weights: Vec<f64>,
    /// number of leaf slots, padded to a power of two
    leaf_count: usize,
    /// heap-ordered nodes 1..2*leaf_count; base interval per node
    base_ivs: Vec<Interval>,
    removed: Vec<bool>,
    activated: Vec<bool>,
    active: Vec<ActiveLeaf>,
    next_leaf: usize,
    events: Vec<TreeEvent>,
}

impl MergeTree {
    /// Partitions `[0, n)` into base intervals and builds the complete
    /// binary tree over them. No leaf is active yet.
    ///
    /// * `AliveCount`: consecutive blocks of `floor(base_size)` columns,
    ///   the last one shorter.
    /// * `L2SqMass`: greedy left-to-right blocks closed as soon as their
    ///   row mass first reaches `base_size`; a trailing lighter block is
    ///   kept, and a single heavy column closes its own block.
    pub fn init(n: usize, base_size: f64, measure: SizeMeasure, a: &DMatrix<f64>) -> Self {
        assert!(base_size > 0.0, "base size must be positive");
        assert!(n >= 1);
        let weights: Vec<f64> = (0..n)
            .map(|j| match measure {
                SizeMeasure::AliveCount => 1.0,
                SizeMeasure::L2SqMass { row } => a[(row, j)] * a[(row, j)],
            })
            .collect();

        let mut leaves: Vec<Interval> = Vec::new();
        match measure {
            SizeMeasure::AliveCount => {
                let bs = (base_size.floor() as usize).max(1);
                let mut lo = 0;
                while lo < n {
                    let hi = (lo + bs).min(n);
                    leaves.push(Interval { lo, hi });
                    lo = hi;
                }
            }
            SizeMeasure::L2SqMass { .. } => {
                let mut lo = 0;
                let mut acc = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    acc += w;
                    if acc >= base_size {
                        leaves.push(Interval { lo, hi: j + 1 });
                        lo = j + 1;
                        acc = 0.0;
                    }
                }
                if lo < n {
                    leaves.push(Interval { lo, hi: n });
                }
            }
        }

        let real = leaves.len().max(1);
        let leaf_count = real.next_power_of_two();
        leaves.resize(leaf_count, Interval { lo: n, hi: n });

        let mut base_ivs = vec![Interval { lo: 0, hi: 0 }; 2 * leaf_count];
        for (i, iv) in leaves.iter().enumerate() {
            base_ivs[leaf_count + i] = *iv;
        }
        for node in (1..leaf_count).rev() {
            let l = base_ivs[2 * node];
            let r = base_ivs[2 * node + 1];
            base_ivs[node] = Interval {
                lo: l.lo,
                hi: if r.is_empty() { l.hi } else { r.hi },
            };
        }

        Self {
            n,
            base_size,
            measure,
            weights,
            leaf_count,
            base_ivs,
            removed: vec![false; 2 * leaf_count],
            activated: vec![false; 2 * leaf_count],
            active: Vec::new(),
            next_leaf: 0,
            events: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn base_size(&self) -> f64 {
        self.base_size
    }

    pub fn measure(&self) -> SizeMeasure {
        self.measure
    }

    pub fn active_leaves(&self) -> &[ActiveLeaf] {
        &self.active
    }

    pub fn events(&self) -> &[TreeEvent] {
        &self.events
    }

    pub fn base_leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Base interval of the `i`-th leaf slot.
    pub fn base_interval(&self, i: usize) -> Interval {
        self.base_ivs[self.leaf_count + i]
    }

    fn leaf_node(&self, i: usize) -> u32 {
        (self.leaf_count + i) as u32
    }

    fn size_of(&self, iv: Interval, alive: &[bool]) -> f64 {
        let mut total = 0.0;
        for j in iv.lo..iv.hi {
            if alive[j] {
                total += self.weights[j];
            }
        }
        total
    }

    fn small(&self, size: f64) -> bool {
        size < self.base_size / 2.0
    }

    fn alive_cols(&self, iv: Interval, alive: &[bool]) -> Vec<u32> {
        (iv.lo..iv.hi)
            .filter(|&j| alive[j])
            .map(|j| j as u32)
            .collect()
    }

    /// Activates every base interval that is now fully inside
    /// `[0, span_hi)` and still intersects the window, in index order.
    /// Returns the newly activated intervals.
    pub fn activate(&mut self, window: &WindowView<'_>, step: u64) -> Vec<Interval> {
        let mut added = Vec::new();
        while self.next_leaf < self.leaf_count {
            let iv = self.base_ivs[self.leaf_count + self.next_leaf];
            if iv.is_empty() {
                // padding; nothing beyond it either
                break;
            }
            if iv.hi > window.span_hi {
                break;
            }
            let intersects = (iv.lo..iv.hi).any(|j| window.alive[j] && j < window.span_hi);
            if !intersects {
                // A contained interval with no alive window column was
                // necessarily activated at an earlier step; hitting this
                // for an unactivated leaf means the caller skipped steps.
                break;
            }
            let node = self.leaf_node(self.next_leaf);
            self.activated[node as usize] = true;
            self.active.push(ActiveLeaf { node, iv });
            self.events.push(TreeEvent::Activate { step, node, iv });
            added.push(iv);
            self.next_leaf += 1;
        }
        added
    }

    fn is_left_child(node: u32) -> bool {
        node > 1 && node % 2 == 0
    }

    fn is_right_child(node: u32) -> bool {
        node > 1 && node % 2 == 1
    }

    fn parent(node: u32) -> u32 {
        node / 2
    }

    fn sibling(node: u32) -> u32 {
        if node % 2 == 0 {
            node + 1
        } else {
            node - 1
        }
    }

    /// Runs the merge rules to fixpoint, scanning active leaves left to
    /// right and restarting after each structural change:
    ///
    /// * a small left active leaf merges rightward into the next active
    ///   leaf (if that next leaf is its sibling, both are deleted and
    ///   their parent becomes the active leaf); the last active leaf is
    ///   exempt;
    /// * a small right active leaf whose left sibling was deleted is
    ///   re-labeled by its parent.
    ///
    /// Returns the events appended during this pass.
    pub fn merge_pass(&mut self, alive: &[bool], step: u64) -> Vec<TreeEvent> {
        let first_event = self.events.len();
        'outer: loop {
            for idx in 0..self.active.len() {
                let leaf = self.active[idx];
                let size = self.size_of(leaf.iv, alive);
                if !self.small(size) {
                    continue;
                }
                if Self::is_left_child(leaf.node) && idx + 1 < self.active.len() {
                    self.absorb_at(idx, alive, step, false);
                    continue 'outer;
                }
                if Self::is_right_child(leaf.node)
                    && self.removed[Self::sibling(leaf.node) as usize]
                {
                    let parent = Self::parent(leaf.node);
                    self.removed[leaf.node as usize] = true;
                    self.active[idx].node = parent;
                    self.events.push(TreeEvent::Promote {
                        step,
                        from_node: leaf.node,
                        parent,
                    });
                    continue 'outer;
                }
            }
            break;
        }
        self.events[first_event..].to_vec()
    }

    /// Merges `active[idx]` rightward into `active[idx + 1]`. Promotes
    /// the parent when the two are siblings.
    fn absorb_at(&mut self, idx: usize, alive: &[bool], step: u64, forced: bool) {
        let leaf = self.active[idx];
        let next = self.active[idx + 1];
        debug_assert_eq!(leaf.iv.hi, next.iv.lo, "active leaves must tile contiguously");
        self.events.push(TreeEvent::Absorb {
            step,
            absorbed_node: leaf.node,
            absorbed: leaf.iv,
            into_node: next.node,
            into: next.iv,
            alive_cols: self.alive_cols(leaf.iv, alive),
            forced,
        });
        self.removed[leaf.node as usize] = true;
        let merged = Interval {
            lo: leaf.iv.lo,
            hi: next.iv.hi,
        };
        if next.node == Self::sibling(leaf.node) && Self::is_left_child(leaf.node) {
            let parent = Self::parent(leaf.node);
            self.removed[next.node as usize] = true;
            self.active[idx + 1] = ActiveLeaf {
                node: parent,
                iv: merged,
            };
            self.events.push(TreeEvent::Promote {
                step,
                from_node: next.node,
                parent,
            });
        } else {
            self.active[idx + 1].iv = merged;
        }
        self.active.remove(idx);
    }

    /// Budget fallback: merges the adjacent active pair with the
    /// smallest combined size, regardless of smallness. Returns the
    /// absorbed interval, or `None` when fewer than two leaves exist.
    pub fn force_merge_pair(&mut self, alive: &[bool], step: u64) -> Option<Interval> {
        if self.active.len() < 2 {
            return None;
        }
        let mut best_idx = 0;
        let mut best_size = f64::INFINITY;
        for idx in 0..self.active.len() - 1 {
            let s = self.size_of(self.active[idx].iv, alive)
                + self.size_of(self.active[idx + 1].iv, alive);
            if s < best_size {
                best_size = s;
                best_idx = idx;
            }
        }
        let absorbed = self.active[best_idx].iv;
        self.absorb_at(best_idx, alive, step, true);
        Some(absorbed)
    }

    /// Right endpoints of active leaves inside the window range, as
    /// guarded prefixes. With `include_window_end`, `span_hi` itself is
    /// always a guard. Errors when the budget is exceeded; the caller
    /// falls back to forced merges.
    pub fn guards(
        &self,
        window: &WindowView<'_>,
        include_window_end: bool,
        budget: usize,
    ) -> Result<GuardSet, MergeTreeError> {
        let mut guards: Vec<usize> = self
            .active
            .iter()
            .map(|l| l.iv.hi)
            .filter(|&p| p > window.span_lo && p <= window.span_hi)
            .collect();
        if include_window_end {
            guards.push(window.span_hi);
        }
        guards.sort_unstable();
        guards.dedup();
        if guards.len() > budget {
            return Err(MergeTreeError::GuardBudgetExceeded {
                count: guards.len(),
                budget,
            });
        }
        Ok(GuardSet { guards })
    }

    /// Statistics under the tree's measure; see [`TreeStats`].
    pub fn stats(&self, alive: &[bool], window: &WindowView<'_>) -> TreeStats {
        let active_leaf_count = self.active.len();
        let in_window_count = self
            .active
            .iter()
            .filter(|l| l.iv.lo < window.span_hi && l.iv.hi > window.span_lo)
            .count();
        let mut sizes: Vec<f64> = self
            .active
            .iter()
            .map(|l| self.size_of(l.iv, alive))
            .collect();
        if let Some(&last) = sizes.last() {
            if self.small(last) {
                sizes.pop();
            }
        }
        let (mean_size, min_size) = if sizes.is_empty() {
            (None, None)
        } else {
            let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
            let min = sizes.iter().copied().fold(f64::INFINITY, f64::min);
            (Some(mean), Some(min))
        };
        TreeStats {
            active_leaf_count,
            in_window_count,
            mean_size,
            min_size,
        }
    }

    /// Exports the event log as JSON lines.
    pub fn export_events_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for ev in &self.events {
            let line = serde_json::to_string(ev).expect("event serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Replays an event log into the active partition it produces:
/// `(node, interval)` pairs in column order.
pub fn replay_partition(events: &[TreeEvent]) -> Vec<(u32, Interval)> {
    let mut active: Vec<(u32, Interval)> = Vec::new();
    apply_events(&mut active, events);
    active
}

fn apply_events(active: &mut Vec<(u32, Interval)>, events: &[TreeEvent]) {
    for ev in events {
        match ev {
            TreeEvent::Activate { node, iv, .. } => {
                let pos = active.partition_point(|(_, i)| i.lo < iv.lo);
                active.insert(pos, (*node, *iv));
            }
            TreeEvent::Absorb {
                absorbed_node,
                into_node,
                ..
            } => {
                let a = active
                    .iter()
                    .position(|(n, _)| n == absorbed_node)
                    .expect("absorbed leaf present in replay");
                let lo = active[a].1.lo;
                active.remove(a);
                let b = active
                    .iter()
                    .position(|(n, _)| n == into_node)
                    .expect("absorbing leaf present in replay");
                active[b].1.lo = lo;
            }
            TreeEvent::Promote {
                from_node, parent, ..
            } => {
                let a = active
                    .iter()
                    .position(|(n, _)| n == from_node)
                    .expect("promoted leaf present in replay");
                active[a].0 = *parent;
            }
        }
    }
}

/// Error set for prefix `p` (a prefix length in `1..=n`): the union over
/// all executed steps of the alive columns strictly between the prefix's
/// guard and `p`, reconstructed from the event log, the per-step window
/// spans, and the per-column death steps (`u32::MAX` = still alive).
/// Columns are returned 0-based.
pub fn accumulated_error_set(
    events: &[TreeEvent],
    windows: &[StepWindow],
    death_step: &[u32],
    p: usize,
) -> BTreeSet<usize> {
    let mut active: Vec<(u32, Interval)> = Vec::new();
    let mut next_event = 0usize;
    let mut out = BTreeSet::new();

    for w in windows {
        let step = w.step;
        let upto = events[next_event..]
            .iter()
            .take_while(|e| e.step() <= step)
            .count();
        apply_events(&mut active, &events[next_event..next_event + upto]);
        next_event += upto;

        if p > w.span_hi {
            // the window has not reached the prefix: no error accrual
            continue;
        }
        let mut guards: Vec<usize> = active
            .iter()
            .map(|(_, iv)| iv.hi)
            .filter(|&g| g > w.span_lo && g <= w.span_hi)
            .collect();
        guards.push(w.span_hi);
        guards.sort_unstable();
        guards.dedup();
        let guard = guards.iter().rev().find(|&&g| g <= p).copied();
        if guard == Some(p) {
            continue;
        }
        let lo = guard.unwrap_or(0);
        for (j, &dstep) in death_step.iter().enumerate().take(p).skip(lo) {
            if dstep as u64 > step {
                out.insert(j);
            }
        }
    }
    out
}
