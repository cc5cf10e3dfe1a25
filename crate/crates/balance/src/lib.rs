//! Vector-balancing engine: SDP-guided random walks for `l2` prefix
//! discrepancy (both `linf`-bounded and `l2`-bounded inputs), the global
//! interval trees that keep the per-step SDP small, and a Steinitz
//! ordering built on top of the prefix-discrepancy walk.
//!
//! The crate is organized around the walk pipeline:
//!
//! * [`instance`] — input matrices, validation, generators, JSON I/O.
//! * [`sdp`] — the per-step feasibility SDP, a projection solver, the
//!   post-hoc residual checker, and covariance sampling.
//! * [`merge_tree`] — global interval trees with activation and merge
//!   rules, guard queries, and an auditable event log.
//! * [`walk`] — the sliding-window coloring walk in both modes.
//! * [`steinitz`] — recursive ordering of zero-sum inputs.
//! * [`harness`] — baselines, a brute-force oracle, and experiment runs.

pub mod harness;
pub mod instance;
pub(crate) mod linalg;
pub mod merge_tree;
pub mod sdp;
pub mod steinitz;
pub mod walk;
