//! Prize-collecting TSP (PCTSP) and prize-collecting Steiner tree (PCSTP)
//! solvers for finite doubling metrics.
//!
//! The crate is organized around a divide-and-conquer pipeline:
//!
//! * [`metric`] — metric spaces, instance rescaling, hierarchical nets and
//!   the net tree they induce.
//! * [`instance`] — problem instances, solutions as edge multisets, cost
//!   evaluation and the net-respecting conversion.
//! * [`primal_dual`] — a deterministic Goemans–Williamson style moat-growing
//!   2-approximation used as the local estimator engine and as a baseline.
//! * [`estimator`] — local sparsity heuristic, critical-instance detection
//!   and cutting-radius selection.
//! * [`hierdecomp`] — randomized hierarchical decompositions, portals, and
//!   the portal-respecting / economical / light solution transforms.
//! * [`dp`] — the bottom-up dynamic program over the cluster tree that
//!   searches for minimum-cost light solutions.
//! * [`decompose`] — the top-level adaptive recursion that splits critical
//!   instances, solves the pieces, and extends partial solutions.
//! * [`oracle`] — exact brute-force solvers (Held–Karp, Dreyfus–Wagner)
//!   used as the base case and as ground truth in tests.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the CLI
//! live in the companion `pcx-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod decompose;
pub mod dp;
pub mod estimator;
pub mod hierdecomp;
pub mod instance;
pub mod metric;
pub mod oracle;
pub mod primal_dual;

/// Absolute tolerance for all cost comparisons.
pub const TOL: f64 = 1e-9;

pub use config::SolverConfig;
pub use instance::{PcxInstance, Penalty, Solution, Variant};
pub use metric::{HierarchicalNets, MetricSpace, NetTree, PointId};
