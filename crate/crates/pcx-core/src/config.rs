//! Solver configuration.
//!
//! All thresholds that the algorithms need are collected here so that runs
//! are reproducible from a single struct. Every field has a desk-scale
//! default; `None` fields are derived from the instance at hand.

use crate::metric::MetricSpace;

/// Tunable parameters for the whole solve pipeline.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Approximation parameter of the pipeline.
    pub eps: f64,
    /// Net-respecting conversion parameter; defaults to `eps`.
    pub eps_nr: Option<f64>,
    /// Scale base of the hierarchical nets.
    pub s: f64,
    /// When set, `s` is recomputed per instance as `max(4, (ln n)^(c/k))`
    /// with `c` this exponent.
    pub s_log_exponent: Option<f64>,
    /// Allow net bases below 4 (tests use s = 2).
    pub allow_small_s: bool,
    /// Net height; defaults to `ceil(log_s diameter) + 1`.
    pub levels: Option<usize>,
    /// Criticality threshold; defaults to `10 * s * k / eps`.
    pub q0: Option<f64>,
    /// Brute-force base case bound on the terminal count.
    pub base_threshold: usize,
    /// Portal count cap per cluster.
    pub m: usize,
    /// Active-portal cap per cluster.
    pub r: usize,
    /// Portal granularity; defaults to `eps / (4 * k * L)`.
    pub theta_portal: Option<f64>,
    /// Single-scale decomposition concentration; chi = chi_base^k.
    pub chi_base: f64,
    /// Cap on the number of ordered pairs in a PCTSP interface.
    pub max_pairs: usize,
    /// Cap on the number of edges of an interface graph in the DP.
    pub max_interface_edges: usize,
    /// Cap on the degree of a node of an interface graph in the DP.
    pub max_node_degree: usize,
    /// DP enumeration budget; exceeding it aborts the DP run.
    pub max_candidates: u64,
    /// Outer restarts; the best solution across repetitions is kept.
    pub repetitions: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps: 0.5,
            eps_nr: None,
            s: 4.0,
            s_log_exponent: None,
            allow_small_s: false,
            levels: None,
            q0: None,
            base_threshold: 4,
            m: 64,
            r: 4,
            theta_portal: None,
            chi_base: 2.0,
            max_pairs: 4,
            max_interface_edges: 8,
            max_node_degree: 4,
            max_candidates: 2_000_000,
            repetitions: 1,
        }
    }
}

impl SolverConfig {
    /// Net-respecting parameter in effect.
    pub fn eps_nr(&self) -> f64 {
        self.eps_nr.unwrap_or(self.eps)
    }

    /// Net base in effect for an instance with `n` terminals.
    pub fn net_base(&self, n: usize) -> f64 {
        match self.s_log_exponent {
            Some(c) if n >= 2 => {
                let k = 1.0; // exponent c is already expressed per-dimension by the caller
                let v = libm::pow(libm::log(n as f64), c / k);
                if v > self.s {
                    v
                } else {
                    self.s
                }
            }
            _ => self.s,
        }
    }

    /// Criticality threshold in effect.
    pub fn q0(&self, k: u32) -> f64 {
        self.q0
            .unwrap_or(10.0 * self.s * k as f64 / self.eps)
    }

    /// Net height in effect for `space`.
    pub fn levels_for(&self, space: &MetricSpace) -> usize {
        if let Some(l) = self.levels {
            return l.max(1);
        }
        let diam = space.diameter();
        if diam <= 1.0 {
            return 1;
        }
        let l = libm::ceil(libm::log(diam) / libm::log(self.s)) as usize;
        l + 1
    }

    /// Portal granularity in effect for net height `levels`.
    pub fn theta(&self, k: u32, levels: usize) -> f64 {
        self.theta_portal
            .unwrap_or(self.eps / (4.0 * k as f64 * levels.max(1) as f64))
    }

    /// Portal displacement bound implied by the portal granularity; the DP
    /// value is within `(1 + eps_dp)` of the optimum over light solutions.
    pub fn eps_dp(&self, k: u32, levels: usize) -> f64 {
        8.0 * self.theta(k, levels) * levels.max(1) as f64
    }
}
