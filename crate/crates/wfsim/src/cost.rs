//! Throughput, cost and effectiveness arithmetic.
//!
//! A year is 8760 hours and throughput rounds to the nearest whole run; that
//! combination reproduces the published throughput figures exactly.

use serde::{Deserialize, Serialize};

use crate::engine::RunReport;

pub const HOURS_PER_YEAR: f64 = 8760.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub system: String,
    pub makespan_h: f64,
    pub throughput_per_year: u64,
    pub cost_basis_eur: f64,
    /// Runs per Euro at full precision; display rounding is the caller's
    /// concern.
    pub effectiveness: f64,
    /// Set in the low-utilization variant: effectiveness uses this run count
    /// instead of the theoretical throughput.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilization_runs: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("makespan must be positive, got {0}")]
    NonPositiveMakespan(f64),
    #[error("cost must be positive, got {0}")]
    NonPositiveCost(f64),
    #[error("report for {0:?} carries no cost information")]
    NoCostBasis(String),
}

/// Workflow runs per year at the given makespan, rounded to nearest.
pub fn throughput_per_year(makespan_h: f64) -> Result<u64, CostError> {
    if makespan_h <= 0.0 {
        return Err(CostError::NonPositiveMakespan(makespan_h));
    }
    Ok((HOURS_PER_YEAR / makespan_h).round() as u64)
}

/// Runs per Euro.
pub fn effectiveness(runs: u64, cost_eur: f64) -> Result<f64, CostError> {
    if cost_eur <= 0.0 {
        return Err(CostError::NonPositiveCost(cost_eur));
    }
    Ok(runs as f64 / cost_eur)
}

/// Annualized cost report for rented infrastructure: the year's runs are
/// billed per run, so effectiveness is always `1 / per_run_eur`.
pub fn rental_cost_report(
    system: &str,
    makespan_h: f64,
    per_run_eur: f64,
) -> Result<CostReport, CostError> {
    if per_run_eur <= 0.0 {
        return Err(CostError::NonPositiveCost(per_run_eur));
    }
    let runs = throughput_per_year(makespan_h)?;
    let annual_cost = runs as f64 * per_run_eur;
    Ok(CostReport {
        system: system.to_string(),
        makespan_h,
        throughput_per_year: runs,
        cost_basis_eur: annual_cost,
        effectiveness: effectiveness(runs, annual_cost)?,
        utilization_runs: None,
    })
}

/// Effectiveness when only `runs_per_year` runs are actually performed.
pub fn low_utilization_effectiveness(
    runs_per_year: u64,
    cost_basis_eur: f64,
) -> Result<f64, CostError> {
    effectiveness(runs_per_year, cost_basis_eur)
}

/// Cost basis of an owned system. When the run used at most half of the
/// nodes (per the alignment node cap), only half the acquisition cost is
/// attributed, matching how the published comparison treated the largest
/// cluster.
pub fn owned_cost_basis(
    acquisition_cost_eur: f64,
    node_count: u32,
    alignment_node_cap: Option<u32>,
) -> f64 {
    match alignment_node_cap {
        Some(cap) if u64::from(cap) * 2 <= u64::from(node_count) => acquisition_cost_eur * 0.5,
        _ => acquisition_cost_eur,
    }
}

/// Builds the cost report for a finished run, applying the rental rule or
/// the owned-hardware rule as appropriate. With `runs_per_year` set, the
/// low-utilization variant is produced (rental cost then covers only the
/// performed runs).
pub fn cost_report_for_run(
    report: &RunReport,
    runs_per_year: Option<u64>,
) -> Result<CostReport, CostError> {
    let ctx = &report.cost_context;
    if let Some(per_run) = ctx.per_run_rental_eur {
        let mut cost = rental_cost_report(&report.system, report.makespan_h, per_run)?;
        if let Some(runs) = runs_per_year {
            let basis = runs as f64 * per_run;
            cost.cost_basis_eur = basis;
            cost.effectiveness = effectiveness(runs, basis)?;
            cost.utilization_runs = Some(runs);
        }
        return Ok(cost);
    }
    let acquisition = ctx
        .acquisition_cost_eur
        .ok_or_else(|| CostError::NoCostBasis(report.system.clone()))?;
    let basis = owned_cost_basis(acquisition, ctx.node_count, ctx.alignment_node_cap);
    let throughput = throughput_per_year(report.makespan_h)?;
    match runs_per_year {
        None => Ok(CostReport {
            system: report.system.clone(),
            makespan_h: report.makespan_h,
            throughput_per_year: throughput,
            cost_basis_eur: basis,
            effectiveness: effectiveness(throughput, basis)?,
            utilization_runs: None,
        }),
        Some(runs) => Ok(CostReport {
            system: report.system.clone(),
            makespan_h: report.makespan_h,
            throughput_per_year: throughput,
            cost_basis_eur: basis,
            effectiveness: low_utilization_effectiveness(runs, basis)?,
            utilization_runs: Some(runs),
        }),
    }
}

/// CSV with one row per system: `system,makespan_h,throughput,cost_eur,effectiveness`.
pub fn cost_table_csv(reports: &[CostReport]) -> String {
    let mut out = String::from("system,makespan_h,throughput,cost_eur,effectiveness\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.system, r.makespan_h, r.throughput_per_year, r.cost_basis_eur, r.effectiveness
        ));
    }
    out
}

/// Rounds to `decimals` places, for comparing against displayed figures.
pub fn round_to(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throughput_matches_published_rows() {
        assert_eq!(throughput_per_year(24.0).unwrap(), 365);
        assert_eq!(throughput_per_year(7.6).unwrap(), 1153);
        assert_eq!(throughput_per_year(1.14).unwrap(), 7684);
        assert!(throughput_per_year(0.0).is_err());
    }

    #[test]
    fn effectiveness_matches_published_rows() {
        assert_eq!(round_to(effectiveness(365, 11_000.0).unwrap(), 3), 0.033);
        assert_eq!(round_to(effectiveness(1153, 100_000.0).unwrap(), 3), 0.012);
        // Half of the 800k acquisition per the half-cluster rule.
        assert_eq!(round_to(effectiveness(7684, 400_000.0).unwrap(), 3), 0.019);
        assert!(effectiveness(1, 0.0).is_err());
    }

    #[test]
    fn effectiveness_is_scale_invariant() {
        for a in [2.0, 10.0, 0.5] {
            let base = effectiveness(365, 11_000.0).unwrap();
            let scaled = (365.0 * a) / (11_000.0 * a);
            assert!((base - scaled).abs() < 1e-12);
        }
    }

    #[test]
    fn rental_report_matches_cloud_estimate() {
        let r = rental_cost_report("EC2", 14.0, 500.0).unwrap();
        assert_eq!(r.throughput_per_year, 626);
        assert_eq!(r.cost_basis_eur, 313_000.0);
        assert!((r.effectiveness - 0.002).abs() < 1e-12);

        let r = rental_cost_report("EC2", 8760.0, 1.0).unwrap();
        assert_eq!(r.throughput_per_year, 1);
        assert_eq!(r.cost_basis_eur, 1.0);
        assert_eq!(r.effectiveness, 1.0);

        // Rental effectiveness does not depend on makespan.
        let r = rental_cost_report("EC2", 1.0, 500.0).unwrap();
        assert_eq!(r.throughput_per_year, 8760);
        assert_eq!(r.cost_basis_eur, 4_380_000.0);
        assert!((r.effectiveness - 0.002).abs() < 1e-12);
    }

    #[test]
    fn low_utilization_values() {
        assert_eq!(round_to(low_utilization_effectiveness(50, 11_000.0).unwrap(), 4), 0.0045);
        assert_eq!(low_utilization_effectiveness(50, 100_000.0).unwrap(), 0.0005);
        // Full precision: the published table displays this as 0.0001.
        assert_eq!(low_utilization_effectiveness(50, 400_000.0).unwrap(), 0.000125);
        assert_eq!(low_utilization_effectiveness(50, 25_000.0).unwrap(), 0.002);
    }

    #[test]
    fn throughput_non_increasing_in_makespan() {
        let mut last = u64::MAX;
        for m in [1.0, 1.14, 7.6, 24.0, 65.13, 100.0] {
            let t = throughput_per_year(m).unwrap();
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn half_cluster_rule() {
        assert_eq!(owned_cost_basis(800_000.0, 111, Some(54)), 400_000.0);
        assert_eq!(owned_cost_basis(800_000.0, 111, Some(56)), 800_000.0);
        assert_eq!(owned_cost_basis(11_000.0, 1, None), 11_000.0);
    }
}
