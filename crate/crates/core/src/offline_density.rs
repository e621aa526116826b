//! Thresholded occupancy estimate from offline data, and the (partial)
//! single-policy concentrability coefficients used for diagnostics.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{invalid, Result};
use crate::mdp::OccupancyTable;

/// Which cutoff formula [`estimate_d_off`] applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffMode {
    /// `c_off · ln(HSA/δ) / K^off`
    #[default]
    Desk,
    /// `c_off · (ln(HSA/δ)/K^off + H⁴S⁴A⁴·ln(HSA/δ)/N + SA/K^on)`
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDensityEstimate {
    pub d_off_hat: OccupancyTable,
    pub cutoff: f64,
    pub raw_counts: Array3<u64>,
}

impl OfflineDensityEstimate {
    /// Number of cells that survived the cutoff.
    pub fn support_size(&self) -> usize {
        self.d_off_hat.d.iter().filter(|&&x| x > 0.0).count()
    }

    /// True when every entry was thresholded away.
    pub fn is_zero(&self) -> bool {
        self.support_size() == 0
    }
}

/// Parameters of the offline density cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffParams {
    pub k_off: usize,
    /// Stage-1 per-step episode count `N` (paper-literal mode only).
    pub n: usize,
    pub k_on: usize,
    pub delta: f64,
    pub c_off: f64,
    pub mode: CutoffMode,
}

impl CutoffParams {
    pub fn cutoff(&self, horizon: usize, num_states: usize, num_actions: usize) -> f64 {
        let hsa = (horizon * num_states * num_actions) as f64;
        let log_term = (hsa / self.delta).ln();
        let first = log_term / self.k_off as f64;
        match self.mode {
            CutoffMode::Desk => self.c_off * first,
            CutoffMode::PaperLiteral => {
                let sa = (num_states * num_actions) as f64;
                let second = hsa.powi(4) * log_term / self.n.max(1) as f64;
                let third = sa / self.k_on.max(1) as f64;
                self.c_off * (first + second + third)
            }
        }
    }
}

/// `N_h(s, a)` over every step present in the dataset.
pub fn visit_counts(ds: &TrajectoryDataset, num_states: usize, num_actions: usize) -> Result<Array3<u64>> {
    let mut counts = Array3::<u64>::zeros((ds.horizon(), num_states, num_actions));
    for t in ds.episodes() {
        for (h, (&s, &a)) in t.states().iter().zip(t.actions()).enumerate() {
            if s >= num_states || a >= num_actions {
                return invalid(format!("visit ({s}, {a}) out of range for S={num_states}, A={num_actions}"));
            }
            counts[[h, s, a]] += 1;
        }
    }
    Ok(counts)
}

/// `d̂^off_h(s,a) = (2N/K^off) · 1{N/K^off ≥ cutoff}` with `N` counted over `off1`.
pub fn estimate_d_off(
    off1: &TrajectoryDataset,
    num_states: usize,
    num_actions: usize,
    params: &CutoffParams,
) -> Result<OfflineDensityEstimate> {
    if off1.is_empty() {
        return invalid("offline dataset is empty");
    }
    if params.k_off == 0 || !(params.delta > 0.0 && params.delta < 1.0) {
        return invalid("k_off must be positive and delta in (0, 1)");
    }
    let horizon = off1.horizon();
    let raw_counts = visit_counts(off1, num_states, num_actions)?;
    let cutoff = params.cutoff(horizon, num_states, num_actions);
    let k_off = params.k_off as f64;
    let d = raw_counts.mapv(|n| {
        let freq = n as f64 / k_off;
        if freq >= cutoff && n > 0 { 2.0 * freq } else { 0.0 }
    });
    Ok(OfflineDensityEstimate { d_off_hat: OccupancyTable { d }, cutoff, raw_counts })
}

/// Outcome of the partial concentrability computation at one `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrabilityReport {
    pub sigma: f64,
    #[serde(with = "crate::serde_util::extended_f64")]
    pub c_star_sigma: f64,
    /// Per step, the excluded `(s, a)` pairs.
    pub excluded_sets: Vec<Vec<(usize, usize)>>,
    pub excluded_mass: f64,
}

const MASS_TOL: f64 = 1e-12;

/// Ratio `d^π* / d^off`; `+∞` when the offline density vanishes.
fn ratio(d_pi: f64, d_off: f64) -> f64 {
    if d_off > 0.0 { d_pi / d_off } else { f64::INFINITY }
}

/// `C*(σ)`: the smallest achievable maximum ratio `d^π*/d^off` after
/// excluding cells whose total `d^π*` mass is at most `σ·H`.
///
/// Cells are visited in decreasing ratio order and excluded while they fit in
/// the mass budget. Lowering the max below the current top ratio requires
/// excluding the top cell, so the first cell that does not fit fixes the
/// answer.
pub fn partial_concentrability(
    d_pi_star: &OccupancyTable,
    d_off: &OccupancyTable,
    sigma: f64,
) -> Result<ConcentrabilityReport> {
    if !(0.0..=1.0).contains(&sigma) {
        return invalid(format!("sigma must lie in [0, 1], got {sigma}"));
    }
    if d_pi_star.dims() != d_off.dims() {
        return invalid("occupancy tables have different shapes");
    }
    let (horizon, _, _) = d_pi_star.dims();
    let mut cells: Vec<((usize, usize, usize), f64, f64)> = d_pi_star
        .d
        .indexed_iter()
        .filter(|(_, &m)| m > 0.0)
        .map(|((h, s, a), &m)| ((h, s, a), m, ratio(m, d_off.d[[h, s, a]])))
        .collect();
    cells.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));

    let budget = sigma * horizon as f64;
    let mut excluded_sets = vec![Vec::new(); horizon];
    let mut excluded_mass = 0.0;
    let mut c_star_sigma = 0.0;
    for &((h, s, a), mass, r) in &cells {
        if excluded_mass + mass <= budget + MASS_TOL {
            excluded_mass += mass;
            excluded_sets[h].push((s, a));
        } else {
            c_star_sigma = r;
            break;
        }
    }
    for set in &mut excluded_sets {
        set.sort_unstable();
    }
    Ok(ConcentrabilityReport { sigma, c_star_sigma, excluded_sets, excluded_mass })
}

/// `C* = max d^π*/d^off` over cells with positive `d^π*`.
pub fn concentrability(d_pi_star: &OccupancyTable, d_off: &OccupancyTable) -> f64 {
    d_pi_star
        .d
        .iter()
        .zip(d_off.d.iter())
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &o)| ratio(m, o))
        .fold(0.0, f64::max)
}

/// Reports on a grid of `σ` values.
pub fn concentrability_grid(
    d_pi_star: &OccupancyTable,
    d_off: &OccupancyTable,
    sigmas: &[f64],
) -> Result<Vec<ConcentrabilityReport>> {
    sigmas.iter().map(|&s| partial_concentrability(d_pi_star, d_off, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, Trajectory};
    use ndarray::Array3;

    fn table(v: &[f64]) -> OccupancyTable {
        OccupancyTable { d: Array3::from_shape_vec((1, v.len(), 1), v.to_vec()).unwrap() }
    }

    #[test]
    fn four_cell_example() {
        let d_pi = table(&[0.1, 0.2, 0.3, 0.4]);
        let d_off = table(&[0.0, 0.02, 0.15, 0.4]);
        let r = partial_concentrability(&d_pi, &d_off, 0.1).unwrap();
        assert!((r.c_star_sigma - 10.0).abs() < 1e-12);
        assert_eq!(r.excluded_sets[0], vec![(0, 0)]);
        let r = partial_concentrability(&d_pi, &d_off, 0.05).unwrap();
        assert!(r.c_star_sigma.is_infinite());
        assert_eq!(partial_concentrability(&d_pi, &d_off, 1.0).unwrap().c_star_sigma, 0.0);
    }

    #[test]
    fn proportional_tables_give_constant_ratio() {
        let d_pi = table(&[0.25, 0.25, 0.5]);
        let d_off = OccupancyTable { d: d_pi.d.mapv(|x| x / 3.0) };
        for sigma in [0.0, 0.1, 0.2] {
            let r = partial_concentrability(&d_pi, &d_off, sigma).unwrap();
            assert!((r.c_star_sigma - 3.0).abs() < 1e-12);
        }
        assert!((concentrability(&d_pi, &d_pi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_reached_cell_is_infinite() {
        let d_pi = table(&[0.5, 0.5]);
        let d_off = table(&[1.0, 0.0]);
        assert!(concentrability(&d_pi, &d_off).is_infinite());
        assert!(partial_concentrability(&d_pi, &d_off, 0.0).unwrap().c_star_sigma.is_infinite());
        assert!(partial_concentrability(&d_pi, &d_off, 1.5).is_err());
    }

    #[test]
    fn report_json_encodes_infinity() {
        let r = partial_concentrability(&table(&[1.0]), &table(&[0.0]), 0.0).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        let back: ConcentrabilityReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    fn repeated(states: [usize; 2], actions: [usize; 2], k: usize) -> TrajectoryDataset {
        let eps = (0..k)
            .map(|_| Trajectory::new(states.to_vec(), actions.to_vec(), Provenance::Offline1).unwrap())
            .collect();
        TrajectoryDataset::new(2, eps).unwrap()
    }

    #[test]
    fn identical_episodes_give_point_density() {
        let ds = repeated([0, 1], [1, 0], 10);
        let params = CutoffParams { k_off: 20, n: 1, k_on: 1, delta: 0.1, c_off: 0.1, mode: CutoffMode::Desk };
        let est = estimate_d_off(&ds, 2, 2, &params).unwrap();
        assert_eq!(est.d_off_hat.get(0, 0, 1), 1.0);
        assert_eq!(est.d_off_hat.get(1, 1, 0), 1.0);
        assert_eq!(est.support_size(), 2);
        assert_eq!(est.raw_counts[[0, 0, 1]], 10);
    }

    #[test]
    fn large_cutoff_zeroes_estimate() {
        let ds = repeated([0, 1], [1, 0], 4);
        let desk = CutoffParams { k_off: 8, n: 1, k_on: 1, delta: 0.1, c_off: 100.0, mode: CutoffMode::Desk };
        assert!(estimate_d_off(&ds, 2, 2, &desk).unwrap().is_zero());
        let literal = CutoffParams { c_off: 2.0, mode: CutoffMode::PaperLiteral, ..desk };
        let est = estimate_d_off(&ds, 2, 2, &literal).unwrap();
        assert!(est.cutoff >= 1.0 && est.is_zero());
        assert!(estimate_d_off(&TrajectoryDataset::empty(2), 2, 2, &desk).is_err());
    }
}
