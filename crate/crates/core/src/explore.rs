//! All-steps exploration mixture `μ^explore`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::PolicyMixture;
use crate::occupancy::{coverage_frank_wolfe, CoverageScope, FwTrace, OccupancyHandle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploreResult {
    pub mixture: PolicyMixture,
    pub trace: FwTrace,
    /// `g` of the final search direction against the returned mixture.
    pub certified_g: f64,
}

/// Frank-Wolfe on `μ ↦ Σ_{h,s,a} ln(1/(K^on H) + E_μ d̂^π_h(s,a))` until the
/// best response satisfies `g ≤ 2HSA` or the iteration cap is hit.
pub fn compute_mu_explore(
    handle: &OccupancyHandle,
    k_on: usize,
    iteration_cap_override: Option<usize>,
) -> Result<ExploreResult> {
    if !handle.is_fully_fitted() {
        return Err(Error::State("exploration needs a fully fitted occupancy handle".into()));
    }
    let out = coverage_frank_wolfe(handle, CoverageScope::AllSteps, k_on, iteration_cap_override)?;
    Ok(ExploreResult { mixture: out.mixture, certified_g: out.trace.final_g, trace: out.trace })
}
