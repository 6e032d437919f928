//! Remote state preparation by projective measurement of one photon of a pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qmath::{
    kron, partial_trace_raw, CMatrix, DensityMatrix1Q, DensityMatrix2Q, Subsystem,
};

pub const MIN_SUCCESS_PROBABILITY: f64 = 1e-12;
pub const MIN_POSTSELECTED_EVENTS: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum RspError {
    #[error("projection succeeds with probability {0:e}")]
    ZeroProbabilityProjection(f64),
    #[error("only {0} post-selected events, need at least {MIN_POSTSELECTED_EVENTS}")]
    InsufficientCounts(f64),
    #[error("projection must be 2×2")]
    BadProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub state: DensityMatrix1Q,
    pub success_probability: f64,
}

/// Receiver state after the sender's photon passes `projection`:
/// ρ_cond = Tr_sender[(P ⊗ I) ρ (P ⊗ I)] / tr[(P ⊗ I) ρ], with P on `sender`.
pub fn rsp_predict(
    rho: &DensityMatrix2Q,
    projection: &CMatrix,
    sender: Subsystem,
) -> Result<Prediction, RspError> {
    if projection.rows() != 2 || projection.cols() != 2 {
        return Err(RspError::BadProjection);
    }
    let id = CMatrix::identity(2);
    let full = match sender {
        Subsystem::First => kron(projection, &id),
        Subsystem::Second => kron(&id, projection),
    };
    let m = &(&full * rho.matrix()) * &full.adjoint();
    let p = m.trace().re;
    if !(p > MIN_SUCCESS_PROBABILITY) {
        return Err(RspError::ZeroProbabilityProjection(p));
    }
    let reduced = partial_trace_raw(&m, sender.other()).scale_real(1.0 / p);
    Ok(Prediction {
        state: DensityMatrix1Q::from_trusted(reduced.hermitian_part()),
        success_probability: p,
    })
}
