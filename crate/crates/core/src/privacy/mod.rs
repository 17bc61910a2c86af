//! Noise calibration, privacy accounting, Lipschitz bounds and an empirical
//! privacy-loss audit for Gaussian mechanisms.
//!
//! Accountants take the noise-to-sensitivity ratio `σ_rel = σ/S`.

mod accountant;
mod audit;
mod calibrate;
mod lipschitz;

pub use accountant::{
    account_gdp, account_rdp, account_strong_composition, gdp_delta, normal_cdf, AccountMethod,
    AccountantState, RDP_ALPHAS,
};
pub use audit::{privacy_loss_audit, AuditReport};
pub use calibrate::{
    calibrate_sigma_gaussian, calibrate_sigma_sde, calibrate_sigma_training, epsilon_for_sigma,
    TrainingCalibration,
};
pub use lipschitz::{estimate_lipschitz, spectral_norm};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    /// The Gaussian-mechanism bound is only proved for `0 < ε < 1`.
    #[error("epsilon {0} is outside (0, 1), where the calibration bound holds")]
    OutOfRegime(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), PrivacyError> {
    if ok {
        Ok(())
    } else {
        Err(PrivacyError::InvalidParameter(msg()))
    }
}
