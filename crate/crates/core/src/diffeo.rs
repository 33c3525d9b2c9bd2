//! Scaling and squaring of stationary velocity fields.

use crate::error::{Error, Result};
use crate::field::{compose, DisplacementField, Grid};
use crate::metrics::{folding_fraction, jacobian_determinant};

/// Number of squaring steps used unless overridden.
pub const DEFAULT_STEPS: u32 = 7;

/// Stationary velocity field; same `[d, S..]` layout as a displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(DisplacementField);

impl VelocityField {
    pub fn new(v: DisplacementField) -> Self {
        Self(v)
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn as_field(&self) -> &DisplacementField {
        &self.0
    }

    pub fn into_field(self) -> DisplacementField {
        self.0
    }
}

impl From<DisplacementField> for VelocityField {
    fn from(v: DisplacementField) -> Self {
        Self(v)
    }
}

/// Displacement of `exp(v)`: seed with `v / 2^steps`, then compose the field
/// with itself `steps` times.
pub fn integrate(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    if steps == 0 {
        return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
    }
    let mut u = v.0.scaled(0.5f64.powi(steps as i32));
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Fraction of voxels whose integrated deformation keeps a positive Jacobian.
pub fn jacobian_positivity_rate(v: &VelocityField, steps: u32) -> Result<f64> {
    let u = integrate(v, steps)?;
    Ok(1.0 - folding_fraction(&jacobian_determinant(&u)?))
}
