use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::wrap_delta;

/// Pairwise velocity kernel `f(z)` on wrapped displacements `z = x_i - x_j`.
///
/// Positive `f(z)` for `z > 0` pushes agent `i` away from agent `j`, so the
/// repulsive family is `strength * sign(z) * exp(-|z| / decay_length)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InteractionKernel {
    Zero,
    RepulsiveExponential { strength: f64, decay_length: f64 },
    AttractiveExponential { strength: f64, decay_length: f64 },
    CustomTable(KernelTable),
}

impl Default for InteractionKernel {
    fn default() -> Self {
        InteractionKernel::RepulsiveExponential {
            strength: 1.0,
            decay_length: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Kernel samples at `z_m = -length/2 + m * length / M`, linearly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    length: f64,
    values: Vec<f64>,
}

impl KernelTable {
    pub fn new(length: f64, values: Vec<f64>) -> Result<Self> {
        let m = values.len();
        if m < 2 {
            return Err(Error::param("kernel table", "needs at least two samples"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::param("kernel table", "length must be positive"));
        }
        crate::error::ensure_finite(&values, "kernel table")?;
        // sample m sits at -L/2 + m*dz; its mirror image is sample (M - m) mod M
        for i in 0..m {
            let j = (m - i) % m;
            if (values[i] + values[j]).abs() > 1e-9 {
                return Err(Error::param(
                    "kernel table",
                    format!("not odd: f[{i}] = {}, f[{j}] = {}", values[i], values[j]),
                ));
            }
        }
        Ok(Self { length, values })
    }

    fn eval(&self, z: f64) -> f64 {
        let m = self.values.len();
        let dz = self.length / m as f64;
        let s = (wrap_delta(z, self.length) + 0.5 * self.length) / dz;
        let i = (s.floor() as usize).min(m - 1);
        let frac = s - i as f64;
        self.values[i] * (1.0 - frac) + self.values[(i + 1) % m] * frac
    }
}

impl InteractionKernel {
    pub fn repulsive(strength: f64, decay_length: f64) -> Result<Self> {
        check_exp(strength, decay_length)?;
        Ok(Self::RepulsiveExponential {
            strength,
            decay_length,
        })
    }

    pub fn attractive(strength: f64, decay_length: f64) -> Result<Self> {
        check_exp(strength, decay_length)?;
        Ok(Self::AttractiveExponential {
            strength,
            decay_length,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Zero => Ok(()),
            Self::RepulsiveExponential {
                strength,
                decay_length,
            }
            | Self::AttractiveExponential {
                strength,
                decay_length,
            } => check_exp(*strength, *decay_length),
            Self::CustomTable(t) => KernelTable::new(t.length, t.values.clone()).map(|_| ()),
        }
    }

    /// `f(z)` for `z` in `[-length/2, length/2)`.
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::RepulsiveExponential {
                strength,
                decay_length,
            } => signum0(z) * strength * (-z.abs() / decay_length).exp(),
            Self::AttractiveExponential {
                strength,
                decay_length,
            } => -signum0(z) * strength * (-z.abs() / decay_length).exp(),
            Self::CustomTable(t) => t.eval(z),
        }
    }

    /// Evaluation consistent with periodicity: at the antipode `z = -length/2`
    /// the two one-sided limits are averaged, which is zero for an odd kernel.
    pub fn eval_periodic(&self, z: f64, length: f64) -> f64 {
        let half = 0.5 * length;
        if z <= -half {
            0.5 * (self.eval(-half) + self.eval(half))
        } else {
            self.eval(z)
        }
    }

    /// Same family with its amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Self::Zero => Self::Zero,
            Self::RepulsiveExponential {
                strength,
                decay_length,
            } => Self::RepulsiveExponential {
                strength: strength * factor,
                decay_length: *decay_length,
            },
            Self::AttractiveExponential {
                strength,
                decay_length,
            } => Self::AttractiveExponential {
                strength: strength * factor,
                decay_length: *decay_length,
            },
            Self::CustomTable(t) => Self::CustomTable(KernelTable {
                length: t.length,
                values: t.values.iter().map(|v| v * factor).collect(),
            }),
        }
    }

    /// `(signed amplitude, decay length)` for the exponential families:
    /// `f(z) = amplitude * sign(z) * exp(-|z| / decay)`.
    pub(crate) fn exponential_form(&self) -> Option<(f64, f64)> {
        match self {
            Self::RepulsiveExponential {
                strength,
                decay_length,
            } => Some((*strength, *decay_length)),
            Self::AttractiveExponential {
                strength,
                decay_length,
            } => Some((-*strength, *decay_length)),
            _ => None,
        }
    }
}

fn signum0(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_exp(strength: f64, decay_length: f64) -> Result<()> {
    if !strength.is_finite() {
        return Err(Error::param("strength", "must be finite"));
    }
    if !(decay_length > 0.0 && decay_length.is_finite()) {
        return Err(Error::param("decay_length", format!("must be positive, got {decay_length}")));
    }
    Ok(())
}
