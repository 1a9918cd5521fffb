use serde::{Deserialize, Serialize};

/// Auto-encoding weight: 1 up to `alpha·beta`, linear down to 0 at `beta`,
/// 0 from `beta` on.
pub fn lambda_d(step: usize, alpha: f64, beta: f64) -> f64 {
    let s = step as f64;
    let knee = alpha * beta;
    if s >= beta {
        0.0
    } else if s <= knee {
        1.0
    } else {
        (beta - s) / (beta - knee)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear warmup to `peak`, then `peak·sqrt(warmup/step)`.
    InverseSqrt { peak: f64, warmup: usize },
    /// Linear warmup to `peak`, then one half-cosine down to `floor` at `total`.
    Cosine {
        peak: f64,
        warmup: usize,
        floor: f64,
        total: usize,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::InverseSqrt {
            peak: 1e-3,
            warmup: 200,
        }
    }
}

impl LrSchedule {
    pub fn warmup(&self) -> usize {
        match self {
            LrSchedule::InverseSqrt { warmup, .. } | LrSchedule::Cosine { warmup, .. } => *warmup,
        }
    }
}

pub fn lr_at(step: usize, schedule: &LrSchedule) -> f64 {
    let s = step as f64;
    match *schedule {
        LrSchedule::InverseSqrt { peak, warmup } => {
            let w = warmup as f64;
            if s < w {
                peak * s / w
            } else if s == 0.0 {
                peak
            } else {
                peak * (w.max(1.0) / s).sqrt().min(1.0)
            }
        }
        LrSchedule::Cosine {
            peak,
            warmup,
            floor,
            total,
        } => {
            let w = warmup as f64;
            if s < w {
                return peak * s / w;
            }
            let span = (total as f64 - w).max(1.0);
            let progress = ((s - w) / span).clamp(0.0, 1.0);
            floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    /// Translation loss only.
    #[serde(rename = "mt")]
    Mt,
    /// Auto-encoding plus translation loss at constant weight 1.
    #[serde(rename = "ae+mt")]
    AeMt,
    /// Auto-encoding loss weighted by the decaying `lambda_d`.
    #[serde(rename = "decay-ae+mt")]
    DecayAeMt,
}

impl LossMode {
    pub fn weight(self, step: usize, alpha: f64, beta: f64) -> f64 {
        match self {
            LossMode::Mt => 0.0,
            LossMode::AeMt => 1.0,
            LossMode::DecayAeMt => lambda_d(step, alpha, beta),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mt => "mt",
            LossMode::AeMt => "ae+mt",
            LossMode::DecayAeMt => "decay-ae+mt",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mt" => Ok(LossMode::Mt),
            "ae+mt" => Ok(LossMode::AeMt),
            "decay-ae+mt" => Ok(LossMode::DecayAeMt),
            other => Err(format!("unknown loss mode {other:?} (expected mt, ae+mt or decay-ae+mt)")),
        }
    }
}
