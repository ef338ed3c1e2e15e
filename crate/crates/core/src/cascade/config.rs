use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownets::Init;
use crate::generative::{ModelConfig, ModelKind};
use crate::synthdata::Variable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CascadeMode {
    Cascade,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionInit {
    Zeros,
    Xavier,
}

impl From<ProjectionInit> for Init {
    fn from(p: ProjectionInit) -> Init {
        match p {
            ProjectionInit::Zeros => Init::Zeros,
            ProjectionInit::Xavier => Init::Xavier,
        }
    }
}

/// Layout of the prosody predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSpec {
    pub mode: CascadeMode,
    /// Prediction order; duration must come last. Ignored in joint mode.
    pub order: Vec<Variable>,
    /// Template for every predictor; `kind`, `out_dim` and `noise_dim` are
    /// overridden per mode.
    pub model: ModelConfig,
    pub projection_init: ProjectionInit,
    /// Lifted width of the single 3-channel model; must be divisible by 3.
    pub joint_noise_dim: usize,
    /// Hidden width of the joint model's network.
    pub joint_hidden: usize,
    pub seed: u64,
}

impl Default for CascadeSpec {
    fn default() -> Self {
        CascadeSpec {
            mode: CascadeMode::Cascade,
            order: vec![Variable::Energy, Variable::Pitch, Variable::Duration],
            model: ModelConfig::default(),
            projection_init: ProjectionInit::Zeros,
            joint_noise_dim: 12,
            joint_hidden: 14,
            seed: 0,
        }
    }
}

impl CascadeSpec {
    pub fn cascade(kind: ModelKind, order: &[Variable]) -> Self {
        let mut s = CascadeSpec {
            order: order.to_vec(),
            ..CascadeSpec::default()
        };
        s.model.kind = kind;
        s
    }

    pub fn joint(kind: ModelKind) -> Self {
        let mut s = CascadeSpec {
            mode: CascadeMode::Joint,
            ..CascadeSpec::default()
        };
        s.model.kind = kind;
        s
    }

    pub fn pitch_first() -> [Variable; 3] {
        [Variable::Pitch, Variable::Energy, Variable::Duration]
    }

    pub fn energy_first() -> [Variable; 3] {
        [Variable::Energy, Variable::Pitch, Variable::Duration]
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == CascadeMode::Cascade {
            let mut sorted = self.order.clone();
            sorted.sort();
            if sorted != Variable::ALL {
                return Err(Error::InvalidArgument(format!(
                    "cascade order must be a permutation of pitch, energy, duration: {:?}",
                    self.order
                )));
            }
            if self.order.last() != Some(&Variable::Duration) {
                return Err(Error::InvalidArgument("duration must be predicted last".into()));
            }
        }
        for c in self.stage_configs() {
            c.validate()?;
        }
        Ok(())
    }

    /// One model config per stage, in prediction order.
    pub fn stage_configs(&self) -> Vec<ModelConfig> {
        match self.mode {
            CascadeMode::Cascade => self.order.iter().map(|_| ModelConfig { out_dim: 1, ..self.model.clone() }).collect(),
            CascadeMode::Joint => vec![ModelConfig {
                out_dim: 3,
                noise_dim: self.joint_noise_dim,
                hidden: self.joint_hidden,
                ..self.model.clone()
            }],
        }
    }
}

pub(crate) fn variable_stream(var: Variable) -> u64 {
    match var {
        Variable::Pitch => 11,
        Variable::Energy => 12,
        Variable::Duration => 13,
    }
}

pub(crate) const JOINT_STREAM: u64 = 14;
