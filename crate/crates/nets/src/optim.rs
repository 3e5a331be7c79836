use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug)]
enum Inner {
    Sgd { vars: Vec<Var>, velocity: Vec<Option<Tensor>> },
    Adam(AdamW),
}

/// One optimizer per network, so a frozen network keeps its weights while
/// the others keep training on the shared loss.
#[derive(Debug)]
pub struct NetOptimizer {
    inner: Inner,
    lr: f64,
    frozen: bool,
}

impl NetOptimizer {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self> {
        let inner = match kind {
            OptimizerKind::SgdMomentum => Inner::Sgd {
                velocity: vec![None; vars.len()],
                vars,
            },
            OptimizerKind::Adam => Inner::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?),
        };
        Ok(Self {
            inner,
            lr,
            frozen: false,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        match &mut self.inner {
            Inner::Sgd { vars, velocity } => {
                for (var, v) in vars.iter().zip(velocity.iter_mut()) {
                    let Some(g) = grads.get(var) else { continue };
                    let next = match v.as_ref() {
                        Some(prev) => ((prev * MOMENTUM)? + g)?,
                        None => g.clone(),
                    };
                    var.set(&(var.as_tensor() - (&next * self.lr)?)?)?;
                    *v = Some(next);
                }
            }
            Inner::Adam(opt) => opt.step(grads)?,
        }
        Ok(())
    }
}
