use crate::attention::LayerAttention;
use crate::error::{shape_err, Error, Result};
use crate::model::{check_params, Params};
use crate::spec::NetworkSpec;

/// Everything needed to adapt on a new task: initial weights, per-layer
/// per-step inner step sizes and the attention modules.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptPlan {
    pub spec: NetworkSpec,
    pub params: Params,
    /// `alpha[l][k]` for trainable layer `l` and inner step `k`.
    pub alpha: Vec<Vec<f64>>,
    /// Attention modules per trainable layer; `None` means unattended (scores of one).
    pub attention: Vec<Option<LayerAttention>>,
    pub rho_fw: f64,
    pub rho_bw: f64,
}

impl AdaptPlan {
    pub fn validate(&self) -> Result<()> {
        check_params(&self.spec, &self.params)?;
        let l = self.params.len();
        if self.alpha.len() != l || self.attention.len() != l {
            return Err(shape_err!("{} step-size rows and {} attention slots for {l} layers", self.alpha.len(), self.attention.len()));
        }
        let k = self.inner_steps();
        if k == 0 || self.alpha.iter().any(|r| r.len() != k) {
            return Err(shape_err!("step sizes must form an L x K matrix with K >= 1"));
        }
        if self.alpha.iter().flatten().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Invalid("step sizes must be finite and nonnegative".into()));
        }
        for r in [self.rho_fw, self.rho_bw] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Invalid(format!("clip ratio {r} outside [0, 1)")));
            }
        }
        let trainable = self.spec.trainable();
        for (slot, a) in self.attention.iter().enumerate() {
            let Some(a) = a else { continue };
            let (ci, co) = crate::layers::mask_channels(&self.spec.layers[trainable[slot]]).expect("trainable");
            if a.fw.channels() != ci || a.bw.channels() != co {
                return Err(shape_err!("attention on layer {slot} sized {}/{}, expected {ci}/{co}", a.fw.channels(), a.bw.channels()));
            }
        }
        Ok(())
    }

    pub fn inner_steps(&self) -> usize {
        self.alpha.first().map_or(0, |r| r.len())
    }

    /// `alpha_hat[l][k] = alpha[l][k] > 0`.
    pub fn alpha_mask(&self) -> Vec<Vec<bool>> {
        self.alpha.iter().map(|r| r.iter().map(|a| *a > 0.0).collect()).collect()
    }

    /// Fraction of step sizes that are exactly zero.
    pub fn alpha_sparsity(&self) -> f64 {
        let n = self.alpha.iter().map(Vec::len).sum::<usize>();
        self.alpha.iter().flatten().filter(|a| **a == 0.0).count() as f64 / n.max(1) as f64
    }

    /// Per-sample input words `m(x_{l-1})` of each trainable layer.
    pub fn input_words(&self) -> Vec<usize> {
        let shapes = self.spec.shapes().expect("validated spec");
        self.spec.trainable().iter().map(|&i| shapes[i].words()).collect()
    }
}
