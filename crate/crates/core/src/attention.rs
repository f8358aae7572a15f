//! Channel attention producing sparse forward/backward gradient masks.
//!
//! Each module is a squeeze-excite bottleneck:
//!
//! ```text
//! pooled [B, C] -> Linear(C, ceil(C/r)) -> ReLU -> Linear(ceil(C/r), C) -> logits [B, C]
//! logits averaged over the batch -> softmax -> clip_normalize(rho)
//! ```
//!
//! The forward module sees the spatial mean of the layer input. The backward
//! module sees the spatial mean of `|dL/dy|`. The second linear stage starts at
//! zero so the initial scores are uniform ones.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const REDUCTION: usize = 4;

/// Zeros the lowest-mass entries of a probability vector until at least `rho`
/// of the mass has been removed, renormalizes and rescales so the result sums
/// to the vector length.
///
/// Entries are ranked ascending with ties kept in index order. At most `C - 1`
/// entries are removed.
pub fn clip_normalize(pi: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid!("clip ratio must be in [0, 1), got {rho}"));
    }
    if pi.is_empty() {
        return Err(invalid!("empty probability vector"));
    }
    if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid!("probabilities must be finite and nonnegative"));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid!("probabilities sum to {total}, expected 1"));
    }
    let n = pi.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pi[a].total_cmp(&pi[b]));
    let mut c = 0;
    if rho > 0.0 {
        let mut cum = 0.0;
        c = n;
        for (i, &k) in order.iter().enumerate() {
            cum += pi[k];
            if cum >= rho {
                c = i + 1;
                break;
            }
        }
        c = c.min(n - 1);
    }
    let mut out = pi.to_vec();
    for &k in &order[..c] {
        out[k] = 0.0;
    }
    let kept: f64 = out.iter().sum();
    let scale = n as f64 / kept;
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Outer product `gamma[f][c] = bw[f] * fw[c]`, shape `[C_out, C_in]`.
pub fn combine_scores(fw: &[f64], bw: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(fw.len() * bw.len());
    for b in bw {
        data.extend(fw.iter().map(|f| f * b));
    }
    Tensor::new(vec![bw.len().max(1), fw.len().max(1)], data).expect("nonempty score vectors")
}

/// Fraction of nonzero entries.
pub fn critical_ratio(scores: &[f64]) -> f64 {
    scores.iter().filter(|v| **v != 0.0).count() as f64 / scores.len() as f64
}

/// One bottleneck scoring module over `channels` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModule {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AttentionModule {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let hidden = channels.div_ceil(REDUCTION);
        AttentionModule {
            w1: Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[channels, hidden]),
            b2: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.b2.len()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_tensors(t: [Tensor; 4]) -> Result<Self> {
        let [w1, b1, w2, b2] = t;
        let (c, h) = (b2.len(), b1.len());
        if w1.shape() != [h, c] || w2.shape() != [c, h] {
            return Err(shape_err!("attention module shapes {:?} {:?} {:?} {:?}", w1.shape(), b1.shape(), w2.shape(), b2.shape()));
        }
        Ok(AttentionModule { w1, b1, w2, b2 })
    }

    pub fn leaves(&self, g: &mut Graph) -> ModuleVars {
        ModuleVars([g.leaf(self.w1.clone()), g.leaf(self.b1.clone()), g.leaf(self.w2.clone()), g.leaf(self.b2.clone())])
    }

    /// Scores for a pooled batch, evaluated without gradients.
    pub fn scores(&self, pooled: &Tensor, rho: f64) -> Result<Vec<f64>> {
        let mut g = Graph::first_order();
        let vars = self.leaves(&mut g);
        let p = g.leaf(pooled.clone());
        let out = scores_graph(&mut g, &vars, p, rho)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Graph handles of one module's `[w1, b1, w2, b2]`.
#[derive(Debug, Clone, Copy)]
pub struct ModuleVars(pub [Var; 4]);

/// Per-sample logits `[B, C]` for a pooled batch `[B, C]`.
pub fn logits_graph(g: &mut Graph, m: &ModuleVars, pooled: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = m.0;
    let c = g.shape(b2)[0];
    let shape = g.shape(pooled).to_vec();
    if shape.len() != 2 || shape[1] != c {
        return Err(shape_err!("attention over {c} channels given {:?}", shape));
    }
    let b = shape[0];
    let w1t = g.transpose(w1)?;
    let h = g.matmul(pooled, w1t)?;
    let bb = g.tile_rows(b1, b)?;
    let h = g.add(h, bb)?;
    let h = g.relu(h)?;
    let w2t = g.transpose(w2)?;
    let z = g.matmul(h, w2t)?;
    let bb = g.tile_rows(b2, b)?;
    g.add(z, bb)
}

/// Batch-averaged, softmaxed and clipped scores `[C]`.
pub fn scores_graph(g: &mut Graph, m: &ModuleVars, pooled: Var, rho: f64) -> Result<Var> {
    let logits = logits_graph(g, m, pooled)?;
    let b = g.shape(logits)[0];
    let c = g.shape(logits)[1];
    let mean = g.sum_rows(logits)?;
    let mean = g.scale(mean, 1.0 / b as f64)?;
    let row = g.reshape(mean, &[1, c])?;
    let pi = g.softmax_rows(row)?;
    let pi = g.reshape(pi, &[c])?;
    g.clip_norm(pi, rho)
}

/// Spatial mean of an NCHW (or `[B, C]`) tensor, giving `[B, C]`.
pub fn pool_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    if hw == 1 {
        return g.reshape(x, &[b, c]);
    }
    let flat = g.reshape(x, &[b * c, hw])?;
    let m = g.sum_cols(flat)?;
    let m = g.scale(m, 1.0 / hw as f64)?;
    g.reshape(m, &[b, c])
}

/// Spatial mean of absolute values, giving `[B, C]`.
pub fn pool_abs_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let a = g.abs(x)?;
    pool_mean(g, a)
}

/// Plain-value version of [`pool_mean`].
pub fn pool_mean_values(x: &Tensor, abs: bool) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let d = x.data();
    let out = (0..b * c)
        .map(|i| {
            let sl = &d[i * hw..(i + 1) * hw];
            let sum: f64 = if abs { sl.iter().map(|v| v.abs()).sum() } else { sl.iter().sum() };
            sum / hw as f64
        })
        .collect();
    Tensor::new(vec![b, c], out).expect("pooled shape")
}

/// Forward and backward modules of one attended layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub fw: AttentionModule,
    pub bw: AttentionModule,
}

impl LayerAttention {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        LayerAttention { fw: AttentionModule::new(in_channels, rng), bw: AttentionModule::new(out_channels, rng) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_no_clip() {
        assert_eq!(clip_normalize(&[0.25; 4], 0.0).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn worked_clip_example() {
        let out = clip_normalize(&[0.1, 0.2, 0.3, 0.4], 0.3).unwrap();
        let want = [0.0, 0.0, 12.0 / 7.0, 16.0 / 7.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_mass() {
        for rho in [0.0, 0.2, 0.99] {
            assert_eq!(clip_normalize(&[1.0, 0.0, 0.0], rho).unwrap(), vec![3.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(clip_normalize(&[0.5, 0.5], 1.0).is_err());
        assert!(clip_normalize(&[0.5, 0.6], 0.1).is_err());
        assert!(clip_normalize(&[1.5, -0.5], 0.1).is_err());
    }

    #[test]
    fn outer_product_example() {
        let g = combine_scores(&[0.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 6.0]);
    }

    #[test]
    fn fresh_module_gives_ones() {
        let mut rng = Rng::new(1);
        let m = AttentionModule::new(8, &mut rng);
        let pooled = Tensor::randn(&[3, 8], 1.0, &mut rng);
        assert_eq!(m.scores(&pooled, 0.0).unwrap(), vec![1.0; 8]);
        let zero = Tensor::zeros(&[1, 8]);
        assert_eq!(m.scores(&zero, 0.0).unwrap(), vec![1.0; 8]);
    }
}
