//! Differentiable forward pass of a [`NetworkSpec`] on a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::rng::Rng;
use crate::spec::{LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// `[weight, bias]` for each trainable layer, in network order. Group-norm
/// layers hold `[scale, shift]`.
pub type Params = Vec<[Tensor; 2]>;

/// He-normal weights, zero biases, unit group-norm scales.
pub fn init_params(spec: &NetworkSpec, rng: &mut Rng) -> Result<Params> {
    if spec.is_cost_only() {
        return Err(Error::Invalid("network contains cost-only layers".into()));
    }
    let mut out = Vec::new();
    for l in &spec.layers {
        let Some([ws, bs]) = l.param_shapes() else { continue };
        let p = match *l {
            LayerSpec::GroupNorm { .. } => [Tensor::ones(&ws), Tensor::zeros(&bs)],
            _ => {
                let fan_in: usize = ws[1..].iter().product();
                [Tensor::randn(&ws, (2.0 / fan_in as f64).sqrt(), rng), Tensor::zeros(&bs)]
            }
        };
        out.push(p);
    }
    Ok(out)
}

pub fn check_params(spec: &NetworkSpec, params: &[[Tensor; 2]]) -> Result<()> {
    let shapes: Vec<_> = spec.layers.iter().filter_map(|l| l.param_shapes()).collect();
    if shapes.len() != params.len() {
        return Err(shape_err!("{} parameter pairs for {} trainable layers", params.len(), shapes.len()));
    }
    for (i, (s, p)) in shapes.iter().zip(params).enumerate() {
        if p[0].shape() != s[0].as_slice() || p[1].shape() != s[1].as_slice() {
            return Err(shape_err!("layer {i}: params {:?}/{:?}, expected {:?}/{:?}", p[0].shape(), p[1].shape(), s[0], s[1]));
        }
    }
    Ok(())
}

/// Graph handles recorded for one trainable layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Index into `NetworkSpec::layers`.
    pub layer: usize,
    /// Layer input `x_{l-1}`.
    pub input: Var,
    /// Tensor whose channels the weight gradient is built from: the input,
    /// or the normalized input for group norm.
    pub stored: Var,
    /// Layer output `y_l`.
    pub output: Var,
}

pub fn conv_graph(g: &mut Graph, x: Var, w: Var, b: Var, l: &LayerSpec) -> Result<Var> {
    let LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } = *l else {
        return Err(Error::Invalid("conv_graph on non-conv layer".into()));
    };
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != in_channels {
        return Err(shape_err!("conv2d expects [B, {in_channels}, H, W], got {:?}", s));
    }
    let geom = ConvGeom { batch: s[0], channels: s[1], height: s[2], width: s[3], kernel, stride, padding };
    let (bsz, ho, wo) = (s[0], geom.out_h(), geom.out_w());
    let cols = g.im2col(x, geom)?;
    let wm = g.reshape(w, &[out_channels, geom.col_rows()])?;
    let y = g.matmul(wm, cols)?;
    let y = g.swap01(y, [out_channels, bsz, ho * wo])?;
    let y = g.reshape(y, &[bsz, out_channels * ho * wo])?;
    let bias = g.expand_cols(b, ho * wo)?;
    let bias = g.reshape(bias, &[out_channels * ho * wo])?;
    let bias = g.tile_rows(bias, bsz)?;
    let y = g.add(y, bias)?;
    g.reshape(y, &[bsz, out_channels, ho, wo])
}

pub fn fc_graph(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let bsz = g.shape(x)[0];
    let n = g.value(x).len() / bsz;
    let x = g.reshape(x, &[bsz, n])?;
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    let bias = g.tile_rows(b, bsz)?;
    g.add(y, bias)
}

/// Returns `(y, x_hat)`.
pub fn group_norm_graph(g: &mut Graph, x: Var, scale: Var, shift: Var, groups: usize) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let (bsz, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    if c % groups != 0 {
        return Err(shape_err!("{groups} groups do not divide {c} channels"));
    }
    let per = c / groups * hw;
    let xr = g.reshape(x, &[bsz * groups, per])?;
    let mean = g.sum_cols(xr)?;
    let mean = g.scale(mean, 1.0 / per as f64)?;
    let mean = g.expand_cols(mean, per)?;
    let xc = g.sub(xr, mean)?;
    let sq = g.mul(xc, xc)?;
    let var = g.sum_cols(sq)?;
    let var = g.scale(var, 1.0 / per as f64)?;
    let var = g.add_const(var, GN_EPS)?;
    let inv = g.rsqrt(var)?;
    let inv = g.expand_cols(inv, per)?;
    let xhat = g.mul(xc, inv)?;
    let xhat = g.reshape(xhat, &[bsz, c * hw])?;
    let sc = g.expand_cols(scale, hw)?;
    let sc = g.reshape(sc, &[c * hw])?;
    let sc = g.tile_rows(sc, bsz)?;
    let sh = g.expand_cols(shift, hw)?;
    let sh = g.reshape(sh, &[c * hw])?;
    let sh = g.tile_rows(sh, bsz)?;
    let y = g.mul(xhat, sc)?;
    let y = g.add(y, sh)?;
    let y = g.reshape(y, &s)?;
    let xhat = g.reshape(xhat, &s)?;
    Ok((y, xhat))
}

pub fn max_pool_graph(g: &mut Graph, x: Var, window: usize, stride: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("max_pool expects [B, C, H, W], got {:?}", s));
    }
    g.max_pool(x, PoolGeom { batch: s[0], channels: s[1], height: s[2], width: s[3], window, stride })
}

/// Runs the network on a batch `x` of shape `[B, input dims...]`.
pub fn forward_graph(g: &mut Graph, spec: &NetworkSpec, params: &[[Var; 2]], x: Var) -> Result<(Var, Vec<LayerTrace>)> {
    let mut want = vec![g.shape(x)[0]];
    want.extend(spec.input.dims());
    if g.shape(x) != want.as_slice() {
        return Err(shape_err!("network input {:?}, expected {:?}", g.shape(x), want));
    }
    let mut h = x;
    let mut traces = Vec::new();
    let mut p = params.iter();
    for (i, l) in spec.layers.iter().enumerate() {
        let input = h;
        match *l {
            LayerSpec::Conv2d { .. } => {
                let [w, b] = *p.next().ok_or_else(|| shape_err!("missing params for layer {i}"))?;
                h = conv_graph(g, h, w, b, l)?;
                traces.push(LayerTrace { layer: i, input, stored: input, output: h });
            }
            LayerSpec::FullyConnected { .. } => {
                let [w, b] = *p.next().ok_or_else(|| shape_err!("missing params for layer {i}"))?;
                h = fc_graph(g, h, w, b)?;
                traces.push(LayerTrace { layer: i, input, stored: input, output: h });
            }
            LayerSpec::GroupNorm { groups, .. } => {
                let [s, b] = *p.next().ok_or_else(|| shape_err!("missing params for layer {i}"))?;
                let (y, xhat) = group_norm_graph(g, h, s, b, groups)?;
                h = y;
                traces.push(LayerTrace { layer: i, input, stored: xhat, output: h });
            }
            LayerSpec::MaxPool { window, stride } => h = max_pool_graph(g, h, window, stride)?,
            LayerSpec::Relu => h = g.relu(h)?,
            LayerSpec::ResnetBlock { .. } | LayerSpec::GlobalAvgPool => {
                return Err(Error::Invalid(format!("{} is cost-only", l.kind())));
            }
        }
    }
    if p.next().is_some() {
        return Err(shape_err!("more parameter pairs than trainable layers"));
    }
    Ok((h, traces))
}

/// Prepends the batch dimension to the network's per-sample input shape.
pub fn batch_shape(spec: &NetworkSpec, batch: usize) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend(spec.input.dims());
    s
}

/// Plain evaluation of the network on a batch.
pub fn predict(spec: &NetworkSpec, params: &[[Tensor; 2]], x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::first_order();
    let vars: Vec<[Var; 2]> = params.iter().map(|[w, b]| [g.leaf(w.clone()), g.leaf(b.clone())]).collect();
    let xv = g.leaf(x.clone());
    let (out, _) = forward_graph(&mut g, spec, &vars, xv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{mlp, Shape};

    #[test]
    fn identity_fc() {
        let spec = mlp(3, &[], 3);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let params = vec![[eye, Tensor::zeros(&[3])]];
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        assert_eq!(predict(&spec, &params, &x).unwrap(), x);
    }

    #[test]
    fn scalar_conv() {
        let l = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, padding: 0 };
        let spec = NetworkSpec::new(Shape::image(1, 3, 3), vec![l]).unwrap();
        let params = vec![[Tensor::full(&[1, 1, 1, 1], 2.0), Tensor::zeros(&[1])]];
        let x = Tensor::full(&[1, 1, 3, 3], 3.0);
        assert_eq!(predict(&spec, &params, &x).unwrap().data(), &[6.0; 9]);
    }

    #[test]
    fn group_norm_fixed_point_and_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let s = g.leaf(Tensor::ones(&[2]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let (y, _) = group_norm_graph(&mut g, x, s, b, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let c = g.leaf(Tensor::full(&[1, 2, 1, 2], 7.0));
        let (y, _) = group_norm_graph(&mut g, c, s, b, 2).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }
}
