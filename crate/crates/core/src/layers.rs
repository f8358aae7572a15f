//! Explicit per-layer forward and backward kernels used by the adaptation
//! runtime, with channel-masked weight gradients and activation storage.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::model::GN_EPS;
use crate::spec::LayerSpec;
use crate::tensor::Tensor;

/// Nonnegative channel scores over a layer's inputs (`fw`) and outputs (`bw`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub fw: Vec<f64>,
    pub bw: Vec<f64>,
}

impl ChannelMask {
    pub fn new(fw: Vec<f64>, bw: Vec<f64>) -> Result<Self> {
        if fw.iter().chain(&bw).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid!("channel mask entries must be finite and nonnegative"));
        }
        Ok(ChannelMask { fw, bw })
    }

    pub fn ones(c_in: usize, c_out: usize) -> Self {
        ChannelMask { fw: vec![1.0; c_in], bw: vec![1.0; c_out] }
    }

    pub fn nnz_fw(&self) -> usize {
        self.fw.iter().filter(|v| **v != 0.0).count()
    }

    pub fn nnz_bw(&self) -> usize {
        self.bw.iter().filter(|v| **v != 0.0).count()
    }

    pub fn mu_fw(&self) -> f64 {
        self.nnz_fw() as f64 / self.fw.len() as f64
    }

    pub fn mu_bw(&self) -> f64 {
        self.nnz_bw() as f64 / self.bw.len() as f64
    }
}

/// Channel counts `(C_in, C_out)` seen by the masks of a trainable layer.
pub fn mask_channels(l: &LayerSpec) -> Option<(usize, usize)> {
    match *l {
        LayerSpec::Conv2d { in_channels, out_channels, .. } => Some((in_channels, out_channels)),
        LayerSpec::FullyConnected { in_features, out_features } => Some((in_features, out_features)),
        LayerSpec::GroupNorm { channels, .. } => Some((channels, channels)),
        _ => None,
    }
}

/// Channel-subsampled copy of a layer input: only channels with a nonzero
/// forward score, each multiplied by its score. Shape `[B, nnz, H*W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredInput {
    pub channels: Vec<usize>,
    pub batch: usize,
    pub hw: usize,
    /// Spatial dims of the captured tensor; empty for flat inputs.
    pub plane: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredInput {
    pub fn capture(x: &Tensor, fw: &[f64]) -> Result<Self> {
        let s = x.shape();
        if s.len() < 2 || s[1] != fw.len() {
            return Err(shape_err!("mask of {} channels for input {:?}", fw.len(), s));
        }
        let (b, c) = (s[0], s[1]);
        let hw = x.len() / (b * c);
        let channels: Vec<usize> = (0..c).filter(|&i| fw[i] != 0.0).collect();
        let mut data = Vec::with_capacity(b * channels.len() * hw);
        let d = x.data();
        for bi in 0..b {
            for &ch in &channels {
                let src = &d[(bi * c + ch) * hw..][..hw];
                data.extend(src.iter().map(|v| fw[ch] * v));
            }
        }
        Ok(StoredInput { channels, batch: b, hw, plane: s[2..].to_vec(), data })
    }

    pub fn words(&self) -> usize {
        self.data.len()
    }
}

/// Per-layer retained inputs plus word counters.
#[derive(Debug, Clone, Default)]
pub struct ActivationStore {
    slots: Vec<Option<StoredInput>>,
    words: Vec<usize>,
    sigma_bits: usize,
    live: usize,
    peak: usize,
}

impl ActivationStore {
    pub fn new(layers: usize) -> Self {
        ActivationStore { slots: vec![None; layers], words: vec![0; layers], sigma_bits: 0, live: 0, peak: 0 }
    }

    pub fn put(&mut self, slot: usize, x: &Tensor, fw: &[f64]) -> Result<()> {
        let s = StoredInput::capture(x, fw)?;
        if let Some(old) = self.slots[slot].take() {
            self.live -= old.words();
        }
        self.words[slot] = s.words();
        self.live += s.words();
        self.peak = self.peak.max(self.live);
        self.slots[slot] = Some(s);
        Ok(())
    }

    pub fn get(&self, slot: usize) -> Option<&StoredInput> {
        self.slots.get(slot).and_then(|s| s.as_ref())
    }

    /// Removes a slot's tensor, releasing its live words.
    pub fn take(&mut self, slot: usize) -> Option<StoredInput> {
        let s = self.slots.get_mut(slot)?.take()?;
        self.live -= s.words();
        Some(s)
    }

    /// Records `n` one-bit derivative flags.
    pub fn add_sigma_bits(&mut self, n: usize) {
        self.sigma_bits += n;
    }

    /// Words retained for layer `slot` by the last `put`.
    pub fn slot_words(&self, slot: usize) -> usize {
        self.words[slot]
    }

    /// Real-valued words currently retained.
    pub fn live_words(&self) -> usize {
        self.live
    }

    /// Largest value of `live_words` since construction or `reset`.
    pub fn peak_words(&self) -> usize {
        self.peak
    }

    /// Words of bit-packed flags at wordlength `t`.
    pub fn sigma_words(&self, t: usize) -> usize {
        self.sigma_bits.div_ceil(t)
    }

    pub fn reset(&mut self) {
        let n = self.slots.len();
        *self = ActivationStore::new(n);
    }
}

fn conv_geom(l: &LayerSpec, x_shape: &[usize]) -> Result<ConvGeom> {
    let LayerSpec::Conv2d { in_channels, kernel, stride, padding, .. } = *l else {
        return Err(invalid!("not a conv layer"));
    };
    if x_shape.len() != 4 || x_shape[1] != in_channels {
        return Err(shape_err!("conv2d expects [B, {in_channels}, H, W], got {:?}", x_shape));
    }
    Ok(ConvGeom { batch: x_shape[0], channels: in_channels, height: x_shape[2], width: x_shape[3], kernel, stride, padding })
}

/// `[F, B*P] -> [B, F, P]`.
fn fbp_to_bfp(d: &[f64], f: usize, b: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for fi in 0..f {
        for bi in 0..b {
            out[(bi * f + fi) * p..][..p].copy_from_slice(&d[(fi * b + bi) * p..][..p]);
        }
    }
    out
}

/// `[B, F, P] -> [F, B*P]`.
fn bfp_to_fbp(d: &[f64], f: usize, b: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        for fi in 0..f {
            out[(fi * b + bi) * p..][..p].copy_from_slice(&d[(bi * f + fi) * p..][..p]);
        }
    }
    out
}

/// Result of a forward kernel: output plus multiply-accumulate count.
#[derive(Debug, Clone)]
pub struct Forward {
    pub y: Tensor,
    pub macs: u64,
}

pub fn conv_forward(l: &LayerSpec, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Forward> {
    let g = conv_geom(l, x.shape())?;
    let f = b.len();
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = Tensor::new(vec![g.col_rows(), g.col_cols()], kernels::im2col(x.data(), &g))?;
    let wm = w.clone().reshape(&[f, g.col_rows()])?;
    let y = wm.matmul(&cols)?;
    let mut y = fbp_to_bfp(y.data(), f, g.batch, ho * wo);
    for bi in 0..g.batch {
        for fi in 0..f {
            for v in &mut y[(bi * f + fi) * ho * wo..][..ho * wo] {
                *v += b.data()[fi];
            }
        }
    }
    let macs = (g.batch * ho * wo * f * g.col_rows()) as u64;
    Ok(Forward { y: Tensor::new(vec![g.batch, f, ho, wo], y)?, macs })
}

pub fn conv_input_grad(l: &LayerSpec, w: &Tensor, gy: &Tensor, x_shape: &[usize]) -> Result<Forward> {
    let g = conv_geom(l, x_shape)?;
    let f = w.shape()[0];
    let (ho, wo) = (g.out_h(), g.out_w());
    if gy.shape() != [g.batch, f, ho, wo] {
        return Err(shape_err!("conv gy {:?}, expected {:?}", gy.shape(), [g.batch, f, ho, wo]));
    }
    let gym = Tensor::new(vec![f, g.col_cols()], bfp_to_fbp(gy.data(), f, g.batch, ho * wo))?;
    let wt = w.clone().reshape(&[f, g.col_rows()])?.transpose()?;
    let gcols = wt.matmul(&gym)?;
    let gx = kernels::col2im(gcols.data(), &g);
    let macs = (g.batch * ho * wo * f * g.col_rows()) as u64;
    Ok(Forward { y: Tensor::new(x_shape.to_vec(), gx)?, macs })
}

/// Masked weight and bias gradient with the number of MACs spent on the weight part.
#[derive(Debug, Clone)]
pub struct WeightGrad {
    pub w: Tensor,
    pub b: Tensor,
    pub macs: u64,
}

/// Conv weight gradient built from the stored, score-weighted input channels.
/// Entry `(f, c)` equals `bw[f] * fw[c] * dense(f, c)`; skipped entries stay zero.
pub fn conv_weight_grad_masked(l: &LayerSpec, stored: &StoredInput, gy: &Tensor, mask: &ChannelMask) -> Result<WeightGrad> {
    let LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } = *l else {
        return Err(invalid!("not a conv layer"));
    };
    check_mask(mask, in_channels, out_channels)?;
    check_store(stored, mask)?;
    let s = gy.shape();
    if s.len() != 4 || s[1] != out_channels || s[0] != stored.batch {
        return Err(shape_err!("conv gy {:?} for stored batch {}", s, stored.batch));
    }
    let (bsz, ho, wo) = (s[0], s[2], s[3]);
    let [h, w] = stored.plane[..] else {
        return Err(shape_err!("conv2d needs a stored [H, W] plane, got {:?}", stored.plane));
    };
    let probe = ConvGeom { batch: bsz, channels: 1, height: h, width: w, kernel, stride, padding };
    if (probe.out_h(), probe.out_w()) != (ho, wo) {
        return Err(shape_err!("stored {h}x{w} plane does not produce a {ho}x{wo} output"));
    }
    let nnz = stored.channels.len();
    let kk = kernel * kernel;
    let mut gw = vec![0.0; out_channels * in_channels * kk];
    let mut gb = vec![0.0; out_channels];
    let p = ho * wo;
    let gym = bfp_to_fbp(gy.data(), out_channels, bsz, p);
    for (fi, gbv) in gb.iter_mut().enumerate() {
        if mask.bw[fi] != 0.0 {
            *gbv = mask.bw[fi] * gym[fi * bsz * p..][..bsz * p].iter().sum::<f64>();
        }
    }
    let mut macs = 0u64;
    if nnz > 0 {
        let g = ConvGeom { batch: bsz, channels: nnz, height: h, width: w, kernel, stride, padding };
        let cols = kernels::im2col(&stored.data, &g);
        let ncol = g.col_cols();
        for fi in 0..out_channels {
            if mask.bw[fi] == 0.0 {
                continue;
            }
            let grow = &gym[fi * ncol..][..ncol];
            for (ci, &ch) in stored.channels.iter().enumerate() {
                for m in 0..kk {
                    let crow = &cols[(ci * kk + m) * ncol..][..ncol];
                    let dot: f64 = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                    gw[(fi * in_channels + ch) * kk + m] = mask.bw[fi] * dot;
                }
                macs += (kk * ncol) as u64;
            }
        }
    }
    Ok(WeightGrad {
        w: Tensor::new(vec![out_channels, in_channels, kernel, kernel], gw)?,
        b: Tensor::new(vec![out_channels], gb)?,
        macs,
    })
}

fn check_mask(mask: &ChannelMask, c_in: usize, c_out: usize) -> Result<()> {
    if mask.fw.len() != c_in || mask.bw.len() != c_out {
        return Err(shape_err!("mask lengths {}/{} for layer {}/{}", mask.fw.len(), mask.bw.len(), c_in, c_out));
    }
    Ok(())
}

fn check_store(stored: &StoredInput, mask: &ChannelMask) -> Result<()> {
    for (c, &v) in mask.fw.iter().enumerate() {
        if v != 0.0 && stored.channels.binary_search(&c).is_err() {
            return Err(Error::State(format!("stored input lacks channel {c} required by the mask")));
        }
    }
    Ok(())
}

pub fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Forward> {
    let bsz = x.shape()[0];
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if x.len() != bsz * i {
        return Err(shape_err!("fully_connected expects {i} features, got {:?}", x.shape()));
    }
    let xm = x.clone().reshape(&[bsz, i])?;
    let mut y = xm.matmul(&w.transpose()?)?;
    for r in 0..bsz {
        for (v, bb) in y.data_mut()[r * o..(r + 1) * o].iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(Forward { y, macs: (bsz * o * i) as u64 })
}

pub fn fc_input_grad(w: &Tensor, gy: &Tensor, x_shape: &[usize]) -> Result<Forward> {
    let gx = gy.matmul(w)?;
    let macs = (gy.shape()[0] * w.len()) as u64;
    Ok(Forward { y: gx.reshape(x_shape)?, macs })
}

pub fn fc_weight_grad_masked(stored: &StoredInput, gy: &Tensor, mask: &ChannelMask) -> Result<WeightGrad> {
    let (c_in, c_out) = (mask.fw.len(), mask.bw.len());
    check_store(stored, mask)?;
    if gy.shape() != [stored.batch, c_out] || stored.hw != 1 {
        return Err(shape_err!("fc gy {:?} for stored batch {} x {}", gy.shape(), stored.batch, stored.hw));
    }
    let nnz = stored.channels.len();
    let bsz = stored.batch;
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    let mut macs = 0u64;
    let gd = gy.data();
    for f in 0..c_out {
        if mask.bw[f] == 0.0 {
            continue;
        }
        gb[f] = mask.bw[f] * (0..bsz).map(|b| gd[b * c_out + f]).sum::<f64>();
        for (ci, &ch) in stored.channels.iter().enumerate() {
            let dot: f64 = (0..bsz).map(|b| gd[b * c_out + f] * stored.data[b * nnz + ci]).sum();
            gw[f * c_in + ch] = mask.bw[f] * dot;
        }
        macs += (nnz * bsz) as u64;
    }
    Ok(WeightGrad { w: Tensor::new(vec![c_out, c_in], gw)?, b: Tensor::new(vec![c_out], gb)?, macs })
}

/// Group-norm forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

pub fn group_norm_forward(x: &Tensor, scale: &Tensor, shift: &Tensor, groups: usize) -> Result<(Forward, GroupNormCache)> {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    if scale.len() != c || shift.len() != c || c % groups != 0 {
        return Err(shape_err!("group_norm over {c} channels with {groups} groups and {} scales", scale.len()));
    }
    let hw = x.len() / (b * c);
    let per = c / groups * hw;
    let d = x.data();
    let mut xhat = vec![0.0; d.len()];
    let mut inv_std = Vec::with_capacity(b * groups);
    for gi in 0..b * groups {
        let sl = &d[gi * per..][..per];
        let mean = sl.iter().sum::<f64>() * (1.0 / per as f64);
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * (1.0 / per as f64);
        let inv = 1.0 / (var + GN_EPS).sqrt();
        for (o, v) in xhat[gi * per..][..per].iter_mut().zip(sl) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut y = xhat.clone();
    for bi in 0..b {
        for ch in 0..c {
            for v in &mut y[(bi * c + ch) * hw..][..hw] {
                *v = *v * scale.data()[ch] + shift.data()[ch];
            }
        }
    }
    let macs = (b * c * hw) as u64;
    Ok((Forward { y: Tensor::new(s.to_vec(), y)?, macs }, GroupNormCache { xhat: Tensor::new(s.to_vec(), xhat)?, inv_std, groups }))
}

pub fn group_norm_input_grad(cache: &GroupNormCache, scale: &Tensor, gy: &Tensor) -> Result<Forward> {
    let s = cache.xhat.shape();
    if gy.shape() != s {
        return Err(shape_err!("group_norm gy {:?} vs {:?}", gy.shape(), s));
    }
    let (b, c) = (s[0], s[1]);
    let hw = gy.len() / (b * c);
    let per = c / cache.groups * hw;
    let xh = cache.xhat.data();
    let mut gxh = gy.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            for v in &mut gxh[(bi * c + ch) * hw..][..hw] {
                *v *= scale.data()[ch];
            }
        }
    }
    let mut gx = vec![0.0; gxh.len()];
    for gi in 0..b * cache.groups {
        let r = gi * per..(gi + 1) * per;
        let sum: f64 = gxh[r.clone()].iter().sum();
        let dot: f64 = gxh[r.clone()].iter().zip(&xh[r.clone()]).map(|(a, b)| a * b).sum();
        let inv = cache.inv_std[gi];
        let n = per as f64;
        for i in r {
            gx[i] = inv * (gxh[i] - sum / n - xh[i] * dot / n);
        }
    }
    Ok(Forward { y: Tensor::new(s.to_vec(), gx)?, macs: (b * c * hw) as u64 })
}

/// Scale/shift gradients from the stored normalized input. The scale entry of
/// channel `c` is `bw[c] * fw[c] * dense(c)`; the shift entry is `bw[c] * dense(c)`.
pub fn group_norm_weight_grad_masked(stored: &StoredInput, gy: &Tensor, mask: &ChannelMask) -> Result<WeightGrad> {
    let c = mask.fw.len();
    check_mask(mask, c, c)?;
    check_store(stored, mask)?;
    let s = gy.shape();
    if s.len() < 2 || s[1] != c || s[0] != stored.batch || gy.len() != stored.batch * c * stored.hw {
        return Err(shape_err!("group_norm gy {:?} for stored batch {}", s, stored.batch));
    }
    let (bsz, hw, nnz) = (stored.batch, stored.hw, stored.channels.len());
    let gd = gy.data();
    let mut gs = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut macs = 0u64;
    for ch in 0..c {
        if mask.bw[ch] == 0.0 {
            continue;
        }
        gb[ch] = mask.bw[ch] * (0..bsz).map(|b| gd[(b * c + ch) * hw..][..hw].iter().sum::<f64>()).sum::<f64>();
    }
    for (ci, &ch) in stored.channels.iter().enumerate() {
        if mask.bw[ch] == 0.0 {
            continue;
        }
        let mut dot = 0.0;
        for b in 0..bsz {
            let g = &gd[(b * c + ch) * hw..][..hw];
            let x = &stored.data[(b * nnz + ci) * hw..][..hw];
            dot += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        gs[ch] = mask.bw[ch] * dot;
        macs += (bsz * hw) as u64;
    }
    Ok(WeightGrad { w: Tensor::new(vec![c], gs)?, b: Tensor::new(vec![c], gb)?, macs })
}

/// ReLU output and its derivative flags.
pub fn relu_forward(x: &Tensor) -> (Tensor, Vec<bool>) {
    let bits = x.data().iter().map(|v| *v > 0.0).collect();
    (x.map(|v| if v > 0.0 { v } else { 0.0 }), bits)
}

pub fn relu_backward(bits: &[bool], gy: &Tensor) -> Tensor {
    let d = gy.data().iter().zip(bits).map(|(g, b)| if *b { *g } else { 0.0 }).collect();
    Tensor::new(gy.shape().to_vec(), d).expect("same shape")
}

pub fn max_pool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("max_pool expects [B, C, H, W], got {:?}", s));
    }
    let g = PoolGeom { batch: s[0], channels: s[1], height: s[2], width: s[3], window, stride };
    let (y, idx) = kernels::max_pool(x.data(), &g);
    Ok((Tensor::new(vec![s[0], s[1], g.out_h(), g.out_w()], y)?, idx))
}

pub fn max_pool_backward(idx: &[usize], gy: &Tensor, x_shape: &[usize]) -> Result<Tensor> {
    let n: usize = x_shape.iter().product();
    Tensor::new(x_shape.to_vec(), kernels::pool_scatter(gy.data(), idx, n))
}
