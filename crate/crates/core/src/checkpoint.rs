//! Binary plan checkpoints. All integers are little-endian `u32`, reals are
//! little-endian `f64`, tensors are row-major.
//!
//! Layout: magic, version, spec text, step-size matrix, clip ratios,
//! attention (one flag byte per trainable layer, then a tensor list), weights
//! (a tensor list of weight and bias per trainable layer).

use std::path::Path;

use crate::attention::{AttentionModule, LayerAttention};
use crate::error::{Error, Result};
use crate::plan::AdaptPlan;
use crate::spec::NetworkSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"PMETA1\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensors(&mut self, ts: &[&Tensor]) {
        self.u32(ts.len());
        for t in ts {
            self.u32(t.shape().len());
            for &d in t.shape() {
                self.u32(d);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..n {
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l * 8 <= self.buf.len() - self.pos);
            let len = len.ok_or_else(|| Error::Format(format!("tensor shape {shape:?} exceeds file")))?;
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            out.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        Ok(out)
    }
}

pub fn to_bytes(plan: &AdaptPlan) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    let text = plan.spec.to_text();
    w.u32(text.len());
    w.0.extend_from_slice(text.as_bytes());
    w.u32(plan.alpha.len());
    w.u32(plan.inner_steps());
    for &a in plan.alpha.iter().flatten() {
        w.f64(a);
    }
    w.f64(plan.rho_fw);
    w.f64(plan.rho_bw);
    w.u32(plan.attention.len());
    let mut att = Vec::new();
    for a in &plan.attention {
        w.0.push(a.is_some() as u8);
        if let Some(a) = a {
            att.extend(a.fw.tensors());
            att.extend(a.bw.tensors());
        }
    }
    w.tensors(&att);
    let weights: Vec<&Tensor> = plan.params.iter().flatten().collect();
    w.tensors(&weights);
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<AdaptPlan> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a plan checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let text = std::str::from_utf8(r.bytes(n)?).map_err(|_| Error::Format("spec text is not UTF-8".into()))?;
    let spec: NetworkSpec = text.parse()?;
    let (l, k) = (r.u32()?, r.u32()?);
    if l.saturating_mul(k).saturating_mul(8) > buf.len() {
        return Err(Error::Format(format!("step-size matrix {l}x{k} exceeds file")));
    }
    let alpha = (0..l).map(|_| (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    let (rho_fw, rho_bw) = (r.f64()?, r.f64()?);
    let slots = r.u32()?;
    let flags = r.bytes(slots)?.to_vec();
    let mut att = r.tensors()?.into_iter();
    let mut attention = Vec::with_capacity(slots);
    for f in flags {
        attention.push(match f {
            0 => None,
            1 => {
                let mut module = || -> Result<AttentionModule> {
                    let mut next = || att.next().ok_or_else(|| Error::Format("attention tensor list too short".into()));
                    AttentionModule::from_tensors([next()?, next()?, next()?, next()?])
                };
                Some(LayerAttention { fw: module()?, bw: module()? })
            }
            other => return Err(Error::Format(format!("attention flag {other}"))),
        });
    }
    if att.next().is_some() {
        return Err(Error::Format("unused attention tensors".into()));
    }
    let weights = r.tensors()?;
    if weights.len() % 2 != 0 {
        return Err(Error::Format("weight list must hold weight and bias pairs".into()));
    }
    let mut it = weights.into_iter();
    let mut params = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        params.push([w, b]);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let plan = AdaptPlan { spec, params, alpha, attention, rho_fw, rho_bw };
    plan.validate()?;
    Ok(plan)
}

pub fn save(plan: &AdaptPlan, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(plan)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<AdaptPlan> {
    let buf = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}
