//! Network descriptions shared by the training engine and the cost model.
//!
//! Text format, one item per line, `#` starts a comment:
//!
//! ```text
//! input channels=3 height=84 width=84      # or: input features=20
//! conv2d in=3 out=32 kernel=3 stride=1 padding=1
//! group_norm channels=32 groups=4
//! relu
//! max_pool window=2 stride=2
//! fully_connected in=800 out=5
//! ```
//!
//! A fully-connected layer after a spatial tensor flattens it implicitly.
//! Two further kinds exist for cost modelling only: `resnet_block in=.. out=..
//! pool=..` (three 3x3 conv + group-norm stages with a 1x1 conv + group-norm
//! shortcut, residual add, ReLU, then max-pool) and `global_avg_pool`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Per-sample activation shape: channels by height by width.
/// Flat vectors use `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub spatial: bool,
}

impl Shape {
    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w, spatial: true }
    }

    pub fn flat(c: usize) -> Self {
        Shape { c, h: 1, w: 1, spatial: false }
    }

    /// Words per sample.
    pub fn words(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Per-sample dimensions as used in tensors (`[C, H, W]` or `[C]`).
    pub fn dims(&self) -> Vec<usize> {
        if self.spatial {
            vec![self.c, self.h, self.w]
        } else {
            vec![self.c]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    FullyConnected { in_features: usize, out_features: usize },
    GroupNorm { channels: usize, groups: usize },
    MaxPool { window: usize, stride: usize },
    Relu,
    ResnetBlock { in_channels: usize, out_channels: usize, pool: usize },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::GroupNorm { .. } => "group_norm",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Relu => "relu",
            LayerSpec::ResnetBlock { .. } => "resnet_block",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } | LayerSpec::GroupNorm { .. })
    }

    pub fn is_cost_only(&self) -> bool {
        matches!(self, LayerSpec::ResnetBlock { .. } | LayerSpec::GlobalAvgPool)
    }

    /// Weight words excluding biases and shifts.
    pub fn weight_words(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel * kernel,
            LayerSpec::FullyConnected { in_features, out_features } => in_features * out_features,
            LayerSpec::GroupNorm { channels, .. } => channels,
            _ => 0,
        }
    }

    /// Shapes of the `[weight, bias]` tensors of a trainable layer.
    pub fn param_shapes(&self) -> Option<[Vec<usize>; 2]> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some([vec![out_channels, in_channels, kernel, kernel], vec![out_channels]])
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                Some([vec![out_features, in_features], vec![out_features]])
            }
            LayerSpec::GroupNorm { channels, .. } => Some([vec![channels], vec![channels]]),
            _ => None,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        let bad = |msg: String| Err(Error::Shape(format!("{}: {msg}", self.kind())));
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if !s.spatial || s.c != in_channels {
                    return bad(format!("expects {in_channels} spatial channels, got {:?}", s));
                }
                if s.h + 2 * padding < kernel || s.w + 2 * padding < kernel {
                    return bad(format!("kernel {kernel} larger than padded input {:?}", s));
                }
                let h = (s.h + 2 * padding - kernel) / stride + 1;
                let w = (s.w + 2 * padding - kernel) / stride + 1;
                Ok(Shape::image(out_channels, h, w))
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                if s.words() != in_features {
                    return bad(format!("expects {in_features} features, got {}", s.words()));
                }
                Ok(Shape::flat(out_features))
            }
            LayerSpec::GroupNorm { channels, .. } => {
                if s.c != channels {
                    return bad(format!("expects {channels} channels, got {}", s.c));
                }
                Ok(s)
            }
            LayerSpec::MaxPool { window, stride } => {
                if !s.spatial || s.h < window || s.w < window {
                    return bad(format!("window {window} does not fit {:?}", s));
                }
                Ok(Shape::image(s.c, (s.h - window) / stride + 1, (s.w - window) / stride + 1))
            }
            LayerSpec::Relu => Ok(s),
            LayerSpec::ResnetBlock { in_channels, out_channels, pool } => {
                if !s.spatial || s.c != in_channels {
                    return bad(format!("expects {in_channels} spatial channels, got {:?}", s));
                }
                if s.h < pool || s.w < pool {
                    return bad(format!("pool {pool} does not fit {:?}", s));
                }
                Ok(Shape::image(out_channels, s.h / pool, s.w / pool))
            }
            LayerSpec::GlobalAvgPool => {
                if !s.spatial {
                    return bad("needs a spatial input".into());
                }
                Ok(Shape::flat(s.c))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let fields: Vec<usize> = match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                vec![in_channels, out_channels, kernel, stride]
            }
            LayerSpec::FullyConnected { in_features, out_features } => vec![in_features, out_features],
            LayerSpec::GroupNorm { channels, groups } => {
                if groups == 0 || channels % groups != 0 {
                    return Err(Error::Invalid(format!("group count {groups} must divide {channels} channels")));
                }
                vec![channels, groups]
            }
            LayerSpec::MaxPool { window, stride } => vec![window, stride],
            LayerSpec::ResnetBlock { in_channels, out_channels, pool } => vec![in_channels, out_channels, pool],
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => vec![],
        };
        if fields.contains(&0) {
            return Err(Error::Invalid(format!("{} dimensions must be positive", self.kind())));
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => write!(
                f,
                "conv2d in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding}"
            ),
            LayerSpec::FullyConnected { in_features, out_features } => {
                write!(f, "fully_connected in={in_features} out={out_features}")
            }
            LayerSpec::GroupNorm { channels, groups } => write!(f, "group_norm channels={channels} groups={groups}"),
            LayerSpec::MaxPool { window, stride } => write!(f, "max_pool window={window} stride={stride}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::ResnetBlock { in_channels, out_channels, pool } => {
                write!(f, "resnet_block in={in_channels} out={out_channels} pool={pool}")
            }
            LayerSpec::GlobalAvgPool => write!(f, "global_avg_pool"),
        }
    }
}

/// An ordered stack of layers over a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { input, layers };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.input.words() == 0 {
            return Err(Error::Invalid("input dimensions must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Invalid("network has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        self.shapes().map(|_| ())
    }

    /// Shapes before the first layer and after every layer (`len = layers + 1`).
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut out = vec![self.input];
        for l in &self.layers {
            let s = l.output_shape(*out.last().expect("nonempty"))?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes().expect("validated").last().expect("nonempty")
    }

    /// Indices (into `layers`) of layers with weights.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_trainable()).collect()
    }

    pub fn is_cost_only(&self) -> bool {
        self.layers.iter().any(|l| l.is_cost_only())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.input.spatial {
            s.push_str(&format!("input channels={} height={} width={}\n", self.input.c, self.input.h, self.input.w));
        } else {
            s.push_str(&format!("input features={}\n", self.input.c));
        }
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    /// Named presets: `4conv`, `resnet12`, `mlp-100-100`, `sinusoid`.
    pub fn preset(name: &str, n_way: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "4conv" => Ok(four_conv(n_way)),
            "resnet12" | "resnet12-cost-only" => Ok(resnet12(n_way)),
            "mlp-100-100" | "mlp" => Ok(mlp(20, &[100, 100], 6)),
            "sinusoid" => Ok(mlp(1, &[40, 40], 1)),
            other => Err(Error::Invalid(format!("unknown preset `{other}`"))),
        }
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut parts = content.split_whitespace();
            let kind = parts.next().expect("nonempty line");
            let mut kv = Vec::new();
            for p in parts {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Error::Parse { line, msg: format!("expected key=value, got `{p}`") })?;
                let v: usize =
                    v.parse().map_err(|_| Error::Parse { line, msg: format!("`{k}` must be a nonnegative integer") })?;
                kv.push((k.to_string(), v, false));
            }
            let mut take = |key: &str, default: Option<usize>| -> Result<usize> {
                for e in kv.iter_mut() {
                    if e.0 == key {
                        e.2 = true;
                        return Ok(e.1);
                    }
                }
                default.ok_or_else(|| Error::Parse { line, msg: format!("missing `{key}`") })
            };
            let item = match kind {
                "input" => {
                    if input.is_some() {
                        return Err(Error::Parse { line, msg: "duplicate input line".into() });
                    }
                    let f = take("features", Some(0))?;
                    input = Some(if f > 0 {
                        Shape::flat(f)
                    } else {
                        Shape::image(take("channels", None)?, take("height", None)?, take("width", None)?)
                    });
                    None
                }
                "conv2d" => Some(LayerSpec::Conv2d {
                    in_channels: take("in", None)?,
                    out_channels: take("out", None)?,
                    kernel: take("kernel", None)?,
                    stride: take("stride", Some(1))?,
                    padding: take("padding", Some(0))?,
                }),
                "fully_connected" => {
                    Some(LayerSpec::FullyConnected { in_features: take("in", None)?, out_features: take("out", None)? })
                }
                "group_norm" => {
                    Some(LayerSpec::GroupNorm { channels: take("channels", None)?, groups: take("groups", None)? })
                }
                "max_pool" => {
                    let window = take("window", None)?;
                    Some(LayerSpec::MaxPool { window, stride: take("stride", Some(window))? })
                }
                "relu" => Some(LayerSpec::Relu),
                "resnet_block" => Some(LayerSpec::ResnetBlock {
                    in_channels: take("in", None)?,
                    out_channels: take("out", None)?,
                    pool: take("pool", Some(2))?,
                }),
                "global_avg_pool" => Some(LayerSpec::GlobalAvgPool),
                other => return Err(Error::Parse { line, msg: format!("unknown layer kind `{other}`") }),
            };
            if let Some(e) = kv.iter().find(|e| !e.2) {
                return Err(Error::Parse { line, msg: format!("unknown key `{}` for {kind}", e.0) });
            }
            if let Some(l) = item {
                l.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                layers.push(l);
            }
        }
        let input = input.ok_or(Error::Parse { line: 0, msg: "missing input line".into() })?;
        NetworkSpec::new(input, layers)
    }
}

/// Four conv blocks of 32 filters on 3x84x84 input, then a linear head.
pub fn four_conv(n_way: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut c = 3;
    for _ in 0..4 {
        layers.push(LayerSpec::Conv2d { in_channels: c, out_channels: 32, kernel: 3, stride: 1, padding: 1 });
        layers.push(LayerSpec::GroupNorm { channels: 32, groups: 4 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        c = 32;
    }
    layers.push(LayerSpec::FullyConnected { in_features: 32 * 5 * 5, out_features: n_way });
    NetworkSpec::new(Shape::image(3, 84, 84), layers).expect("preset is valid")
}

/// Four residual blocks (64, 128, 256, 512) on 3x84x84 input; cost-only.
pub fn resnet12(n_way: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut c = 3;
    for out in [64, 128, 256, 512] {
        layers.push(LayerSpec::ResnetBlock { in_channels: c, out_channels: out, pool: 2 });
        c = out;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::FullyConnected { in_features: 512, out_features: n_way });
    NetworkSpec::new(Shape::image(3, 84, 84), layers).expect("preset is valid")
}

/// Fully-connected ReLU network.
pub fn mlp(input: usize, hidden: &[usize], output: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::FullyConnected { in_features: prev, out_features: h });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::FullyConnected { in_features: prev, out_features: output });
    NetworkSpec::new(Shape::flat(input), layers).expect("preset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_conv_shapes() {
        let s = four_conv(5);
        let shapes = s.shapes().unwrap();
        assert_eq!(shapes[1], Shape::image(32, 84, 84));
        assert_eq!(*shapes.last().unwrap(), Shape::flat(5));
        assert_eq!(s.trainable().len(), 9);
    }

    #[test]
    fn text_roundtrip() {
        for s in [four_conv(5), resnet12(5), mlp(20, &[100, 100], 6)] {
            let back: NetworkSpec = s.to_text().parse().unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = "input features=3\nfully_connected in=3 out=2 bogus=1\n".parse::<NetworkSpec>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = "input features=3\nfully_connected in=4 out=2\n".parse::<NetworkSpec>().unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
        let err = "input channels=8 height=4 width=4\ngroup_norm channels=8 groups=3\n".parse::<NetworkSpec>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let s: NetworkSpec = "# net\n\ninput features=2  # xy\nfully_connected in=2 out=1\n".parse().unwrap();
        assert_eq!(s.layers.len(), 1);
    }
}
