//! Forward-pass cost model for CNNs over `channels x F x T` inputs.
//!
//! Counts are exact integers. Under [`Convention::Flops`] one multiply-add is
//! two operations; under [`Convention::MultiplyAdds`] it is one. Elementwise
//! layers (activation, pooling) cost one operation per element under both.
//!
//! | layer      | multiply-adds                      | other ops          |
//! |------------|------------------------------------|--------------------|
//! | conv2d     | `kh kw cin cout hout wout`         |                    |
//! | depthwise  | `kh kw cin hout wout`              |                    |
//! | linear     | `nin nout`                         |                    |
//! | batchnorm  | one per element                    |                    |
//! | activation |                                    | one per element    |
//! | pool2d     |                                    | one per input elem |
//! | globalpool |                                    | one per input elem |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::simpf::CompressionSpec;
use crate::{Error, Result};

pub const CNN10_ARCH: &str = include_str!("../archs/cnn10.arch");
pub const CNN14_ARCH: &str = include_str!("../archs/cnn14.arch");
pub const TINY_CNN_ARCH: &str = include_str!("../archs/tinycnn.arch");

/// Looks up one of the bundled architectures by name.
pub fn builtin_arch(name: &str) -> Option<ArchSpec> {
    let text = match name {
        "cnn10" => CNN10_ARCH,
        "cnn14" => CNN14_ARCH,
        "tinycnn" => TINY_CNN_ARCH,
        _ => return None,
    };
    Some(text.parse().expect("bundled arch files parse"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// A multiply-accumulate counts as two floating-point operations.
    #[default]
    Flops,
    /// A multiply-accumulate counts as one operation.
    MultiplyAdds,
}

impl Convention {
    fn macs(self, n: u64) -> u64 {
        match self {
            Convention::Flops => 2 * n,
            Convention::MultiplyAdds => n,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Convention::Flops => {
                "FLOPs: multiply-accumulate = 2 ops; batchnorm = 2 ops/element; \
                 activation and pooling = 1 op per element; biases folded into batchnorm/activation"
            }
            Convention::MultiplyAdds => {
                "multiply-adds: multiply-accumulate = 1 op; batchnorm = 1 op/element; \
                 activation and pooling = 1 op per element; biases folded into batchnorm/activation"
            }
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Flops => "flops",
            Convention::MultiplyAdds => "madds",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" => Ok(Convention::Flops),
            "madds" | "macs" | "multiply-adds" => Ok(Convention::MultiplyAdds),
            other => Err(Error::Config(format!(
                "unknown counting convention `{other}` (expected flops or madds)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Linear,
    BatchNorm,
    Activation,
    Pool2d,
    GlobalPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "dwconv2d",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Activation => "activation",
            LayerKind::Pool2d => "pool2d",
            LayerKind::GlobalPool => "globalpool",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "conv2d" | "conv" => LayerKind::Conv2d,
            "dwconv2d" | "depthwiseconv2d" | "depthwise" => LayerKind::DepthwiseConv2d,
            "linear" | "fc" => LayerKind::Linear,
            "batchnorm" | "bn" => LayerKind::BatchNorm,
            "activation" | "relu" => LayerKind::Activation,
            "pool2d" | "maxpool" | "avgpool" => LayerKind::Pool2d,
            "globalpool" => LayerKind::GlobalPool,
            other => return Err(Error::Config(format!("unknown layer kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side.
    #[default]
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
            self.out_channels,
            self.stride.0,
            self.stride.1,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("{} layer has a zero dimension", self.kind.name())));
        }
        let same_channels = matches!(
            self.kind,
            LayerKind::DepthwiseConv2d
                | LayerKind::BatchNorm
                | LayerKind::Activation
                | LayerKind::Pool2d
                | LayerKind::GlobalPool
        );
        if same_channels && self.in_channels != self.out_channels {
            return Err(Error::Config(format!(
                "{} layer must keep its channel count ({} -> {})",
                self.kind.name(),
                self.in_channels,
                self.out_channels
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.kind.name(),
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
            self.out_channels,
            self.stride.0,
            self.stride.1
        )?;
        if self.padding == Padding::Valid {
            f.write_str(" valid")?;
        }
        Ok(())
    }
}

/// Activation tensor shape: `channels x height (mel bins) x width (frames)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn elements(&self) -> u64 {
        (self.channels * self.height * self.width) as u64
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    let pad = match padding {
        Padding::Same => (kernel - 1) / 2,
        Padding::Valid => 0,
    };
    let span = input + 2 * pad;
    (span >= kernel).then(|| (span - kernel) / stride + 1)
}

/// Cost of one layer and the geometry it produces.
pub fn layer_flops(layer: &LayerSpec, input: Geometry, convention: Convention) -> Result<(u64, Geometry)> {
    layer.validate()?;
    if input.elements() == 0 {
        return Err(Error::Shape(format!("degenerate input geometry {input}")));
    }
    let shape_err = |msg: String| Error::Shape(format!("{}: {msg}", layer.kind.name()));
    let check_channels = || {
        if input.channels == layer.in_channels {
            Ok(())
        } else {
            Err(shape_err(format!(
                "expects {} input channels, got {}",
                layer.in_channels, input.channels
            )))
        }
    };
    let spatial = |padding: Padding| -> Result<(usize, usize)> {
        let h = out_len(input.height, layer.kernel.0, layer.stride.0, padding);
        let w = out_len(input.width, layer.kernel.1, layer.stride.1, padding);
        match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(shape_err(format!(
                "kernel {}x{} does not fit input {input}",
                layer.kernel.0, layer.kernel.1
            ))),
        }
    };
    let kernel_area = (layer.kernel.0 * layer.kernel.1) as u64;

    match layer.kind {
        LayerKind::Conv2d => {
            check_channels()?;
            let (h, w) = spatial(layer.padding)?;
            let out = Geometry { channels: layer.out_channels, height: h, width: w };
            let macs = kernel_area * layer.in_channels as u64 * out.elements();
            Ok((convention.macs(macs), out))
        }
        LayerKind::DepthwiseConv2d => {
            check_channels()?;
            let (h, w) = spatial(layer.padding)?;
            let out = Geometry { channels: layer.out_channels, height: h, width: w };
            Ok((convention.macs(kernel_area * out.elements()), out))
        }
        LayerKind::Linear => {
            let n_in = input.channels * input.height * input.width;
            if n_in != layer.in_channels {
                return Err(shape_err(format!(
                    "expects {} inputs, got {input} = {n_in}",
                    layer.in_channels
                )));
            }
            let out = Geometry { channels: layer.out_channels, height: 1, width: 1 };
            Ok((convention.macs((layer.in_channels * layer.out_channels) as u64), out))
        }
        LayerKind::BatchNorm => {
            check_channels()?;
            Ok((convention.macs(input.elements()), input))
        }
        LayerKind::Activation => {
            check_channels()?;
            Ok((input.elements(), input))
        }
        LayerKind::Pool2d => {
            check_channels()?;
            let (h, w) = spatial(Padding::Valid)?;
            Ok((input.elements(), Geometry { channels: input.channels, height: h, width: w }))
        }
        LayerKind::GlobalPool => {
            check_channels()?;
            Ok((input.elements(), Geometry { channels: input.channels, height: 1, width: 1 }))
        }
    }
}

/// A network as an ordered list of layers over a `channels x F x T` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub mel_bins: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Checks layer dimensions and that channel counts chain. A linear layer
    /// directly after a global pool or another linear layer must consume the
    /// current channel count; elsewhere it depends on spatial size and is
    /// checked by [`model_flops`].
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.mel_bins == 0 {
            return Err(Error::Config(format!("arch `{}` has an empty input", self.name)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config(format!("arch `{}` has no layers", self.name)));
        }
        let mut channels = self.input_channels;
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let chained = layer.kind != LayerKind::Linear || flat;
            if chained && layer.in_channels != channels {
                return Err(Error::Config(format!(
                    "arch `{}` layer {i} ({}) expects {} channels but receives {channels}",
                    self.name,
                    layer.kind.name(),
                    layer.in_channels
                )));
            }
            channels = layer.out_channels;
            flat = matches!(layer.kind, LayerKind::GlobalPool | LayerKind::Linear)
                || (flat && matches!(layer.kind, LayerKind::Activation | LayerKind::BatchNorm));
        }
        Ok(())
    }

    pub fn input_geometry(&self, frames: usize) -> Geometry {
        Geometry {
            channels: self.input_channels,
            height: self.mel_bins,
            width: frames,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    /// Line-oriented format: `kind k_h k_w c_in c_out stride_h stride_w
    /// [same|valid]` per layer, plus `name <text>` and
    /// `input <channels> <mel_bins>` directives. `#` starts a comment.
    fn from_str(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut input = (1, 64);
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Config(format!("arch line {}: {msg}: `{}`", lineno + 1, raw.trim()));
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let number = |t: &str| t.parse::<usize>().map_err(|_| err("expected a non-negative integer"));
            match tokens[0] {
                "name" => name = tokens[1..].join(" "),
                "input" => {
                    if tokens.len() != 3 {
                        return Err(err("expected `input <channels> <mel_bins>`"));
                    }
                    input = (number(tokens[1])?, number(tokens[2])?);
                }
                kind => {
                    if !(tokens.len() == 7 || tokens.len() == 8) {
                        return Err(err("expected `kind k_h k_w c_in c_out stride_h stride_w [padding]`"));
                    }
                    let kind: LayerKind = kind.parse().map_err(|_| err("unknown layer kind"))?;
                    let padding = match tokens.get(7).copied() {
                        None | Some("same") => Padding::Same,
                        Some("valid") => Padding::Valid,
                        Some(_) => return Err(err("padding must be `same` or `valid`")),
                    };
                    layers.push(LayerSpec {
                        kind,
                        kernel: (number(tokens[1])?, number(tokens[2])?),
                        in_channels: number(tokens[3])?,
                        out_channels: number(tokens[4])?,
                        stride: (number(tokens[5])?, number(tokens[6])?),
                        padding,
                    });
                }
            }
        }
        let arch = ArchSpec {
            name,
            input_channels: input.0,
            mel_bins: input.1,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name {}", self.name)?;
        writeln!(f, "input {} {}", self.input_channels, self.mel_bins)?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    pub flops: u64,
    pub output: Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub arch: String,
    pub input: Geometry,
    pub convention: Convention,
    pub layers: Vec<LayerCost>,
    pub total: u64,
}

/// Folds [`layer_flops`] over the arch for an input of `frames` time frames.
pub fn model_flops(arch: &ArchSpec, frames: usize, convention: Convention) -> Result<FlopsReport> {
    arch.validate()?;
    if frames == 0 {
        return Err(Error::Shape("cannot count FLOPs for an input with 0 frames".into()));
    }
    let input = arch.input_geometry(frames);
    let mut geometry = input;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (index, layer) in arch.layers.iter().enumerate() {
        let (flops, output) = layer_flops(layer, geometry, convention)
            .map_err(|e| Error::Shape(format!("layer {index}: {e}")))?;
        layers.push(LayerCost { index, kind: layer.kind, flops, output });
        geometry = output;
    }
    let total = layers.iter().map(|l| l.flops).sum();
    Ok(FlopsReport {
        arch: arch.name.clone(),
        input,
        convention,
        layers,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    /// `baseline` or the compression spec in `method:denominator` form.
    pub label: String,
    pub spec: Option<CompressionSpec>,
    pub frames: usize,
    pub flops: u64,
    /// `flops / baseline flops`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub arch: String,
    pub convention: Convention,
    pub convention_note: String,
    pub rows: Vec<CompareRow>,
}

/// Cost of the arch on the uncompressed input and after each front-end.
pub fn compare_report(
    arch: &ArchSpec,
    frames: usize,
    specs: &[CompressionSpec],
    convention: Convention,
) -> Result<CompareReport> {
    let baseline = model_flops(arch, frames, convention)?.total;
    let mut rows = vec![CompareRow {
        label: "baseline".into(),
        spec: None,
        frames,
        flops: baseline,
        ratio: 1.0,
    }];
    for spec in specs {
        let reduced = spec.factor.checked_output_frames(frames)?;
        let flops = model_flops(arch, reduced, convention)?.total;
        rows.push(CompareRow {
            label: spec.to_string(),
            spec: Some(*spec),
            frames: reduced,
            flops,
            ratio: flops as f64 / baseline as f64,
        });
    }
    Ok(CompareReport {
        arch: arch.name.clone(),
        convention,
        convention_note: convention.describe().to_string(),
        rows,
    })
}

/// `19550000000 -> "19.55G"`.
pub fn human_count(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        n.to_string()
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "arch: {}", self.arch)?;
        writeln!(f, "counting: {}", self.convention_note)?;
        writeln!(f, "{:<14} {:>8} {:>16} {:>10} {:>8}", "front-end", "frames", "count", "", "ratio")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<14} {:>8} {:>16} {:>10} {:>8.4}",
                row.label,
                row.frames,
                row.flops,
                human_count(row.flops),
                row.ratio
            )?;
        }
        Ok(())
    }
}
