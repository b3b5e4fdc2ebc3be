use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv::window_out;

/// Backbone family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// ImageNet ResNet-50, post-activation bottlenecks, stride on the first 1×1.
    ResNet50,
    ResNet101,
    /// Pre-activation CIFAR ResNet: basic blocks at depth `6n + 2`, bottleneck
    /// blocks at depth `9n + 2` from 164 upwards.
    CifarResNet {
        depth: usize,
    },
    /// Wide ResNet `depth`-`widen`, pre-activation basic blocks.
    Wrn {
        depth: usize,
        widen: usize,
    },
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::ResNet50 => f.write_str("resnet50"),
            Family::ResNet101 => f.write_str("resnet101"),
            Family::CifarResNet { depth } => write!(f, "cifar-resnet-{depth}"),
            Family::Wrn { depth, widen } => write!(f, "wrn-{depth}-{widen}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown architecture family `{s}`"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let family = match s {
            "resnet50" => Family::ResNet50,
            "resnet101" => Family::ResNet101,
            _ => {
                if let Some(d) = s.strip_prefix("cifar-resnet-") {
                    Family::CifarResNet { depth: num(d)? }
                } else if let Some(rest) = s.strip_prefix("wrn-") {
                    let (d, k) = rest.split_once('-').ok_or_else(bad)?;
                    Family::Wrn {
                        depth: num(d)?,
                        widen: num(k)?,
                    }
                } else {
                    return Err(bad());
                }
            }
        };
        family.block_style()?;
        Ok(family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockStyle {
    /// conv1×1(stride) → conv3×3 → conv1×1, BN after each conv, ReLU after the sum.
    Bottleneck,
    /// BN-ReLU before each of two 3×3 convs; stride on the first.
    PreActBasic,
    /// BN-ReLU before conv1×1 → conv3×3(stride) → conv1×1.
    PreActBottleneck,
}

impl BlockStyle {
    pub fn is_pre_activation(self) -> bool {
        !matches!(self, BlockStyle::Bottleneck)
    }
}

impl Family {
    fn block_style(&self) -> Result<BlockStyle> {
        match *self {
            Family::ResNet50 | Family::ResNet101 => Ok(BlockStyle::Bottleneck),
            Family::CifarResNet { depth } if depth >= 164 && (depth - 2) % 9 == 0 => Ok(BlockStyle::PreActBottleneck),
            Family::CifarResNet { depth } if depth >= 8 && (depth - 2) % 6 == 0 => Ok(BlockStyle::PreActBasic),
            Family::CifarResNet { depth } => Err(Error::config(format!(
                "CIFAR ResNet depth {depth} is neither 6n+2 nor (from 164) 9n+2"
            ))),
            Family::Wrn { depth, widen } if depth >= 10 && (depth - 4) % 6 == 0 && widen >= 1 => {
                Ok(BlockStyle::PreActBasic)
            }
            Family::Wrn { depth, widen } => Err(Error::config(format!(
                "wide ResNet needs depth 6n+4 and widen >= 1, got {depth}-{widen}"
            ))),
        }
    }

    fn default_input(&self) -> [usize; 3] {
        match self {
            Family::ResNet50 | Family::ResNet101 => [3, 224, 224],
            _ => [3, 32, 32],
        }
    }

    fn default_classes(&self) -> usize {
        match self {
            Family::ResNet50 | Family::ResNet101 => 1000,
            _ => 10,
        }
    }
}

/// A concrete network description: family, input geometry, class count and
/// an optional uniform channel-width divisor for reduced desk variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawArch", into = "RawArch")]
pub struct ArchSpec {
    pub family: Family,
    /// (channels, height, width)
    pub input: [usize; 3],
    pub classes: usize,
    pub width_divisor: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    family: String,
    input: Option<[usize; 3]>,
    classes: Option<usize>,
    width_divisor: Option<usize>,
}

impl TryFrom<RawArch> for ArchSpec {
    type Error = Error;

    fn try_from(raw: RawArch) -> Result<Self> {
        let mut spec = ArchSpec::preset(&raw.family)?;
        if let Some(i) = raw.input {
            spec.input = i;
        }
        if let Some(c) = raw.classes {
            spec.classes = c;
        }
        if let Some(d) = raw.width_divisor {
            spec.width_divisor = d;
        }
        spec.plan()?;
        Ok(spec)
    }
}

impl From<ArchSpec> for RawArch {
    fn from(a: ArchSpec) -> Self {
        RawArch {
            family: a.family.to_string(),
            input: Some(a.input),
            classes: Some(a.classes),
            width_divisor: Some(a.width_divisor),
        }
    }
}

impl ArchSpec {
    pub fn new(family: Family) -> Self {
        ArchSpec {
            input: family.default_input(),
            classes: family.default_classes(),
            width_divisor: 1,
            family,
        }
    }

    /// A family name, or `resnet50-narrow`: ResNet-50 at a quarter of the
    /// widths on 32×32 inputs with 10 classes (a smoke-test model).
    pub fn preset(name: &str) -> Result<Self> {
        if name == "resnet50-narrow" {
            return Ok(ArchSpec {
                family: Family::ResNet50,
                input: [3, 32, 32],
                classes: 10,
                width_divisor: 4,
            });
        }
        Ok(ArchSpec::new(name.parse()?))
    }

    pub fn style(&self) -> BlockStyle {
        self.family.block_style().expect("validated at construction")
    }

    /// Stage indices in naming order (`conv2` onwards).
    pub fn stage_indices(&self) -> Vec<usize> {
        match self.family {
            Family::ResNet50 | Family::ResNet101 => vec![2, 3, 4, 5],
            _ => vec![2, 3, 4],
        }
    }

    fn div(&self, width: usize) -> Result<usize> {
        if self.width_divisor == 0 || !width.is_multiple_of(self.width_divisor) {
            return Err(Error::config(format!(
                "width divisor {} does not divide channel width {width}",
                self.width_divisor
            )));
        }
        Ok(width / self.width_divisor)
    }

    /// Resolves the full layer geometry, failing on impossible inputs.
    pub fn plan(&self) -> Result<Plan> {
        let style = self.family.block_style()?;
        let [cin, h, w] = self.input;
        if cin == 0 || self.classes == 0 {
            return Err(Error::config("input channels and class count must be positive"));
        }
        // (blocks, bottleneck mid width, output width) per stage.
        let stages: Vec<(usize, usize, usize)> = match self.family {
            Family::ResNet50 | Family::ResNet101 => {
                let counts: [usize; 4] = if self.family == Family::ResNet50 {
                    [3, 4, 6, 3]
                } else {
                    [3, 4, 23, 3]
                };
                counts
                    .iter()
                    .zip([64, 128, 256, 512])
                    .map(|(&n, m)| (n, m, 4 * m))
                    .collect()
            }
            Family::CifarResNet { depth } => match style {
                BlockStyle::PreActBottleneck => {
                    let n = (depth - 2) / 9;
                    [16, 32, 64].iter().map(|&m| (n, m, 4 * m)).collect()
                }
                _ => {
                    let n = (depth - 2) / 6;
                    [16, 32, 64].iter().map(|&m| (n, m, m)).collect()
                }
            },
            Family::Wrn { depth, widen } => {
                let n = (depth - 4) / 6;
                [16, 32, 64].iter().map(|&m| (n, m * widen, m * widen)).collect()
            }
        };

        let stem = match style {
            BlockStyle::Bottleneck => {
                let conv = (out_hw((h, w), 7, 2, 3)?, 7, 2, 3);
                let pooled = out_hw(conv.0, 3, 2, 1)?;
                StemPlan {
                    cin,
                    cout: self.div(64)?,
                    kernel: 7,
                    stride: 2,
                    pad: 3,
                    conv_hw: conv.0,
                    pool: Some((3, 2, 1)),
                    out_hw: pooled,
                    bn: true,
                }
            }
            _ => StemPlan {
                cin,
                cout: self.div(16)?,
                kernel: 3,
                stride: 1,
                pad: 1,
                conv_hw: (h, w),
                pool: None,
                out_hw: (h, w),
                bn: false,
            },
        };

        let mut blocks = Vec::new();
        let mut c = stem.cout;
        let mut hw = stem.out_hw;
        for (si, &(n, mid, out)) in stages.iter().enumerate() {
            let stage = si + 2;
            let (mid, out) = (self.div(mid)?, self.div(out)?);
            for b in 0..n {
                let stride = if b == 0 && si > 0 { 2 } else { 1 };
                let next = out_hw(hw, 3, stride, 1)?;
                blocks.push(BlockPlan {
                    name: format!("conv{stage}-{}", b + 1),
                    stage,
                    style,
                    cin: c,
                    mid,
                    cout: out,
                    stride,
                    in_hw: hw,
                    out_hw: next,
                });
                c = out;
                hw = next;
            }
        }
        Ok(Plan {
            style,
            stem,
            blocks,
            head_channels: c,
            final_bn: style.is_pre_activation(),
            classes: self.classes,
        })
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family)?;
        if self.width_divisor != 1 {
            write!(f, "/{}", self.width_divisor)?;
        }
        write!(f, " @{}x{}x{}", self.input[0], self.input[1], self.input[2])
    }
}

fn out_hw((h, w): (usize, usize), k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    match (window_out(h, k, stride, pad), window_out(w, k, stride, pad)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::config(format!("input {h}x{w} too small for the network"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemPlan {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub conv_hw: (usize, usize),
    /// Max-pool (kernel, stride, pad).
    pub pool: Option<(usize, usize, usize)>,
    pub out_hw: (usize, usize),
    pub bn: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub name: String,
    pub stage: usize,
    pub style: BlockStyle,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// One convolution of a residual branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl BlockPlan {
    /// Branch convolutions in order (`conv1`, `conv2`, ...).
    pub fn convs(&self) -> Vec<ConvPlan> {
        let c = |cin, cout, kernel, stride| ConvPlan {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        };
        match self.style {
            BlockStyle::Bottleneck => vec![
                c(self.cin, self.mid, 1, self.stride),
                c(self.mid, self.mid, 3, 1),
                c(self.mid, self.cout, 1, 1),
            ],
            BlockStyle::PreActBasic => vec![c(self.cin, self.cout, 3, self.stride), c(self.cout, self.cout, 3, 1)],
            BlockStyle::PreActBottleneck => vec![
                c(self.cin, self.mid, 1, 1),
                c(self.mid, self.mid, 3, self.stride),
                c(self.mid, self.cout, 1, 1),
            ],
        }
    }

    /// Channel count of each branch batch-norm (`bn1`, `bn2`, ...). After
    /// each conv for post-activation blocks, before each conv otherwise.
    pub fn bn_channels(&self) -> Vec<usize> {
        let convs = self.convs();
        if self.style.is_pre_activation() {
            convs.iter().map(|c| c.cin).collect()
        } else {
            convs.iter().map(|c| c.cout).collect()
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.cin != self.cout
    }

    /// Projection shortcuts carry a batch-norm only in post-activation blocks.
    pub fn projection_has_bn(&self) -> bool {
        !self.style.is_pre_activation()
    }

    /// Spatial size fed to each branch conv, in order.
    pub fn conv_inputs(&self) -> Vec<(usize, usize)> {
        let mut hw = self.in_hw;
        self.convs()
            .iter()
            .map(|c| {
                let here = hw;
                hw = out_hw(hw, c.kernel, c.stride, c.pad).expect("validated plan");
                here
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub style: BlockStyle,
    pub stem: StemPlan,
    pub blocks: Vec<BlockPlan>,
    pub head_channels: usize,
    /// Pre-activation nets end with BN-ReLU before pooling.
    pub final_bn: bool,
    pub classes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_stage_plan() {
        let p = ArchSpec::new(Family::ResNet50).plan().unwrap();
        let count = |s| p.blocks.iter().filter(|b| b.stage == s).count();
        assert_eq!([count(2), count(3), count(4), count(5)], [3, 4, 6, 3]);
        for (s, c, hw) in [(2, 256, 56), (3, 512, 28), (4, 1024, 14), (5, 2048, 7)] {
            let last = p.blocks.iter().rfind(|b| b.stage == s).unwrap();
            assert_eq!((last.cout, last.out_hw), (c, (hw, hw)));
        }
        let convs = 1 + p
            .blocks
            .iter()
            .map(|b| 3 + b.needs_projection() as usize)
            .sum::<usize>();
        assert_eq!(convs, 53);
    }

    #[test]
    fn resnet101_blocks() {
        let p = ArchSpec::new(Family::ResNet101).plan().unwrap();
        assert_eq!(p.blocks.iter().filter(|b| b.stage == 4).count(), 23);
    }

    #[test]
    fn cifar_depths() {
        let p = ArchSpec::preset("cifar-resnet-110").unwrap().plan().unwrap();
        assert_eq!(p.style, BlockStyle::PreActBasic);
        assert_eq!(p.blocks.len(), 54);
        assert_eq!(p.head_channels, 64);
        let p = ArchSpec::preset("cifar-resnet-164").unwrap().plan().unwrap();
        assert_eq!(p.style, BlockStyle::PreActBottleneck);
        assert_eq!(p.blocks.len(), 54);
        assert_eq!(p.head_channels, 256);
        let p = ArchSpec::preset("wrn-16-8").unwrap().plan().unwrap();
        assert_eq!(p.blocks.len(), 6);
        assert_eq!(p.head_channels, 512);
        assert_eq!(p.blocks.last().unwrap().out_hw, (8, 8));
    }

    #[test]
    fn rejects_bad_depths() {
        assert!("cifar-resnet-111".parse::<Family>().is_err());
        assert!("wrn-15-8".parse::<Family>().is_err());
        assert!("vgg16".parse::<Family>().is_err());
    }

    #[test]
    fn narrow_preset_divides_widths() {
        let p = ArchSpec::preset("resnet50-narrow").unwrap().plan().unwrap();
        assert_eq!(p.stem.cout, 16);
        assert_eq!(p.head_channels, 512);
        assert_eq!(p.blocks.last().unwrap().out_hw, (1, 1));
    }

    #[test]
    fn toml_round_trip() {
        let a: ArchSpec = toml::from_str("family = \"cifar-resnet-20\"\nwidth_divisor = 2").unwrap();
        assert_eq!(a.input, [3, 32, 32]);
        assert_eq!(a.classes, 10);
        let back: ArchSpec = toml::from_str(&toml::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, back);
        assert!(toml::from_str::<ArchSpec>("family = \"resnet50\"\nbogus = 1").is_err());
        assert!(toml::from_str::<ArchSpec>("family = \"cifar-resnet-20\"\nwidth_divisor = 3").is_err());
    }
}
