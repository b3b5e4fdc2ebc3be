use rand::Rng;

use super::{hidden_width, ExciteKind, Extent, GatherKind, GeUnitConfig};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{Conv2dSpec, PoolGeom};
use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Window layout of a pooling gather on an `h × w` plane.
///
/// For `Ratio(e)`: kernel `2e − 1`, stride `e`, output `⌈h/e⌉ × ⌈w/e⌉`.
/// Output `u` (1-based) is centred on input `e·u` (1-based), so the first
/// window starts on the first row and no leading padding is needed; the
/// trailing edge is zero-padded up to `e + (e·⌈h/e⌉ − h) − 1` positions.
pub fn gather_geometry(h: usize, w: usize, extent: Extent) -> Result<PoolGeom> {
    extent.validate()?;
    match extent {
        Extent::Global => Ok(PoolGeom::global(h, w)),
        Extent::Ratio(e) => {
            if h < e || w < e {
                return Err(Error::config(format!(
                    "spatial size {h}x{w} is smaller than extent ratio {e}"
                )));
            }
            Ok(PoolGeom {
                kh: 2 * e - 1,
                kw: 2 * e - 1,
                stride: e,
                pad_top: 0,
                pad_left: 0,
                oh: h.div_ceil(e),
                ow: w.div_ceil(e),
            })
        }
    }
}

/// Parameter-free gather. Average pooling divides by the full window area.
pub fn gather_pool<T: Real>(tape: &mut Tape<T>, x: Var, kind: GatherKind, extent: Extent) -> Result<Var> {
    let s = tape.shape(x);
    let geom = gather_geometry(s.h, s.w, extent)?;
    match kind {
        GatherKind::AvgPool => Ok(tape.avg_pool_with(x, geom)),
        GatherKind::MaxPool => Ok(tape.max_pool_with(x, geom)),
        GatherKind::DepthwiseConv => Err(Error::config("depth-wise gather is not a pooling gather")),
    }
}

/// Learned gather: `log₂ e` stages of stride-2 depth-wise 3×3 conv + BN with
/// ReLU between stages, or one plane-sized depth-wise conv + BN when global.
#[derive(Clone, Debug)]
pub struct DepthwiseGather {
    stages: Vec<(Conv2d, BatchNorm2d)>,
}

impl DepthwiseGather {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        (h, w): (usize, usize),
        extent: Extent,
    ) -> Result<Self> {
        extent.validate()?;
        let plan: Vec<((usize, usize), Conv2dSpec)> = match extent {
            Extent::Global => vec![((h, w), Conv2dSpec::new(1, 0, channels))],
            Extent::Ratio(e) => (0..e.trailing_zeros())
                .map(|_| ((3, 3), Conv2dSpec::new(2, 1, channels)))
                .collect(),
        };
        let mut stages = Vec::with_capacity(plan.len());
        for (i, (kernel, spec)) in plan.into_iter().enumerate() {
            let conv = Conv2d::new(
                store,
                rng,
                format!("{prefix}.dw{}", i + 1),
                channels,
                channels,
                kernel,
                spec,
                false,
            )?;
            let bn = BatchNorm2d::new(store, format!("{prefix}.bn{}", i + 1), channels)?;
            stages.push((conv, bn));
        }
        Ok(DepthwiseGather { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = ctx.tape.relu(h);
            }
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// `f(x̂) = W₂·relu(W₁·x̂ + b₁) + b₂` with 1×1 convolutions, applied at the
/// gathered resolution.
#[derive(Clone, Debug)]
pub struct ChannelSubnet {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl ChannelSubnet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = hidden_width(channels, reduction);
        let spec = Conv2dSpec::default();
        Ok(ChannelSubnet {
            reduce: Conv2d::new(
                store,
                rng,
                format!("{prefix}.fc1"),
                channels,
                hidden,
                (1, 1),
                spec,
                true,
            )?,
            expand: Conv2d::new(
                store,
                rng,
                format!("{prefix}.fc2"),
                hidden,
                channels,
                (1, 1),
                spec,
                true,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.expand.forward(ctx, h)
    }
}

fn check_excite_shapes<T: Real>(tape: &Tape<T>, x: Var, xhat: Var) -> Result<()> {
    let (xs, gs) = (tape.shape(x), tape.shape(xhat));
    if xs.c != gs.c {
        return Err(Error::Dimension {
            op: "excite",
            axis: "channel",
            expected: xs.c,
            got: gs.c,
        });
    }
    if xs.n != gs.n {
        return Err(Error::Dimension {
            op: "excite",
            axis: "batch",
            expected: xs.n,
            got: gs.n,
        });
    }
    Ok(())
}

/// Sigmoid of the gate logits, resized to the input plane. Nearest-neighbour
/// resizing copies values, so it commutes with the element-wise sigmoid and
/// applying the sigmoid first touches fewer elements.
fn gate_from_logits<T: Real>(tape: &mut Tape<T>, logits: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.sigmoid(logits);
    tape.nearest_interpolate(s, h, w)
}

/// `y = x ⊙ σ(interp(x̂))`.
pub fn excite_direct<T: Real>(tape: &mut Tape<T>, x: Var, xhat: Var) -> Result<Var> {
    check_excite_shapes(tape, x, xhat)?;
    let s = tape.shape(x);
    let gate = gate_from_logits(tape, xhat, s.h, s.w)?;
    tape.hadamard(x, gate)
}

/// `y = x ⊙ σ(interp(f(x̂)))`.
pub fn excite_subnet<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, xhat: Var, subnet: &ChannelSubnet) -> Result<Var> {
    check_excite_shapes(&ctx.tape, x, xhat)?;
    let s = ctx.tape.shape(x);
    let logits = subnet.forward(ctx, xhat)?;
    let gate = gate_from_logits(&mut ctx.tape, logits, s.h, s.w)?;
    ctx.tape.hadamard(x, gate)
}

/// Test hook on the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateHook {
    #[default]
    None,
    /// Replace the gate by exactly 1, as if its logits were +∞.
    Saturate,
}

#[derive(Clone, Copy, Debug)]
pub struct GeOutput {
    pub out: Var,
    /// Gate applied to the input, at input resolution.
    pub gate: Var,
}

#[derive(Clone, Debug)]
enum Gather {
    Pool(GatherKind),
    Depthwise(DepthwiseGather),
}

/// One gather-excite unit with its parameters registered under `name`.
#[derive(Clone, Debug)]
pub struct GeUnit {
    pub name: String,
    pub cfg: GeUnitConfig,
    gather: Gather,
    subnet: Option<ChannelSubnet>,
}

impl GeUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: impl Into<String>,
        cfg: GeUnitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let gather = match cfg.gather {
            GatherKind::DepthwiseConv => Gather::Depthwise(DepthwiseGather::new(
                store,
                rng,
                &format!("{name}.gather"),
                cfg.channels,
                (cfg.height, cfg.width),
                cfg.extent,
            )?),
            kind => Gather::Pool(kind),
        };
        let subnet = match cfg.excite {
            ExciteKind::Direct => None,
            ExciteKind::ChannelSubnet { reduction } => Some(ChannelSubnet::new(
                store,
                rng,
                &format!("{name}.excite"),
                cfg.channels,
                reduction,
            )?),
        };
        Ok(GeUnit {
            name,
            cfg,
            gather,
            subnet,
        })
    }

    pub fn subnet(&self) -> Option<&ChannelSubnet> {
        self.subnet.as_ref()
    }

    pub fn gather<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.gather {
            Gather::Pool(kind) => gather_pool(&mut ctx.tape, x, *kind, self.cfg.extent),
            Gather::Depthwise(dw) => dw.forward(ctx, x),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, hook: GateHook) -> Result<GeOutput> {
        let s = ctx.tape.shape(x);
        for (axis, expected, got) in [
            ("channel", self.cfg.channels, s.c),
            ("height", self.cfg.height, s.h),
            ("width", self.cfg.width, s.w),
        ] {
            if expected != got {
                return Err(Error::Dimension {
                    op: "ge_unit",
                    axis,
                    expected,
                    got,
                });
            }
        }
        let gate = match hook {
            GateHook::Saturate => ctx.tape.constant(Tensor::ones(s)),
            GateHook::None => {
                let xhat = self.gather(ctx, x)?;
                let logits = match &self.subnet {
                    Some(subnet) => subnet.forward(ctx, xhat)?,
                    None => xhat,
                };
                gate_from_logits(&mut ctx.tape, logits, s.h, s.w)?
            }
        };
        let out = ctx.tape.hadamard(x, gate)?;
        Ok(GeOutput { out, gate })
    }
}
