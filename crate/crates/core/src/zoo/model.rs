use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BlockPlan, Plan};
use super::placement::GePlacement;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ge::{GateHook, GeUnit};
use crate::kernels::Conv2dSpec;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear};
use crate::param::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

/// Channel ordering for importance-based pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    Ascending,
    Descending,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::Ascending => "ascending",
            Order::Descending => "descending",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub block: String,
    pub ratio: f64,
    pub order: Order,
}

/// Logits, the captured layer and the captured gate.
pub type Prediction<T> = (Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Instrumentation for one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Probes {
    /// Every GE gate replaced by exactly 1.
    pub saturate_gates: bool,
    /// Record a post-activation layer, named `conv{s}-{b}-relu`.
    pub capture_layer: Option<String>,
    /// Record the gate of block `conv{s}-{b}`.
    pub capture_gate: Option<String>,
    pub prune: Option<PruneSpec>,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub layer: Option<Var>,
    pub gate: Option<Var>,
}

/// Channels zeroed at `ratio`: the first `⌊ratio·C⌋` after sorting by
/// importance in `order`, ties kept in channel order.
pub fn pruned_channels(importance: &[f64], ratio: f64, order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = importance[a].total_cmp(&importance[b]);
        match order {
            Order::Ascending => ord,
            Order::Descending => ord.reverse(),
        }
    });
    // Absorb the rounding in products like 0.7 · 10.
    let k = ((ratio * importance.len() as f64) + 1e-9).floor() as usize;
    idx.truncate(k.min(importance.len()));
    idx
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    pool: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
struct Block {
    plan: BlockPlan,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    shortcut: Option<(Conv2d, Option<BatchNorm2d>)>,
    ge: Option<GeUnit>,
}

/// A residual network with its parameter registry.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    arch: ArchSpec,
    placement: Option<GePlacement>,
    plan: Plan,
    pub store: ParamStore<T>,
    stem: Stem,
    blocks: Vec<Block>,
    final_bn: Option<BatchNorm2d>,
    fc: Linear,
}

impl<T: Real> Model<T> {
    pub fn build(arch: &ArchSpec, placement: Option<&GePlacement>, rng: &mut impl Rng) -> Result<Self> {
        let plan = arch.plan()?;
        if let Some(p) = placement {
            p.validate(arch)?;
        }
        let mut store = ParamStore::new();
        let sp = &plan.stem;
        let stem = Stem {
            conv: Conv2d::new(
                &mut store,
                rng,
                "conv1",
                sp.cin,
                sp.cout,
                (sp.kernel, sp.kernel),
                Conv2dSpec::new(sp.stride, sp.pad, 1),
                false,
            )?,
            bn: if sp.bn {
                Some(BatchNorm2d::new(&mut store, "bn1", sp.cout)?)
            } else {
                None
            },
            pool: sp.pool,
        };

        let mut blocks = Vec::with_capacity(plan.blocks.len());
        for bp in &plan.blocks {
            let name = &bp.name;
            let pre = bp.style.is_pre_activation();
            let bn_ch = bp.bn_channels();
            let mut convs = Vec::new();
            let mut bns = Vec::new();
            for (i, c) in bp.convs().iter().enumerate() {
                let k = i + 1;
                if pre {
                    bns.push(BatchNorm2d::new(&mut store, format!("{name}.bn{k}"), bn_ch[i])?);
                }
                convs.push(Conv2d::new(
                    &mut store,
                    rng,
                    format!("{name}.conv{k}"),
                    c.cin,
                    c.cout,
                    (c.kernel, c.kernel),
                    Conv2dSpec::new(c.stride, c.pad, 1),
                    false,
                )?);
                if !pre {
                    bns.push(BatchNorm2d::new(&mut store, format!("{name}.bn{k}"), bn_ch[i])?);
                }
            }
            let shortcut = if bp.needs_projection() {
                let conv = Conv2d::new(
                    &mut store,
                    rng,
                    format!("{name}.shortcut.conv"),
                    bp.cin,
                    bp.cout,
                    (1, 1),
                    Conv2dSpec::new(bp.stride, 0, 1),
                    false,
                )?;
                let bn = if bp.projection_has_bn() {
                    Some(BatchNorm2d::new(&mut store, format!("{name}.shortcut.bn"), bp.cout)?)
                } else {
                    None
                };
                Some((conv, bn))
            } else {
                None
            };
            let ge = match placement {
                Some(p) if p.covers(bp.stage) => {
                    let cfg = p.template.at(bp.cout, bp.out_hw.0, bp.out_hw.1);
                    Some(GeUnit::new(&mut store, rng, format!("{name}.ge"), cfg)?)
                }
                _ => None,
            };
            blocks.push(Block {
                plan: bp.clone(),
                convs,
                bns,
                shortcut,
                ge,
            });
        }
        let final_bn = if plan.final_bn {
            Some(BatchNorm2d::new(&mut store, "final.bn", plan.head_channels)?)
        } else {
            None
        };
        let fc = Linear::new(&mut store, rng, "fc", plan.head_channels, plan.classes)?;
        Ok(Model {
            arch: arch.clone(),
            placement: placement.cloned(),
            plan,
            store,
            stem,
            blocks,
            final_bn,
            fc,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn placement(&self) -> Option<&GePlacement> {
        self.placement.as_ref()
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.plan.name.as_str()).collect()
    }

    pub fn has_ge(&self, block: &str) -> bool {
        self.blocks.iter().any(|b| b.plan.name == block && b.ge.is_some())
    }

    pub fn ge_unit_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.ge.is_some()).count()
    }

    pub fn ge_unit(&self, block: &str) -> Option<&GeUnit> {
        self.blocks.iter().find(|b| b.plan.name == block)?.ge.as_ref()
    }

    /// Post-activation layers available to `capture_layer`.
    pub fn layer_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| format!("{}-relu", b.plan.name)).collect()
    }

    /// Copies every parameter and buffer whose name and shape also appear in
    /// `other`; returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in self.store.params_mut() {
            if let Some(id) = other.find_param(&p.name) {
                let src = &other.param(id).value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        let names: Vec<String> = self.store.buffers().iter().map(|b| b.name.clone()).collect();
        for name in names {
            if let (Some(dst), Some(src)) = (self.store.find_buffer(&name), other.find_buffer(&name)) {
                let src = other.buffer(src).value.clone();
                if src.shape() == self.store.buffer(dst).value.shape() {
                    self.store.buffer_mut(dst).value = src;
                    copied += 1;
                }
            }
        }
        copied
    }

    fn check_probes(&self, probes: &Probes) -> Result<()> {
        let find = |name: &str| self.blocks.iter().find(|b| b.plan.name == name);
        if let Some(layer) = &probes.capture_layer {
            let block = layer.strip_suffix("-relu").and_then(find);
            if block.is_none() {
                return Err(Error::config(format!("layer `{layer}` not found")));
            }
        }
        if let Some(name) = &probes.capture_gate {
            match find(name) {
                None => return Err(Error::config(format!("block `{name}` not found"))),
                Some(b) if b.ge.is_none() => return Err(Error::config(format!("block `{name}` has no GE unit"))),
                _ => {}
            }
        }
        if let Some(p) = &probes.prune {
            if find(&p.block).is_none() {
                return Err(Error::config(format!("block `{}` not found", p.block)));
            }
            if !(0.0..=1.0).contains(&p.ratio) {
                return Err(Error::config(format!("prune ratio {} outside [0, 1]", p.ratio)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, probes: &Probes) -> Result<Forward> {
        let s = ctx.tape.shape(x);
        let [c, h, w] = self.arch.input;
        for (axis, expected, got) in [("channel", c, s.c), ("height", h, s.h), ("width", w, s.w)] {
            if expected != got {
                return Err(Error::Dimension {
                    op: "model_forward",
                    axis,
                    expected,
                    got,
                });
            }
        }
        self.check_probes(probes)?;

        let mut h = self.stem.conv.forward(ctx, x)?;
        if let Some(bn) = &self.stem.bn {
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        if let Some((k, st, p)) = self.stem.pool {
            h = ctx.tape.max_pool2d(h, k, st, p)?;
        }

        let mut out = Forward {
            logits: h,
            layer: None,
            gate: None,
        };
        let hook = if probes.saturate_gates {
            GateHook::Saturate
        } else {
            GateHook::None
        };
        for block in &self.blocks {
            h = self.block_forward(ctx, block, h, hook, probes, &mut out)?;
        }

        if let Some(bn) = &self.final_bn {
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        let pooled = ctx.tape.global_avg_pool(h);
        out.logits = self.fc.forward(ctx, pooled)?;
        Ok(out)
    }

    fn block_forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        block: &Block,
        x: Var,
        hook: GateHook,
        probes: &Probes,
        out: &mut Forward,
    ) -> Result<Var> {
        let name = block.plan.name.as_str();
        let pre = block.plan.style.is_pre_activation();
        let last = block.convs.len() - 1;
        let (mut r, shortcut_in) = if pre {
            let a = block.bns[0].forward(ctx, x)?;
            let a = ctx.tape.relu(a);
            (a, a)
        } else {
            (x, x)
        };
        for (i, conv) in block.convs.iter().enumerate() {
            if pre {
                if i > 0 {
                    r = block.bns[i].forward(ctx, r)?;
                    r = ctx.tape.relu(r);
                }
                r = conv.forward(ctx, r)?;
            } else {
                r = conv.forward(ctx, r)?;
                r = block.bns[i].forward(ctx, r)?;
                if i < last {
                    r = ctx.tape.relu(r);
                }
            }
        }
        let identity = match &block.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, shortcut_in)?;
                match bn {
                    Some(bn) => bn.forward(ctx, s)?,
                    None => s,
                }
            }
            None => x,
        };

        let mut gate = None;
        if let Some(ge) = &block.ge {
            let g = ge.forward(ctx, r, hook)?;
            r = g.out;
            gate = Some(g.gate);
            if probes.capture_gate.as_deref() == Some(name) {
                out.gate = Some(g.gate);
            }
        }
        if let Some(p) = probes.prune.as_ref().filter(|p| p.block == name) {
            let mask = self.prune_mask(ctx, r, gate, p);
            let m = ctx.tape.constant(mask);
            r = ctx.tape.hadamard(r, m)?;
        }

        let sum = ctx.tape.add(r, identity)?;
        let wants_layer = probes.capture_layer.as_deref().and_then(|l| l.strip_suffix("-relu")) == Some(name);
        if pre {
            if wants_layer {
                out.layer = Some(ctx.tape.relu(sum));
            }
            Ok(sum)
        } else {
            let y = ctx.tape.relu(sum);
            if wants_layer {
                out.layer = Some(y);
            }
            Ok(y)
        }
    }

    /// Per-image channel mask. Importance is the spatial mean of the gate, or
    /// the channel index for blocks without a GE unit.
    fn prune_mask(&self, ctx: &Ctx<'_, T>, r: Var, gate: Option<Var>, p: &PruneSpec) -> Tensor<T> {
        let s = ctx.tape.shape(r);
        let mut mask = Tensor::ones(s);
        let gate = gate.map(|g| ctx.tape.value(g));
        let plane = s.h * s.w;
        let data = mask.data_mut();
        for n in 0..s.n {
            let importance: Vec<f64> = match gate {
                Some(g) => (0..s.c)
                    .map(|c| {
                        let off = (n * s.c + c) * plane;
                        g.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64
                    })
                    .collect(),
                None => (0..s.c).map(|c| c as f64).collect(),
            };
            for c in pruned_channels(&importance, p.ratio, p.order) {
                let off = (n * s.c + c) * plane;
                data[off..off + plane].fill(T::zero());
            }
        }
        mask
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, &Probes::default()).map(|(l, _, _)| l)
    }

    /// Eval-mode logits plus whatever the probes captured.
    pub fn predict_with(&self, x: &Tensor<T>, probes: &Probes) -> Result<Prediction<T>> {
        let mut ctx = Ctx::new(&self.store, false);
        let xv = ctx.input(x.clone());
        let f = self.forward(&mut ctx, xv, probes)?;
        let get = |v: Option<Var>| v.map(|v| ctx.tape.value(v).clone());
        Ok((ctx.tape.value(f.logits).clone(), get(f.layer), get(f.gate)))
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let [c, h, w] = self.arch.input;
        Shape::new(batch, c, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ge::{Extent, GeTemplate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(placement: Option<&str>) -> Model<f32> {
        let arch = ArchSpec::preset("cifar-resnet-8").unwrap();
        let p = placement.map(|s| s.parse::<GePlacement>().unwrap());
        Model::build(&arch, p.as_ref(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn pruned_channel_order_and_ties() {
        let imp = [0.3, 0.1, 0.3, 0.9];
        assert_eq!(pruned_channels(&imp, 0.5, Order::Ascending), vec![1, 0]);
        assert_eq!(pruned_channels(&imp, 0.75, Order::Descending), vec![3, 0, 2]);
        assert!(pruned_channels(&imp, 0.0, Order::Ascending).is_empty());
        assert_eq!(pruned_channels(&imp, 1.0, Order::Descending).len(), 4);
        let ten = [0.0; 10];
        assert_eq!(pruned_channels(&ten, 0.7, Order::Ascending).len(), 7);
        assert_eq!(pruned_channels(&ten, 0.3, Order::Ascending).len(), 3);
    }

    #[test]
    fn logits_shape_and_finite() {
        let m = toy(Some("se:global:all"));
        let y = m.predict(&Tensor::zeros(m.input_shape(2))).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 10, 1, 1));
        assert!(y.all_finite());
    }

    #[test]
    fn ge_unit_count_follows_stages() {
        let m = toy(Some("theta:global:stage3,stage4"));
        assert_eq!(m.ge_unit_count(), 2);
        assert!(m.has_ge("conv3-1") && !m.has_ge("conv2-1"));
    }

    #[test]
    fn bad_input_geometry_is_dimension_error() {
        let m = toy(None);
        let err = m.predict(&Tensor::zeros(Shape::new(1, 3, 16, 32))).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "height", .. }));
    }

    #[test]
    fn probe_names_are_checked() {
        let m = toy(Some("theta-minus:e2:stage2"));
        let x = Tensor::zeros(m.input_shape(1));
        let bad = |p: Probes| matches!(m.predict_with(&x, &p), Err(Error::Config(_)));
        assert!(bad(Probes {
            capture_layer: Some("conv9-1-relu".into()),
            ..Default::default()
        }));
        assert!(bad(Probes {
            capture_gate: Some("conv3-1".into()),
            ..Default::default()
        }));
        assert!(bad(Probes {
            prune: Some(PruneSpec {
                block: "conv2-1".into(),
                ratio: 1.5,
                order: Order::Ascending
            }),
            ..Default::default()
        }));
    }

    #[test]
    fn extent_too_large_for_stage_is_config_error() {
        let arch = ArchSpec::preset("resnet50-narrow").unwrap();
        let p = GePlacement::all(GeTemplate::theta(Extent::Ratio(8)));
        let r = Model::<f32>::build(&arch, Some(&p), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
