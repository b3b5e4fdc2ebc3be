//! Analytic parameter and multiply-accumulate accounting.
//!
//! Only convolutions and fully-connected layers cost MACs
//! (`k_h·k_w·(C_in/g)·C_out·H_out·W_out` and `in·out`). Batch-norm affine
//! pairs count as parameters; pooling, activations and gating are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ge::{hidden_width, ExciteKind, Extent, GatherKind, GeUnitConfig};
use crate::kernels::conv::window_out;
use crate::param::ParamStore;
use crate::tensor::Real;
use crate::zoo::{ArchSpec, GePlacement};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLine {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub placement: Option<String>,
    pub layers: Vec<CostLine>,
    pub totals: Totals,
}

impl CostReport {
    /// Total MACs / 1e9.
    pub fn gflops(&self) -> f64 {
        self.totals.macs as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.totals.params as f64 / 1e6
    }

    pub fn to_text(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", "layer", "params", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>14}", l.name, l.params, l.macs);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>14}",
            "total", self.totals.params, self.totals.macs
        );
        let _ = writeln!(s, "arch: {}", self.arch);
        if let Some(p) = &self.placement {
            let _ = writeln!(s, "placement: {p}");
        }
        let _ = writeln!(s, "params: {:.2}M", self.params_millions());
        let _ = writeln!(s, "GFLOPs: {:.2}", self.gflops());
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }
}

struct Walk {
    layers: Vec<CostLine>,
}

impl Walk {
    fn push(&mut self, name: impl Into<String>, params: u64, macs: u64) {
        self.layers.push(CostLine {
            name: name.into(),
            params,
            macs,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        groups: usize,
        out: (usize, usize),
        bias: bool,
    ) {
        let per_out = (kh * kw * (cin / groups)) as u64;
        let params = per_out * cout as u64 + if bias { cout as u64 } else { 0 };
        self.push(name, params, per_out * cout as u64 * (out.0 * out.1) as u64);
    }

    fn bn(&mut self, name: impl Into<String>, c: usize) {
        self.push(name, 2 * c as u64, 0);
    }

    fn ge(&mut self, prefix: &str, cfg: &GeUnitConfig) {
        let c = cfg.channels;
        if cfg.gather == GatherKind::DepthwiseConv {
            match cfg.extent {
                Extent::Global => {
                    self.conv(
                        format!("{prefix}.gather.dw1"),
                        c,
                        c,
                        (cfg.height, cfg.width),
                        c,
                        (1, 1),
                        false,
                    );
                    self.bn(format!("{prefix}.gather.bn1"), c);
                }
                Extent::Ratio(e) => {
                    let (mut h, mut w) = (cfg.height, cfg.width);
                    for i in 1..=e.trailing_zeros() {
                        h = window_out(h, 3, 2, 1).expect("validated extent");
                        w = window_out(w, 3, 2, 1).expect("validated extent");
                        self.conv(format!("{prefix}.gather.dw{i}"), c, c, (3, 3), c, (h, w), false);
                        self.bn(format!("{prefix}.gather.bn{i}"), c);
                    }
                }
            }
        }
        if let ExciteKind::ChannelSubnet { reduction } = cfg.excite {
            let hid = hidden_width(c, reduction);
            let g = cfg.gathered();
            self.conv(format!("{prefix}.excite.fc1"), c, hid, (1, 1), 1, g, true);
            self.conv(format!("{prefix}.excite.fc2"), hid, c, (1, 1), 1, g, true);
        }
    }
}

/// Walks the layer plan of `arch` with `placement` and tallies every layer.
pub fn count(arch: &ArchSpec, placement: Option<&GePlacement>) -> Result<CostReport> {
    let plan = arch.plan()?;
    if let Some(p) = placement {
        p.validate(arch)?;
    }
    let mut walk = Walk { layers: Vec::new() };
    let st = &plan.stem;
    walk.conv("conv1", st.cin, st.cout, (st.kernel, st.kernel), 1, st.conv_hw, false);
    if st.bn {
        walk.bn("bn1", st.cout);
    }
    for b in &plan.blocks {
        let name = &b.name;
        let pre = b.style.is_pre_activation();
        let bn_ch = b.bn_channels();
        let mut hw = b.in_hw;
        for (i, c) in b.convs().iter().enumerate() {
            let k = i + 1;
            if pre {
                walk.bn(format!("{name}.bn{k}"), bn_ch[i]);
            }
            hw = (
                window_out(hw.0, c.kernel, c.stride, c.pad).expect("validated plan"),
                window_out(hw.1, c.kernel, c.stride, c.pad).expect("validated plan"),
            );
            walk.conv(
                format!("{name}.conv{k}"),
                c.cin,
                c.cout,
                (c.kernel, c.kernel),
                1,
                hw,
                false,
            );
            if !pre {
                walk.bn(format!("{name}.bn{k}"), bn_ch[i]);
            }
        }
        if b.needs_projection() {
            walk.conv(
                format!("{name}.shortcut.conv"),
                b.cin,
                b.cout,
                (1, 1),
                1,
                b.out_hw,
                false,
            );
            if b.projection_has_bn() {
                walk.bn(format!("{name}.shortcut.bn"), b.cout);
            }
        }
        if let Some(p) = placement.filter(|p| p.covers(b.stage)) {
            let cfg = p.template.at(b.cout, b.out_hw.0, b.out_hw.1);
            cfg.validate()?;
            walk.ge(&format!("{name}.ge"), &cfg);
        }
    }
    if plan.final_bn {
        walk.bn("final.bn", plan.head_channels);
    }
    walk.conv("fc", plan.head_channels, plan.classes, (1, 1), 1, (1, 1), true);

    let totals = walk.layers.iter().fold(Totals::default(), |t, l| Totals {
        params: t.params + l.params,
        macs: t.macs + l.macs,
    });
    Ok(CostReport {
        arch: arch.to_string(),
        placement: placement.map(|p| p.to_string()),
        layers: walk.layers,
        totals,
    })
}

/// Scalar count of a parameter registry grouped by layer (the name with its
/// last `.weight`/`.bias` segment removed), in registration order.
pub fn registry_census<T: Real>(store: &ParamStore<T>) -> Vec<(String, u64)> {
    let mut out: Vec<(String, u64)> = Vec::new();
    for p in store.params() {
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
        match out.last_mut() {
            Some((name, n)) if name == layer => *n += p.value.numel() as u64,
            _ => out.push((layer.to_string(), p.value.numel() as u64)),
        }
    }
    out
}


#[cfg(test)]
mod census_tests {
    use super::*;
    use crate::zoo::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lines_match_registry_for_every_kind() {
        let arch = ArchSpec::preset("cifar-resnet-20").unwrap();
        for p in [
            None,
            Some("theta-minus:e2:all"),
            Some("theta:e4:all"),
            Some("theta-plus:global:stage3:r4"),
            Some("se:global:all"),
        ] {
            let p = p.map(|s| s.parse::<GePlacement>().unwrap());
            let model = Model::<f32>::build(&arch, p.as_ref(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let report = count(&arch, p.as_ref()).unwrap();
            let lines: Vec<(String, u64)> = report.layers.iter().map(|l| (l.name.clone(), l.params)).collect();
            assert_eq!(registry_census(&model.store), lines);
        }
    }
}
