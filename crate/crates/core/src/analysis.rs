//! Class selectivity of feature maps and gate-importance pruning curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{self, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::train::evaluate;
use crate::zoo::{Model, Order, Probes, PruneSpec};

pub const BINS: usize = 50;

/// Prune ratios 0, 0.1, …, 1.
pub fn prune_grid() -> [f64; 11] {
    std::array::from_fn(|i| i as f64 / 10.0)
}

/// `(μ_max − μ̄_rest) / (μ_max + μ̄_rest)` over non-negative class means,
/// where `μ̄_rest` averages every mean but one copy of the maximum. Zero when
/// all means are zero.
pub fn selectivity_index(class_means: &[f64]) -> f64 {
    if class_means.is_empty() {
        return 0.0;
    }
    let mut top = 0;
    for (k, &m) in class_means.iter().enumerate() {
        if m > class_means[top] {
            top = k;
        }
    }
    let max = class_means[top];
    if class_means.len() == 1 {
        return if max > 0.0 { 1.0 } else { 0.0 };
    }
    let rest = class_means
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &m)| m)
        .sum::<f64>()
        / (class_means.len() - 1) as f64;
    let den = max + rest;
    if den <= 0.0 {
        0.0
    } else {
        ((max - rest) / den).clamp(0.0, 1.0)
    }
}

/// Spatial mean per (sample, channel).
pub fn channel_activity<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let plane = (s.h * s.w).max(1);
    t.data()
        .chunks_exact(plane)
        .map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
        .collect::<Vec<_>>()
        .chunks_exact(s.c)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Mean activity per channel and class: `out[channel][class]`. Classes
/// without samples get mean 0.
pub fn class_means(activity: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let channels = activity.first().map_or(0, Vec::len);
    let mut sum = vec![vec![0.0; classes]; channels];
    let mut count = vec![0usize; classes];
    for (a, &y) in activity.iter().zip(labels) {
        count[y] += 1;
        for (c, &v) in a.iter().enumerate() {
            sum[c][y] += v;
        }
    }
    for row in &mut sum {
        for (m, &n) in row.iter_mut().zip(&count) {
            if n > 0 {
                *m /= n as f64;
            }
        }
    }
    sum
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectivityHistogram {
    pub layer: String,
    /// One index per channel.
    pub indices: Vec<f64>,
}

impl SelectivityHistogram {
    pub fn from_activity(layer: impl Into<String>, activity: &[Vec<f64>], labels: &[usize], classes: usize) -> Self {
        SelectivityHistogram {
            layer: layer.into(),
            indices: class_means(activity, labels, classes)
                .iter()
                .map(|m| selectivity_index(m))
                .collect(),
        }
    }

    /// Counts over 50 equal bins of [0, 1]; 1 falls in the last bin.
    pub fn bins(&self) -> [usize; BINS] {
        let mut b = [0; BINS];
        for &v in &self.indices {
            b[((v * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        b
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,index\n");
        for (c, v) in self.indices.iter().enumerate() {
            let _ = writeln!(s, "{c},{v}");
        }
        s
    }

    pub fn from_csv(layer: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("channel,index") {
            return Err(Error::config("selectivity CSV must start with `channel,index`"));
        }
        let indices = lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::config(format!("malformed selectivity row `{line}`"));
                let (c, v) = line.split_once(',').ok_or_else(bad)?;
                if c.parse::<usize>().ok() != Some(i) {
                    return Err(bad());
                }
                v.parse::<f64>().map_err(|_| bad())
            })
            .collect::<Result<_>>()?;
        Ok(SelectivityHistogram {
            layer: layer.into(),
            indices,
        })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Selectivity of every channel of `layer` (a `<block>-relu` name) over
/// `data` in eval mode.
pub fn class_selectivity(
    model: &Model<f32>,
    data: &Dataset,
    stats: &NormStats,
    layer: &str,
    batch: usize,
) -> Result<SelectivityHistogram> {
    let probes = Probes {
        capture_layer: Some(layer.to_string()),
        ..Probes::default()
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut activity = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data::batch(data, chunk, stats, None);
        let (_, captured, _) = model.predict_with(&x, &probes)?;
        activity.extend(channel_activity(&captured.expect("layer probe set")));
        labels.extend(y);
    }
    Ok(SelectivityHistogram::from_activity(
        layer,
        &activity,
        &labels,
        model.arch().classes,
    ))
}

/// Per image, the spatial mean of each channel's gate in `block`.
pub fn gate_importances<T: Real>(model: &Model<T>, x: &Tensor<T>, block: &str) -> Result<Vec<Vec<f64>>> {
    let probes = Probes {
        capture_gate: Some(block.to_string()),
        ..Probes::default()
    };
    let (_, _, gate) = model.predict_with(x, &probes)?;
    Ok(channel_activity(&gate.expect("gate probe set")))
}

/// Top-1 accuracy with the given share of `block`'s gated channels zeroed
/// per image.
pub fn prune_eval(
    model: &Model<f32>,
    data: &Dataset,
    stats: &NormStats,
    block: &str,
    ratio: f64,
    order: Order,
    batch: usize,
) -> Result<f64> {
    let probes = Probes {
        prune: Some(PruneSpec {
            block: block.to_string(),
            ratio,
            order,
        }),
        ..Probes::default()
    };
    Ok(1.0 - evaluate(model, data, stats, batch, &probes)?.top1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneCurve {
    pub block: String,
    pub order: Order,
    /// (ratio, top-1 accuracy) over the fixed grid.
    pub points: Vec<(f64, f64)>,
}

pub fn prune_curve(
    model: &Model<f32>,
    data: &Dataset,
    stats: &NormStats,
    block: &str,
    order: Order,
    batch: usize,
) -> Result<PruneCurve> {
    let points = prune_grid()
        .into_iter()
        .map(|r| Ok((r, prune_eval(model, data, stats, block, r, order, batch)?)))
        .collect::<Result<_>>()?;
    Ok(PruneCurve {
        block: block.to_string(),
        order,
        points,
    })
}

pub fn curves_csv(curves: &[PruneCurve]) -> String {
    let mut s = String::from("ratio,order,top1\n");
    for c in curves {
        for (r, a) in &c.points {
            let _ = writeln!(s, "{r},{},{a}", c.order.as_str());
        }
    }
    s
}

/// Parses `ratio,order,top1` rows back into (ratio, order, accuracy).
pub fn parse_curves_csv(text: &str) -> Result<Vec<(f64, Order, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("ratio,order,top1") {
        return Err(Error::config("prune CSV must start with `ratio,order,top1`"));
    }
    lines
        .map(|line| {
            let bad = || Error::config(format!("malformed prune row `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            let [r, o, a] = f[..] else { return Err(bad()) };
            let order = match o {
                "ascending" => Order::Ascending,
                "descending" => Order::Descending,
                _ => return Err(bad()),
            };
            Ok((r.parse().map_err(|_| bad())?, order, a.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn export_curves(curves: &[PruneCurve], path: &Path) -> Result<()> {
    fs::write(path, curves_csv(curves)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split, Variant};
    use crate::tensor::Shape;
    use crate::zoo::{ArchSpec, GePlacement};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selectivity_endpoints() {
        assert_eq!(selectivity_index(&[4.0, 2.0, 0.0]), 0.6);
        assert_eq!(selectivity_index(&[0.0, 0.0, 1.0, 0.0]), 1.0);
        assert_eq!(selectivity_index(&[3.0; 10]), 0.0);
        assert_eq!(selectivity_index(&[0.0; 10]), 0.0);
    }

    #[test]
    fn one_class_channel_from_activity() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let activity: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                vec![
                    (y == 1) as u8 as f64,
                    2.5,
                    if y == 0 {
                        4.0
                    } else if y == 1 {
                        2.0
                    } else {
                        0.0
                    },
                ]
            })
            .collect();
        let h = SelectivityHistogram::from_activity("l", &activity, &labels, 3);
        assert_eq!(h.indices, vec![1.0, 0.0, 0.6]);
        let b = h.bins();
        assert_eq!((b[0], b[30], b[49]), (1, 1, 1));
    }

    #[test]
    fn channel_activity_is_spatial_mean() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 2, 2, 2), |n, c, h, w| (n * 8 + c * 4 + h * 2 + w) as f32);
        assert_eq!(channel_activity(&t), vec![vec![1.5, 5.5], vec![9.5, 13.5]]);
    }

    #[test]
    fn histogram_csv_round_trip() {
        let h = SelectivityHistogram {
            layer: "conv4-6-relu".into(),
            indices: vec![0.1, 1.0 / 3.0, 0.0],
        };
        let text = h.to_csv();
        assert_eq!(text.lines().count(), 4);
        let back = SelectivityHistogram::from_csv("conv4-6-relu", &text).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn curve_csv_fixture() {
        let c = |order, a: f64| PruneCurve {
            block: "conv5-1".into(),
            order,
            points: vec![(0.0, a), (0.5, 0.25), (1.0, 0.125)],
        };
        let text = curves_csv(&[c(Order::Ascending, 0.75), c(Order::Descending, 0.75)]);
        let fixture = "ratio,order,top1\n\
            0,ascending,0.75\n0.5,ascending,0.25\n1,ascending,0.125\n\
            0,descending,0.75\n0.5,descending,0.25\n1,descending,0.125\n";
        assert_eq!(text, fixture);
        let rows = parse_curves_csv(&text).unwrap();
        assert_eq!(rows[4], (0.5, Order::Descending, 0.25));
    }

    fn toy(ge: Option<&str>) -> Model<f32> {
        let arch = ArchSpec {
            width_divisor: 4,
            ..ArchSpec::new("cifar-resnet-8".parse().unwrap())
        };
        let p: Option<GePlacement> = ge.map(|s| s.parse().unwrap());
        Model::build(&arch, p.as_ref(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn prune_endpoints() {
        let data = synthetic(Variant::Cifar10, Split::Test, 24, 2);
        let stats = NormStats::compute(&data);
        for m in [toy(Some("theta:global:all")), toy(None)] {
            let block = "conv3-1";
            let base = 1.0 - evaluate(&m, &data, &stats, 8, &Probes::default()).unwrap().top1;
            for o in [Order::Ascending, Order::Descending] {
                assert_eq!(prune_eval(&m, &data, &stats, block, 0.0, o, 8).unwrap(), base);
            }
            let a = prune_eval(&m, &data, &stats, block, 1.0, Order::Ascending, 8).unwrap();
            let d = prune_eval(&m, &data, &stats, block, 1.0, Order::Descending, 8).unwrap();
            assert_eq!(a, d);
            let e = prune_eval(&m, &data, &stats, block, 1.5, Order::Ascending, 8).unwrap_err();
            assert!(e.is_config());
        }
    }

    #[test]
    fn gate_importances_match_isolated_unit() {
        let m = toy(Some("theta:global:all"));
        let x = Tensor::from_fn(m.input_shape(2), |n, c, h, w| {
            ((n + 2 * c + h * w) % 7) as f32 / 7.0 - 0.4
        });
        let imp = gate_importances(&m, &x, "conv3-1").unwrap();
        assert_eq!(imp.len(), 2);
        assert_eq!(
            imp[0].len(),
            m.plan().blocks.iter().find(|b| b.name == "conv3-1").unwrap().cout
        );
        assert!(imp.iter().flatten().all(|&g| g > 0.0 && g < 1.0));
        assert!(!toy(None).has_ge("conv3-1"));
        assert!(gate_importances(&toy(None), &x, "conv3-1").unwrap_err().is_config());
    }

    proptest! {
        #[test]
        fn selectivity_in_unit_interval_and_scale_free(
            means in prop::collection::vec(0.0f64..100.0, 2..12),
        ) {
            let s = selectivity_index(&means);
            prop_assert!((0.0..=1.0).contains(&s));
            let scaled: Vec<f64> = means.iter().map(|m| 7.0 * m).collect();
            prop_assert!((selectivity_index(&scaled) - s).abs() <= 1e-12);
        }

        #[test]
        fn pruned_sets_grow_with_ratio(
            imp in prop::collection::vec(0.0f64..1.0, 1..64),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            asc in any::<bool>(),
        ) {
            use crate::zoo::pruned_channels;
            let order = if asc { Order::Ascending } else { Order::Descending };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = pruned_channels(&imp, lo, order);
            let big = pruned_channels(&imp, hi, order);
            prop_assert!(small.iter().all(|c| big.contains(c)));
        }
    }
}
