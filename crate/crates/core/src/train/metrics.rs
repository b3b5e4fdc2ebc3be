use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{self, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Real, Tensor};
use crate::zoo::{Model, Probes};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1,val_top5";

/// Position of `label` when classes are ranked by logit, ties going to the
/// lower class index.
pub fn rank_of<T: Real>(logits: &[T], label: usize) -> usize {
    let y = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Top-1 and top-5 error fractions of a logit batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
}

/// Counts of samples whose label ranks within 1 and within 5.
pub fn hits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let k = logits.shape().item();
    let mut h = (0, 0);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let r = rank_of(row, label);
        h.0 += (r < 1) as usize;
        h.1 += (r < 5) as usize;
    }
    h
}

pub fn top_k_error<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> TopK {
    let (h1, h5) = hits(logits, labels);
    let n = labels.len().max(1) as f64;
    TopK {
        top1: 1.0 - h1 as f64 / n,
        top5: 1.0 - h5 as f64 / n,
    }
}

/// Eval-mode error over a whole dataset, normalisation only.
pub fn evaluate(model: &Model<f32>, data: &Dataset, stats: &NormStats, batch: usize, probes: &Probes) -> Result<TopK> {
    let (mut h1, mut h5) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data::batch(data, chunk, stats, None);
        let (logits, _, _) = model.predict_with(&x, probes)?;
        let (a, b) = hits(&logits, &labels);
        h1 += a;
        h5 += b;
    }
    let n = data.len().max(1) as f64;
    Ok(TopK {
        top1: 1.0 - h1 as f64 / n,
        top5: 1.0 - h5 as f64 / n,
    })
}

/// Mean cross-entropy over a whole dataset in a fixed order, with batch
/// statistics in the normalisation layers and no parameter or statistic update.
pub fn dataset_loss(model: &Model<f32>, data: &Dataset, stats: &NormStats, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in super::batches(&idx, batch.max(2)) {
        let (x, labels) = data::batch(data, chunk, stats, None);
        let mut ctx = Ctx::new(&model.store, true);
        let xv = ctx.input(x);
        let f = model.forward(&mut ctx, xv, &Probes::default())?;
        let loss = ctx.tape.softmax_cross_entropy(f.logits, &labels)?;
        sum += ctx.tape.value(loss).item()? as f64 * chunk.len() as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

/// One row of the metrics log; error fractions, epoch counted from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_top1, self.val_top1, self.val_top5
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::config(format!("malformed metrics row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochMetrics {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            train_loss: num(f[2])?,
            train_top1: num(f[3])?,
            val_top1: num(f[4])?,
            val_top5: num(f[5])?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Appends one row, writing the header first when the file is new.
pub fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    let _ = writeln!(text, "{}", row.csv_row());
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_use_lower_index_rule() {
        let logits = Tensor::<f32>::zeros(Shape::new(10, 10, 1, 1));
        let labels: Vec<usize> = (0..10).collect();
        let e = top_k_error(&logits, &labels);
        assert!((e.top1 - 0.9).abs() < 1e-12);
        assert!((e.top5 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits() {
        let logits = Tensor::<f32>::from_fn(Shape::new(4, 10, 1, 1), |n, c, _, _| if c == n + 2 { 5.0 } else { 0.0 });
        let e = top_k_error(&logits, &[2, 3, 4, 5]);
        assert_eq!((e.top1, e.top5), (0.0, 0.0));
    }

    #[test]
    fn hand_built_fixture() {
        // Six classes, four samples.
        let rows = [
            [0.1, 0.9, 0.3, 0.0, 0.2, 0.4], // label 1: rank 0
            [0.5, 0.1, 0.2, 0.3, 0.4, 0.6], // label 1: rank 5
            [0.2, 0.2, 0.2, 0.1, 0.0, 0.0], // label 2: ties with 0 and 1, rank 2
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.5], // label 5: rank 1
        ];
        let logits = Tensor::<f32>::from_vec(Shape::new(4, 6, 1, 1), rows.iter().flatten().copied().collect()).unwrap();
        let labels = [1, 1, 2, 5];
        assert_eq!(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| rank_of(&rows[i], l))
                .collect::<Vec<_>>(),
            vec![0, 5, 2, 1]
        );
        let e = top_k_error(&logits, &labels);
        assert_eq!(e.top1, 0.75);
        assert_eq!(e.top5, 0.25);
    }

    #[test]
    fn csv_round_trip() {
        let r = EpochMetrics {
            epoch: 3,
            lr: 0.01,
            train_loss: 1.234_567_890_123,
            train_top1: 0.4,
            val_top1: 0.45,
            val_top5: 0.1,
        };
        assert_eq!(EpochMetrics::parse_row(&r.csv_row()).unwrap(), r);
        let text = metrics_csv(&[r, r]);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next(), Some(CSV_HEADER));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_metrics(&p, &r).unwrap();
        append_metrics(&p, &r).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), text);
    }
}
