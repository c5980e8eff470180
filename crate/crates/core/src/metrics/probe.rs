//! Linear probe: multinomial logistic regression on frozen representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of rows sent to validation and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.1, 0.5, 2.0],
            epochs: 300,
            momentum: 0.9,
            weight_decay: 1e-4,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.learning_rates.is_empty()
            && self.learning_rates.iter().all(|&l| l > 0.0)
            && self.epochs > 0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.val_fraction > 0.0
            && self.test_fraction >= 0.0
            && self.val_fraction + self.test_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("invalid probe settings"))
        }
    }
}

/// Trained classifier including the feature standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `dim × classes`
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
    pub learning_rate: f64,
    pub epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    pub epoch: usize,
}

fn check_inputs(x: &Tensor, y: &[usize]) -> Result<usize> {
    if x.rank() != 2 || x.rows() != y.len() {
        return Err(Error::InvalidShape {
            op: "linear_probe",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    y.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::contract("linear probe needs at least two classes"));
    }
    Ok(classes)
}

/// Position of a row in `[0, 1)` from its bytes and label, so duplicated
/// rows always land in the same split.
fn row_key(row: &[f64], label: usize) -> f64 {
    let mut parts: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
    parts.push(label as u64);
    (derive_seed(&parts) >> 11) as f64 / (1u64 << 53) as f64
}

fn standardise(x: &Tensor, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = idx.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in idx {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    (mean, scale)
}

impl LinearClassifier {
    fn features(&self, x: &Tensor, i: usize) -> Vec<f64> {
        x.row(i)
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (k, zk) in z.iter().enumerate() {
            let w = &self.weight[k * self.classes..(k + 1) * self.classes];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += zk * wv;
            }
        }
        out
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.rank() != 2 || x.cols() != self.mean.len() {
            return Err(Error::InvalidShape {
                op: "predict",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        Ok((0..x.rows())
            .map(|i| {
                let l = self.logits(&self.features(x, i));
                (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap_or(0)
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::contract("accuracy of an empty set"));
        }
        let p = self.predict(x)?;
        if p.len() != y.len() {
            return Err(Error::contract("label count mismatch"));
        }
        Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }
}

fn accuracy_on(clf: &LinearClassifier, z: &[Vec<f64>], y: &[usize], idx: &[usize]) -> f64 {
    let hits = idx
        .iter()
        .filter(|&&i| {
            let l = clf.logits(&z[i]);
            let best = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)));
            best == Some(y[i])
        })
        .count();
    hits as f64 / idx.len().max(1) as f64
}

/// Full-batch Nesterov descent for every learning rate; keeps the epoch and
/// rate with the best validation accuracy (earliest on ties).
fn train(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &ProbeConfig,
) -> LinearClassifier {
    let (mean, scale) = standardise(x, train_idx);
    let d = x.cols();
    let template = LinearClassifier {
        mean,
        scale,
        weight: vec![0.0; d * classes],
        bias: vec![0.0; classes],
        classes,
        learning_rate: cfg.learning_rates[0],
        epoch: 0,
        val_accuracy: 0.0,
    };
    let z: Vec<Vec<f64>> = (0..x.rows()).map(|i| template.features(x, i)).collect();
    let n = train_idx.len() as f64;
    let mut best = template.clone();
    best.val_accuracy = -1.0;

    for &lr in &cfg.learning_rates {
        let mut clf = template.clone();
        clf.learning_rate = lr;
        let mut vw = vec![0.0; d * classes];
        let mut vb = vec![0.0; classes];
        for epoch in 1..=cfg.epochs {
            // Nesterov: gradient at the look-ahead point
            let look_w: Vec<f64> = clf.weight.iter().zip(&vw).map(|(w, v)| w + cfg.momentum * v).collect();
            let look_b: Vec<f64> = clf.bias.iter().zip(&vb).map(|(b, v)| b + cfg.momentum * v).collect();
            let ahead = LinearClassifier {
                weight: look_w.clone(),
                bias: look_b.clone(),
                ..clf.clone()
            };
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for &i in train_idx {
                let l = ahead.logits(&z[i]);
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let g = e[c] / s - f64::from(u8::from(c == y[i]));
                    gb[c] += g;
                    for (k, zk) in z[i].iter().enumerate() {
                        gw[k * classes + c] += g * zk;
                    }
                }
            }
            for ((v, g), w) in vw.iter_mut().zip(&gw).zip(&look_w) {
                *v = cfg.momentum * *v - lr * (g / n + cfg.weight_decay * w);
            }
            for (v, g) in vb.iter_mut().zip(&gb) {
                *v = cfg.momentum * *v - lr * g / n;
            }
            clf.weight.iter_mut().zip(&vw).for_each(|(w, v)| *w += v);
            clf.bias.iter_mut().zip(&vb).for_each(|(b, v)| *b += v);

            let acc = accuracy_on(&clf, &z, y, val_idx);
            if acc > best.val_accuracy {
                best = LinearClassifier {
                    epoch,
                    val_accuracy: acc,
                    ..clf.clone()
                };
            }
        }
    }
    best
}

fn split(x: &Tensor, y: &[usize], cut_val: f64, cut_test: f64) -> [Vec<usize>; 3] {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, &label) in y.iter().enumerate() {
        let k = row_key(x.row(i), label);
        let which = if k < cut_val {
            1
        } else if k < cut_test {
            2
        } else {
            0
        };
        parts[which].push(i);
    }
    parts
}

/// Trains on `x`, holding out a hashed validation split to pick the
/// learning rate and epoch.
pub fn fit_probe(x: &Tensor, y: &[usize], cfg: &ProbeConfig) -> Result<LinearClassifier> {
    cfg.validate()?;
    let classes = check_inputs(x, y)?;
    let [train_idx, val_idx, _] = split(x, y, cfg.val_fraction, cfg.val_fraction);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::contract("too few rows to split for the probe"));
    }
    Ok(train(x, y, classes, &train_idx, &val_idx, cfg))
}

/// Train/validation/test protocol; returns test accuracy.
pub fn linear_probe(x: &Tensor, y: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let classes = check_inputs(x, y)?;
    let [train_idx, val_idx, test_idx] =
        split(x, y, cfg.val_fraction, cfg.val_fraction + cfg.test_fraction);
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::contract("too few rows to split for the probe"));
    }
    let clf = train(x, y, classes, &train_idx, &val_idx, cfg);
    let z: Vec<Vec<f64>> = (0..x.rows()).map(|i| clf.features(x, i)).collect();
    Ok(ProbeReport {
        accuracy: accuracy_on(&clf, &z, y, &test_idx),
        val_accuracy: clf.val_accuracy,
        learning_rate: clf.learning_rate,
        epoch: clf.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { -3.0 } else { 3.0 };
            data.push(cx + rng.random_range(-1.0..1.0));
            data.push(rng.random_range(-1.0..1.0));
            y.push(c);
        }
        (Tensor::matrix(n, 2, data).unwrap(), y)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(400, 1);
        let r = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{r:?}");
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[10, 2]);
        assert!(matches!(linear_probe(&x, &[1; 10], &ProbeConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn duplication_invariance() {
        let (x, y) = blobs(200, 2);
        let idx: Vec<usize> = (0..200).chain(0..200).collect();
        let x2 = x.select_rows(&idx);
        let y2: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let cfg = ProbeConfig {
            epochs: 50,
            ..Default::default()
        };
        let a = linear_probe(&x, &y, &cfg).unwrap();
        let b = linear_probe(&x2, &y2, &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }
}
