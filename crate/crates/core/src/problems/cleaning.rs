//! Data hyper-cleaning with a logistic-regression learner.
//!
//! Each training sample `j` carries a weight `σ(λ_j)`. The inner problem is
//! the weighted, ridge-regularized logistic loss on the (label-corrupted)
//! training set; the outer objective is the plain logistic loss on a clean
//! validation set:
//!
//! ```text
//! G(λ, ω) = (1/N_i) Σ_j σ(λ_j) ℓ(ω; x_j, y_j) + (ridge/2) ‖ω‖²
//! F(λ, ω) = (1/N_v) Σ_j ℓ(ω; x_j, y_j)
//! ```
//!
//! `ℓ(ω; x, y) = log(1 + e^{ωᵀx}) − y ωᵀx`. Mini-batch keys sample the
//! training set for `G` derivatives and the validation set for `F`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problem::{BilevelOracle, SampleKey};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic_loss(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub features: Matrix,
    /// 0.0 or 1.0.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn margin(&self, j: usize, omega: &Vector) -> f64 {
        self.features.row(j).transpose().dot(omega)
    }

    /// `(s_j − y_j) x_j`, the per-sample loss gradient.
    fn loss_grad(&self, j: usize, omega: &Vector) -> (f64, Vector) {
        let s = sigmoid(self.margin(j, omega));
        (s, (s - self.labels[j]) * self.features.row(j).transpose())
    }

    /// Mean logistic loss of `omega` over the whole set.
    pub fn mean_loss(&self, omega: &Vector) -> f64 {
        (0..self.len())
            .map(|j| logistic_loss(self.margin(j, omega), self.labels[j]))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Fraction of samples whose predicted class matches the label.
    pub fn accuracy(&self, omega: &Vector) -> f64 {
        let hits = (0..self.len())
            .filter(|&j| (self.margin(j, omega) > 0.0) == (self.labels[j] > 0.5))
            .count();
        hits as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningProblem {
    pub train: Dataset,
    /// `true` where the training label was flipped.
    pub corrupted: Vec<bool>,
    pub val: Dataset,
    pub ridge: f64,
}

/// Two Gaussian blobs with unit covariance centred at `±(separation/2) u`
/// for a random unit vector `u`; class labels are fair coin flips. Exactly
/// `⌊γ N_i⌋` training labels are flipped; the validation set stays clean.
pub fn gen_cleaning(
    seed: u64,
    n_train: usize,
    n_val: usize,
    dim: usize,
    gamma: f64,
    separation: f64,
    ridge: f64,
) -> Result<CleaningProblem> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "corruption rate must lie in [0, 1), got {gamma}"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "feature dimension must be at least 2, got {dim}"
        )));
    }
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidConfig(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if !(ridge > 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be positive, got {ridge}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = loop {
        let d = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if d.norm() > 1e-6 {
            break d.normalize();
        }
    };
    let half = 0.5 * separation * dir;
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let labels: Vec<f64> = (0..count)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        let mut features = Matrix::zeros(count, dim);
        for (j, &y) in labels.iter().enumerate() {
            let sign = if y > 0.5 { 1.0 } else { -1.0 };
            for c in 0..dim {
                features[(j, c)] = sign * half[c] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        Dataset { features, labels }
    };
    let mut train = draw(n_train, &mut rng);
    let val = draw(n_val, &mut rng);

    let flips = (gamma * n_train as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut rng);
    let mut corrupted = vec![false; n_train];
    for &j in &order[..flips] {
        corrupted[j] = true;
        train.labels[j] = 1.0 - train.labels[j];
    }
    Ok(CleaningProblem {
        train,
        corrupted,
        val,
        ridge,
    })
}

impl CleaningProblem {
    pub fn feature_dim(&self) -> usize {
        self.train.features.ncols()
    }

    /// Sample weights `σ(λ_j)`.
    pub fn weights(&self, lambda: &Vector) -> Vector {
        lambda.map(sigmoid)
    }

    /// Validation loss at `omega`.
    pub fn val_loss(&self, omega: &Vector) -> f64 {
        self.val.mean_loss(omega)
    }

    /// Area under the ROC curve for flagging corrupted samples by low weight
    /// (score `−λ_j`, monotone in `−σ(λ_j)`). Ties count one half.
    pub fn corruption_auc(&self, lambda: &Vector) -> f64 {
        let scores: Vec<f64> = lambda.iter().map(|l| -l).collect();
        auc(&scores, &self.corrupted)
    }

    /// Inner solve by full-batch gradient descent at step `1/L`.
    pub fn fit_inner(&self, lambda: &Vector, tol: f64, max_iter: usize) -> Result<Vector> {
        let lr = 1.0 / self.smoothness();
        let sol = crate::problem::solve_inner(self, lambda, &Vector::zeros(self.feature_dim()), lr, tol, max_iter)?;
        Ok(sol.omega_star)
    }

    /// Writes both splits as CSV with columns
    /// `split,label,corrupted,x0,…,x{d-1}` (`split` is `train` or `val`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let d = self.feature_dim();
        let mut out = String::from("split,label,corrupted");
        for c in 0..d {
            let _ = write!(out, ",x{c}");
        }
        out.push('\n');
        let mut rows = |name: &str, set: &Dataset, mask: Option<&[bool]>| {
            for j in 0..set.len() {
                let flag = mask.is_some_and(|m| m[j]);
                let _ = write!(out, "{name},{},{}", set.labels[j] as u8, flag as u8);
                for c in 0..d {
                    let _ = write!(out, ",{}", set.features[(j, c)]);
                }
                out.push('\n');
            }
        };
        rows("train", &self.train, Some(&self.corrupted));
        rows("val", &self.val, None);
        out
    }

    /// Parses the layout produced by [`CleaningProblem::to_csv`].
    pub fn from_csv(text: &str, ridge: f64) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::InvalidConfig(format!("dataset csv line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["split", "label", "corrupted"] {
            return Err(bad(1, "expected header split,label,corrupted,x0,..."));
        }
        let d = cols.len() - 3;
        let mut train = (Vec::new(), Vec::new(), Vec::new());
        let mut val = (Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 3 {
                return Err(bad(i + 1, "wrong column count"));
            }
            let label: f64 = match f[1] {
                "0" => 0.0,
                "1" => 1.0,
                _ => return Err(bad(i + 1, "label must be 0 or 1")),
            };
            let flag = match f[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(i + 1, "corrupted must be 0 or 1")),
            };
            let xs = f[3..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad(i + 1, "unparsable feature")))
                .collect::<Result<Vec<_>>>()?;
            match f[0] {
                "train" => {
                    train.0.extend(xs);
                    train.1.push(label);
                    train.2.push(flag);
                }
                "val" => {
                    val.0.extend(xs);
                    val.1.push(label);
                }
                _ => return Err(bad(i + 1, "split must be train or val")),
            }
        }
        let to_set = |xs: Vec<f64>, labels: Vec<f64>| Dataset {
            features: Matrix::from_row_slice(labels.len(), d, &xs),
            labels,
        };
        let p = CleaningProblem {
            train: to_set(train.0, train.1),
            corrupted: train.2,
            val: to_set(val.0, val.1),
            ridge,
        };
        if p.train.is_empty() || p.val.is_empty() {
            return Err(Error::InvalidConfig("dataset csv needs both train and val rows".into()));
        }
        Ok(p)
    }

    fn train_rows(&self, key: &SampleKey) -> (Vec<usize>, f64) {
        match key.indices(self.train.len()) {
            Some(idx) => {
                let w = 1.0 / idx.len() as f64;
                (idx, w)
            }
            None => ((0..self.train.len()).collect(), 1.0 / self.train.len() as f64),
        }
    }

    fn val_rows(&self, key: &SampleKey) -> (Vec<usize>, f64) {
        match key.indices(self.val.len()) {
            Some(idx) => {
                let w = 1.0 / idx.len() as f64;
                (idx, w)
            }
            None => ((0..self.val.len()).collect(), 1.0 / self.val.len() as f64),
        }
    }
}

/// Probability that a random positive outranks a random negative.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    assert_eq!(scores.len(), positive.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

impl BilevelOracle for CleaningProblem {
    fn outer_dim(&self) -> usize {
        self.train.len()
    }

    fn inner_dim(&self) -> usize {
        self.feature_dim()
    }

    fn dataset_size(&self) -> usize {
        self.train.len().min(self.val.len())
    }

    fn outer_value(&self, _lambda: &Vector, omega: &Vector, key: &SampleKey) -> f64 {
        let (rows, w) = self.val_rows(key);
        rows.iter()
            .map(|&j| logistic_loss(self.val.margin(j, omega), self.val.labels[j]))
            .sum::<f64>()
            * w
    }

    fn inner_value(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Option<f64> {
        let (rows, w) = self.train_rows(key);
        let data: f64 = rows
            .iter()
            .map(|&j| sigmoid(lambda[j]) * logistic_loss(self.train.margin(j, omega), self.train.labels[j]))
            .sum();
        Some(data * w + 0.5 * self.ridge * omega.norm_squared())
    }

    fn grad_outer_lambda(&self, _lambda: &Vector, _omega: &Vector, _key: &SampleKey) -> Vector {
        Vector::zeros(self.outer_dim())
    }

    fn grad_outer_omega(&self, _lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        let (rows, w) = self.val_rows(key);
        let mut g = Vector::zeros(self.inner_dim());
        for &j in &rows {
            g += self.val.loss_grad(j, omega).1;
        }
        g * w
    }

    fn grad_inner_omega(&self, lambda: &Vector, omega: &Vector, key: &SampleKey) -> Vector {
        let (rows, w) = self.train_rows(key);
        let mut g = Vector::zeros(self.inner_dim());
        for &j in &rows {
            g += sigmoid(lambda[j]) * self.train.loss_grad(j, omega).1;
        }
        g * w + self.ridge * omega
    }

    fn hvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        let (rows, w) = self.train_rows(key);
        let mut g = Vector::zeros(self.inner_dim());
        for &j in &rows {
            let x = self.train.features.row(j).transpose();
            let s = sigmoid(x.dot(omega));
            g += (sigmoid(lambda[j]) * s * (1.0 - s) * x.dot(v)) * x;
        }
        g * w + self.ridge * v
    }

    fn cross_jvp_inner(&self, lambda: &Vector, omega: &Vector, v: &Vector, key: &SampleKey) -> Vector {
        let (rows, w) = self.train_rows(key);
        let mut out = Vector::zeros(self.outer_dim());
        for &j in &rows {
            let s = sigmoid(lambda[j]);
            out[j] += s * (1.0 - s) * self.train.loss_grad(j, omega).1.dot(v) * w;
        }
        out
    }

    fn strong_convexity(&self) -> f64 {
        self.ridge
    }

    /// `ridge + (1/4N_i) Σ_j ‖x_j‖²`, bounding the data term's trace with
    /// `σ(λ_j) ≤ 1` and `s(1 − s) ≤ 1/4`, so it holds for every λ.
    fn smoothness(&self) -> f64 {
        let sq: f64 = self.train.features.row_iter().map(|r| r.norm_squared()).sum();
        self.ridge + sq / (4.0 * self.train.len() as f64)
    }
}
