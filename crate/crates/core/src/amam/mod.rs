//! Adversarial modal alignment: a domain classifier trained through a
//! gradient reversal layer, and an MMD diagnostic of the modality gap.

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Hidden widths of the classifier; the output layer has 2 units.
pub const HIDDEN: [usize; 2] = [128, 64];

/// Three fully connected layers `d → 128 → 64 → 2`, tanh between, softmax
/// head. Column 1 of the output is the probability of the image domain.
#[derive(Clone, Copy, Debug)]
pub struct DomainClassifier {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl DomainClassifier {
    /// Row-wise 2-way class probabilities.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = t.matmul(x, self.w1)?;
        let h = t.add_row(h, self.b1)?;
        let h = t.tanh(h);
        let h = t.matmul(h, self.w2)?;
        let h = t.add_row(h, self.b2)?;
        let h = t.tanh(h);
        let o = t.matmul(h, self.w3)?;
        let o = t.add_row(o, self.b3)?;
        Ok(t.softmax_rows(o))
    }
}

/// Features of both modalities with labels `1 = image`, `0 = point cloud`.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub features: Var,
    pub labels: Vec<u8>,
}

impl DomainBatch {
    /// Stacks image rows above point rows.
    pub fn pair(t: &mut Tape, image: Var, points: Var) -> Result<Self> {
        let (ni, np) = (t.value(image).rows(), t.value(points).rows());
        let features = t.concat(&[image, points], Axis::Rows)?;
        let mut labels = vec![1u8; ni];
        labels.extend(std::iter::repeat_n(0u8, np));
        Ok(DomainBatch { features, labels })
    }
}

/// Binary cross-entropy of the classifier on `batch`, with features passed
/// through a gradient reversal layer of strength `lambda`. `None` skips the
/// reversal.
pub fn domain_loss(t: &mut Tape, batch: &DomainBatch, clf: &DomainClassifier, lambda: Option<f64>) -> Result<Var> {
    let n = batch.labels.len();
    if t.value(batch.features).rows() != n {
        return Err(Error::dim("domain_loss", t.value(batch.features).shape(), &[n]));
    }
    let ones = batch.labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == n || batch.labels.iter().any(|&l| l > 1) {
        return Err(Error::Config("domain batch must contain both image (1) and point (0) labels".into()));
    }
    let x = match lambda {
        Some(l) => t.grl(batch.features, l)?,
        None => batch.features,
    };
    let probs = clf.forward(t, x)?;
    // probability assigned to each row's true domain
    let idx: Vec<usize> = batch.labels.iter().enumerate().map(|(i, &l)| 2 * i + l as usize).collect();
    let p = t.gather_elems(probs, &idx)?;
    let p = t.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = t.log(p);
    let m = t.mean(lp);
    Ok(t.neg(m))
}

/// MMD² estimates between two sample sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mmd {
    pub unbiased: f64,
    pub biased: f64,
    /// Median pairwise distance of the pooled samples.
    pub bandwidth: f64,
}

impl Mmd {
    /// The unbiased estimate floored at 0.
    pub fn value(&self) -> f64 {
        self.unbiased.max(0.0)
    }
}

/// Multipliers of the median-heuristic bandwidth in the kernel mixture.
pub const BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared MMD with an equal-weight mixture of Gaussian kernels whose
/// bandwidths are the median pooled pairwise distance times
/// [`BANDWIDTH_SCALES`]. For equal sample counts the unbiased estimate is
/// the U-statistic that also drops `i = j` cross terms.
pub fn mmd(x: &Tensor, y: &Tensor) -> Result<Mmd> {
    let (m, n) = (x.rows(), y.rows());
    if m < 2 || n < 2 {
        return Err(Error::Usage(format!("mmd needs at least 2 samples per set, got {m} and {n}")));
    }
    if x.cols() != y.cols() {
        return Err(Error::dim("mmd", x.shape(), y.shape()));
    }
    let rows: Vec<&[f64]> = (0..m).map(|i| x.row(i)).chain((0..n).map(|j| y.row(j))).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) };
    let bw = if med > 0.0 { med } else { 1.0 };
    let inv: Vec<f64> = BANDWIDTH_SCALES.iter().map(|s| 1.0 / (2.0 * (s * bw).powi(2))).collect();
    let k = |a: &[f64], b: &[f64]| {
        let s = sq_dist(a, b);
        inv.iter().map(|c| (-s * c).exp()).sum::<f64>() / inv.len() as f64
    };
    let (mut kxx, mut kyy, mut kxy, mut kxy_diag) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += k(x.row(i), x.row(j));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += k(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            let v = k(x.row(i), y.row(j));
            kxy += v;
            if i == j {
                kxy_diag += v;
            }
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let unbiased = if m == n {
        (kxx + kyy - 2.0 * (kxy - kxy_diag)) / (mf * (mf - 1.0))
    } else {
        kxx / (mf * (mf - 1.0)) + kyy / (nf * (nf - 1.0)) - 2.0 * kxy / (mf * nf)
    };
    // the kernel is 1 on the diagonal
    let biased = (kxx + mf) / (mf * mf) + (kyy + nf) / (nf * nf) - 2.0 * kxy / (mf * nf);
    Ok(Mmd { unbiased, biased, bandwidth: bw })
}
