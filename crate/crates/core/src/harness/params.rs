use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::TrainConfig;
use crate::amam::HIDDEN;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter blocks in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub blocks: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blocks.get(name).ok_or_else(|| Error::Usage(format!("missing parameter block `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore { blocks: self.blocks.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect() }
    }

    /// Registers every block on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.blocks.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    pub fn n_scalars(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }
}

/// Tape handles of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

/// Inverse softplus.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Initial variance of the uncertainty heads.
pub const INIT_VARIANCE: f64 = 0.1;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    gaussian(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

fn near_identity(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Tensor {
    let mut t = gaussian(rng, n, n, std);
    for i in 0..n {
        t.data_mut()[i * n + i] += 1.0;
    }
    t
}

/// Seeded initial parameters for a model over `channels`-dim descriptors.
///
/// Uncertainty means start at the identity and variances at
/// [`INIT_VARIANCE`]; the residual branch of each interaction stage starts
/// small so that untrained node features pass through almost unchanged.
pub fn init_params(cfg: &TrainConfig, channels: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, h) = (cfg.feature_dim, cfg.hidden_dim);
    let mut p = ParamStore::default();
    for enc in ["enc_i", "enc_p"] {
        p.insert(format!("{enc}.w1"), glorot(&mut rng, channels, h));
        p.insert(format!("{enc}.b1"), Tensor::zeros(vec![h]));
        p.insert(format!("{enc}.w2"), glorot(&mut rng, h, d));
        p.insert(format!("{enc}.b2"), Tensor::zeros(vec![d]));
    }
    for x in 1..=3 {
        p.insert(format!("pyr{x}.w"), near_identity(&mut rng, d, 0.1));
        p.insert(format!("pyr{x}.b"), Tensor::zeros(vec![d]));
    }
    p.insert("node.w", near_identity(&mut rng, d, 0.1));
    p.insert("node.b", Tensor::zeros(vec![d]));
    for x in 1..=3 {
        p.insert(format!("unc{x}.w_mu"), Tensor::identity(d));
        p.insert(format!("unc{x}.w_var"), gaussian(&mut rng, d, d, 0.01));
        p.insert(format!("unc{x}.b_var"), Tensor::full(vec![d], softplus_inv(INIT_VARIANCE)));
    }
    for s in 1..=2 {
        for w in ["w_q", "w_k", "w_v", "w1"] {
            p.insert(format!("int{s}.{w}"), glorot(&mut rng, d, d));
        }
        p.insert(format!("int{s}.b1"), Tensor::zeros(vec![d]));
        p.insert(format!("int{s}.w2"), gaussian(&mut rng, d, d, 0.01));
        p.insert(format!("int{s}.b2"), Tensor::zeros(vec![d]));
    }
    let [h1, h2] = HIDDEN;
    p.insert("clf.w1", glorot(&mut rng, d, h1));
    p.insert("clf.b1", Tensor::zeros(vec![h1]));
    p.insert("clf.w2", glorot(&mut rng, h1, h2));
    p.insert("clf.b2", Tensor::zeros(vec![h2]));
    p.insert("clf.w3", glorot(&mut rng, h2, 2));
    p.insert("clf.b3", Tensor::zeros(vec![2]));
    p
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One bias-corrected update. Blocks without a gradient keep their
    /// value and moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) =
                (params.blocks.get_mut(name), self.m.blocks.get_mut(name), self.v.blocks.get_mut(name))
            else {
                continue;
            };
            let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data());
            for (((p, m), v), &g) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let step = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                *p -= step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_round_trip() {
        let y = softplus_inv(INIT_VARIANCE);
        assert!((crate::autodiff::softplus(y) - INIT_VARIANCE).abs() < 1e-14);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = TrainConfig::default();
        assert_eq!(init_params(&cfg, 8), init_params(&cfg, 8));
        let other = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_ne!(init_params(&cfg, 8), init_params(&other, 8));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first step is lr · sign(g)
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        let mut p = ParamStore::default();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut opt = Adam::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0, -0.5]))]);
        opt.step(&mut p, &grads, &cfg);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-8 && (w[1] + 1.99).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let mut p = init_params(&cfg, 4);
        let before = p.clone();
        let grads: BTreeMap<String, Tensor> =
            p.blocks.iter().map(|(k, v)| (k.clone(), v.map(|x| x * 3.0 + 1.0))).collect();
        let mut opt = Adam::new(&p);
        for _ in 0..5 {
            opt.step(&mut p, &grads, &cfg);
        }
        assert_eq!(p, before);
    }
}
