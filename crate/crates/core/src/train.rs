//! A tiny classifier built around one DMSA block, and an SGD trainer with
//! momentum and weight decay. Training runs at 64-bit so loss curves are
//! bit-reproducible per seed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::backward::{
    conv2d_backward, dmsa_backward, dmsa_forward_cached, fully_connected_backward, relu_backward,
    DmsaCache,
};
use crate::dataset::Dataset;
use crate::dmsa::{DmsaConfig, DmsaParams};
use crate::error::{Error, Result};
use crate::gradcheck::Visitable;
use crate::init::{kaiming_normal, seeded_rng};
use crate::ops::{conv2d, fully_connected, relu};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Block configuration of the toy net: 8 channels, 2 splits (3x3 and 5x5
/// extraction), 2 attention groups, reduction 4.
pub fn toy_config() -> DmsaConfig {
    DmsaConfig::with_splits(8, 2, 2, 4).expect("toy config is valid")
}

const TOY_CHANNELS: usize = 8;

/// Parameters of the toy classifier: stem conv, one DMSA block, linear head.
/// The head reads the flattened feature map rather than a pooled vector:
/// the synthetic classes differ by blob position, which global averaging
/// over a translation-equivariant stack would erase.
#[derive(Clone, Debug)]
pub struct ToyParams<T: Element> {
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub dmsa: DmsaParams<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

impl<T: Element> ToyParams<T> {
    pub fn init(resolution: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<ToyParams<T>> {
        if resolution == 0 || classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "toy net wants resolution >= 1 and >= 2 classes, got {resolution}/{classes}"
            )));
        }
        let cfg = toy_config();
        let flat = TOY_CHANNELS * resolution * resolution;
        Ok(ToyParams {
            conv_w: kaiming_normal(&[TOY_CHANNELS, 1, 3, 3], 9, rng),
            conv_b: Tensor::zeros(&[TOY_CHANNELS]),
            dmsa: DmsaParams::init(&cfg, rng)?,
            fc_w: kaiming_normal(&[flat, classes], flat, rng),
            fc_b: Tensor::zeros(&[classes]),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        f("conv.weight".into(), &self.conv_w);
        f("conv.bias".into(), &self.conv_b);
        self.dmsa.visit("dmsa.", &mut |name, t| f(name, t));
        f("fc.weight".into(), &self.fc_w);
        f("fc.bias".into(), &self.fc_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f("conv.weight".into(), &mut self.conv_w);
        f("conv.bias".into(), &mut self.conv_b);
        self.dmsa.visit_mut("dmsa.", &mut |name, t| f(name, t));
        f("fc.weight".into(), &mut self.fc_w);
        f("fc.bias".into(), &mut self.fc_b);
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }
}

impl Visitable for ToyParams<f64> {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<f64>)) {
        self.visit(&mut |name, t| f(name, t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        self.visit_mut(&mut |name, t| f(name, t));
    }
}

pub struct ToyCache<T: Element> {
    pub(crate) conv_out: Tensor<T>,
    pub(crate) relu_out: Tensor<T>,
    pub(crate) dmsa: DmsaCache<T>,
    pub(crate) flat: Tensor<T>,
}

/// Forward pass keeping the intermediates the backward needs; logits are
/// [N, classes].
pub fn toy_forward_cached<T: Element>(
    x: &Tensor<T>,
    params: &ToyParams<T>,
) -> Result<(Tensor<T>, ToyCache<T>)> {
    let cfg = toy_config();
    let conv_out = conv2d(x, &params.conv_w, Some(&params.conv_b), 1, 1, 1)?;
    let relu_out = relu(&conv_out);
    let (dmsa_out, dmsa) = dmsa_forward_cached(&relu_out, &cfg, &params.dmsa, 1)?;
    let n = dmsa_out.dims()[0];
    let flat_len = dmsa_out.numel() / n;
    if flat_len != params.fc_w.dims()[0] {
        return Err(Error::ShapeMismatch(format!(
            "flattened features {flat_len} do not match head input {}",
            params.fc_w.dims()[0]
        )));
    }
    let flat = dmsa_out.reshape(&[n, flat_len])?;
    let logits = fully_connected(&flat, &params.fc_w, &params.fc_b)?;
    Ok((logits, ToyCache { conv_out, relu_out, dmsa, flat }))
}

pub fn toy_forward<T: Element>(x: &Tensor<T>, params: &ToyParams<T>) -> Result<Tensor<T>> {
    Ok(toy_forward_cached(x, params)?.0)
}

/// Backward from an upstream logits gradient; returns parameter gradients in
/// a ToyParams-shaped container.
pub fn toy_backward<T: Element>(
    x: &Tensor<T>,
    params: &ToyParams<T>,
    cache: &ToyCache<T>,
    dlogits: &Tensor<T>,
) -> Result<ToyParams<T>> {
    let cfg = toy_config();
    let (gflat, gfc_w, gfc_b) = fully_connected_backward(&cache.flat, &params.fc_w, dlogits)?;
    let gdmsa_out = gflat.reshape(cache.relu_out.dims())?;
    let (grelu_out, gdmsa) =
        dmsa_backward(&cache.relu_out, &cfg, &params.dmsa, &cache.dmsa, 1, &gdmsa_out)?;
    let gconv_out = relu_backward(&cache.conv_out, &grelu_out)?;
    let (_, gconv_w, gconv_b) = conv2d_backward(x, &params.conv_w, 1, 1, 1, &gconv_out)?;
    Ok(ToyParams {
        conv_w: gconv_w,
        conv_b: gconv_b,
        dmsa: gdmsa,
        fc_w: gfc_w,
        fc_b: gfc_b,
    })
}

/// Mean softmax cross-entropy and its logits gradient (softmax - onehot)/N.
pub fn softmax_cross_entropy(
    logits: &Tensor<f64>,
    labels: &[usize],
) -> Result<(f64, Tensor<f64>)> {
    let (n, m) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut dlogits = Tensor::zeros(&[n, m]);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= m {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {m} classes"
            )));
        }
        let row = &logits.data()[i * m..(i + 1) * m];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - mx).exp();
        }
        loss += denom.ln() + mx - row[label];
        let drow = &mut dlogits.data_mut()[i * m..(i + 1) * m];
        for (j, (&v, d)) in row.iter().zip(drow.iter_mut()).enumerate() {
            let p = (v - mx).exp() / denom;
            *d = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dlogits))
}

/// SGD hyperparameters; the learning rate is divided by `decay_factor` when
/// a 1-based epoch number listed in `decay_epochs` begins.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Stop once the epoch train loss drops below this.
    pub early_stop_loss: f64,
    /// Seed of the per-epoch batch shuffle.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 200,
            decay_epochs: vec![100, 150],
            decay_factor: 10.0,
            early_stop_loss: 0.05,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must lie in [0,1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "decay factor {} must be positive",
                self.decay_factor
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            )));
        }
        Ok(())
    }
}

/// One row of the loss curve; losses are cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// CSV rendering of a loss curve: epoch, train_loss, test_loss, test_accuracy.
pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,test_loss,test_accuracy\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.test_loss, r.test_accuracy
        ));
    }
    out
}

fn batch_of(images: &Tensor<f64>, labels: &[usize], idx: &[usize]) -> (Tensor<f64>, Vec<usize>) {
    let (res_h, res_w) = (images.dims()[2], images.dims()[3]);
    let plane = res_h * res_w;
    let mut x = Tensor::zeros(&[idx.len(), 1, res_h, res_w]);
    let mut y = Vec::with_capacity(idx.len());
    for (bi, &i) in idx.iter().enumerate() {
        x.data_mut()[bi * plane..(bi + 1) * plane]
            .copy_from_slice(&images.data()[i * plane..(i + 1) * plane]);
        y.push(labels[i]);
    }
    (x, y)
}

/// Mean loss and accuracy of the current parameters over a labeled set.
pub fn evaluate(
    params: &ToyParams<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = labels.len();
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut at = 0;
    while at < n {
        let end = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..end).collect();
        let (x, y) = batch_of(images, labels, &idx);
        let logits = toy_forward(&x, params)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss * y.len() as f64;
        let m = logits.dims()[1];
        for (bi, &label) in y.iter().enumerate() {
            let row = &logits.data()[bi * m..(bi + 1) * m];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if pred == label {
                hits += 1;
            }
        }
        at = end;
    }
    Ok((loss_sum / n as f64, hits as f64 / n as f64))
}

/// SGD with momentum and weight decay on the toy classifier. Records one row
/// per epoch (train loss is the running average over that epoch's batches)
/// and stops early once it drops under `early_stop_loss`.
pub fn train_toy(
    params: &mut ToyParams<f64>,
    ds: &Dataset<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let n = ds.train_len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    if ds.classes > params.fc_w.dims()[1] {
        return Err(Error::InvalidConfig(format!(
            "{} classes exceed the {}-way head",
            ds.classes,
            params.fc_w.dims()[1]
        )));
    }
    let mut velocity: Vec<Tensor<f64>> = Vec::new();
    params.visit_params(&mut |_, t| velocity.push(Tensor::zeros(t.dims())));
    let mut rng = seeded_rng(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr /= cfg.decay_factor;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch_of(&ds.train_images, &ds.train_labels, chunk);
            let (logits, cache) = toy_forward_cached(&x, params)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected(format!(
                    "train loss {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss * y.len() as f64;
            let grads = toy_backward(&x, params, &cache, &dlogits)?;
            let mut gvec: Vec<Tensor<f64>> = Vec::with_capacity(velocity.len());
            grads.visit_params(&mut |_, t| gvec.push(t.clone()));
            let mut pi = 0usize;
            params.visit_params_mut(&mut |_, t| {
                let v = &mut velocity[pi];
                let g = &gvec[pi];
                for ((tv, vv), &gv) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    let step = gv + cfg.weight_decay * *tv;
                    *vv = cfg.momentum * *vv + step;
                    *tv -= lr * *vv;
                }
                pi += 1;
            });
        }
        let train_loss = loss_sum / n as f64;
        let (test_loss, test_accuracy) =
            evaluate(params, &ds.test_images, &ds.test_labels, cfg.batch_size)?;
        records.push(EpochRecord { epoch, train_loss, test_loss, test_accuracy });
        if train_loss < cfg.early_stop_loss {
            break;
        }
    }
    Ok(records)
}
