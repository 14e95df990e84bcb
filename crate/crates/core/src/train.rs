//! Mini-batch gradient descent with decoupled weight decay, and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceSample, NUM_ACTIONS, NUM_NOUNS, NUM_VERBS};
use crate::error::{HorstError, Result};
use crate::gradcheck::{compare_numeric, GradCheckReport};
use crate::graph::Graph;
use crate::layer::LayerConfig;
use crate::metrics::{MetricReport, Tally};
use crate::network::{HeadMode, Labels, LossWeights, Network, NetworkConfig, Session, StemSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FinalStep,
    PerStep,
}

/// Label fed to the action head of a single-label network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Verb,
    Noun,
    Action,
}

impl Target {
    pub fn pick(self, l: Labels) -> usize {
        match self {
            Target::Verb => l.verb,
            Target::Noun => l.noun,
            Target::Action => l.action,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fraction of final epochs over which the rate anneals to zero along a
    /// cosine; 0 keeps it constant.
    pub cosine_tail: f64,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            loss_mode: LossMode::FinalStep,
            clip_norm: Some(5.0),
            cosine_tail: 0.0,
            target: Target::Action,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HorstError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.cosine_tail) {
            return bad("cosine_tail must be in [0, 1]");
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        let tail = (self.cosine_tail * self.epochs as f64).round() as usize;
        let start = self.epochs - tail;
        if tail == 0 || epoch < start {
            return self.learning_rate;
        }
        let progress = (epoch - start) as f64 / tail as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochStats>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,learning_rate\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{}\n",
                e.epoch, e.mean_loss, e.learning_rate
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Labels as seen by the network's heads.
pub fn head_labels(net: &Network, target: Target, labels: Labels) -> Labels {
    match net.config.head {
        HeadMode::MultiHead => labels,
        HeadMode::SingleLabel => Labels {
            action: target.pick(labels),
            ..labels
        },
    }
}

/// Loss and parameter gradients of one sequence, in
/// [`Network::named_tensors`] order.
pub fn sample_gradients(
    net: &Network,
    sample: &SequenceSample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, true);
    let mut state = net.state();
    let steps = net.forward_graph(&mut g, &vars, &mut state, &sample.frames)?;
    let labels = head_labels(net, cfg.target, sample.labels());
    let loss = net.sequence_loss(&mut g, &steps, labels, cfg.loss_mode == LossMode::PerStep)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((
        value,
        vars.vars()
            .into_iter()
            .map(|v| grads.get_or_zeros(v))
            .collect(),
    ))
}

/// Loss of one sequence without building gradients.
pub fn sample_loss(net: &Network, sample: &SequenceSample, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let mut state = net.state();
    let steps = net.forward_graph(&mut g, &vars, &mut state, &sample.frames)?;
    let labels = head_labels(net, cfg.target, sample.labels());
    let loss = net.sequence_loss(&mut g, &steps, labels, cfg.loss_mode == LossMode::PerStep)?;
    Ok(g.value(loss).data()[0])
}

/// Central-difference check of the full backward pass through time, over
/// every learnable tensor of `net`.
pub fn network_grad_check(
    net: &Network,
    sample: &SequenceSample,
    cfg: &TrainConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = sample_gradients(net, sample, cfg)?;
    let params: Vec<Tensor> = net
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    compare_numeric(&params, &analytic, epsilon, |work| {
        let mut probe = net.clone();
        for (dst, src) in probe.tensors_mut().into_iter().zip(work) {
            dst.data_mut().copy_from_slice(src.data());
        }
        sample_loss(&probe, sample, cfg)
    })
}

/// Two-layer multi-head network (C = 2, 8 x 8 frames, order 2) and a random
/// four-frame sequence, small enough to check every parameter numerically.
pub fn grad_check_fixture(seed: u64) -> Result<(Network, SequenceSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetworkConfig {
        input_channels: 1,
        input_center: 0.5,
        stem: vec![StemSpec {
            channels: 2,
            stride: 1,
        }],
        layers: vec![LayerConfig::new(2, 2, 2), LayerConfig::new(2, 2, 2)],
        head: HeadMode::MultiHead,
        num_verbs: NUM_VERBS,
        num_nouns: NUM_NOUNS,
        num_actions: NUM_ACTIONS,
        loss_weights: LossWeights::default(),
        head_conv: false,
    };
    let mut net = Network::new(config, &mut rng)?;
    // Move every tensor off zero so no ReLU input sits exactly on its kink;
    // zero-initialized biases would otherwise do so on cold-start steps.
    for t in net.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let frames = (0..4)
        .map(|_| Tensor::uniform(&[1, 8, 8], 1.0, &mut rng))
        .collect();
    let verb = rng.gen_range(0..NUM_VERBS);
    let noun = rng.gen_range(0..NUM_NOUNS);
    let sample = SequenceSample {
        frames,
        verb,
        noun,
        action: verb * NUM_NOUNS + noun,
        tau_a: 0,
        observe_fraction: 1.0,
    };
    Ok((net, sample))
}

fn largest_grad_block(net: &Network, grads: &[Tensor]) -> (String, f64) {
    net.named_tensors()
        .into_iter()
        .zip(grads)
        .map(|((name, _), g)| (name, g.norm_sq().sqrt()))
        .fold((String::new(), f64::NEG_INFINITY), |best, cur| {
            // NaN norms win so the diagnostic points at them.
            if cur.1.is_nan() || cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
}

/// Applies one averaged, clipped, weight-decayed gradient step.
fn apply_update(net: &mut Network, grads: &mut [Tensor], lr: f64, cfg: &TrainConfig) {
    if let Some(clip) = cfg.clip_norm {
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    let decay = lr * cfg.weight_decay;
    for (p, g) in net.tensors_mut().into_iter().zip(grads.iter()) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d + decay * *w;
        }
    }
}

pub fn train(net: &mut Network, data: &[SequenceSample], cfg: &TrainConfig) -> Result<LossCurve> {
    train_with(net, data, cfg, |_| {})
}

/// Trains in place, calling `on_epoch` after every epoch.
pub fn train_with(
    net: &mut Network,
    data: &[SequenceSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HorstError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_gradients(net, &data[i], cfg)?;
                batch_loss += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            if !batch_loss.is_finite() {
                let (block, norm) = largest_grad_block(net, &grads);
                return Err(HorstError::NonFinite {
                    epoch,
                    step,
                    block,
                    norm,
                });
            }
            loss_sum += batch_loss;
            apply_update(net, &mut grads, lr, cfg);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            learning_rate: lr,
        };
        on_epoch(&stats);
        curve.epochs.push(stats);
    }
    Ok(curve)
}

fn tally_shard(
    net: &Network,
    data: &[SequenceSample],
    k: usize,
    target: Target,
) -> Result<[Tally; 3]> {
    let c = &net.config;
    let mut action = Tally::new(c.num_actions, k);
    let mut verb = Tally::new(c.num_verbs.max(1), k);
    let mut noun = Tally::new(c.num_nouns.max(1), k);
    for s in data {
        let preds = Session::new(net).forward_sequence(&s.frames, true)?;
        let last = preds.last().expect("non-empty sequence");
        let labels = head_labels(net, target, s.labels());
        action.add(&last.action, labels.action)?;
        if let (Some(v), Some(n)) = (&last.verb, &last.noun) {
            verb.add(v, labels.verb)?;
            noun.add(n, labels.noun)?;
        }
    }
    Ok([action, verb, noun])
}

/// Scores the final-step prediction of every sample, sharding the data over
/// `workers` threads.
pub fn evaluate_sharded(
    net: &Network,
    data: &[SequenceSample],
    k: usize,
    target: Target,
    workers: usize,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(HorstError::Config("evaluation set is empty".into()));
    }
    if k == 0 {
        return Err(HorstError::Config("k must be >= 1".into()));
    }
    let workers = workers.clamp(1, data.len());
    let chunk = data.len().div_ceil(workers);
    let shards: Vec<Result<[Tally; 3]>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| scope.spawn(move || tally_shard(net, part, k, target)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut merged: Option<[Tally; 3]> = None;
    for shard in shards {
        let [a, v, n] = shard?;
        merged = Some(match merged {
            None => [a, v, n],
            Some([ma, mv, mn]) => [ma.merge(a)?, mv.merge(v)?, mn.merge(n)?],
        });
    }
    let [action, verb, noun] = merged.expect("at least one shard");
    match net.config.head {
        HeadMode::MultiHead => MetricReport::from_tallies(
            &action,
            &[("verb", &verb), ("noun", &noun), ("action", &action)],
        ),
        HeadMode::SingleLabel => MetricReport::from_tallies(&action, &[]),
    }
}

pub fn evaluate(
    net: &Network,
    data: &[SequenceSample],
    k: usize,
    target: Target,
) -> Result<MetricReport> {
    evaluate_sharded(net, data, k, target, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_tail_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            epochs: 8,
            cosine_tail: 0.25,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rate_at(0), 1.0);
        assert_eq!(cfg.rate_at(5), 1.0);
        assert_eq!(cfg.rate_at(6), 1.0);
        assert!((cfg.rate_at(7) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
