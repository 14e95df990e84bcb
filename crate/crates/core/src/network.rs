//! Stem, stacked recurrent attention layers, and classifier heads.
//!
//! Heads read the topmost layer: the noun head sees `h(t)`, the verb head the
//! post-attention features `a(t)`, and the action head `[h(t), a(t), y(t)]`.
//! Each head is a global average pool followed by one linear map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};
use crate::graph::{Graph, Var};
use crate::layer::params::init_kernel;
use crate::layer::{
    conv_norm_relu, AttentionTrace, HorstLayer, LayerConfig, LayerState, LayerVars, NormParams,
    NormVars,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Only the action head is built and trained.
    SingleLabel,
    /// Verb, noun and action heads with the weighted three-term loss.
    MultiHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

fn default_input_channels() -> usize {
    1
}

fn default_input_center() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Subtracted from every frame value before the stem. Bias-free
    /// convolutions followed by per-pixel normalization map every constant
    /// patch of a positive image to the same features; centering the input
    /// keeps regions brighter and darker than the center apart.
    #[serde(default = "default_input_center")]
    pub input_center: f64,
    #[serde(default)]
    pub stem: Vec<StemSpec>,
    pub layers: Vec<LayerConfig>,
    pub head: HeadMode,
    #[serde(default)]
    pub num_verbs: usize,
    #[serde(default)]
    pub num_nouns: usize,
    pub num_actions: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Extra `Conv, LayerNorm, ReLU` on `y(t)` before the action head.
    #[serde(default)]
    pub head_conv: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HorstError::Config(m));
        if self.input_channels == 0 {
            return bad("input_channels must be >= 1".into());
        }
        if !self.input_center.is_finite() {
            return bad("input_center must be finite".into());
        }
        if self.layers.is_empty() {
            return bad("network needs at least one layer".into());
        }
        let mut ch = self.input_channels;
        for (i, s) in self.stem.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return bad(format!("stem {i}: channels and stride must be >= 1"));
            }
            ch = s.channels;
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if l.channels_in != ch {
                return bad(format!(
                    "layer {i} expects {} input channels but receives {ch}",
                    l.channels_in
                ));
            }
            ch = l.channels_out;
        }
        if self.num_actions == 0 {
            return bad("num_actions must be >= 1".into());
        }
        if self.head == HeadMode::MultiHead && (self.num_verbs == 0 || self.num_nouns == 0) {
            return bad("multi_head needs num_verbs and num_nouns >= 1".into());
        }
        let w = self.loss_weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub norm: NormParams,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub kernel: Var,
    pub norm: NormVars,
    pub stride: usize,
}

impl ConvBlock {
    fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        ConvBlock {
            kernel: init_kernel(c_out, c_in, 1.0, rng),
            norm: NormParams::new(c_out),
            stride,
        }
    }

    fn bind(&self, g: &mut Graph, requires_grad: bool) -> ConvBlockVars {
        ConvBlockVars {
            kernel: g.leaf(self.kernel.clone(), requires_grad),
            norm: self.norm.bind(g, requires_grad),
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::uniform(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    fn bind(&self, g: &mut Graph, requires_grad: bool) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone(), requires_grad),
            bias: g.leaf(self.bias.clone(), requires_grad),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub verb: Option<Linear>,
    pub noun: Option<Linear>,
    pub action: Linear,
    pub conv: Option<ConvBlock>,
}

#[derive(Clone, Debug)]
pub struct NetVars {
    pub stem: Vec<ConvBlockVars>,
    pub layers: Vec<LayerVars>,
    pub verb: Option<LinearVars>,
    pub noun: Option<LinearVars>,
    pub action: LinearVars,
    pub head_conv: Option<ConvBlockVars>,
}

impl NetVars {
    /// Same order as [`Network::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for s in &self.stem {
            out.extend([s.kernel, s.norm.gamma, s.norm.beta]);
        }
        for l in &self.layers {
            out.extend(l.vars());
        }
        if let Some(c) = &self.head_conv {
            out.extend([c.kernel, c.norm.gamma, c.norm.beta]);
        }
        for lin in [&self.verb, &self.noun].into_iter().flatten() {
            out.extend([lin.weight, lin.bias]);
        }
        out.extend([self.action.weight, self.action.bias]);
        out
    }
}

/// Ground-truth class indices of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// Logit nodes of one timestep.
#[derive(Clone, Debug)]
pub struct StepLogits {
    pub verb: Option<Var>,
    pub noun: Option<Var>,
    pub action: Var,
    /// One trace per layer, bottom first.
    pub traces: Vec<AttentionTrace>,
}

/// Plain-valued output of one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub verb: Option<Vec<f64>>,
    pub noun: Option<Vec<f64>>,
    pub action: Vec<f64>,
    pub traces: Vec<AttentionTrace>,
}

impl Prediction {
    fn read(g: &Graph, s: &StepLogits) -> Self {
        let v = |x: Var| g.value(x).data().to_vec();
        Prediction {
            verb: s.verb.map(v),
            noun: s.noun.map(v),
            action: v(s.action),
            traces: s.traces.clone(),
        }
    }
}

/// Recurrent state of a whole network within one graph.
#[derive(Clone, Debug)]
pub struct NetState {
    pub layers: Vec<LayerState>,
    frame_shape: Option<Vec<usize>>,
}

impl NetState {
    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(LayerState::reset);
        self.frame_shape = None;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub stem: Vec<ConvBlock>,
    pub layers: Vec<HorstLayer>,
    pub heads: Heads,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ch = config.input_channels;
        let mut stem = Vec::new();
        for s in &config.stem {
            stem.push(ConvBlock::init(ch, s.channels, s.stride, rng));
            ch = s.channels;
        }
        let layers = config
            .layers
            .iter()
            .map(|l| HorstLayer::new(l.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        let top = config.layers.last().expect("validated");
        let c = top.channels_in;
        let co = top.channels_out;
        let conv = config.head_conv.then(|| ConvBlock::init(co, co, 1, rng));
        let (verb, noun) = match config.head {
            HeadMode::MultiHead => (
                Some(Linear::init(c, config.num_verbs, rng)),
                Some(Linear::init(c, config.num_nouns, rng)),
            ),
            HeadMode::SingleLabel => (None, None),
        };
        let action = Linear::init(2 * c + co, config.num_actions, rng);
        Ok(Network {
            config,
            stem,
            layers,
            heads: Heads {
                verb,
                noun,
                action,
                conv,
            },
        })
    }

    pub fn state(&self) -> NetState {
        NetState {
            layers: self.layers.iter().map(HorstLayer::state).collect(),
            frame_shape: None,
        }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> NetVars {
        NetVars {
            stem: self.stem.iter().map(|s| s.bind(g, requires_grad)).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(g, requires_grad))
                .collect(),
            head_conv: self.heads.conv.as_ref().map(|c| c.bind(g, requires_grad)),
            verb: self.heads.verb.as_ref().map(|l| l.bind(g, requires_grad)),
            noun: self.heads.noun.as_ref().map(|l| l.bind(g, requires_grad)),
            action: self.heads.action.bind(g, requires_grad),
        }
    }

    /// Every learnable tensor with a dotted name, in a fixed order shared by
    /// [`Network::tensors_mut`] and [`NetVars::vars`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stem.iter().enumerate() {
            out.push((format!("stem.{i}.kernel"), &s.kernel));
            out.push((format!("stem.{i}.norm.gamma"), &s.norm.gamma));
            out.push((format!("stem.{i}.norm.beta"), &s.norm.beta));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.params.named_tensors() {
                out.push((format!("layer.{i}.{n}"), t));
            }
        }
        if let Some(c) = &self.heads.conv {
            out.push(("head.conv.kernel".into(), &c.kernel));
            out.push(("head.conv.norm.gamma".into(), &c.norm.gamma));
            out.push(("head.conv.norm.beta".into(), &c.norm.beta));
        }
        for (name, lin) in [("verb", &self.heads.verb), ("noun", &self.heads.noun)] {
            if let Some(lin) = lin {
                out.push((format!("head.{name}.weight"), &lin.weight));
                out.push((format!("head.{name}.bias"), &lin.bias));
            }
        }
        out.push(("head.action.weight".into(), &self.heads.action.weight));
        out.push(("head.action.bias".into(), &self.heads.action.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stem {
            out.extend([&mut s.kernel, &mut s.norm.gamma, &mut s.norm.beta]);
        }
        for l in &mut self.layers {
            out.extend(l.params.tensors_mut());
        }
        if let Some(c) = &mut self.heads.conv {
            out.extend([&mut c.kernel, &mut c.norm.gamma, &mut c.norm.beta]);
        }
        for lin in [&mut self.heads.verb, &mut self.heads.noun]
            .into_iter()
            .flatten()
        {
            out.extend([&mut lin.weight, &mut lin.bias]);
        }
        out.extend([&mut self.heads.action.weight, &mut self.heads.action.bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs one frame through stem, layers and heads.
    pub fn step(
        &self,
        g: &mut Graph,
        vars: &NetVars,
        state: &mut NetState,
        frame: &Tensor,
    ) -> Result<StepLogits> {
        match &state.frame_shape {
            Some(s) if s.as_slice() != frame.shape() => {
                return Err(HorstError::shape(
                    "forward_sequence",
                    format!(
                        "frame {:?} differs from sequence frames {s:?}",
                        frame.shape()
                    ),
                ))
            }
            Some(_) => {}
            None => state.frame_shape = Some(frame.shape().to_vec()),
        }
        let center = self.config.input_center;
        let mut x = g.constant(frame.map(|v| v - center));
        for s in &vars.stem {
            x = conv_norm_relu(g, x, s.kernel, s.norm, s.stride)?;
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut last = None;
        for ((layer, lv), st) in self.layers.iter().zip(&vars.layers).zip(&mut state.layers) {
            let out = layer.step(g, lv, x, st)?;
            x = out.y;
            traces.push(out.trace.clone());
            last = Some(out);
        }
        let top = last.expect("validated: at least one layer");

        let h_pool = g.spatial_avg_pool(top.h)?;
        let a_pool = g.spatial_avg_pool(top.a)?;
        let y = match &vars.head_conv {
            Some(c) => conv_norm_relu(g, top.y, c.kernel, c.norm, c.stride)?,
            None => top.y,
        };
        let y_pool = g.spatial_avg_pool(y)?;
        let joint = g.concat(&[h_pool, a_pool, y_pool])?;
        let action = g.linear(joint, vars.action.weight, vars.action.bias)?;
        let verb = vars
            .verb
            .map(|l| g.linear(a_pool, l.weight, l.bias))
            .transpose()?;
        let noun = vars
            .noun
            .map(|l| g.linear(h_pool, l.weight, l.bias))
            .transpose()?;
        Ok(StepLogits {
            verb,
            noun,
            action,
            traces,
        })
    }

    /// Runs all frames on `g`, one [`StepLogits`] per frame.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &NetVars,
        state: &mut NetState,
        frames: &[Tensor],
    ) -> Result<Vec<StepLogits>> {
        if frames.is_empty() {
            return Err(HorstError::shape("forward_sequence", "empty frame list"));
        }
        frames
            .iter()
            .map(|f| self.step(g, vars, state, f))
            .collect()
    }

    /// Inference on a fresh state: one [`Prediction`] per frame.
    pub fn forward_sequence(&self, frames: &[Tensor]) -> Result<Vec<Prediction>> {
        Session::new(self).forward_sequence(frames, true)
    }

    /// Training loss for one sequence: final-step loss, or the mean over all
    /// steps when `per_step` is set.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        steps: &[StepLogits],
        labels: Labels,
        per_step: bool,
    ) -> Result<Var> {
        let chosen: &[StepLogits] = if per_step {
            steps
        } else {
            std::slice::from_ref(
                steps
                    .last()
                    .ok_or_else(|| HorstError::shape("loss", "no steps"))?,
            )
        };
        let losses = chosen
            .iter()
            .map(|s| self.step_loss(g, s, labels))
            .collect::<Result<Vec<_>>>()?;
        let total = g.add_n(&losses)?;
        Ok(g.scale(total, 1.0 / losses.len() as f64))
    }

    /// Cross-entropy loss of one step according to the head mode.
    pub fn step_loss(&self, g: &mut Graph, s: &StepLogits, labels: Labels) -> Result<Var> {
        check_label("action", labels.action, self.config.num_actions)?;
        match self.config.head {
            HeadMode::SingleLabel => g.cross_entropy(s.action, labels.action),
            HeadMode::MultiHead => {
                check_label("verb", labels.verb, self.config.num_verbs)?;
                check_label("noun", labels.noun, self.config.num_nouns)?;
                let w = self.config.loss_weights;
                let mut terms = Vec::new();
                for (weight, logits, label) in [
                    (w.alpha, s.verb.expect("multi-head verb"), labels.verb),
                    (w.beta, s.noun.expect("multi-head noun"), labels.noun),
                    (w.gamma, s.action, labels.action),
                ] {
                    if weight != 0.0 {
                        let ce = g.cross_entropy(logits, label)?;
                        terms.push(g.scale(ce, weight));
                    }
                }
                if terms.is_empty() {
                    let zero = g.constant(Tensor::scalar(0.0));
                    return Ok(zero);
                }
                g.add_n(&terms)
            }
        }
    }
}

/// Holds a graph and recurrent state across calls so a sequence can be fed
/// in pieces.
pub struct Session<'n> {
    net: &'n Network,
    graph: Graph,
    vars: NetVars,
    state: NetState,
}

impl<'n> Session<'n> {
    pub fn new(net: &'n Network) -> Self {
        let mut graph = Graph::new();
        let vars = net.bind(&mut graph, false);
        Session {
            net,
            graph,
            vars,
            state: net.state(),
        }
    }

    pub fn forward_sequence(&mut self, frames: &[Tensor], reset: bool) -> Result<Vec<Prediction>> {
        if reset {
            *self = Session::new(self.net);
        }
        let steps = self
            .net
            .forward_graph(&mut self.graph, &self.vars, &mut self.state, frames)?;
        Ok(steps
            .iter()
            .map(|s| Prediction::read(&self.graph, s))
            .collect())
    }
}

fn check_label(head: &'static str, label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(HorstError::LabelOutOfRange {
            head,
            label,
            classes,
        });
    }
    Ok(())
}

/// `log(sum exp(logits)) - logits[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label("logits", label, logits.len())?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `alpha * CE_verb + beta * CE_noun + gamma * CE_action` on plain logits.
pub fn multi_head_loss(pred: &Prediction, labels: Labels, weights: LossWeights) -> Result<f64> {
    let missing = || HorstError::Config("multi_head_loss needs verb and noun logits".into());
    let verb = pred.verb.as_ref().ok_or_else(missing)?;
    let noun = pred.noun.as_ref().ok_or_else(missing)?;
    let lv = cross_entropy(verb, labels.verb)?;
    let ln = cross_entropy(noun, labels.noun)?;
    let la = cross_entropy(&pred.action, labels.action)?;
    Ok(weights.alpha * lv + weights.beta * ln + weights.gamma * la)
}

/// Indices of the `k` largest logits, best first; ties go to the lower index.
pub fn predict_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(HorstError::Config(format!(
            "k = {k} outside 1..={}",
            logits.len()
        )));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(verb: Vec<f64>, noun: Vec<f64>, action: Vec<f64>) -> Prediction {
        Prediction {
            verb: Some(verb),
            noun: Some(noun),
            action,
            traces: Vec::new(),
        }
    }

    #[test]
    fn uniform_logits_loss() {
        let p = pred(vec![0.0; 4], vec![0.0; 3], vec![0.0; 12]);
        let labels = Labels {
            verb: 1,
            noun: 2,
            action: 5,
        };
        let l = multi_head_loss(&p, labels, LossWeights::default()).unwrap();
        let expected = 4f64.ln() + 3f64.ln() + 12f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 144f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_loss_near_zero() {
        let one_hot =
            |n: usize, i: usize| (0..n).map(|j| if j == i { 20.0 } else { 0.0 }).collect();
        let p = pred(one_hot(4, 0), one_hot(3, 1), one_hot(12, 1));
        let l = multi_head_loss(
            &p,
            Labels {
                verb: 0,
                noun: 1,
                action: 1,
            },
            LossWeights::default(),
        )
        .unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn verb_only_weights() {
        let p = pred(
            vec![0.3, -1.0, 2.0, 0.0],
            vec![1.0, 0.0, 0.5],
            vec![0.1; 12],
        );
        let labels = Labels {
            verb: 2,
            noun: 0,
            action: 3,
        };
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let l = multi_head_loss(&p, labels, w).unwrap();
        assert_eq!(l, cross_entropy(p.verb.as_ref().unwrap(), 2).unwrap());
    }

    #[test]
    fn out_of_range_label() {
        let p = pred(vec![0.0; 4], vec![0.0; 3], vec![0.0; 12]);
        let labels = Labels {
            verb: 4,
            noun: 0,
            action: 0,
        };
        assert!(matches!(
            multi_head_loss(&p, labels, LossWeights::default()),
            Err(HorstError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn topk_cases() {
        assert_eq!(predict_topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(predict_topk(&[0.0, 0.0, 0.0], 2).unwrap(), vec![0, 1]);
        let mut all = predict_topk(&[3.0, -1.0, 2.0, 7.0], 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(predict_topk(&[1.0], 0).is_err());
        assert!(predict_topk(&[1.0], 2).is_err());
    }

    #[test]
    fn config_rejects_broken_chain() {
        let cfg = NetworkConfig {
            input_channels: 1,
            input_center: 0.5,
            stem: vec![StemSpec {
                channels: 4,
                stride: 2,
            }],
            layers: vec![LayerConfig::new(4, 6, 2), LayerConfig::new(4, 4, 2)],
            head: HeadMode::SingleLabel,
            num_verbs: 0,
            num_nouns: 0,
            num_actions: 4,
            loss_weights: LossWeights::default(),
            head_conv: false,
        };
        assert!(cfg.validate().is_err());
    }
}
