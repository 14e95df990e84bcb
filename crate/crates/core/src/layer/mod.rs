//! The recurrent space-time attention layer.
//!
//! One call to [`HorstLayer::step`] consumes the current input map, attends
//! over the queued keys and values of up to `order` previous steps, pushes a
//! new key/value pair built from `[h, a]`, and emits the layer output.
//! Because the queued keys are computed from the attention output, each new
//! key depends on all keys before it: the layer is a recurrence of order
//! `order`.

pub mod attention;
pub mod config;
pub mod params;
pub mod queue;

use rand::Rng;

pub use attention::{
    spatial_attention, spatial_filter, st_att, temporal_attention, AttentionTrace,
};
pub use config::{AttentionMode, LayerConfig, RoutingMode};
pub use params::{LayerParams, LayerVars, NormParams, NormVars};
pub use queue::KvQueue;

use crate::error::{HorstError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recurrent state of one layer within one graph.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub queue: KvQueue<Var>,
    /// Steps taken since the last reset.
    pub steps: usize,
}

impl LayerState {
    pub fn new(order: usize) -> Self {
        LayerState {
            queue: KvQueue::new(order),
            steps: 0,
        }
    }

    /// Empties the queue; capacity is kept.
    pub fn reset(&mut self) {
        self.queue.clear();
        self.steps = 0;
    }
}

/// Everything one step produces.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub y: Var,
    pub h: Var,
    /// Post-attention features.
    pub a: Var,
    /// Raw attention output before the post-attention transform.
    pub a_raw: Var,
    pub key: Var,
    pub value: Var,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorstLayer {
    pub config: LayerConfig,
    pub params: LayerParams,
}

/// `Conv, LayerNorm` block.
pub(crate) fn conv_norm(
    g: &mut Graph,
    x: Var,
    kernel: Var,
    norm: NormVars,
    stride: usize,
) -> Result<Var> {
    let c = g.conv2d(x, kernel, stride)?;
    g.layer_norm(c, norm.gamma, norm.beta, LAYER_NORM_EPS)
}

/// `Conv, LayerNorm, ReLU` block.
pub(crate) fn conv_norm_relu(
    g: &mut Graph,
    x: Var,
    kernel: Var,
    norm: NormVars,
    stride: usize,
) -> Result<Var> {
    let n = conv_norm(g, x, kernel, norm, stride)?;
    Ok(g.relu(n))
}

impl HorstLayer {
    pub fn new<R: Rng + ?Sized>(config: LayerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = LayerParams::init(&config, rng);
        Ok(HorstLayer { config, params })
    }

    pub fn state(&self) -> LayerState {
        LayerState::new(self.config.order)
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> LayerVars {
        self.params.bind(g, requires_grad)
    }

    /// Working resolution for an input of `h x w`.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h.div_ceil(self.config.stride),
            w.div_ceil(self.config.stride),
        )
    }

    pub fn step(
        &self,
        g: &mut Graph,
        vars: &LayerVars,
        x: Var,
        state: &mut LayerState,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        let (cin, _, _) = g
            .value(x)
            .chw()
            .ok_or_else(|| HorstError::shape("layer_step", format!("input {:?}", g.shape(x))))?;
        if cin != cfg.channels_in {
            return Err(HorstError::shape(
                "layer_step",
                format!(
                    "input has {cin} channels, layer expects {}",
                    cfg.channels_in
                ),
            ));
        }
        let timestep = state.steps;

        let h = conv_norm_relu(g, x, vars.theta_x, vars.norm_x, cfg.stride)?;
        let (c, hh, ww) = g.value(h).chw().expect("conv output");
        if let Some((k, _)) = state.queue.iter().next() {
            if g.shape(*k) != [c, hh, ww] {
                return Err(HorstError::shape(
                    "layer_step",
                    format!(
                        "queued state {:?} does not match working resolution {:?}",
                        g.shape(*k),
                        [c, hh, ww]
                    ),
                ));
            }
        }
        let q = conv_norm(g, h, vars.theta_omega, vars.norm_omega, 1)?;

        let (a_raw, trace) = if state.queue.is_empty() {
            (
                g.constant(Tensor::zeros(&[c, hh, ww])),
                AttentionTrace::empty(timestep, hh, ww),
            )
        } else {
            st_att(
                g,
                q,
                &state.queue.keys(),
                &state.queue.values(),
                vars.theta_q,
                vars.theta_k,
                cfg.attention_mode,
                timestep,
            )?
        };
        let a = conv_norm_relu(g, a_raw, vars.theta_v, vars.norm_v, 1)?;

        let (key_in, value_in) = match cfg.routing_mode {
            RoutingMode::ConcatToBoth => {
                let z = g.concat(&[h, a])?;
                (z, z)
            }
            RoutingMode::SplitHToV => {
                let zeros = g.constant(Tensor::zeros(&[c, hh, ww]));
                (g.concat(&[a_raw, zeros])?, g.concat(&[h, zeros])?)
            }
        };
        let key = conv_norm(g, key_in, vars.theta_phi, vars.norm_phi, 1)?;
        let value = conv_norm(g, value_in, vars.theta_psi, vars.norm_psi, 1)?;
        state.queue.push(key, value);

        let skip = if cfg.stride == 1 { x } else { g.avg_pool2(x)? };
        let fused = g.concat(&[skip, h, a])?;
        let y = conv_norm_relu(g, fused, vars.theta_y, vars.norm_y, 1)?;
        state.steps += 1;

        Ok(StepOutput {
            y,
            h,
            a,
            a_raw,
            key,
            value,
            trace,
        })
    }
}

/// Clears a state in place and returns it.
pub fn reset_state(mut state: LayerState) -> LayerState {
    state.reset();
    state
}
