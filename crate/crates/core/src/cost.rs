//! Parameter and multiplication accounting for one layer, attention cost
//! comparison, and an instrumented shadow of the layer step that counts
//! every multiply its convolutions perform.
//!
//! Counts follow the per-transformation table of the layer: normalization and
//! activation costs are left out, and every 3x3 tap is counted, including
//! taps that land on zero padding.

use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};
use crate::graph::{Graph, Var};
use crate::layer::{
    AttentionMode, HorstLayer, LayerConfig, NormParams, RoutingMode, LAYER_NORM_EPS,
};
use crate::tensor::Tensor;

pub const OMITTED_COSTS: &str = "normalization and activation costs are not counted";

pub const ROW_X_TO_H: &str = "x_to_h";
pub const ROW_OMEGA: &str = "omega";
pub const ROW_PHI: &str = "phi";
pub const ROW_PSI: &str = "psi";
pub const ROW_F_Q: &str = "f_q";
pub const ROW_F_K: &str = "f_k";
pub const ROW_ST_ATT: &str = "st_att";
pub const ROW_POST: &str = "post_st_att";
pub const ROW_OUTPUT: &str = "output_f";

/// Rows that are convolutions, in report order.
pub const CONV_ROWS: [&str; 8] = [
    ROW_X_TO_H, ROW_OMEGA, ROW_PHI, ROW_PSI, ROW_F_Q, ROW_F_K, ROW_POST, ROW_OUTPUT,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub module: String,
    /// `None` for rows without parameters.
    pub params: Option<u128>,
    pub mulops: u128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub channels_in: usize,
    pub channels_out: usize,
    pub height: usize,
    pub width: usize,
    pub order: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u128,
    pub total_mulops: u128,
    /// Dot-product multiplies of the decomposed attention alone,
    /// `HWS C + S HWC`, shown next to the `st_att` row.
    pub st_att_dot_product_mulops: u128,
    pub note: String,
}

impl CostReport {
    pub fn row(&self, module: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.module == module)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "layer C_in={} C_out={} H={} W={} S={}\n",
            self.channels_in, self.channels_out, self.height, self.width, self.order
        );
        out.push_str(&format!(
            "{:<14}{:>16}{:>20}\n",
            "module", "params", "mulops"
        ));
        for r in &self.rows {
            let p = r.params.map_or_else(|| "-".to_string(), |p| p.to_string());
            out.push_str(&format!("{:<14}{:>16}{:>20}\n", r.module, p, r.mulops));
        }
        out.push_str(&format!(
            "{:<14}{:>16}{:>20}\n",
            "total", self.total_params, self.total_mulops
        ));
        out.push_str(&format!(
            "st_att dot products only (HWS*C + S*HWC): {}\n",
            self.st_att_dot_product_mulops
        ));
        out.push_str(&format!("note: {}\n", self.note));
        out
    }
}

/// Evaluates the per-transformation parameter and multiply formulas for a
/// layer working at `h x w`.
pub fn count_params_mulops(config: &LayerConfig, h: usize, w: usize) -> Result<CostReport> {
    config.validate()?;
    if h == 0 || w == 0 {
        return Err(HorstError::Config("height and width must be >= 1".into()));
    }
    let c = config.channels_in as u128;
    let co = config.channels_out as u128;
    let s = config.order as u128;
    let hw = (h * w) as u128;
    let row = |module: &str, params: Option<u128>, mulops: u128| CostRow {
        module: module.to_string(),
        params,
        mulops,
    };
    let rows = vec![
        row(ROW_X_TO_H, Some(c * c * 9), 9 * c * c * hw),
        row(ROW_OMEGA, Some(c * c * 9), 9 * c * c * hw),
        row(ROW_PHI, Some(2 * c * c * 9), 18 * s * c * c * hw),
        row(ROW_PSI, Some(2 * c * c * 9), 18 * s * c * c * hw),
        row(ROW_F_Q, Some(18), 18 * hw),
        row(ROW_F_K, Some(18), 18 * s * hw),
        row(ROW_ST_ATT, None, (6 * s + 1) * c * hw),
        row(ROW_POST, Some(c * c * 9), 9 * c * c * hw),
        row(ROW_OUTPUT, Some(3 * c * co * 9), 27 * c * co * hw),
    ];
    let total_params = rows.iter().filter_map(|r| r.params).sum();
    let total_mulops = rows.iter().map(|r| r.mulops).sum();
    Ok(CostReport {
        channels_in: config.channels_in,
        channels_out: config.channels_out,
        height: h,
        width: w,
        order: config.order,
        rows,
        total_params,
        total_mulops,
        st_att_dot_product_mulops: hw * s * c + s * hw * c,
        note: OMITTED_COSTS.to_string(),
    })
}

/// Multiply counts of three ways to attend over `S` queued `C x H x W` states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityTriple {
    /// `(HW)^(S+1) C`; `u128::MAX` when `joint_saturated`.
    pub joint: u128,
    pub joint_saturated: bool,
    /// `S HWC`
    pub full_temporal: u128,
    /// `HWS C + S HWC`
    pub decomposed: u128,
}

pub fn attention_complexity(h: usize, w: usize, c: usize, s: usize) -> Result<ComplexityTriple> {
    if h == 0 || w == 0 || c == 0 || s == 0 {
        return Err(HorstError::Config(format!(
            "attention_complexity needs H, W, C, S >= 1, got H={h} W={w} C={c} S={s}"
        )));
    }
    let (hw, c, s128) = ((h * w) as u128, c as u128, s as u128);
    let joint = u32::try_from(s + 1)
        .ok()
        .and_then(|e| hw.checked_pow(e))
        .and_then(|p| p.checked_mul(c));
    let full_temporal = s128 * hw * c;
    Ok(ComplexityTriple {
        joint: joint.unwrap_or(u128::MAX),
        joint_saturated: joint.is_none(),
        full_temporal,
        decomposed: hw * s128 * c + full_temporal,
    })
}

/// 3x3 zero-padded convolution by direct loops, counting one multiply per
/// kernel tap and output position, padded taps included.
pub fn counting_conv(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<(Tensor, u128)> {
    let (c, h, w) = input
        .chw()
        .ok_or_else(|| HorstError::shape("counting_conv", format!("input {:?}", input.shape())))?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != c || ks[2] != 3 || ks[3] != 3 || stride == 0 {
        return Err(HorstError::shape(
            "counting_conv",
            format!(
                "kernel {ks:?} for input {:?}, stride {stride}",
                input.shape()
            ),
        ));
    }
    let co = ks[0];
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; co * ho * wo];
    let mut count = 0u128;
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let r = (i * stride + di) as isize - 1;
                            let q = (j * stride + dj) as isize - 1;
                            let v = if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + r as usize) * w + q as usize]
                            };
                            acc += k[((o * c + ci) * 3 + di) * 3 + dj] * v;
                            count += 1;
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    Ok((Tensor::new(vec![co, ho, wo], out)?, count))
}

/// Result of one instrumented step.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowStep {
    /// `(row name, multiplies)` for every convolution row.
    pub conv_mulops: Vec<(String, u128)>,
    pub y: Tensor,
    /// Keys recomputed from the raw queue inputs, newest first.
    pub keys: Vec<Tensor>,
    /// Key and value inputs this step would push.
    pub key_input: Tensor,
    pub value_input: Tensor,
}

impl ShadowStep {
    pub fn mulops(&self, row: &str) -> Option<u128> {
        self.conv_mulops
            .iter()
            .find(|(r, _)| r == row)
            .map(|(_, n)| *n)
    }
}

/// Raw key and value inputs that a step pushes, given its `h`, post-attention
/// `a` and raw attention output `a_raw`.
pub fn queue_inputs(
    routing: RoutingMode,
    h: &Tensor,
    a: &Tensor,
    a_raw: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let cat = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let mut shape = x.shape().to_vec();
        shape[0] += y.shape()[0];
        Tensor::new(shape, data)
    };
    match routing {
        RoutingMode::ConcatToBoth => {
            let z = cat(h, a)?;
            Ok((z.clone(), z))
        }
        RoutingMode::SplitHToV => {
            let zeros = Tensor::zeros(h.shape());
            Ok((cat(a_raw, &zeros)?, cat(h, &zeros)?))
        }
    }
}

struct Shadow<'a> {
    g: Graph,
    counts: Vec<(String, u128)>,
    layer: &'a HorstLayer,
}

impl Shadow<'_> {
    fn conv(&mut self, row: &str, x: Var, kernel: &Tensor, stride: usize) -> Result<Var> {
        let (out, n) = counting_conv(self.g.value(x), kernel, stride)?;
        match self.counts.iter_mut().find(|(r, _)| r == row) {
            Some(entry) => entry.1 += n,
            None => self.counts.push((row.to_string(), n)),
        }
        Ok(self.g.constant(out))
    }

    fn norm(&mut self, x: Var, p: &NormParams) -> Result<Var> {
        let gamma = self.g.constant(p.gamma.clone());
        let beta = self.g.constant(p.beta.clone());
        self.g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    fn filter(&mut self, row: &str, x: Var, theta: &Tensor) -> Result<Var> {
        let pooled = self.g.channel_pool(x)?;
        let resp = self.conv(row, pooled, theta, 1)?;
        Ok(self.g.sigmoid(resp))
    }
}

/// Recomputes one spatial-temporal layer step from scratch: every queued key
/// and value is re-embedded from its raw input (`history`, newest first, as
/// produced by [`queue_inputs`]), and every convolution runs through
/// [`counting_conv`]. With a full queue the per-row counts correspond to the
/// per-transformation formulas of [`count_params_mulops`].
pub fn shadow_step(
    layer: &HorstLayer,
    x: &Tensor,
    history: &[(Tensor, Tensor)],
) -> Result<ShadowStep> {
    let cfg = &layer.config;
    if cfg.attention_mode != AttentionMode::SpatialTemporal {
        return Err(HorstError::Config(format!(
            "shadow execution covers spatial_temporal layers, not {}",
            cfg.attention_mode.name()
        )));
    }
    if history.is_empty() || history.len() > cfg.order {
        return Err(HorstError::Config(format!(
            "shadow execution needs 1..={} queued states, got {}",
            cfg.order,
            history.len()
        )));
    }
    let p = &layer.params;
    let mut sh = Shadow {
        g: Graph::new(),
        counts: Vec::new(),
        layer,
    };
    let xv = sh.g.constant(x.clone());
    let h = sh.conv(ROW_X_TO_H, xv, &p.theta_x, cfg.stride)?;
    let h = sh.norm(h, &p.norm_x)?;
    let h = sh.g.relu(h);
    let q = sh.conv(ROW_OMEGA, h, &p.theta_omega, 1)?;
    let q = sh.norm(q, &p.norm_omega)?;

    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (zk, zv) in history {
        if sh.g.shape(h)[1..] != zk.shape()[1..] {
            return Err(HorstError::shape(
                "shadow_step",
                format!(
                    "queued input {:?} does not match working resolution {:?}",
                    zk.shape(),
                    sh.g.shape(h)
                ),
            ));
        }
        let zk = sh.g.constant(zk.clone());
        let k = sh.conv(ROW_PHI, zk, &p.theta_phi, 1)?;
        keys.push(sh.norm(k, &p.norm_phi)?);
        let zv = sh.g.constant(zv.clone());
        let v = sh.conv(ROW_PSI, zv, &p.theta_psi, 1)?;
        values.push(sh.norm(v, &p.norm_psi)?);
    }

    let fq = sh.filter(ROW_F_Q, q, &p.theta_q)?;
    let gq = sh.g.mul_map(q, fq)?;
    let numel = sh.g.value(q).len() as f64;
    let mut scores = Vec::new();
    let mut maps = Vec::new();
    for &k in &keys {
        let fk = sh.filter(ROW_F_K, k, &p.theta_k)?;
        let focused = sh.g.mul_map(q, fk)?;
        let query = sh.g.spatial_avg_pool(focused)?;
        let corr = sh.g.channel_dot(query, k)?;
        maps.push(sh.g.sigmoid(corr));
        let gk = sh.g.mul_map(k, fk)?;
        scores.push(sh.g.dot(gq, gk)?);
    }
    let scores = sh.g.concat(&scores)?;
    let t = sh.g.softmax_scaled(scores, 1.0 / numel.sqrt())?;
    let mut terms = Vec::new();
    for (s, (&v, &m)) in values.iter().zip(&maps).enumerate() {
        let vm = sh.g.mul_map(v, m)?;
        terms.push(sh.g.scale_entry(vm, t, s)?);
    }
    let a_raw = sh.g.add_n(&terms)?;
    let a = sh.conv(ROW_POST, a_raw, &p.theta_v, 1)?;
    let a = sh.norm(a, &p.norm_v)?;
    let a = sh.g.relu(a);

    let skip = if cfg.stride == 1 {
        xv
    } else {
        sh.g.avg_pool2(xv)?
    };
    let fused = sh.g.concat(&[skip, h, a])?;
    let y = sh.conv(ROW_OUTPUT, fused, &p.theta_y, 1)?;
    let y = sh.norm(y, &p.norm_y)?;
    let y = sh.g.relu(y);

    let (key_input, value_input) = queue_inputs(
        sh.layer.config.routing_mode,
        sh.g.value(h),
        sh.g.value(a),
        sh.g.value(a_raw),
    )?;
    Ok(ShadowStep {
        conv_mulops: sh.counts,
        y: sh.g.value(y).clone(),
        keys: keys.iter().map(|&k| sh.g.value(k).clone()).collect(),
        key_input,
        value_input,
    })
}
