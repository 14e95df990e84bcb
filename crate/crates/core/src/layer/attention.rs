//! Space-time attention over the key/value queue.
//!
//! The joint attention over `H x W x n` queued positions is replaced by a
//! temporal weight per state times a spatial map per state. Both factors are
//! computed from spatially filtered queries and keys; the filters are
//! single-channel sigmoid gates over channel-pooled features.

use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};
use crate::graph::{Graph, Var};
use crate::layer::config::AttentionMode;

/// Attention weights observed at one timestep of one layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub timestep: usize,
    /// One weight per queued state, newest first. Empty on a cold start.
    pub temporal_weights: Vec<f64>,
    /// One `height x width` map per queued state, row-major. Empty for modes
    /// that do not compute spatial maps.
    pub spatial_maps: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

impl AttentionTrace {
    pub fn empty(timestep: usize, height: usize, width: usize) -> Self {
        AttentionTrace {
            timestep,
            height,
            width,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.temporal_weights.is_empty()
    }
}

/// `sigmoid(conv(channel_pool(x), theta))`: a `1 x H x W` gate in `(0, 1)`.
pub fn spatial_filter(g: &mut Graph, x: Var, theta: Var) -> Result<Var> {
    let pooled = g.channel_pool(x)?;
    let resp = g.conv2d(pooled, theta, 1)?;
    Ok(g.sigmoid(resp))
}

fn spatial_maps_from_filters(
    g: &mut Graph,
    q: Var,
    keys: &[Var],
    key_filters: &[Var],
) -> Result<Vec<Var>> {
    keys.iter()
        .zip(key_filters)
        .map(|(&k, &fk)| {
            let focused = g.mul_map(q, fk)?;
            let query = g.spatial_avg_pool(focused)?;
            let corr = g.channel_dot(query, k)?;
            Ok(g.sigmoid(corr))
        })
        .collect()
}

fn temporal_from_filters(
    g: &mut Graph,
    q: Var,
    query_filter: Var,
    keys: &[Var],
    key_filters: &[Var],
) -> Result<Var> {
    let numel = g.value(q).len();
    let gq = g.mul_map(q, query_filter)?;
    let scores = keys
        .iter()
        .zip(key_filters)
        .map(|(&k, &fk)| {
            let gk = g.mul_map(k, fk)?;
            g.dot(gq, gk)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = g.concat(&scores)?;
    g.softmax_scaled(scores, 1.0 / (numel as f64).sqrt())
}

fn check_states(g: &Graph, q: Var, keys: &[Var], values: Option<&[Var]>) -> Result<()> {
    if keys.is_empty() {
        return Err(HorstError::shape("attention", "empty key queue"));
    }
    let qs = g.shape(q);
    if qs.len() != 3 {
        return Err(HorstError::shape("attention", format!("query {qs:?}")));
    }
    for &k in keys.iter().chain(values.unwrap_or(&[])) {
        if g.shape(k) != qs {
            return Err(HorstError::shape(
                "attention",
                format!("queued state {:?} does not match query {qs:?}", g.shape(k)),
            ));
        }
    }
    if let Some(v) = values {
        if v.len() != keys.len() {
            return Err(HorstError::shape(
                "attention",
                format!("{} keys but {} values", keys.len(), v.len()),
            ));
        }
    }
    Ok(())
}

/// One unnormalized `1 x H x W` map per key.
pub fn spatial_attention(g: &mut Graph, q: Var, keys: &[Var], theta_k: Var) -> Result<Vec<Var>> {
    check_states(g, q, keys, None)?;
    let filters = keys
        .iter()
        .map(|&k| spatial_filter(g, k, theta_k))
        .collect::<Result<Vec<_>>>()?;
    spatial_maps_from_filters(g, q, keys, &filters)
}

/// Softmax over filtered global query-key correlations, scaled by
/// `1 / sqrt(H W C)`.
pub fn temporal_attention(
    g: &mut Graph,
    q: Var,
    keys: &[Var],
    theta_q: Var,
    theta_k: Var,
) -> Result<Var> {
    check_states(g, q, keys, None)?;
    let fq = spatial_filter(g, q, theta_q)?;
    let filters = keys
        .iter()
        .map(|&k| spatial_filter(g, k, theta_k))
        .collect::<Result<Vec<_>>>()?;
    temporal_from_filters(g, q, fq, keys, &filters)
}

/// Aggregates `values` with weights `A[s, h, w]` chosen by `mode`. Keys and
/// values are ordered newest first.
#[allow(clippy::too_many_arguments)]
pub fn st_att(
    g: &mut Graph,
    q: Var,
    keys: &[Var],
    values: &[Var],
    theta_q: Var,
    theta_k: Var,
    mode: AttentionMode,
    timestep: usize,
) -> Result<(Var, AttentionTrace)> {
    check_states(g, q, keys, Some(values))?;
    let (c, h, w) = g.value(q).chw().expect("checked rank");
    let n = keys.len();
    let mut trace = AttentionTrace::empty(timestep, h, w);

    if mode == AttentionMode::FullTemporal {
        let scores = keys
            .iter()
            .map(|&k| g.dot(q, k))
            .collect::<Result<Vec<_>>>()?;
        let scores = g.concat(&scores)?;
        let t = g.softmax_scaled(scores, 1.0 / ((c * h * w) as f64).sqrt())?;
        trace.temporal_weights = g.value(t).data().to_vec();
        let terms = values
            .iter()
            .enumerate()
            .map(|(s, &v)| g.scale_entry(v, t, s))
            .collect::<Result<Vec<_>>>()?;
        return Ok((g.add_n(&terms)?, trace));
    }

    let key_filters = keys
        .iter()
        .map(|&k| spatial_filter(g, k, theta_k))
        .collect::<Result<Vec<_>>>()?;
    let maps = if mode.uses_spatial_maps() {
        let maps = spatial_maps_from_filters(g, q, keys, &key_filters)?;
        trace.spatial_maps = maps.iter().map(|&m| g.value(m).data().to_vec()).collect();
        maps
    } else {
        Vec::new()
    };

    let out = match mode {
        AttentionMode::SpatialTemporal | AttentionMode::TemporalOnly => {
            let fq = spatial_filter(g, q, theta_q)?;
            let t = temporal_from_filters(g, q, fq, keys, &key_filters)?;
            trace.temporal_weights = g.value(t).data().to_vec();
            let mut terms = Vec::with_capacity(n);
            for (s, &v) in values.iter().enumerate() {
                let v = if mode == AttentionMode::SpatialTemporal {
                    g.mul_map(v, maps[s])?
                } else {
                    v
                };
                terms.push(g.scale_entry(v, t, s)?);
            }
            g.add_n(&terms)?
        }
        AttentionMode::SpatialOnly => {
            trace.temporal_weights = vec![1.0 / n as f64; n];
            let terms = values
                .iter()
                .zip(&maps)
                .map(|(&v, &m)| g.mul_map(v, m))
                .collect::<Result<Vec<_>>>()?;
            let sum = g.add_n(&terms)?;
            g.scale(sum, 1.0 / n as f64)
        }
        AttentionMode::FullTemporal => unreachable!(),
    };
    Ok((out, trace))
}
