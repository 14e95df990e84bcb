//! Attention export: temporal weights as CSV and spatial maps as plain-text
//! grayscale images.
//!
//! Every call writes into a fresh `run_NNN` directory under the target
//! directory and never touches earlier runs. Inside a run:
//!
//! - `layer_L_temporal.csv`: header `timestep,slot_0,...,slot_{S-1}`, one row
//!   per timestep that attended over a non-empty queue. Slots are newest
//!   first; slots beyond the current queue length are left blank. Cold-start
//!   steps have no weights and produce no row.
//! - `layer_L_t_T_slot_s.pgm`: one plain PGM (`P2`) per spatial map, values in
//!   `(0, 1)` mapped linearly to `0..=255`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HorstError, Result};
use crate::layer::AttentionTrace;
use crate::network::Prediction;

/// All traces of one layer over a sequence, with the layer's queue capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTraces {
    pub order: usize,
    pub traces: Vec<AttentionTrace>,
}

/// Regroups per-step predictions into per-layer trace lists.
pub fn layer_traces(predictions: &[Prediction], orders: &[usize]) -> Result<Vec<LayerTraces>> {
    let mut out: Vec<LayerTraces> = orders
        .iter()
        .map(|&order| LayerTraces {
            order,
            traces: Vec::with_capacity(predictions.len()),
        })
        .collect();
    for p in predictions {
        if p.traces.len() != orders.len() {
            return Err(HorstError::shape(
                "export_attention",
                format!("{} traces for {} layers", p.traces.len(), orders.len()),
            ));
        }
        for (l, t) in out.iter_mut().zip(&p.traces) {
            l.traces.push(t.clone());
        }
    }
    Ok(out)
}

/// Quantizes a value in `[0, 1]` to a gray level.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_gray(p: u8) -> f64 {
    p as f64 / 255.0
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> String {
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|&v| to_gray(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a plain PGM with maxval 255: `(width, height, gray levels)`.
pub fn decode_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: String| HorstError::Parse {
        path: PathBuf::from("<pgm>"),
        record: "header".into(),
        detail: d,
    };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| bad(format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|e| bad(format!("{what}: {e}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(bad(format!("maxval {max}, expected 255")));
    }
    let mut px = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let v = num("pixel")?;
        px.push(u8::try_from(v).map_err(|_| bad(format!("pixel {i} = {v} exceeds 255")))?);
    }
    if tokens.next().is_some() {
        return Err(bad("trailing data".into()));
    }
    Ok((w, h, px))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| HorstError::io(path, e))?;
    decode_pgm(&text).map_err(|e| match e {
        HorstError::Parse { record, detail, .. } => HorstError::Parse {
            path: path.to_path_buf(),
            record,
            detail,
        },
        other => other,
    })
}

fn temporal_csv(layer: &LayerTraces) -> Result<String> {
    let mut out = String::from("timestep");
    for s in 0..layer.order {
        out.push_str(&format!(",slot_{s}"));
    }
    out.push('\n');
    for t in layer.traces.iter().filter(|t| !t.is_empty()) {
        if t.temporal_weights.len() > layer.order {
            return Err(HorstError::shape(
                "export_attention",
                format!(
                    "{} weights for order {}",
                    t.temporal_weights.len(),
                    layer.order
                ),
            ));
        }
        out.push_str(&t.timestep.to_string());
        for s in 0..layer.order {
            out.push(',');
            if let Some(w) = t.temporal_weights.get(s) {
                out.push_str(&format!("{w:e}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Renders every file of one export as `(file name, contents)`.
pub fn render_attention(layers: &[LayerTraces]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        files.push((format!("layer_{l}_temporal.csv"), temporal_csv(layer)?));
        for t in &layer.traces {
            for (s, map) in t.spatial_maps.iter().enumerate() {
                if map.len() != t.height * t.width {
                    return Err(HorstError::shape(
                        "export_attention",
                        format!("map of {} values for {}x{}", map.len(), t.height, t.width),
                    ));
                }
                files.push((
                    format!("layer_{l}_t_{}_slot_{s}.pgm", t.timestep),
                    encode_pgm(t.width, t.height, map),
                ));
            }
        }
    }
    Ok(files)
}

/// Creates the next unused `run_NNN` directory under `dir`.
fn new_run_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HorstError::io(dir, e))?;
    for i in 0..100_000 {
        let run = dir.join(format!("run_{i:03}"));
        match fs::create_dir(&run) {
            Ok(()) => return Ok(run),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HorstError::io(&run, e)),
        }
    }
    Err(HorstError::Config(format!(
        "no free run directory under {}",
        dir.display()
    )))
}

/// Writes the export into a new run directory under `dir` and returns its
/// path. All files are rendered before the directory is created, so a
/// rendering or directory error leaves nothing behind.
pub fn export_attention(dir: &Path, layers: &[LayerTraces]) -> Result<PathBuf> {
    let files = render_attention(layers)?;
    let run = new_run_dir(dir)?;
    for (name, body) in files {
        let path = run.join(name);
        fs::write(&path, body).map_err(|e| HorstError::io(&path, e))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let vals = [0.0, 0.25, 0.5, 0.999, 1.0, 0.1];
        let (w, h, px) = decode_pgm(&encode_pgm(3, 2, &vals)).unwrap();
        assert_eq!((w, h), (3, 2));
        for (v, p) in vals.iter().zip(px) {
            assert!((from_gray(p) - v).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(decode_pgm("P5\n1 1\n255\n0").is_err());
        assert!(decode_pgm("P2\n2 1\n255\n0").is_err());
        assert!(decode_pgm("P2\n1 1\n255\n300").is_err());
    }

    #[test]
    fn csv_pads_to_order() {
        let mk = |t: usize, w: Vec<f64>| AttentionTrace {
            timestep: t,
            temporal_weights: w,
            ..AttentionTrace::empty(t, 1, 1)
        };
        let layer = LayerTraces {
            order: 3,
            traces: vec![mk(0, vec![]), mk(1, vec![1.0]), mk(2, vec![0.75, 0.25])],
        };
        let csv = temporal_csv(&layer).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "timestep,slot_0,slot_1,slot_2");
        assert_eq!(lines[1], "1,1e0,,");
        assert_eq!(lines[2], "2,7.5e-1,2.5e-1,");
        assert_eq!(lines.len(), 3);
    }
}
