//! Single-file checkpoints: a text manifest followed by raw values.
//!
//! ```text
//! format=horst-checkpoint
//! version=1
//! kind=network
//! config={...json...}
//! tensor=layer.0.theta_x:8,8,3,3
//! ...
//! values=12345
//! <blank line>
//! <values as 64-bit little-endian reals, in manifest order>
//! ```
//!
//! Layer checkpoints use bare kernel names (`theta_x`, `norm_x.gamma`);
//! network checkpoints prefix them per module (`stem.0.`, `layer.1.`,
//! `head.action.`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HorstError, Result};
use crate::layer::{HorstLayer, LayerConfig};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

const FORMAT: &str = "horst-checkpoint";
const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(kind: &str, config: &str, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    if config.contains('\n') || kind.contains('\n') {
        return Err(HorstError::Config(
            "checkpoint kind and config must be single-line".into(),
        ));
    }
    let mut head = format!("format={FORMAT}\nversion={VERSION}\nkind={kind}\nconfig={config}\n");
    let mut total = 0usize;
    for (name, t) in tensors {
        if name.contains([':', '\n']) {
            return Err(HorstError::Config(format!(
                "tensor name `{name}` contains ':' or newline"
            )));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("tensor={name}:{}\n", dims.join(",")));
        total += t.len();
    }
    head.push_str(&format!("values={total}\n\n"));
    let mut out = head.into_bytes();
    out.reserve(total * 8);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let err = |record: &str, detail: String| HorstError::Parse {
        path: path.to_path_buf(),
        record: record.to_string(),
        detail,
    };
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| err("manifest", "no manifest terminator".into()))?;
    let manifest =
        std::str::from_utf8(&bytes[..split]).map_err(|e| err("manifest", e.to_string()))?;
    let body = &bytes[split + 2..];

    let mut kind = None;
    let mut config = None;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut declared = None;
    for (i, line) in manifest.lines().enumerate() {
        let (key, value) = line.split_once('=').ok_or_else(|| {
            err(
                &format!("line {}", i + 1),
                format!("expected key=value, got `{line}`"),
            )
        })?;
        match key {
            "format" if value == FORMAT => {}
            "version" if value == VERSION => {}
            "format" | "version" => return Err(err(key, format!("unsupported value `{value}`"))),
            "kind" => kind = Some(value.to_string()),
            "config" => config = Some(value.to_string()),
            "tensor" => {
                let (name, dims) = value
                    .rsplit_once(':')
                    .ok_or_else(|| err(value, "missing shape".into()))?;
                let shape = dims
                    .split(',')
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|e| err(name, format!("bad dimension `{d}`: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                specs.push((name.to_string(), shape));
            }
            "values" => {
                declared = Some(
                    value
                        .parse::<usize>()
                        .map_err(|e| err("values", e.to_string()))?,
                );
            }
            other => return Err(err(other, "unknown manifest key".into())),
        }
    }
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if declared != Some(total) {
        return Err(err(
            "values",
            format!("declared {declared:?}, shapes need {total}"),
        ));
    }
    if body.len() != total * 8 {
        return Err(err(
            "values",
            format!("{} bytes of data, expected {}", body.len(), total * 8),
        ));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = specs
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Tensor::new(shape, data).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        kind: kind.ok_or_else(|| err("kind", "missing".into()))?,
        config: config.ok_or_else(|| err("config", "missing".into()))?,
        tensors,
    })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HorstError::io(path, e))?;
    decode(path, &bytes)
}

/// Copies checkpoint tensors into `dst`, requiring identical names and shapes
/// in identical order.
fn restore(
    path: &Path,
    ckpt: &Checkpoint,
    names: Vec<String>,
    dst: Vec<&mut Tensor>,
) -> Result<()> {
    if names.len() != ckpt.tensors.len() {
        return Err(HorstError::Parse {
            path: path.to_path_buf(),
            record: "tensor".into(),
            detail: format!("{} tensors, model has {}", ckpt.tensors.len(), names.len()),
        });
    }
    for ((name, d), (cname, src)) in names.iter().zip(dst).zip(&ckpt.tensors) {
        if name != cname || d.shape() != src.shape() {
            return Err(HorstError::Parse {
                path: path.to_path_buf(),
                record: cname.clone(),
                detail: format!("expected `{name}` {:?}, found {:?}", d.shape(), src.shape()),
            });
        }
        d.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| HorstError::Config(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HorstError::io(PathBuf::from(path), e))
}

impl Network {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode("network", &to_json(&self.config)?, &self.named_tensors())?;
        write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Network> {
        let ckpt = read(path)?;
        if ckpt.kind != "network" {
            return Err(HorstError::Config(format!(
                "{} holds a {} checkpoint",
                path.display(),
                ckpt.kind
            )));
        }
        let config: NetworkConfig =
            serde_json::from_str(&ckpt.config).map_err(|e| HorstError::Parse {
                path: path.to_path_buf(),
                record: "config".into(),
                detail: e.to_string(),
            })?;
        let mut net = Network::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = net.named_tensors().into_iter().map(|(n, _)| n).collect();
        restore(path, &ckpt, names, net.tensors_mut())?;
        Ok(net)
    }
}

impl HorstLayer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode(
            "layer",
            &to_json(&self.config)?,
            &self.params.named_tensors(),
        )?;
        write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<HorstLayer> {
        let ckpt = read(path)?;
        if ckpt.kind != "layer" {
            return Err(HorstError::Config(format!(
                "{} holds a {} checkpoint",
                path.display(),
                ckpt.kind
            )));
        }
        let config: LayerConfig =
            serde_json::from_str(&ckpt.config).map_err(|e| HorstError::Parse {
                path: path.to_path_buf(),
                record: "config".into(),
                detail: e.to_string(),
            })?;
        let mut layer = HorstLayer::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = layer
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        restore(path, &ckpt, names, layer.params.tensors_mut())?;
        Ok(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = HorstLayer::new(LayerConfig::new(3, 2, 4), &mut rng).unwrap();
        layer.save(&path).unwrap();
        let back = HorstLayer::load(&path).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let t = Tensor::full(&[2, 2], 1.5);
        let bytes = encode("layer", "{}", &[("w".to_string(), &t)]).unwrap();
        let p = Path::new("x.ckpt");
        assert_eq!(decode(p, &bytes).unwrap().tensors[0].1, t);
        assert!(matches!(
            decode(p, &bytes[..bytes.len() - 3]),
            Err(HorstError::Parse { .. })
        ));
    }
}
