//! Deterministic moving-shape video clips.
//!
//! A clip shows one shape (square, circle or triangle) on a noisy background
//! moving one pixel per frame up, down, left or right. The verb label is the
//! direction, the noun label the shape, the action label the pair. Shape and
//! background intensities swap at random (bright-on-dark or dark-on-bright)
//! so the direction cannot be read off a fixed linear projection of the
//! pixels.
//!
//! Split files are little-endian binary:
//!
//! ```text
//! header : magic "HSPL" | version u32 | mode u32 | frames u32 | C u32 | H u32 | W u32 | count u32
//! record : verb u32 | noun u32 | action u32 | tau_a u32 | observe_fraction f64
//!          | frames * C * H * W values as f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};
use crate::network::Labels;
use crate::tensor::Tensor;

pub const NUM_VERBS: usize = 4;
pub const NUM_NOUNS: usize = 3;
pub const NUM_ACTIONS: usize = NUM_VERBS * NUM_NOUNS;

pub const VERB_NAMES: [&str; NUM_VERBS] = ["up", "down", "left", "right"];
pub const NOUN_NAMES: [&str; NUM_NOUNS] = ["square", "circle", "triangle"];

const SPLIT_MAGIC: &[u8; 4] = b"HSPL";
const SPLIT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Observe the first part of a moving clip, predict its motion.
    EarlyRecognition,
    /// Observe a static shape, predict the motion that starts `tau_a` frames
    /// after the last observed frame.
    Anticipation,
}

impl TaskMode {
    fn code(self) -> u32 {
        match self {
            TaskMode::EarlyRecognition => 0,
            TaskMode::Anticipation => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(TaskMode::EarlyRecognition),
            1 => Some(TaskMode::Anticipation),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub mode: TaskMode,
    /// Full clip length.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub observe_fraction: f64,
    pub tau_a: usize,
    pub shape_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            mode: TaskMode::EarlyRecognition,
            frames: 16,
            channels: 1,
            height: 32,
            width: 32,
            noise_std: 0.1,
            observe_fraction: 0.25,
            tau_a: 4,
            shape_size: 7,
            train_samples: 2000,
            test_samples: 500,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Number of frames a sample carries.
    pub fn observed_frames(&self) -> usize {
        match self.mode {
            TaskMode::EarlyRecognition => {
                (self.observe_fraction * self.frames as f64).round() as usize
            }
            TaskMode::Anticipation => self.frames.saturating_sub(self.tau_a),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HorstError::Config(m));
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("task dimensions must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.shape_size < 3 {
            return bad("shape_size must be >= 3".into());
        }
        let side = self.height.min(self.width);
        match self.mode {
            TaskMode::EarlyRecognition => {
                if !(self.observe_fraction > 0.0 && self.observe_fraction <= 1.0) {
                    return bad(format!(
                        "observe_fraction must be in (0, 1], got {}",
                        self.observe_fraction
                    ));
                }
                if self.observed_frames() < 1 {
                    return bad("observe window is empty".into());
                }
                if self.shape_size + self.frames - 1 > side {
                    return bad(format!(
                        "a {}-pixel shape moving {} pixels does not fit a {}x{} canvas",
                        self.shape_size,
                        self.frames - 1,
                        self.height,
                        self.width
                    ));
                }
            }
            TaskMode::Anticipation => {
                if self.tau_a >= self.frames {
                    return bad(format!(
                        "tau_a = {} leaves no observable frame out of {}",
                        self.tau_a, self.frames
                    ));
                }
                if self.shape_size + 2 > side {
                    return bad("shape and heading cue do not fit the canvas".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Tensor>,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub tau_a: usize,
    pub observe_fraction: f64,
}

impl SequenceSample {
    pub fn labels(&self) -> Labels {
        Labels {
            verb: self.verb,
            noun: self.noun,
            action: self.action,
        }
    }
}

fn shape_mask(noun: usize, size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            m[y * size + x] = match noun {
                0 => true,
                1 => (fy - c).powi(2) + (fx - c).powi(2) <= (c + 0.5).powi(2),
                _ => (fx - c).abs() <= fy / 2.0 + 0.25,
            };
        }
    }
    m
}

fn direction(verb: usize) -> (isize, isize) {
    match verb {
        0 => (-1, 0),
        1 => (1, 0),
        2 => (0, -1),
        _ => (0, 1),
    }
}

/// Mixes a split seed and a sample index into an independent stream seed.
fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One sample with labels drawn from `seed`.
pub fn generate_sample(spec: &TaskSpec, seed: u64) -> Result<SequenceSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verb = rng.gen_range(0..NUM_VERBS);
    let noun = rng.gen_range(0..NUM_NOUNS);
    render(spec, verb, noun, &mut rng)
}

/// One sample with fixed labels; the rest of the randomness comes from `seed`.
pub fn generate_labeled(
    spec: &TaskSpec,
    verb: usize,
    noun: usize,
    seed: u64,
) -> Result<SequenceSample> {
    spec.validate()?;
    if verb >= NUM_VERBS || noun >= NUM_NOUNS {
        return Err(HorstError::Config(format!(
            "labels ({verb}, {noun}) out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(spec, verb, noun, &mut rng)
}

fn render(
    spec: &TaskSpec,
    verb: usize,
    noun: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SequenceSample> {
    let (h, w, s) = (spec.height, spec.width, spec.shape_size);
    let (dy, dx) = direction(verb);
    let (fg, bg) = if rng.gen_bool(0.5) {
        (0.8, 0.2)
    } else {
        (0.2, 0.8)
    };
    let mask = shape_mask(noun, s);
    let n_obs = spec.observed_frames();

    // Top-left corner at frame 0 and the per-frame displacement.
    let (oy, ox, step) = match spec.mode {
        TaskMode::EarlyRecognition => {
            let travel = spec.frames - 1;
            let pick = |d: isize, extent: usize, rng: &mut ChaCha8Rng| -> usize {
                let free = extent - s;
                match d {
                    -1 => rng.gen_range(travel..=free),
                    1 => rng.gen_range(0..=free - travel),
                    _ => rng.gen_range(0..=free),
                }
            };
            (pick(dy, h, rng), pick(dx, w, rng), 1isize)
        }
        TaskMode::Anticipation => (
            rng.gen_range(1..=h - s - 1),
            rng.gen_range(1..=w - s - 1),
            0isize,
        ),
    };

    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("validated noise"))
    } else {
        None
    };
    let mut frames = Vec::with_capacity(n_obs);
    for t in 0..n_obs {
        let ty = oy as isize + dy * step * t as isize;
        let tx = ox as isize + dx * step * t as isize;
        let mut plane = vec![bg; h * w];
        for y in 0..s {
            for x in 0..s {
                if mask[y * s + x] {
                    plane[(ty as usize + y) * w + tx as usize + x] = fg;
                }
            }
        }
        if spec.mode == TaskMode::Anticipation {
            // Heading cue: one pixel just outside the shape, centred on the
            // side the shape will move towards.
            let mid = s / 2;
            let (cy, cx) = match verb {
                0 => (ty - 1, tx + mid as isize),
                1 => (ty + s as isize, tx + mid as isize),
                2 => (ty + mid as isize, tx - 1),
                _ => (ty + mid as isize, tx + s as isize),
            };
            plane[cy as usize * w + cx as usize] = fg;
        }
        let mut data = Vec::with_capacity(spec.channels * h * w);
        for _ in 0..spec.channels {
            data.extend(plane.iter().map(|&v| match &noise {
                Some(n) => (v + n.sample(rng)).clamp(0.0, 1.0),
                None => v,
            }));
        }
        frames.push(Tensor::new(vec![spec.channels, h, w], data)?);
    }
    Ok(SequenceSample {
        frames,
        verb,
        noun,
        action: verb * NUM_NOUNS + noun,
        tau_a: if spec.mode == TaskMode::Anticipation {
            spec.tau_a
        } else {
            0
        },
        observe_fraction: match spec.mode {
            TaskMode::EarlyRecognition => spec.observe_fraction,
            TaskMode::Anticipation => n_obs as f64 / spec.frames as f64,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A split whose action labels cycle through all verb/noun pairs, so class
/// counts differ by at most one.
pub fn generate_split(spec: &TaskSpec, split: Split) -> Result<Vec<SequenceSample>> {
    spec.validate()?;
    let (n, stream) = match split {
        Split::Train => (spec.train_samples, 1),
        Split::Test => (spec.test_samples, 2),
    };
    (0..n)
        .map(|i| {
            let action = i % NUM_ACTIONS;
            generate_labeled(
                spec,
                action / NUM_NOUNS,
                action % NUM_NOUNS,
                mix_seed(spec.seed, stream, i as u64),
            )
        })
        .collect()
}

pub fn encode_split(spec: &TaskSpec, samples: &[SequenceSample]) -> Result<Vec<u8>> {
    let n_frames = samples
        .first()
        .map(|s| s.frames.len())
        .unwrap_or_else(|| spec.observed_frames());
    let mut out = Vec::new();
    out.extend_from_slice(SPLIT_MAGIC);
    for v in [
        SPLIT_VERSION,
        spec.mode.code(),
        n_frames as u32,
        spec.channels as u32,
        spec.height as u32,
        spec.width as u32,
        samples.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let expect = [spec.channels, spec.height, spec.width];
    for (i, s) in samples.iter().enumerate() {
        if s.frames.len() != n_frames || s.frames.iter().any(|f| f.shape() != expect) {
            return Err(HorstError::shape(
                "write_split",
                format!("sample {i} does not match the split dimensions"),
            ));
        }
        for v in [s.verb, s.noun, s.action, s.tau_a] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.observe_fraction.to_le_bytes());
        for f in &s.frames {
            for v in f.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Header fields of a split file.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitHeader {
    pub mode: TaskMode,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_split(path: &Path, bytes: &[u8]) -> Result<(SplitHeader, Vec<SequenceSample>)> {
    let err = |record: String, detail: &str| HorstError::Parse {
        path: path.to_path_buf(),
        record,
        detail: detail.to_string(),
    };
    let mut c = Cursor { bytes, pos: 0 };
    let head = || "header".to_string();
    if c.take(4) != Some(SPLIT_MAGIC.as_slice()) {
        return Err(err(head(), "bad magic"));
    }
    let mut words = [0u32; 7];
    for w in &mut words {
        *w = c.u32().ok_or_else(|| err(head(), "truncated header"))?;
    }
    if words[0] != SPLIT_VERSION {
        return Err(err(head(), &format!("unsupported version {}", words[0])));
    }
    let mode = TaskMode::from_code(words[1]).ok_or_else(|| err(head(), "unknown task mode"))?;
    let header = SplitHeader {
        mode,
        frames: words[2] as usize,
        channels: words[3] as usize,
        height: words[4] as usize,
        width: words[5] as usize,
        count: words[6] as usize,
    };
    if header.channels == 0 || header.height == 0 || header.width == 0 {
        return Err(err(head(), "zero frame extent"));
    }
    let plane = header.channels * header.height * header.width;
    let mut samples = Vec::with_capacity(header.count.min(1 << 16));
    for i in 0..header.count {
        let rec = || format!("{i}");
        let mut labels = [0usize; 4];
        for l in &mut labels {
            *l = c.u32().ok_or_else(|| err(rec(), "truncated record"))? as usize;
        }
        let [verb, noun, action, tau_a] = labels;
        if verb >= NUM_VERBS || noun >= NUM_NOUNS || action != verb * NUM_NOUNS + noun {
            return Err(err(rec(), "inconsistent labels"));
        }
        let observe_fraction = c.f64().ok_or_else(|| err(rec(), "truncated record"))?;
        let mut frames = Vec::with_capacity(header.frames);
        for _ in 0..header.frames {
            let raw = c
                .take(plane * 8)
                .ok_or_else(|| err(rec(), "truncated frame data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            frames.push(Tensor::new(
                vec![header.channels, header.height, header.width],
                data,
            )?);
        }
        samples.push(SequenceSample {
            frames,
            verb,
            noun,
            action,
            tau_a,
            observe_fraction,
        });
    }
    if c.pos != bytes.len() {
        return Err(err("trailer".into(), "unexpected bytes after last record"));
    }
    Ok((header, samples))
}

pub fn write_split(path: &Path, spec: &TaskSpec, samples: &[SequenceSample]) -> Result<()> {
    let bytes = encode_split(spec, samples)?;
    let mut f = fs::File::create(path).map_err(|e| HorstError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HorstError::io(path, e))
}

pub fn read_split(path: &Path) -> Result<(SplitHeader, Vec<SequenceSample>)> {
    let bytes = fs::read(path).map_err(|e| HorstError::io(path, e))?;
    decode_split(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observe_window_length() {
        let spec = TaskSpec::default();
        assert_eq!(spec.observed_frames(), 4);
        let s = generate_sample(&spec, 9).unwrap();
        assert_eq!(s.frames.len(), 4);
        let half = TaskSpec {
            observe_fraction: 0.5,
            ..TaskSpec::default()
        };
        assert_eq!(generate_sample(&half, 9).unwrap().frames.len(), 8);
    }

    #[test]
    fn rejects_oversized_shape() {
        let spec = TaskSpec {
            shape_size: 20,
            ..TaskSpec::default()
        };
        assert!(matches!(spec.validate(), Err(HorstError::Config(_))));
        let spec = TaskSpec {
            mode: TaskMode::Anticipation,
            tau_a: 16,
            ..TaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn action_is_composed() {
        for seed in 0..50 {
            let s = generate_sample(&TaskSpec::default(), seed).unwrap();
            assert_eq!(s.action, s.verb * NUM_NOUNS + s.noun);
            assert!(s
                .frames
                .iter()
                .all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn anticipation_frames_are_static() {
        let spec = TaskSpec {
            mode: TaskMode::Anticipation,
            noise_std: 0.0,
            tau_a: 6,
            ..TaskSpec::default()
        };
        let s = generate_sample(&spec, 4).unwrap();
        assert_eq!(s.frames.len(), 10);
        assert_eq!(s.tau_a, 6);
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
    }
}
