//! Raw sensor recordings, z-score statistics, sliding windows and batches.
//!
//! Container layout (little-endian): magic `M3RAW1\n`, `u32` frames, `u32`
//! nodes, `u32` channels, `u16` interval minutes, `u8` start weekday
//! (0 = Monday), then `frames·nodes·channels` `f32` values, row-major.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, take};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const RAW_MAGIC: &[u8; 7] = b"M3RAW1\n";
pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetCard {
    pub name: String,
    pub nodes: usize,
    pub frames: usize,
    pub interval_minutes: u16,
    pub start_weekday: u8,
}

impl DatasetCard {
    /// Cards for the public PEMS recordings (weekday 0 = Monday).
    pub fn builtin(name: &str) -> Option<Self> {
        let (nodes, frames, start_weekday) = match name.to_ascii_uppercase().as_str() {
            "PEMS03" => (358, 26_208, 5),
            "PEMS04" => (307, 16_992, 0),
            "PEMS07" => (883, 28_224, 0),
            "PEMS08" => (170, 17_856, 4),
            _ => return None,
        };
        Some(Self {
            name: name.to_ascii_uppercase(),
            nodes,
            frames,
            interval_minutes: 5,
            start_weekday,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let missing = |k: &str| Error::Config(format!("dataset card is missing `{k}`"));
        let mut card = Self {
            name: map.get("name").cloned().ok_or_else(|| missing("name"))?,
            nodes: 0,
            frames: 0,
            interval_minutes: 5,
            start_weekday: 0,
        };
        for key in ["nodes", "frames"] {
            if !map.contains_key(key) {
                return Err(missing(key));
            }
        }
        take(&map, "nodes", &mut card.nodes)?;
        take(&map, "frames", &mut card.frames)?;
        take(&map, "interval_minutes", &mut card.interval_minutes)?;
        take(&map, "start_weekday", &mut card.start_weekday)?;
        Ok(card)
    }

    pub fn to_text(&self) -> String {
        format!(
            "name={}\nnodes={}\nframes={}\ninterval_minutes={}\nstart_weekday={}\n",
            self.name, self.nodes, self.frames, self.interval_minutes, self.start_weekday
        )
    }
}

/// `T×N×C` recording; channel 0 is traffic flow.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub data: Tensor<f32>,
    pub interval_minutes: u16,
    pub start_weekday: u8,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, data: Tensor<f32>, interval_minutes: u16, start_weekday: u8) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Load(format!(
                "series must be frames×nodes×channels, got shape {:?}",
                data.shape()
            )));
        }
        if interval_minutes == 0 || 1440 % interval_minutes as usize != 0 {
            return Err(Error::Load(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        if start_weekday as usize >= DAYS_PER_WEEK {
            return Err(Error::Load(format!("start weekday {start_weekday} not in 0..7")));
        }
        let series = Self {
            name: name.into(),
            data,
            interval_minutes,
            start_weekday,
        };
        series.check_values()?;
        Ok(series)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn steps_per_day(&self) -> usize {
        1440 / self.interval_minutes as usize
    }

    fn check_values(&self) -> Result<()> {
        let per_frame = self.nodes() * self.channels();
        let c = self.channels();
        for (t, frame) in self.data.data().chunks(per_frame).enumerate() {
            if let Some(pos) = frame.iter().position(|v| !v.is_finite()) {
                return Err(Error::Load(format!(
                    "non-finite value at frame {t}, node {}, channel {}",
                    pos / c,
                    pos % c
                )));
            }
            if let Some(pos) = frame.iter().step_by(c).position(|&v| v < 0.0) {
                return Err(Error::Load(format!("negative flow at frame {t}, node {pos}")));
            }
        }
        Ok(())
    }

    pub fn check_card(&self, card: &DatasetCard) -> Result<()> {
        let found = (self.frames(), self.nodes());
        let expected = (card.frames, card.nodes);
        if found != expected {
            return Err(Error::Load(format!(
                "{}: expected {} frames × {} nodes, found {} × {}",
                card.name, expected.0, expected.1, found.0, found.1
            )));
        }
        Ok(())
    }

    pub fn write_container(&self, w: &mut impl Write) -> Result<()> {
        let [t, n, c] = [self.frames(), self.nodes(), self.channels()];
        w.write_all(RAW_MAGIC)?;
        for v in [t, n, c] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.interval_minutes.to_le_bytes())?;
        w.write_all(&[self.start_weekday])?;
        for v in self.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_container(r: &mut impl Read, name: &str) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Load("file shorter than the container header".into()))?;
        if &magic != RAW_MAGIC {
            return Err(Error::Load("not an M3RAW1 container (bad magic)".into()));
        }
        let mut header = [0u8; 15];
        r.read_exact(&mut header)
            .map_err(|_| Error::Load("truncated container header".into()))?;
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (t, n, c) = (u32_at(0), u32_at(4), u32_at(8));
        let interval = u16::from_le_bytes([header[12], header[13]]);
        let weekday = header[14];
        if t == 0 || n == 0 || c == 0 {
            return Err(Error::Load(format!("empty container shape {t}×{n}×{c}")));
        }
        let count = t * n * c;
        let mut raw = Vec::with_capacity(count * 4);
        r.take(count as u64 * 4).read_to_end(&mut raw)?;
        if raw.len() != count * 4 {
            return Err(Error::Load(format!(
                "container declares {t}×{n}×{c} values but holds {}",
                raw.len() / 4
            )));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Load("trailing bytes after container payload".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(name, Tensor::new(&[t, n, c], data)?, interval, weekday)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_container(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a container without validating it against a card.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DatasetNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_container(&mut BufReader::new(file), &name)
    }

    /// Smooth daily profile per node with a few shared shapes and mild noise.
    /// Used for tests and demos; not a stand-in for real recordings.
    pub fn synthetic(nodes: usize, frames: usize, interval_minutes: u16, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_day = (1440 / interval_minutes as usize) as f64;
        let shapes = nodes.clamp(1, 3);
        let node_shape: Vec<usize> = (0..nodes).map(|i| i % shapes).collect();
        let scale: Vec<f64> = (0..nodes).map(|_| rng.gen_range(80.0..220.0)).collect();
        let mut data = Vec::with_capacity(frames * nodes);
        for t in 0..frames {
            let phase = (t as f64 % per_day) / per_day * std::f64::consts::TAU;
            let weekend = ((t as f64 / per_day) as usize % 7) >= 5;
            for n in 0..nodes {
                let s = node_shape[n] as f64;
                let base = 0.55 - 0.45 * (phase + 0.6 * s).cos() + 0.15 * (2.0 * phase + s).sin();
                let week = if weekend { 0.8 } else { 1.0 };
                let noise = rng.gen_range(-0.02..0.02);
                data.push(((base * week + noise).max(0.0) * scale[n]) as f32);
            }
        }
        let tensor = Tensor::new(&[frames, nodes, 1], data).expect("shape");
        Self::new("synthetic", tensor, interval_minutes, 0).expect("valid synthetic series")
    }
}

/// Reads a container and validates it against `card`.
pub fn load_raw(path: &Path, card: &DatasetCard) -> Result<RawSeries> {
    let mut series = RawSeries::open(path)?;
    series.check_card(card)?;
    series.name = card.name.clone();
    Ok(series)
}

/// Per-channel z-score statistics from the training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over frames `[0, frames)`. A channel with zero spread
    /// gets unit std so normalization stays well defined.
    pub fn from_frames(series: &RawSeries, frames: usize) -> Self {
        let c = series.channels();
        let values = &series.data.data()[..frames * series.nodes() * c];
        let count = (values.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for chunk in values.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(chunk) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for chunk in values.chunks(c) {
            for ((s, &v), m) in var.iter_mut().zip(chunk).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }

    pub fn denormalize_flow<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        let (s, m) = (T::from_f64(self.std[0]), T::from_f64(self.mean[0]));
        z.map(|v| v * s + m)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        format!("norm_mean={}\nnorm_std={}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let parse = |key: &str| -> Result<Option<Vec<f64>>> {
            map.get(key)
                .map(|raw| {
                    raw.split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| Error::Corrupt(format!("cannot parse `{key}`")))
                })
                .transpose()
        };
        match (parse("norm_mean")?, parse("norm_std")?) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Some(Self { mean, std })),
            (None, None) => Ok(None),
            _ => Err(Error::Corrupt("inconsistent normalization statistics".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// Frame counts `(train, val, test)` for a recording of `frames` frames.
    pub fn lengths(&self, frames: usize) -> (usize, usize, usize) {
        let train = (frames as f64 * self.train).round() as usize;
        let val = ((frames as f64 * self.val).round() as usize).min(frames - train);
        (train, val, frames - train - val)
    }
}

/// One forecasting window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Normalized history `[L, N, C]`.
    pub x: Tensor<f32>,
    /// Raw-scale flow targets `[F, N]`.
    pub y: Tensor<f32>,
    pub tod_idx: usize,
    pub dow_idx: usize,
}

#[derive(Debug)]
struct WindowSource {
    normalized: Vec<f32>,
    flow: Vec<f32>,
    nodes: usize,
    channels: usize,
    input_len: usize,
    horizon: usize,
    steps_per_day: usize,
    start_weekday: usize,
}

/// Windows over a shared normalized copy of the recording, identified by
/// their last history frame `t`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    source: Arc<WindowSource>,
    ends: Vec<usize>,
}

/// Stacked windows ready for the model.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, L, N, C]`, normalized.
    pub x: Tensor<T>,
    /// `[B, N, F]`, raw scale, node-major to line up with model output rows.
    pub y: Tensor<T>,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.tod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tod.is_empty()
    }
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Last history frame of every window, in order.
    pub fn window_ends(&self) -> &[usize] {
        &self.ends
    }

    pub fn nodes(&self) -> usize {
        self.source.nodes
    }

    pub fn tod_index(&self, t: usize) -> usize {
        t % self.source.steps_per_day
    }

    pub fn dow_index(&self, t: usize) -> usize {
        (self.source.start_weekday + t / self.source.steps_per_day) % DAYS_PER_WEEK
    }

    /// Keeps only the first `n` windows.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            source: self.source.clone(),
            ends: self.ends[..n.min(self.ends.len())].to_vec(),
        }
    }

    pub fn sample(&self, i: usize) -> WindowedSample {
        let batch: Batch<f32> = self.batch(&[i]);
        let s = &self.source;
        let mut y = vec![0f32; s.horizon * s.nodes];
        for n in 0..s.nodes {
            for f in 0..s.horizon {
                y[f * s.nodes + n] = batch.y.data()[n * s.horizon + f];
            }
        }
        WindowedSample {
            x: batch.x.reshape(&[s.input_len, s.nodes, s.channels]).expect("same size"),
            y: Tensor::new(&[s.horizon, s.nodes], y).expect("shape"),
            tod_idx: batch.tod[0],
            dow_idx: batch.dow[0],
        }
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Batch<T> {
        let s = &self.source;
        let (n, c, l, f) = (s.nodes, s.channels, s.input_len, s.horizon);
        let b = indices.len();
        let mut x = Vec::with_capacity(b * l * n * c);
        let mut y = vec![T::ZERO; b * n * f];
        let mut tod = Vec::with_capacity(b);
        let mut dow = Vec::with_capacity(b);
        for (bi, &i) in indices.iter().enumerate() {
            let t = self.ends[i];
            let start = (t + 1 - l) * n * c;
            x.extend(s.normalized[start..(t + 1) * n * c].iter().map(|&v| T::from_f64(v as f64)));
            for h in 0..f {
                let row = &s.flow[(t + 1 + h) * n..(t + 2 + h) * n];
                for (node, &v) in row.iter().enumerate() {
                    y[(bi * n + node) * f + h] = T::from_f64(v as f64);
                }
            }
            tod.push(self.tod_index(t));
            dow.push(self.dow_index(t));
        }
        Batch {
            x: Tensor::new(&[b, l, n, c], x).expect("shape"),
            y: Tensor::new(&[b, n, f], y).expect("shape"),
            tod,
            dow,
        }
    }

    /// Index batches; shuffled by `(seed, epoch)` when given, else in order.
    /// The final partial batch is kept.
    pub fn batch_order(&self, batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
        batch_order(self.len(), batch_size, shuffle)
    }
}

pub fn batch_order(len: usize, batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
    pub stats: NormStats,
}

/// Chronological split, statistics from the training frames, then windows
/// that never straddle a split boundary.
pub fn prepare(series: &RawSeries, input_len: usize, horizon: usize, split: &SplitSpec) -> Result<Splits> {
    split.validate()?;
    let (train_len, _, _) = split.lengths(series.frames());
    if train_len == 0 {
        return Err(Error::EmptySplit {
            split: "train",
            frames: 0,
            needed: input_len + horizon,
        });
    }
    let stats = NormStats::from_frames(series, train_len);
    make_windows(series, input_len, horizon, &stats, split)
}

pub fn make_windows(
    series: &RawSeries,
    input_len: usize,
    horizon: usize,
    stats: &NormStats,
    split: &SplitSpec,
) -> Result<Splits> {
    split.validate()?;
    if input_len == 0 || horizon == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    let (t, n, c) = (series.frames(), series.nodes(), series.channels());
    if stats.mean.len() != c {
        return Err(Error::Config(format!(
            "statistics cover {} channels, series has {c}",
            stats.mean.len()
        )));
    }
    let normalized = series
        .data
        .data()
        .chunks(c)
        .flat_map(|chunk| chunk.iter().enumerate().map(|(ch, &v)| stats.normalize(ch, v as f64) as f32))
        .collect();
    let flow = series.data.data().iter().step_by(c).copied().collect();
    let source = Arc::new(WindowSource {
        normalized,
        flow,
        nodes: n,
        channels: c,
        input_len,
        horizon,
        steps_per_day: series.steps_per_day(),
        start_weekday: series.start_weekday as usize,
    });

    let (train_len, val_len, test_len) = split.lengths(t);
    let needed = input_len + horizon;
    let mut start = 0;
    let mut sets = Vec::with_capacity(3);
    for (name, len, frac) in [
        ("train", train_len, split.train),
        ("val", val_len, split.val),
        ("test", test_len, split.test),
    ] {
        let ends: Vec<usize> = if len >= needed {
            (start + input_len - 1..start + len - horizon).collect()
        } else if frac > 0.0 {
            return Err(Error::EmptySplit {
                split: name,
                frames: len,
                needed,
            });
        } else {
            Vec::new()
        };
        sets.push(SampleSet {
            source: source.clone(),
            ends,
        });
        start += len;
    }
    let test = sets.pop().expect("three sets");
    let val = sets.pop().expect("three sets");
    let train = sets.pop().expect("three sets");
    Ok(Splits {
        train,
        val,
        test,
        stats: stats.clone(),
    })
}
