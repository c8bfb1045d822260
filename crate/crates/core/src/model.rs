//! The assembled forecaster: embedding, a stack of M3 blocks and a per-node
//! regression head, plus checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{parse_kv, ModelConfig};
use crate::data::NormStats;
use crate::embedding::{Embedding, EmbeddingCache};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::m3::{M3Cache, M3Layer};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct M3Net<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    embedding: Embedding,
    layers: Vec<M3Layer>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    embedding: EmbeddingCache<T>,
    layers: Vec<M3Cache<T>>,
    last: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn layers(&self) -> &[M3Cache<T>] {
        &self.layers
    }
}

impl<T: Real> M3Net<T> {
    pub fn new(mut config: ModelConfig) -> Result<Self> {
        config.validate()?;
        config.experts = config.effective_experts();
        let mut store = ParamStore::new(config.seed);
        let embedding = Embedding::new(&mut store, &config)?;
        let layers = (0..config.layers)
            .map(|i| M3Layer::new(&mut store, i, &config))
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut store, "head", config.hidden(), config.horizon)?;
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layers(&self) -> &[M3Layer] {
        &self.layers
    }

    /// `x: [B, L, N, C]` → normalized predictions `[B·N, F]`.
    pub fn forward_batch(
        &self,
        x: &Tensor<T>,
        tod: &[usize],
        dow: &[usize],
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (mut h, embedding) = self.embedding.forward(&self.store, x, tod, dow)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&self.store, &h)?;
            caches.push(cache);
            h = next;
        }
        let y = self.head.forward(&self.store, &h)?;
        Ok((
            y,
            ForwardCache {
                embedding,
                layers: caches,
                last: h,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dy: [B·N, F]`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dy: &Tensor<T>) -> Result<()> {
        let mut dh = self
            .head
            .backward(&mut self.store, &cache.last, dy, true)?
            .expect("requested dx");
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dh = layer.backward(&mut self.store, c, &dh)?;
        }
        self.embedding.backward(&mut self.store, &cache.embedding, &dh)
    }

    /// Single window `x: [L, N, C]` → normalized `N×F`.
    pub fn forward(&self, x: &Tensor<T>, tod: usize, dow: usize) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let x = x.clone().reshape(&shape)?;
        Ok(self.forward_batch(&x, &[tod], &[dow])?.0)
    }

    /// Raw-scale `N×F` forecast.
    pub fn predict(&self, x: &Tensor<T>, tod: usize, dow: usize, stats: &NormStats) -> Result<Tensor<T>> {
        let y = self.forward(x, tod, dow)?;
        Ok(stats.denormalize_flow(&y))
    }

    /// Raw grouping matrix of every M3 block, `N×g` each.
    pub fn grouping_matrices(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .map(|l| self.store.value(l.spatial.grouping).clone())
            .collect()
    }

    /// Closed-form parameter count for `config` (independent of construction).
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        let d = config.hidden();
        let k = config.effective_experts();
        let mlp = 2 * (d * d + d);
        let embed = config.input_len * config.channels * config.d_feature
            + config.d_feature
            + config.nodes * config.d_node
            + config.steps_per_day * config.d_tod
            + config.days_per_week * config.d_dow;
        let layer = config.nodes * config.groups + mlp + d * k + k + k * mlp;
        embed + config.layers * layer + d * config.horizon + config.horizon
    }
}

const CKPT_MAGIC: &[u8; 10] = b"M3NETCKPT1";
const CKPT_VERSION: u32 = 1;

/// Model configuration, optional normalization statistics and every
/// parameter as `f32`, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: Option<NormStats>,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &M3Net<T>, stats: Option<&NormStats>) -> Self {
        Self {
            config: model.config.clone(),
            stats: stats.cloned(),
            params: model
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// Rebuilds the model and overwrites every parameter from the checkpoint.
    pub fn to_model<T: Real>(&self) -> Result<M3Net<T>> {
        let mut model = M3Net::<T>::new(self.config.clone())?;
        if model.store.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (p, (name, value)) in model.store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.cast();
        }
        Ok(model)
    }

    fn header_text(&self) -> String {
        let mut text = self.config.to_text();
        if let Some(stats) = &self.stats {
            text.push_str(&stats.to_text());
        }
        text
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let text = self.header_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for (name, value) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[value.rank() as u8])?;
            for &dim in value.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        if cur.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads version {CKPT_VERSION}"
            )));
        }
        let text_len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.take(text_len)?)
            .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)
            .map_err(|e| Error::Corrupt(format!("config text: {e}")))?;
        let stats = NormStats::from_kv(&parse_kv(text)?)?;

        let mut params = Vec::new();
        while !cur.at_end() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(&shape, data)
                .map_err(|_| Error::Corrupt(format!("parameter `{name}` has invalid shape {shape:?}")))?;
            params.push((name, value));
        }
        Ok(Self {
            config,
            stats,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(&mut BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn save_checkpoint<T: Real>(model: &M3Net<T>, stats: Option<&NormStats>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, stats).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(M3Net<T>, Option<NormStats>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.stats))
}
