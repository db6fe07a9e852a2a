//! The dual encoder, per-language adapters, parameter freezing, and
//! checkpoint serialization.
//!
//! Message and reply towers share all base tensors: one encoder applied to
//! both inputs. Every tensor lives in an ordered name -> tensor map so the
//! optimizer, freezing, gradient checking, and serialization can treat the
//! parameter set uniformly.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub adapter_dim: usize,
    pub max_msg_len: usize,
    pub max_reply_len: usize,
    pub hash_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 30_000,
            embed_dim: 64,
            hidden_dim: 64,
            encoder_layers: 2,
            adapter_dim: 16,
            max_msg_len: 96,
            max_reply_len: 64,
            hash_seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.adapter_dim == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.adapter_dim >= self.hidden_dim {
            return Err(Error::Config(format!(
                "adapter_dim {} must be < hidden_dim {}",
                self.adapter_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary {
            size: self.vocab_size,
            hash_seed: self.hash_seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: ArrayD<f64>,
    pub frozen: bool,
}

/// Round through f32: every reachable parameter value is exactly
/// representable in the checkpoint's 32-bit blob, so save/load round-trips
/// are bit-exact.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

pub type GradMap = IndexMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSelector {
    None,
    Embedding,
    AllExceptAdapters,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor>,
    pub active_languages: BTreeSet<String>,
}

fn adapter_prefix(lang: &str) -> String {
    format!("adapter.{lang}.")
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        let mut normal = |shape: &[usize], std: f64| -> ArrayD<f64> {
            let dist = Normal::new(0.0, std).expect("valid std");
            ArrayD::from_shape_fn(shape, |_| quantize(dist.sample(&mut rng)))
        };
        let (v, e, h) = (
            config.vocab_size as usize,
            config.embed_dim,
            config.hidden_dim,
        );
        tensors.insert(
            "embedding".to_string(),
            Tensor {
                data: normal(&[v, e], 1.0),
                frozen: false,
            },
        );
        let mut fan_in = e;
        for i in 0..config.encoder_layers {
            tensors.insert(
                format!("layer{i}.w"),
                Tensor {
                    data: normal(&[fan_in, h], (1.0 / fan_in as f64).sqrt()),
                    frozen: false,
                },
            );
            tensors.insert(
                format!("layer{i}.b"),
                Tensor {
                    data: ArrayD::zeros(vec![h]),
                    frozen: false,
                },
            );
            fan_in = h;
        }
        tensors.insert(
            "out_proj.w".to_string(),
            Tensor {
                data: normal(&[fan_in, h], (1.0 / fan_in as f64).sqrt()),
                frozen: false,
            },
        );
        tensors.insert(
            "out_proj.b".to_string(),
            Tensor {
                data: ArrayD::zeros(vec![h]),
                frozen: false,
            },
        );
        tensors.insert(
            "mlm_head".to_string(),
            Tensor {
                data: normal(&[h, v], (1.0 / h as f64).sqrt()),
                frozen: false,
            },
        );
        Ok(ModelParams {
            config,
            tensors,
            active_languages: BTreeSet::new(),
        })
    }

    /// Bottleneck adapters drawn from N(0, 0.01^2); larger init can diverge.
    pub fn install_adapters(&mut self, langs: &BTreeSet<String>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.01).expect("valid std");
        let (h, a) = (self.config.hidden_dim, self.config.adapter_dim);
        for lang in langs {
            if self.active_languages.contains(lang) {
                continue;
            }
            let p = adapter_prefix(lang);
            for (name, shape) in [
                ("w_down", vec![h, a]),
                ("b_down", vec![a]),
                ("w_up", vec![a, h]),
                ("b_up", vec![h]),
            ] {
                self.tensors.insert(
                    format!("{p}{name}"),
                    Tensor {
                        data: ArrayD::from_shape_fn(shape, |_| quantize(dist.sample(&mut rng))),
                        frozen: false,
                    },
                );
            }
            self.active_languages.insert(lang.clone());
        }
    }

    pub fn has_adapters(&self) -> bool {
        !self.active_languages.is_empty()
    }

    fn get2(&self, name: &str) -> ndarray::ArrayView2<'_, f64> {
        self.tensors[name]
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor")
    }

    fn get1(&self, name: &str) -> ndarray::ArrayView1<'_, f64> {
        self.tensors[name]
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d tensor")
    }

    pub fn freeze(&mut self, selector: FreezeSelector) -> Result<()> {
        match selector {
            FreezeSelector::None => {
                for t in self.tensors.values_mut() {
                    t.frozen = false;
                }
            }
            FreezeSelector::Embedding => {
                for (name, t) in self.tensors.iter_mut() {
                    t.frozen = name == "embedding";
                }
            }
            FreezeSelector::AllExceptAdapters => {
                if !self.has_adapters() {
                    return Err(Error::Config(
                        "all_except_adapters freeze requires installed adapters".into(),
                    ));
                }
                for (name, t) in self.tensors.iter_mut() {
                    t.frozen = !name.starts_with("adapter.");
                }
            }
        }
        Ok(())
    }

    /// (adapter parameter count) / (base parameter count).
    pub fn adapter_overhead(&self) -> f64 {
        let (h, a) = (self.config.hidden_dim, self.config.adapter_dim);
        let per_lang = 2 * h * a + a + h;
        let adapter = per_lang * self.active_languages.len();
        let base: usize = self
            .tensors
            .iter()
            .filter(|(name, _)| !name.starts_with("adapter."))
            .map(|(_, t)| t.data.len())
            .sum();
        adapter as f64 / base as f64
    }

    /// Forward pass with cached intermediates for backprop.
    pub fn encode_cached(&self, seq: &TokenSequence) -> Result<EncodeCache> {
        let (v, e) = (self.config.vocab_size, self.config.embed_dim);
        let embedding = self.get2("embedding");
        let mut pooled = Array1::<f64>::zeros(e);
        for &id in &seq.ids {
            if id >= v {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of vocab range {v}"
                )));
            }
            pooled += &embedding.row(id as usize);
        }
        if !seq.ids.is_empty() {
            pooled /= seq.ids.len() as f64;
        }

        let mut layer_out = Vec::with_capacity(self.config.encoder_layers);
        let mut x = pooled.clone();
        for i in 0..self.config.encoder_layers {
            let w = self.get2(&format!("layer{i}.w"));
            let b = self.get1(&format!("layer{i}.b"));
            x = (x.dot(&w) + &b).mapv(f64::tanh);
            layer_out.push(x.clone());
        }
        let proj = x.dot(&self.get2("out_proj.w")) + &self.get1("out_proj.b");

        let (out, adapter_z) = if self.active_languages.contains(&seq.lang) {
            let p = adapter_prefix(&seq.lang);
            let z = (proj.dot(&self.get2(&format!("{p}w_down")))
                + &self.get1(&format!("{p}b_down")))
                .mapv(f64::tanh);
            let out = &proj + &z.dot(&self.get2(&format!("{p}w_up")))
                + &self.get1(&format!("{p}b_up"));
            (out, Some(z))
        } else {
            (proj.clone(), None)
        };

        Ok(EncodeCache {
            ids: seq.ids.clone(),
            lang: seq.lang.clone(),
            pooled,
            layer_out,
            proj,
            adapter_z,
            out,
        })
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Array1<f64>> {
        Ok(self.encode_cached(seq)?.out)
    }

    /// Accumulate d(loss)/d(tensor) into `grads` for the upstream gradient
    /// `d_out` on this cache's encoding. Only unfrozen tensors present in
    /// `grads` receive contributions.
    pub fn encode_backward(&self, cache: &EncodeCache, d_out: &Array1<f64>, grads: &mut GradMap) {
        let add2 = |grads: &mut GradMap, name: &str, update: Array2<f64>| {
            if let Some(g) = grads.get_mut(name) {
                let mut view = g.view_mut().into_dimensionality::<Ix2>().unwrap();
                view += &update;
            }
        };
        let add1 = |grads: &mut GradMap, name: &str, update: &Array1<f64>| {
            if let Some(g) = grads.get_mut(name) {
                let mut view = g.view_mut().into_dimensionality::<Ix1>().unwrap();
                view += update;
            }
        };
        fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
            let (n, m) = (a.len(), b.len());
            let mut out = Array2::zeros((n, m));
            for i in 0..n {
                for j in 0..m {
                    out[[i, j]] = a[i] * b[j];
                }
            }
            out
        }

        let mut d_proj = d_out.clone();
        if let Some(z) = &cache.adapter_z {
            let p = adapter_prefix(&cache.lang);
            let w_up = self.get2(&format!("{p}w_up"));
            let w_down = self.get2(&format!("{p}w_down"));
            add2(grads, &format!("{p}w_up"), outer(z, d_out));
            add1(grads, &format!("{p}b_up"), d_out);
            let dz = w_up.dot(d_out);
            let dpre = &dz * &z.mapv(|v| 1.0 - v * v);
            add2(grads, &format!("{p}w_down"), outer(&cache.proj, &dpre));
            add1(grads, &format!("{p}b_down"), &dpre);
            d_proj += &w_down.dot(&dpre);
        }

        let last_in = if self.config.encoder_layers == 0 {
            &cache.pooled
        } else {
            &cache.layer_out[self.config.encoder_layers - 1]
        };
        add2(grads, "out_proj.w", outer(last_in, &d_proj));
        add1(grads, "out_proj.b", &d_proj);
        let mut dx = self.get2("out_proj.w").dot(&d_proj);

        for i in (0..self.config.encoder_layers).rev() {
            let y = &cache.layer_out[i];
            let dpre = &dx * &y.mapv(|v| 1.0 - v * v);
            let input = if i == 0 { &cache.pooled } else { &cache.layer_out[i - 1] };
            add2(grads, &format!("layer{i}.w"), outer(input, &dpre));
            add1(grads, &format!("layer{i}.b"), &dpre);
            dx = self.get2(&format!("layer{i}.w")).dot(&dpre);
        }

        if !cache.ids.is_empty() {
            if let Some(g) = grads.get_mut("embedding") {
                let mut view = g.view_mut().into_dimensionality::<Ix2>().unwrap();
                let scale = 1.0 / cache.ids.len() as f64;
                for &id in &cache.ids {
                    let mut row = view.row_mut(id as usize);
                    row += &(&dx * scale);
                }
            }
        }
    }

    /// Mask-prediction head logits for a hidden vector.
    pub fn mlm_logits(&self, h: &Array1<f64>) -> Array1<f64> {
        self.get2("mlm_head").t().dot(h)
    }

    pub fn mlm_head(&self) -> ndarray::ArrayView2<'_, f64> {
        self.get2("mlm_head")
    }

    /// Zero-filled gradient map covering exactly the unfrozen tensors.
    pub fn empty_grads(&self) -> GradMap {
        self.tensors
            .iter()
            .filter(|(_, t)| !t.frozen)
            .map(|(name, t)| (name.clone(), ArrayD::zeros(t.data.shape())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub ids: Vec<u32>,
    pub lang: String,
    pub pooled: Array1<f64>,
    pub layer_out: Vec<Array1<f64>>,
    pub proj: Array1<f64>,
    pub adapter_z: Option<Array1<f64>>,
    pub out: Array1<f64>,
}

// --- checkpoint container -------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String, // u128 as decimal string (JSON-safe)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub provenance: Vec<String>,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorManifest {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorManifest>,
    active_languages: BTreeSet<String>,
    provenance: Vec<String>,
    rng: RngState,
    blob_sha256: String,
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Checkpoint {
            params,
            provenance: Vec::new(),
            rng: RngState {
                seed,
                word_pos: "0".into(),
            },
        }
    }

    /// Write `manifest.json` + `tensors.bin` (little-endian f32) under `path`.
    /// The write is atomic: a temp directory is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let parent = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&tmp);
        std::fs::create_dir_all(&tmp).map_err(|e| Error::Io {
            path: tmp.display().to_string(),
            source: e,
        })?;

        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in &self.params.tensors {
            tensors.push(TensorManifest {
                name: name.clone(),
                shape: t.data.shape().to_vec(),
                frozen: t.frozen,
            });
            for v in t.data.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&blob);
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.params.config.clone(),
            tensors,
            active_languages: self.params.active_languages.clone(),
            provenance: self.provenance.clone(),
            rng: self.rng.clone(),
            blob_sha256: format!("{digest:x}"),
        };

        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = tmp.join(name);
            let mut f = std::fs::File::create(&p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            f.write_all(bytes).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })
        };
        write(
            "manifest.json",
            serde_json::to_string_pretty(&manifest).expect("manifest").as_bytes(),
        )?;
        write("tensors.bin", &blob)?;

        let _ = std::fs::remove_dir_all(path);
        std::fs::rename(&tmp, path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let manifest_path = path.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Io {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {})",
                manifest.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let blob_path = path.join("tensors.bin");
        let blob = std::fs::read(&blob_path).map_err(|e| Error::Io {
            path: blob_path.display().to_string(),
            source: e,
        })?;
        let digest = format!("{:x}", Sha256::digest(&blob));
        if digest != manifest.blob_sha256 {
            return Err(Error::Checkpoint("blob checksum mismatch (corrupt file)".into()));
        }

        let expected: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if blob.len() != expected * 4 {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match manifest ({} floats)",
                blob.len(),
                expected
            )));
        }

        let mut tensors = IndexMap::new();
        let mut offset = 0usize;
        for tm in &manifest.tensors {
            let n: usize = tm.shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let at = offset + i * 4;
                let bytes: [u8; 4] = blob[at..at + 4].try_into().unwrap();
                values.push(f64::from(f32::from_le_bytes(bytes)));
            }
            offset += n * 4;
            let data = ArrayD::from_shape_vec(tm.shape.clone(), values)
                .map_err(|e| Error::Checkpoint(format!("shape mismatch for {}: {e}", tm.name)))?;
            tensors.insert(
                tm.name.clone(),
                Tensor {
                    data,
                    frozen: tm.frozen,
                },
            );
        }

        Ok(Checkpoint {
            params: ModelParams {
                config: manifest.config,
                tensors,
                active_languages: manifest.active_languages,
            },
            provenance: manifest.provenance,
            rng: manifest.rng,
        })
    }
}
