//! Frozen decoder-only transformer.
//!
//! Pre-norm residual blocks (`x + attn(ln1(x))`, `x + mlp(ln2(x))`), a final
//! layer norm, and an output head tied to the token embedding matrix. Tensor
//! names and layouts follow the GPT-2 checkpoint convention (`[in, out]`
//! projection matrices) so external weights can be converted record by record.

mod infer;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::container::{Container, CONFIG_FIELDS};
use crate::error::{Error, Result};

pub use infer::KvCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub head_tied: bool,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self { n_layers: 4, d_model: 64, n_heads: 4, vocab_size: 512, max_positions: 256, head_tied: true }
    }

    /// GPT-2 medium dimensions.
    pub fn full_scale() -> Self {
        Self { n_layers: 24, d_model: 1024, n_heads: 16, vocab_size: 50257, max_positions: 1024, head_tied: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::invalid("backbone dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_tied {
            return Err(Error::invalid("only tied output heads are supported"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub(crate) fn to_header(self) -> [u32; CONFIG_FIELDS] {
        [
            self.n_layers as u32,
            self.d_model as u32,
            self.n_heads as u32,
            self.vocab_size as u32,
            self.max_positions as u32,
            u32::from(self.head_tied),
        ]
    }

    pub(crate) fn from_header(h: [u32; CONFIG_FIELDS]) -> Self {
        Self {
            n_layers: h[0] as usize,
            d_model: h[1] as usize,
            n_heads: h[2] as usize,
            vocab_size: h[3] as usize,
            max_positions: h[4] as usize,
            head_tied: h[5] != 0,
        }
    }
}

#[derive(Clone)]
pub struct LayerWeights<T> {
    pub ln_1_weight: Arc<Tensor<T>>,
    pub ln_1_bias: Arc<Tensor<T>>,
    pub attn_weight: Arc<Tensor<T>>,
    pub attn_bias: Arc<Tensor<T>>,
    pub attn_proj_weight: Arc<Tensor<T>>,
    pub attn_proj_bias: Arc<Tensor<T>>,
    pub ln_2_weight: Arc<Tensor<T>>,
    pub ln_2_bias: Arc<Tensor<T>>,
    pub fc_weight: Arc<Tensor<T>>,
    pub fc_bias: Arc<Tensor<T>>,
    pub mlp_proj_weight: Arc<Tensor<T>>,
    pub mlp_proj_bias: Arc<Tensor<T>>,
}

const LAYER_FIELDS: [&str; 12] = [
    "attn.c_attn.bias",
    "attn.c_attn.weight",
    "attn.c_proj.bias",
    "attn.c_proj.weight",
    "ln_1.bias",
    "ln_1.weight",
    "ln_2.bias",
    "ln_2.weight",
    "mlp.c_fc.bias",
    "mlp.c_fc.weight",
    "mlp.c_proj.bias",
    "mlp.c_proj.weight",
];

impl<T> LayerWeights<T> {
    fn field(&self, name: &str) -> &Arc<Tensor<T>> {
        match name {
            "attn.c_attn.bias" => &self.attn_bias,
            "attn.c_attn.weight" => &self.attn_weight,
            "attn.c_proj.bias" => &self.attn_proj_bias,
            "attn.c_proj.weight" => &self.attn_proj_weight,
            "ln_1.bias" => &self.ln_1_bias,
            "ln_1.weight" => &self.ln_1_weight,
            "ln_2.bias" => &self.ln_2_bias,
            "ln_2.weight" => &self.ln_2_weight,
            "mlp.c_fc.bias" => &self.fc_bias,
            "mlp.c_fc.weight" => &self.fc_weight,
            "mlp.c_proj.bias" => &self.mlp_proj_bias,
            "mlp.c_proj.weight" => &self.mlp_proj_weight,
            _ => unreachable!("unknown layer field {name}"),
        }
    }

    fn field_mut(&mut self, name: &str) -> &mut Arc<Tensor<T>> {
        match name {
            "attn.c_attn.bias" => &mut self.attn_bias,
            "attn.c_attn.weight" => &mut self.attn_weight,
            "attn.c_proj.bias" => &mut self.attn_proj_bias,
            "attn.c_proj.weight" => &mut self.attn_proj_weight,
            "ln_1.bias" => &mut self.ln_1_bias,
            "ln_1.weight" => &mut self.ln_1_weight,
            "ln_2.bias" => &mut self.ln_2_bias,
            "ln_2.weight" => &mut self.ln_2_weight,
            "mlp.c_fc.bias" => &mut self.fc_bias,
            "mlp.c_fc.weight" => &mut self.fc_weight,
            "mlp.c_proj.bias" => &mut self.mlp_proj_bias,
            "mlp.c_proj.weight" => &mut self.mlp_proj_weight,
            _ => unreachable!("unknown layer field {name}"),
        }
    }
}

/// Backbone parameters. Tensors are reference-counted so graphs and
/// evaluation threads share them without copying.
#[derive(Clone)]
pub struct BackboneWeights<T> {
    pub config: BackboneConfig,
    /// `vocab_size × d_model`; also the (transposed) output head.
    pub wte: Arc<Tensor<T>>,
    /// `max_positions × d_model`.
    pub wpe: Arc<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub ln_f_weight: Arc<Tensor<T>>,
    pub ln_f_bias: Arc<Tensor<T>>,
}

/// Graph handles for every backbone tensor.
pub struct BoundBackbone {
    pub wte: Var,
    pub wpe: Var,
    pub layers: Vec<[Var; 12]>,
    pub ln_f_weight: Var,
    pub ln_f_bias: Var,
}

impl BoundBackbone {
    /// Handles paired with their container names, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (f, &v) in LAYER_FIELDS.iter().zip(layer) {
                out.push((format!("h.{i}.{f}"), v));
            }
        }
        out.push(("ln_f.bias".into(), self.ln_f_bias));
        out.push(("ln_f.weight".into(), self.ln_f_weight));
        out.push(("wpe".into(), self.wpe));
        out.push(("wte".into(), self.wte));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

pub struct ForwardOutput {
    /// Final-norm hidden states, `T × d_model`.
    pub hidden: Var,
    /// `T × vocab_size`.
    pub logits: Var,
    /// Attention probabilities per layer, then per head (`T × T`).
    pub attention: Vec<Vec<Var>>,
}

fn layer_shapes(c: &BackboneConfig) -> [Vec<usize>; 12] {
    let d = c.d_model;
    [
        vec![3 * d],
        vec![d, 3 * d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d],
        vec![4 * d],
        vec![d, 4 * d],
        vec![d],
        vec![4 * d, d],
    ]
}

impl<T: Real> BackboneWeights<T> {
    /// GPT-2 style initialization: N(0, 0.02) matrices, residual projections
    /// scaled by `1/sqrt(2·n_layers)`, zero biases, unit norm gains.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: Vec<usize>, s: f64| -> Arc<Tensor<T>> {
            let dist = Normal::new(0.0, s).expect("valid std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
            Arc::new(Tensor::new(shape, data).expect("shape"))
        };
        let d = config.d_model;
        let ones = |n: usize| Arc::new(Tensor::new(vec![n], vec![T::one(); n]).expect("shape"));
        let zeros = |n: usize| Arc::new(Tensor::zeros(vec![n]));
        let wte = normal(vec![config.vocab_size, d], std);
        let wpe = normal(vec![config.max_positions, d], 0.01);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln_1_weight: ones(d),
                ln_1_bias: zeros(d),
                attn_weight: normal(vec![d, 3 * d], std),
                attn_bias: zeros(3 * d),
                attn_proj_weight: normal(vec![d, d], resid_std),
                attn_proj_bias: zeros(d),
                ln_2_weight: ones(d),
                ln_2_bias: zeros(d),
                fc_weight: normal(vec![d, 4 * d], std),
                fc_bias: zeros(4 * d),
                mlp_proj_weight: normal(vec![4 * d, d], resid_std),
                mlp_proj_bias: zeros(d),
            });
        }
        Ok(Self { config, wte, wpe, layers, ln_f_weight: ones(d), ln_f_bias: zeros(d) })
    }

    /// All tensors with their container names, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for f in LAYER_FIELDS {
                out.push((format!("h.{i}.{f}"), layer.field(f).as_ref()));
            }
        }
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("ln_f.weight".into(), &self.ln_f_weight));
        out.push(("wpe".into(), &self.wpe));
        out.push(("wte".into(), &self.wte));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and native-precision values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(T::NAME.as_bytes());
        for (name, t) in self.named_tensors() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> BackboneWeights<U> {
        let c = |t: &Arc<Tensor<T>>| Arc::new(t.cast::<U>());
        BackboneWeights {
            config: self.config,
            wte: c(&self.wte),
            wpe: c(&self.wpe),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln_1_weight: c(&l.ln_1_weight),
                    ln_1_bias: c(&l.ln_1_bias),
                    attn_weight: c(&l.attn_weight),
                    attn_bias: c(&l.attn_bias),
                    attn_proj_weight: c(&l.attn_proj_weight),
                    attn_proj_bias: c(&l.attn_proj_bias),
                    ln_2_weight: c(&l.ln_2_weight),
                    ln_2_bias: c(&l.ln_2_bias),
                    fc_weight: c(&l.fc_weight),
                    fc_bias: c(&l.fc_bias),
                    mlp_proj_weight: c(&l.mlp_proj_weight),
                    mlp_proj_bias: c(&l.mlp_proj_bias),
                })
                .collect(),
            ln_f_weight: c(&self.ln_f_weight),
            ln_f_bias: c(&self.ln_f_bias),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.config.to_header());
        for (name, t) in self.named_tensors() {
            c.insert(name, t.shape().to_vec(), t.data().iter().map(|v| v.as_f32()).collect());
        }
        c
    }

    pub fn from_container(mut c: Container, expected: &BackboneConfig) -> Result<Self> {
        let found = BackboneConfig::from_header(c.config);
        if &found != expected {
            return Err(Error::invalid(format!("weight file config mismatch: expected {expected:?}, found {found:?}")));
        }
        expected.validate()?;
        let d = expected.d_model;
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Arc<Tensor<T>>> {
            let rec = c.take(name)?;
            if rec.dims != shape {
                return Err(Error::invalid(format!("tensor `{name}`: expected shape {shape:?}, found {:?}", rec.dims)));
            }
            let data = rec.values.iter().map(|&v| T::lit(f64::from(v))).collect();
            Ok(Arc::new(Tensor::new(shape, data)?))
        };
        let wte = take("wte", vec![expected.vocab_size, d])?;
        let wpe = take("wpe", vec![expected.max_positions, d])?;
        let ln_f_weight = take("ln_f.weight", vec![d])?;
        let ln_f_bias = take("ln_f.bias", vec![d])?;
        let shapes = layer_shapes(expected);
        let mut layers = Vec::with_capacity(expected.n_layers);
        for i in 0..expected.n_layers {
            let mut get = |k: usize| take(&format!("h.{i}.{}", LAYER_FIELDS[k]), shapes[k].clone());
            let (attn_bias, attn_weight, attn_proj_bias, attn_proj_weight) = (get(0)?, get(1)?, get(2)?, get(3)?);
            let (ln_1_bias, ln_1_weight, ln_2_bias, ln_2_weight) = (get(4)?, get(5)?, get(6)?, get(7)?);
            let (fc_bias, fc_weight, mlp_proj_bias, mlp_proj_weight) = (get(8)?, get(9)?, get(10)?, get(11)?);
            layers.push(LayerWeights {
                ln_1_weight,
                ln_1_bias,
                attn_weight,
                attn_bias,
                attn_proj_weight,
                attn_proj_bias,
                ln_2_weight,
                ln_2_bias,
                fc_weight,
                fc_bias,
                mlp_proj_weight,
                mlp_proj_bias,
            });
        }
        if let Some(extra) = c.records.keys().next() {
            return Err(Error::Format(format!("unexpected record `{extra}` in weight file")));
        }
        Ok(Self { config: *expected, wte, wpe, layers, ln_f_weight, ln_f_bias })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, expected: &BackboneConfig) -> Result<Self> {
        Self::from_container(Container::load(path)?, expected)
    }

    /// Reads the config block of a weight file without loading tensors.
    pub fn peek_config(path: &Path) -> Result<BackboneConfig> {
        Ok(BackboneConfig::from_header(Container::load(path)?.config))
    }

    /// Frozen token embedding rows for `ids`.
    pub fn token_embed(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::invalid(format!("token id {id} outside vocabulary of {}", self.config.vocab_size)));
            }
            data.extend_from_slice(self.wte.row(id));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Adds every tensor to the graph, frozen or trainable.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundBackbone {
        let mut put = |t: &Arc<Tensor<T>>| {
            if trainable {
                g.param(t.as_ref().clone())
            } else {
                g.constant(Arc::clone(t))
            }
        };
        let layers = self.layers.iter().map(|l| LAYER_FIELDS.map(|f| put(l.field(f)))).collect();
        BoundBackbone {
            layers,
            ln_f_bias: put(&self.ln_f_bias),
            ln_f_weight: put(&self.ln_f_weight),
            wpe: put(&self.wpe),
            wte: put(&self.wte),
        }
    }

    /// Replaces a tensor by container name (used by full-model pretraining).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor<T>>> {
        match name {
            "wte" => Some(&mut self.wte),
            "wpe" => Some(&mut self.wpe),
            "ln_f.weight" => Some(&mut self.ln_f_weight),
            "ln_f.bias" => Some(&mut self.ln_f_bias),
            _ => {
                let rest = name.strip_prefix("h.")?;
                let (idx, field) = rest.split_once('.')?;
                let i: usize = idx.parse().ok()?;
                if !LAYER_FIELDS.contains(&field) {
                    return None;
                }
                Some(self.layers.get_mut(i)?.field_mut(field))
            }
        }
    }
}

/// Transformer stack on composed input embeddings (`T × d_model`).
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    b: &BoundBackbone,
    config: &BackboneConfig,
    input: Var,
) -> Result<ForwardOutput> {
    let (hidden, attention) = forward_hidden(g, b, config, input)?;
    let logits = head(g, b, hidden)?;
    Ok(ForwardOutput { hidden, logits, attention })
}

/// Tied output head on final-norm hidden rows.
pub fn head<T: Real>(g: &mut Graph<T>, b: &BoundBackbone, hidden: Var) -> Result<Var> {
    let wt = g.transpose(b.wte)?;
    g.matmul(hidden, wt)
}

/// Final-norm hidden states and per-layer, per-head attention weights.
pub fn forward_hidden<T: Real>(
    g: &mut Graph<T>,
    b: &BoundBackbone,
    config: &BackboneConfig,
    input: Var,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let t = g.value(input).rows();
    if g.value(input).shape() != [t, config.d_model] {
        return Err(Error::Shape(format!(
            "backbone forward: input shape {:?}, expected [T, {}]",
            g.value(input).shape(),
            config.d_model
        )));
    }
    if t > config.max_positions {
        return Err(Error::invalid(format!("sequence length {t} exceeds max_positions {}", config.max_positions)));
    }
    let d = config.d_model;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mask = g.causal_mask(t);
    let mut x = input;
    let mut attention = Vec::with_capacity(config.n_layers);
    for l in &b.layers {
        // field order: see LAYER_FIELDS
        let [attn_b, attn_w, proj_b, proj_w, ln1_b, ln1_w, ln2_b, ln2_w, fc_b, fc_w, mproj_b, mproj_w] = *l;
        let h = g.layer_norm(x, ln1_w, ln1_b)?;
        let qkv = g.matmul(h, attn_w)?;
        let qkv = g.add(qkv, attn_b)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        let mut probs = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let q = g.slice(qkv, 1, head * hd, (head + 1) * hd)?;
            let k = g.slice(qkv, 1, d + head * hd, d + (head + 1) * hd)?;
            let v = g.slice(qkv, 1, 2 * d + head * hd, 2 * d + (head + 1) * hd)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.mask_add(scores, mask)?;
            let p = g.softmax(scores);
            probs.push(p);
            heads.push(g.matmul(p, v)?);
        }
        attention.push(probs);
        let merged = g.concat(&heads, 1)?;
        let a = g.matmul(merged, proj_w)?;
        let a = g.add(a, proj_b)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, ln2_w, ln2_b)?;
        let f = g.matmul(h, fc_w)?;
        let f = g.add(f, fc_b)?;
        let f = g.gelu(f);
        let f = g.matmul(f, mproj_w)?;
        let f = g.add(f, mproj_b)?;
        x = g.add(x, f)?;
    }
    let hidden = g.layer_norm(x, b.ln_f_weight, b.ln_f_bias)?;
    Ok((hidden, attention))
}

/// Token + positional embeddings for a plain token sequence (pretraining path).
pub fn embed_tokens<T: Real>(g: &mut Graph<T>, b: &BoundBackbone, ids: &[usize]) -> Result<Var> {
    let tok = g.gather(b.wte, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather(b.wpe, &positions)?;
    g.add(tok, pos)
}
