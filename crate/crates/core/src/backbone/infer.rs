//! Graph-free forward pass with a per-layer key/value cache.
//!
//! Rows are processed one at a time with the same kernels and accumulation
//! order as the graph path, so extending a cache row by row yields the same
//! hidden states as a full forward over the whole sequence.

use super::BackboneWeights;
use crate::autodiff::kernels::{self, dot, layer_norm_row, vec_mat_acc};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn affine<T: Real>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); b.len()];
    vec_mat_acc(x, w, b.len(), &mut out);
    for (o, &bv) in out.iter_mut().zip(b) {
        *o = *o + bv;
    }
    out
}

impl<T: Real> BackboneWeights<T> {
    pub fn new_cache(&self) -> KvCache<T> {
        KvCache { keys: vec![Vec::new(); self.config.n_layers], values: vec![Vec::new(); self.config.n_layers], len: 0 }
    }

    /// Runs composed input rows (`n × d_model`) at the next cache positions
    /// and returns their final-norm hidden states.
    pub fn extend(&self, cache: &mut KvCache<T>, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let d = c.d_model;
        if rows.rank() != 2 || rows.cols() != d {
            return Err(Error::Shape(format!("backbone extend: rows of shape {:?}, expected [n, {d}]", rows.shape())));
        }
        if cache.len + rows.rows() > c.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_positions {}",
                cache.len + rows.rows(),
                c.max_positions
            )));
        }
        let hd = c.head_dim();
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut out = Vec::with_capacity(rows.len());
        let mut h = vec![T::zero(); d];
        let mut merged = vec![T::zero(); d];
        for r in 0..rows.rows() {
            let mut x = rows.row(r).to_vec();
            let pos = cache.len;
            for (l, layer) in self.layers.iter().enumerate() {
                layer_norm_row(&x, layer.ln_1_weight.data(), layer.ln_1_bias.data(), &mut h);
                let qkv = affine(&h, layer.attn_weight.data(), layer.attn_bias.data());
                cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
                cache.values[l].extend_from_slice(&qkv[2 * d..]);
                let (keys, values) = (&cache.keys[l], &cache.values[l]);
                for head in 0..c.n_heads {
                    let q = &qkv[head * hd..(head + 1) * hd];
                    let mut scores: Vec<T> =
                        (0..=pos).map(|j| dot(q, &keys[j * d + head * hd..j * d + (head + 1) * hd]) * scale).collect();
                    kernels::softmax_row(&mut scores);
                    let o = &mut merged[head * hd..(head + 1) * hd];
                    o.iter_mut().for_each(|v| *v = T::zero());
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &values[j * d + head * hd..j * d + (head + 1) * hd];
                        for (ov, &vv) in o.iter_mut().zip(v) {
                            *ov = *ov + p * vv;
                        }
                    }
                }
                let a = affine(&merged, layer.attn_proj_weight.data(), layer.attn_proj_bias.data());
                for (xv, &av) in x.iter_mut().zip(&a) {
                    *xv = *xv + av;
                }
                layer_norm_row(&x, layer.ln_2_weight.data(), layer.ln_2_bias.data(), &mut h);
                let mut f = affine(&h, layer.fc_weight.data(), layer.fc_bias.data());
                f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
                let f = affine(&f, layer.mlp_proj_weight.data(), layer.mlp_proj_bias.data());
                for (xv, &fv) in x.iter_mut().zip(&f) {
                    *xv = *xv + fv;
                }
            }
            layer_norm_row(&x, self.ln_f_weight.data(), self.ln_f_bias.data(), &mut h);
            out.extend_from_slice(&h);
            cache.len += 1;
        }
        Tensor::new(vec![rows.rows(), d], out)
    }

    /// Tied-head logits for one hidden row.
    pub fn head_logits(&self, hidden: &[T]) -> Vec<T> {
        (0..self.config.vocab_size).map(|v| dot(hidden, self.wte.row(v))).collect()
    }

    pub fn hidden_states(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cache = self.new_cache();
        self.extend(&mut cache, input)
    }

    /// Full forward from composed embeddings to `T × vocab_size` logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = self.hidden_states(input)?;
        let mut data = Vec::with_capacity(hidden.rows() * self.config.vocab_size);
        for r in 0..hidden.rows() {
            data.extend(self.head_logits(hidden.row(r)));
        }
        Tensor::new(vec![hidden.rows(), self.config.vocab_size], data)
    }
}
