//! Single-layer causal self-attention encoder with a feed-forward block.
//!
//! Padding positions are never embedded or attended; callers pass only the
//! valid tokens of a sequence, oldest first. Every position goes through
//! [`SeqEncoderParams::step`], so a target encoded against a cached history
//! prefix and the same target at the end of a full causal pass execute the
//! same arithmetic in the same order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, relu, vec_mat, Matrix};

use super::{uniform_matrix, uniform_vec, Counters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqEncoderParams {
    pub d: usize,
    pub n_max: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `[d x 4d]`
    pub w1: Matrix,
    pub b1: Vec<f32>,
    /// `[4d x d]`
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

/// Keys, values and outputs of an encoded history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedPrefix {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub outputs: Vec<Vec<f32>>,
}

impl EncodedPrefix {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Max-subtracted softmax of scaled dot products, summed in key order.
pub fn attention_weights(q: &[f32], keys: &[&[f32]], scale: f32) -> Vec<f32> {
    let scores: Vec<f32> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut total = 0.0f32;
    for e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

impl SeqEncoderParams {
    pub fn init(d: usize, n_max: usize, rng: &mut impl Rng) -> Self {
        Self {
            d,
            n_max,
            wq: uniform_matrix(rng, d, d),
            wk: uniform_matrix(rng, d, d),
            wv: uniform_matrix(rng, d, d),
            wo: uniform_matrix(rng, d, d),
            w1: uniform_matrix(rng, d, 4 * d),
            b1: uniform_vec(rng, 4 * d, d),
            w2: uniform_matrix(rng, 4 * d, d),
            b2: uniform_vec(rng, d, 4 * d),
        }
    }

    fn scale(&self) -> f32 {
        1.0 / (self.d as f32).sqrt()
    }

    /// `h + W2 relu(W1 h + b1) + b2`
    pub fn feed_forward(&self, h: &[f32]) -> Vec<f32> {
        let hidden: Vec<f32> = vec_mat(h, &self.w1, Some(&self.b1)).into_iter().map(relu).collect();
        let ff = vec_mat(&hidden, &self.w2, Some(&self.b2));
        h.iter().zip(ff).map(|(a, b)| a + b).collect()
    }

    fn token_flops(&self, context_len: usize) -> u64 {
        let d = self.d as u64;
        // q, k, v, o projections + scores and weighted sum + feed-forward
        8 * d * d + 4 * d * context_len as u64 + 16 * d * d
    }

    /// Encodes one token attending to `prefix` and itself. Returns the
    /// token's output together with its key and value.
    fn step(&self, prefix_k: &[Vec<f32>], prefix_v: &[Vec<f32>], x: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let q = vec_mat(x, &self.wq, None);
        let k = vec_mat(x, &self.wk, None);
        let v = vec_mat(x, &self.wv, None);
        let mut keys: Vec<&[f32]> = prefix_k.iter().map(Vec::as_slice).collect();
        keys.push(&k);
        let weights = attention_weights(&q, &keys, self.scale());
        let mut attn = vec![0.0f32; self.d];
        for (w, val) in weights
            .iter()
            .zip(prefix_v.iter().map(Vec::as_slice).chain([v.as_slice()]))
        {
            for (a, &vi) in attn.iter_mut().zip(val) {
                *a += w * vi;
            }
        }
        let proj = vec_mat(&attn, &self.wo, None);
        let h: Vec<f32> = x.iter().zip(proj).map(|(a, b)| a + b).collect();
        (self.feed_forward(&h), k, v)
    }

    /// Full causal pass over `tokens`. FLOPs of the first `ro_len`
    /// positions are booked to the RO side, the rest to the NRO side.
    pub fn encode_causal(&self, tokens: &[Vec<f32>], ro_len: usize, counters: &mut Counters) -> EncodedPrefix {
        let mut enc = EncodedPrefix::default();
        for (i, x) in tokens.iter().enumerate() {
            let (out, k, v) = self.step(&enc.keys, &enc.values, x);
            enc.keys.push(k);
            enc.values.push(v);
            enc.outputs.push(out);
            let flops = self.token_flops(i + 1);
            if i < ro_len {
                counters.ro_flops += flops;
            } else {
                counters.nro_flops += flops;
            }
        }
        enc
    }

    /// Encodes a target that sees the whole history and itself, never
    /// other targets.
    pub fn encode_target(&self, history: &EncodedPrefix, target: &[f32], counters: &mut Counters) -> Vec<f32> {
        counters.nro_flops += self.token_flops(history.len() + 1);
        self.step(&history.keys, &history.values, target).0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserPooling {
    #[default]
    LastValid,
    Mean,
}

/// User representation from encoded history outputs; `None` when the
/// history is empty.
pub fn pool_user(enc: &EncodedPrefix, pooling: UserPooling) -> Option<Vec<f32>> {
    match pooling {
        UserPooling::LastValid => enc.outputs.last().cloned(),
        UserPooling::Mean => {
            let first = enc.outputs.first()?;
            let mut acc = vec![0.0f32; first.len()];
            for o in &enc.outputs {
                for (a, &x) in acc.iter_mut().zip(o) {
                    *a += x;
                }
            }
            let n = enc.outputs.len() as f32;
            Some(acc.into_iter().map(|a| a / n).collect())
        }
    }
}
