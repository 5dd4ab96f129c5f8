//! Small pre-norm Transformer encoder-decoder.
//!
//! The encoder self-attends over the query/key sequence. The decoder starts
//! from the same sequence, self-attends, then cross-attends with queries from
//! its own stream, keys from the encoder output and values from the embedded
//! value sequence. Decoding is a single parallel pass: output length equals
//! input length.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Dense};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
}

impl TransformerSpec {
    pub fn new(layers: usize, heads: usize, model_dim: usize) -> Self {
        Self { layers, heads, model_dim, feedforward_dim: 4 * model_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("transformer needs layers and a feedforward width".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position encodings, `(len, dim)`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim)))?,
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim)))?,
        })
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lin = |n: &str| Dense::new(store, &format!("{name}.{n}"), dim, dim, Activation::None, rng);
        Ok(Self { wq: lin("q")?, wk: lin("k")?, wv: lin("v")?, wo: lin("o")?, heads })
    }

    /// Scaled dot-product attention; `q` is `(Lq, d)`, `k` and `v` `(Lk, d)`.
    pub fn apply(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        if tape.shape(k).0 != tape.shape(v).0 {
            return Err(Error::Shape(format!("attention keys {:?} vs values {:?}", tape.shape(k), tape.shape(v))));
        }
        let q = self.wq.apply(tape, q)?;
        let k = self.wk.apply(tape, k)?;
        let v = self.wv.apply(tape, v)?;
        let dim = tape.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.wo.apply(tape, joined)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Dense::new(store, &format!("{name}.ff1"), dim, hidden, Activation::Relu, rng)?,
            down: Dense::new(store, &format!("{name}.ff2"), hidden, dim, Activation::None, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, x)?;
        self.down.apply(tape, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub spec: TransformerSpec,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    norm_enc: Norm,
    norm_dec: Norm,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, spec: TransformerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let mut encoder = Vec::with_capacity(spec.layers);
        for i in 0..spec.layers {
            let p = format!("{name}.enc{i}");
            encoder.push(EncoderLayer {
                norm_attn: Norm::new(store, &format!("{p}.ln1"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, spec.heads, rng)?,
                norm_ff: Norm::new(store, &format!("{p}.ln2"), d)?,
                ff: FeedForward::new(store, &p, d, spec.feedforward_dim, rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(spec.layers);
        for i in 0..spec.layers {
            let p = format!("{name}.dec{i}");
            decoder.push(DecoderLayer {
                norm_self: Norm::new(store, &format!("{p}.ln1"), d)?,
                self_attn: Attention::new(store, &format!("{p}.self"), d, spec.heads, rng)?,
                norm_cross: Norm::new(store, &format!("{p}.ln2"), d)?,
                cross_attn: Attention::new(store, &format!("{p}.cross"), d, spec.heads, rng)?,
                norm_ff: Norm::new(store, &format!("{p}.ln3"), d)?,
                ff: FeedForward::new(store, &p, d, spec.feedforward_dim, rng)?,
            });
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
            norm_enc: Norm::new(store, &format!("{name}.enc_norm"), d)?,
            norm_dec: Norm::new(store, &format!("{name}.dec_norm"), d)?,
        })
    }

    /// `queries_keys` and `values` are both `(L, d)`; the output is `(L, d)`.
    pub fn apply(&self, tape: &mut Tape<'_>, queries_keys: Var, values: Var) -> Result<Var> {
        let (len, dim) = tape.shape(queries_keys);
        if dim != self.spec.model_dim || tape.shape(values) != (len, dim) {
            return Err(Error::Shape(format!(
                "transformer expects ({len}, {}) inputs, got {:?} and {:?}",
                self.spec.model_dim,
                tape.shape(queries_keys),
                tape.shape(values)
            )));
        }
        let pe = tape.input(positional_encoding(len, dim));
        let x = tape.add(queries_keys, pe)?;
        let vals = tape.add(values, pe)?;

        let mut h = x;
        for layer in &self.encoder {
            let n = layer.norm_attn.apply(tape, h)?;
            let a = layer.attn.apply(tape, n, n, n)?;
            h = tape.add(h, a)?;
            let n = layer.norm_ff.apply(tape, h)?;
            let f = layer.ff.apply(tape, n)?;
            h = tape.add(h, f)?;
        }
        let memory = self.norm_enc.apply(tape, h)?;

        let mut u = x;
        for layer in &self.decoder {
            let n = layer.norm_self.apply(tape, u)?;
            let a = layer.self_attn.apply(tape, n, n, n)?;
            u = tape.add(u, a)?;
            let n = layer.norm_cross.apply(tape, u)?;
            let c = layer.cross_attn.apply(tape, n, memory, vals)?;
            u = tape.add(u, c)?;
            let n = layer.norm_ff.apply(tape, u)?;
            let f = layer.ff.apply(tape, n)?;
            u = tape.add(u, f)?;
        }
        self.norm_dec.apply(tape, u)
    }
}

/// Forward pass on plain arrays, no gradients kept.
pub fn transformer_apply(
    transformer: &Transformer,
    params: &ParamStore,
    queries_keys: Array2<f64>,
    values: Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params);
    let q = tape.input(queries_keys);
    let v = tape.input(values);
    let y = transformer.apply(&mut tape, q, v)?;
    Ok(tape.value(y).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(TransformerSpec::new(1, 3, 8).validate().is_err());
        assert!(TransformerSpec::new(2, 8, 16).validate().is_ok());
    }

    #[test]
    fn zero_query_key_weights_average_values() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = Attention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        store.value_mut(attn.wq.w).fill(0.0);
        store.value_mut(attn.wk.w).fill(0.0);
        let x = random(5, 4, 2);
        let v = random(5, 4, 3);
        let mut tape = Tape::new(&store);
        let xq = tape.input(x.clone());
        let xv = tape.input(v.clone());
        let y = attn.apply(&mut tape, xq, xq, xv).unwrap();
        let out = tape.value(y).to_owned();
        // uniform weights: every row is mean(V Wv + bv) Wo + bo
        let proj = v.dot(store.value(attn.wv.w)) + store.value(attn.wv.b);
        let mean = proj.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let expected = mean.dot(store.value(attn.wo.w)) + store.value(attn.wo.b);
        for row in out.rows() {
            for (a, b) in row.iter().zip(expected.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_and_position_sensitivity() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Transformer::new(&mut store, "t", TransformerSpec::new(1, 2, 8), &mut rng).unwrap();
        let q = random(4, 8, 6);
        let v = random(4, 8, 7);
        let y = transformer_apply(&t, &store, q.clone(), v.clone()).unwrap();
        assert_eq!(y.dim(), (4, 8));

        let perm = [2usize, 0, 3, 1];
        let qp = Array2::from_shape_fn((4, 8), |(i, j)| q[[perm[i], j]]);
        let vp = Array2::from_shape_fn((4, 8), |(i, j)| v[[perm[i], j]]);
        let yp = transformer_apply(&t, &store, qp, vp).unwrap();
        let unpermuted = Array2::from_shape_fn((4, 8), |(i, j)| y[[perm[i], j]]);
        let diff = (&yp - &unpermuted).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "positional encodings had no effect");
    }

    #[test]
    fn mismatched_value_length_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Transformer::new(&mut store, "t", TransformerSpec::new(1, 2, 8), &mut rng).unwrap();
        assert!(transformer_apply(&t, &store, random(4, 8, 1), random(3, 8, 2)).is_err());
        assert!(transformer_apply(&t, &store, random(4, 6, 1), random(4, 6, 2)).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Transformer::new(&mut store, "t", TransformerSpec::new(2, 2, 8), &mut rng).unwrap();
        let a = transformer_apply(&t, &store, random(6, 8, 1), random(6, 8, 2)).unwrap();
        let b = transformer_apply(&t, &store, random(6, 8, 1), random(6, 8, 2)).unwrap();
        assert_eq!(a, b);
    }
}
