//! The Rev network.
//!
//! Prediction is the superposition `Y_lin + ΔY_non + ΔY_soc`. Each branch runs
//! embed → Transformer → kernel heads → reverberation transform → decode →
//! inverse transform, producing `K_g` hypotheses at once.
//!
//! Predictions on the tape are stacked as `(K_g·t_f, m)` with row `k·t_f + t`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{linear_fit, residual};
use crate::nn::tape::accumulate;
use crate::nn::{Activation, Dense, Mlp, MlpSpec, ParamStore, Tape, Transformer, TransformerSpec, Var};
use crate::social::{partitions, SocialEncoder};
use crate::transforms::{basis, forward_array, TransformKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Spatial dimensions per point.
    pub dims: usize,
    pub d: usize,
    pub k_g: usize,
    pub n_theta: usize,
    pub transform: TransformKind,
    pub layers: usize,
    pub heads: usize,
    pub linear: bool,
    pub non: bool,
    pub soc: bool,
    pub kernel_r: bool,
    pub kernel_g: bool,
    pub per_step_partitions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_h: 8,
            t_f: 12,
            dt: 0.4,
            dims: 2,
            d: 128,
            k_g: 20,
            n_theta: 8,
            transform: TransformKind::Haar,
            layers: 2,
            heads: 8,
            linear: true,
            non: true,
            soc: true,
            kernel_r: true,
            kernel_g: true,
            per_step_partitions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t_h < 2 {
            return bad(format!("t_h must be at least 2, got {}", self.t_h));
        }
        if self.t_f < 1 {
            return bad("t_f must be positive".into());
        }
        for (name, t) in [("t_h", self.t_h), ("t_f", self.t_f)] {
            if self.transform.spectral_len(t).is_err() {
                return bad(format!("{name} = {t} must be even for the {} transform", self.transform));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.dims != 2 {
            return bad(format!("only planar trajectories are supported, got dims = {}", self.dims));
        }
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be even and at least 2, got {}", self.d));
        }
        if self.k_g == 0 || self.n_theta == 0 {
            return bad("k_g and n_theta must be positive".into());
        }
        TransformerSpec::new(self.layers, self.heads, self.d).validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Spectral observation length.
    pub fn steps(&self) -> usize {
        self.t_h / self.transform.channels()
    }

    pub fn future_steps(&self) -> usize {
        self.t_f / self.transform.channels()
    }

    /// Spectral width.
    pub fn width(&self) -> usize {
        self.transform.spectral_dims(self.dims)
    }

    pub fn noise_dim(&self) -> usize {
        self.d / 2
    }
}

/// Named ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoKernelR,
    NoKernelG,
    NoKernels,
    NoNon,
    NoSoc,
    NoLinear,
    LinearOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoKernelR,
        Variant::NoKernelG,
        Variant::NoKernels,
        Variant::NoNon,
        Variant::NoSoc,
        Variant::NoLinear,
        Variant::LinearOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKernelR => "no-kernel-r",
            Variant::NoKernelG => "no-kernel-g",
            Variant::NoKernels => "no-kernels",
            Variant::NoNon => "no-non",
            Variant::NoSoc => "no-soc",
            Variant::NoLinear => "no-linear",
            Variant::LinearOnly => "linear-only",
        }
    }

    /// Toggles on top of `base`; every other field is kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.linear = true;
        c.non = true;
        c.soc = true;
        c.kernel_r = true;
        c.kernel_g = true;
        match self {
            Variant::Full => {}
            Variant::NoKernelR => c.kernel_r = false,
            Variant::NoKernelG => c.kernel_g = false,
            Variant::NoKernels => {
                c.kernel_r = false;
                c.kernel_g = false;
            }
            Variant::NoNon => c.non = false,
            Variant::NoSoc => c.soc = false,
            Variant::NoLinear => c.linear = false,
            Variant::LinearOnly => {
                c.non = false;
                c.soc = false;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone)]
struct Branch {
    z_proj: Dense,
    v_proj: Dense,
    transformer: Transformer,
    r_head: Option<Dense>,
    g_head: Option<Dense>,
    /// Replacement for `G` when the generating kernel is disabled: one dense
    /// head per generation over mean-pooled features.
    gen_heads: Option<Dense>,
    decoder: Dense,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, qk_width: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            z_proj: Dense::new(store, &p("z"), qk_width + cfg.noise_dim(), d, Activation::None, rng)?,
            v_proj: Dense::new(store, &p("v"), cfg.width(), d, Activation::None, rng)?,
            transformer: Transformer::new(store, &p("tf"), TransformerSpec::new(cfg.layers, cfg.heads, d), rng)?,
            r_head: match cfg.kernel_r {
                true => Some(Dense::new(store, &p("r"), d, cfg.future_steps(), Activation::Tanh, rng)?),
                false => None,
            },
            g_head: match cfg.kernel_g {
                true => Some(Dense::new(store, &p("g"), d, cfg.k_g, Activation::Tanh, rng)?),
                false => None,
            },
            gen_heads: match cfg.kernel_g {
                true => None,
                false => Some(Dense::new(store, &p("gen"), d, cfg.k_g * d, Activation::Tanh, rng)?),
            },
            decoder: Dense::new(store, &p("dec"), d, cfg.width(), Activation::None, rng)?,
        })
    }
}

/// Constant per-sample inputs, computed once and reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// `(t_h, m)`, already translated so the final point is the origin.
    pub ego: Array2<f64>,
    pub neighbors: Vec<Array2<f64>>,
    /// Partition of each neighbor per spectral step.
    pub parts: Vec<Vec<usize>>,
    pub x_spec: Array2<f64>,
    pub xlin_spec: Array2<f64>,
    pub res_spec: Array2<f64>,
    /// `(t_f, m)` linear extrapolation.
    pub y_lin: Array2<f64>,
    pub gt: Option<Array2<f64>>,
}

/// Per-forward noise, `(T, d/2)` for the non-interactive branch and
/// `(N_θ·T, d/2)` for the social branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub non: Array2<f64>,
    pub soc: Array2<f64>,
}

impl Noise {
    pub fn sample(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let t = cfg.steps();
        let z = cfg.noise_dim();
        let mut draw = |rows: usize| Array2::from_shape_simple_fn((rows, z), || rng.sample::<f64, _>(StandardNormal));
        let non = draw(t);
        let soc = draw(t * cfg.n_theta);
        Self { non, soc }
    }

    pub fn seeded(cfg: &ModelConfig, seed: u64) -> Self {
        Self::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let t = cfg.steps();
        Self { non: Array2::zeros((t, cfg.noise_dim())), soc: Array2::zeros((t * cfg.n_theta, cfg.noise_dim())) }
    }
}

/// Bounded kernels of one branch. `g` is absent when the generating kernel is
/// replaced by per-generation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels {
    pub r: Array2<f64>,
    pub g: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(K_g, t_f, m)`.
    pub values: Array3<f64>,
    pub y_lin: Array2<f64>,
    pub delta_non: Option<Array3<f64>>,
    pub delta_soc: Option<Array3<f64>>,
    pub kernels_non: Option<Kernels>,
    pub kernels_soc: Option<Kernels>,
}

struct BranchVars {
    r: Var,
    g: Option<Var>,
    delta: Var,
}

struct ForwardVars {
    pred: Var,
    non: Option<BranchVars>,
    soc: Option<BranchVars>,
}

#[derive(Debug, Clone)]
pub struct RevModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    e_alpha: Mlp,
    e_beta: Mlp,
    non: Branch,
    social: SocialEncoder,
    soc: Branch,
    /// Per channel, `kron(I_{K_g}, Q_cᵀ)`: maps stacked spectral rows back to
    /// stacked time rows.
    inverse_blocks: Vec<Array2<f64>>,
}

impl RevModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, width) = (config.d, config.width());
        let embed = MlpSpec::uniform(&[width, d, d], Activation::Tanh);
        let e_alpha = Mlp::new(&mut store, "non.alpha", &embed, &mut rng)?;
        let e_beta = Mlp::new(&mut store, "non.beta", &embed, &mut rng)?;
        let non = Branch::new(&mut store, "non", d, &config, &mut rng)?;
        let social =
            SocialEncoder::new(&mut store, "soc.enc", config.transform, config.dims, d, config.n_theta, &mut rng)?;
        let soc = Branch::new(&mut store, "soc", 2 * d, &config, &mut rng)?;

        let q = basis(config.transform, config.t_f)?;
        let (tf, steps, k) = (config.t_f, config.future_steps(), config.k_g);
        let inverse_blocks = (0..config.transform.channels())
            .map(|c| {
                let qc_t = q.slice(s![c * steps..(c + 1) * steps, ..]).t().to_owned();
                let mut big = Array2::zeros((k * tf, k * steps));
                for g in 0..k {
                    big.slice_mut(s![g * tf..(g + 1) * tf, g * steps..(g + 1) * steps]).assign(&qc_t);
                }
                big
            })
            .collect();
        Ok(Self { config, params: store, e_alpha, e_beta, non, social, soc, inverse_blocks })
    }

    pub fn social_encoder(&self) -> &SocialEncoder {
        &self.social
    }

    /// Spectral inputs for one translated sample.
    pub fn prepare(
        &self,
        ego: ArrayView2<'_, f64>,
        neighbors: &[Array2<f64>],
        gt: Option<ArrayView2<'_, f64>>,
    ) -> Result<Prepared> {
        let c = &self.config;
        let contract = |msg: String| Error::Contract { stage: "prepare", msg };
        if ego.dim() != (c.t_h, c.dims) {
            return Err(contract(format!("ego is {:?}, expected ({}, {})", ego.dim(), c.t_h, c.dims)));
        }
        if let Some(g) = gt {
            if g.dim() != (c.t_f, c.dims) {
                return Err(contract(format!("ground truth is {:?}, expected ({}, {})", g.dim(), c.t_f, c.dims)));
            }
        }
        let fit = linear_fit(ego, c.t_f)?;
        let res = residual(ego, &fit)?;
        Ok(Prepared {
            ego: ego.to_owned(),
            neighbors: neighbors.to_vec(),
            parts: partitions(ego, neighbors, c.n_theta, c.steps(), c.per_step_partitions)?,
            x_spec: forward_array(ego, c.transform)?,
            xlin_spec: forward_array(fit.fitted.view(), c.transform)?,
            res_spec: forward_array(res.view(), c.transform)?,
            y_lin: fit.predicted,
            gt: gt.map(|g| g.to_owned()),
        })
    }

    fn encode_non_tape(&self, tape: &mut Tape<'_>, prep: &Prepared) -> Result<Var> {
        let x = tape.input(prep.x_spec.clone());
        let xl = tape.input(prep.xlin_spec.clone());
        let a = self.e_alpha.apply(tape, x)?;
        let b = self.e_beta.apply(tape, xl)?;
        let diff = tape.sub(a, b)?;
        Ok(tape.scale(diff, 0.5))
    }

    /// `e_non = ½[E_α(T[X]) − E_β(T[X_lin])]`, shape `(T, d)`.
    pub fn encode_non(&self, params: &ParamStore, prep: &Prepared) -> Result<Array2<f64>> {
        let mut tape = Tape::new(params);
        let v = self.encode_non_tape(&mut tape, prep)?;
        Ok(tape.value(v).to_owned())
    }

    /// Copies `E_α` weights into `E_β` so mirrored inputs cancel exactly.
    pub fn tie_embeddings(&mut self) {
        for (a, b) in self.e_alpha.layers.iter().zip(&self.e_beta.layers) {
            for (src, dst) in [(a.w, b.w), (a.b, b.b)] {
                let v = self.params.value(src).clone();
                *self.params.value_mut(dst) = v;
            }
        }
    }

    fn run_branch(
        &self,
        tape: &mut Tape<'_>,
        b: &Branch,
        stage: &'static str,
        qk_in: Var,
        values: Var,
        noise: &Array2<f64>,
    ) -> Result<BranchVars> {
        let c = &self.config;
        let contract = |e: Error| match e {
            Error::Shape(msg) => Error::Contract { stage, msg },
            other => other,
        };
        let (len, _) = tape.shape(qk_in);
        if noise.dim() != (len, c.noise_dim()) {
            return Err(Error::Contract {
                stage,
                msg: format!("noise is {:?}, expected ({len}, {})", noise.dim(), c.noise_dim()),
            });
        }
        let z = tape.input(noise.clone());
        let cat = tape.concat_cols(&[qk_in, z]).map_err(contract)?;
        let qk = b.z_proj.apply(tape, cat).map_err(contract)?;
        let f = b.transformer.apply(tape, qk, values).map_err(contract)?;
        let sf = tape.tanh(f);

        let r = match &b.r_head {
            Some(h) => h.apply(tape, f).map_err(contract)?,
            None => tape.input(Array2::ones((len, c.future_steps()))),
        };
        // Both reverberation sums run over every input row; averaging keeps
        // the field scale independent of history length and neighbor count.
        let inv_len = 1.0 / len as f64;
        let rt = tape.transpose(r);
        let future = tape.matmul(rt, sf).map_err(contract)?;
        let future = tape.scale(future, inv_len);

        let (g, gens) = match (&b.g_head, &b.gen_heads) {
            (Some(h), _) => {
                let g = h.apply(tape, f).map_err(contract)?;
                let gt = tape.transpose(g);
                let a = tape.matmul(gt, sf).map_err(contract)?;
                let a = tape.scale(a, inv_len);
                let rows = (0..c.k_g).map(|k| tape.slice_rows(a, k, 1)).collect::<Result<Vec<_>>>()?;
                (Some(g), rows)
            }
            (None, Some(h)) => {
                let pool = tape.input(Array2::from_elem((1, len), 1.0 / len as f64));
                let pooled = tape.matmul(pool, sf).map_err(contract)?;
                let heads = h.apply(tape, pooled).map_err(contract)?;
                let rows = (0..c.k_g).map(|k| tape.slice_cols(heads, k * c.d, c.d)).collect::<Result<Vec<_>>>()?;
                (None, rows)
            }
            (None, None) => unreachable!("one generation path is always built"),
        };
        let fields =
            gens.into_iter().map(|row| tape.mul_row(future, row)).collect::<Result<Vec<_>>>().map_err(contract)?;
        let field = tape.concat_rows(&fields).map_err(contract)?;
        let decoded = b.decoder.apply(tape, field).map_err(contract)?;
        let delta = self.inverse_tape(tape, decoded).map_err(contract)?;
        Ok(BranchVars { r, g, delta })
    }

    /// Inverse transform of stacked `(K_g·T_f, M)` coefficients.
    fn inverse_tape(&self, tape: &mut Tape<'_>, decoded: Var) -> Result<Var> {
        let m = self.config.dims;
        let mut out = None;
        for (ch, block) in self.inverse_blocks.iter().enumerate() {
            let part = tape.slice_cols(decoded, ch * m, m)?;
            let q = tape.input(block.clone());
            let y = tape.matmul(q, part)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        Ok(out.expect("at least one channel"))
    }

    fn forward_tape(&self, tape: &mut Tape<'_>, prep: &Prepared, noise: &Noise) -> Result<ForwardVars> {
        let c = &self.config;
        let (k, tf) = (c.k_g, c.t_f);
        let tiled_lin = Array2::from_shape_fn((k * tf, c.dims), |(r, j)| prep.y_lin[[r % tf, j]]);
        let mut pred = tape.input(if c.linear { tiled_lin } else { Array2::zeros((k * tf, c.dims)) });
        if !c.non && !c.soc {
            return Ok(ForwardVars { pred, non: None, soc: None });
        }
        let e_non = self.encode_non_tape(tape, prep)?;
        let res = tape.input(prep.res_spec.clone());

        let non = if c.non {
            let values = self.non.v_proj.apply(tape, res)?;
            let out = self.run_branch(tape, &self.non, "non-interactive branch", e_non, values, &noise.non)?;
            pred = tape.add(pred, out.delta)?;
            Some(out)
        } else {
            None
        };
        let soc = if c.soc {
            let e_soc = self
                .social
                .represent(tape, prep.ego.view(), &prep.neighbors, &prep.parts)
                .map_err(|e| Error::Contract { stage: "social encoding", msg: e.to_string() })?;
            let tiled = tape.concat_rows(&vec![e_non; c.n_theta])?;
            let qk_in = tape.concat_cols(&[tiled, e_soc])?;
            let values = self.soc.v_proj.apply(tape, res)?;
            let values = tape.concat_rows(&vec![values; c.n_theta])?;
            let out = self.run_branch(tape, &self.soc, "social branch", qk_in, values, &noise.soc)?;
            pred = tape.add(pred, out.delta)?;
            Some(out)
        } else {
            None
        };
        Ok(ForwardVars { pred, non, soc })
    }

    fn unstack(&self, v: ArrayView2<'_, f64>) -> Array3<f64> {
        let (k, tf, m) = (self.config.k_g, self.config.t_f, self.config.dims);
        Array3::from_shape_fn((k, tf, m), |(g, t, j)| v[[g * tf + t, j]])
    }

    pub fn predict(&self, prep: &Prepared, noise: &Noise) -> Result<Prediction> {
        self.predict_with(&self.params, prep, noise)
    }

    pub fn predict_with(&self, params: &ParamStore, prep: &Prepared, noise: &Noise) -> Result<Prediction> {
        let mut tape = Tape::new(params);
        let out = self.forward_tape(&mut tape, prep, noise)?;
        let kernels = |b: &Option<BranchVars>, tape: &Tape<'_>| {
            b.as_ref().map(|b| Kernels { r: tape.value(b.r).to_owned(), g: b.g.map(|g| tape.value(g).to_owned()) })
        };
        let values = self.unstack(tape.value(out.pred));
        crate::error::ensure_finite("prediction", values.iter())
            .map_err(|e| Error::Numeric { param: "prediction".into(), msg: e.to_string() })?;
        Ok(Prediction {
            values,
            y_lin: prep.y_lin.clone(),
            delta_non: out.non.as_ref().map(|b| self.unstack(tape.value(b.delta))),
            delta_soc: out.soc.as_ref().map(|b| self.unstack(tape.value(b.delta))),
            kernels_non: kernels(&out.non, &tape),
            kernels_soc: kernels(&out.soc, &tape),
        })
    }

    fn loss_tape(&self, tape: &mut Tape<'_>, pred: Var, gt: &Array2<f64>) -> Result<Var> {
        let (k, tf) = (self.config.k_g, self.config.t_f);
        let tiled = Array2::from_shape_fn((k * tf, gt.ncols()), |(r, j)| gt[[r % tf, j]]);
        let target = tape.input(tiled);
        let diff = tape.sub(pred, target)?;
        let norms = tape.row_norms(diff);
        let ades = (0..k)
            .map(|g| {
                let rows = tape.slice_rows(norms, g * tf, tf)?;
                Ok(tape.mean(rows))
            })
            .collect::<Result<Vec<_>>>()?;
        let best = (1..k).fold(0, |b, g| if tape.scalar(ades[g]) < tape.scalar(ades[b]) { g } else { b });
        Ok(ades[best])
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_loss_and_grads(
        &self,
        params: &ParamStore,
        prep: &Prepared,
        noise: &Noise,
    ) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        let gt = prep.gt.as_ref().ok_or_else(|| Error::Data("training sample without ground truth".into()))?;
        let mut tape = Tape::new(params);
        let out = self.forward_tape(&mut tape, prep, noise)?;
        let loss = self.loss_tape(&mut tape, out.pred, gt)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), tape.param_grads(&grads)))
    }

    /// Mean loss and gradients over `batch`, accumulated in batch order.
    ///
    /// Work is split into fixed chunks that run on up to `threads` workers;
    /// chunk sums are added in chunk order, so the result does not depend on
    /// the thread count.
    pub fn batch_loss_and_grads(
        &self,
        params: &ParamStore,
        batch: &[(&Prepared, &Noise)],
        threads: usize,
    ) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        const CHUNK: usize = 4;
        let mut total = 0.0;
        let mut acc: Vec<Option<Array2<f64>>> = vec![None; params.len()];
        let chunk_sum = |chunk: &[(&Prepared, &Noise)]| -> Result<(f64, Vec<Option<Array2<f64>>>)> {
            let mut sum = 0.0;
            let mut grads: Vec<Option<Array2<f64>>> = vec![None; params.len()];
            for (prep, noise) in chunk {
                let (l, g) = self.sample_loss_and_grads(params, prep, noise)?;
                sum += l;
                accumulate(&mut grads, g);
            }
            Ok((sum, grads))
        };
        let chunks: Vec<_> = batch.chunks(CHUNK).collect();
        for wave in chunks.chunks(threads.max(1)) {
            let results: Vec<Result<ChunkSum>> = if wave.len() == 1 {
                vec![chunk_sum(wave[0])]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = wave.iter().map(|c| scope.spawn(|| chunk_sum(c))).collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            for r in results {
                let (l, g) = r?;
                total += l;
                accumulate(&mut acc, g);
            }
        }
        let n = batch.len().max(1) as f64;
        for g in acc.iter_mut().flatten() {
            g.mapv_inplace(|v| v / n);
        }
        Ok((total / n, acc))
    }
}

/// Best-of-K loss on plain arrays: `min_k mean_t ‖Ŷ_k,t − Y_t‖`, returning the
/// value and the first minimizing generation.
/// Loss sum and per-parameter gradients of one chunk of a batch.
type ChunkSum = (f64, Vec<Option<Array2<f64>>>);

pub fn best_of_k_loss(pred: &Array3<f64>, gt: ArrayView2<'_, f64>) -> Result<(f64, usize)> {
    let (k, tf, m) = pred.dim();
    if k == 0 || (tf, m) != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let ade = |g: usize| {
        (0..tf).map(|t| (0..m).map(|j| (pred[[g, t, j]] - gt[[t, j]]).powi(2)).sum::<f64>().sqrt()).sum::<f64>()
            / tf as f64
    };
    let mut best = (ade(0), 0);
    for g in 1..k {
        let v = ade(g);
        if v < best.0 {
            best = (v, g);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { t_h: 4, t_f: 6, d: 8, k_g: 4, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() }
    }

    fn line(x0: f64, y0: f64, vx: f64, vy: f64, t: usize, start: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 2), |(i, j)| {
            let i = (i + start) as f64;
            if j == 0 {
                x0 + vx * i
            } else {
                y0 + vy * i
            }
        })
    }

    fn toy(model: &RevModel) -> Prepared {
        let ego = array![[-1.5, -0.3], [-1.0, -0.1], [-0.55, 0.05], [0.0, 0.0]];
        let gt = line(0.5, 0.1, 0.5, 0.05, 6, 0);
        let nb = line(1.0, 2.0, -0.2, 0.1, 4, 0);
        model.prepare(ego.view(), &[nb], Some(gt.view())).unwrap()
    }

    #[test]
    fn default_output_shape() {
        let model = RevModel::new(ModelConfig { d: 16, heads: 2, ..ModelConfig::default() }, 1).unwrap();
        let ego = line(-3.5, 0.0, 0.5, 0.0, 8, 0);
        let prep = model.prepare(ego.view(), &[], None).unwrap();
        let p = model.predict(&prep, &Noise::seeded(&model.config, 3)).unwrap();
        assert_eq!(p.values.dim(), (20, 12, 2));
        assert_eq!(p.kernels_non.as_ref().unwrap().r.dim(), (4, 6));
        assert_eq!(p.kernels_soc.as_ref().unwrap().r.dim(), (32, 6));
        assert_eq!(p.kernels_soc.as_ref().unwrap().g.as_ref().unwrap().dim(), (32, 20));
    }

    #[test]
    fn social_kernel_shape() {
        // T_h = 4 spectral steps, N_θ = 8 -> R_soc is 32 x 6
        let cfg = ModelConfig {
            transform: TransformKind::None,
            t_h: 4,
            t_f: 6,
            d: 8,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        };
        let model = RevModel::new(cfg, 2).unwrap();
        let prep = model.prepare(line(-1.5, 0.0, 0.5, 0.0, 4, 0).view(), &[], None).unwrap();
        let p = model.predict(&prep, &Noise::seeded(&model.config, 1)).unwrap();
        assert_eq!(p.kernels_soc.unwrap().r.dim(), (32, 6));
    }

    #[test]
    fn replay_is_identical() {
        let model = RevModel::new(tiny(), 4).unwrap();
        let prep = toy(&model);
        let noise = Noise::seeded(&model.config, 9);
        assert_eq!(model.predict(&prep, &noise).unwrap(), model.predict(&prep, &noise).unwrap());
        let again = RevModel::new(tiny(), 4).unwrap();
        assert_eq!(again.params, model.params);
    }

    #[test]
    fn branches_off_gives_linear_rows() {
        let cfg = Variant::LinearOnly.apply(&tiny());
        let model = RevModel::new(cfg, 1).unwrap();
        let prep = toy(&model);
        let p = model.predict(&prep, &Noise::seeded(&model.config, 2)).unwrap();
        for k in 0..4 {
            assert_eq!(p.values.slice(s![k, .., ..]), prep.y_lin);
        }
    }

    #[test]
    fn soc_off_equals_zeroed_soc_delta() {
        let full = RevModel::new(tiny(), 6).unwrap();
        let mut no_soc = full.clone();
        no_soc.config.soc = false;
        let prep = toy(&full);
        let noise = Noise::seeded(&full.config, 5);
        let a = full.predict(&prep, &noise).unwrap();
        let b = no_soc.predict(&prep, &noise).unwrap();
        let expected = &a.values - a.delta_soc.as_ref().unwrap();
        for (x, y) in b.values.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(b.delta_non, a.delta_non);
    }

    #[test]
    fn tied_embeddings_cancel_on_linear_input() {
        let mut model = RevModel::new(tiny(), 3).unwrap();
        model.tie_embeddings();
        let ego = line(-1.5, 0.6, 0.5, -0.2, 4, 0);
        let prep = model.prepare(ego.view(), &[], None).unwrap();
        let e = model.encode_non(&model.params, &prep).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-12), "{e}");
    }

    #[test]
    fn zero_kernel_heads_zero_delta() {
        let cfg = ModelConfig { k_g: 1, soc: false, ..tiny() };
        let mut model = RevModel::new(cfg, 3).unwrap();
        for name in ["non.r.w", "non.g.w"] {
            let id = model.params.id(name).unwrap();
            model.params.value_mut(id).fill(0.0);
        }
        let prep = toy(&model);
        let p = model.predict(&prep, &Noise::seeded(&model.config, 1)).unwrap();
        let k = p.kernels_non.unwrap();
        assert!(k.r.iter().all(|&v| v == 0.0));
        assert!(p.delta_non.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manual_neighbor_leaves_non_branch() {
        let model = RevModel::new(tiny(), 8).unwrap();
        let base = toy(&model);
        let mut more = base.ego.clone();
        more.mapv_inplace(|v| v + 0.7);
        let mut nbs = base.neighbors.clone();
        nbs.push(more);
        let with = model.prepare(base.ego.view(), &nbs, base.gt.as_ref().map(|g| g.view())).unwrap();
        let noise = Noise::seeded(&model.config, 4);
        let a = model.predict(&base, &noise).unwrap();
        let b = model.predict(&with, &noise).unwrap();
        assert_eq!(a.delta_non, b.delta_non);
        assert_ne!(a.delta_soc, b.delta_soc);
    }

    #[test]
    fn equal_g_columns_equal_rows() {
        let cfg = ModelConfig { soc: false, ..tiny() };
        let mut model = RevModel::new(cfg, 2).unwrap();
        let id = model.params.id("non.g.w").unwrap();
        let w = model.params.value_mut(id);
        let col = w.column(0).to_owned();
        w.column_mut(1).assign(&col);
        let prep = toy(&model);
        let p = model.predict(&prep, &Noise::seeded(&model.config, 4)).unwrap();
        assert_eq!(p.values.slice(s![0, .., ..]), p.values.slice(s![1, .., ..]));
        assert_ne!(p.values.slice(s![0, .., ..]), p.values.slice(s![2, .., ..]));
    }

    #[test]
    fn social_params_get_no_gradient_when_soc_off() {
        let cfg = ModelConfig { soc: false, ..tiny() };
        let model = RevModel::new(cfg, 2).unwrap();
        let prep = toy(&model);
        let (_, grads) = model.sample_loss_and_grads(&model.params, &prep, &Noise::seeded(&model.config, 1)).unwrap();
        for (id, name, _) in model.params.iter() {
            if name.starts_with("soc.") {
                assert!(grads[id].is_none(), "{name}");
            }
        }
        let cfg = ModelConfig { non: false, ..tiny() };
        let model = RevModel::new(cfg, 2).unwrap();
        let (_, grads) = model.sample_loss_and_grads(&model.params, &prep, &Noise::seeded(&model.config, 1)).unwrap();
        for (id, name, _) in model.params.iter() {
            if name.starts_with("non.") && !name.starts_with("non.alpha") && !name.starts_with("non.beta") {
                assert!(grads[id].is_none(), "{name}");
            }
        }
    }

    #[test]
    fn batch_gradients_do_not_depend_on_threads() {
        let model = RevModel::new(tiny(), 2).unwrap();
        let prep = toy(&model);
        let noises: Vec<Noise> = (0..11).map(|s| Noise::seeded(&model.config, s)).collect();
        let batch: Vec<_> = noises.iter().map(|n| (&prep, n)).collect();
        let one = model.batch_loss_and_grads(&model.params, &batch, 1).unwrap();
        let four = model.batch_loss_and_grads(&model.params, &batch, 4).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn best_of_k_examples() {
        let gt = Array2::zeros((3, 2));
        let mut pred = Array3::zeros((2, 3, 2));
        pred.slice_mut(s![0, .., 0]).fill(3.0);
        pred.slice_mut(s![1, .., 1]).fill(1.0);
        assert_eq!(best_of_k_loss(&pred, gt.view()).unwrap(), (1.0, 1));
        pred.slice_mut(s![0, .., 0]).fill(0.0);
        assert_eq!(best_of_k_loss(&pred, gt.view()).unwrap(), (0.0, 0));
        let mut tie = Array3::zeros((2, 3, 2));
        tie.fill(1.0);
        assert_eq!(best_of_k_loss(&tie, gt.view()).unwrap().1, 0);
    }

    #[test]
    fn variants_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let c = Variant::NoKernels.apply(&ModelConfig::default());
        assert!(!c.kernel_r && !c.kernel_g && c.non && c.soc);
    }

    #[test]
    fn disabled_kernels_build_and_run() {
        for v in [Variant::NoKernelR, Variant::NoKernelG, Variant::NoKernels, Variant::NoNon, Variant::NoLinear] {
            let model = RevModel::new(v.apply(&tiny()), 1).unwrap();
            let prep = toy(&model);
            let p = model.predict(&prep, &Noise::seeded(&model.config, 1)).unwrap();
            assert_eq!(p.values.dim(), (4, 6, 2), "{v}");
            if v == Variant::NoKernelR {
                assert!(p.kernels_non.unwrap().r.iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn odd_length_rejected_for_haar() {
        let cfg = ModelConfig { t_h: 7, ..ModelConfig::default() };
        assert!(matches!(RevModel::new(cfg, 1), Err(Error::Config(_))));
    }
}
