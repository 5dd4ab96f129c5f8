//! Training, evaluation and dataset assembly shared by the CLI, the FFI and
//! the acceptance suite.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{
    load_scene, load_split_manifest, make_windows, preprocess, synth_latency_scenes, Sample, Scene, SynthLabel,
};
use crate::error::{Error, Result};
use crate::linear::linear_fit;
use crate::metrics::{mean_std, min_ade_fde, per_row, stat_ade_fde};
use crate::model::{Noise, Prepared, RevModel};
use crate::nn::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP};
use crate::nn::{Adam, Checkpoint};

/// Train and test windows, plus labels when the data is synthetic.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub labels: Vec<SynthLabel>,
}

fn windows(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(make_windows(s, cfg.model.t_h, cfg.model.t_f, cfg.data.stride)?);
    }
    Ok(out)
}

fn load_all(paths: &[std::path::PathBuf], dt: f64) -> Result<Vec<Scene>> {
    paths.iter().map(|p| load_scene(p, dt)).collect()
}

/// Builds the dataset described by `cfg.data`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(spec) = &cfg.data.synth {
        let (scenes, labels) = synth_latency_scenes(spec)?;
        let cut = scenes.len() - cfg.data.synth_test_scenes;
        return Ok(Dataset { train: windows(&scenes[..cut], cfg)?, test: windows(&scenes[cut..], cfg)?, labels });
    }
    let mut train = cfg.data.train.clone();
    let mut test = cfg.data.test.clone();
    if let Some(m) = &cfg.data.split_manifest {
        let split = load_split_manifest(m)?;
        train.extend(split.train);
        test.extend(split.test);
    }
    Ok(Dataset {
        train: windows(&load_all(&train, cfg.model.dt)?, cfg)?,
        test: windows(&load_all(&test, cfg.model.dt)?, cfg)?,
        labels: Vec::new(),
    })
}

/// Preprocesses and converts samples to model inputs.
pub fn prepare_all(model: &RevModel, samples: &[Sample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let p = preprocess(s);
            model.prepare(p.ego.view(), &p.neighbors, Some(p.gt.view()))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: RevModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: RevModel, cfg: &TrainConfig, seed: u64) -> Self {
        let adam = Adam::new(cfg.adam(), &model.params);
        Self { model, adam, epoch: 0, seed }
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.model.params, Some(&self.adam));
        ck.meta.insert("config_hash".into(), config_hash.to_string());
        ck.meta.insert("seed".into(), self.seed.to_string());
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck
    }

    /// Restores parameters, optimizer state and the epoch counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(&mut self.model.params, Some(&mut self.adam))?;
        if let Some(e) = ck.meta.get("epoch") {
            self.epoch = e.parse().map_err(|_| Error::Checkpoint(format!("bad epoch `{e}`")))?;
        }
        Ok(())
    }

    /// One pass over `data` in a seeded shuffled order; returns the mean
    /// sample loss. Each epoch's shuffle and noise come from a stream keyed
    /// by `(seed, epoch)`, so resumed runs replay the same draws.
    pub fn train_epoch(&mut self, data: &[Prepared], cfg: &TrainConfig) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientData("no training samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let threads = cfg.worker_threads();
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let noises: Vec<Noise> = batch.iter().map(|_| Noise::sample(&self.model.config, &mut rng)).collect();
            let items: Vec<(&Prepared, &Noise)> = batch.iter().zip(&noises).map(|(&i, n)| (&data[i], n)).collect();
            let (loss, grads) = self.model.batch_loss_and_grads(&self.model.params, &items, threads)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    param: "loss".into(),
                    msg: format!("epoch {} loss is {loss}", self.epoch + 1),
                });
            }
            self.adam.step(&mut self.model.params, &grads)?;
            total += loss * batch.len() as f64;
        }
        self.model.params.check_finite()?;
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }
}

/// Trains a fresh model for `cfg.train.epochs` epochs and returns it with
/// the per-epoch losses.
pub fn train_model(cfg: &RunConfig, samples: &[Sample], seed: u64) -> Result<(RevModel, Vec<f64>)> {
    let model = RevModel::new(cfg.model.clone(), seed)?;
    let data = prepare_all(&model, samples)?;
    let mut state = TrainState::new(model, &cfg.train, seed);
    let mut losses = Vec::with_capacity(cfg.train.epochs);
    while state.epoch < cfg.train.epochs {
        losses.push(state.train_epoch(&data, &cfg.train)?);
    }
    Ok((state.model, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub samples: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mean_ade: f64,
    pub std_ade: f64,
    pub mean_fde: f64,
    pub std_fde: f64,
    pub linear_ade: f64,
    pub linear_fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub k: usize,
    pub sampled: bool,
    pub overall: SceneMetrics,
    pub scenes: Vec<SceneMetrics>,
}

/// Per-sample scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub min_ade: f64,
    pub min_fde: f64,
    pub mean_ade: f64,
    pub std_ade: f64,
    pub mean_fde: f64,
    pub std_fde: f64,
    pub linear_ade: f64,
    pub linear_fde: f64,
}

fn aggregate(scene: &str, scores: &[SampleScore]) -> SceneMetrics {
    let avg = |f: fn(&SampleScore) -> f64| mean_std(scores.iter().map(f)).0;
    SceneMetrics {
        scene: scene.to_string(),
        samples: scores.len(),
        min_ade: avg(|s| s.min_ade),
        min_fde: avg(|s| s.min_fde),
        mean_ade: avg(|s| s.mean_ade),
        std_ade: avg(|s| s.std_ade),
        mean_fde: avg(|s| s.mean_fde),
        std_fde: avg(|s| s.std_fde),
        linear_ade: avg(|s| s.linear_ade),
        linear_fde: avg(|s| s.linear_fde),
    }
}

/// Scores `preds` `(K, t_f, m)` against `gt`, with the linear baseline of
/// `ego`.
pub fn score(preds: &Array3<f64>, gt: &Array2<f64>, ego: &Array2<f64>) -> Result<SampleScore> {
    let (min_ade, min_fde) = min_ade_fde(preds, gt.view())?;
    let stat = stat_ade_fde(preds, gt.view())?;
    let lin = linear_fit(ego.view(), gt.nrows())?.predicted;
    let lin3 = lin.insert_axis(ndarray::Axis(0));
    let (la, lf) = per_row(&lin3, gt.view())?[0];
    Ok(SampleScore {
        min_ade,
        min_fde,
        mean_ade: stat.mean_ade,
        std_ade: stat.std_ade,
        mean_fde: stat.mean_fde,
        std_fde: stat.std_fde,
        linear_ade: la,
        linear_fde: lf,
    })
}

/// Predictions for every sample, in order, each `(K_g, t_f, m)` in the
/// translated frame. Noise comes from one stream seeded by `seed`.
pub fn predict_all(model: &RevModel, prepared: &[Prepared], seed: u64, threads: usize) -> Result<Vec<Array3<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A1);
    let noises: Vec<Noise> = prepared.iter().map(|_| Noise::sample(&model.config, &mut rng)).collect();
    let run = |range: std::ops::Range<usize>| -> Result<Vec<Array3<f64>>> {
        range.map(|i| model.predict(&prepared[i], &noises[i]).map(|p| p.values)).collect()
    };
    let threads = threads.max(1);
    if threads == 1 || prepared.len() < 2 {
        return run(0..prepared.len());
    }
    let per = prepared.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Array3<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..prepared.len())
            .step_by(per)
            .map(|start| {
                let run = &run;
                scope.spawn(move || run(start..(start + per).min(prepared.len())))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(prepared.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Picks `k` generations: the first `k`, or `k` draws with replacement.
pub fn select_generations(pred: &Array3<f64>, k: usize, sample: Option<&mut ChaCha8Rng>) -> Array3<f64> {
    match sample {
        None => pred.slice(s![..k.min(pred.dim().0), .., ..]).to_owned(),
        Some(rng) => {
            let n = pred.dim().0;
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            pred.select(ndarray::Axis(0), &idx)
        }
    }
}

/// Scores `model` on `samples` with `k` hypotheses.
pub fn evaluate(
    model: &RevModel,
    samples: &[Sample],
    cfg: &RunConfig,
    k: usize,
    sample: bool,
    threads: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no evaluation samples".into()));
    }
    let prepared = prepare_all(model, samples)?;
    let preds = predict_all(model, &prepared, cfg.seed, threads)?;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pick_rng.set_stream(0x5E1);
    let mut by_scene: BTreeMap<&str, Vec<SampleScore>> = BTreeMap::new();
    let mut all = Vec::with_capacity(samples.len());
    for ((s, prep), pred) in samples.iter().zip(&prepared).zip(&preds) {
        let chosen = select_generations(pred, k, sample.then_some(&mut pick_rng));
        let gt = prep.gt.as_ref().expect("prepared with ground truth");
        let sc = score(&chosen, gt, &prep.ego)?;
        by_scene.entry(&s.scene).or_default().push(sc);
        all.push(sc);
    }
    Ok(EvalReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        k,
        sampled: sample,
        overall: aggregate("all", &all),
        scenes: by_scene.iter().map(|(name, v)| aggregate(name, v)).collect(),
    })
}

/// Finite-difference check of the full training loss on a two-agent toy
/// scene. `per_param` limits probes per tensor.
pub fn gradcheck_model(
    cfg: &crate::model::ModelConfig,
    seed: u64,
    per_param: Option<usize>,
) -> Result<GradCheckReport> {
    let model = RevModel::new(cfg.clone(), seed)?;
    let (t_h, t_f) = (cfg.t_h, cfg.t_f);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9C);
    let mut walk = |len: usize, start: [f64; 2], v: [f64; 2]| {
        Array2::from_shape_fn((len, 2), |(t, j)| start[j] + v[j] * t as f64 + rng.random_range(-0.05..0.05))
    };
    let ego_full = walk(t_h + t_f, [-(t_h as f64) * 0.4, 0.0], [0.4, 0.1]);
    let nb = walk(t_h, [1.0, 2.0], [-0.2, 0.15]);
    let sample = Sample {
        scene: "toy".into(),
        agent: 0,
        frame: 0,
        ego: ego_full.slice(s![..t_h, ..]).to_owned(),
        neighbors: vec![nb],
        gt: ego_full.slice(s![t_h.., ..]).to_owned(),
        origin: [0.0, 0.0],
    };
    let prep = prepare_all(&model, &[sample])?.remove(0);
    let noise = Noise::seeded(&model.config, seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed);
    check_params(
        &model.params,
        |p| model.sample_loss_and_grads(p, &prep, &noise),
        DEFAULT_STEP,
        per_param,
        &mut probe_rng,
    )
}

/// Reads a checkpoint stem, rejecting shapes that differ from `model`.
pub fn load_checkpoint_into(model: &mut RevModel, stem: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(stem)?;
    ck.restore(&mut model.params, None)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthLatencySpec;
    use crate::model::{ModelConfig, Variant};

    fn small() -> RunConfig {
        let mut c = RunConfig {
            model: ModelConfig { d: 8, k_g: 3, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() },
            ..RunConfig::default()
        };
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c.train.lr = 1e-3;
        c.data.synth = Some(SynthLatencySpec { scenes: 7, ..SynthLatencySpec::default() });
        c.data.synth_test_scenes = 2;
        c
    }

    #[test]
    fn smoke_training_is_finite_and_replayable() {
        let cfg = small();
        let data = load_dataset(&cfg).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (10, 4));
        let (m1, l1) = train_model(&cfg, &data.train, 3).unwrap();
        let (m2, l2) = train_model(&cfg, &data.train, 3).unwrap();
        assert!(l1.iter().all(|l| l.is_finite()));
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn resume_continues_epochs() {
        let cfg = small();
        let data = load_dataset(&cfg).unwrap();
        let model = RevModel::new(cfg.model.clone(), 1).unwrap();
        let prepared = prepare_all(&model, &data.train).unwrap();
        let mut st = TrainState::new(model.clone(), &cfg.train, 1);
        st.train_epoch(&prepared, &cfg.train).unwrap();
        let ck = st.checkpoint("h");
        let mut resumed = TrainState::new(model, &cfg.train, 1);
        resumed.restore(&ck).unwrap();
        assert_eq!(resumed.epoch, 1);
        assert_eq!(resumed.adam.step, st.adam.step);
    }

    #[test]
    fn linear_only_matches_linear_baseline() {
        let mut cfg = small();
        cfg.model = Variant::LinearOnly.apply(&cfg.model);
        let data = load_dataset(&cfg).unwrap();
        let model = RevModel::new(cfg.model.clone(), 1).unwrap();
        let r = evaluate(&model, &data.test, &cfg, 3, false, 1).unwrap();
        assert_eq!(r.overall.min_ade, r.overall.linear_ade);
        assert_eq!(r.overall.min_fde, r.overall.linear_fde);
        assert_eq!(r.overall.std_ade, 0.0);
    }

    #[test]
    fn fewer_hypotheses_never_score_better() {
        let cfg = small();
        let data = load_dataset(&cfg).unwrap();
        let model = RevModel::new(cfg.model.clone(), 2).unwrap();
        let r3 = evaluate(&model, &data.test, &cfg, 3, false, 2).unwrap();
        let r1 = evaluate(&model, &data.test, &cfg, 1, false, 1).unwrap();
        assert!(r1.overall.min_ade >= r3.overall.min_ade);
    }

    #[test]
    fn tiny_gradcheck_passes() {
        let cfg =
            ModelConfig { t_h: 4, t_f: 6, d: 8, k_g: 4, n_theta: 4, layers: 1, heads: 2, ..ModelConfig::default() };
        let r = gradcheck_model(&cfg, 1, Some(3)).unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }
}
