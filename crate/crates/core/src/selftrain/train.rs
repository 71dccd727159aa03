use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{self_training_loss_var, supervised_loss_var, LossContext};
use super::optim::{clip_global_norm, learning_rate, AdamW, OptimizerConfig};
use super::{
    curriculum_bounds, Ablation, CurriculumRange, CurriculumState, CycleMode, GradientHistogramEmbedder, LossWeights,
    SemanticEmbedder, SemanticMode,
};
use crate::autodiff::Graph;
use crate::dataworld::{RealSample, SyntheticSample};
use crate::digest::{config_hash, derive_seed};
use crate::error::{invalid, io_err, Error, Result};
use crate::perceptual::{PerceptualBackend, RandomConvPyramid};
use crate::reconstructor::{init_params, ModelConfig, ReconstructorParams};
use crate::renderfield::RenderSettings;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub curriculum: CurriculumRange,
    pub optimizer: OptimizerConfig,
    pub j_max: usize,
    /// Total per step; half synthetic, half single-view.
    pub batch_size: usize,
    pub render_resolution: usize,
    pub samples_per_ray: usize,
    pub semantic_views: usize,
    pub cycle_mode: CycleMode,
    pub semantic_mode: SemanticMode,
    pub ablation: Option<Ablation>,
    pub perceptual_seed: u64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            curriculum: CurriculumRange::default(),
            optimizer: OptimizerConfig::default(),
            j_max: 2000,
            batch_size: 8,
            render_resolution: 64,
            samples_per_ray: 48,
            semantic_views: 4,
            cycle_mode: CycleMode::StopGradient,
            semantic_mode: SemanticMode::HardNegative,
            ablation: None,
            perceptual_seed: 0x5eed,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        CurriculumState::new(0, self.j_max.max(1), self.curriculum)?;
        if self.j_max == 0 {
            return invalid("j_max must be positive");
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return invalid(format!("batch size must be even and >= 2, got {}", self.batch_size));
        }
        if self.semantic_views == 0 {
            return invalid("semantic_views must be >= 1");
        }
        self.render_settings().validate()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings::new(self.render_resolution, self.samples_per_ray)
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NaiveSem => self.semantic_mode = SemanticMode::Naive,
            Ablation::E2eCycle => self.cycle_mode = CycleMode::EndToEnd,
            Ablation::NoCurriculum => {
                self.curriculum = CurriculumRange::fixed(self.curriculum.theta_max_deg, self.curriculum.phi_max_deg)
            }
            Ablation::NoSelftrain => {
                self.weights.lambda_in = 0.0;
                self.weights.lambda_pix = 0.0;
                self.weights.lambda_sem = 0.0;
            }
            Ablation::InputLossOnly => {
                self.weights.lambda_pix = 0.0;
                self.weights.lambda_sem = 0.0;
            }
        }
        self.ablation = Some(ablation);
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Parameters, optimizer moments and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ReconstructorParams,
    pub optimizer: AdamW,
    pub j: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.model, derive_seed(config.seed, &[0x1417]))?;
        let optimizer = AdamW::new(&params.tensors());
        Ok(TrainState { config, params, optimizer, j: 0 })
    }

    pub fn curriculum(&self) -> CurriculumState {
        CurriculumState { j: self.j.min(self.config.j_max), j_max: self.config.j_max, range: self.config.curriculum }
    }
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub j: usize,
    pub lr: f64,
    pub loss: f64,
    pub supervised: f64,
    pub input: f64,
    pub pix: f64,
    pub sem: f64,
    pub theta_max_deg: f64,
    pub phi_max_deg: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    input: f64,
    pix: f64,
    sem: f64,
}

fn gradients(
    params: &ReconstructorParams,
    body: impl FnOnce(&mut Graph, &crate::reconstructor::BoundParams) -> Result<(crate::autodiff::Var, [f64; 3])>,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let (loss, [input, pix, sem]) = body(&mut g, &bound)?;
    let mut grads = g.backward(loss);
    let tensors = params.tensors();
    let grads = bound.vars().iter().zip(&tensors).map(|(&v, t)| grads.take_or_zeros(v, t)).collect();
    Ok(SampleResult { loss: g.value(loss).item(), grads, input, pix, sem })
}

fn mean_into(acc: &mut [Tensor], results: &[SampleResult]) {
    let s = 1.0 / results.len() as f64;
    for r in results {
        for (a, g) in acc.iter_mut().zip(&r.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += s * y;
            }
        }
    }
}

fn run_all<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if parallel {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Shared, read-only loss backends for a run.
pub struct Backends {
    pub perceptual: Box<dyn PerceptualBackend>,
    pub embedder: Box<dyn SemanticEmbedder>,
}

impl Backends {
    pub fn builtin(config: &TrainConfig) -> Self {
        Backends {
            perceptual: Box::new(RandomConvPyramid::new(config.perceptual_seed)),
            embedder: Box::new(GradientHistogramEmbedder),
        }
    }
}

/// One optimizer update on a synthetic half-batch and a single-view half-batch.
///
/// Per-sample gradients are computed independently (in parallel unless
/// `single_thread`) and reduced in batch order, so both modes agree bitwise.
pub fn train_step(
    state: &mut TrainState,
    backends: &Backends,
    synth: &[&SyntheticSample],
    real: &[&RealSample],
    single_thread: bool,
) -> Result<StepMetrics> {
    let cfg = &state.config;
    if synth.is_empty() || (cfg.weights.self_training_enabled() && real.is_empty()) {
        return invalid("train_step needs a non-empty batch");
    }
    let curriculum = state.curriculum();
    let (theta, phi) = curriculum_bounds(&curriculum)?;
    let ctx = LossContext {
        config: &cfg.model,
        render: cfg.render_settings(),
        weights: cfg.weights,
        perceptual: backends.perceptual.as_ref(),
        embedder: backends.embedder.as_ref(),
        semantic_views: cfg.semantic_views,
        cycle_mode: cfg.cycle_mode,
        semantic_mode: cfg.semantic_mode,
    };
    let params = &state.params;
    let parallel = !single_thread;
    let sup = run_all(synth, parallel, |_, s| {
        gradients(params, |g, b| Ok((supervised_loss_var(g, &ctx, b, &s.input, &s.views)?, [0.0; 3])))
    })?;
    let selft = if cfg.weights.self_training_enabled() {
        let j = state.j as u64;
        run_all(real, parallel, |i, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5e1f, j, i as u64]));
            gradients(params, |g, b| {
                let (v, c) = self_training_loss_var(g, &ctx, b, &s.input, &curriculum, &mut rng)?;
                Ok((v, [c.input, c.pix, c.sem]))
            })
        })?
    } else {
        Vec::new()
    };

    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    mean_into(&mut grads, &sup);
    let mean = |rs: &[SampleResult], f: fn(&SampleResult) -> f64| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().map(f).sum::<f64>() / rs.len() as f64
        }
    };
    let supervised = mean(&sup, |r| r.loss);
    let self_loss = mean(&selft, |r| r.loss);
    if !selft.is_empty() {
        mean_into(&mut grads, &selft);
    }
    let (grad_norm, grad_norm_clipped) = clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
    let lr = learning_rate(&cfg.optimizer, state.j, cfg.j_max);
    let metrics = StepMetrics {
        j: state.j,
        lr,
        loss: supervised + self_loss,
        supervised,
        input: mean(&selft, |r| r.input),
        pix: mean(&selft, |r| r.pix),
        sem: mean(&selft, |r| r.sem),
        theta_max_deg: theta,
        phi_max_deg: phi,
        grad_norm,
        grad_norm_clipped,
    };
    let opt_cfg = cfg.optimizer;
    state.optimizer.update(state.params.tensors_mut(), &grads, lr, &opt_cfg);
    if !state.params.all_finite() {
        return Err(Error::InvalidArgument(format!("non-finite parameters after step {}", state.j)));
    }
    state.j += 1;
    Ok(metrics)
}

/// Dataset index of batch slot `slot` at step `j`: epochs walk seeded
/// permutations, so any step's batch is computable without replaying the run.
pub fn batch_index(seed: u64, stream: u64, j: usize, half: usize, slot: usize, n: usize) -> usize {
    let p = j * half + slot;
    let epoch = (p / n) as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream, epoch])));
    perm[p % n]
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub single_thread: bool,
    /// Stop after this iteration count even if `j_max` is larger.
    pub stop_at: Option<usize>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_run: usize,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";

fn prepare_log(path: &Path, keep_below: usize) -> Result<fs::File> {
    let mut kept = Vec::new();
    if keep_below > 0 && path.exists() {
        let f = fs::File::open(path).map_err(io_err(path))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(path))?;
            let row: StepMetrics = serde_json::from_str(&line)?;
            if row.j < keep_below {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for line in kept {
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(f)
}

pub fn fit(
    config: TrainConfig,
    synth: &[SyntheticSample],
    real: &[RealSample],
    opts: &FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    if synth.is_empty() {
        return invalid("synthetic training set is empty");
    }
    if config.weights.self_training_enabled() && real.is_empty() {
        return invalid("single-view training set is empty");
    }
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let mut state = match &opts.resume {
        Some(path) => {
            let s = read_checkpoint(path)?;
            if s.config != config {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} differs from run config {}",
                    s.config.hash(),
                    config.hash()
                )));
            }
            s
        }
        None => TrainState::new(config)?,
    };
    let backends = Backends::builtin(&state.config);
    let log_path = opts.out_dir.join(LOG_FILE);
    let mut log = prepare_log(&log_path, state.j)?;
    let ckpt = opts.out_dir.join(CHECKPOINT_FILE);
    let end = opts.stop_at.unwrap_or(state.config.j_max).min(state.config.j_max);
    let half = state.config.batch_size / 2;
    let seed = state.config.seed;
    let start = state.j;
    while state.j < end {
        let j = state.j;
        let sb: Vec<&SyntheticSample> =
            (0..half).map(|i| &synth[batch_index(seed, 1, j, half, i, synth.len())]).collect();
        let rb: Vec<&RealSample> = if state.config.weights.self_training_enabled() {
            (0..half).map(|i| &real[batch_index(seed, 2, j, half, i, real.len())]).collect()
        } else {
            Vec::new()
        };
        let m = train_step(&mut state, &backends, &sb, &rb, opts.single_thread)?;
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(io_err(&log_path))?;
        let every = state.config.checkpoint_every;
        if every > 0 && state.j % every == 0 && state.j < end {
            write_checkpoint(&ckpt, &state)?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    write_checkpoint(&ckpt, &state)?;
    Ok(FitOutcome { steps_run: state.j - start, state, checkpoint: ckpt, log: log_path })
}

const MAGIC: &[u8; 8] = b"SRECKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    seed: u64,
    j: usize,
    optimizer_step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Summary of a checkpoint file without its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub j: usize,
}

/// Writes `state` atomically (temporary file, then rename).
pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let names = state.params.tensor_names();
    let tensors = state.params.tensors();
    let header = Header {
        config: state.config.clone(),
        config_hash: state.config.hash(),
        seed: state.config.seed,
        j: state.j,
        optimizer_step: state.optimizer.step,
        tensors: names.into_iter().zip(tensors.iter().map(|t| t.shape().to_vec())).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 24 * state.params.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for group in [tensors, state.optimizer.m.iter().collect(), state.optimizer.v.iter().collect()] {
        for t in group {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, end))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    Ok(bytes)
}

pub fn checkpoint_info(path: &Path) -> Result<Checkpoint> {
    let (h, _) = read_header(&read_all(path)?)?;
    Ok(Checkpoint { config_hash: h.config_hash, seed: h.seed, j: h.j })
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = read_all(path)?;
    let (h, mut off) = read_header(&bytes)?;
    if h.config.hash() != h.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let mut state = TrainState::new(h.config)?;
    let expected: Vec<(String, Vec<usize>)> = state
        .params
        .tensor_names()
        .into_iter()
        .zip(state.params.tensors().iter().map(|t| t.shape().to_vec()))
        .collect();
    if expected != h.tensors {
        return Err(Error::Checkpoint("tensor layout does not match the model config".into()));
    }
    let total: usize = state.params.parameter_count();
    if bytes.len() != off + 3 * total * 8 {
        return Err(Error::Checkpoint(format!("payload is {} bytes, expected {}", bytes.len() - off, 3 * total * 8)));
    }
    let mut fill = |t: &mut Tensor| {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    };
    state.params.tensors_mut().into_iter().for_each(&mut fill);
    state.optimizer.m.iter_mut().for_each(&mut fill);
    state.optimizer.v.iter_mut().for_each(&mut fill);
    state.optimizer.step = h.optimizer_step;
    state.j = h.j;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_indices_cover_each_epoch() {
        let n = 7;
        let half = 3;
        let mut seen = Vec::new();
        for j in 0..7 {
            for s in 0..half {
                seen.push(batch_index(5, 1, j, half, s, n));
            }
        }
        for epoch in seen.chunks(n).take(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ablation_flags() {
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::NoSelftrain);
        assert_eq!((c.weights.lambda_in, c.weights.lambda_pix, c.weights.lambda_sem), (0.0, 0.0, 0.0));
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::InputLossOnly);
        assert_eq!((c.weights.lambda_in, c.weights.lambda_pix, c.weights.lambda_sem), (0.3, 0.0, 0.0));
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::NoCurriculum);
        let s = CurriculumState { j: 0, j_max: 10, range: c.curriculum };
        assert_eq!(curriculum_bounds(&s).unwrap(), (90.0, 90.0));
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::E2eCycle);
        assert_eq!(c.cycle_mode, CycleMode::EndToEnd);
        c.apply_ablation(Ablation::NaiveSem);
        assert_eq!(c.semantic_mode, SemanticMode::Naive);
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.batch_size = 3;
        assert!(c.validate().is_err());
    }
}
