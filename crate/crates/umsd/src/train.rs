//! Optimizer, training loop, and checkpointing.
//!
//! Each step samples a batch of clip pairs (half fully random, a quarter
//! sharing the style label, a quarter pairing a clip with itself), builds
//! one loss graph per item, and averages the per-item gradients in slot
//! order before a single AdamW update. Items get their own tapes and
//! generators, so batch members can run in parallel without changing any
//! result: every random draw is derived from (seed, step, slot), never from
//! shared mutable state. Resuming from a checkpoint therefore reproduces an
//! uninterrupted run bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{item_loss_graph, LossReport, LossWeights, TrainPair};
use crate::motion::MotionClip;
use crate::nn::{model_layout, ModelParams};
use crate::par;
use crate::synth::mix64;
use crate::tape::Tape;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Desk-scale default. Full-scale runs use 1e-6.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
            seed: 0,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch size, and cadence must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {}", self.epsilon)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// AdamW moment accumulators; shapes mirror the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(total: usize) -> OptimizerState {
        OptimizerState {
            m: vec![0.0; total],
            v: vec![0.0; total],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[f64],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    adamw_update(&mut params.flat, grads, state, config)
}

/// AdamW over a bare parameter buffer; decay is decoupled from the moment
/// update. Also used by the metrics feature extractor.
pub fn adamw_update(
    flat: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let n = flat.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Dimension(format!(
            "gradient/state length {} vs {} parameters",
            grads.len(),
            n
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    for i in 0..n {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        flat[i] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * flat[i]);
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: String,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Mean reconstruction RMSE of same-pair transfer on validation clips,
    /// filled in after training.
    pub validation_rmse: Option<f64>,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} (expected {CHECKPOINT_VERSION})",
            checkpoint.version
        )));
    }
    let p = &checkpoint.params;
    if p.layout != model_layout(&p.config) {
        return Err(Error::Checkpoint("layout does not match its config".into()));
    }
    if p.flat.len() != p.layout.total() {
        return Err(Error::Checkpoint(format!(
            "{} values for a layout of {}",
            p.flat.len(),
            p.layout.total()
        )));
    }
    if p.flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    let o = &checkpoint.optimizer;
    if o.m.len() != p.flat.len() || o.v.len() != p.flat.len() {
        return Err(Error::Checkpoint("optimizer state length mismatch".into()));
    }
    Ok(checkpoint)
}

// Indices of clips grouped by style label, in dataset order.
fn style_groups(clips: &[MotionClip]) -> Vec<Vec<usize>> {
    let mut labels: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        match labels.iter().position(|l| *l == clip.style_label) {
            Some(g) => groups[g].push(i),
            None => {
                labels.push(&clip.style_label);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

// Pair sampling: modes 0-1 random, 2 same style label, 3 same clip.
fn sample_pair<R: Rng>(clips: &[MotionClip], groups: &[Vec<usize>], rng: &mut R) -> (usize, usize) {
    let c = rng.random_range(0..clips.len());
    match rng.random_range(0..4u8) {
        0 | 1 => (c, rng.random_range(0..clips.len())),
        2 => {
            let group = groups
                .iter()
                .find(|g| g.contains(&c))
                .expect("every clip belongs to a style group");
            (c, group[rng.random_range(0..group.len())])
        }
        _ => (c, c),
    }
}

/// Live training state; construct fresh from initial parameters or resume
/// from a checkpoint, then call [`run`](TrainState::run).
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> TrainState {
        let total = params.total();
        TrainState {
            params,
            optimizer: OptimizerState::new(total),
            step: 0,
        }
    }

    pub fn resume(checkpoint: Checkpoint) -> TrainState {
        TrainState {
            params: checkpoint.params,
            optimizer: checkpoint.optimizer,
            step: checkpoint.step,
        }
    }

    fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config_hash: config_hash.to_string(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            validation_rmse: None,
        }
    }

    /// Runs `config.steps` additional steps, appending one CSV row per step
    /// to `out_dir/train_log.csv` and writing `out_dir/checkpoint.json`
    /// every `eval_every` steps and at the end. Returns the final
    /// checkpoint.
    pub fn run(
        &mut self,
        dataset: &[MotionClip],
        config: &TrainConfig,
        weights: &LossWeights,
        schedule: &NoiseSchedule,
        out_dir: &Path,
        config_hash: &str,
    ) -> Result<Checkpoint> {
        config.validate()?;
        weights.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join("train_log.csv");
        let fresh = !log_path.exists();
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if fresh {
            writeln!(log, "step,dcc,dsc,pos,vel,foot,total,wall_ms")?;
        }
        let checkpoint_path = out_dir.join("checkpoint.json");
        let groups = style_groups(dataset);

        let end = self.step + config.steps as u64;
        while self.step < end {
            let started = Instant::now();
            let step_seed = mix64(config.seed ^ mix64(self.step));
            let mut step_rng = ChaCha8Rng::seed_from_u64(step_seed);

            // Draw pairings and per-item seeds up front so the parallel
            // section never touches the shared generator.
            let mut items = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let pair = sample_pair(dataset, &groups, &mut step_rng);
                items.push((pair, step_rng.random::<u64>()));
            }

            let total = self.params.total();
            let results = par::try_run_indexed(config.batch_size, |slot| {
                let ((c, s), item_seed) = items[slot];
                let pair = TrainPair {
                    content: &dataset[c],
                    style: &dataset[s],
                };
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
                let mut tape = Tape::new();
                let (loss, report) =
                    item_loss_graph(&mut tape, &self.params, &pair, weights, schedule, &mut rng)?;
                let grads = tape.backward(loss).param_flat(&tape, total);
                Ok::<_, Error>((report, grads))
            })?;

            let scale = 1.0 / config.batch_size as f64;
            let mut grads = vec![0.0; total];
            let mut report = LossReport::default();
            for (item_report, item_grads) in &results {
                if !item_report.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at step {}: {item_report:?}",
                        self.step
                    )));
                }
                for (acc, g) in grads.iter_mut().zip(item_grads) {
                    *acc += g * scale;
                }
                report.accumulate_scaled(item_report, scale);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradients at step {}", self.step)));
            }

            adamw_step(&mut self.params, &grads, &mut self.optimizer, config)?;
            self.step += 1;

            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            writeln!(
                log,
                "{},{},{},{},{},{},{},{:.3}",
                self.step,
                report.dcc,
                report.dsc,
                report.pos,
                report.vel,
                report.foot,
                report.total,
                wall_ms
            )?;

            if self.step % config.eval_every as u64 == 0 || self.step == end {
                save_checkpoint(&checkpoint_path, &self.checkpoint(config_hash))?;
            }
        }
        Ok(self.checkpoint(config_hash))
    }
}

impl LossReport {
    fn accumulate_scaled(&mut self, o: &LossReport, k: f64) {
        self.dcc += o.dcc * k;
        self.dsc += o.dsc * k;
        self.pos += o.pos * k;
        self.vel += o.vel * k;
        self.foot += o.foot * k;
        self.total += o.total * k;
    }
}
