//! Optimization loop: Xavier init, Adam, the decay-on-new-minimum learning
//! rate schedule, early stopping, and bit-exact checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    backward_example, build_mask, combine_losses, rating_loss, run_example, BatchWeights,
    LossBreakdown, Mat, ModelConfig, ModelError, ModelParams, RatingSlot, TensorKind,
};

const CKPT_MAGIC: &[u8; 8] = b"ERRACKP1";
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no training examples")]
    EmptyData,
    #[error("non-finite loss at epoch {epoch}, step {step}: l_r={l_r} l_c={l_c} l_g={l_g} l_a={l_a}")]
    NonFinite {
        epoch: usize,
        step: usize,
        l_r: f64,
        l_c: f64,
        l_g: f64,
        l_a: f64,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains; deterministic
/// per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, kind, m) in params.tensors_mut() {
        match kind {
            TensorKind::Weight => {
                let bound = (6.0 / (m.rows + m.cols) as f64).sqrt();
                for x in m.data.iter_mut() {
                    *x = rng.random_range(-bound..bound);
                }
            }
            TensorKind::Bias => {}
            TensorKind::Gain => {
                for x in m.data.iter_mut() {
                    *x = 1.0;
                }
            }
            TensorKind::Identity => {
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        *m.at_mut(r, c) = if r == c { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    params
}

/// Adam moments; the step counter drives bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> AdamState {
        AdamState {
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let g_list = grads.tensors();
    let mut m_list = state.m.tensors_mut();
    let mut v_list = state.v.tensors_mut();
    for (ti, (_, _, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = &g_list[ti].2;
        let m = &mut m_list[ti].2;
        let v = &mut v_list[ti].2;
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Loss breakdowns for each optimizer step plus their example-weighted mean.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub steps: Vec<LossBreakdown>,
    pub mean: LossBreakdown,
}

fn mean_breakdown(steps: &[(usize, LossBreakdown)]) -> LossBreakdown {
    let total_n: usize = steps.iter().map(|(n, _)| n).sum();
    let w = |f: fn(&LossBreakdown) -> f64| -> f64 {
        steps
            .iter()
            .map(|(n, b)| *n as f64 * f(b))
            .sum::<f64>()
            / total_n as f64
    };
    let l_r = w(|b| b.l_r);
    let l_c = w(|b| b.l_c);
    let l_g = w(|b| b.l_g);
    let l_a = w(|b| b.l_a);
    let reg = w(|b| b.reg);
    let total = w(|b| b.total);
    LossBreakdown {
        l_r,
        l_c,
        l_g,
        l_a,
        reg,
        total,
    }
}

/// Forward + backward over one batch, then one Adam update. Returns the
/// batch's loss breakdown (evaluated at the pre-update parameters).
fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    examples: &[crate::model::InputSequence],
    batch: &[usize],
    cfg: &ModelConfig,
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, TrainError> {
    let mut grads = ModelParams::zeros(cfg);
    let inv_batch = 1.0 / batch.len() as f64;
    let mut preds = Vec::with_capacity(batch.len());
    let mut truths = Vec::with_capacity(batch.len());
    let (mut l_c, mut l_g, mut l_a) = (0.0, 0.0, 0.0);
    for &i in batch {
        let seq = &examples[i];
        let mask = build_mask(seq.seq_len())?;
        let dropout = if cfg.dropout > 0.0 {
            Some(&mut *dropout_rng)
        } else {
            None
        };
        let run = run_example(seq, &mask, params, cfg, dropout)?;
        preds.push(run.rating.prediction);
        truths.push(seq.rating);
        l_c += run.l_c;
        l_g += run.l_g;
        l_a += run.l_a;
        backward_example(seq, &run, params, cfg, BatchWeights { inv_batch }, &mut grads);
    }
    grads.add_scaled(params, 2.0 * cfg.lambda_l);
    let b = batch.len() as f64;
    let l_r = rating_loss(&preds, &truths)?;
    let breakdown = combine_losses(l_r, l_c / b, l_g / b, l_a / b, params.sq_norm(), cfg);
    adam_step(params, &grads, adam, lr);
    Ok(breakdown)
}

/// One pass over the shuffled training set. Deterministic per `epoch_seed`.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    examples: &[crate::model::InputSequence],
    cfg: &ModelConfig,
    lr: f64,
    epoch_seed: u64,
    batch_size: usize,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut steps = Vec::new();
    for (step, batch) in order.chunks(batch_size.max(1)).enumerate() {
        let breakdown = train_step(params, adam, examples, batch, cfg, lr, &mut dropout_rng)?;
        if !breakdown.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step,
                l_r: breakdown.l_r,
                l_c: breakdown.l_c,
                l_g: breakdown.l_g,
                l_a: breakdown.l_a,
            });
        }
        steps.push((batch.len(), breakdown));
    }
    let mean = mean_breakdown(&steps);
    Ok(EpochStats {
        steps: steps.into_iter().map(|(_, b)| b).collect(),
        mean,
    })
}

/// Forward-only mean loss over a dataset (dropout off).
pub fn evaluate_loss(
    params: &ModelParams,
    examples: &[crate::model::InputSequence],
    cfg: &ModelConfig,
) -> Result<LossBreakdown, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut truths = Vec::with_capacity(examples.len());
    let (mut l_c, mut l_g, mut l_a) = (0.0, 0.0, 0.0);
    for seq in examples {
        let mask = build_mask(seq.seq_len())?;
        let run = run_example(seq, &mask, params, cfg, None)?;
        preds.push(run.rating.prediction);
        truths.push(seq.rating);
        l_c += run.l_c;
        l_g += run.l_g;
        l_a += run.l_a;
    }
    let n = examples.len() as f64;
    let l_r = rating_loss(&preds, &truths)?;
    Ok(combine_losses(
        l_r,
        l_c / n,
        l_g / n,
        l_a / n,
        params.sq_norm(),
        cfg,
    ))
}

/// Learning-rate and early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub since_improve: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(lr: f64, seed: u64) -> TrainState {
        TrainState {
            epoch: 0,
            best_val: None,
            since_improve: 0,
            lr,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    pub decay_factor: f64,
    pub lr_floor: f64,
    /// Opt-in conventional mode: decay after two stagnant epochs instead of
    /// on each new minimum.
    pub decay_on_stagnation: bool,
}

impl Default for ScheduleOptions {
    fn default() -> ScheduleOptions {
        ScheduleOptions {
            decay_factor: 0.25,
            lr_floor: 1e-6,
            decay_on_stagnation: false,
        }
    }
}

/// Fold one epoch's validation loss into the state. The first epoch only
/// sets the baseline; afterwards a new minimum multiplies the rate by the
/// decay factor (default mode) and any non-improving epoch counts toward
/// early stopping. Equal loss counts as non-improvement.
pub fn lr_schedule(state: &mut TrainState, val_loss: f64, opts: &ScheduleOptions) {
    match state.best_val {
        None => {
            state.best_val = Some(val_loss);
            state.since_improve = 0;
        }
        Some(best) if val_loss < best => {
            state.best_val = Some(val_loss);
            state.since_improve = 0;
            if !opts.decay_on_stagnation {
                state.lr = (state.lr * opts.decay_factor).max(opts.lr_floor);
            }
        }
        Some(_) => {
            state.since_improve += 1;
            if opts.decay_on_stagnation && state.since_improve.is_multiple_of(2) {
                state.lr = (state.lr * opts.decay_factor).max(opts.lr_floor);
            }
        }
    }
}

/// True once validation loss has not decreased for `patience` consecutive
/// epochs.
pub fn should_stop(state: &TrainState, patience: usize) -> bool {
    state.since_improve >= patience
}

/// Everything needed to resume a run exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub state: TrainState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensors(&mut self, p: &ModelParams) {
        let list = p.tensors();
        self.buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for (name, _, m) in list {
            self.str(&name);
            self.u64(m.rows as u64);
            self.u64(m.cols as u64);
            for &x in &m.data {
                self.f64(x);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| TrainError::Corrupt("bad tensor name".into()))
    }
    fn tensors(&mut self, template: &mut ModelParams) -> Result<(), TrainError> {
        let count = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let mut list = template.tensors_mut();
        if count != list.len() {
            return Err(TrainError::Corrupt(format!(
                "expected {} tensors, found {count}",
                list.len()
            )));
        }
        for (name, _, m) in list.iter_mut() {
            let got = self.str()?;
            if &got != name {
                return Err(TrainError::Corrupt(format!(
                    "tensor order mismatch: {got} vs {name}"
                )));
            }
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            if rows != m.rows || cols != m.cols {
                return Err(TrainError::Corrupt(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                    m.rows, m.cols
                )));
            }
            for x in m.data.iter_mut() {
                *x = self.f64()?;
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let cfg = &ckpt.config;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CKPT_MAGIC);
    for v in [
        cfg.d,
        cfg.heads,
        cfg.layers,
        cfg.vocab_size,
        cfg.n_users,
        cfg.n_items,
        cfg.max_len,
        cfg.ffn_dim,
    ] {
        w.u64(v as u64);
    }
    for v in [cfg.dropout, cfg.pl, cfg.lambda_c, cfg.gl, cfg.al, cfg.lambda_l] {
        w.f64(v);
    }
    let flags = (cfg.use_retrieval as u8)
        | ((cfg.use_aspects as u8) << 1)
        | ((cfg.scale_full_d as u8) << 2)
        | (((cfg.rating_slot == RatingSlot::User) as u8) << 3);
    w.u8(flags);
    w.u64(ckpt.state.epoch as u64);
    w.u8(ckpt.state.best_val.is_some() as u8);
    w.f64(ckpt.state.best_val.unwrap_or(0.0));
    w.u64(ckpt.state.since_improve as u64);
    w.f64(ckpt.state.lr);
    w.u64(ckpt.state.seed);
    w.u64(ckpt.adam.step);
    w.tensors(&ckpt.params);
    w.tensors(&ckpt.adam.m);
    w.tensors(&ckpt.adam.v);
    fs::write(path, w.buf).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, TrainError> {
    let buf = fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if buf.len() < 8 || &buf[..8] != CKPT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let mut r = Reader { buf: &buf, pos: 8 };
    let d = r.u64()? as usize;
    let heads = r.u64()? as usize;
    let layers = r.u64()? as usize;
    let vocab_size = r.u64()? as usize;
    let n_users = r.u64()? as usize;
    let n_items = r.u64()? as usize;
    let max_len = r.u64()? as usize;
    let ffn_dim = r.u64()? as usize;
    let dropout = r.f64()?;
    let pl = r.f64()?;
    let lambda_c = r.f64()?;
    let gl = r.f64()?;
    let al = r.f64()?;
    let lambda_l = r.f64()?;
    let flags = r.u8()?;
    let config = ModelConfig {
        d,
        heads,
        layers,
        vocab_size,
        n_users,
        n_items,
        max_len,
        ffn_dim,
        dropout,
        pl,
        lambda_c,
        gl,
        al,
        lambda_l,
        use_retrieval: flags & 1 != 0,
        use_aspects: flags & 2 != 0,
        scale_full_d: flags & 4 != 0,
        rating_slot: if flags & 8 != 0 {
            RatingSlot::User
        } else {
            RatingSlot::Item
        },
    };
    if let Some(exp) = expected {
        for (what, a, b) in [
            ("d", exp.d, config.d),
            ("heads", exp.heads, config.heads),
            ("layers", exp.layers, config.layers),
            ("vocab_size", exp.vocab_size, config.vocab_size),
            ("n_users", exp.n_users, config.n_users),
            ("n_items", exp.n_items, config.n_items),
            ("max_len", exp.max_len, config.max_len),
            ("ffn_dim", exp.ffn_width(), config.ffn_width()),
        ] {
            if a != b {
                return Err(TrainError::ConfigMismatch(format!(
                    "{what}: checkpoint has {b}, current config has {a}"
                )));
            }
        }
    }
    let epoch = r.u64()? as usize;
    let has_best = r.u8()? != 0;
    let best = r.f64()?;
    let since_improve = r.u64()? as usize;
    let lr = r.f64()?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let mut params = ModelParams::zeros(&config);
    r.tensors(&mut params)?;
    let mut adam = AdamState::new(&config);
    adam.step = step;
    r.tensors(&mut adam.m)?;
    r.tensors(&mut adam.v)?;
    if r.pos != buf.len() {
        return Err(TrainError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        adam,
        state: TrainState {
            epoch,
            best_val: has_best.then_some(best),
            since_improve,
            lr,
            seed,
        },
    })
}

/// Sample variance of a tensor's entries; init-statistics tests use this.
pub fn tensor_variance(m: &Mat) -> f64 {
    let n = m.data.len() as f64;
    let mean: f64 = m.data.iter().sum::<f64>() / n;
    m.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
