//! The pretraining loop: Adam with decoupled weight decay, a warmup/decay
//! learning-rate schedule, deterministic data order, and a finite-difference
//! gradient checker.
//!
//! Every random decision is drawn from a substream derived from the run seed
//! and the coordinates of the decision — epoch number for the shuffle, (step,
//! slot) for masking — so a resumed run replays exactly the stream a straight
//! run would have used. Training always runs in f32; gradient checking always
//! runs in f64.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{FullConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, SenseMembershipMatrix};
use crate::masker::{apply_plan, plan_masking, MaskPlan};
use crate::model::{encode, input_embed, ForwardTrace, ModelParams, TensorMut, TensorRef};
use crate::objective::{backward, batch_loss, OovMode};
use crate::rng::{self, CounterRng};
use crate::scalar::Scalar;
use crate::textpipe::EncodedSequence;

/// Substream tag for the per-epoch data shuffle.
const EPOCH_STREAM: u64 = 0x6570_6f63;
/// Substream tag for per-(step, slot) mask seeds.
const STEP_STREAM: u64 = 0x7374_6570;
/// Substream tag for gradient-check coordinate sampling.
const GRADCHECK_STREAM: u64 = 0x6763_686b;

/// Adam with decoupled weight decay. Decay applies only to tensors flagged
/// for it (the matrices); biases, gains and every other vector are excluded.
/// Moment updates and bias correction run in f64 before rounding back.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Adam<T> {
    /// Zeroed moments shaped after the model's tensor list.
    pub fn fresh(params: &ModelParams<T>, cfg: &TrainConfig) -> Adam<T> {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self::fresh_sized(&sizes, cfg)
    }

    /// Zeroed moments for an arbitrary tensor list (model tensors plus a
    /// task head, for instance).
    pub fn fresh_sized(sizes: &[usize], cfg: &TrainConfig) -> Adam<T> {
        Adam {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Restore moments saved in a checkpoint.
    pub fn from_state(m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64, cfg: &TrainConfig) -> Adam<T> {
        Adam {
            m,
            v,
            t,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update over all tensors. `params` and `grads` must come from the
    /// same architecture so the fixed tensor order aligns them.
    pub fn step(
        &mut self,
        mut params: Vec<TensorMut<'_, T>>,
        grads: &[TensorRef<'_, T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} moment slots for {} parameter and {} gradient tensors",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((slot, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if slot.data.len() != grad.data.len() {
                return Err(Error::Contract(format!(
                    "tensor '{}' has {} parameters but {} gradients",
                    slot.name,
                    slot.data.len(),
                    grad.data.len()
                )));
            }
            let decay = if slot.decay { self.weight_decay } else { 0.0 };
            for i in 0..slot.data.len() {
                let g = grad.data[i].to_f64();
                if !g.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite gradient in tensor '{}' at flat index {}",
                        slot.name, i
                    )));
                }
                let mi = self.beta1 * m[i].to_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].to_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let p = slot.data[i].to_f64();
                slot.data[i] = T::from_f64(p - lr * update - lr * decay * p);
            }
        }
        Ok(())
    }
}

/// Learning rate at a given 0-based step: linear warmup to the peak over
/// `warmup_steps`, then linear decay to zero across the rest of the run.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
    }
}

/// The shuffled order of corpus indices for one epoch; a pure function of
/// `(seed, epoch)`, so resuming never needs to replay earlier epochs.
pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    CounterRng::derive(seed, &[EPOCH_STREAM, epoch]).shuffle(&mut order);
    order
}

/// The masking seed for one batch slot; a pure function of `(seed, step,
/// slot)`.
pub fn slot_mask_seed(seed: u64, step: u64, slot: u64) -> u64 {
    CounterRng::derive(seed, &[STEP_STREAM, step, slot]).seed()
}

/// One logged loss row.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub step: u64,
    pub lm: f64,
    pub slm_allowed: f64,
    pub slm_reg: f64,
    pub total: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lm, self.slm_allowed, self.slm_reg, self.total
        )
    }
}

/// Everything `train` needs. The corpus is pre-encoded; artifacts hashes are
/// stamped into checkpoints so resumes can refuse mismatched files.
pub struct TrainJob<'a> {
    pub corpus: &'a [EncodedSequence],
    pub lexicon: &'a Lexicon,
    pub membership: &'a SenseMembershipMatrix,
    pub config: &'a FullConfig,
    pub vocab_hash: u64,
    pub lexicon_hash: u64,
    /// Where checkpoints and the loss log go; `None` keeps the run in memory.
    pub out_dir: Option<&'a Path>,
    pub threads: usize,
    pub resume: Option<Checkpoint>,
}

/// What a finished run hands back: the final snapshot and this invocation's
/// loss rows (the on-disk `losses.csv` holds the same lines).
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<LossRow>,
}

/// Pretrain (or resume pretraining) until `config.train.steps` are done.
pub fn train(job: &TrainJob<'_>) -> Result<TrainOutcome> {
    let cfg = job.config;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.mask.validate()?;
    if job.corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    for seq in job.corpus {
        if seq.ids.len() > cfg.model.n_max {
            return Err(Error::Length {
                len: seq.ids.len(),
                max: cfg.model.n_max,
            });
        }
    }
    let digest = cfg.digest();
    let seed = cfg.train.seed;

    let (mut params, mut adam, start_step) = match &job.resume {
        Some(ckpt) => {
            ckpt.verify_config(digest)?;
            if ckpt.step >= cfg.train.steps {
                return Err(Error::Contract(format!(
                    "checkpoint already holds {} of {} steps",
                    ckpt.step, cfg.train.steps
                )));
            }
            if ckpt.params.config != cfg.model {
                return Err(Error::Compat(
                    "checkpoint architecture differs from the configured model".into(),
                ));
            }
            let adam = Adam::from_state(
                ckpt.adam_m.clone(),
                ckpt.adam_v.clone(),
                ckpt.adam_t,
                &cfg.train,
            );
            (ckpt.params.clone(), adam, ckpt.step)
        }
        None => {
            let params = ModelParams::<f32>::init(&cfg.model, seed)?;
            let adam = Adam::fresh(&params, &cfg.train);
            (params, adam, 0)
        }
    };

    if let Some(dir) = job.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let batch = cfg.train.batch_size as u64;
    let len = job.corpus.len() as u64;
    let threads = job.threads.max(1);
    let mut rows: Vec<LossRow> = Vec::new();
    let mut last_saved: Option<PathBuf> = None;
    // Cache the current epoch's permutation; batches that straddle an epoch
    // boundary refresh it mid-step.
    let mut cached_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();

    for step in start_step..cfg.train.steps {
        // Assemble the batch: pick sequences by the derived data order, then
        // plan and apply masking with per-slot seeds.
        let mut plans: Vec<MaskPlan> = Vec::with_capacity(batch as usize);
        let mut masked: Vec<EncodedSequence> = Vec::with_capacity(batch as usize);
        for slot in 0..batch {
            let g = step * batch + slot;
            let epoch = g / len;
            if epoch != cached_epoch {
                perm = epoch_permutation(seed, epoch, job.corpus.len());
                cached_epoch = epoch;
            }
            let seq = &job.corpus[perm[(g % len) as usize]];
            let plan = plan_masking(seq, job.lexicon, &cfg.mask, slot_mask_seed(seed, step, slot))?;
            masked.push(apply_plan(seq, &plan)?);
            plans.push(plan);
        }

        let at_step = |e: Error| match e {
            Error::Numerics(msg) => Error::Numerics(format!(
                "step {}: {} (last checkpoint: {})",
                step,
                msg,
                last_saved
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            )),
            other => other,
        };
        let traces = forward_batch(&params, job.membership, &masked, threads)?;
        let report = batch_loss(&params, &traces, &plans, cfg.train.mode, cfg.train.sense_weight)?;
        if !report.total.is_finite() {
            return Err(at_step(Error::Numerics("loss became non-finite".into())));
        }
        if step % cfg.train.log_interval == 0 {
            rows.push(LossRow {
                step,
                lm: report.lm,
                slm_allowed: report.slm_allowed,
                slm_reg: report.slm_reg,
                total: report.total,
            });
        }

        let grads = backward(
            &params,
            job.membership,
            &masked,
            &traces,
            &plans,
            cfg.train.mode,
            cfg.train.sense_weight,
        )?;
        adam.step(params.tensors_mut(), &grads.tensors(), lr_at(step, &cfg.train))
            .map_err(at_step)?;

        let completed = step + 1;
        if completed % cfg.train.ckpt_interval == 0 && completed < cfg.train.steps {
            if let Some(dir) = job.out_dir {
                let ckpt = snapshot(completed, seed, digest, job, &params, &adam);
                let path = dir.join(format!("ckpt-{:08}.sblm", completed));
                ckpt.save(&path)?;
                last_saved = Some(path);
            }
        }
    }

    let checkpoint = snapshot(cfg.train.steps, seed, digest, job, &params, &adam);
    if let Some(dir) = job.out_dir {
        checkpoint.save(&dir.join("final.sblm"))?;
        let csv: String = rows.iter().map(|r| r.csv() + "\n").collect();
        let path = dir.join("losses.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { checkpoint, rows })
}

fn snapshot(
    step: u64,
    seed: u64,
    digest: u64,
    job: &TrainJob<'_>,
    params: &ModelParams<f32>,
    adam: &Adam<f32>,
) -> Checkpoint {
    Checkpoint {
        step,
        seed,
        rng_algorithm: rng::ALGORITHM_ID.to_string(),
        config_digest: digest,
        vocab_hash: job.vocab_hash,
        lexicon_hash: job.lexicon_hash,
        adam_t: adam.t,
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
    }
}

/// Run the forward pass for every slot, splitting the batch across threads.
/// Results are collected in slot order, so the output is independent of the
/// thread count.
fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    membership: &SenseMembershipMatrix,
    masked: &[EncodedSequence],
    threads: usize,
) -> Result<Vec<ForwardTrace<T>>> {
    let forward = |seq: &EncodedSequence| -> Result<ForwardTrace<T>> {
        let inputs = input_embed(params, membership, seq)?;
        encode(params, inputs)
    };
    if threads <= 1 || masked.len() <= 1 {
        return masked.iter().map(forward).collect();
    }
    let chunk = masked.len().div_ceil(threads);
    let chunks: Vec<Result<Vec<ForwardTrace<T>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = masked
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(forward).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("forward worker panicked"))
            .collect()
    });
    let mut traces = Vec::with_capacity(masked.len());
    for part in chunks {
        traces.extend(part?);
    }
    Ok(traces)
}

/// Per-tensor summary of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckGroup {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    /// Flat index, analytic and numeric value behind `max_rel`.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel: f64,
    pub tol: f64,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tol
    }
}

fn batch_total<T: Scalar>(
    params: &ModelParams<T>,
    membership: &SenseMembershipMatrix,
    seqs: &[EncodedSequence],
    plans: &[MaskPlan],
    mode: OovMode,
    sense_weight: f64,
) -> Result<f64> {
    let traces = forward_batch(params, membership, seqs, 1)?;
    Ok(batch_loss(params, &traces, plans, mode, sense_weight)?.total)
}

/// Compare analytic gradients against central differences on sampled
/// coordinates of every tensor. `seqs` are masked model inputs paired with
/// their plans. The relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams<f64>,
    membership: &SenseMembershipMatrix,
    seqs: &[EncodedSequence],
    plans: &[MaskPlan],
    mode: OovMode,
    sense_weight: f64,
    eps: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            eps
        )));
    }
    if samples_per_tensor == 0 {
        return Err(Error::Config(
            "samples_per_tensor must be at least 1".into(),
        ));
    }

    let traces = forward_batch(params, membership, seqs, 1)?;
    let analytic = backward(params, membership, seqs, &traces, plans, mode, sense_weight)?;
    let analytic_tensors = analytic.tensors();

    let mut groups = Vec::new();
    let mut max_rel = 0.0f64;
    for (ti, tensor) in analytic_tensors.iter().enumerate() {
        let n = tensor.data.len();
        let k = samples_per_tensor.min(n);
        let coords =
            CounterRng::derive(seed, &[GRADCHECK_STREAM, ti as u64]).sample_indices(n, k);
        let mut group = GradCheckGroup {
            name: tensor.name.clone(),
            checked: k,
            max_rel: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for coord in coords {
            let a = tensor.data[coord];
            let nudge = |delta: f64| -> Result<f64> {
                let mut probe = params.clone();
                probe.tensors_mut()[ti].data[coord] += delta;
                batch_total(&probe, membership, seqs, plans, mode, sense_weight)
            };
            let numeric = (nudge(eps)? - nudge(-eps)?) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > group.max_rel {
                group.max_rel = rel;
                group.worst_coord = coord;
                group.analytic = a;
                group.numeric = numeric;
            }
        }
        max_rel = max_rel.max(group.max_rel);
        groups.push(group);
    }
    Ok(GradCheckReport {
        groups,
        max_rel,
        tol,
        eps,
    })
}

/// Move freshly initialized parameters to a well-conditioned point for
/// checking. At the usual 0.02-sigma init attention is near-uniform, so the
/// query/key gradients are second-order small and the finite-difference
/// signal drowns in f64 rounding noise — a conditioning problem, not a
/// correctness one. Scaling the matrices and nudging gains and biases gives
/// every path a healthy magnitude while checking the exact same derivative.
pub fn condition_for_grad_check(params: &mut ModelParams<f64>, scale: f64, seed: u64) {
    let mut rng = CounterRng::derive(seed, &[0x636f_6e64]);
    for t in params.tensors_mut() {
        if t.decay {
            for v in t.data.iter_mut() {
                *v *= scale;
            }
        } else {
            for v in t.data.iter_mut() {
                *v += 0.1 * rng.standard_normal();
            }
        }
    }
}
