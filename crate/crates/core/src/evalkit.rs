//! Evaluation protocols: raw-text supersense tagging, a frozen linear probe,
//! grid-searched fine-tuning, word-in-context pair classification,
//! supersense-vector clustering, and vector export.
//!
//! All evaluation arithmetic runs in f32 (the checkpoint dtype) with f64
//! accumulators for reported numbers, and every random choice comes from
//! seeded substreams, so reported accuracies are reproducible bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, SenseId, SenseMembershipMatrix, SupersenseInventory};
use crate::model::{
    backward_encoder, backward_input_embed, encode, input_embed, sense_scores, ForwardTrace,
    ModelParams, TensorMut, TensorRef,
};
use crate::objective::softmax;
use crate::rng::CounterRng;
use crate::textpipe::{pre_tokenize, tokenize, EncodedSequence, Vocab, WordSpan, UNK_ID};
use crate::trainer::Adam;

/// Substream tag for probe-head initialization and batch order.
const PROBE_STREAM: u64 = 0x7072_6f62;
/// Substream tag for fine-tuning splits and epoch orders.
const FT_STREAM: u64 = 0x6669_6e65;

// ---------------------------------------------------------------------------
// Example formats.

/// One supersense-disambiguation example: a sentence, the index of the
/// target word (into the pre-tokenized word list), and the gold supersense.
#[derive(Clone, Debug)]
pub struct SenseTaggedExample {
    pub sentence: String,
    pub word_index: usize,
    pub gold: SenseId,
}

/// Parse `sentence<TAB>word_index<TAB>supersense_name` lines. The word index
/// is validated against the sentence's word count and the supersense against
/// the inventory.
pub fn parse_sense_examples(
    text: &str,
    origin: &Path,
    inventory: &SupersenseInventory,
) -> Result<Vec<SenseTaggedExample>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let mut parts = line.split('\t');
        let sentence = parts.next().unwrap_or("").trim();
        let index_str = parts.next().unwrap_or("").trim();
        let sense_str = parts.next().unwrap_or("").trim();
        if sentence.is_empty() || index_str.is_empty() || sense_str.is_empty() {
            return Err(Error::parse(
                origin,
                lineno,
                "expected \"sentence<TAB>word_index<TAB>supersense\"",
            ));
        }
        let word_index: usize = index_str.parse().map_err(|_| {
            Error::parse(
                origin,
                lineno,
                format!("cannot parse '{}' as a word index", index_str),
            )
        })?;
        let n_words = pre_tokenize(sentence).len();
        if word_index >= n_words {
            return Err(Error::parse(
                origin,
                lineno,
                format!("word index {} but the sentence has {} words", word_index, n_words),
            ));
        }
        let gold = inventory.lookup(sense_str).ok_or_else(|| {
            Error::parse(origin, lineno, format!("unknown supersense '{}'", sense_str))
        })?;
        out.push(SenseTaggedExample {
            sentence: sentence.to_string(),
            word_index,
            gold,
        });
    }
    Ok(out)
}

/// One word-in-context pair: does `word` mean the same thing in both
/// sentences?
#[derive(Clone, Debug)]
pub struct WiCExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub word: String,
    pub label: bool,
}

/// Parse `sentence_a<TAB>sentence_b<TAB>word<TAB>label` lines, where the
/// label is `0`/`1` or `false`/`true`.
pub fn parse_wic_examples(text: &str, origin: &Path) -> Result<Vec<WiCExample>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                origin,
                lineno,
                "expected \"sentence_a<TAB>sentence_b<TAB>word<TAB>label\"",
            ));
        }
        let label = match fields[3].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("cannot parse '{}' as a 0/1 label", other),
                ));
            }
        };
        out.push(WiCExample {
            sentence_a: fields[0].trim().to_string(),
            sentence_b: fields[1].trim().to_string(),
            word: fields[2].trim().to_string(),
            label,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Raw-text tagging.

/// Per-word supersense distribution over an unmasked sentence.
#[derive(Clone, Debug)]
pub struct WordSensePrediction {
    pub surface: String,
    /// Token positions of the word in the encoded sequence.
    pub start: usize,
    pub end: usize,
    /// Softmax over the full inventory; sums to one.
    pub dist: Vec<f64>,
}

/// Run the encoder over raw text without masking anything and report each
/// word's supersense distribution (span outputs are averaged first). Text
/// longer than the position table is truncated at a word boundary; empty
/// text gives an empty prediction list.
pub fn predict_supersenses(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    vocab: &Vocab,
    text: &str,
) -> Result<Vec<WordSensePrediction>> {
    let mut seq = tokenize(vocab, text);
    seq.truncate_to(params.config.n_max);
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let trace = encode(params, input_embed(params, membership, &seq)?)?;
    let mut out = Vec::with_capacity(seq.spans.len());
    for span in &seq.spans {
        let v = span_mean(&trace, span.start, span.end);
        let p = softmax(sense_scores(params, v.view()).view());
        out.push(WordSensePrediction {
            surface: span.surface.clone(),
            start: span.start,
            end: span.end,
            dist: p.iter().map(|&x| x as f64).collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared classification machinery.

/// One classification instance: an encoded input, the word spans whose mean
/// output embeddings are concatenated into the feature vector, and the gold
/// class.
#[derive(Clone, Debug)]
struct Task {
    /// Each sequence is encoded independently; pair tasks keep their two
    /// sentences apart so neither context bleeds into the other's target
    /// vector through attention.
    seqs: Vec<EncodedSequence>,
    /// Scored spans as (sequence index, start, end).
    spans: Vec<(usize, usize, usize)>,
    gold: usize,
}

fn span_mean(trace: &ForwardTrace<f32>, start: usize, end: usize) -> Array1<f32> {
    let slice = trace.v_output.slice(ndarray::s![start..end, ..]);
    slice.sum_axis(Axis(0)) / (end - start) as f32
}

/// Width of the feature vector a task produces. Single-span tasks use the
/// span mean as-is; two-span (pair) tasks add the comparison blocks
/// `|a - b|` and `a * b`, so a linear head can read off whether the spans
/// point the same way rather than having to learn a cross-term itself.
fn feature_dim(n_spans: usize, d: usize) -> usize {
    if n_spans == 2 { 4 * d } else { n_spans * d }
}

/// Encode one task and build its feature vector: the concatenated span
/// means, plus `[|a - b|; a * b]` when the task compares two spans.
fn task_features(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    task: &Task,
) -> Result<(Vec<ForwardTrace<f32>>, Array1<f32>)> {
    let traces = task
        .seqs
        .iter()
        .map(|seq| encode(params, input_embed(params, membership, seq)?))
        .collect::<Result<Vec<_>>>()?;
    let d = params.config.d;
    let means: Vec<Array1<f32>> = task
        .spans
        .iter()
        .map(|&(qi, s, e)| span_mean(&traces[qi], s, e))
        .collect();
    let mut x = Array1::<f32>::zeros(feature_dim(task.spans.len(), d));
    for (si, mean) in means.iter().enumerate() {
        x.slice_mut(ndarray::s![si * d..(si + 1) * d]).assign(mean);
    }
    if let [a, b] = means.as_slice() {
        for j in 0..d {
            x[2 * d + j] = (a[j] - b[j]).abs();
            x[3 * d + j] = a[j] * b[j];
        }
    }
    Ok((traces, x))
}

/// Index of the largest entry; ties resolve to the lowest index.
fn argmax_lowest(v: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters of the frozen linear probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 42,
        }
    }
}

/// Train a bias-free linear head on fixed features by softmax cross-entropy
/// with Adam (no weight decay). Deterministic in `(features, golds, cfg)`.
fn train_head(
    features: &[Array1<f32>],
    golds: &[usize],
    d_in: usize,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Array2<f32> {
    let mut head = Array2::<f32>::zeros((d_in, n_classes));
    let mut rng = CounterRng::derive(cfg.seed, &[PROBE_STREAM]);
    for v in head.iter_mut() {
        *v = rng.truncated_normal(0.02, 2.0) as f32;
    }
    let adam_cfg = TrainConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut adam = Adam::<f32>::fresh_sized(&[head.len()], &adam_cfg);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        CounterRng::derive(cfg.seed, &[PROBE_STREAM, epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = Array2::<f32>::zeros((d_in, n_classes));
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let x = &features[i];
                let logits = x.dot(&head);
                let mut dz = softmax(logits.view());
                dz[golds[i]] -= 1.0;
                dz *= scale;
                // grad += outer(x, dz)
                for (r, &xr) in x.iter().enumerate() {
                    let mut row = grad.row_mut(r);
                    row.scaled_add(xr, &dz);
                }
            }
            let slots = vec![TensorMut {
                name: "head".to_string(),
                shape: vec![d_in, n_classes],
                data: head.as_slice_mut().expect("standard layout"),
                decay: false,
            }];
            let grefs = vec![TensorRef {
                name: "head".to_string(),
                shape: vec![d_in, n_classes],
                data: grad.as_slice().expect("standard layout"),
                decay: false,
            }];
            adam.step(slots, &grefs, cfg.lr).expect("finite probe gradients");
        }
    }
    head
}

fn head_accuracy(features: &[Array1<f32>], golds: &[usize], head: &Array2<f32>) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features
        .iter()
        .zip(golds.iter())
        .filter(|(x, &g)| argmax_lowest(x.dot(head).view()) == g)
        .count();
    hits as f64 / features.len() as f64
}

/// Probe outcome: test accuracy plus bookkeeping numbers.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Examples whose gold supersense is not in the lexicon's allowed set
    /// for the target word; they are scored normally, only counted.
    pub gold_outside_allowed: usize,
}

fn sense_task(vocab: &Vocab, ex: &SenseTaggedExample, n_max: usize) -> Result<Task> {
    let mut seq = tokenize(vocab, &ex.sentence);
    seq.truncate_to(n_max);
    if ex.word_index >= seq.spans.len() {
        return Err(Error::Contract(format!(
            "target word {} of '{}' fell outside the {}-token window",
            ex.word_index, ex.sentence, n_max
        )));
    }
    let span = &seq.spans[ex.word_index];
    let spans = vec![(0, span.start, span.end)];
    Ok(Task {
        seqs: vec![seq],
        spans,
        gold: ex.gold as usize,
    })
}

fn count_gold_outside_allowed(lexicon: &Lexicon, examples: &[&SenseTaggedExample]) -> usize {
    examples
        .iter()
        .filter(|ex| {
            let words = pre_tokenize(&ex.sentence);
            let allowed = lexicon.allowed_senses(&words[ex.word_index]);
            !allowed.contains(&ex.gold)
        })
        .count()
}

/// Train a linear probe on frozen output embeddings of the target words and
/// report exact-match accuracy. The encoder parameters are read, never
/// written.
pub fn frozen_probe(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    vocab: &Vocab,
    lexicon: &Lexicon,
    train: &[SenseTaggedExample],
    test: &[SenseTaggedExample],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract(
            "probe needs at least one training and one test example".into(),
        ));
    }
    let d = params.config.d;
    let featurize = |exs: &[SenseTaggedExample]| -> Result<(Vec<Array1<f32>>, Vec<usize>)> {
        let mut xs = Vec::with_capacity(exs.len());
        let mut ys = Vec::with_capacity(exs.len());
        for ex in exs {
            let task = sense_task(vocab, ex, params.config.n_max)?;
            let (_, x) = task_features(params, membership, &task)?;
            xs.push(x);
            ys.push(task.gold);
        }
        Ok((xs, ys))
    };
    let (train_x, train_y) = featurize(train)?;
    let (test_x, test_y) = featurize(test)?;
    let head = train_head(&train_x, &train_y, d, n_classes, cfg);
    let all: Vec<&SenseTaggedExample> = train.iter().chain(test.iter()).collect();
    Ok(ProbeOutcome {
        accuracy: head_accuracy(&test_x, &test_y, &head),
        train_accuracy: head_accuracy(&train_x, &train_y, &head),
        gold_outside_allowed: count_gold_outside_allowed(lexicon, &all),
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning.

/// Grid and schedule for fine-tuning evaluations. Learning rate zero is
/// legal and makes the joint phase a no-op, leaving the probe-trained head.
#[derive(Clone, Debug)]
pub struct FtConfig {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Joint epochs per grid point; the best epoch by dev accuracy wins.
    pub epochs: usize,
    /// Fraction of the training set held out for selection.
    pub dev_fraction: f64,
    /// The head is first trained frozen with these settings.
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for FtConfig {
    fn default() -> FtConfig {
        FtConfig {
            lrs: vec![5e-6, 1e-5, 2e-5, 3e-5, 5e-5],
            batch_sizes: vec![16, 32],
            epochs: 10,
            dev_fraction: 0.2,
            probe: ProbeConfig::default(),
            seed: 42,
        }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::Config("fine-tune grid must not be empty".into()));
        }
        if self.lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::Config("fine-tune lrs must be finite and >= 0".into()));
        }
        if self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::Config("fine-tune batch sizes must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("fine-tune epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!(
                "dev_fraction must lie in [0, 1), got {}",
                self.dev_fraction
            )));
        }
        Ok(())
    }
}

/// One grid point's log line.
#[derive(Clone, Debug)]
pub struct FtRun {
    pub lr: f64,
    pub batch_size: usize,
    /// 0 means the probe-only state won selection.
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

/// Outcome of a grid-searched fine-tune.
#[derive(Clone, Debug)]
pub struct FtOutcome {
    pub accuracy: f64,
    pub selected: FtRun,
    pub runs: Vec<FtRun>,
    pub gold_outside_allowed: usize,
}

/// Cross-entropy loss of one task under the current encoder and head,
/// accumulated into `grads` and `head_grad` (both scaled by `scale`).
fn task_loss_and_grads(
    params: &ModelParams<f32>,
    head: &Array2<f32>,
    membership: &SenseMembershipMatrix,
    task: &Task,
    scale: f32,
    grads: &mut ModelParams<f32>,
    head_grad: &mut Array2<f32>,
) -> Result<f32> {
    let d = params.config.d;
    let (traces, x) = task_features(params, membership, task)?;
    let logits = x.dot(head);
    let probs = softmax(logits.view());
    let loss = -(probs[task.gold].max(f32::MIN_POSITIVE)).ln() * scale;
    let mut dz = probs;
    dz[task.gold] -= 1.0;
    dz *= scale;
    for (r, &xr) in x.iter().enumerate() {
        head_grad.row_mut(r).scaled_add(xr, &dz);
    }
    let dx = head.dot(&dz);
    // Gradient with respect to each span mean. Pair tasks fold the
    // comparison blocks back in: with g = |a - b| and p = a * b,
    // da = dx_a + sign(a - b) * dx_g + b * dx_p and db mirrors it
    // with the sign flipped (sign(0) taken as 0, the subgradient).
    let mut d_means: Vec<Array1<f32>> = (0..task.spans.len())
        .map(|si| dx.slice(ndarray::s![si * d..(si + 1) * d]).to_owned())
        .collect();
    if task.spans.len() == 2 {
        let (qa, s0, e0) = task.spans[0];
        let (qb, s1, e1) = task.spans[1];
        let a = span_mean(&traces[qa], s0, e0);
        let b = span_mean(&traces[qb], s1, e1);
        for j in 0..d {
            let diff = a[j] - b[j];
            let sg = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let (dg, dp) = (dx[2 * d + j], dx[3 * d + j]);
            d_means[0][j] += sg * dg + b[j] * dp;
            d_means[1][j] += -sg * dg + a[j] * dp;
        }
    }
    let mut d_vouts: Vec<Array2<f32>> = task
        .seqs
        .iter()
        .map(|seq| Array2::<f32>::zeros((seq.len(), d)))
        .collect();
    for (si, &(qi, s, e)) in task.spans.iter().enumerate() {
        let share = &d_means[si] / (e - s) as f32;
        for pos in s..e {
            d_vouts[qi].row_mut(pos).scaled_add(1.0, &share);
        }
    }
    for (qi, seq) in task.seqs.iter().enumerate() {
        let d_vin = backward_encoder(params, &traces[qi], &d_vouts[qi], grads);
        backward_input_embed(seq, membership, &d_vin, grads);
    }
    Ok(loss)
}

/// One Adam update of encoder plus head on a batch of tasks.
fn joint_batch_update(
    params: &mut ModelParams<f32>,
    head: &mut Array2<f32>,
    membership: &SenseMembershipMatrix,
    tasks: &[Task],
    batch: &[usize],
    adam: &mut Adam<f32>,
    lr: f64,
) -> Result<()> {
    let (d_in, n_classes) = head.dim();
    let mut grads = ModelParams::<f32>::zeros(&params.config);
    let mut head_grad = Array2::<f32>::zeros((d_in, n_classes));
    let scale = 1.0 / batch.len() as f32;

    for &i in batch {
        task_loss_and_grads(
            params,
            head,
            membership,
            &tasks[i],
            scale,
            &mut grads,
            &mut head_grad,
        )?;
    }

    let mut slots = params.tensors_mut();
    slots.push(TensorMut {
        name: "head".to_string(),
        shape: vec![d_in, n_classes],
        data: head.as_slice_mut().expect("standard layout"),
        decay: false,
    });
    let mut grefs = grads.tensors();
    grefs.push(TensorRef {
        name: "head".to_string(),
        shape: vec![d_in, n_classes],
        data: head_grad.as_slice().expect("standard layout"),
        decay: false,
    });
    adam.step(slots, &grefs, lr)
}

fn tasks_accuracy(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    tasks: &[Task],
    idx: &[usize],
    head: &Array2<f32>,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &i in idx {
        let (_, x) = task_features(params, membership, &tasks[i])?;
        if argmax_lowest(x.dot(head).view()) == tasks[i].gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Shared grid procedure: hold out a dev slice, pre-train the head frozen on
/// the rest, then fine-tune jointly per grid point, snapshotting the best
/// dev epoch. Returns the test accuracy of the grid winner plus the log.
fn grid_fine_tune(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    train_tasks: &[Task],
    test_tasks: &[Task],
    n_classes: usize,
    cfg: &FtConfig,
) -> Result<(f64, FtRun, Vec<FtRun>)> {
    cfg.validate()?;
    if train_tasks.is_empty() || test_tasks.is_empty() {
        return Err(Error::Contract(
            "fine-tuning needs at least one training and one test example".into(),
        ));
    }
    let d_in = feature_dim(train_tasks[0].spans.len(), params.config.d);

    // Dev split: a shuffled prefix becomes dev; the rest trains, kept in the
    // original order so a 0-fraction split degenerates to the full set.
    let n = train_tasks.len();
    let mut shuffled: Vec<usize> = (0..n).collect();
    CounterRng::derive(cfg.seed, &[FT_STREAM]).shuffle(&mut shuffled);
    let n_dev = ((cfg.dev_fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    let dev_idx: Vec<usize> = shuffled[..n_dev].to_vec();
    let mut fit_idx: Vec<usize> = shuffled[n_dev..].to_vec();
    fit_idx.sort_unstable();
    let test_idx: Vec<usize> = (0..test_tasks.len()).collect();

    let mut runs: Vec<FtRun> = Vec::new();
    let mut best: Option<(usize, ModelParams<f32>, Array2<f32>)> = None;

    for (run_idx, (&lr, &bs)) in cfg
        .lrs
        .iter()
        .flat_map(|lr| cfg.batch_sizes.iter().map(move |bs| (lr, bs)))
        .enumerate()
    {
        let mut p = params.clone();
        // Frozen phase: features once, head trained on them.
        let mut fit_x = Vec::with_capacity(fit_idx.len());
        let mut fit_y = Vec::with_capacity(fit_idx.len());
        for &i in &fit_idx {
            let (_, x) = task_features(&p, membership, &train_tasks[i])?;
            fit_x.push(x);
            fit_y.push(train_tasks[i].gold);
        }
        let mut head = train_head(&fit_x, &fit_y, d_in, n_classes, &cfg.probe);

        let sizes: Vec<usize> = p
            .tensors()
            .iter()
            .map(|t| t.data.len())
            .chain([head.len()])
            .collect();
        let adam_cfg = TrainConfig {
            lr,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::<f32>::fresh_sized(&sizes, &adam_cfg);

        let mut run_best_acc = tasks_accuracy(&p, membership, train_tasks, &dev_idx, &head)?;
        let mut run_best_epoch = 0usize;
        let mut run_snapshot = (p.clone(), head.clone());
        for epoch in 1..=cfg.epochs {
            let mut order = fit_idx.clone();
            CounterRng::derive(cfg.seed, &[FT_STREAM, run_idx as u64, epoch as u64])
                .shuffle(&mut order);
            for batch in order.chunks(bs) {
                joint_batch_update(&mut p, &mut head, membership, train_tasks, batch, &mut adam, lr)?;
            }
            let acc = tasks_accuracy(&p, membership, train_tasks, &dev_idx, &head)?;
            if acc > run_best_acc {
                run_best_acc = acc;
                run_best_epoch = epoch;
                run_snapshot = (p.clone(), head.clone());
            }
        }
        let run = FtRun {
            lr,
            batch_size: bs,
            best_epoch: run_best_epoch,
            dev_accuracy: run_best_acc,
        };
        let improves = match &best {
            None => true,
            Some((best_run, _, _)) => run_best_acc > runs[*best_run].dev_accuracy,
        };
        if improves {
            best = Some((runs.len(), run_snapshot.0, run_snapshot.1));
        }
        runs.push(run);
    }

    let (best_run, best_params, best_head) = best.expect("non-empty grid");
    let accuracy = tasks_accuracy(&best_params, membership, test_tasks, &test_idx, &best_head)?;
    Ok((accuracy, runs[best_run].clone(), runs))
}

/// Fine-tune the whole encoder plus a linear head over the hyperparameter
/// grid and report test accuracy of the dev-selected setting.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_eval(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    vocab: &Vocab,
    lexicon: &Lexicon,
    train: &[SenseTaggedExample],
    test: &[SenseTaggedExample],
    n_classes: usize,
    cfg: &FtConfig,
) -> Result<FtOutcome> {
    let to_tasks = |exs: &[SenseTaggedExample]| -> Result<Vec<Task>> {
        exs.iter()
            .map(|ex| sense_task(vocab, ex, params.config.n_max))
            .collect()
    };
    let train_tasks = to_tasks(train)?;
    let test_tasks = to_tasks(test)?;
    let (accuracy, selected, runs) =
        grid_fine_tune(params, membership, &train_tasks, &test_tasks, n_classes, cfg)?;
    let all: Vec<&SenseTaggedExample> = train.iter().chain(test.iter()).collect();
    Ok(FtOutcome {
        accuracy,
        selected,
        runs,
        gold_outside_allowed: count_gold_outside_allowed(lexicon, &all),
    })
}

// ---------------------------------------------------------------------------
// Word-in-context pairs.

/// Outcome of a WiC evaluation.
#[derive(Clone, Debug)]
pub struct WicOutcome {
    pub accuracy: f64,
    pub majority_baseline: f64,
    pub selected: FtRun,
    pub runs: Vec<FtRun>,
    /// Pairs dropped because the target word was missing from a sentence,
    /// or fell past the position-table limit.
    pub skipped_train: usize,
    pub skipped_test: usize,
}

/// Build a pair task: each sentence becomes its own sequence (encoded
/// independently, so attention cannot carry one context into the other's
/// target vector), with the first occurrence of the target word recorded on
/// each side. Returns `None` when a sentence drops the target under the
/// position-table limit or does not contain it at all.
fn wic_task(vocab: &Vocab, ex: &WiCExample, n_max: usize) -> Option<Task> {
    let mut a = tokenize(vocab, &ex.sentence_a);
    let mut b = tokenize(vocab, &ex.sentence_b);
    a.truncate_to(n_max);
    b.truncate_to(n_max);
    let target = pre_tokenize(&ex.word);
    let target = target.first()?;
    let find = |seq: &EncodedSequence| {
        seq.spans
            .iter()
            .find(|s| &s.surface == target)
            .map(|s| (s.start, s.end))
    };
    let (a_start, a_end) = find(&a)?;
    let (b_start, b_end) = find(&b)?;
    Some(Task {
        seqs: vec![a, b],
        spans: vec![(0, a_start, a_end), (1, b_start, b_end)],
        gold: ex.label as usize,
    })
}

/// Train and evaluate the pair classifier: a linear head over the two target
/// words' output embeddings and their comparison blocks, fine-tuned over the
/// grid like the supersense task. Unusable pairs are skipped and counted.
pub fn wic_eval(
    params: &ModelParams<f32>,
    membership: &SenseMembershipMatrix,
    vocab: &Vocab,
    train: &[WiCExample],
    test: &[WiCExample],
    cfg: &FtConfig,
) -> Result<WicOutcome> {
    let n_max = params.config.n_max;
    let build = |exs: &[WiCExample]| -> (Vec<Task>, usize) {
        let mut tasks = Vec::with_capacity(exs.len());
        let mut skipped = 0usize;
        for ex in exs {
            match wic_task(vocab, ex, n_max) {
                Some(t) => tasks.push(t),
                None => skipped += 1,
            }
        }
        (tasks, skipped)
    };
    let (train_tasks, skipped_train) = build(train);
    let (test_tasks, skipped_test) = build(test);
    if train_tasks.is_empty() || test_tasks.is_empty() {
        return Err(Error::Contract(format!(
            "no usable pairs: {} of {} train and {} of {} test examples skipped",
            skipped_train,
            train.len(),
            skipped_test,
            test.len()
        )));
    }
    let (accuracy, selected, runs) =
        grid_fine_tune(params, membership, &train_tasks, &test_tasks, 2, cfg)?;
    let trues = test_tasks.iter().filter(|t| t.gold == 1).count();
    let majority_baseline = trues.max(test_tasks.len() - trues) as f64 / test_tasks.len() as f64;
    Ok(WicOutcome {
        accuracy,
        majority_baseline,
        selected,
        runs,
        skipped_train,
        skipped_test,
    })
}

// ---------------------------------------------------------------------------
// Clustering and export.

/// One agglomerative merge: clusters `a` and `b` (lowest-id first) join at
/// `distance` into a new cluster of `size` members. Original vectors are
/// clusters `0..k`; merge `i` creates cluster `k + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

/// Cosine distance `1 - cos(a, b)`, clamped into `[0, 2]`. A zero vector is
/// at distance 1 from everything.
pub fn cosine_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0)
}

/// Average-linkage agglomerative clustering of the matrix's columns under
/// cosine distance. Ties break toward the lowest cluster id pair. Exactly
/// `k - 1` merges for `k` columns.
pub fn cluster_columns(matrix: ArrayView2<'_, f32>) -> Result<Vec<Merge>> {
    let k = matrix.ncols();
    if k < 2 {
        return Err(Error::Contract(format!(
            "clustering needs at least two vectors, got {}",
            k
        )));
    }
    let cols: Vec<Array1<f64>> = (0..k)
        .map(|j| matrix.column(j).mapv(|v| v as f64))
        .collect();

    // Active clusters by id; distances kept under (low, high) keys and
    // updated by the average-linkage recurrence.
    let mut active: Vec<(usize, usize)> = (0..k).map(|i| (i, 1)).collect();
    let mut dist: std::collections::HashMap<(usize, usize), f64> = std::collections::HashMap::new();
    for i in 0..k {
        for j in (i + 1)..k {
            dist.insert((i, j), cosine_distance(cols[i].view(), cols[j].view()));
        }
    }

    let mut merges = Vec::with_capacity(k - 1);
    for step in 0..(k - 1) {
        let mut pick: Option<(f64, usize, usize)> = None;
        for (ai, &(a, _)) in active.iter().enumerate() {
            for &(b, _) in &active[ai + 1..] {
                let d = dist[&(a.min(b), a.max(b))];
                let cand = (d, a.min(b), a.max(b));
                if pick.is_none_or(|best| {
                    (cand.0.total_cmp(&best.0)).then(cand.1.cmp(&best.1)).then(cand.2.cmp(&best.2))
                        == std::cmp::Ordering::Less
                }) {
                    pick = Some(cand);
                }
            }
        }
        let (d, a, b) = pick.expect("at least two active clusters");
        let size_a = active.iter().find(|&&(id, _)| id == a).unwrap().1;
        let size_b = active.iter().find(|&&(id, _)| id == b).unwrap().1;
        let new_id = k + step;
        let new_size = size_a + size_b;

        active.retain(|&(id, _)| id != a && id != b);
        for &(other, _) in &active {
            let da = dist[&(other.min(a), other.max(a))];
            let db = dist[&(other.min(b), other.max(b))];
            let merged =
                (size_a as f64 * da + size_b as f64 * db) / (size_a as f64 + size_b as f64);
            dist.insert((other.min(new_id), other.max(new_id)), merged);
        }
        active.push((new_id, new_size));
        merges.push(Merge {
            a,
            b,
            distance: d,
            size: new_size,
        });
    }
    Ok(merges)
}

/// Render the merge tree as nested JSON: leaves carry labels, internal nodes
/// their merge height.
pub fn dendrogram_json(merges: &[Merge], labels: &[String]) -> String {
    let k = merges.len() + 1;
    fn escape(s: &str) -> String {
        s.replace('\\', "\\\\").replace('"', "\\\"")
    }
    fn render(node: usize, k: usize, merges: &[Merge], labels: &[String], out: &mut String) {
        if node < k {
            let label = labels.get(node).map(String::as_str).unwrap_or("");
            let _ = write!(out, "{{\"id\":{},\"label\":\"{}\"}}", node, escape(label));
        } else {
            let m = &merges[node - k];
            let _ = write!(out, "{{\"id\":{},\"height\":{},\"children\":[", node, m.distance);
            render(m.a, k, merges, labels, out);
            out.push(',');
            render(m.b, k, merges, labels, out);
            out.push_str("]}");
        }
    }
    let mut out = String::new();
    if merges.is_empty() {
        out.push_str("{}");
    } else {
        render(k + merges.len() - 1, k, merges, labels, &mut out);
    }
    out.push('\n');
    out
}

/// Write one labeled row per matrix column: `label<TAB>v1<TAB>...<TAB>vd`.
/// Values print in full round-trip precision.
pub fn export_vectors(
    matrix: ArrayView2<'_, f32>,
    labels: &[String],
    path: &Path,
) -> Result<()> {
    if labels.len() != matrix.ncols() {
        return Err(Error::Contract(format!(
            "{} labels for {} vectors",
            labels.len(),
            matrix.ncols()
        )));
    }
    let mut out = String::new();
    for (j, label) in labels.iter().enumerate() {
        out.push_str(label);
        for v in matrix.column(j).iter() {
            let _ = write!(out, "\t{}", v);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Inventory names in id order, the row labels for S exports.
pub fn inventory_labels(inventory: &SupersenseInventory) -> Vec<String> {
    (0..inventory.len())
        .map(|i| {
            inventory
                .get(i as SenseId)
                .map(|s| s.name.clone())
                .unwrap_or_default()
        })
        .collect()
}
