//! Combined detection loss, Adam, and the training loop.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::association::{associate, training_mask, PointClass};
use crate::autograd::{NodeId, Tape};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::codec::{apply_axis_mask, encode_target, CodecConfig, LocalTarget};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::features::synth_features;
use crate::fusion::{forward_on_tape, init_params, ArchConfig, Params};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::sim::{generate_frame, Frame, SimConfig};
use crate::tensor::Tensor;

pub const VAL_SEED_OFFSET: u64 = 1_000_000;
pub const TEST_SEED_OFFSET: u64 = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    /// Weight of the regression term.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds initialization, shuffling and the simulated splits.
    pub seed: u64,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    /// Train on range-only / azimuth-only candidates with per-axis masks.
    pub augment_non_trivial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_frames: 8,
            lr: 1e-4,
            alpha: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            train_frames: 512,
            val_frames: 64,
            test_frames: 64,
            augment_non_trivial: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_frames == 0 {
            return Err(Error::config("train.batch_frames", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("train.alpha", "must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("train.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        let limit = VAL_SEED_OFFSET as usize;
        if self.train_frames >= limit || self.val_frames >= limit || self.test_frames >= limit {
            return Err(Error::config(
                "train.train_frames/val_frames/test_frames",
                format!("split sizes must stay below {limit} so split seeds are disjoint"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn base_seed(self, seed: u64) -> u64 {
        match self {
            Split::Train => seed,
            Split::Val => seed + VAL_SEED_OFFSET,
            Split::Test => seed + TEST_SEED_OFFSET,
        }
    }
}

/// Simulated frames of one split.
pub fn split_frames(exp: &ExperimentConfig, split: Split) -> Result<Vec<Frame>> {
    let n = match split {
        Split::Train => exp.train.train_frames,
        Split::Val => exp.train.val_frames,
        Split::Test => exp.train.test_frames,
    };
    let base = split.base_seed(exp.train.seed);
    (0..n as u64).map(|i| generate_frame(&exp.sim, base + i)).collect()
}

/// Network inputs and targets of one frame, built from ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame_id: u64,
    pub radar: Vec<f64>,
    pub image: Vec<f64>,
    /// Group id per point, local to the frame.
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub targets: Vec<LocalTarget<f64>>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Associates `frame` with its ground-truth boxes and encodes every
/// non-background candidate. `None` when no candidate survives.
pub fn prepare_sample(frame: &Frame, sim: &SimConfig, codec: &CodecConfig, augment: bool) -> Result<Option<Sample>> {
    let features = synth_features(frame, sim)?;
    let mut indices = Vec::new();
    let mut groups = Vec::new();
    let mut targets = Vec::new();
    let mut n_groups = 0;
    for mut set in associate(&frame.points, &frame.gt_boxes) {
        let Some(obj) = set.object_id.and_then(|id| frame.object(id)) else { continue };
        let center = (obj.center_r, obj.center_a);
        set.classify_against(&frame.points, center, codec);
        let mut any = false;
        for (i, class) in set.foreground() {
            if !augment && class != PointClass::Full {
                continue;
            }
            let (_, mask) = training_mask(class);
            let p = &frame.points[i];
            let t = encode_target((p.r, p.a), center, codec)?;
            targets.push(apply_axis_mask(t, mask, codec));
            indices.push(i);
            groups.push(n_groups);
            any = true;
        }
        if any {
            n_groups += 1;
        }
    }
    if indices.is_empty() {
        return Ok(None);
    }
    let (radar, image) = features.point_rows(frame, &indices);
    Ok(Some(Sample {
        frame_id: frame.frame_id,
        radar,
        image,
        groups,
        n_groups,
        targets,
    }))
}

/// Samples for all frames that yield candidates.
pub fn prepare_samples(frames: &[Frame], sim: &SimConfig, codec: &CodecConfig, augment: bool) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        if let Some(s) = prepare_sample(f, sim, codec, augment)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Several samples stacked with globally unique group ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub radar: Tensor<f64>,
    pub image: Tensor<f64>,
    pub groups: Vec<usize>,
    pub targets: Vec<LocalTarget<f64>>,
}

pub fn make_batch(samples: &[&Sample], arch: &ArchConfig) -> Result<Batch> {
    let n: usize = samples.iter().map(|s| s.len()).sum();
    let mut radar = Vec::with_capacity(n * arch.c_radar_in);
    let mut image = Vec::with_capacity(n * arch.c_image_in);
    let mut groups = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut offset = 0;
    for s in samples {
        radar.extend_from_slice(&s.radar);
        image.extend_from_slice(&s.image);
        groups.extend(s.groups.iter().map(|g| g + offset));
        targets.extend_from_slice(&s.targets);
        offset += s.n_groups;
    }
    Ok(Batch {
        radar: Tensor::from_vec(n, arch.c_radar_in, radar)?,
        image: Tensor::from_vec(n, arch.c_image_in, image)?,
        groups,
        targets,
    })
}

/// Loss graph handles; read values with [`LossNodes::values`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce_r: NodeId,
    pub ce_a: NodeId,
    /// Unweighted smooth-L1 mean.
    pub reg: NodeId,
    /// False when every axis of every point is masked.
    pub supervised: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce_r: f64,
    pub ce_a: f64,
    pub reg: f64,
}

impl LossNodes {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |id: NodeId| tape.value(id).data()[0].as_f64();
        LossValues {
            total: v(self.total),
            ce_r: v(self.ce_r),
            ce_a: v(self.ce_a),
            reg: v(self.reg),
        }
    }
}

/// `CE_range + CE_azimuth + alpha · SmoothL1`, each masked per axis.
/// The classification logits are laid out `[range | azimuth]`.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cls: NodeId,
    reg: NodeId,
    targets: &[LocalTarget<T>],
    alpha: T,
    codec: &CodecConfig,
) -> Result<LossNodes> {
    let n = targets.len();
    if tape.value(cls).rows() != n || tape.value(reg).shape() != (n, 2) {
        return Err(Error::Dimension {
            op: "compute_loss",
            left: tape.value(cls).shape(),
            right: (n, codec.cls_width()),
        });
    }
    let nr = codec.range_classes();
    let logits_r = tape.slice_cols(cls, 0, nr)?;
    let logits_a = tape.slice_cols(cls, nr, codec.cls_width())?;
    let r_t: Vec<usize> = targets.iter().map(|t| t.r_bin).collect();
    let a_t: Vec<usize> = targets.iter().map(|t| t.az_bin).collect();
    let r_m: Vec<bool> = targets.iter().map(|t| t.axis_mask[0]).collect();
    let a_m: Vec<bool> = targets.iter().map(|t| t.axis_mask[1]).collect();
    let ce_r = tape.softmax_cross_entropy(logits_r, &r_t, &r_m)?;
    let ce_a = tape.softmax_cross_entropy(logits_a, &a_t, &a_m)?;
    let mut res = Vec::with_capacity(2 * n);
    let mut mask = Vec::with_capacity(2 * n);
    for t in targets {
        res.push(t.residual.0);
        res.push(t.residual.1);
        mask.extend_from_slice(&t.axis_mask);
    }
    let res = Tensor::from_vec(n, 2, res)?;
    let sl = tape.smooth_l1(reg, &res, &mask)?;
    let weighted = tape.scale(sl, alpha);
    let ce = tape.add(ce_r, ce_a)?;
    let total = tape.add(ce, weighted)?;
    Ok(LossNodes {
        total,
        ce_r,
        ce_a,
        reg: sl,
        supervised: mask.iter().any(|&m| m),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(t: &TrainConfig) -> Self {
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Rejects the whole step, leaving params
/// and state untouched, if any gradient entry is non-finite.
pub fn adam_step<T: Scalar>(params: &mut Params<T>, grads: &Params<T>, state: &mut AdamState<T>, hyper: &AdamConfig) -> Result<()> {
    for (path, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite(path.clone()));
        }
    }
    for (path, p) in params.iter() {
        match grads.get(path) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                })
            }
            None => return Err(Error::config("adam_step", format!("no gradient for `{path}`"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (T::lit(hyper.lr), T::lit(hyper.eps));
    for (path, p) in params.iter_mut() {
        let g = grads.get(path).expect("checked above");
        let m = state.m.get_mut(path).expect("state mirrors params");
        let v = state.v.get_mut(path).expect("state mirrors params");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and gradients of one batch.
pub fn batch_gradients(params: &Params<f64>, batch: &Batch, arch: &ArchConfig, codec: &CodecConfig, alpha: f64) -> Result<(LossValues, bool, Params<f64>)> {
    let mut tape = Tape::new();
    let nodes = forward_on_tape(&mut tape, params, arch, batch.radar.clone(), batch.image.clone(), &batch.groups)?;
    let loss = compute_loss(&mut tape, nodes.cls, nodes.reg, &batch.targets, alpha, codec)?;
    let grads = tape.backward(loss.total)?;
    let mut out = Params::new();
    for (path, id) in &nodes.params {
        out.insert(path.clone(), grads.wrt(*id));
    }
    Ok((loss.values(&tape), loss.supervised, out))
}

/// Forward-only loss of one batch.
pub fn batch_loss(params: &Params<f64>, batch: &Batch, arch: &ArchConfig, codec: &CodecConfig, alpha: f64) -> Result<LossValues> {
    let mut tape = Tape::new();
    let nodes = forward_on_tape(&mut tape, params, arch, batch.radar.clone(), batch.image.clone(), &batch.groups)?;
    Ok(compute_loss(&mut tape, nodes.cls, nodes.reg, &batch.targets, alpha, codec)?.values(&tape))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub ce_r: f64,
    pub ce_a: f64,
    pub reg: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,ce_r,ce_a,reg";

    pub fn csv_row(&self) -> String {
        let val = self.val_loss.map_or(String::new(), |v| format!("{v}"));
        format!("{},{},{},{},{},{}", self.epoch, self.train_loss, val, self.ce_r, self.ce_a, self.reg)
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

/// Mean loss over `samples` in fixed batches, without gradients.
pub fn evaluate_loss(params: &Params<f64>, samples: &[Sample], exp: &ExperimentConfig) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(exp.train.batch_frames) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, &exp.arch)?;
        total += batch_loss(params, &batch, &exp.arch, &exp.codec, exp.train.alpha)?.total;
        count += 1;
    }
    Ok(Some(total / count as f64))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss (training loss when there is no validation
    /// split).
    pub best: Checkpoint,
    /// State after the final epoch, including optimizer moments.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Simulates the splits and trains from scratch.
pub fn train(exp: &ExperimentConfig) -> Result<TrainOutcome> {
    exp.validate()?;
    let train_frames = split_frames(exp, Split::Train)?;
    let val_frames = split_frames(exp, Split::Val)?;
    let train = prepare_samples(&train_frames, &exp.sim, &exp.codec, exp.train.augment_non_trivial)?;
    let val = prepare_samples(&val_frames, &exp.sim, &exp.codec, exp.train.augment_non_trivial)?;
    train_on(exp, &train, &val, None)
}

/// Trains on prepared samples. With `resume`, continues from the
/// checkpoint's epoch, parameters and optimizer state up to
/// `exp.train.epochs`.
pub fn train_on(exp: &ExperimentConfig, train: &[Sample], val: &[Sample], resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    exp.validate()?;
    let tc = &exp.train;
    if train.is_empty() {
        return Err(Error::config("train", "no frame yields a valid candidate set"));
    }
    let (mut params, mut adam, start_epoch) = match resume {
        Some(ck) => {
            ck.check_compatible(exp)?;
            let params = ck.params.cast::<f64>();
            let adam = ck.adam_state()?.ok_or_else(|| Error::Checkpoint {
                field: "optim",
                reason: "checkpoint has no optimizer state to resume from".into(),
            })?;
            (params, adam, ck.meta.epoch)
        }
        None => {
            let p = init_params::<f64>(&exp.arch, tc.seed)?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
    };
    let hyper = AdamConfig::from(tc);
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in start_epoch + 1..=tc.epochs {
        order.sort_unstable();
        StreamRng::new(tc.seed.wrapping_add(epoch as u64), stream::SHUFFLE).shuffle(&mut order);
        let (mut sum, mut ce_r, mut ce_a, mut reg) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_frames) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, &exp.arch)?;
            let (loss, supervised, grads) = batch_gradients(&params, &batch, &exp.arch, &exp.codec, tc.alpha)?;
            if !supervised {
                warn!("epoch {epoch}: skipping batch without supervised axes");
                continue;
            }
            if let Err(e) = adam_step(&mut params, &grads, &mut adam, &hyper) {
                warn!("epoch {epoch}: batch rejected: {e}");
                continue;
            }
            sum += loss.total;
            ce_r += loss.ce_r;
            ce_a += loss.ce_a;
            reg += loss.reg;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::config("train", format!("epoch {epoch} had no usable batch")));
        }
        let k = batches as f64;
        let val_loss = evaluate_loss(&params, val, exp)?;
        let entry = EpochLog {
            epoch,
            train_loss: sum / k,
            val_loss,
            ce_r: ce_r / k,
            ce_a: ce_a / k,
            reg: reg / k,
        };
        info!(
            "epoch {epoch}: train {:.5} val {}",
            entry.train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        log.push(entry);
        let score = val_loss.unwrap_or(entry.train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, Checkpoint::from_training(exp, &params, None, meta(exp, &entry, adam.step))));
        }
    }

    let last_entry = log.last().copied();
    let last_meta = match last_entry {
        Some(e) => meta(exp, &e, adam.step),
        None => resume.map(|c| c.meta.clone()).unwrap_or_else(|| CheckpointMeta::empty(exp)),
    };
    let last = Checkpoint::from_training(exp, &params, Some(&adam), last_meta);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, log })
}

fn meta(exp: &ExperimentConfig, e: &EpochLog, adam_step: u64) -> CheckpointMeta {
    CheckpointMeta {
        epoch: e.epoch,
        train_loss: e.train_loss,
        val_loss: e.val_loss,
        seed: exp.train.seed,
        head_layout: CheckpointMeta::head_layout(&exp.codec),
        adam_step,
    }
}
