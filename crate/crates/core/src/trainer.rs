//! Training regimes: supervised (source or target labels), contrastive
//! pretraining followed by supervised finetuning, and joint semi-supervised
//! training. All randomness comes from streams derived from the config seed
//! and the step or epoch index, so runs are reproducible and resumable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::losses::{log_dice_loss_grad, ntxent_loss_grad, simsiam_loss_grad, total_loss, ContrastiveKind, LossConfig};
use crate::metrics;
use crate::model::{
    export_params, import_params, read_checkpoint, write_checkpoint, CheckpointFile, ModelConfig, Network, TensorBlob,
    UNet,
};
use crate::nn::{c, Adam, AdamState, MomentPair, ParamSet, Pass, Real};
use crate::pairgen::{pair_augm, pair_comb, pair_slice, AugmConfig, ContrastivePair, SliceSample, SliceSigma};
use crate::par;
use crate::phantom::{Corpus, DatasetSplit, DomainTag, SliceRef, Volume};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Supervised on labeled source slices.
    Baseline,
    /// Supervised on labeled target slices.
    UpperBound,
    /// Contrastive pretraining on target volumes, then supervised finetuning
    /// on source labels.
    PretrainFinetune,
    /// Supervised and contrastive losses optimized together.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Augm,
    Slice,
    Comb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub pair_kind: PairKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_labeled: usize,
    pub batch_pairs_per_domain: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Fraction of the labeled training slices used.
    pub labeled_fraction: f64,
    /// Optimizer steps of contrastive pretraining (pretrain_finetune only).
    #[serde(default)]
    pub pretrain_steps: usize,
    #[serde(default)]
    pub augm: AugmConfig,
    /// Nearby-slice spread; required by the slice and comb pair kinds.
    #[serde(default)]
    pub sigma: Option<SliceSigma>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Joint,
            pair_kind: PairKind::Comb,
            epochs: 200,
            lr: 1e-3,
            batch_labeled: 8,
            batch_pairs_per_domain: 8,
            seed: 0,
            loss: LossConfig::default(),
            labeled_fraction: 1.0,
            pretrain_steps: 0,
            augm: AugmConfig::default(),
            sigma: Some(SliceSigma { sigma_um: 250.0 }),
        }
    }
}

impl TrainConfig {
    pub fn uses_contrastive(&self) -> bool {
        matches!(self.regime, Regime::Joint | Regime::PretrainFinetune)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        self.loss.validate()?;
        self.augm.validate()?;
        if self.uses_contrastive() {
            if self.batch_pairs_per_domain == 0 {
                return bad("batch_pairs_per_domain must be >= 1".into());
            }
            if self.loss.contrastive_kind == ContrastiveKind::Clr && self.batch_pairs_per_domain < 2 {
                return bad(format!(
                    "NT-Xent needs batch_pairs_per_domain >= 2, got {}",
                    self.batch_pairs_per_domain
                ));
            }
            match (self.pair_kind, &self.sigma) {
                (PairKind::Slice | PairKind::Comb, None) => {
                    return bad("sigma is required for slice and comb pairs".into())
                }
                (_, Some(s)) => s.validate()?,
                _ => {}
            }
            if self.regime == Regime::PretrainFinetune && self.pretrain_steps == 0 {
                return bad("pretrain_steps must be >= 1 for pretrain_finetune".into());
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Epoch index, or optimizer step for contrastive pretraining.
    pub epoch: usize,
    pub split: String,
    pub class: String,
    pub metric: String,
    pub value: f64,
}

impl LogLine {
    fn new(epoch: usize, split: &str, class: &str, metric: &str, value: f64) -> Self {
        Self {
            epoch,
            split: split.into(),
            class: class.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// JSON lines, one object per log entry.
pub fn log_to_jsonl(log: &[LogLine]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log line serializes") + "\n")
        .collect()
}

/// How many mask reads the trainer performed, by domain.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAudit {
    pub source: usize,
    pub target: usize,
}

/// The selected model with its validation scores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub val_dice_per_class: Vec<f64>,
    pub mean_val_dice: f64,
}

impl Checkpoint {
    pub fn to_file(&self) -> CheckpointFile {
        CheckpointFile {
            meta: json!({
                "kind": "model",
                "model": self.model,
                "train": self.train,
                "class_names": self.class_names,
                "epoch": self.epoch,
                "val_dice_per_class": self.val_dice_per_class,
                "mean_val_dice": self.mean_val_dice,
                "with_head": self.net.head.is_some(),
                "with_predictor": self.net.predictor.is_some(),
            }),
            tensors: export_params(&self.net, ""),
        }
    }

    pub fn from_file(file: &CheckpointFile) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            model: ModelConfig,
            train: TrainConfig,
            class_names: Vec<String>,
            epoch: usize,
            val_dice_per_class: Vec<f64>,
            mean_val_dice: f64,
            with_head: bool,
            with_predictor: bool,
        }
        let m: Meta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::MalformedHeader(format!("checkpoint metadata: {e}")))?;
        if m.kind != "model" {
            return Err(Error::MalformedHeader(format!(
                "expected a model checkpoint, found {:?}",
                m.kind
            )));
        }
        let mut net = Network::build(&m.model, 0, m.with_head, m.with_predictor)?;
        import_params(&mut net, "", &file.tensors)?;
        Ok(Self {
            net,
            model: m.model,
            train: m.train,
            class_names: m.class_names,
            epoch: m.epoch,
            val_dice_per_class: m.val_dice_per_class,
            mean_val_dice: m.mean_val_dice,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&read_checkpoint(path)?)
    }
}

/// Resume and interruption controls.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where the end-of-epoch training state is written.
    pub state_path: Option<PathBuf>,
    /// Continue from `state_path` if it exists.
    pub resume: bool,
    /// Stop after this many epochs have completed (used to emulate an
    /// interrupted run).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
    pub audit: LabelAudit,
    /// False when the run stopped early because of `stop_after_epochs`.
    pub completed: bool,
}

/// Borrowed data plus the label-access audit.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a DatasetSplit,
    audit: Mutex<LabelAudit>,
}

impl<'a> TrainData<'a> {
    pub fn new(corpus: &'a Corpus, split: &'a DatasetSplit) -> Self {
        Self {
            corpus,
            split,
            audit: Mutex::new(LabelAudit::default()),
        }
    }

    /// Load labeled slices, recording each mask read.
    fn labeled(&self, refs: &[SliceRef]) -> Result<Vec<SliceSample>> {
        let out = refs
            .iter()
            .map(|r| self.corpus.labeled_slice(r))
            .collect::<Result<Vec<_>>>()?;
        let mut a = self.audit.lock().unwrap();
        for s in &out {
            match s.domain {
                DomainTag::Source => a.source += 1,
                DomainTag::Target => a.target += 1,
            }
        }
        Ok(out)
    }

    fn volumes(&self, ids: &[String]) -> Result<Vec<&'a Volume>> {
        ids.iter().map(|id| self.corpus.volume(id)).collect()
    }

    pub fn audit(&self) -> LabelAudit {
        self.audit.lock().unwrap().clone()
    }
}

/// Nested subset: a seeded permutation prefix of length
/// `floor(fraction * n)`, returned in the original order.
pub fn labeled_subset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = (fraction * items.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Infeasible {
            what: format!("labeled slices at fraction {fraction}"),
            required: 1,
            available: 0,
        });
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "labeled_fraction", 0));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}

/// Stack images into `[N, 1, H, W]`.
pub fn image_batch<T: Real>(images: &[&Array2<f32>]) -> Array4<T> {
    let (h, w) = images[0].dim();
    let mut x = Array4::<T>::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        x.slice_mut(s![i, 0, .., ..])
            .assign(&img.mapv(|v| T::from_f32(v).unwrap()));
    }
    x
}

/// Stack labeled samples into images `[N, 1, H, W]` and masks `[N, C, H, W]`.
pub fn labeled_batch<T: Real>(samples: &[&SliceSample]) -> Result<(Array4<T>, Array4<T>)> {
    let x = image_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let first = samples[0]
        .mask
        .as_ref()
        .ok_or_else(|| Error::Invalid("labeled batch contains a slice without mask".into()))?;
    let (cls, h, w) = first.dim();
    let mut y = Array4::<T>::zeros((samples.len(), cls, h, w));
    for (i, smp) in samples.iter().enumerate() {
        let m = smp
            .mask
            .as_ref()
            .ok_or_else(|| Error::Invalid("labeled batch contains a slice without mask".into()))?;
        y.slice_mut(s![i, .., .., ..])
            .assign(&m.mapv(|v| T::from_u8(v).unwrap()));
    }
    Ok((x, y))
}

/// Log-Dice loss of one labeled batch; `scale * dL` is accumulated into
/// `grad`.
pub fn supervised_loss_grad<T: Real>(
    unet: &UNet<T>,
    grad: &mut UNet<T>,
    x: &Array4<T>,
    y: &Array4<T>,
    eps: f64,
    scale: f64,
    pass: &mut Pass<'_>,
) -> Result<T> {
    let (enc, ecache) = unet.encode(x, pass)?;
    let (probs, dcache) = unet.decode(&enc, pass);
    let (value, mut dp) = log_dice_loss_grad(&probs, y, eps)?;
    dp *= c::<T>(scale);
    let (dskips, dh) = unet.decode_backward(&dcache, &dp, grad);
    unet.encode_backward(&ecache, Some(dskips), dh, grad);
    Ok(value)
}

/// Contrastive loss of one batch of pairs (`xp[i]`, `xpp[i]`); `scale * dL`
/// is accumulated into the encoder, head and predictor of `grad`.
pub fn contrastive_loss_grad<T: Real>(
    net: &Network<T>,
    grad: &mut Network<T>,
    xp: &Array4<T>,
    xpp: &Array4<T>,
    loss: &LossConfig,
    scale: f64,
    pass: &mut Pass<'_>,
) -> Result<T> {
    let n = xp.dim().0;
    let head = net
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("contrastive training needs a projection head".into()))?;
    let x = concatenate(Axis(0), &[xp.view(), xpp.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let (enc, ecache) = net.unet.encode(&x, pass)?;
    let (z, hcache) = head.forward(&enc.h);
    let zp = z.slice(s![..n, ..]).to_owned();
    let zpp = z.slice(s![n.., ..]).to_owned();
    let (value, dzp, dzpp) = match loss.contrastive_kind {
        ContrastiveKind::Clr => ntxent_loss_grad(&zp, &zpp, loss.tau, loss.denominator_mode)?,
        ContrastiveKind::Siam => {
            let q = net
                .predictor
                .as_ref()
                .ok_or_else(|| Error::Config("siam training needs a predictor".into()))?;
            let mut qg = q.clone();
            qg.fill_zero();
            let g = simsiam_loss_grad(&zp, &zpp, q, &mut qg)?;
            qg.scale(c(scale));
            grad.predictor
                .as_mut()
                .expect("gradient network mirrors the model")
                .add_assign_from(&qg);
            (g.value, g.d_zp, g.d_zpp)
        }
    };
    let mut dz = concatenate(Axis(0), &[dzp.view(), dzpp.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    dz *= c::<T>(scale);
    let dh = head.backward(
        &hcache,
        &dz,
        grad.head.as_mut().expect("gradient network mirrors the model"),
    );
    net.unet.encode_backward(&ecache, None, dh, &mut grad.unet);
    Ok(value)
}

fn zeros_like<T: Real>(net: &Network<T>) -> Network<T> {
    let mut g = net.clone();
    g.fill_zero();
    g
}

fn check_grad<T: Real>(grad: &Network<T>) -> Result<()> {
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// Draws contrastive pairs from a set of volumes.
struct PairSource<'a> {
    volumes: Vec<&'a Volume>,
    cfg: &'a TrainConfig,
    label: &'static str,
}

impl PairSource<'_> {
    fn draw(&self, step: u64) -> Result<(Array4<f32>, Array4<f32>)> {
        if self.volumes.is_empty() {
            return Err(Error::Invalid(format!("no volumes available for {} pairs", self.label)));
        }
        let n = self.cfg.batch_pairs_per_domain;
        let step_seed = rng::derive(self.cfg.seed, self.label, step);
        let pairs = par::map_range(n, |i| -> Result<ContrastivePair> {
            let mut r = rng::stream(step_seed, "pair", i as u64);
            let vol = self.volumes[r.random_range(0..self.volumes.len())];
            let b = r.random_range(0..vol.depth());
            let sigma = || self.cfg.sigma.ok_or_else(|| Error::Config("sigma is required".into()));
            match self.cfg.pair_kind {
                PairKind::Augm => Ok(pair_augm(&SliceSample::from_volume(vol, b)?, &self.cfg.augm, &mut r)),
                PairKind::Slice => pair_slice(vol, b, sigma()?, &mut r),
                PairKind::Comb => pair_comb(vol, b, sigma()?, &self.cfg.augm, &mut r),
            }
        });
        let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
        let xp = image_batch(&pairs.iter().map(|p| &p.first.image).collect::<Vec<_>>());
        let xpp = image_batch(&pairs.iter().map(|p| &p.second.image).collect::<Vec<_>>());
        Ok((xp, xpp))
    }
}

/// Per-class mean validation Dice of an evaluation-mode forward pass.
pub fn validation_dice(unet: &UNet<f32>, val: &[SliceSample], num_classes: usize) -> Result<Vec<f64>> {
    let preds = metrics::predict(unet, val, metrics::EVAL_BATCH)?;
    let mut sums = vec![0.0; num_classes];
    for (p, s) in preds.iter().zip(val) {
        let gt = s.mask.as_ref().expect("validation slices carry masks");
        for (cls, sum) in sums.iter_mut().enumerate() {
            *sum += metrics::dice(p.index_axis(Axis(0), cls), gt.index_axis(Axis(0), cls))?;
        }
    }
    Ok(sums.into_iter().map(|v| v / val.len().max(1) as f64).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mutable state of the epoch loop; also what a resume file stores.
struct LoopState {
    net: Network<f32>,
    adam: Adam,
    next_epoch: usize,
    step: u64,
    best: Option<(Network<f32>, usize, Vec<f64>)>,
    log: Vec<LogLine>,
}

fn adam_blobs(state: &AdamState) -> Vec<TensorBlob> {
    let mut out = Vec::new();
    for (path, mp) in &state.moments {
        out.push(TensorBlob::F64 {
            path: format!("adam.m.{path}"),
            data: mp.m.clone(),
        });
        out.push(TensorBlob::F64 {
            path: format!("adam.v.{path}"),
            data: mp.v.clone(),
        });
    }
    out
}

fn save_state(path: &Path, st: &LoopState) -> Result<()> {
    let mut tensors = export_params(&st.net, "net");
    let best_meta = st.best.as_ref().map(|(net, epoch, dice)| {
        tensors.extend(export_params(net, "best"));
        json!({"epoch": epoch, "val_dice_per_class": dice})
    });
    tensors.extend(adam_blobs(&st.adam.state));
    // Exported parameters are f32 and training runs in f32, so the state
    // round-trips exactly.
    let meta = json!({
        "kind": "train_state",
        "next_epoch": st.next_epoch,
        "step": st.step,
        "adam_step": st.adam.state.step,
        "best": best_meta,
        "log": st.log,
    });
    write_checkpoint(path, &CheckpointFile { meta, tensors })
}

fn load_state(path: &Path, template: &Network<f32>, lr: f64) -> Result<LoopState> {
    #[derive(Deserialize)]
    struct Best {
        epoch: usize,
        val_dice_per_class: Vec<f64>,
    }
    #[derive(Deserialize)]
    struct Meta {
        kind: String,
        next_epoch: usize,
        step: u64,
        adam_step: u64,
        best: Option<Best>,
        log: Vec<LogLine>,
    }
    let file = read_checkpoint(path)?;
    let m: Meta = serde_json::from_value(file.meta.clone())
        .map_err(|e| Error::MalformedHeader(format!("training state: {e}")))?;
    if m.kind != "train_state" {
        return Err(Error::MalformedHeader(format!(
            "expected a training state, found {:?}",
            m.kind
        )));
    }
    let mut net = template.clone();
    import_params(&mut net, "net", &file.tensors)?;
    let best = match m.best {
        Some(b) => {
            let mut bn = template.clone();
            import_params(&mut bn, "best", &file.tensors)?;
            Some((bn, b.epoch, b.val_dice_per_class))
        }
        None => None,
    };
    let mut adam = Adam::new(lr);
    adam.state.step = m.adam_step;
    let mut moments: BTreeMap<String, MomentPair> = BTreeMap::new();
    for t in &file.tensors {
        if let TensorBlob::F64 { path, data } = t {
            if let Some(p) = path.strip_prefix("adam.m.") {
                moments.entry(p.to_string()).or_default().m = data.clone();
            } else if let Some(p) = path.strip_prefix("adam.v.") {
                moments.entry(p.to_string()).or_default().v = data.clone();
            }
        }
    }
    adam.state.moments = moments;
    Ok(LoopState {
        net,
        adam,
        next_epoch: m.next_epoch,
        step: m.step,
        best,
        log: m.log,
    })
}

struct Fit<'d, 'a> {
    model: &'d ModelConfig,
    cfg: &'d TrainConfig,
    data: &'d TrainData<'a>,
    train: Vec<SliceSample>,
    val: Vec<SliceSample>,
    /// Present for joint training: (source, target) pair generators.
    pairs: Option<(PairSource<'a>, PairSource<'a>)>,
    class_names: Vec<String>,
}

impl Fit<'_, '_> {
    fn step(&self, st: &mut LoopState, batch: &[&SliceSample]) -> Result<f64> {
        let (x, y) = labeled_batch::<f32>(batch)?;
        let mut grad = zeros_like(&st.net);
        let mut r = rng::stream(self.cfg.seed, "train.step", st.step);
        let mut pass = Pass::Train(&mut r);
        let eps = self.cfg.loss.eps;
        let total = match &self.pairs {
            None => {
                let v = supervised_loss_grad(&st.net.unet, &mut grad.unet, &x, &y, eps, 1.0, &mut pass)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite("supervised loss".into()));
                }
                v
            }
            Some((src, tgt)) => {
                let lambda = self.cfg.loss.lambda;
                let sup = supervised_loss_grad(&st.net.unet, &mut grad.unet, &x, &y, eps, lambda, &mut pass)?;
                let (sp, spp) = src.draw(st.step)?;
                let cs = contrastive_loss_grad(&st.net, &mut grad, &sp, &spp, &self.cfg.loss, 0.5, &mut pass)?;
                let (tp, tpp) = tgt.draw(st.step)?;
                let ct = contrastive_loss_grad(&st.net, &mut grad, &tp, &tpp, &self.cfg.loss, 0.5, &mut pass)?;
                total_loss(cs, ct, sup, lambda)?
            }
        };
        check_grad(&grad)?;
        st.adam.step(st.net.tensors_mut(""), grad.tensors(""));
        st.step += 1;
        Ok(total as f64)
    }

    fn run(&self, mut st: LoopState, opts: &RunOptions) -> Result<TrainOutcome> {
        let batch = self.cfg.batch_labeled;
        while st.next_epoch < self.cfg.epochs {
            let epoch = st.next_epoch;
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut rng::stream(self.cfg.seed, "epoch", epoch as u64));
            let mut losses = Vec::new();
            for chunk in order.chunks(batch) {
                let samples: Vec<&SliceSample> = chunk.iter().map(|&i| &self.train[i]).collect();
                losses.push(self.step(&mut st, &samples)?);
            }
            st.log.push(LogLine::new(
                epoch,
                "train",
                metrics::ALL_CLASSES,
                "loss",
                mean(&losses),
            ));
            let dice = validation_dice(&st.net.unet, &self.val, self.class_names.len())?;
            for (name, d) in self.class_names.iter().zip(&dice) {
                st.log.push(LogLine::new(epoch, "val", name, "dice", *d));
            }
            let m = mean(&dice);
            st.log.push(LogLine::new(epoch, "val", metrics::ALL_CLASSES, "dice", m));
            log::info!("epoch {epoch}: loss {:.4}, val dice {:.4}", mean(&losses), m);
            if st.best.as_ref().is_none_or(|(_, _, b)| m > mean(b)) {
                st.best = Some((st.net.clone(), epoch, dice));
            }
            st.next_epoch += 1;
            if let Some(p) = &opts.state_path {
                save_state(p, &st)?;
            }
            if opts.stop_after_epochs.is_some_and(|n| st.next_epoch >= n) && st.next_epoch < self.cfg.epochs {
                return Ok(self.finish(st, false));
            }
        }
        Ok(self.finish(st, true))
    }

    fn finish(&self, st: LoopState, completed: bool) -> TrainOutcome {
        let (net, epoch, dice) = st.best.expect("at least one epoch ran");
        TrainOutcome {
            checkpoint: Checkpoint {
                net,
                model: self.model.clone(),
                train: self.cfg.clone(),
                class_names: self.class_names.clone(),
                epoch,
                mean_val_dice: mean(&dice),
                val_dice_per_class: dice,
            },
            log: st.log,
            audit: self.data.audit(),
            completed,
        }
    }
}

fn class_names(corpus: &Corpus) -> Vec<String> {
    corpus
        .volumes
        .values()
        .next()
        .map(|(_, m)| m.class_names.clone())
        .unwrap_or_default()
}

fn fresh_or_resumed(net: Network<f32>, cfg: &TrainConfig, log: Vec<LogLine>, opts: &RunOptions) -> Result<LoopState> {
    if opts.resume {
        if let Some(p) = opts.state_path.as_ref().filter(|p| p.exists()) {
            log::info!("resuming from {}", p.display());
            return load_state(p, &net, cfg.lr);
        }
    }
    Ok(LoopState {
        net,
        adam: Adam::new(cfg.lr),
        next_epoch: 0,
        step: 0,
        best: None,
        log,
    })
}

fn supervised_fit<'d, 'a>(
    model: &'d ModelConfig,
    cfg: &'d TrainConfig,
    data: &'d TrainData<'a>,
    train_refs: &[SliceRef],
    val_refs: &[SliceRef],
) -> Result<Fit<'d, 'a>> {
    if train_refs.is_empty() {
        return Err(Error::Invalid("no labeled training slices for this regime".into()));
    }
    if val_refs.is_empty() {
        return Err(Error::Invalid("no labeled validation slices for this regime".into()));
    }
    let train_refs = labeled_subset(train_refs, cfg.labeled_fraction, cfg.seed)?;
    Ok(Fit {
        model,
        cfg,
        data,
        train: data.labeled(&train_refs)?,
        val: data.labeled(val_refs)?,
        pairs: None,
        class_names: class_names(data.corpus),
    })
}

/// Supervised training on the labeled source slices (or, for the upper-bound
/// regime, the labeled target slices). The returned checkpoint is the epoch
/// with the highest mean validation Dice, earliest on ties.
pub fn train_supervised(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Network::build(model, cfg.seed, false, false)?;
    finetune_from(net, model, cfg, data, Vec::new(), opts)
}

fn finetune_from(
    net: Network<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    log: Vec<LogLine>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let (tr, va) = match cfg.regime {
        Regime::UpperBound => (&data.split.upper_train, &data.split.upper_val),
        _ => (&data.split.labeled_train, &data.split.labeled_val),
    };
    let fit = supervised_fit(model, cfg, data, tr, va)?;
    let st = fresh_or_resumed(net, cfg, log, opts)?;
    fit.run(st, opts)
}

/// Contrastive-only training of encoder, head (and predictor) on pairs from
/// the unlabeled target volumes. The decoder is never touched.
pub fn pretrain_contrastive(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<(Network<f32>, Vec<LogLine>)> {
    cfg.validate()?;
    let siam = cfg.loss.contrastive_kind == ContrastiveKind::Siam;
    let mut net = Network::build(model, cfg.seed, true, siam)?;
    let pairs = PairSource {
        volumes: data.volumes(&data.split.unlabeled_target)?,
        cfg,
        label: "pairs.pretrain",
    };
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    for step in 0..cfg.pretrain_steps {
        let (xp, xpp) = pairs.draw(step as u64)?;
        let mut grad = zeros_like(&net);
        let mut r = rng::stream(cfg.seed, "pretrain.step", step as u64);
        let v = contrastive_loss_grad(&net, &mut grad, &xp, &xpp, &cfg.loss, 1.0, &mut Pass::Train(&mut r))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("contrastive loss".into()));
        }
        check_grad(&grad)?;
        adam.step(net.contrastive_tensors_mut(), grad.contrastive_tensors());
        log.push(LogLine::new(step, "pretrain", metrics::ALL_CLASSES, "loss", v as f64));
    }
    Ok((net, log))
}

/// Copy the encoder of `pretrained` into a fresh supervised network (decoder
/// initialized as in [`train_supervised`]) and train on the source labels.
pub fn finetune(
    pretrained: &Network<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    log: Vec<LogLine>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let mut net = Network::build(model, cfg.seed, false, false)?;
    if pretrained.unet.cfg != *model {
        return Err(Error::Shape("pretrained network has a different topology".into()));
    }
    net.unet.encoder = pretrained.unet.encoder.clone();
    finetune_from(net, model, cfg, data, log, opts)
}

/// Joint training: every step combines a labeled source batch with
/// contrastive pairs from unlabeled source and target volumes.
pub fn train_joint(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let siam = cfg.loss.contrastive_kind == ContrastiveKind::Siam;
    let net = Network::build(model, cfg.seed, true, siam)?;
    let mut fit = supervised_fit(model, cfg, data, &data.split.labeled_train, &data.split.labeled_val)?;
    fit.pairs = Some((
        PairSource {
            volumes: data.volumes(&data.split.unlabeled_source)?,
            cfg,
            label: "pairs.source",
        },
        PairSource {
            volumes: data.volumes(&data.split.unlabeled_target)?,
            cfg,
            label: "pairs.target",
        },
    ));
    let st = fresh_or_resumed(net, cfg, Vec::new(), opts)?;
    fit.run(st, opts)
}

/// Dispatch on `cfg.regime`.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &TrainData<'_>, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    match cfg.regime {
        Regime::Baseline | Regime::UpperBound => train_supervised(model, cfg, data, opts),
        Regime::Joint => train_joint(model, cfg, data, opts),
        Regime::PretrainFinetune => {
            let resuming = opts.resume && opts.state_path.as_ref().is_some_and(|p| p.exists());
            if resuming {
                // The saved state already holds the finetuned encoder.
                let net = Network::build(model, cfg.seed, false, false)?;
                return finetune_from(net, model, cfg, data, Vec::new(), opts);
            }
            let (pre, log) = pretrain_contrastive(model, cfg, data)?;
            finetune(&pre, model, cfg, data, log, opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_is_nested_and_sized() {
        let items: Vec<usize> = (0..37).collect();
        let half = labeled_subset(&items, 0.5, 4).unwrap();
        let quarter = labeled_subset(&items, 0.25, 4).unwrap();
        assert_eq!(half.len(), 18);
        assert_eq!(quarter.len(), 9);
        assert!(quarter.iter().all(|v| half.contains(v)));
        assert_eq!(labeled_subset(&items, 1.0, 4).unwrap(), items);
        assert!(labeled_subset(&items, 0.0, 4).is_err());
        assert!(labeled_subset(&items, 1.5, 4).is_err());
    }

    #[test]
    fn clr_rejects_single_pair_batches() {
        let cfg = TrainConfig {
            batch_pairs_per_domain: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let base = TrainConfig {
            regime: Regime::Baseline,
            ..cfg
        };
        assert!(base.validate().is_ok());
    }

    #[test]
    fn slice_pairs_need_sigma() {
        let cfg = TrainConfig {
            sigma: None,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            pair_kind: PairKind::Augm,
            ..cfg
        };
        assert!(cfg.validate().is_ok());
    }
}
