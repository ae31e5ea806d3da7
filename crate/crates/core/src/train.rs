//! Three-stage curriculum: aggregation (A), personalization (B) and joint
//! fine-tuning (C).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lap_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{split, Identity};
use crate::error::{contract, Error, Result};
use crate::nets::{Binder, LapModel, Overrides, ParamStore, AGGREGATION_GROUPS, REFINEMENT_GROUPS};
use crate::objectives::{mask_filter, total_objective, LossKind};
use crate::optim::Adam;
use crate::render::{render, Camera};
use crate::synth::{read_json, Tier};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Stage::A),
            "B" | "b" => Ok(Stage::B),
            "C" | "c" => Ok(Stage::C),
            other => Err(contract(format!("unknown stage {other:?} (expected A, B or C)"))),
        }
    }
}

impl Stage {
    pub fn trains(self, group: &str) -> bool {
        match self {
            Stage::A => AGGREGATION_GROUPS.contains(&group),
            Stage::B => REFINEMENT_GROUPS.contains(&group),
            Stage::C => AGGREGATION_GROUPS.contains(&group) || REFINEMENT_GROUPS.contains(&group),
        }
    }

    /// Stage whose checkpoint must exist before this one starts.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::A => None,
            Stage::B => Some(Stage::A),
            Stage::C => Some(Stage::B),
        }
    }

    pub fn epochs(self, cfg: &TrainConfig) -> usize {
        match self {
            Stage::A => cfg.epochs_a,
            Stage::B => cfg.epochs_b,
            Stage::C => cfg.epochs_c,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// JSON written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub rejected: usize,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn read_sidecar(ckpt: &Path) -> Result<Sidecar> {
    read_json(&sidecar_path(ckpt))
}

pub fn checkpoint_path(out: &Path, stage: Stage, epoch: usize) -> PathBuf {
    out.join(format!("stage{stage}_epoch{epoch}.lapw"))
}

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Views dropped by the mask filter during the epoch.
    pub rejected: usize,
    /// Batches whose every sample was rejected.
    pub skipped_batches: usize,
    pub checkpoint: PathBuf,
}

impl EpochRecord {
    /// `Display` of f64 is the shortest exact round-trip form.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.stage, self.train_loss, self.val_loss, self.rejected
        )
    }
}

/// Loss of one identity's view set under `stage`. `masks` must already be
/// filtered.
pub fn stage_loss(
    model: &LapModel,
    p: &Binder,
    cam: &Camera,
    stage: Stage,
    images: &Tensor,
    masks: &Tensor,
    flip_weight: f64,
) -> Result<Tensor> {
    let n = images.dim(0);
    let agg = model.aggregate(p, images)?;
    let views = model.predict_views(p, images)?;
    let face = agg.face.broadcast(n)?;
    let objective = |kind, albedo: &Tensor, depth: &Tensor| -> Result<Tensor> {
        let r0 = render(albedo, depth, &views.light, &views.pose, cam, false)?;
        let r1 = render(albedo, depth, &views.light, &views.pose, cam, true)?;
        total_objective(kind, &r0, &r1, images, &views.sigmas, masks, flip_weight)
    };
    let aggregation = || objective(LossKind::Relaxed, &face.albedo, &face.depth);
    let personal = || -> Result<Tensor> {
        let r = model.refine(p, &face, images, Overrides::default())?;
        objective(LossKind::Recon, &r.albedo, &r.depth)
    };
    match stage {
        Stage::A => aggregation(),
        Stage::B => personal(),
        Stage::C => Ok(personal()?.add(&aggregation()?)?),
    }
}

/// Keeps the views whose mask passes the filter.
fn filter_views(id: &Identity, views: &[usize], min_face_fraction: f64) -> Result<(Vec<usize>, Option<(Tensor, Tensor)>)> {
    let mut keep = Vec::with_capacity(views.len());
    for &v in views {
        if mask_filter(&id.masks.narrow(0, v, 1)?, min_face_fraction) {
            keep.push(v);
        }
    }
    if keep.is_empty() {
        return Ok((keep, None));
    }
    let sel = id.select(&keep)?;
    Ok((keep, Some(sel)))
}

/// Mean stage loss over `ids` using every view of each identity, with all
/// weights frozen. Returns the loss and the number of rejected views.
pub fn evaluate(
    model: &LapModel,
    store: &ParamStore,
    cfg: &TrainConfig,
    stage: Stage,
    ids: &[&Identity],
) -> Result<(f64, usize)> {
    let cam = Camera::square(cfg.resolution)?;
    let p = Binder::frozen(store);
    let (mut sum, mut count, mut rejected) = (0.0, 0usize, 0usize);
    for id in ids {
        let all: Vec<usize> = (0..id.views()).collect();
        let (keep, sel) = filter_views(id, &all, cfg.min_face_fraction)?;
        rejected += all.len() - keep.len();
        if let Some((images, masks)) = sel {
            sum += stage_loss(model, &p, &cam, stage, &images, &masks, cfg.flip_weight)?.item()?;
            count += 1;
        }
    }
    let loss = if count == 0 { f64::NAN } else { sum / count as f64 };
    Ok((loss, rejected))
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage.index() << 40) ^ epoch as u64)
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) -> Result<()> {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => *a = a.add(&g)?,
            None => {
                acc.insert(k, g);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub store: ParamStore,
}

/// Weights a stage starts from: fresh for A without `resume`, otherwise the
/// checkpoint, whose stage must satisfy the prerequisite.
pub fn initial_weights(model: &LapModel, cfg: &TrainConfig, stage: Stage, resume: Option<&Path>) -> Result<ParamStore> {
    let mut store = model.init(cfg.seed)?;
    match (stage.prerequisite(), resume) {
        (Some(req), None) => {
            return Err(Error::Staging(format!(
                "stage {stage} needs a stage {req} checkpoint (pass --resume)"
            )))
        }
        (req, Some(path)) => {
            let side = read_sidecar(path)?;
            if let Some(req) = req {
                if side.stage < req {
                    return Err(Error::Staging(format!(
                        "stage {stage} needs a stage {req} checkpoint, {} holds stage {}",
                        path.display(),
                        side.stage
                    )));
                }
            }
            store.load_from(&ParamStore::load(path)?)?;
        }
        (None, None) => {}
    }
    Ok(store)
}

/// Runs every epoch of `stage`, writing a checkpoint, its sidecar and a
/// metrics row after each. `on_epoch` sees each record as it is written.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &[Identity],
    stage: Stage,
    resume: Option<&Path>,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("training needs at least one identity"));
    }
    if let Some(bad) = data.iter().find(|d| d.resolution() != cfg.resolution) {
        return Err(contract(format!(
            "{}: images are {}px, configuration expects {}px",
            bad.dir.display(),
            bad.resolution(),
            cfg.resolution
        )));
    }
    let model = LapModel::new(cfg.model())?;
    let mut store = initial_weights(&model, cfg, stage, resume)?;
    let cam = Camera::square(cfg.resolution)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_idx, val_idx) = split(data, cfg.val_fraction, cfg.seed);
    let val: Vec<&Identity> = val_idx.iter().map(|&i| &data[i]).collect();
    let trainable = |g: &str| stage.trains(g);
    let mut adam = Adam::new(cfg.adam());
    let epochs = stage.epochs(cfg);
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let tier = if stage == Stage::A && epoch > cfg.epochs_a - cfg.wild_epochs_a {
            Tier::Wild
        } else {
            Tier::Easy
        };
        let mut pool: Vec<usize> = train_idx.iter().copied().filter(|&i| data[i].tier() == tier).collect();
        if pool.is_empty() {
            pool = train_idx.clone();
        }
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        pool.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count, mut rejected, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for batch in pool.chunks(cfg.batch_size) {
            let mut acc = BTreeMap::new();
            let mut contributing = 0usize;
            for &i in batch {
                let id = &data[i];
                let max_n = cfg.max_views.min(id.views());
                let n = rng.random_range(1..=max_n);
                let mut order: Vec<usize> = (0..id.views()).collect();
                let (chosen, _) = order.partial_shuffle(&mut rng, n);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                let (keep, sel) = filter_views(id, &chosen, cfg.min_face_fraction)?;
                rejected += chosen.len() - keep.len();
                let Some((images, masks)) = sel else { continue };
                let tape = Tape::new();
                let p = Binder::new(&store, Some(&tape), &trainable);
                let loss = stage_loss(&model, &p, &cam, stage, &images, &masks, cfg.flip_weight)?;
                let grads = p.gradients(&tape.backward(&loss)?)?;
                accumulate(&mut acc, grads)?;
                loss_sum += loss.item()?;
                loss_count += 1;
                contributing += 1;
            }
            if contributing == 0 {
                skipped += 1;
                continue;
            }
            let scale = 1.0 / contributing as f64;
            let mean: BTreeMap<String, Tensor> = acc
                .into_iter()
                .map(|(k, g)| Ok((k, g.scale(scale)?)))
                .collect::<Result<_>>()?;
            adam.step(&mut store, &mean)?;
        }
        let (val_loss, val_rejected) = evaluate(&model, &store, cfg, stage, &val)?;
        let train_loss = if loss_count == 0 { f64::NAN } else { loss_sum / loss_count as f64 };
        let ckpt = checkpoint_path(out, stage, epoch);
        store.save(&ckpt)?;
        let side = Sidecar {
            stage,
            epoch,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.to_text(),
            train_loss,
            val_loss,
            rejected: rejected + val_rejected,
        };
        let side_path = sidecar_path(&ckpt);
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::format(&side_path, e.to_string()))?;
        fs::write(&side_path, text + "\n").map_err(|e| Error::io(&side_path, e))?;
        let record = EpochRecord {
            epoch,
            stage,
            train_loss,
            val_loss,
            rejected: rejected + val_rejected,
            skipped_batches: skipped,
            checkpoint: ckpt,
        };
        append_metrics(out, &record)?;
        on_epoch(&record);
        records.push(record);
    }
    Ok(TrainSummary { records, store })
}

fn append_metrics(out: &Path, r: &EpochRecord) -> Result<()> {
    let path = out.join(METRICS_FILE);
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,stage,train_loss,val_loss,rejected\n");
    }
    text.push_str(&r.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Validation identities of `data` under `cfg`'s split.
pub fn validation_set<'a>(cfg: &TrainConfig, data: &'a [Identity]) -> Vec<&'a Identity> {
    split(data, cfg.val_fraction, cfg.seed).1.into_iter().map(|i| &data[i]).collect()
}
