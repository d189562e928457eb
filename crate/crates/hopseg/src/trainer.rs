//! Two-phase training protocol.
//!
//! Phase one pretrains the full segmentation model (memory included) on
//! labeled source scenes with cross-entropy only. Phase two freezes the
//! retrieval memory and walks the curriculum stages nearest-first; each
//! stage mixes pseudo-labeled near images into the labeled pool and
//! alternates a segmentation step against a discriminator step.
//!
//! Every run is a resumable state machine: the trainer state blob carries
//! parameters, optimizer velocities, sampler positions, and the current
//! pseudo-label pool, so an interrupted run continues bitwise-identically
//! to an uninterrupted one.
//!
//! Losses are raw sums over locations, so their magnitudes scale with the
//! image area; the update step absorbs that scale by normalizing each
//! image's gradient contribution by its location count (and the batch
//! size). The configured learning rates therefore act on per-location
//! mean gradients and stay meaningful across image sizes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::curriculum::{fake_source_ids, materialize_fake_source, Curriculum, FakeSourceSet};
use crate::error::{Error, Result};
use crate::model::{
    ce_grad, disc_training_grads, seg_training_grads, DiscConfig, Discriminator, HopfieldSpec,
    SegConfig, SegModel,
};
use crate::nn::{poly_lr, sgd_momentum_step};
use crate::raster::Image;
use crate::seed::{derive_seed, seeded_rng};
use crate::synthdata::{load_split, Manifest, Split};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "trainer_state.ckpt";
pub const PRETRAIN_CKPT: &str = "checkpoint_pretrain.ckpt";
pub const FINAL_CKPT: &str = "checkpoint_final.ckpt";

pub fn stage_ckpt(j: usize) -> String {
    format!("checkpoint_stage_{j}.ckpt")
}

/// Everything the protocol needs to run; every field has a default so an
/// empty config file is a valid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_adv: f64,
    pub beta: f64,
    pub k: usize,
    pub tau: f64,
    pub memory_size: usize,
    pub similarity_dim: usize,
    pub hidden_channels: Vec<usize>,
    pub feature_dim: usize,
    pub cls: usize,
    pub leaky_slope: f64,
    pub disc_hidden: Vec<usize>,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub iters_pretrain: usize,
    pub iters_per_stage: usize,
    pub batch: usize,
    pub seed: u64,
    pub no_hopfield: bool,
    pub no_curriculum: bool,
    pub no_freeze: bool,
    /// Write a resumable state blob every this many iterations (0 = only
    /// at phase boundaries).
    pub checkpoint_every: usize,
    /// Stop after this many completed iterations across both phases,
    /// leaving a resumable state behind. Testing hook.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_adv: 0.001,
            beta: 0.09,
            k: 3,
            tau: 1.0,
            memory_size: 64,
            similarity_dim: 16,
            hidden_channels: vec![16, 32],
            feature_dim: 16,
            cls: 4,
            leaky_slope: 0.1,
            disc_hidden: vec![8],
            lr_seg: 2.5e-4,
            lr_disc: 1e-4,
            momentum: 0.9,
            poly_power: 0.9,
            iters_pretrain: 400,
            iters_per_stage: 100,
            batch: 1,
            seed: 0,
            no_hopfield: false,
            no_curriculum: false,
            no_freeze: false,
            checkpoint_every: 0,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_seg", self.lr_seg),
            ("lr_disc", self.lr_disc),
            ("tau", self.tau),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda_adv must be finite and >= 0, got {}",
                self.lambda_adv
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Parameter(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.k == 0 || self.batch == 0 || self.memory_size == 0 || self.similarity_dim == 0 {
            return Err(Error::Parameter(
                "k, batch, memory_size, and similarity_dim must all be at least 1".into(),
            ));
        }
        if self.cls < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.cls)));
        }
        if self.feature_dim == 0 || self.hidden_channels.iter().any(|&c| c == 0) {
            return Err(Error::Parameter("model channel widths must be nonzero".into()));
        }
        Ok(())
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            in_channels: 3,
            hidden_channels: self.hidden_channels.clone(),
            feature_dim: self.feature_dim,
            cls: self.cls,
            leaky_slope: self.leaky_slope,
            hopfield: if self.no_hopfield {
                None
            } else {
                Some(HopfieldSpec {
                    memory_size: self.memory_size,
                    similarity_dim: self.similarity_dim,
                    tau: self.tau,
                })
            },
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            in_channels: self.cls,
            hidden_channels: self.disc_hidden.clone(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn disc_seed(&self) -> u64 {
        derive_seed(self.seed, "disc")
    }
}

/// In-memory dataset view for training: labeled source scenes plus
/// unlabeled compound images keyed by manifest id.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Vec<Image>,
    pub compound: Vec<(String, Image)>,
}

impl TrainData {
    pub fn from_dataset(root: &Path, manifest: &Manifest) -> Result<Self> {
        let source = load_split(root, manifest, Split::Source, true)?;
        let images = load_split(root, manifest, Split::Compound, false)?;
        let compound = manifest
            .split_entries(Split::Compound)
            .zip(images)
            .map(|(e, img)| (e.id.clone(), img))
            .collect();
        let data = TrainData { source, compound };
        data.validate()?;
        Ok(data)
    }

    /// The training-path label discipline: source images must carry labels,
    /// compound images must not.
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::InvalidInput("training needs at least one source image".into()));
        }
        if let Some(i) = self.source.iter().position(|img| img.labels.is_none()) {
            return Err(Error::InvalidInput(format!("source image {i} has no labels")));
        }
        if let Some((id, _)) = self.compound.iter().find(|(_, img)| img.labels.is_some()) {
            return Err(Error::State(format!(
                "compound image {id} carries ground-truth labels into the training path"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Adapt,
    Done,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
            Phase::Done => "done",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "adapt" => Ok(Phase::Adapt),
            "done" => Ok(Phase::Done),
            other => Err(Error::Format(format!("unknown trainer phase {other:?}"))),
        }
    }
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    phase: &'a str,
    stage: usize,
    iter: usize,
    l_ce: f64,
    l_adv_seg: f64,
    l_adv_d: f64,
    lr: f64,
}

/// Outcome of driving a run: either the protocol finished, or it stopped
/// early at `stop_after` with a resumable state on disk.
#[derive(Debug)]
pub struct RunOutcome {
    pub finished: bool,
    pub state_path: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
}

struct Session<'a> {
    cfg: TrainConfig,
    data: &'a TrainData,
    curriculum: Option<Curriculum>,
    dir: PathBuf,
    by_id: BTreeMap<String, usize>,
    model: SegModel,
    disc: Discriminator,
    seg_vel: Vec<f64>,
    disc_vel: Vec<f64>,
    rng_pre: ChaCha8Rng,
    rng_adapt: ChaCha8Rng,
    phase: Phase,
    /// Iterations completed within the current phase.
    iter: usize,
    /// Iterations completed across the whole run, phases combined.
    done_total: usize,
    records: usize,
    pool: Option<FakeSourceSet>,
    metrics: BufWriter<fs::File>,
}

fn open_metrics(path: &Path, keep_records: usize, fresh: bool) -> Result<BufWriter<fs::File>> {
    if fresh {
        let f = fs::File::create(path).map_err(Error::io(path))?;
        return Ok(BufWriter::new(f));
    }
    // resume: drop any records written after the checkpoint being resumed
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < keep_records {
        return Err(Error::State(format!(
            "{}: has {} records but the checkpoint expects {keep_records}",
            path.display(),
            lines.len()
        )));
    }
    let mut kept = lines[..keep_records].join("\n");
    if keep_records > 0 {
        kept.push('\n');
    }
    artifact::atomic_write(path, kept.as_bytes())?;
    let f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    Ok(BufWriter::new(f))
}

impl<'a> Session<'a> {
    fn fresh(
        cfg: TrainConfig,
        data: &'a TrainData,
        curriculum: Option<Curriculum>,
        dir: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let model = SegModel::init(cfg.seg_config(), cfg.model_seed())?;
        let disc = Discriminator::init(cfg.disc_config(), cfg.disc_seed())?;
        let metrics = open_metrics(&dir.join(METRICS_FILE), 0, true)?;
        let s = Session {
            by_id: data
                .compound
                .iter()
                .enumerate()
                .map(|(i, (id, _))| (id.clone(), i))
                .collect(),
            seg_vel: vec![0.0; model.num_params()],
            disc_vel: vec![0.0; disc.num_params()],
            rng_pre: seeded_rng(cfg.seed, "pretrain_sampler"),
            rng_adapt: seeded_rng(cfg.seed, "adapt_sampler"),
            phase: Phase::Pretrain,
            iter: 0,
            done_total: 0,
            records: 0,
            pool: None,
            metrics,
            cfg,
            data,
            curriculum,
            dir: dir.to_path_buf(),
            model,
            disc,
        };
        s.check_curriculum_ids()?;
        Ok(s)
    }

    /// Start directly in the adaptation phase from a pretrained model.
    fn from_pretrained(
        cfg: TrainConfig,
        model: SegModel,
        data: &'a TrainData,
        curriculum: Curriculum,
        dir: &Path,
    ) -> Result<Self> {
        let mut s = Session::fresh(cfg, data, Some(curriculum), dir)?;
        s.model = model;
        s.seg_vel = vec![0.0; s.model.num_params()];
        s.enter_adapt();
        Ok(s)
    }

    fn check_curriculum_ids(&self) -> Result<()> {
        if let Some(cur) = &self.curriculum {
            for (id, _) in cur.ordered.iter() {
                if !self.by_id.contains_key(id) {
                    return Err(Error::InvalidInput(format!(
                        "curriculum references {id}, which is not in the compound set"
                    )));
                }
            }
        }
        Ok(())
    }

    fn compound_by_id(&self, id: &str) -> Result<&'a Image> {
        let at = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown compound image {id}")))?;
        Ok(&self.data.compound[at].1)
    }

    fn enter_adapt(&mut self) {
        if !self.cfg.no_freeze {
            if let Some(h) = self.model.hopfield.as_mut() {
                h.freeze();
            }
        }
        // the two phases are separate optimizations: fresh momentum
        self.seg_vel.iter_mut().for_each(|v| *v = 0.0);
        self.disc_vel.iter_mut().for_each(|v| *v = 0.0);
        self.phase = Phase::Adapt;
        self.iter = 0;
    }

    fn adapt_total(&self) -> usize {
        match &self.curriculum {
            Some(cur) => cur.k * self.cfg.iters_per_stage,
            None => 0,
        }
    }

    fn write_record(&mut self, stage: usize, l_ce: f64, l_adv_seg: f64, l_adv_d: f64, lr: f64) -> Result<()> {
        let rec = MetricsRecord {
            phase: self.phase.name(),
            stage,
            iter: self.iter,
            l_ce,
            l_adv_seg,
            l_adv_d,
            lr,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("encoding metrics record: {e}")))?;
        self.metrics
            .write_all(line.as_bytes())
            .and_then(|_| self.metrics.write_all(b"\n"))
            .map_err(Error::io(&self.dir.join(METRICS_FILE)))?;
        self.records += 1;
        Ok(())
    }

    fn check_finite(&self, stage: usize, losses: &[(&str, f64)]) -> Result<()> {
        for (name, v) in losses {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} diverged at stage {stage} iteration {}: {name} = {v}",
                    self.phase.name(),
                    self.iter
                )));
            }
        }
        Ok(())
    }

    fn pretrain_step(&mut self) -> Result<()> {
        let lr = poly_lr(
            self.cfg.lr_seg,
            self.iter,
            self.cfg.iters_pretrain,
            self.cfg.poly_power,
        );
        let mut grads = self.model.grads();
        let mut l_ce = 0.0;
        for _ in 0..self.cfg.batch {
            let img = &self.data.source[self.rng_pre.gen_range(0..self.data.source.len())];
            let labels = img.labels.as_deref().expect("validated labeled");
            let (probs, cache) = self.model.forward(img)?;
            let (l, mut dlogits) = ce_grad(&probs, labels)?;
            // backward is linear in the upstream gradient, so scaling here
            // normalizes this image's whole contribution
            let norm = 1.0 / (dlogits.locations() * self.cfg.batch) as f64;
            dlogits.data.iter_mut().for_each(|v| *v *= norm);
            self.model.backward_into(&cache, &dlogits, &mut grads);
            l_ce += l;
        }
        self.check_finite(0, &[("l_ce", l_ce)])?;
        let mut params = self.model.flat_params();
        let frozen = self.model.frozen_mask();
        sgd_momentum_step(&mut params, &grads.flat(), &mut self.seg_vel, &frozen, lr, self.cfg.momentum);
        self.model.set_flat_params(&params)?;
        self.write_record(0, l_ce, 0.0, 0.0, lr)?;
        self.iter += 1;
        self.done_total += 1;
        Ok(())
    }

    fn stage_of(&self, adapt_iter: usize) -> usize {
        adapt_iter / self.cfg.iters_per_stage + 1
    }

    fn ensure_pool(&mut self, stage: usize) -> Result<()> {
        if self.pool.as_ref().map(|p| p.stage) == Some(stage) {
            return Ok(());
        }
        let cur = self.curriculum.as_ref().expect("adapt has a curriculum");
        let ids = fake_source_ids(cur, stage)?;
        let members = ids
            .iter()
            .map(|id| Ok((id.clone(), self.compound_by_id(id)?)))
            .collect::<Result<Vec<_>>>()?;
        let provenance = if stage == 1 {
            PRETRAIN_CKPT.to_string()
        } else {
            stage_ckpt(stage - 1)
        };
        self.pool = Some(materialize_fake_source(stage, &members, &self.model, &provenance)?);
        Ok(())
    }

    fn adapt_step(&mut self) -> Result<()> {
        let stage = self.stage_of(self.iter);
        self.ensure_pool(stage)?;
        let total = self.adapt_total();
        let lr_s = poly_lr(self.cfg.lr_seg, self.iter, total, self.cfg.poly_power);
        let lr_d = poly_lr(self.cfg.lr_disc, self.iter, total, self.cfg.poly_power);

        let cur = self.curriculum.as_ref().expect("adapt has a curriculum");
        let stage_items = cur.stage(stage)?;
        let pool = self.pool.as_ref().expect("ensured above");
        let n_labeled = self.data.source.len() + pool.members.len();

        let mut seg_sum = vec![0.0; self.model.num_params()];
        let mut maps = Vec::with_capacity(self.cfg.batch);
        let (mut l_ce, mut l_adv_seg) = (0.0, 0.0);
        for _ in 0..self.cfg.batch {
            let li = self.rng_adapt.gen_range(0..n_labeled);
            let (labeled_img, labels): (&Image, &[u8]) = if li < self.data.source.len() {
                let img = &self.data.source[li];
                (img, img.labels.as_deref().expect("validated labeled"))
            } else {
                let (id, pseudo) = &pool.members[li - self.data.source.len()];
                (self.compound_by_id(id)?, pseudo.as_slice())
            };
            let ti = self.rng_adapt.gen_range(0..stage_items.len());
            let target_img = self.compound_by_id(&stage_items[ti].0)?;

            let (grads, probs_s, probs_t, ce, adv) = seg_training_grads(
                &self.model,
                &self.disc,
                labeled_img,
                labels,
                target_img,
                self.cfg.lambda_adv,
            )?;
            // both maps share dimensions in this protocol, so the labeled
            // map's area normalizes the combined contribution
            let norm = 1.0 / ((labeled_img.height * labeled_img.width) * self.cfg.batch) as f64;
            for (a, b) in seg_sum.iter_mut().zip(grads.flat()) {
                *a += b * norm;
            }
            maps.push((probs_s, probs_t));
            l_ce += ce;
            l_adv_seg += adv;
        }

        let mut params = self.model.flat_params();
        let frozen = self.model.frozen_mask();
        sgd_momentum_step(&mut params, &seg_sum, &mut self.seg_vel, &frozen, lr_s, self.cfg.momentum);
        self.model.set_flat_params(&params)?;

        // discriminator trains on the maps the segmentation step produced
        let mut disc_sum = vec![0.0; self.disc.num_params()];
        let mut l_adv_d = 0.0;
        for (probs_s, probs_t) in &maps {
            let (dg, l) = disc_training_grads(&self.disc, probs_t, probs_s)?;
            let norm = 1.0 / (probs_t.locations() * self.cfg.batch) as f64;
            for (a, b) in disc_sum.iter_mut().zip(dg.flat()) {
                *a += b * norm;
            }
            l_adv_d += l;
        }
        let unfrozen = vec![false; self.disc.num_params()];
        let mut dparams = self.disc.flat_params();
        sgd_momentum_step(&mut dparams, &disc_sum, &mut self.disc_vel, &unfrozen, lr_d, self.cfg.momentum);
        self.disc.set_flat_params(&dparams)?;

        self.check_finite(
            stage,
            &[("l_ce", l_ce), ("l_adv_seg", l_adv_seg), ("l_adv_d", l_adv_d)],
        )?;
        self.write_record(stage, l_ce, l_adv_seg, l_adv_d, lr_s)?;
        self.iter += 1;
        self.done_total += 1;

        if self.iter % self.cfg.iters_per_stage == 0 {
            self.model.save(&self.dir.join(stage_ckpt(stage)), &format!("stage_{stage}"))?;
            self.save_state()?;
        }
        Ok(())
    }

    fn save_state(&mut self) -> Result<()> {
        self.metrics.flush().map_err(Error::io(&self.dir.join(METRICS_FILE)))?;
        let pool_header = self.pool.as_ref().map(|p| {
            serde_json::json!({
                "stage": p.stage,
                "provenance": p.provenance,
                "members": p.members.iter().map(|(id, l)| {
                    serde_json::json!({"id": id, "len": l.len()})
                }).collect::<Vec<_>>(),
            })
        });
        let header = serde_json::json!({
            "kind": "trainer_state",
            "config": serde_json::to_value(&self.cfg)
                .map_err(|e| Error::Format(format!("encoding config: {e}")))?,
            "phase": self.phase.name(),
            "iter": self.iter,
            "done_total": self.done_total,
            "records": self.records,
            "frozen": self.model.hopfield.as_ref().map(|h| h.frozen).unwrap_or(false),
            "rng_pre": self.rng_pre.get_word_pos().to_string(),
            "rng_adapt": self.rng_adapt.get_word_pos().to_string(),
            "pool": pool_header,
        });
        let pool_labels: Vec<f64> = self
            .pool
            .as_ref()
            .map(|p| {
                p.members
                    .iter()
                    .flat_map(|(_, l)| l.iter().map(|&v| v as f64))
                    .collect()
            })
            .unwrap_or_default();
        let seg_params = self.model.flat_params();
        let disc_params = self.disc.flat_params();
        artifact::write_blob(
            &self.dir.join(STATE_FILE),
            &header,
            &[&seg_params, &self.seg_vel, &disc_params, &self.disc_vel, &pool_labels],
        )
    }

    fn resume(
        state_path: &Path,
        data: &'a TrainData,
        curriculum: Option<Curriculum>,
        dir: &Path,
        stop_after: Option<usize>,
    ) -> Result<Self> {
        let (header, payload) = artifact::read_blob(state_path)?;
        if header["kind"] != "trainer_state" {
            return Err(Error::Format(format!(
                "{}: not a trainer state blob",
                state_path.display()
            )));
        }
        let mut cfg: TrainConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Format(format!("{}: bad config: {e}", state_path.display())))?;
        cfg.stop_after = stop_after;
        cfg.validate()?;
        data.validate()?;

        let phase = Phase::parse(header["phase"].as_str().unwrap_or(""))?;
        let get_u = |k: &str| -> Result<usize> {
            header[k]
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Format(format!("{}: missing {k}", state_path.display())))
        };
        let iter = get_u("iter")?;
        let done_total = get_u("done_total")?;
        let records = get_u("records")?;
        let word_pos = |k: &str| -> Result<u128> {
            header[k]
                .as_str()
                .and_then(|s| s.parse::<u128>().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad {k}", state_path.display())))
        };

        let mut model = SegModel::init(cfg.seg_config(), cfg.model_seed())?;
        let disc = Discriminator::init(cfg.disc_config(), cfg.disc_seed())?;
        let pool_spec = header["pool"].clone();
        let pool_label_len: usize = if pool_spec.is_null() {
            0
        } else {
            pool_spec["members"]
                .as_array()
                .map(|ms| ms.iter().map(|m| m["len"].as_u64().unwrap_or(0) as usize).sum())
                .unwrap_or(0)
        };
        let parts = artifact::split_payload(
            &payload,
            &[
                model.num_params(),
                model.num_params(),
                disc.num_params(),
                disc.num_params(),
                pool_label_len,
            ],
        )?;
        model.set_flat_params(&parts[0])?;
        if header["frozen"].as_bool().unwrap_or(false) {
            if let Some(h) = model.hopfield.as_mut() {
                h.freeze();
            }
        }
        let mut disc = disc;
        disc.set_flat_params(&parts[2])?;

        let pool = if pool_spec.is_null() {
            None
        } else {
            let stage = pool_spec["stage"].as_u64().unwrap_or(0) as usize;
            let provenance = pool_spec["provenance"].as_str().unwrap_or("").to_string();
            let mut members = Vec::new();
            let mut at = 0usize;
            for m in pool_spec["members"].as_array().into_iter().flatten() {
                let id = m["id"]
                    .as_str()
                    .ok_or_else(|| Error::Format("pool member without id".into()))?
                    .to_string();
                let len = m["len"].as_u64().unwrap_or(0) as usize;
                let labels = parts[4][at..at + len]
                    .iter()
                    .map(|&v| {
                        if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                            Ok(v as u8)
                        } else {
                            Err(Error::Format(format!("pool label {v} is not a class index")))
                        }
                    })
                    .collect::<Result<Vec<u8>>>()?;
                at += len;
                members.push((id, labels));
            }
            Some(FakeSourceSet { stage, members, provenance })
        };

        let mut rng_pre = seeded_rng(cfg.seed, "pretrain_sampler");
        rng_pre.set_word_pos(word_pos("rng_pre")?);
        let mut rng_adapt = seeded_rng(cfg.seed, "adapt_sampler");
        rng_adapt.set_word_pos(word_pos("rng_adapt")?);

        let metrics = open_metrics(&dir.join(METRICS_FILE), records, false)?;
        let s = Session {
            by_id: data
                .compound
                .iter()
                .enumerate()
                .map(|(i, (id, _))| (id.clone(), i))
                .collect(),
            seg_vel: parts[1].clone(),
            disc_vel: parts[3].clone(),
            rng_pre,
            rng_adapt,
            phase,
            iter,
            done_total,
            records,
            pool,
            metrics,
            cfg,
            data,
            curriculum,
            dir: dir.to_path_buf(),
            model,
            disc,
        };
        s.check_curriculum_ids()?;
        Ok(s)
    }

    fn stopped(&self) -> bool {
        self.cfg
            .stop_after
            .map(|n| self.done_total >= n)
            .unwrap_or(false)
    }

    fn run(&mut self) -> Result<RunOutcome> {
        loop {
            match self.phase {
                Phase::Pretrain => {
                    if self.iter == self.cfg.iters_pretrain {
                        self.model.save(&self.dir.join(PRETRAIN_CKPT), "pretrain")?;
                        if self.curriculum.is_some() && self.adapt_total() > 0 {
                            self.enter_adapt();
                        } else {
                            self.finish()?;
                        }
                        self.save_state()?;
                        continue;
                    }
                    self.pretrain_step()?;
                }
                Phase::Adapt => {
                    if self.iter == self.adapt_total() {
                        self.finish()?;
                        self.save_state()?;
                        continue;
                    }
                    self.adapt_step()?;
                }
                Phase::Done => {
                    self.metrics.flush().map_err(Error::io(&self.dir.join(METRICS_FILE)))?;
                    return Ok(RunOutcome {
                        finished: true,
                        state_path: self.dir.join(STATE_FILE),
                        final_checkpoint: Some(self.dir.join(FINAL_CKPT)),
                    });
                }
            }
            if self.cfg.checkpoint_every > 0
                && self.done_total % self.cfg.checkpoint_every == 0
                && self.phase != Phase::Done
            {
                self.save_state()?;
            }
            if self.stopped() && self.phase != Phase::Done {
                self.save_state()?;
                return Ok(RunOutcome {
                    finished: false,
                    state_path: self.dir.join(STATE_FILE),
                    final_checkpoint: None,
                });
            }
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.model.save(&self.dir.join(FINAL_CKPT), "final")?;
        self.phase = Phase::Done;
        Ok(())
    }
}

/// Source pretraining alone: cross-entropy on labeled scenes, every
/// parameter trainable, memory included.
pub fn pretrain(cfg: &TrainConfig, source: &[Image], dir: &Path) -> Result<SegModel> {
    let data = TrainData {
        source: source.to_vec(),
        compound: Vec::new(),
    };
    let mut session = Session::fresh(cfg.clone(), &data, None, dir)?;
    session.run()?;
    Ok(session.model.clone())
}

/// Curriculum adaptation from a pretrained model. Freezes the retrieval
/// memory on entry (unless configured otherwise) and walks the stages.
pub fn adapt(
    cfg: &TrainConfig,
    pretrained: SegModel,
    data: &TrainData,
    curriculum: &Curriculum,
    dir: &Path,
) -> Result<SegModel> {
    let mut session = Session::from_pretrained(cfg.clone(), pretrained, data, curriculum.clone(), dir)?;
    let outcome = session.run()?;
    if !outcome.finished {
        return Err(Error::State(
            "adaptation stopped early; resume it to completion first".into(),
        ));
    }
    Ok(session.model.clone())
}

/// The full protocol in one call: pretrain, then adapt through the
/// curriculum. Honors `cfg.stop_after` by leaving a resumable state.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    curriculum: &Curriculum,
    dir: &Path,
) -> Result<RunOutcome> {
    let mut session = Session::fresh(cfg.clone(), data, Some(curriculum.clone()), dir)?;
    session.run()
}

/// Continue a stopped run from its state blob. `stop_after` replaces the
/// stored stopping point (None runs to completion).
pub fn resume_run(
    state_path: &Path,
    data: &TrainData,
    curriculum: Option<&Curriculum>,
    dir: &Path,
    stop_after: Option<usize>,
) -> Result<RunOutcome> {
    let mut session = Session::resume(state_path, data, curriculum.cloned(), dir, stop_after)?;
    session.run()
}

/// Read back the stored config of a state blob (the CLI reports it when
/// resuming).
pub fn peek_state_config(state_path: &Path) -> Result<TrainConfig> {
    let (header, _) = artifact::read_blob(state_path)?;
    serde_json::from_value(header["config"].clone())
        .map_err(|e| Error::Format(format!("{}: bad config: {e}", state_path.display())))
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// One (configuration, domain) cell of the comparison table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub configuration: String,
    pub domain: String,
    pub miou: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("configuration,domain,miou\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.configuration, r.domain, r.miou));
    }
    out
}

/// The component comparison: source-only, the full protocol, adaptation
/// without the curriculum (one stage over everything, same total budget),
/// without the retrieval memory, and without freezing it. All five share
/// the seed and the data split; the three adaptation variants of the
/// standard architecture reuse one pretrained checkpoint, and the
/// memoryless variant pretrains itself from the same seed. Emits one CSV
/// row per (configuration, domain).
pub fn ablation_suite(
    cfg: &TrainConfig,
    root: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    use crate::curriculum::build_curriculum;
    use crate::eval;

    let manifest = crate::synthdata::load_manifest(root)?;
    let data = TrainData::from_dataset(root, &manifest)?;
    let distances = eval::compound_distances(&data.source, &data.compound, cfg.beta)?;
    let cur_k = build_curriculum(&distances, cfg.k)?;
    let cur_1 = build_curriculum(&distances, 1)?;
    let groups = eval::domain_groups(root, &manifest, cfg.beta)?;

    let mut base = cfg.clone();
    base.no_hopfield = false;
    base.no_curriculum = false;
    base.no_freeze = false;
    base.stop_after = None;

    let full_dir = out.join("full");
    train(&base, &data, &cur_k, &full_dir)?;
    let full_model = SegModel::load(&full_dir.join(FINAL_CKPT))?;
    let pre_model = SegModel::load(&full_dir.join(PRETRAIN_CKPT))?;

    // same adaptation budget, one undifferentiated stage
    let mut nc = base.clone();
    nc.no_curriculum = true;
    nc.iters_per_stage = base.iters_per_stage * cur_k.k;
    let nc_model = adapt(&nc, pre_model.clone(), &data, &cur_1, &out.join("no_curriculum"))?;

    let mut nf = base.clone();
    nf.no_freeze = true;
    let nf_model = adapt(&nf, pre_model.clone(), &data, &cur_k, &out.join("no_freeze"))?;

    let mut nh = base.clone();
    nh.no_hopfield = true;
    let nh_dir = out.join("no_hopfield");
    train(&nh, &data, &cur_k, &nh_dir)?;
    let nh_model = SegModel::load(&nh_dir.join(FINAL_CKPT))?;

    let configs: [(&str, &SegModel); 5] = [
        ("source_only", &pre_model),
        ("full", &full_model),
        ("no_curriculum", &nc_model),
        ("no_hopfield", &nh_model),
        ("no_freeze", &nf_model),
    ];
    let mut rows = Vec::new();
    for (name, model) in configs {
        for score in eval::evaluate_model(model, &groups, cfg.cls)? {
            rows.push(AblationRow {
                configuration: name.to_string(),
                domain: score.domain,
                miou: score.miou,
            });
        }
    }
    artifact::atomic_write(&out.join(ABLATION_FILE), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::build_curriculum;
    use crate::synthdata::{apply_shift, gen_scene, DomainShift, SceneSpec, ShiftKind};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            memory_size: 4,
            similarity_dim: 4,
            hidden_channels: vec![4],
            feature_dim: 6,
            disc_hidden: vec![4],
            iters_pretrain: 6,
            iters_per_stage: 4,
            k: 2,
            lr_seg: 0.02,
            lr_disc: 0.01,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n_source: usize, n_compound: usize) -> TrainData {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            seed: 5,
            objects_min: 2,
            objects_max: 3,
            ..SceneSpec::default()
        };
        let source: Vec<Image> = (0..n_source).map(|i| gen_scene(&spec, i).unwrap()).collect();
        let compound = (0..n_compound)
            .map(|i| {
                let mut img = gen_scene(&spec, n_source + i).unwrap();
                img = apply_shift(
                    &img,
                    &DomainShift {
                        kind: ShiftKind::Brightness,
                        magnitude: 0.05 + 0.1 * i as f64,
                        seed: 40 + i as u64,
                    },
                )
                .unwrap();
                img.labels = None;
                (format!("c{i:02}"), img)
            })
            .collect();
        TrainData { source, compound }
    }

    fn tiny_curriculum(data: &TrainData, k: usize) -> Curriculum {
        let distances: Vec<(String, f64)> = data
            .compound
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i as f64))
            .collect();
        build_curriculum(&distances, k).unwrap()
    }

    #[test]
    fn zero_iteration_pretrain_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            iters_pretrain: 0,
            ..tiny_cfg()
        };
        let data = tiny_data(3, 0);
        let model = pretrain(&cfg, &data.source, dir.path()).unwrap();
        let init = SegModel::init(cfg.seg_config(), cfg.model_seed()).unwrap();
        let (a, b) = (model.flat_params(), init.flat_params());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pretrain_is_bitwise_reproducible() {
        let cfg = tiny_cfg();
        let data = tiny_data(4, 0);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = pretrain(&cfg, &data.source, d1.path()).unwrap();
        let m2 = pretrain(&cfg, &data.source, d2.path()).unwrap();
        assert_eq!(
            fs::read(d1.path().join(METRICS_FILE)).unwrap(),
            fs::read(d2.path().join(METRICS_FILE)).unwrap()
        );
        for (x, y) in m1.flat_params().iter().zip(m2.flat_params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pretrain_beats_an_untrained_model_on_held_out_scenes() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            seed: 5,
            ..SceneSpec::default()
        };
        let cfg = TrainConfig {
            iters_pretrain: 80,
            lr_seg: 0.05,
            ..tiny_cfg()
        };
        let data = tiny_data(6, 0);
        let dir = tempfile::tempdir().unwrap();
        let trained = pretrain(&cfg, &data.source, dir.path()).unwrap();
        let untrained = SegModel::init(cfg.seg_config(), cfg.model_seed()).unwrap();
        let held_out: Vec<Image> = (20..26).map(|i| gen_scene(&spec, i).unwrap()).collect();
        let miou = |m: &SegModel| {
            let mut conf = crate::metrics::Confusion::new(cfg.cls).unwrap();
            for img in &held_out {
                let pred = crate::curriculum::Predictor::predict_labels(m, img).unwrap();
                conf.add(&pred, img.labels.as_ref().unwrap()).unwrap();
            }
            conf.miou().unwrap()
        };
        let (t, u) = (miou(&trained), miou(&untrained));
        assert!(t > u, "trained {t} vs untrained {u}");
    }

    #[test]
    fn memory_stays_bitwise_frozen_through_adaptation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);
        let outcome = train(&cfg, &data, &cur, dir.path()).unwrap();
        assert!(outcome.finished);
        let pre = SegModel::load(&dir.path().join(PRETRAIN_CKPT)).unwrap();
        let fin = SegModel::load(&dir.path().join(FINAL_CKPT)).unwrap();
        let (hp, hf) = (pre.hopfield.as_ref().unwrap(), fin.hopfield.as_ref().unwrap());
        assert!(hf.frozen);
        assert!(!hp.frozen);
        for (a, b) in hp
            .m
            .iter()
            .chain(hp.w_k.iter())
            .chain(hp.w_v.iter())
            .zip(hf.m.iter().chain(hf.w_k.iter()).chain(hf.w_v.iter()))
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // the rest of the model must actually have moved
        assert_ne!(pre.cls_w, fin.cls_w);
    }

    #[test]
    fn no_freeze_lets_the_memory_drift() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            no_freeze: true,
            ..tiny_cfg()
        };
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);
        train(&cfg, &data, &cur, dir.path()).unwrap();
        let pre = SegModel::load(&dir.path().join(PRETRAIN_CKPT)).unwrap();
        let fin = SegModel::load(&dir.path().join(FINAL_CKPT)).unwrap();
        assert!(!fin.hopfield.as_ref().unwrap().frozen);
        assert_ne!(pre.hopfield.as_ref().unwrap().m, fin.hopfield.as_ref().unwrap().m);
    }

    #[test]
    fn interrupted_run_resumes_bitwise_identically() {
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);

        let straight = tempfile::tempdir().unwrap();
        let outcome = train(&tiny_cfg(), &data, &cur, straight.path()).unwrap();
        assert!(outcome.finished);

        // stop inside the adaptation phase (6 pretrain + 8 adapt total)
        let stopped = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            stop_after: Some(9),
            ..tiny_cfg()
        };
        let mid = train(&cfg, &data, &cur, stopped.path()).unwrap();
        assert!(!mid.finished);
        let resumed = resume_run(&mid.state_path, &data, Some(&cur), stopped.path(), None).unwrap();
        assert!(resumed.finished);

        for name in [
            METRICS_FILE,
            PRETRAIN_CKPT,
            &stage_ckpt(1),
            &stage_ckpt(2),
            FINAL_CKPT,
        ] {
            let a = fs::read(straight.path().join(name)).unwrap();
            let b = fs::read(stopped.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resume");
        }
    }

    #[test]
    fn resume_across_the_phase_boundary_matches_too() {
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);
        let straight = tempfile::tempdir().unwrap();
        train(&tiny_cfg(), &data, &cur, straight.path()).unwrap();

        // stop exactly at the end of pretraining
        let stopped = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            stop_after: Some(6),
            ..tiny_cfg()
        };
        let mid = train(&cfg, &data, &cur, stopped.path()).unwrap();
        assert!(!mid.finished);
        resume_run(&mid.state_path, &data, Some(&cur), stopped.path(), None).unwrap();
        for name in [METRICS_FILE, FINAL_CKPT] {
            assert_eq!(
                fs::read(straight.path().join(name)).unwrap(),
                fs::read(stopped.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn compound_images_with_labels_are_rejected() {
        let mut data = tiny_data(2, 2);
        data.compound[0].1.labels = Some(vec![0u8; 16 * 16]);
        let err = data.validate().unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn divergence_reports_phase_and_iteration() {
        let dir = tempfile::tempdir().unwrap();
        // the rate is chosen so the very first step sends the forward pass
        // past f64 range; saturated-but-finite weights would instead park
        // the run at a constant loss because the clamped CE gradient is
        // zero there
        let cfg = TrainConfig {
            lr_seg: 1e300,
            iters_pretrain: 50,
            no_hopfield: true,
            ..tiny_cfg()
        };
        let data = tiny_data(3, 0);
        let err = pretrain(&cfg, &data.source, dir.path()).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("pretrain"), "message: {msg}"),
            other => panic!("expected numeric divergence, got {other:?}"),
        }
    }

    #[test]
    fn stage_checkpoints_exist_and_count_matches_k() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);
        train(&tiny_cfg(), &data, &cur, dir.path()).unwrap();
        assert!(dir.path().join(stage_ckpt(1)).exists());
        assert!(dir.path().join(stage_ckpt(2)).exists());
        assert!(!dir.path().join(stage_ckpt(3)).exists());
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 6 + 8);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["phase"], "adapt");
        assert_eq!(last["stage"], 2);
        assert_eq!(last["iter"], 7);
    }

    #[test]
    fn learning_rate_is_nonincreasing_and_positive_in_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(3, 6);
        let cur = tiny_curriculum(&data, 2);
        train(&tiny_cfg(), &data, &cur, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut last_by_phase: BTreeMap<String, f64> = BTreeMap::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let phase = v["phase"].as_str().unwrap().to_string();
            let lr = v["lr"].as_f64().unwrap();
            assert!(lr > 0.0);
            if let Some(prev) = last_by_phase.get(&phase) {
                assert!(lr <= *prev, "lr increased within {phase}");
            }
            last_by_phase.insert(phase, lr);
        }
    }

    #[test]
    fn empty_config_is_runnable_and_defaults_are_the_published_ones() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_adv, 0.001);
        assert_eq!(cfg.beta, 0.09);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.memory_size, 64);
        assert_eq!(cfg.lr_seg, 2.5e-4);
        assert_eq!(cfg.lr_disc, 1e-4);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.poly_power, 0.9);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lr_segg": 1.0}"#);
        assert!(err.is_err());
    }
}
