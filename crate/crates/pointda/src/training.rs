//! The interleaved two-network training loop, checkpointing and the
//! loss-component ablation harness.
//!
//! Each step draws one labeled source batch and one unlabeled target batch.
//! The main network updates on the weighted total of location,
//! classification, entropy and adversarial terms; the discriminator then
//! updates on detached prediction maps from both batches. The two updates
//! are structurally separate ([`main_update`], [`discriminator_update`]):
//! adversarial gradients reach only the main network through a frozen
//! discriminator, and discriminator gradients never touch the main network.
//!
//! Training is deterministic: one ChaCha8 stream drives initialization,
//! batch sampling and augmentation, and its exact position is stored in
//! checkpoints so a resumed run reproduces the uninterrupted trajectory.
//!
//! # Checkpoint layout (version 1)
//!
//! Little-endian throughout:
//!
//! ```text
//! magic            8  b"PDAPTCK1"
//! config_hash     32  SHA-256 of the resolved config TOML
//! step             8  u64
//! best_metric      8  f64 (infinity when no eval has run)
//! rng_seed        32  ChaCha8 seed
//! rng_word_pos    16  u128 stream position
//! rng_stream       8  u64 stream id
//! source sampler      u64 len, len x u64 permutation, u64 cursor
//! target sampler      same
//! main params         u32 tensor count, per tensor: u64 len, len x f64
//! disc params         same
//! adam main           u64 t, then m tensors and v tensors as above
//! adam disc           same
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, LossFlag};
use crate::data::{augment, load_dataset, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsRecord, METRICS_CSV_HEADER};
use crate::geometry::decode_points;
use crate::losses::{
    adversarial_loss_grad, classification_loss_grad, discriminator_loss_grad,
    discriminator_objective, entropy_loss_grad, location_loss_grad, main_objective, DomainLabel,
};
use crate::matching::{build_cost_matrix, derive_targets, hungarian_assign, Matching};
use crate::network::{
    concat_predictions, split_predictions, DiscGradients, Discriminator, MainGradients,
    MainNetwork,
};
use crate::nn::AdamState;

/// Concatenated prediction maps cut loose from the main network, tagged
/// with their true domain; the discriminator trains on these.
pub type DetachedMaps = Vec<(Array3<f64>, DomainLabel)>;

pub const STEP_CSV_HEADER: &str =
    "step,L_loc,L_cls,L_ent_X,L_ent_Y,L_adv,L_dis_X,L_dis_Y,total_main,total_dis";

/// Every loss component of one training step. Components whose flag is
/// disabled log exactly zero. `L_loc` is in units of stride, matching its
/// weight in the main objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_loc: f64,
    pub l_cls: f64,
    pub l_ent_x: f64,
    pub l_ent_y: f64,
    pub l_adv: f64,
    pub l_dis_x: f64,
    pub l_dis_y: f64,
    pub total_main: f64,
    pub total_dis: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_loc,
            self.l_cls,
            self.l_ent_x,
            self.l_ent_y,
            self.l_adv,
            self.l_dis_x,
            self.l_dis_y,
            self.total_main,
            self.total_dis
        )
    }
}

/// Cycles through a dataset in shuffled epochs.
#[derive(Debug, Clone)]
struct EpochSampler {
    perm: Vec<u64>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            perm: (0..n as u64).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.perm.len() {
            self.perm.shuffle(rng);
            self.cursor = 0;
        }
        let idx = self.perm[self.cursor] as usize;
        self.cursor += 1;
        idx
    }
}

/// Everything that evolves during training.
pub struct TrainState {
    pub step: u64,
    pub main: MainNetwork,
    pub disc: Discriminator,
    pub adam_main: AdamState,
    pub adam_disc: AdamState,
    pub rng: ChaCha8Rng,
    pub best_metric: f64,
    source_sampler: EpochSampler,
    target_sampler: EpochSampler,
}

impl TrainState {
    pub fn new(cfg: &Config, n_source: usize, n_target: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let main = MainNetwork::new(cfg.model, &mut rng)?;
        let disc = Discriminator::new(4 * cfg.model.slots_per_cell, &mut rng)?;
        let adam_main = AdamState::new(&main.param_sizes());
        let adam_disc = AdamState::new(&disc.param_sizes());
        Ok(Self {
            step: 0,
            main,
            disc,
            adam_main,
            adam_disc,
            rng,
            best_metric: f64::INFINITY,
            source_sampler: EpochSampler::new(n_source),
            target_sampler: EpochSampler::new(n_target),
        })
    }

    fn draw_batch(
        &mut self,
        data: &[Sample],
        n: usize,
        cfg: &Config,
        source: bool,
    ) -> Result<Vec<Sample>> {
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = if source {
                self.source_sampler.next(&mut self.rng)
            } else {
                self.target_sampler.next(&mut self.rng)
            };
            batch.push(augment(&data[idx], &cfg.augment, &mut self.rng)?);
        }
        Ok(batch)
    }
}

/// Main-network side of one step: forward both batches, assemble the
/// weighted gradient of the main objective and apply one Adam update. The
/// discriminator participates forward-only; its parameters are not touched.
///
/// Returns the step log (discriminator columns still zero) and the
/// concatenated prediction maps for the discriminator update.
pub fn main_update(
    state: &mut TrainState,
    src_batch: &[Sample],
    tgt_batch: &[Sample],
    cfg: &Config,
) -> Result<(StepLog, DetachedMaps)> {
    if src_batch.is_empty() {
        return Err(Error::InvalidArgument("empty source batch".into()));
    }
    let weights = cfg.loss.weights();
    let stride = cfg.model.stride as f64;
    let d = cfg.model.slots_per_cell;
    let ent_src_on = cfg.train.enabled(LossFlag::EntSrc);
    let ent_tgt_on = cfg.train.enabled(LossFlag::EntTgt);
    let adv_on = cfg.train.enabled(LossFlag::Adv);
    let n_src = src_batch.len() as f64;
    let n_tgt = tgt_batch.len() as f64;

    let mut grads = MainGradients::zeros_like(&state.main);
    let mut concats = Vec::with_capacity(src_batch.len() + tgt_batch.len());
    let (mut loc_sum, mut cls_sum, mut ent_x_sum, mut ent_y_sum, mut adv_sum) =
        (0.0, 0.0, 0.0, 0.0, 0.0);

    for sample in src_batch {
        let gt = sample.points.as_ref().ok_or_else(|| {
            Error::ContractViolation(format!(
                "source sample {} reached the trainer without labels",
                sample.id
            ))
        })?;
        let (maps, cache) = state.main.forward(&sample.image)?;
        let grid = state.main.grid_for(sample.width(), sample.height())?;
        let matching = if gt.is_empty() {
            Matching::empty(grid.num_slots())
        } else {
            let decoded = decode_points(&maps.offsets, &grid)?;
            let costs = build_cost_matrix(&decoded, &maps.cls, gt, cfg.matching.dist_weight)?;
            hungarian_assign(&costs)?
        };
        let (loc_targets, cls_targets) = derive_targets(&matching, gt, &grid)?;
        let (loc_px, mut d_offsets) =
            location_loss_grad(&maps.offsets, &matching, &loc_targets, cfg.model.stride);
        let (cls_loss, d_cls) = classification_loss_grad(&maps.cls, &cls_targets);
        loc_sum += loc_px / stride;
        cls_sum += cls_loss;

        let scale = 1.0 / n_src;
        d_offsets *= weights.lambda_loc / stride * scale;
        let mut d_cls_total = d_cls;
        d_cls_total *= weights.lambda_cls * scale;
        if ent_src_on {
            let (ent, d_ent) = entropy_loss_grad(&maps.cls);
            ent_x_sum += ent;
            d_cls_total.scaled_add(weights.lambda_ent * scale, &d_ent);
        }
        grads.add_assign(&state.main.backward(&cache, &d_offsets, &d_cls_total));
        concats.push((concat_predictions(&maps), DomainLabel::Source));
    }

    for sample in tgt_batch {
        if sample.points.is_some() {
            return Err(Error::ContractViolation(format!(
                "target sample {} exposes labels to the trainer; adaptation is unsupervised",
                sample.id
            )));
        }
        let (maps, cache) = state.main.forward(&sample.image)?;
        let scale = 1.0 / n_tgt;
        let mut d_offsets = Array4::zeros(maps.offsets.values.dim());
        let mut d_cls_total = Array4::zeros(maps.cls.probs.dim());
        let mut touched = false;
        if ent_tgt_on {
            let (ent, d_ent) = entropy_loss_grad(&maps.cls);
            ent_y_sum += ent;
            d_cls_total.scaled_add(weights.lambda_ent * scale, &d_ent);
            touched = true;
        }
        let concat = concat_predictions(&maps);
        if adv_on {
            // Frozen discriminator: only its input gradient flows back.
            let (dm, dcache) = state.disc.forward(&concat, DomainLabel::Target)?;
            let (adv_raw, mut d_probs) = adversarial_loss_grad(&dm)?;
            let norm = if cfg.loss.normalize_dis_loss {
                1.0 / dm.num_cells() as f64
            } else {
                1.0
            };
            adv_sum += adv_raw * norm;
            d_probs *= weights.lambda_adv * norm * scale;
            let d_concat = state.disc.backward_input(&dcache, &d_probs);
            let (d_off_adv, d_cls_adv) = split_predictions(&d_concat, d);
            d_offsets += &d_off_adv;
            d_cls_total += &d_cls_adv;
            touched = true;
        }
        if touched {
            grads.add_assign(&state.main.backward(&cache, &d_offsets, &d_cls_total));
        }
        concats.push((concat, DomainLabel::Target));
    }

    let l_loc = loc_sum / n_src;
    let l_cls = cls_sum / n_src;
    let l_ent_x = ent_x_sum / n_src;
    let l_ent_y = if n_tgt > 0.0 { ent_y_sum / n_tgt } else { 0.0 };
    let l_adv = if n_tgt > 0.0 { adv_sum / n_tgt } else { 0.0 };
    let total_main = main_objective(l_loc, l_cls, l_ent_x, l_ent_y, l_adv, &weights)?;

    let mut params = state.main.param_slices_mut();
    state
        .adam_main
        .step(cfg.train.lr_main, &mut params, &grads.slices());

    Ok((
        StepLog {
            step: state.step + 1,
            l_loc,
            l_cls,
            l_ent_x,
            l_ent_y,
            l_adv,
            l_dis_x: 0.0,
            l_dis_y: 0.0,
            total_main,
            total_dis: 0.0,
        },
        concats,
    ))
}

/// Discriminator side of one step: forward on detached prediction maps from
/// both domains and one Adam update on the summed domain-classification
/// loss. The main network is never touched.
///
/// Returns `(L_dis_source, L_dis_target, total)`.
pub fn discriminator_update(
    state: &mut TrainState,
    concats: &[(Array3<f64>, DomainLabel)],
    cfg: &Config,
) -> Result<(f64, f64, f64)> {
    let n_src = concats
        .iter()
        .filter(|(_, d)| *d == DomainLabel::Source)
        .count() as f64;
    let n_tgt = concats.len() as f64 - n_src;
    if n_src == 0.0 || n_tgt == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let mut grads = DiscGradients::zeros_like(&state.disc);
    let (mut dis_x, mut dis_y) = (0.0, 0.0);
    for (concat, domain) in concats {
        let (dm, dcache) = state.disc.forward(concat, *domain)?;
        let (raw, mut d_probs) = discriminator_loss_grad(&dm);
        let norm = if cfg.loss.normalize_dis_loss {
            1.0 / dm.num_cells() as f64
        } else {
            1.0
        };
        let batch = match domain {
            DomainLabel::Source => n_src,
            DomainLabel::Target => n_tgt,
        };
        match domain {
            DomainLabel::Source => dis_x += raw * norm / batch,
            DomainLabel::Target => dis_y += raw * norm / batch,
        }
        d_probs *= norm / batch;
        grads.add_assign(&state.disc.backward_params(&dcache, &d_probs));
    }
    let total = discriminator_objective(dis_x, dis_y);
    if !total.is_finite() {
        return Err(Error::TrainingDivergence {
            component: "dis".into(),
            value: total,
        });
    }
    let mut params = state.disc.param_slices_mut();
    state
        .adam_disc
        .step(cfg.train.lr_disc, &mut params, &grads.slices());
    Ok((dis_x, dis_y, total))
}

/// One full training step: main update on the weighted objective, then the
/// discriminator update on the same (detached) prediction maps.
pub fn train_step(
    state: &mut TrainState,
    src_batch: &[Sample],
    tgt_batch: &[Sample],
    cfg: &Config,
) -> Result<StepLog> {
    let (mut log, concats) = main_update(state, src_batch, tgt_batch, cfg)?;
    let (dis_x, dis_y, total_dis) = discriminator_update(state, &concats, cfg)?;
    log.l_dis_x = dis_x;
    log.l_dis_y = dis_y;
    log.total_dis = total_dis;
    state.step += 1;
    Ok(log)
}

// --- checkpoint IO ---

const CKPT_MAGIC: &[u8; 8] = b"PDAPTCK1";

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn tensor_block(&mut self, tensors: &[&[f64]]) {
        self.u32(tensors.len() as u32);
        for t in tensors {
            self.f64_slice(t);
        }
    }
    fn sampler(&mut self, s: &EpochSampler) {
        self.u64(s.perm.len() as u64);
        for v in &s.perm {
            self.u64(*v);
        }
        self.u64(s.cursor as u64);
    }
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                message: format!("truncated checkpoint at byte {}", self.pos),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn tensor_block_into(&mut self, tensors: &mut [&mut [f64]]) -> Result<()> {
        let count = self.u32()? as usize;
        if count != tensors.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                message: format!(
                    "checkpoint has {count} tensors, model expects {}",
                    tensors.len()
                ),
            });
        }
        for t in tensors {
            let data = self.f64_vec()?;
            if data.len() != t.len() {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    message: format!(
                        "tensor length {} does not match model tensor {}",
                        data.len(),
                        t.len()
                    ),
                });
            }
            t.copy_from_slice(&data);
        }
        Ok(())
    }
    fn sampler(&mut self) -> Result<EpochSampler> {
        let n = self.u64()? as usize;
        let mut perm = Vec::with_capacity(n);
        for _ in 0..n {
            perm.push(self.u64()?);
        }
        let cursor = self.u64()? as usize;
        Ok(EpochSampler { perm, cursor })
    }
}

pub fn save_checkpoint(state: &TrainState, cfg: &Config, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(CKPT_MAGIC);
    w.bytes(&cfg.hash());
    w.u64(state.step);
    w.f64(state.best_metric);
    w.bytes(&state.rng.get_seed());
    w.u128(state.rng.get_word_pos());
    w.u64(state.rng.get_stream());
    w.sampler(&state.source_sampler);
    w.sampler(&state.target_sampler);
    w.tensor_block(&state.main.param_slices());
    w.tensor_block(&state.disc.param_slices());
    w.u64(state.adam_main.t);
    w.tensor_block(&state.adam_main.m.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
    w.tensor_block(&state.adam_main.v.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
    w.u64(state.adam_disc.t);
    w.tensor_block(&state.adam_disc.m.iter().map(|v| v.as_slice()).collect::<Vec<_>>());
    w.tensor_block(&state.adam_disc.v.iter().map(|v| v.as_slice()).collect::<Vec<_>>());

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &w.buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Strict load: the stored config hash must match `cfg`; used for resume.
pub fn load_checkpoint(path: &Path, cfg: &Config) -> Result<TrainState> {
    load_checkpoint_impl(path, cfg, true)
}

/// Lenient load for evaluation and visualization: tensor shapes must match
/// the model section, but other config differences (e.g. a swept threshold)
/// are allowed.
pub fn load_checkpoint_any(path: &Path, cfg: &Config) -> Result<TrainState> {
    load_checkpoint_impl(path, cfg, false)
}

fn load_checkpoint_impl(path: &Path, cfg: &Config, verify_hash: bool) -> Result<TrainState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader {
        data: &data,
        pos: 0,
        path: path.to_path_buf(),
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let stored_hash = r.take(32)?;
    if stored_hash != cfg.hash() {
        if verify_hash {
            return Err(Error::ContractViolation(format!(
                "checkpoint {} was produced by a different resolved config; \
                 resume requires an identical config",
                path.display()
            )));
        }
        log::warn!(
            "checkpoint {} comes from a different resolved config",
            path.display()
        );
    }
    let step = r.u64()?;
    let best_metric = r.f64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let source_sampler = r.sampler()?;
    let target_sampler = r.sampler()?;

    let mut state = TrainState::new(cfg, source_sampler.perm.len(), target_sampler.perm.len())?;
    state.step = step;
    state.best_metric = best_metric;
    state.source_sampler = source_sampler;
    state.target_sampler = target_sampler;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    r.tensor_block_into(&mut state.main.param_slices_mut())?;
    r.tensor_block_into(&mut state.disc.param_slices_mut())?;
    state.adam_main.t = r.u64()?;
    {
        let mut m: Vec<&mut [f64]> = state.adam_main.m.iter_mut().map(|v| v.as_mut_slice()).collect();
        r.tensor_block_into(&mut m)?;
        let mut v: Vec<&mut [f64]> = state.adam_main.v.iter_mut().map(|v| v.as_mut_slice()).collect();
        r.tensor_block_into(&mut v)?;
    }
    state.adam_disc.t = r.u64()?;
    {
        let mut m: Vec<&mut [f64]> = state.adam_disc.m.iter_mut().map(|v| v.as_mut_slice()).collect();
        r.tensor_block_into(&mut m)?;
        let mut v: Vec<&mut [f64]> = state.adam_disc.v.iter_mut().map(|v| v.as_mut_slice()).collect();
        r.tensor_block_into(&mut v)?;
    }
    Ok(state)
}

// --- the training loop ---

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/last.ckpt`.
    pub resume: bool,
    /// Stop after this absolute step, saving a checkpoint; simulates an
    /// interruption without touching the config (and so the config hash).
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub best_metric: f64,
    /// Final evals; `None` when the run was stopped early.
    pub source_eval: Option<MetricsRecord>,
    pub target_eval: Option<MetricsRecord>,
    pub last_checkpoint: PathBuf,
}

fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

fn open_csv(path: &Path, header: &str, resume: bool) -> Result<fs::File> {
    let fresh = !resume || !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        if !resume {
            // Start over even if a stale file exists.
            file.set_len(0).map_err(|e| Error::io(path, e))?;
        }
        writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}

/// Trains for `cfg.train.steps` steps with periodic evaluation, emitting
/// `losses.csv`, `metrics.csv`, per-image CSVs and best/last checkpoints
/// under `out_dir`.
///
/// `source` must be the labeled source-train split; `target`, when present,
/// must be the unlabeled adaptation split. Held-out target labels are
/// loaded here for the evaluator only and never reach [`train_step`].
pub fn train(
    cfg: &Config,
    source: &Dataset,
    target: Option<&Dataset>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut problems = Vec::new();
    if cfg.train.steps == 0 {
        problems.push("train.steps must be positive".to_string());
    }
    if cfg.train.eval_interval == 0 {
        problems.push("train.eval_interval must be positive".to_string());
    }
    if source.split != Split::SourceTrain {
        problems.push(format!("expected the source-train split, got {}", source.split));
    }
    if let Some(t) = target {
        if t.split != Split::TargetAdapt {
            problems.push(format!(
                "expected the unlabeled target-adapt split, got {}",
                t.split
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_resolved_echo(out_dir)?;

    let src_train = source.load_all()?;
    let tgt_adapt = target.map(|t| t.load_all()).transpose()?;
    // Held-out labels for scoring only.
    let tgt_eval: Option<Vec<Sample>> = match target {
        Some(t) => match load_dataset(&t.root, Split::TargetEval) {
            Ok(ds) => Some(ds.load_all()?),
            Err(e) => {
                log::warn!("no target eval labels ({e}); skipping target evaluation");
                None
            }
        },
        None => None,
    };

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut state = if opts.resume {
        load_checkpoint(&last_path, cfg)?
    } else {
        TrainState::new(cfg, src_train.len(), tgt_adapt.as_ref().map_or(0, Vec::len))?
    };

    let losses_path = out_dir.join("losses.csv");
    let metrics_path = out_dir.join("metrics.csv");
    let mut losses_csv = open_csv(&losses_path, STEP_CSV_HEADER, opts.resume)?;
    let mut metrics_csv = open_csv(&metrics_path, METRICS_CSV_HEADER, opts.resume)?;

    let threshold = cfg.eval.threshold;
    let mut last_source_eval = None;
    let mut last_target_eval = None;
    let run_eval = |state: &mut TrainState,
                        metrics_csv: &mut fs::File,
                        src_rec: &mut Option<MetricsRecord>,
                        tgt_rec: &mut Option<MetricsRecord>|
     -> Result<()> {
        let rec = evaluate(&state.main, &src_train, threshold, "pair", "source-eval")?;
        append_line(metrics_csv, &metrics_path, &rec.csv_row(state.step))?;
        *src_rec = Some(rec);
        if let Some(samples) = &tgt_eval {
            let rec = evaluate(&state.main, samples, threshold, "pair", "target-eval")?;
            append_line(metrics_csv, &metrics_path, &rec.csv_row(state.step))?;
            *tgt_rec = Some(rec);
        }
        let metric = tgt_rec
            .as_ref()
            .map(|r| r.mae)
            .or_else(|| src_rec.as_ref().map(|r| r.mae))
            .unwrap_or(f64::INFINITY);
        if metric < state.best_metric {
            state.best_metric = metric;
            save_checkpoint(state, cfg, &best_path)?;
        }
        Ok(())
    };

    if state.step == 0 {
        run_eval(
            &mut state,
            &mut metrics_csv,
            &mut last_source_eval,
            &mut last_target_eval,
        )?;
    }

    let stop_at = opts.stop_after.unwrap_or(u64::MAX).min(cfg.train.steps);
    let mut saved_at = None;
    while state.step < stop_at {
        let src_batch = state.draw_batch(&src_train, cfg.train.batch_source, cfg, true)?;
        let tgt_batch = match &tgt_adapt {
            Some(data) => state.draw_batch(data, cfg.train.batch_target, cfg, false)?,
            None => Vec::new(),
        };
        let log = train_step(&mut state, &src_batch, &tgt_batch, cfg)?;
        append_line(&mut losses_csv, &losses_path, &log.csv_row())?;

        if state.step % cfg.train.eval_interval == 0 || state.step == cfg.train.steps {
            run_eval(
                &mut state,
                &mut metrics_csv,
                &mut last_source_eval,
                &mut last_target_eval,
            )?;
            save_checkpoint(&state, cfg, &last_path)?;
            saved_at = Some(state.step);
        }
    }
    if saved_at != Some(state.step) {
        save_checkpoint(&state, cfg, &last_path)?;
    }

    let finished = state.step == cfg.train.steps;
    if finished {
        if let Some(rec) = &last_source_eval {
            rec.write_per_image_csv(&out_dir.join("per_image_source.csv"))?;
        }
        if let Some(rec) = &last_target_eval {
            rec.write_per_image_csv(&out_dir.join("per_image_target.csv"))?;
        }
    }
    Ok(TrainOutcome {
        final_step: state.step,
        best_metric: state.best_metric,
        source_eval: if finished { last_source_eval } else { None },
        target_eval: if finished { last_target_eval } else { None },
        last_checkpoint: last_path,
    })
}

// --- ablation harness ---

/// The loss-component rows of the ablation protocol, plus the supervised
/// baseline.
pub const ABLATION_ROWS: [(&str, &[LossFlag]); 6] = [
    ("supervised", &[]),
    ("ent_src", &[LossFlag::EntSrc]),
    ("ent_tgt", &[LossFlag::EntTgt]),
    ("ent_src+ent_tgt", &[LossFlag::EntSrc, LossFlag::EntTgt]),
    ("adv", &[LossFlag::Adv]),
    (
        "ent_src+ent_tgt+adv",
        &[LossFlag::EntSrc, LossFlag::EntTgt, LossFlag::Adv],
    ),
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub components: String,
    pub source_mae: f64,
    pub source_mse: f64,
    pub adapted_mae: f64,
    pub adapted_mse: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str =
    "components,source_mae,source_mse,adapted_mae,adapted_mse,error";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut text = String::from(ABLATION_CSV_HEADER);
        text.push('\n');
        for row in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.components,
                row.source_mae,
                row.source_mse,
                row.adapted_mae,
                row.adapted_mse,
                row.error.as_deref().unwrap_or("")
            ));
        }
        text
    }
}

/// Trains the five loss-component combinations plus the supervised baseline
/// with a shared seed and reports source/adapted MAE and MSE per row. Run
/// failures are recorded per-row; the report is still emitted.
pub fn run_ablation(
    cfg: &Config,
    source: &Dataset,
    target: &Dataset,
    out_dir: &Path,
) -> Result<AblationReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (name, flags) in ABLATION_ROWS {
        let mut row_cfg = cfg.clone();
        row_cfg.train.enabled_losses = flags.to_vec();
        let row_dir = out_dir.join(name.replace('+', "_"));
        let row = match train(
            &row_cfg,
            source,
            Some(target),
            &row_dir,
            &TrainOptions::default(),
        ) {
            Ok(outcome) => {
                let src = outcome.source_eval.as_ref();
                let tgt = outcome.target_eval.as_ref();
                match (src, tgt) {
                    (Some(s), Some(t)) => AblationRow {
                        components: name.into(),
                        source_mae: s.mae,
                        source_mse: s.mse,
                        adapted_mae: t.mae,
                        adapted_mse: t.mse,
                        error: None,
                    },
                    _ => AblationRow {
                        components: name.into(),
                        source_mae: f64::NAN,
                        source_mse: f64::NAN,
                        adapted_mae: f64::NAN,
                        adapted_mse: f64::NAN,
                        error: Some("run produced no final evaluation".into()),
                    },
                }
            }
            Err(e) => AblationRow {
                components: name.into(),
                source_mae: f64::NAN,
                source_mse: f64::NAN,
                adapted_mae: f64::NAN,
                adapted_mse: f64::NAN,
                error: Some(e.to_string().replace(',', ";")),
            },
        };
        log::info!(
            "ablation row {}: source mae {:.3}, adapted mae {:.3}",
            row.components,
            row.source_mae,
            row.adapted_mae
        );
        rows.push(row);
    }
    let report = AblationReport { rows };
    let path = out_dir.join("ablation_report.csv");
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, Domain, SceneParams};
    use crate::network::BackboneVariant;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.variant = BackboneVariant::Tiny;
        cfg.model.channels = 16;
        cfg.model.slots_per_cell = 2;
        cfg.augment.crop_size = 32;
        cfg.data.source.image_size = 32;
        cfg.data.target.image_size = 32;
        cfg.train.batch_source = 2;
        cfg.train.batch_target = 2;
        cfg.train.lr_main = 1e-3;
        cfg.train.seed = 5;
        cfg
    }

    fn samples(params: &SceneParams, n: usize, domain: Domain, labeled: bool) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed + i as u64);
                generate_scene(params, &mut rng)
                    .unwrap()
                    .into_sample(format!("{domain}{i}"), domain, labeled)
            })
            .collect()
    }

    fn source_batch(cfg: &Config, n: usize) -> Vec<Sample> {
        let params = SceneParams {
            image_size: cfg.data.source.image_size,
            count_range: (3, 6),
            ..SceneParams::default()
        };
        samples(&params, n, Domain::Source, true)
    }

    fn target_batch(cfg: &Config, n: usize) -> Vec<Sample> {
        let params = SceneParams {
            image_size: cfg.data.target.image_size,
            count_range: (3, 6),
            dot_radius_range: (4.0, 5.0),
            seed: 50,
            ..SceneParams::default()
        };
        samples(&params, n, Domain::Target, false)
    }

    #[test]
    fn supervised_step_logs_zero_adaptation_losses() {
        let mut cfg = small_config();
        cfg.train.enabled_losses = vec![];
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        let log = train_step(&mut state, &src, &tgt, &cfg).unwrap();
        assert_eq!(log.l_ent_x, 0.0);
        assert_eq!(log.l_ent_y, 0.0);
        assert_eq!(log.l_adv, 0.0);
        assert!(log.l_loc > 0.0);
        assert!(log.l_cls > 0.0);
        // The discriminator still trains.
        assert!(log.total_dis > 0.0);
    }

    #[test]
    fn zero_adv_weight_still_trains_the_discriminator() {
        let mut cfg = small_config();
        cfg.loss.lambda_adv = 0.0;
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        let before: Vec<f64> = state
            .disc
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        train_step(&mut state, &src, &tgt, &cfg).unwrap();
        let after: Vec<f64> = state
            .disc
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        assert_ne!(before, after);
    }

    #[test]
    fn total_main_recombines_from_logged_components() {
        let cfg = small_config();
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        let log = train_step(&mut state, &src, &tgt, &cfg).unwrap();
        let w = cfg.loss.weights();
        let recombined = w.lambda_loc * log.l_loc
            + w.lambda_cls * log.l_cls
            + w.lambda_ent * (log.l_ent_x + log.l_ent_y)
            + w.lambda_adv * log.l_adv;
        let rel = (log.total_main - recombined).abs() / log.total_main.abs().max(1e-12);
        assert!(rel < 1e-6);
    }

    #[test]
    fn main_update_never_touches_the_discriminator() {
        let cfg = small_config();
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        let disc_before: Vec<f64> = state
            .disc
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        let (_, concats) = main_update(&mut state, &src, &tgt, &cfg).unwrap();
        let disc_after: Vec<f64> = state
            .disc
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        assert_eq!(disc_before, disc_after, "main update must freeze the discriminator");

        let main_before: Vec<f64> = state
            .main
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        discriminator_update(&mut state, &concats, &cfg).unwrap();
        let main_after: Vec<f64> = state
            .main
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();
        assert_eq!(main_before, main_after, "disc update must detach the main network");
    }

    #[test]
    fn identical_seeds_give_identical_step_logs() {
        let cfg = small_config();
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut logs = Vec::new();
        for _ in 0..2 {
            let mut state = TrainState::new(&cfg, 2, 2).unwrap();
            let mut run = Vec::new();
            for _ in 0..3 {
                run.push(train_step(&mut state, &src, &tgt, &cfg).unwrap());
            }
            logs.push(run);
        }
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn trainer_rejects_labeled_target_samples() {
        let cfg = small_config();
        let src = source_batch(&cfg, 1);
        let mut tgt = target_batch(&cfg, 1);
        tgt[0].points = Some(crate::geometry::PointSet::default());
        let mut state = TrainState::new(&cfg, 1, 1).unwrap();
        assert!(matches!(
            train_step(&mut state, &src, &tgt, &cfg),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn empty_gt_scene_trains_classification_only() {
        let cfg = small_config();
        let params = SceneParams {
            image_size: 32,
            count_range: (0, 0),
            ..SceneParams::default()
        };
        let src = samples(&params, 2, Domain::Source, true);
        let mut state = TrainState::new(&cfg, 2, 0).unwrap();
        let log = train_step(&mut state, &src, &[], &cfg).unwrap();
        assert_eq!(log.l_loc, 0.0);
        assert!(log.l_cls > 0.0);
        assert_eq!(log.total_dis, 0.0);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = small_config();
        let src = source_batch(&cfg, 2);
        let tgt = target_batch(&cfg, 2);
        let mut state = TrainState::new(&cfg, 2, 2).unwrap();
        for _ in 0..2 {
            train_step(&mut state, &src, &tgt, &cfg).unwrap();
        }
        let path = std::env::temp_dir().join(format!("pointda_ckpt_{}.ckpt", std::process::id()));
        save_checkpoint(&state, &cfg, &path).unwrap();
        let restored = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(restored.step, state.step);
        assert_eq!(restored.rng, state.rng);
        assert_eq!(
            state.main.param_slices().concat(),
            restored.main.param_slices().concat()
        );
        assert_eq!(
            state.adam_main.m.concat(),
            restored.adam_main.m.concat()
        );
        // Continuing from the restored state matches the original.
        let mut a = state;
        let mut b = restored;
        let log_a = train_step(&mut a, &src, &tgt, &cfg).unwrap();
        let log_b = train_step(&mut b, &src, &tgt, &cfg).unwrap();
        assert_eq!(log_a, log_b);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_rejects_a_different_config() {
        let cfg = small_config();
        let mut state = TrainState::new(&cfg, 1, 1).unwrap();
        state.step = 1;
        let path = std::env::temp_dir().join(format!("pointda_ckpt2_{}.ckpt", std::process::id()));
        save_checkpoint(&state, &cfg, &path).unwrap();
        let mut other = cfg.clone();
        other.train.seed += 1;
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(Error::ContractViolation(_))
        ));
        std::fs::remove_file(&path).ok();
    }
}
