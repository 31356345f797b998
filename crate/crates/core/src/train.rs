//! Training engine: identity-balanced batch sampling, Adam, the optimization
//! loop, and per-epoch checkpointing. (seed, config, data) fully determine
//! the parameter trajectory; the sampler RNG position is checkpointed so a
//! resumed run continues the same stream.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint::{latest_dir, AdamState, Checkpoint};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{identity_set, tokenize, DatasetRecord, TokenizedCaption, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchInputs, LossBreakdown};
use crate::model::{Model, ParamStore};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One batch slot: a record, one of its captions, and a flip flag.
#[derive(Clone, Copy)]
struct Slot {
    record: usize,
    caption: usize,
    flip: bool,
}

/// Per-epoch summary returned in the training history.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub history: Vec<EpochStats>,
}

/// Step-decayed learning rate for a 1-based epoch.
fn epoch_lr(config: &RunConfig, epoch: usize) -> f64 {
    let t = &config.train;
    if epoch <= t.warmup_epochs {
        return t.learning_rate * epoch as f64 / (t.warmup_epochs + 1) as f64;
    }
    if epoch >= t.decay_epoch {
        t.learning_rate * t.decay_factor
    } else {
        t.learning_rate
    }
}

/// Identity-balanced batches: shuffle each identity's records, chunk them
/// into groups of Q, shuffle the groups, and fill batches with P = batch/Q
/// groups. Incomplete trailing batches are dropped. Guarantees every anchor
/// whose identity has >= 2 images gets an in-batch companion image.
fn sample_epoch(
    records: &[DatasetRecord],
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Slot>> {
    let q = config.train.images_per_identity;
    let batch = config.train.batch_size;
    let mut by_identity: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, rec) in records.iter().enumerate() {
        by_identity.entry(rec.identity_id).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for indices in by_identity.values() {
        let mut order = indices.clone();
        order.shuffle(rng);
        for chunk in order.chunks(q) {
            let mut g = chunk.to_vec();
            // top up a short trailing chunk so companions stay available
            while g.len() < q && indices.len() >= 2 {
                let extra = indices[rng.gen_range(0..indices.len())];
                if !g.contains(&extra) {
                    g.push(extra);
                }
            }
            groups.push(g);
        }
    }
    groups.shuffle(rng);
    let per_batch = batch / q;
    let mut batches = Vec::new();
    for window in groups.chunks(per_batch) {
        if window.len() < per_batch {
            break;
        }
        let mut slots = Vec::with_capacity(batch);
        for group in window {
            for &record in group {
                let caption = rng.gen_range(0..records[record].captions.len());
                let flip = config.train.horizontal_flip && rng.gen_bool(0.5);
                slots.push(Slot { record, caption, flip });
            }
        }
        batches.push(slots);
    }
    batches
}

/// In-batch weak-positive index per anchor: the lowest-index sample with the
/// same identity and a different image, falling back to the anchor itself.
fn companions(slots: &[Slot], records: &[DatasetRecord]) -> Vec<usize> {
    slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            slots
                .iter()
                .position(|o| {
                    records[o.record].identity_id == records[s.record].identity_id
                        && o.record != s.record
                })
                .unwrap_or(i)
        })
        .collect()
}

fn flip_horizontal(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out
}

fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn adam_step(
    model: &mut Model,
    state: &mut AdamState,
    grads: &ParamStore,
    lr: f64,
    train: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, grad) in grads {
        let lr = if name.starts_with("losses.id.") {
            lr * train.classifier_lr_scale
        } else if name.starts_with("prl.") {
            lr * train.relation_lr_scale
        } else if name.starts_with("pfl.wam.") {
            lr * train.wam_lr_scale
        } else {
            lr
        };
        let param = model.params.get_mut(name).expect("gradient for known parameter");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        m.zip_mut_with(grad, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        v.zip_mut_with(grad, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        let (m, v) = (&state.first[name], &state.second[name]);
        ndarray::Zip::from(param).and(m).and(v).for_each(|p, &m, &v| {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        });
    }
}

/// Run the optimization loop. Writes a JSON-lines step log and a
/// `checkpoint-latest` directory per epoch under `out_dir`. With
/// `resume = true` and an existing checkpoint, continues from the saved
/// epoch, optimizer state, and RNG position.
pub fn train(
    config: &RunConfig,
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::data("empty training split"));
    }
    std::fs::create_dir_all(out_dir)?;
    let identities = identity_set(records);
    let num_classes = identities.len();
    if config.loss.num_classes != num_classes {
        return Err(Error::config(format!(
            "loss.num_classes = {} but the training split has {} identities",
            config.loss.num_classes, num_classes
        )));
    }
    let label_of = |id: u32| identities.binary_search(&id).expect("identity in set");

    let ckpt_dir = latest_dir(out_dir);
    let (mut model, mut optimizer, mut rng, start_epoch) = if resume && ckpt_dir.join("meta.json").exists() {
        let ckpt = Checkpoint::load(&ckpt_dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        (ckpt.model, ckpt.optimizer, rng, ckpt.epoch)
    } else {
        let model = Model::new(
            config.model.clone(),
            num_classes,
            vocab.table_size(),
            config.train.seed,
        )?;
        (
            model,
            AdamState::default(),
            ChaCha8Rng::seed_from_u64(config.train.seed),
            0,
        )
    };
    if let Some(path) = &config.model.visual.pretrained_path {
        let weights = crate::checkpoint::read_archive(Path::new(path))?;
        model.load_pretrained(&weights)?;
    }

    // tokenize every caption and render/load every image once up front
    let captions: Vec<Vec<TokenizedCaption>> = records
        .iter()
        .map(|r| {
            r.captions
                .iter()
                .map(|c| tokenize(c, vocab, config.model.max_caption_len))
                .collect()
        })
        .collect::<Result<_>>()?;
    let images: Vec<Array3<f64>> = records
        .iter()
        .map(|r| r.image.load(None))
        .collect::<Result<_>>()?;

    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("train-log.jsonl"))?,
    );
    let mut history = Vec::new();
    let mut step = optimizer.step;
    for epoch in start_epoch + 1..=config.train.epochs {
        let lr = epoch_lr(config, epoch);
        let batches = sample_epoch(records, config, &mut rng);
        let mut loss_sum = 0.0;
        for slots in &batches {
            step += 1;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut visual = Vec::with_capacity(slots.len());
            let mut text = Vec::with_capacity(slots.len());
            let mut labels = Vec::with_capacity(slots.len());
            let mut ids = Vec::with_capacity(slots.len());
            for slot in slots {
                let image = if slot.flip {
                    flip_horizontal(&images[slot.record])
                } else {
                    images[slot.record].clone()
                };
                visual.push(model.forward_visual(&mut tape, &vars, &image)?);
                let (t, _) = model.forward_text(&mut tape, &vars, &captions[slot.record][slot.caption])?;
                text.push(t);
                labels.push(label_of(records[slot.record].identity_id));
                ids.push(records[slot.record].identity_id);
            }
            let batch = BatchInputs {
                visual: &visual,
                text: &text,
                labels: &labels,
                identities: &ids,
                companions: &companions(slots, records),
            };
            let (objective, breakdown) = total_loss(&mut tape, &batch, &vars, &config.loss, step)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}; batch identities {ids:?}, \
                     breakdown {}",
                    serde_json::to_string(&breakdown).unwrap_or_default()
                )));
            }
            loss_sum += breakdown.total;
            write_log_line(&mut log, &breakdown)?;
            let grads = tape.backward(objective);
            let mut named = model.collect_gradients(&vars, &grads);
            if let Some(clip) = config.train.grad_clip {
                let norm = global_norm(&named);
                if norm > clip {
                    let scale = clip / norm;
                    for g in named.values_mut() {
                        g.mapv_inplace(|x| x * scale);
                    }
                }
            }
            adam_step(&mut model, &mut optimizer, &named, lr, &config.train);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            learning_rate: lr,
            steps: batches.len(),
        };
        history.push(stats);
        let ckpt = Checkpoint {
            config: config.clone(),
            model: model.clone(),
            optimizer: optimizer.clone(),
            vocab: vocab.clone(),
            epoch,
            rng_word_pos: rng.get_word_pos(),
            identities: identities.clone(),
        };
        ckpt.save(&ckpt_dir)?;
    }
    log.flush()?;
    std::fs::write(
        out_dir.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    Ok(TrainOutcome {
        checkpoint_dir: ckpt_dir,
        history,
    })
}

fn write_log_line(log: &mut impl Write, breakdown: &LossBreakdown) -> Result<()> {
    let line = serde_json::to_string(breakdown)?;
    writeln!(log, "{line}")?;
    Ok(())
}
