//! Training loop, learning-rate schedule, inference modes and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "INADECKP"
//! version    u32      CHECKPOINT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u64      number of tensors
//! count × {
//!   name_len u32, name (UTF-8),
//!   ndim     u32, dims (ndim × u64),
//!   data     prod(dims) × f64
//! }
//! end        8 bytes  "INADEEND"
//! ```
//!
//! Tensor names are the parameter/buffer names of the model store plus
//! optimizer moments under `adam.{g,d,e}.{m,v}.<param>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{collate, Sample};
use crate::error::{Error, Result};
use crate::inade::{sample_noise_bank, NoiseBank};
use crate::label_maps::LabelPair;
use crate::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, perceptual_loss, weighted_total, LossWeights, RandomConvPyramid,
};
use crate::metrics::SynthesisModel;
use crate::networks::{build_default_models, generator_forward, ModelConfig, Models};
use crate::optim::Adam;
use crate::params::{Ctx, Group};
use crate::remap::{encode_perturbations, remap_noise, PerturbationSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INADECKP";
pub const CHECKPOINT_END: &[u8; 8] = b"INADEEND";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub decay_start: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            epochs: 200,
            decay_start: 100,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.decay_start > self.epochs {
            return Err(Error::config("need 1 ≤ epochs and decay_start ≤ epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// `(lr_g, lr_d)` for a 1-based epoch: flat up to `decay_start`, then
/// linear to zero at `epochs`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<(f64, f64)> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    if epoch <= cfg.decay_start {
        return Ok((cfg.lr_g, cfg.lr_d));
    }
    let f = (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64;
    Ok((cfg.lr_g * f, cfg.lr_d * f))
}

/// Scalars recorded for one training step; one JSON line in the log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub d_loss: f64,
    pub hinge_g: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub g_total: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

// stream layout of the root seed
const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1 << 62;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Models, optimizers and the position in the data stream. The RNG state
/// is the pair `(config.seed, step)`: step `s` draws all its noise from
/// stream `s` and the sample order of epoch `e` comes from stream
/// `2^62 + e`, so a resumed run continues exactly.
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_e: Adam,
    pub step: u64,
    extractor: RandomConvPyramid,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = build_default_models(&config.model, &mut stream_rng(config.seed, INIT_STREAM))?;
        let adam = |lr| Adam::new(lr, config.adam_beta1, config.adam_beta2);
        Ok(Self {
            opt_g: adam(config.lr_g),
            opt_d: adam(config.lr_d),
            opt_e: adam(config.lr_g),
            models,
            step: 0,
            extractor: RandomConvPyramid::default(),
            config,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        (dataset_len / self.config.batch_size).max(1)
    }

    /// Dataset indices of the batch used at 0-based step `step`.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        let per = self.steps_per_epoch(dataset_len) as u64;
        let epoch = step / per;
        let within = (step % per) as usize;
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut stream_rng(self.config.seed, ORDER_STREAM + epoch));
        let b = self.config.batch_size.min(dataset_len);
        order[within * b..(within + 1) * b].to_vec()
    }

    /// One discriminator and one generator/encoder update on the next batch.
    pub fn train_step(&mut self, dataset: &[Sample]) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(Error::config("empty dataset"));
        }
        let idx = self.batch_indices(dataset.len(), self.step);
        let per = self.steps_per_epoch(dataset.len()) as u64;
        let epoch = ((self.step / per) as usize + 1).min(self.config.epochs);
        let samples: Vec<&Sample> = idx.iter().map(|&i| &dataset[i]).collect();
        let batch = collate(&samples)?;
        self.step += 1;
        let step = self.step;
        let mut rng = stream_rng(self.config.seed, step);
        let cfg = &self.config.model;
        let banks = batch.sample_banks(cfg.noise_channels, &mut rng)?;
        let z = Tensor::randn(&[batch.len(), cfg.z_dim], &mut rng);
        let (lr_g, lr_d) = lr_at_epoch(&self.config, epoch)?;
        let w = &self.config.weights;
        let n = batch.len();
        let m = &self.models;

        let g = Graph::new();
        let ctx_g = Ctx::train(&g, &m.store, &[Group::Generator, Group::Encoder]);
        let ctx_d = Ctx::train(&g, &m.store, &[Group::Discriminator]);
        let real = g.constant(batch.images.clone());

        // generator and encoder objective, discriminator frozen
        let perturb = m.encoder.perturbations(&ctx_g, real, &batch.pairs)?;
        let bank_vars: Vec<_> = banks
            .iter()
            .zip(&perturb)
            .map(|(b, p)| p.remap(b.bind(&g, false)))
            .collect();
        let kl = perturb
            .iter()
            .map(|p| p.kl())
            .reduce(|a, b| a.add(b))
            .expect("non-empty batch")
            .scale(1.0 / n as f64);
        let fake = m.generator.forward(&ctx_g, &batch.pairs, &bank_vars, g.constant(z), None)?;
        let cond = m.discriminator.conditions(&g, &batch.pairs)?;
        let both = g.concat(&[real, fake], 0);
        let cond2 = g.concat(&[cond, cond], 0);
        let feats = m.discriminator.forward_with(&ctx_g, both, cond2)?;
        let (real_f, fake_f) = (half(&feats, 0, n), half(&feats, n, n));
        let hinge_g = hinge_g_loss(&logits(&fake_f));
        let fm = feature_matching_loss(&real_f, &fake_f, w.fm_start)?;
        let perc = perceptual_loss(&self.extractor, real, fake, w.perc_start)?;
        let g_total = weighted_total(hinge_g, fm, perc, kl, w);

        // discriminator objective on the detached fake
        let both_d = g.concat(&[real, fake.detach()], 0);
        let feats_d = m.discriminator.forward_with(&ctx_d, both_d, cond2)?;
        let (rl, fl) = (logits(&half(&feats_d, 0, n)), logits(&half(&feats_d, n, n)));
        let d_loss = hinge_d_loss(&rl, &fl);

        let rec = StepRecord {
            epoch,
            step,
            d_loss: d_loss.value().item(),
            hinge_g: hinge_g.value().item(),
            feature_matching: fm.value().item(),
            perceptual: perc.value().item(),
            kl: kl.value().item(),
            g_total: g_total.value().item(),
            lr_g,
            lr_d,
        };
        let named = [
            ("d_loss", rec.d_loss),
            ("hinge_g", rec.hinge_g),
            ("feature_matching", rec.feature_matching),
            ("perceptual", rec.perceptual),
            ("kl", rec.kl),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{name} = {v} (epoch {epoch}, batch {idx:?})"),
            });
        }

        let grads_g = g.backward(g_total);
        let gen_grads = ctx_g.group_grads(&grads_g, Group::Generator);
        let enc_grads = ctx_g.group_grads(&grads_g, Group::Encoder);
        drop(grads_g);
        let grads_d = g.backward(d_loss);
        let disc_grads = ctx_d.group_grads(&grads_d, Group::Discriminator);
        let mut updates = ctx_g.take_updates();
        updates.extend(ctx_d.take_updates());
        drop(ctx_g);
        drop(ctx_d);

        let store = &mut self.models.store;
        store.apply_updates(updates);
        self.opt_g.lr = lr_g;
        self.opt_e.lr = lr_g;
        self.opt_d.lr = lr_d;
        self.opt_g.step(store, &gen_grads);
        self.opt_e.step(store, &enc_grads);
        self.opt_d.step(store, &disc_grads);
        Ok(rec)
    }

    /// Runs `steps` further steps, handing every record to `on_step`.
    pub fn run(
        &mut self,
        dataset: &[Sample],
        steps: u64,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let rec = self.train_step(dataset)?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Batch rows `start..start + n` of every discriminator feature.
fn half<'g>(f: &[Vec<Var<'g>>], start: usize, n: usize) -> Vec<Vec<Var<'g>>> {
    f.iter()
        .map(|s| s.iter().map(|v| v.narrow(0, start, n)).collect())
        .collect()
}

fn logits<'g>(f: &[Vec<Var<'g>>]) -> Vec<Var<'g>> {
    f.iter().map(|s| *s.last().expect("non-empty feature list")).collect()
}

impl SynthesisModel for Models {
    fn noise_channels(&self) -> usize {
        self.config.noise_channels
    }

    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn generate(&self, pair: &LabelPair, bank: &NoiseBank, z: &[f64]) -> Result<Tensor> {
        generator_forward(&self.generator, &self.store, pair, bank, z)
    }
}

// ---- inference -------------------------------------------------------------

/// Prior bank and latent for a seed: ChaCha8 stream 0, bank first.
pub fn prior_noise(pair: &LabelPair, noise_channels: usize, z_dim: usize, seed: u64) -> Result<(NoiseBank, Vec<f64>)> {
    let mut rng = stream_rng(seed, 0);
    let bank = sample_noise_bank(pair.num_instances() as usize, noise_channels, &mut rng)?;
    let z = Tensor::randn(&[z_dim], &mut rng).into_data();
    Ok((bank, z))
}

pub fn sample_prior(models: &Models, pair: &LabelPair, seed: u64) -> Result<Tensor> {
    let (bank, z) = prior_noise(pair, models.noise_channels(), models.z_dim(), seed)?;
    models.generate(pair, &bank, &z)
}

fn check_reference(pair: &LabelPair, reference: &Sample) -> Result<()> {
    if &reference.pair != pair {
        return Err(Error::PairMismatch);
    }
    Ok(())
}

pub fn sample_reference(models: &Models, pair: &LabelPair, reference: &Sample, seed: u64) -> Result<Tensor> {
    check_reference(pair, reference)?;
    let all: BTreeSet<u32> = (1..=pair.num_instances()).collect();
    sample_mixed(models, pair, reference, &all, seed)
}

/// Reference-guided rows for `guided`, prior rows elsewhere.
pub fn sample_mixed(
    models: &Models,
    pair: &LabelPair,
    reference: &Sample,
    guided: &BTreeSet<u32>,
    seed: u64,
) -> Result<Tensor> {
    check_reference(pair, reference)?;
    check_labels(pair, guided)?;
    let ps = encode_perturbations(&models.encoder, &models.store, &reference.image, &reference.pair)?;
    sample_with_perturbations(models, pair, &ps, guided, seed)
}

fn check_labels(pair: &LabelPair, labels: &BTreeSet<u32>) -> Result<()> {
    let max = pair.num_instances();
    match labels.iter().find(|&&l| l == 0 || l > max) {
        Some(&label) => Err(Error::LabelOutOfRange { label, max }),
        None => Ok(()),
    }
}

/// Prior noise for `seed` with the rows in `guided` replaced by their
/// remapped values under `ps`.
pub fn sample_with_perturbations(
    models: &Models,
    pair: &LabelPair,
    ps: &PerturbationSet,
    guided: &BTreeSet<u32>,
    seed: u64,
) -> Result<Tensor> {
    check_labels(pair, guided)?;
    let (bank, z) = prior_noise(pair, models.noise_channels(), models.z_dim(), seed)?;
    let mut mixed = bank.clone();
    if !guided.is_empty() {
        let remapped = remap_noise(&bank, ps)?;
        for &l in guided {
            let r = l as usize - 1;
            mixed = mixed.with_row(l, remapped.n_gamma().row(r), remapped.n_beta().row(r))?;
        }
    }
    models.generate(pair, &mixed, &z)
}

/// Prior sample of `base_seed` with instance `instance` redrawn from
/// `row_seed`; `z` and all other rows are kept.
pub fn resample_instance(models: &Models, pair: &LabelPair, base_seed: u64, instance: u32, row_seed: u64) -> Result<Tensor> {
    let (bank, z) = prior_noise(pair, models.noise_channels(), models.z_dim(), base_seed)?;
    let bank = bank.redraw_row(instance, &mut stream_rng(row_seed, 1))?;
    models.generate(pair, &bank, &z)
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub adam_steps: [u64; 3],
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(tr: &Trainer) -> Vec<u8> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        config: tr.config.clone(),
        step: tr.step,
        adam_steps: [tr.opt_g.steps_taken(), tr.opt_d.steps_taken(), tr.opt_e.steps_taken()],
    };
    let store = &tr.models.store;
    let mut tensors: Vec<(String, Tensor)> = store
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors.extend(tr.opt_g.named_state("adam.g", store));
    tensors.extend(tr.opt_d.named_state("adam.d", store));
    tensors.extend(tr.opt_e.named_state("adam.e", store));

    let meta = serde_json::to_vec(&meta).expect("serializable meta");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (n, t) in &tensors {
        write_tensor(&mut out, n, t);
    }
    out.extend_from_slice(CHECKPOINT_END);
    out
}

pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(tr);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::corrupt(self.path, format!("implausible length {v}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::schema(
            path,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::schema(path, e.to_string()))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::schema(path, "metadata version disagrees with header"));
    }
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| Error::corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        if numel.checked_mul(8).is_none_or(|b| b > bytes.len()) {
            return Err(Error::corrupt(path, format!("tensor {name} is too large")));
        }
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(&dims, data)?);
    }
    if r.take(8)? != CHECKPOINT_END || r.pos != bytes.len() {
        return Err(Error::corrupt(path, "missing end marker"));
    }

    let mut tr = Trainer::new(meta.config.clone())?;
    let expected: Vec<String> = tr.models.store.named_tensors().map(|(n, _)| n.to_string()).collect();
    for name in &expected {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::schema(path, format!("missing tensor {name}")))?;
        if !tr.models.store.assign(name, t.clone()) {
            return Err(Error::schema(path, format!("tensor {name} has the wrong shape")));
        }
    }
    let store = &tr.models.store;
    let mut unknown = Vec::new();
    unknown.extend(tr.opt_g.load_state("adam.g", meta.adam_steps[0], store, &tensors));
    unknown.extend(tr.opt_d.load_state("adam.d", meta.adam_steps[1], store, &tensors));
    unknown.extend(tr.opt_e.load_state("adam.e", meta.adam_steps[2], store, &tensors));
    let known: BTreeSet<&str> = expected.iter().map(String::as_str).collect();
    unknown.extend(
        tensors
            .keys()
            .filter(|k| !known.contains(k.as_str()) && !k.starts_with("adam."))
            .cloned(),
    );
    if !unknown.is_empty() {
        return Err(Error::schema(path, format!("unexpected tensors: {unknown:?}")));
    }
    tr.step = meta.step;
    Ok(tr)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};
    use crate::remap::EncoderConfig;

    pub(crate) fn tiny_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            seed,
            model: ModelConfig {
                num_classes: 4,
                noise_channels: 6,
                z_dim: 8,
                ngf: 2,
                gen_max_width: 8,
                ndf: 4,
                disc_max_width: 8,
                encoder: EncoderConfig {
                    widths: vec![4, 4],
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<Sample> {
        generate_shapes(&ShapesConfig {
            num_samples: n,
            seed: 11,
            ..ShapesConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 50).unwrap(), (1e-4, 4e-4));
        assert_eq!(lr_at_epoch(&cfg, 100).unwrap(), (1e-4, 4e-4));
        let (g, d) = lr_at_epoch(&cfg, 150).unwrap();
        assert_eq!((g, d), (1e-4 * 0.5, 4e-4 * 0.5));
        assert_eq!(lr_at_epoch(&cfg, 200).unwrap(), (0.0, 0.0));
        assert!(matches!(lr_at_epoch(&cfg, 0), Err(Error::EpochOutOfRange { .. })));
        assert!(matches!(lr_at_epoch(&cfg, 201), Err(Error::EpochOutOfRange { .. })));
        for e in 1..=200 {
            let (g, d) = lr_at_epoch(&cfg, e).unwrap();
            assert_eq!(d, 4.0 * g, "TTUR ratio at epoch {e}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr_g: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay_start: 201, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn steps_are_finite_and_reproducible() {
        let data = tiny_data(6);
        let run = |seed| {
            let mut tr = Trainer::new(tiny_train_config(seed)).unwrap();
            tr.run(&data, 4, |_, _| Ok(())).unwrap()
        };
        let a = run(5);
        assert!(a.iter().all(|r| r.g_total.is_finite() && r.d_loss.is_finite()));
        assert_eq!(a, run(5));
        assert_ne!(a, run(6));
    }

    #[test]
    fn zero_weights_leave_pure_hinge() {
        let data = tiny_data(4);
        let mut cfg = tiny_train_config(1);
        cfg.weights.lambda_fm = 0.0;
        cfg.weights.lambda_perc = 0.0;
        cfg.weights.lambda_kl = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        for r in tr.run(&data, 2, |_, _| Ok(())).unwrap() {
            assert_eq!(r.g_total, r.hinge_g);
            assert!(r.feature_matching > 0.0 && r.perceptual > 0.0);
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let tr = Trainer::new(tiny_train_config(2)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| tr.batch_indices(6, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        let epoch = |e: u64| (3 * e..3 * e + 3).flat_map(|s| tr.batch_indices(6, s)).collect::<Vec<_>>();
        assert_ne!(epoch(0), epoch(1));
    }

    #[test]
    fn inference_modes() {
        let data = tiny_data(3);
        let tr = Trainer::new(tiny_train_config(3)).unwrap();
        let m = &tr.models;
        let s = &data[0];
        let l = s.pair.num_instances();
        let prior = sample_prior(m, &s.pair, 9).unwrap();
        assert_eq!(prior.shape(), &[3, 64, 64]);
        assert_eq!(prior, sample_prior(m, &s.pair, 9).unwrap());
        assert_ne!(prior, sample_prior(m, &s.pair, 10).unwrap());

        let none = BTreeSet::new();
        let all: BTreeSet<u32> = (1..=l).collect();
        assert_eq!(sample_mixed(m, &s.pair, s, &none, 9).unwrap(), prior);
        let full = sample_reference(m, &s.pair, s, 9).unwrap();
        assert_eq!(sample_mixed(m, &s.pair, s, &all, 9).unwrap(), full);
        assert_ne!(full, prior);
        let id = PerturbationSet::identity(l as usize);
        assert_eq!(sample_with_perturbations(m, &s.pair, &id, &all, 9).unwrap(), prior);

        assert!(matches!(sample_reference(m, &s.pair, &data[1], 9), Err(Error::PairMismatch)));
        let bad: BTreeSet<u32> = [l + 1].into();
        assert!(matches!(sample_mixed(m, &s.pair, s, &bad, 9), Err(Error::LabelOutOfRange { .. })));

        let r1 = resample_instance(m, &s.pair, 9, 2, 100).unwrap();
        assert_eq!(r1, resample_instance(m, &s.pair, 9, 2, 100).unwrap());
        assert_ne!(r1, prior);
        assert!(matches!(resample_instance(m, &s.pair, 9, l + 1, 1), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn mixed_sampling_keeps_unguided_fields() {
        use crate::inade::modulation_field;
        let data = tiny_data(1);
        let tr = Trainer::new(tiny_train_config(4)).unwrap();
        let m = &tr.models;
        let s = &data[0];
        let ps = encode_perturbations(&m.encoder, &m.store, &s.image, &s.pair).unwrap();
        let (bank, _) = prior_noise(&s.pair, 6, 8, 1).unwrap();
        let remapped = remap_noise(&bank, &ps).unwrap();
        let mixed = bank
            .with_row(2, remapped.n_gamma().row(1), remapped.n_beta().row(1))
            .unwrap();
        let inst = s.pair.instances().grid();
        for layer in m.generator.inade_layers() {
            let (d, t) = (layer.distribution(&m.store), layer.transform(&m.store));
            let a = modulation_field(&s.pair, &bank, &d, &t, 64, 64).unwrap();
            let b = modulation_field(&s.pair, &mixed, &d, &t, 64, 64).unwrap();
            let c = a.gamma.shape()[0];
            for p in 0..64 * 64 {
                if inst.data()[p] != 2 {
                    for k in 0..c {
                        assert_eq!(a.gamma.data()[k * 4096 + p], b.gamma.data()[k * 4096 + p]);
                        assert_eq!(a.beta.data()[k * 4096 + p], b.beta.data()[k * 4096 + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let data = tiny_data(6);
        let mut straight = Trainer::new(tiny_train_config(7)).unwrap();
        let all = straight.run(&data, 5, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(tiny_train_config(7)).unwrap();
        first.run(&data, 2, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let s = &data[0];
        assert_eq!(sample_prior(&resumed.models, &s.pair, 3).unwrap(), sample_prior(&first.models, &s.pair, 3).unwrap());
        let rest = resumed.run(&data, 3, |_, _| Ok(())).unwrap();
        assert_eq!(&all[2..], &rest[..]);
        assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&straight));

        let bytes = fs::read(&path).unwrap();
        let mut bumped = bytes.clone();
        bumped[8] = 2;
        assert!(matches!(decode_checkpoint(&bumped, &path), Err(Error::SchemaMismatch { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 20], &path), Err(Error::CorruptFile { .. })));
        assert!(matches!(decode_checkpoint(b"NOTACKPT", &path), Err(Error::CorruptFile { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::FileNotFound(_))));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = tiny_data(2);
        let mut tr = Trainer::new(tiny_train_config(8)).unwrap();
        let id = tr.models.store.find_param("gen.out.bias").unwrap();
        tr.models.store.param_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(tr.train_step(&data), Err(Error::NonFiniteLoss { step: 1, .. })));
    }
}
