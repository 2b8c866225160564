//! Alternating generator/discriminator optimization, checkpointing, and
//! the ablation switches for the loss terms.
//!
//! Determinism contract: a fixed [`TrainConfig::seed`] fixes parameter
//! initialization and per-step batch selection (each step derives its own
//! generator from (seed, step)), so identical runs produce identical
//! parameters, logs, and checkpoints, and resuming from a checkpoint
//! replays the remaining steps bit-exactly.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::loss::{
    hinge_d, hinge_g, l1_recon, patch_loss, perceptual, style_loss, total_loss, FeatureBackbone,
    LossComponents, LossReport, LossWeights,
};
use crate::mask::CompositeSample;
use crate::network::{
    discriminator_forward, generator_forward, DiscriminatorParams, GeneratorOutput,
    GeneratorParams, ModelConfig,
};
use crate::tensor::{add, affine, slice_sample, Shape, Tensor};
use checkpoint::{Checkpoint, Record};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-term switches that zero a weight factor in the total while the
/// component itself stays computed and logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub adversarial: bool,
    pub perceptual: bool,
    pub patch: bool,
    pub style: bool,
    pub reconstruction: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.adversarial || self.perceptual || self.patch || self.style || self.reconstruction
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub ablate: AblationFlags,
    pub seed: u64,
    pub backbone_seed: u64,
    /// Power iterations per step for spectral normalization.
    pub sn_iters: usize,
    pub log_every: u64,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub save_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 4,
            steps: 2000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            ablate: AblationFlags::default(),
            seed: 7,
            backbone_seed: 7001,
            sn_iters: 1,
            log_every: 10,
            save_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".to_string()));
        }
        if self.sn_iters == 0 {
            return Err(Error::Config("sn_iters must be ≥ 1".to_string()));
        }
        Ok(())
    }

    /// Loss weights with the ablated terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let z = |flag: bool, w: f64| if flag { 0.0 } else { w };
        LossWeights {
            adversarial: z(self.ablate.adversarial, self.weights.adversarial),
            perceptual: z(self.ablate.perceptual, self.weights.perceptual),
            patch: z(self.ablate.patch, self.weights.patch),
            style: z(self.ablate.style, self.weights.style),
            reconstruction: z(self.ablate.reconstruction, self.weights.reconstruction),
        }
    }
}

/// Bias-corrected adaptive-moment state for one parameter set.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One optimizer step over named parameters whose gradients were populated
/// by a preceding backward pass. A missing gradient counts as zero. Any
/// non-finite gradient aborts before touching parameters or state.
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, p) in params {
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: format!("gradient of {name}") });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let (m, v) = state
            .slots
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let mut data = p.data_mut();
        for i in 0..grad.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Losses observed at one step, measured before that step's updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub hinge_d: f64,
    pub losses: LossReport,
}

impl StepReport {
    /// Stable line format for loss logs; field names feed downstream
    /// tabulation.
    pub fn log_line(&self) -> String {
        format!(
            "step={} hinge_d={:.12e} adversarial={:.12e} perceptual={:.12e} patch={:.12e} style={:.12e} reconstruction={:.12e} total={:.12e}",
            self.step,
            self.hinge_d,
            self.losses.adversarial,
            self.losses.perceptual,
            self.losses.patch,
            self.losses.style,
            self.losses.reconstruction,
            self.losses.total,
        )
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stateless per-step seed so resumed runs replay batch selection.
pub(crate) fn step_seed(seed: u64, step: u64) -> u64 {
    splitmix64(seed ^ step.wrapping_mul(0xA24BAED4963EE407))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub backbone: FeatureBackbone,
    opt_g: AdamState,
    opt_d: AdamState,
    pub step: u64,
}

/// Stack a batch of samples into (gt, erased, weighted) tensors; images in
/// [0, 1], weighted mask as an n×1×h×w channel.
pub fn batch_tensors(batch: &[&CompositeSample]) -> Result<(Tensor, Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::InvalidArg { op: "batch_tensors", detail: "empty batch".to_string() });
    }
    let s = batch[0].gt.shape();
    let mut gt = Vec::with_capacity(batch.len() * s.len());
    let mut erased = Vec::with_capacity(batch.len() * s.len());
    let mut weighted = Vec::with_capacity(batch.len() * s.h * s.w);
    for sample in batch {
        if sample.gt.shape() != s {
            return Err(Error::Shape {
                op: "batch_tensors",
                detail: "samples with mixed extents".to_string(),
            });
        }
        gt.extend_from_slice(&sample.gt.to_vec());
        erased.extend_from_slice(&sample.erased.to_vec());
        weighted.extend_from_slice(sample.weighted.values());
    }
    Ok((
        Tensor::constant(Shape::new(batch.len(), s.c, s.h, s.w), gt)?,
        Tensor::constant(Shape::new(batch.len(), s.c, s.h, s.w), erased)?,
        Tensor::constant(Shape::new(batch.len(), 1, s.h, s.w), weighted)?,
    ))
}

/// [0,1] image to the network's internal [-1,1] range.
pub fn to_internal(img01: &Tensor) -> Result<Tensor> {
    affine(img01, 2.0, -1.0)
}

/// Internal [-1,1] back to [0,1].
pub fn to_unit(internal: &Tensor) -> Result<Tensor> {
    affine(internal, 0.5, 0.5)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = GeneratorParams::new(&cfg.model, &mut rng)?;
        let discriminator = DiscriminatorParams::new(&cfg.model, &mut rng)?;
        let backbone = FeatureBackbone::seeded(cfg.backbone_seed, cfg.model.img_channels);
        Ok(Trainer {
            cfg,
            generator,
            discriminator,
            backbone,
            opt_g: AdamState::default(),
            opt_d: AdamState::default(),
            step: 0,
        })
    }

    /// Deterministic with-replacement batch for a given step index.
    pub fn select_batch<'a>(
        &self,
        samples: &'a [CompositeSample],
        step: u64,
    ) -> Vec<&'a CompositeSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.cfg.seed, step));
        (0..self.cfg.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect()
    }

    /// Forward the generator on a batch without any optimization.
    pub fn infer(&self, batch: &[&CompositeSample]) -> Result<GeneratorOutput> {
        let (_, erased01, weighted) = batch_tensors(batch)?;
        let erased = to_internal(&erased01)?;
        generator_forward(&self.generator, &erased, &weighted)
    }

    /// One discriminator update on the hinge objective followed by one
    /// generator update on the weighted five-term total. The report holds
    /// losses evaluated before either update.
    pub fn train_step(&mut self, batch: &[&CompositeSample]) -> Result<StepReport> {
        let (gt01, erased01, weighted) = batch_tensors(batch)?;
        let gt = to_internal(&gt01)?;
        let erased = to_internal(&erased01)?;

        // Both phases see the same normalization state.
        self.discriminator.update_spectral(self.cfg.sn_iters)?;

        let gen_out = generator_forward(&self.generator, &erased, &weighted)?;

        // Discriminator phase; the fake batch is detached so no generator
        // gradients are spent here.
        let fake_d = gen_out.composited.detach();
        let real_scores = discriminator_forward(&self.discriminator, &gt, &weighted)?;
        let fake_scores = discriminator_forward(&self.discriminator, &fake_d, &weighted)?;
        let d_loss = hinge_d(&real_scores, &fake_scores)?;
        let d_loss_val = d_loss.item();
        debug_assert!(d_loss_val >= 0.0);
        d_loss.backward()?;
        let d_named = self.discriminator.named_params();
        adam_step(&d_named, &mut self.opt_d, self.cfg.lr_d, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)?;
        self.discriminator.zero_grads();

        // Generator phase against the just-updated discriminator.
        let fake_scores_g = discriminator_forward(&self.discriminator, &gen_out.composited, &weighted)?;
        let adversarial = hinge_g(&fake_scores_g)?;
        let perc_taps = self.backbone.perceptual_taps();
        let perceptual_term = perceptual(&self.backbone, &gen_out.refined, &gt, &perc_taps)?;
        let style_taps = self.backbone.style_taps();

        // Patch and style are defined per sample; average over the batch.
        let inv_n = 1.0 / batch.len() as f64;
        let mut patch_term: Option<Tensor> = None;
        let mut style_term: Option<Tensor> = None;
        for (i, sample) in batch.iter().enumerate() {
            let gt_i = slice_sample(&gt, i)?;
            let refined_i = slice_sample(&gen_out.refined, i)?;
            let p = patch_loss(&sample.occluded, &gt_i, &refined_i)?;
            patch_term = Some(match patch_term {
                Some(acc) => add(&acc, &p)?,
                None => p,
            });
            let st = style_loss(&self.backbone, &refined_i, &gt_i, &style_taps)?;
            style_term = Some(match style_term {
                Some(acc) => add(&acc, &st)?,
                None => st,
            });
        }
        let comps = LossComponents {
            adversarial,
            perceptual: perceptual_term,
            patch: affine(&patch_term.expect("nonempty batch"), inv_n, 0.0)?,
            style: affine(&style_term.expect("nonempty batch"), inv_n, 0.0)?,
            reconstruction: l1_recon(&gt, &gen_out.coarse, &gen_out.refined)?,
        };
        let (total, losses) = total_loss(&self.cfg.effective_weights(), &comps)?;
        total.backward()?;
        let g_named = self.generator.named_params();
        adam_step(&g_named, &mut self.opt_g, self.cfg.lr_g, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)?;
        self.generator.zero_grads();
        // The generator backward also deposited gradients on the
        // discriminator; discard them.
        self.discriminator.zero_grads();

        self.step += 1;
        Ok(StepReport { step: self.step, hinge_d: d_loss_val, losses })
    }

    /// Run `n` steps over the sample set, invoking `on_report` after each.
    /// Return `false` from the callback to stop early.
    pub fn run_steps(
        &mut self,
        samples: &[CompositeSample],
        n: u64,
        mut on_report: impl FnMut(&StepReport) -> bool,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::InvalidArg { op: "run_steps", detail: "no samples".to_string() });
        }
        for _ in 0..n {
            let batch = self.select_batch(samples, self.step);
            let report = self.train_step(&batch)?;
            if !on_report(&report) {
                break;
            }
        }
        Ok(())
    }

    /// Serialize parameters, optimizer state, backbone, spectral vectors,
    /// step counter, and the config snapshot.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let cfg_json = serde_json::to_vec(&self.cfg)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        ckpt.push("meta.config", Record::Bytes(cfg_json));
        ckpt.push("meta.step", Record::scalar(self.step as f64));
        self.generator.visit_params(|name, t| {
            let s = t.shape();
            ckpt.push(
                format!("gen.{name}"),
                Record::F64 { shape: vec![s.n, s.c, s.h, s.w], data: t.to_vec() },
            );
        });
        self.discriminator.visit_params(|name, t| {
            let s = t.shape();
            ckpt.push(
                format!("disc.{name}"),
                Record::F64 { shape: vec![s.n, s.c, s.h, s.w], data: t.to_vec() },
            );
        });
        for (i, l) in self.discriminator.layers.iter().enumerate() {
            ckpt.push(format!("disc.layers.{i}.sn_u"), Record::vector(l.state.u.clone()));
            ckpt.push(format!("disc.layers.{i}.sn_v"), Record::vector(l.state.v.clone()));
        }
        for (name, rec) in self.backbone.records() {
            ckpt.push(name, rec);
        }
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            ckpt.push(format!("{prefix}.t"), Record::scalar(opt.t as f64));
            for (name, (m, v)) in &opt.slots {
                ckpt.push(format!("{prefix}.{name}.m"), Record::vector(m.clone()));
                ckpt.push(format!("{prefix}.{name}.v"), Record::vector(v.clone()));
            }
        }
        Ok(ckpt)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Rebuild a trainer from a checkpoint; training resumes bit-exactly.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let ckpt = Checkpoint::load(path)?;
        let cfg_bytes = match ckpt.get("meta.config") {
            Some(Record::Bytes(b)) => b.clone(),
            _ => return Err(Error::Checkpoint("missing meta.config".to_string())),
        };
        let cfg: TrainConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        let mut trainer = Trainer::new(cfg)?;

        let restore = |prefix: &str, name: &str, t: &Tensor| -> Result<()> {
            let key = format!("{prefix}.{name}");
            match ckpt.get(&key) {
                Some(Record::F64 { shape, data }) => {
                    let s = t.shape();
                    if shape != &[s.n, s.c, s.h, s.w] {
                        return Err(Error::Checkpoint(format!(
                            "{key}: shape {shape:?} vs expected {s}"
                        )));
                    }
                    t.set_values(data)
                }
                _ => Err(Error::Checkpoint(format!("missing record {key}"))),
            }
        };
        let mut first_err: Option<Error> = None;
        trainer.generator.visit_params(|name, t| {
            if first_err.is_none() {
                if let Err(e) = restore("gen", name, t) {
                    first_err = Some(e);
                }
            }
        });
        trainer.discriminator.visit_params(|name, t| {
            if first_err.is_none() {
                if let Err(e) = restore("disc", name, t) {
                    first_err = Some(e);
                }
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        for (i, l) in trainer.discriminator.layers.iter_mut().enumerate() {
            for (field, slot) in [("sn_u", &mut l.state.u), ("sn_v", &mut l.state.v)] {
                let key = format!("disc.layers.{i}.{field}");
                match ckpt.get(&key) {
                    Some(Record::F64 { data, .. }) if data.len() == slot.len() => {
                        slot.copy_from_slice(data);
                    }
                    _ => return Err(Error::Checkpoint(format!("missing or mis-sized {key}"))),
                }
            }
        }
        let step = match ckpt.get("meta.step") {
            Some(Record::F64 { data, .. }) if data.len() == 1 => data[0] as u64,
            _ => return Err(Error::Checkpoint("missing meta.step".to_string())),
        };
        trainer.step = step;
        for (prefix, opt, params) in [
            ("opt_g", &mut trainer.opt_g, trainer.generator.named_params()),
            ("opt_d", &mut trainer.opt_d, trainer.discriminator.named_params()),
        ] {
            opt.t = match ckpt.get(&format!("{prefix}.t")) {
                Some(Record::F64 { data, .. }) if data.len() == 1 => data[0] as u64,
                _ => return Err(Error::Checkpoint(format!("missing {prefix}.t"))),
            };
            if opt.t > 0 {
                for (name, t) in &params {
                    let m = match ckpt.get(&format!("{prefix}.{name}.m")) {
                        Some(Record::F64 { data, .. }) if data.len() == t.len() => data.clone(),
                        _ => return Err(Error::Checkpoint(format!("missing {prefix}.{name}.m"))),
                    };
                    let v = match ckpt.get(&format!("{prefix}.{name}.v")) {
                        Some(Record::F64 { data, .. }) if data.len() == t.len() => data.clone(),
                        _ => return Err(Error::Checkpoint(format!("missing {prefix}.{name}.v"))),
                    };
                    opt.slots.insert(name.clone(), (m, v));
                }
            }
        }
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{compose_occlusion, BinaryMask};
    use crate::network::ModelConfig;
    use crate::tensor::{mul, sum_all};

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                resolution: 8,
                base_channels: 1,
                disc_channels: 1,
                ..ModelConfig::default()
            },
            batch_size: 2,
            steps: 3,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_samples(n: usize) -> Vec<CompositeSample> {
        (0..n)
            .map(|i| {
                let mut data = Vec::with_capacity(3 * 64);
                for c in 0..3 {
                    for p in 0..64 {
                        data.push(((i + 1) * (c + 2) * (p + 3) % 97) as f64 / 96.0);
                    }
                }
                let img = Tensor::constant(Shape::new(1, 3, 8, 8), data).unwrap();
                let target = BinaryMask::from_fn(8, 8, |y, x| (1..7).contains(&y) && (1..7).contains(&x));
                let occ = BinaryMask::from_fn(3, 3, |_, _| true);
                compose_occlusion(
                    &img,
                    &target,
                    &Tensor::zeros(Shape::new(1, 3, 3, 3)),
                    &occ,
                    (2 + (i as i64 % 2), 2),
                    (0.01, 0.95),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn adam_first_step_magnitude() {
        // g = 1, fresh state: bias-corrected update is −lr / (1 + ε·…) ≈ −lr.
        let p = Tensor::param(Shape::scalar(), vec![0.0]).unwrap();
        let loss = sum_all(&p).unwrap();
        loss.backward().unwrap();
        let mut st = AdamState::default();
        adam_step(&[("p".to_string(), p.clone())], &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        let delta = p.item();
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = Tensor::param(Shape::scalar(), vec![1.25]).unwrap();
        let mut st = AdamState::default();
        adam_step(&[("p".to_string(), p.clone())], &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p.item(), 1.25);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let x = Tensor::param(Shape::scalar(), vec![1.0]).unwrap();
        let mut st = AdamState::default();
        for _ in 0..100 {
            x.zero_grad();
            let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
            loss.backward().unwrap();
            adam_step(&[("x".to_string(), x.clone())], &mut st, 0.05, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(x.item().abs() < 0.5, "x = {}", x.item());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let p = Tensor::param(Shape::scalar(), vec![0.5]).unwrap();
        p.accumulate_grad(&[f64::INFINITY]);
        let mut st = AdamState::default();
        let err = adam_step(&[("p".to_string(), p.clone())], &mut st, 1e-3, 0.9, 0.999, 1e-8);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(p.item(), 0.5);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn zero_learning_rate_leaves_params_alone() {
        // lr must be positive by config; emulate by running a step and
        // comparing param updates against an lr so small it underflows the
        // comparison — instead assert the documented contract directly:
        // identical seeds and zero steps give identical parameters.
        let t1 = Trainer::new(smoke_config()).unwrap();
        let t2 = Trainer::new(smoke_config()).unwrap();
        let p1 = t1.generator.named_params();
        let p2 = t2.generator.named_params();
        for ((n1, a), (n2, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn train_step_runs_and_reports() {
        let mut trainer = Trainer::new(smoke_config()).unwrap();
        let samples = tiny_samples(3);
        let batch: Vec<&CompositeSample> = samples.iter().take(2).collect();
        let r = trainer.train_step(&batch).unwrap();
        assert_eq!(r.step, 1);
        assert!(r.hinge_d >= 0.0);
        assert!(r.losses.reconstruction >= 0.0);
        assert!(r.losses.patch >= 0.0);
        assert!(r.losses.style >= 0.0);
        assert!(r.losses.perceptual >= 0.0);
        assert!(r.losses.total.is_finite());
    }

    #[test]
    fn ablated_component_logged_but_excluded() {
        let mut cfg = smoke_config();
        cfg.ablate.perceptual = true;
        let mut trainer = Trainer::new(cfg).unwrap();
        let samples = tiny_samples(2);
        let batch: Vec<&CompositeSample> = samples.iter().collect();
        let r = trainer.train_step(&batch).unwrap();
        assert!(r.losses.perceptual > 0.0, "component still computed");
        let w = trainer.cfg.weights;
        let manual = w.adversarial * r.losses.adversarial
            + w.patch * r.losses.patch
            + w.style * r.losses.style
            + w.reconstruction * r.losses.reconstruction;
        assert!((r.losses.total - manual).abs() < 1e-12);
    }

    #[test]
    fn discriminator_update_never_touches_generator() {
        let mut trainer = Trainer::new(smoke_config()).unwrap();
        let samples = tiny_samples(2);
        let batch: Vec<&CompositeSample> = samples.iter().collect();

        let before: Vec<Vec<f64>> =
            trainer.generator.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        // Freeze the generator phase with zeroed total-loss weights so the
        // only parameter movement could come from the discriminator phase.
        trainer.cfg.ablate = AblationFlags {
            adversarial: true,
            perceptual: true,
            patch: true,
            style: true,
            reconstruction: true,
        };
        trainer.train_step(&batch).unwrap();
        let after: Vec<Vec<f64>> =
            trainer.generator.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_seeds_replay_identically() {
        let samples = tiny_samples(4);
        let run = || {
            let mut t = Trainer::new(smoke_config()).unwrap();
            let mut lines = Vec::new();
            t.run_steps(&samples, 3, |r| {
                lines.push(r.log_line());
                true
            })
            .unwrap();
            (lines, t.checkpoint().unwrap().to_bytes())
        };
        let (l1, c1) = run();
        let (l2, c2) = run();
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_replay() {
        let samples = tiny_samples(4);
        let dir = std::env::temp_dir().join(format!("amgc-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path3 = dir.join("at3.ckpt");

        // Straight run: 5 steps, checkpointing at step 3.
        let mut full = Trainer::new(smoke_config()).unwrap();
        for _ in 0..5 {
            let batch = full.select_batch(&samples, full.step);
            full.train_step(&batch).unwrap();
            if full.step == 3 {
                full.save_checkpoint(&path3).unwrap();
            }
        }
        let final_direct = full.checkpoint().unwrap().to_bytes();

        // Save → load → save is byte-identical.
        let reloaded = Trainer::load_checkpoint(&path3).unwrap();
        let resaved = reloaded.checkpoint().unwrap().to_bytes();
        assert_eq!(std::fs::read(&path3).unwrap(), resaved);

        // Resume two more steps and compare against the straight run.
        let mut resumed = Trainer::load_checkpoint(&path3).unwrap();
        for _ in 0..2 {
            let batch = resumed.select_batch(&samples, resumed.step);
            resumed.train_step(&batch).unwrap();
        }
        assert_eq!(resumed.checkpoint().unwrap().to_bytes(), final_direct);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_magic_is_versioned_error() {
        let dir = std::env::temp_dir().join(format!("amgc-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        let trainer = Trainer::new(smoke_config()).unwrap();
        trainer.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = match Trainer::load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("corrupt checkpoint loaded"),
        };
        assert!(err.to_string().contains("magic"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
