//! Alternating adversarial training: per step, one Adam update for the seven
//! critics (their own losses, fakes detached) and one for the generator
//! (total objective, critics frozen). All randomness is derived statelessly
//! from (master seed, stream, index) so checkpoint resume is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BindMode, Graph, NodeId, Real};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::discriminators::{
    extract_part, mask_to_channels, Critic, PatchDisc, PatchDiscConfig, SemanticDisc,
    SemanticDiscConfig,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, SwinConfig};
use crate::losses::{
    feature_matching, homogeneity, perceptual, pixel_wise,
    ConvEncoder, LossReport, LossWeights, PartBreakdown, PixelNorm,
};
use crate::masking::{random_mask, Mask, MaskKind, MaskSpec};
use crate::params::{derive_seed, ParamStore};
use crate::toyfaces::{Part, Sample};

// seed streams
const STREAM_GEN_INIT: u64 = 3;
const STREAM_DISC_INIT: u64 = 4;
const STREAM_MASK: u64 = 20;
const STREAM_SHUFFLE: u64 = 21;
const STREAM_PERC: u64 = 22;

/// Flat training configuration. The config file is `key=value` lines with
/// exactly these field names as keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub omega_skin: f64,
    pub omega_eye: f64,
    pub omega_hair: f64,
    pub omega_lip: f64,
    pub omega_cloth: f64,
    pub omega_ear: f64,
    pub perceptual_weight: f64,
    pub pixel_norm: PixelNorm,
    pub mask_preset: MaskKind,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub disc_layers: usize,
    pub disc_base_channels: usize,
}

impl Default for TrainConfig {
    /// Desk-scale profile: published learning rates and loss weights, small
    /// batch and image size.
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            generator_lr: 0.001,
            discriminator_lr: 0.0001,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            delta: w.delta,
            omega_skin: 0.083,
            omega_eye: 0.25,
            omega_hair: 0.083,
            omega_lip: 0.25,
            omega_cloth: 0.083,
            omega_ear: 0.25,
            perceptual_weight: 0.0,
            pixel_norm: PixelNorm::L1,
            mask_preset: MaskKind::Aggressive,
            seed: 0,
            checkpoint_interval: 100,
            size: 64,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2],
            heads: vec![2, 4, 4],
            window_size: 4,
            mlp_ratio: 4,
            disc_layers: 4,
            disc_base_channels: 32,
        }
    }
}

impl TrainConfig {
    /// The full-scale profile from the published experiments (batch 20,
    /// 40 epochs); not desk-runnable but config-reachable.
    pub fn paper_profile() -> Self {
        TrainConfig {
            batch_size: 20,
            epochs: 40,
            size: 256,
            ..TrainConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        let mut omega = IndexMap::new();
        omega.insert(Part::Skin, self.omega_skin);
        omega.insert(Part::Eye, self.omega_eye);
        omega.insert(Part::Hair, self.omega_hair);
        omega.insert(Part::Lip, self.omega_lip);
        omega.insert(Part::Cloth, self.omega_cloth);
        omega.insert(Part::Ear, self.omega_ear);
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
            omega,
            perceptual_weight: self.perceptual_weight,
            pixel_norm: self.pixel_norm,
        }
    }

    pub fn swin_config(&self) -> SwinConfig {
        SwinConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depths: self.depths.clone(),
            heads: self.heads.clone(),
            window_size: self.window_size,
            mlp_ratio: self.mlp_ratio,
            input_channels: 4,
            output_channels: 3,
        }
    }

    pub fn patch_disc_config(&self) -> PatchDiscConfig {
        PatchDiscConfig {
            layers: self.disc_layers,
            base_channels: self.disc_base_channels,
            leaky_slope: 0.2,
        }
    }

    pub fn semantic_disc_config(&self) -> SemanticDiscConfig {
        SemanticDiscConfig {
            layers: self.disc_layers,
            base_channels: self.disc_base_channels,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator_lr < 0.0 || self.discriminator_lr < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights().validate()?;
        self.swin_config().validate(self.size)?;
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment. Unknown keys are
    /// configuration errors naming the key.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            c.set_kv(key, value)?;
        }
        Ok(c)
    }

    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
                })
                .collect()
        }
        match key {
            "generator_lr" => self.generator_lr = num(key, value)?,
            "discriminator_lr" => self.discriminator_lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => {
                self.max_steps = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "omega_skin" => self.omega_skin = num(key, value)?,
            "omega_eye" => self.omega_eye = num(key, value)?,
            "omega_hair" => self.omega_hair = num(key, value)?,
            "omega_lip" => self.omega_lip = num(key, value)?,
            "omega_cloth" => self.omega_cloth = num(key, value)?,
            "omega_ear" => self.omega_ear = num(key, value)?,
            "perceptual_weight" => self.perceptual_weight = num(key, value)?,
            "pixel_norm" => self.pixel_norm = PixelNorm::from_name(value)?,
            "mask_preset" => self.mask_preset = MaskKind::from_name(value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "size" => self.size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "depths" => self.depths = list(key, value)?,
            "heads" => self.heads = list(key, value)?,
            "window_size" => self.window_size = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "disc_layers" => self.disc_layers = num(key, value)?,
            "disc_base_channels" => self.disc_base_channels = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("generator_lr", self.generator_lr.to_string());
        push("discriminator_lr", self.discriminator_lr.to_string());
        push("batch_size", self.batch_size.to_string());
        push("epochs", self.epochs.to_string());
        push(
            "max_steps",
            self.max_steps.map_or("none".into(), |v| v.to_string()),
        );
        push("beta1", self.beta1.to_string());
        push("beta2", self.beta2.to_string());
        push("adam_eps", self.adam_eps.to_string());
        push("alpha", self.alpha.to_string());
        push("beta", self.beta.to_string());
        push("gamma", self.gamma.to_string());
        push("delta", self.delta.to_string());
        push("omega_skin", self.omega_skin.to_string());
        push("omega_eye", self.omega_eye.to_string());
        push("omega_hair", self.omega_hair.to_string());
        push("omega_lip", self.omega_lip.to_string());
        push("omega_cloth", self.omega_cloth.to_string());
        push("omega_ear", self.omega_ear.to_string());
        push("perceptual_weight", self.perceptual_weight.to_string());
        push("pixel_norm", self.pixel_norm.name().to_string());
        push("mask_preset", self.mask_preset.name().to_string());
        push("seed", self.seed.to_string());
        push("checkpoint_interval", self.checkpoint_interval.to_string());
        push("size", self.size.to_string());
        push("patch_size", self.patch_size.to_string());
        push("embed_dim", self.embed_dim.to_string());
        push("depths", join(&self.depths));
        push("heads", join(&self.heads));
        push("window_size", self.window_size.to_string());
        push("mlp_ratio", self.mlp_ratio.to_string());
        push("disc_layers", self.disc_layers.to_string());
        push("disc_base_channels", self.disc_base_channels.to_string());
        s
    }
}

/// Adam with per-array first/second moments.
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &IndexMap<String, ArrayD<F>>) {
        self.t += 1;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let bc1 = F::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::of_f64(self.lr);
        let eps = F::of_f64(self.eps);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, g| {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moments flattened for checkpointing, names prefixed `opt.<tag>.`.
    pub fn state_arrays(&self, tag: &str) -> IndexMap<String, ArrayD<f32>> {
        let mut out = IndexMap::new();
        for (name, arr) in &self.m {
            out.insert(format!("opt.{tag}.m.{name}"), arr.mapv(|x| x.as_f32()));
        }
        for (name, arr) in &self.v {
            out.insert(format!("opt.{tag}.v.{name}"), arr.mapv(|x| x.as_f32()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        tag: &str,
        t: u64,
        arrays: &IndexMap<String, ArrayD<f32>>,
    ) {
        self.t = t;
        let mp = format!("opt.{tag}.m.");
        let vp = format!("opt.{tag}.v.");
        for (name, arr) in arrays {
            if let Some(base) = name.strip_prefix(&mp) {
                self.m.insert(base.to_string(), arr.mapv(F::of_f32));
            } else if let Some(base) = name.strip_prefix(&vp) {
                self.v.insert(base.to_string(), arr.mapv(F::of_f32));
            }
        }
    }
}

pub struct TrainState<F: Real> {
    pub config: TrainConfig,
    pub generator: Generator<F>,
    pub patch_disc: PatchDisc<F>,
    pub part_discs: IndexMap<Part, SemanticDisc<F>>,
    pub perceptual_encoder: Option<ConvEncoder<F>>,
    pub opt_gen: Adam<F>,
    pub opt_discs: IndexMap<String, Adam<F>>,
    pub global_step: u64,
    pub epoch: usize,
    pub epoch_pos: usize,
}

impl<F: Real> TrainState<F> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(
            config.swin_config(),
            derive_seed(config.seed, STREAM_GEN_INIT, 0),
        )?;
        let patch_disc = PatchDisc::new(
            config.patch_disc_config(),
            derive_seed(config.seed, STREAM_DISC_INIT, 0),
        )?;
        let mut part_discs = IndexMap::new();
        for (i, part) in Part::parts().into_iter().enumerate() {
            part_discs.insert(
                part,
                SemanticDisc::new(
                    config.semantic_disc_config(),
                    part,
                    derive_seed(config.seed, STREAM_DISC_INIT, 1 + i as u64),
                )?,
            );
        }
        let perceptual_encoder = if config.perceptual_weight > 0.0 {
            Some(ConvEncoder::new(derive_seed(config.seed, STREAM_PERC, 0))?)
        } else {
            None
        };
        let opt_gen = Adam::new(
            config.generator_lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
        );
        let mut opt_discs = IndexMap::new();
        opt_discs.insert(
            "patch".to_string(),
            Adam::new(
                config.discriminator_lr,
                config.beta1,
                config.beta2,
                config.adam_eps,
            ),
        );
        for part in Part::parts() {
            opt_discs.insert(
                part.name().to_string(),
                Adam::new(
                    config.discriminator_lr,
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                ),
            );
        }
        Ok(TrainState {
            config,
            generator,
            patch_disc,
            part_discs,
            perceptual_encoder,
            opt_gen,
            opt_discs,
            global_step: 0,
            epoch: 0,
            epoch_pos: 0,
        })
    }

    /// Deterministic per-item training mask.
    pub fn step_mask(&self, step: u64, item: usize) -> Result<Mask> {
        let seed = derive_seed(
            self.config.seed,
            STREAM_MASK,
            step * self.config.batch_size as u64 + item as u64,
        );
        random_mask(
            &MaskSpec::preset(self.config.mask_preset),
            seed,
            self.config.size,
        )
    }
}

/// Pack samples and masks into [B,3,S,S] targets and [B,4,S,S] inputs
/// (holes zero-filled, mask appended).
pub fn assemble_batch<F: Real>(
    samples: &[&Sample],
    masks: &[Mask],
) -> Result<(ArrayD<F>, ArrayD<F>)> {
    let b = samples.len();
    if b == 0 || masks.len() != b {
        return Err(Error::Parameter("batch and masks must align".into()));
    }
    let size = samples[0].size();
    let mut real = ArrayD::<F>::zeros(IxDyn(&[b, 3, size, size]));
    let mut input = ArrayD::<F>::zeros(IxDyn(&[b, 4, size, size]));
    for (i, (s, m)) in samples.iter().zip(masks.iter()).enumerate() {
        if s.size() != size || m.grid.dim() != (size, size) {
            return Err(Error::Shape("mixed sizes in batch".into()));
        }
        for r in 0..size {
            for c in 0..size {
                let hole = m.grid[[r, c]] == 1;
                for k in 0..3 {
                    let v = F::of_f32(s.image[[r, c, k]]);
                    real[[i, k, r, c]] = v;
                    input[[i, k, r, c]] = if hole { F::zero() } else { v };
                }
                input[[i, 3, r, c]] = if hole { F::one() } else { F::zero() };
            }
        }
    }
    Ok((real, input))
}

fn probs_of<F: Real>(g: &mut Graph<F>, logits: NodeId) -> NodeId {
    let p = g.sigmoid(logits);
    g.clamp(p, F::of_f64(1e-6), F::of_f64(1.0 - 1e-6))
}

fn critic_loss<F: Real>(
    g: &mut Graph<F>,
    disc: &dyn Critic<F>,
    real: NodeId,
    fake: NodeId,
) -> Result<NodeId> {
    let real_out = disc.forward_graph(g, real, BindMode::Trainable)?;
    let fake_out = disc.forward_graph(g, fake, BindMode::Trainable)?;
    let p_real = probs_of(g, real_out.logits);
    let p_fake = probs_of(g, fake_out.logits);
    let lr = g.log(p_real);
    let mr = g.mean(lr);
    let t1 = g.neg(mr);
    let nf = g.neg(p_fake);
    let omf = g.add_scalar(nf, F::one());
    let lf = g.log(omf);
    let mf = g.mean(lf);
    let t2 = g.neg(mf);
    g.add(t1, t2)
}

fn gen_adv_loss<F: Real>(
    g: &mut Graph<F>,
    disc: &dyn Critic<F>,
    fake: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let out = disc.forward_graph(g, fake, BindMode::Frozen)?;
    let p = probs_of(g, out.logits);
    let l = g.log(p);
    let m = g.mean(l);
    Ok((g.neg(m), out.features))
}

/// One alternating training step: critics first, then the generator.
/// Deterministic given (state, batch, config.seed, global_step).
pub fn train_step<F: Real>(state: &mut TrainState<F>, batch: &[&Sample]) -> Result<LossReport> {
    let step = state.global_step;
    let weights = state.config.weights();
    let masks: Vec<Mask> = (0..batch.len())
        .map(|i| state.step_mask(step, i))
        .collect::<Result<_>>()?;
    let (real_arr, input_arr) = assemble_batch::<F>(batch, &masks)?;

    // ---- critic phase: generator frozen, fakes carry no generator grads
    let mut adv_d = IndexMap::new();
    {
        let mut g = Graph::<F>::new();
        let real = g.constant(real_arr.clone());
        let input = g.constant(input_arr.clone());
        let (fake, _) = state.generator.forward(&mut g, input, BindMode::Frozen)?;
        g.assert_finite(fake, "generator output (critic phase)")?;

        let patch_loss = critic_loss(&mut g, &state.patch_disc, real, fake)?;
        adv_d.insert(
            "patch".to_string(),
            g.scalar_value(patch_loss).as_f64(),
        );
        let mut total = patch_loss;

        for part in Part::parts() {
            let disc = &state.part_discs[&part];
            let mut acc: Option<NodeId> = None;
            let mut present = 0usize;
            for (i, sample) in batch.iter().enumerate() {
                let mask = sample.parts.mask(part);
                if mask.iter().all(|&v| v == 0) {
                    continue;
                }
                present += 1;
                let mask3 = mask_to_channels(&mut g, &mask);
                let real_i = g.slice_batch(real, i)?;
                let fake_i = g.slice_batch(fake, i)?;
                let real_p = extract_part(&mut g, real_i, mask3)?;
                let fake_p = extract_part(&mut g, fake_i, mask3)?;
                let l = critic_loss(&mut g, disc.as_critic(), real_p, fake_p)?;
                acc = Some(match acc {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let value = match acc {
                Some(sum) if present > 0 => g.scale(sum, F::of_f64(1.0 / present as f64)),
                _ => g.scalar_const(F::zero()),
            };
            adv_d.insert(part.name().to_string(), g.scalar_value(value).as_f64());
            total = g.add(total, value)?;
        }

        g.assert_finite(total, "critic losses")?;
        g.backward(total)?;

        let bind = state.patch_disc.params.bind(&mut g, BindMode::Trainable);
        let grads = state.patch_disc.params.grads_from(&g, &bind);
        state.opt_discs["patch"].lr = state.config.discriminator_lr;
        state
            .opt_discs
            .get_mut("patch")
            .expect("patch optimizer")
            .step(&mut state.patch_disc.params, &grads);
        for part in Part::parts() {
            let disc = state.part_discs.get_mut(&part).expect("part critic");
            let bind = disc.params.bind(&mut g, BindMode::Trainable);
            let grads = disc.params.grads_from(&g, &bind);
            state
                .opt_discs
                .get_mut(part.name())
                .expect("part optimizer")
                .step(&mut disc.params, &grads);
        }
    }

    // ---- generator phase: critics frozen
    let report = {
        let mut g = Graph::<F>::new();
        let real = g.constant(real_arr);
        let input = g.constant(input_arr);
        let (fake, _) = state.generator.forward(&mut g, input, BindMode::Trainable)?;
        g.assert_finite(fake, "generator output")?;

        let pixel = pixel_wise(&mut g, fake, real, state.config.pixel_norm)?;
        let (adv_g, fake_feats) = gen_adv_loss(&mut g, &state.patch_disc, fake)?;
        let real_out = state
            .patch_disc
            .forward_graph(&mut g, real, BindMode::Frozen)?;
        let fm = feature_matching(&mut g, &real_out.features, &fake_feats)?;

        let mut part_detail: IndexMap<String, Option<PartBreakdown>> = IndexMap::new();
        let hg_value;
        let mut total = {
            let a = g.scale(pixel, F::of_f64(weights.alpha));
            let b = g.scale(adv_g, F::of_f64(weights.beta));
            let c = g.scale(fm, F::of_f64(weights.gamma));
            let ab = g.add(a, b)?;
            g.add(ab, c)?
        };

        if weights.delta > 0.0 {
            let mut acc: Option<NodeId> = None;
            let mut sums: IndexMap<Part, (f64, f64, f64, usize)> = IndexMap::new();
            for (i, sample) in batch.iter().enumerate() {
                let real_i = g.slice_batch(real, i)?;
                let fake_i = g.slice_batch(fake, i)?;
                let (hg_i, detail) = homogeneity(
                    &mut g,
                    fake_i,
                    real_i,
                    &sample.parts,
                    &state.part_discs,
                    &weights,
                )?;
                for (part, d) in detail {
                    if let Some(b) = d {
                        let e = sums.entry(part).or_insert((0.0, 0.0, 0.0, 0));
                        e.0 += b.adv;
                        e.1 += b.fm;
                        e.2 += b.total;
                        e.3 += 1;
                    }
                }
                acc = Some(match acc {
                    Some(t) => g.add(t, hg_i)?,
                    None => hg_i,
                });
            }
            let hg = match acc {
                Some(sum) => g.scale(sum, F::of_f64(1.0 / batch.len() as f64)),
                None => g.scalar_const(F::zero()),
            };
            hg_value = g.scalar_value(hg).as_f64();
            for part in Part::parts() {
                let entry = sums.get(&part).copied();
                part_detail.insert(
                    part.name().to_string(),
                    entry.map(|(a, f, t, n)| PartBreakdown {
                        adv: a / n as f64,
                        fm: f / n as f64,
                        total: t / n as f64,
                    }),
                );
            }
            let hg_scaled = g.scale(hg, F::of_f64(weights.delta));
            total = g.add(total, hg_scaled)?;
        } else {
            hg_value = 0.0;
            for part in Part::parts() {
                part_detail.insert(part.name().to_string(), None);
            }
        }

        let perc_value;
        if weights.perceptual_weight > 0.0 {
            let enc = state
                .perceptual_encoder
                .as_ref()
                .ok_or_else(|| Error::Config("perceptual weight set but no encoder".into()))?;
            let p = perceptual(&mut g, enc, fake, real)?;
            perc_value = g.scalar_value(p).as_f64();
            let scaled = g.scale(p, F::of_f64(weights.perceptual_weight));
            total = g.add(total, scaled)?;
        } else {
            perc_value = 0.0;
        }

        let report = LossReport {
            step,
            pixel: g.scalar_value(pixel).as_f64(),
            adv_g: g.scalar_value(adv_g).as_f64(),
            fm: g.scalar_value(fm).as_f64(),
            perceptual: perc_value,
            homogeneity: hg_value,
            total: g.scalar_value(total).as_f64(),
            adv_d,
            parts: part_detail,
        };
        if let Err(term) = report.is_finite() {
            return Err(Error::NonFinite { term });
        }

        g.backward(total)?;
        let bind = state.generator.params.bind(&mut g, BindMode::Trainable);
        let grads = state.generator.params.grads_from(&g, &bind);
        state.opt_gen.lr = state.config.generator_lr;
        state.opt_gen.step(&mut state.generator.params, &grads);
        report
    };

    state.global_step += 1;
    state.epoch_pos += 1;
    Ok(report)
}

impl<F: Real> SemanticDisc<F> {
    fn as_critic(&self) -> &dyn Critic<F> {
        self
    }
}

pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: Option<std::path::PathBuf>,
}

/// Save the complete training state (parameters, optimizer moments,
/// counters, config) as one checkpoint file.
pub fn save_checkpoint<F: Real>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let mut arrays: IndexMap<String, ArrayD<f32>> = IndexMap::new();
    for (name, arr) in state.generator.params.to_f32() {
        arrays.insert(name, arr);
    }
    for (name, arr) in state.patch_disc.params.to_f32() {
        arrays.insert(name, arr);
    }
    for disc in state.part_discs.values() {
        for (name, arr) in disc.params.to_f32() {
            arrays.insert(name, arr);
        }
    }
    arrays.extend(state.opt_gen.state_arrays("gen"));
    for (tag, opt) in &state.opt_discs {
        arrays.extend(opt.state_arrays(&format!("disc.{tag}")));
    }
    let mut adam_t = serde_json::Map::new();
    adam_t.insert("gen".into(), serde_json::json!(state.opt_gen.t));
    for (tag, opt) in &state.opt_discs {
        adam_t.insert(format!("disc.{tag}"), serde_json::json!(opt.t));
    }
    let meta = serde_json::json!({
        "kind": "train_state",
        "config": state.config,
        "counters": {
            "global_step": state.global_step,
            "epoch": state.epoch,
            "epoch_pos": state.epoch_pos,
        },
        "adam_t": adam_t,
    });
    write_checkpoint(path, &meta, &arrays)
}

fn filter_prefix(
    arrays: &IndexMap<String, ArrayD<f32>>,
    prefix: &str,
) -> IndexMap<String, ArrayD<f32>> {
    arrays
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Rebuild a training state from a checkpoint produced by `save_checkpoint`.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TrainState<F>> {
    let Checkpoint { meta, arrays } = read_checkpoint(path)?;
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config in checkpoint: {e}")))?;
    let mut state = TrainState::<F>::new(config)?;
    state.generator = Generator::from_params(
        state.config.swin_config(),
        ParamStore::from_f32(filter_prefix(&arrays, "gen.")),
    );
    state.patch_disc = PatchDisc::from_params(
        state.config.patch_disc_config(),
        ParamStore::from_f32(filter_prefix(&arrays, "disc.patch.")),
    );
    for part in Part::parts() {
        let prefix = format!("disc.part.{}.", part.name());
        state.part_discs.insert(
            part,
            SemanticDisc::from_params(
                state.config.semantic_disc_config(),
                part,
                ParamStore::from_f32(filter_prefix(&arrays, &prefix)),
            ),
        );
    }
    let t_of = |tag: &str| -> u64 {
        meta["adam_t"][tag].as_u64().unwrap_or(0)
    };
    state.opt_gen.load_state("gen", t_of("gen"), &arrays);
    for (tag, opt) in state.opt_discs.iter_mut() {
        opt.load_state(&format!("disc.{tag}"), t_of(&format!("disc.{tag}")), &arrays);
    }
    state.global_step = meta["counters"]["global_step"].as_u64().unwrap_or(0);
    state.epoch = meta["counters"]["epoch"].as_u64().unwrap_or(0) as usize;
    state.epoch_pos = meta["counters"]["epoch_pos"].as_u64().unwrap_or(0) as usize;
    Ok(state)
}

/// Epoch loop with seeded shuffling, CSV logging and periodic checkpoints.
pub fn train<F: Real>(
    dataset: &[Sample],
    state: &mut TrainState<F>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let config = state.config.clone();
    for s in dataset {
        if s.size() != config.size {
            return Err(Error::Config(format!(
                "dataset sample size {} != configured size {}",
                s.size(),
                config.size
            )));
        }
    }
    let batches_per_epoch = dataset.len() / config.batch_size;
    if batches_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
            let path = dir.join("train_log.csv");
            let fresh = !path.exists() || state.global_step == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(path.clone(), e))?;
            if fresh {
                writeln!(f, "{}", LossReport::csv_header())
                    .map_err(|e| Error::io(path.clone(), e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut reports = Vec::new();
    let mut final_ckpt = None;

    'outer: while state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE, state.epoch as u64));
        order.shuffle(&mut rng);

        while state.epoch_pos < batches_per_epoch {
            if let Some(max) = config.max_steps {
                if state.global_step >= max as u64 {
                    break 'outer;
                }
            }
            let start = state.epoch_pos * config.batch_size;
            let batch: Vec<&Sample> = order[start..start + config.batch_size]
                .iter()
                .map(|&i| &dataset[i])
                .collect();
            let report = train_step(state, &batch)?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(path.clone(), e))?;
            }
            reports.push(report);

            if let Some(dir) = out_dir {
                if config.checkpoint_interval > 0
                    && state.global_step % config.checkpoint_interval as u64 == 0
                {
                    let path = dir.join(format!("checkpoint-{}.ckpt", state.global_step));
                    save_checkpoint(state, &path)?;
                }
            }
        }
        if state.epoch_pos >= batches_per_epoch {
            state.epoch += 1;
            state.epoch_pos = 0;
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint-final.ckpt");
        save_checkpoint(state, &path)?;
        final_ckpt = Some(path);
    }
    Ok(TrainOutcome {
        reports,
        final_checkpoint: final_ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::generate_face;

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 10,
            max_steps: Some(5),
            size: 32,
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 2],
            window_size: 2,
            mlp_ratio: 2,
            disc_layers: 2,
            disc_base_channels: 4,
            checkpoint_interval: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<Sample> {
        (0..n).map(|i| generate_face(i as u64, 32, 0.0).unwrap()).collect()
    }

    #[test]
    fn config_kv_roundtrip_and_unknown_key() {
        let c = tiny_config(5);
        let text = c.to_kv_string();
        let back = TrainConfig::parse_kv(&text).unwrap();
        assert_eq!(back.seed, 5);
        assert_eq!(back.depths, vec![1, 1]);
        assert_eq!(back.max_steps, Some(5));

        match TrainConfig::parse_kv("bogus_key=3") {
            Err(Error::Config(msg)) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_reports_at_64_bit() {
        let data = tiny_dataset(4);
        let mut a = TrainState::<f64>::new(tiny_config(7)).unwrap();
        let mut b = TrainState::<f64>::new(tiny_config(7)).unwrap();
        let ra = train(&data, &mut a, None).unwrap().reports;
        let rb = train(&data, &mut b, None).unwrap().reports;
        assert_eq!(ra.len(), 5);
        for (x, y) in ra.iter().zip(rb.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits(), "step {}", x.step);
            assert_eq!(x.pixel.to_bits(), y.pixel.to_bits());
            assert_eq!(x.homogeneity.to_bits(), y.homogeneity.to_bits());
            for (k, v) in &x.adv_d {
                assert_eq!(v.to_bits(), y.adv_d[k].to_bits());
            }
        }
    }

    #[test]
    fn zero_generator_lr_freezes_generator() {
        let data = tiny_dataset(2);
        let mut config = tiny_config(3);
        config.generator_lr = 0.0;
        config.max_steps = Some(1);
        let mut state = TrainState::<f64>::new(config).unwrap();
        let before = state.generator.params.digest();
        let disc_before = state.patch_disc.params.digest();
        train(&data, &mut state, None).unwrap();
        assert_eq!(state.generator.params.digest(), before);
        assert_ne!(state.patch_disc.params.digest(), disc_before);
    }

    #[test]
    fn delta_zero_generator_ignores_semantic_critics() {
        let data = tiny_dataset(2);
        let mut config = tiny_config(9);
        config.delta = 0.0;
        config.max_steps = Some(2);

        let mut a = TrainState::<f64>::new(config.clone()).unwrap();
        // same master seed, but replace the semantic critics with different
        // ones: the generator trajectory must not change
        let mut b = TrainState::<f64>::new(config).unwrap();
        for (i, part) in Part::parts().into_iter().enumerate() {
            b.part_discs.insert(
                part,
                SemanticDisc::new(b.config.semantic_disc_config(), part, 9_000 + i as u64)
                    .unwrap(),
            );
        }
        train(&data, &mut a, None).unwrap();
        train(&data, &mut b, None).unwrap();
        assert_eq!(
            a.generator.params.digest(),
            b.generator.params.digest(),
            "generator trajectory depended on semantic critics despite delta=0"
        );
        // but the semantic critics themselves still train on their own loss
        let before =
            SemanticDisc::<f64>::new(a.config.semantic_disc_config(), Part::Eye, 9_000).unwrap();
        assert_ne!(
            b.part_discs[&Part::Eye].params.digest(),
            before.params.digest()
        );
    }

    #[test]
    fn resume_matches_unbroken_run_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(4);
        // f32 training: checkpoints are lossless at this precision
        let mut solid = TrainState::<f32>::new(tiny_config(11)).unwrap();
        let solid_reports = train(&data, &mut solid, None).unwrap().reports;

        let mut first = TrainState::<f32>::new(tiny_config(11)).unwrap();
        first.config.max_steps = Some(2);
        train(&data, &mut first, Some(dir.path())).unwrap();
        let ckpt = dir.path().join("checkpoint-2.ckpt");
        assert!(ckpt.exists());

        let mut resumed = load_checkpoint::<f32>(&ckpt).unwrap();
        resumed.config.max_steps = Some(5);
        let tail = train(&data, &mut resumed, None).unwrap().reports;
        assert_eq!(tail.len(), 3);
        for (r, s) in tail.iter().zip(solid_reports[2..].iter()) {
            assert_eq!(r.step, s.step);
            assert_eq!(r.total.to_bits(), s.total.to_bits(), "step {}", r.step);
            assert_eq!(r.pixel.to_bits(), s.pixel.to_bits());
        }
        assert_eq!(
            resumed.generator.params.digest(),
            solid.generator.params.digest()
        );
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let mut state = TrainState::<f32>::new(tiny_config(1)).unwrap();
        assert!(matches!(
            train(&[], &mut state, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frozen_perceptual_encoder_never_changes() {
        let data = tiny_dataset(2);
        let mut config = tiny_config(13);
        config.perceptual_weight = 0.05;
        config.max_steps = Some(2);
        let mut state = TrainState::<f64>::new(config).unwrap();
        let before = state.perceptual_encoder.as_ref().unwrap().digest();
        train(&data, &mut state, None).unwrap();
        assert_eq!(state.perceptual_encoder.as_ref().unwrap().digest(), before);
    }

    #[test]
    fn reports_are_consistent_with_weights() {
        let data = tiny_dataset(2);
        let mut state = TrainState::<f64>::new(tiny_config(15)).unwrap();
        let reports = train(&data, &mut state, None).unwrap().reports;
        let weights = state.config.weights();
        for r in &reports {
            assert!(r.check_consistency(&weights), "step {}", r.step);
            assert_eq!(r.adv_d.len(), 7);
        }
    }
}
