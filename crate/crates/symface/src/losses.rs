//! The training loss stack: pixel distance, adversarial pairs with exact
//! stop-gradient routing, feature matching on critic activations, a pluggable
//! perceptual distance, per-part losses over the semantic critics and their
//! weighted homogeneity sum, and the total objective.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BindMode, Graph, NodeId, Real};
use crate::discriminators::{extract_part, mask_to_channels, Critic, SemanticDisc};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::toyfaces::{Part, PartMaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelNorm {
    L1,
    L2,
}

impl PixelNorm {
    pub fn name(self) -> &'static str {
        match self {
            PixelNorm::L1 => "l1",
            PixelNorm::L2 => "l2",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "l1" | "L1" => PixelNorm::L1,
            "l2" | "L2" => PixelNorm::L2,
            other => return Err(Error::Parameter(format!("unknown pixel norm `{other}`"))),
        })
    }
}

/// Weights of the total objective and the six per-part weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub omega: IndexMap<Part, f64>,
    pub perceptual_weight: f64,
    pub pixel_norm: PixelNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        let mut omega = IndexMap::new();
        omega.insert(Part::Skin, 0.083);
        omega.insert(Part::Eye, 0.25);
        omega.insert(Part::Hair, 0.083);
        omega.insert(Part::Lip, 0.25);
        omega.insert(Part::Cloth, 0.083);
        omega.insert(Part::Ear, 0.25);
        LossWeights {
            alpha: 10.0,
            beta: 10.0,
            gamma: 100.0,
            delta: 20.0,
            omega,
            perceptual_weight: 0.0,
            pixel_norm: PixelNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("perceptual_weight", self.perceptual_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weight {name} = {v} must be >= 0")));
            }
        }
        if self.omega.len() != 6 {
            return Err(Error::Config(format!(
                "omega must have exactly six entries, got {}",
                self.omega.len()
            )));
        }
        for (p, v) in &self.omega {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "omega[{}] = {v} must be >= 0",
                    p.name()
                )));
            }
        }
        Ok(())
    }

    pub fn omega_of(&self, part: Part) -> Result<f64> {
        self.omega
            .get(&part)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("unknown part `{}`", part.name())))
    }
}

/// Mean |x - xhat| (L1) or mean (x - xhat)^2 (L2).
pub fn pixel_wise<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    xhat: NodeId,
    norm: PixelNorm,
) -> Result<NodeId> {
    let d = g.sub(x, xhat)?;
    let m = match norm {
        PixelNorm::L1 => g.abs(d),
        PixelNorm::L2 => g.square(d),
    };
    Ok(g.mean(m))
}

const PROB_CLAMP: f64 = 1e-6;

/// Clamped sigmoid probabilities from logits.
fn probs<F: Real>(g: &mut Graph<F>, logits: NodeId) -> NodeId {
    let p = g.sigmoid(logits);
    g.clamp(p, F::of_f64(PROB_CLAMP), F::of_f64(1.0 - PROB_CLAMP))
}

/// -E[log p], expectation over batch and logit-grid positions.
fn neg_mean_log<F: Real>(g: &mut Graph<F>, p: NodeId) -> NodeId {
    let l = g.log(p);
    let m = g.mean(l);
    g.neg(m)
}

/// -E[log (1 - p)].
fn neg_mean_log_one_minus<F: Real>(g: &mut Graph<F>, p: NodeId) -> NodeId {
    let np = g.neg(p);
    let omp = g.add_scalar(np, F::one());
    neg_mean_log(g, omp)
}

/// Both adversarial losses with exact stop-gradient routing:
/// the critic loss sees the fake through a stop gradient, the generator
/// loss sees the critic with frozen parameters.
pub struct AdvPair {
    pub loss_d: NodeId,
    pub loss_g: NodeId,
    /// Features of the real forward (critic trainable); detach before use.
    pub features_real: Vec<NodeId>,
    /// Features of the live fake forward (critic frozen).
    pub features_fake: Vec<NodeId>,
}

pub fn adversarial_pair<F: Real>(
    g: &mut Graph<F>,
    disc: &dyn Critic<F>,
    real: NodeId,
    fake: NodeId,
) -> Result<AdvPair> {
    g.assert_finite(real, "adversarial real input")?;
    g.assert_finite(fake, "adversarial fake input")?;
    let fake_detached = g.stop_grad(fake);
    let real_out = disc.forward_graph(g, real, BindMode::Trainable)?;
    let fake_det_out = disc.forward_graph(g, fake_detached, BindMode::Trainable)?;
    g.assert_finite(real_out.logits, "critic logits (real)")?;
    g.assert_finite(fake_det_out.logits, "critic logits (fake)")?;
    let p_real = probs(g, real_out.logits);
    let p_fake = probs(g, fake_det_out.logits);
    let d_real = neg_mean_log(g, p_real);
    let d_fake = neg_mean_log_one_minus(g, p_fake);
    let loss_d = g.add(d_real, d_fake)?;

    let fake_live_out = disc.forward_graph(g, fake, BindMode::Frozen)?;
    let p_live = probs(g, fake_live_out.logits);
    let loss_g = neg_mean_log(g, p_live);

    Ok(AdvPair {
        loss_d,
        loss_g,
        features_real: real_out.features,
        features_fake: fake_live_out.features,
    })
}

/// Sum over layers of the mean absolute difference between critic features,
/// with the reference features detached.
pub fn feature_matching<F: Real>(
    g: &mut Graph<F>,
    features_real: &[NodeId],
    features_fake: &[NodeId],
) -> Result<NodeId> {
    if features_real.len() != features_fake.len() {
        return Err(Error::Shape(format!(
            "feature matching over {} vs {} layers",
            features_real.len(),
            features_fake.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (fr, ff) in features_real.iter().zip(features_fake.iter()) {
        let frd = g.stop_grad(*fr);
        let d = g.sub(frd, *ff)?;
        let a = g.abs(d);
        let m = g.mean(a);
        acc = Some(match acc {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(acc.unwrap_or_else(|| g.scalar_const(F::zero())))
}

/// A frozen multi-stage image encoder for the perceptual distance.
pub trait PerceptualEncoder<F: Real> {
    fn stages(&self, g: &mut Graph<F>, image: NodeId) -> Result<Vec<NodeId>>;
    fn label(&self) -> String;
}

/// Single identity stage; reduces the perceptual distance to pixel L1.
pub struct IdentityEncoder;

impl<F: Real> PerceptualEncoder<F> for IdentityEncoder {
    fn stages(&self, _g: &mut Graph<F>, image: NodeId) -> Result<Vec<NodeId>> {
        Ok(vec![image])
    }

    fn label(&self) -> String {
        "identity".to_string()
    }
}

/// Seeded, frozen convolution stack standing in for a pretrained encoder.
pub struct ConvEncoder<F: Real> {
    params: ParamStore<F>,
    layers: usize,
}

impl<F: Real> ConvEncoder<F> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let mut cin = 3usize;
        let layers = 2usize;
        for (i, cout) in [8usize, 16].into_iter().enumerate() {
            params.insert(format!("enc.conv{i}.w"), init.kaiming_conv(&[cout, cin, 3, 3]))?;
            params.insert(format!("enc.conv{i}.b"), init.zeros(&[cout]))?;
            cin = cout;
        }
        Ok(ConvEncoder { params, layers })
    }

    pub fn digest(&self) -> u64 {
        self.params.digest()
    }
}

impl<F: Real> PerceptualEncoder<F> for ConvEncoder<F> {
    fn stages(&self, g: &mut Graph<F>, image: NodeId) -> Result<Vec<NodeId>> {
        // always frozen: gradients can flow to the image, never the encoder
        let bind = self.params.bind(g, BindMode::Frozen);
        let mut x = image;
        let mut out = Vec::with_capacity(self.layers);
        for i in 0..self.layers {
            let conv = g.conv2d(x, bind.id(&format!("enc.conv{i}.w")), 2, 1)?;
            let conv = g.add_chan_bias(conv, bind.id(&format!("enc.conv{i}.b")))?;
            x = g.gelu(conv);
            out.push(x);
        }
        Ok(out)
    }

    fn label(&self) -> String {
        "conv".to_string()
    }
}

/// Mean L1 distance between encoder feature maps, summed over stages.
pub fn perceptual<F: Real>(
    g: &mut Graph<F>,
    encoder: &dyn PerceptualEncoder<F>,
    x: NodeId,
    xhat: NodeId,
) -> Result<NodeId> {
    let sx = encoder.stages(g, x)?;
    let sy = encoder.stages(g, xhat)?;
    let mut acc: Option<NodeId> = None;
    for (a, b) in sx.iter().zip(sy.iter()) {
        let d = g.sub(*a, *b)?;
        let m = g.abs(d);
        let m = g.mean(m);
        acc = Some(match acc {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(acc.unwrap_or_else(|| g.scalar_const(F::zero())))
}

/// One part's generator-side loss: adversarial + feature matching on the
/// extracted part through that part's semantic critic.
pub enum PartTerm {
    /// The part mask is empty for this sample; contributes exactly zero.
    Skipped,
    Value {
        total: NodeId,
        adv: NodeId,
        fm: NodeId,
    },
}

pub fn part_loss<F: Real>(
    g: &mut Graph<F>,
    part: Part,
    x: NodeId,
    xhat: NodeId,
    parts: &PartMaskSet,
    disc: &SemanticDisc<F>,
) -> Result<PartTerm> {
    if disc.part != part {
        return Err(Error::Parameter(format!(
            "critic for `{}` used for part `{}`",
            disc.part.name(),
            part.name()
        )));
    }
    let mask = parts.mask(part);
    if mask.iter().all(|&v| v == 0) {
        return Ok(PartTerm::Skipped);
    }
    let mask3 = mask_to_channels(g, &mask);
    let x_part = extract_part(g, x, mask3)?;
    let xhat_part = extract_part(g, xhat, mask3)?;

    let fake_out = disc.forward_graph(g, x_part, BindMode::Frozen)?;
    let p = probs(g, fake_out.logits);
    let adv = neg_mean_log(g, p);

    let real_out = disc.forward_graph(g, xhat_part, BindMode::Frozen)?;
    let fm = feature_matching(g, &real_out.features, &fake_out.features)?;
    let total = g.add(adv, fm)?;
    Ok(PartTerm::Value { total, adv, fm })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PartBreakdown {
    pub adv: f64,
    pub fm: f64,
    pub total: f64,
}

/// Weighted sum of per-part losses; skipped parts contribute exactly zero.
/// Returns the node plus per-part values for reporting.
pub fn homogeneity<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    xhat: NodeId,
    parts: &PartMaskSet,
    discs: &IndexMap<Part, SemanticDisc<F>>,
    weights: &LossWeights,
) -> Result<(NodeId, IndexMap<Part, Option<PartBreakdown>>)> {
    let mut acc: Option<NodeId> = None;
    let mut detail = IndexMap::new();
    for part in Part::parts() {
        let disc = discs
            .get(&part)
            .ok_or_else(|| Error::Parameter(format!("no critic for part `{}`", part.name())))?;
        let omega = weights.omega_of(part)?;
        match part_loss(g, part, x, xhat, parts, disc)? {
            PartTerm::Skipped => {
                detail.insert(part, None);
            }
            PartTerm::Value { total, adv, fm } => {
                detail.insert(
                    part,
                    Some(PartBreakdown {
                        adv: g.scalar_value(adv).as_f64(),
                        fm: g.scalar_value(fm).as_f64(),
                        total: g.scalar_value(total).as_f64(),
                    }),
                );
                let scaled = g.scale(total, F::of_f64(omega));
                acc = Some(match acc {
                    Some(t) => g.add(t, scaled)?,
                    None => scaled,
                });
            }
        }
    }
    let node = acc.unwrap_or_else(|| g.scalar_const(F::zero()));
    Ok((node, detail))
}

/// Pure arithmetic of the total objective over already-evaluated components.
pub fn combine_total(
    weights: &LossWeights,
    pixel: f64,
    adversarial: f64,
    feature_matching: f64,
    homogeneity: f64,
    perceptual: f64,
) -> f64 {
    weights.alpha * pixel
        + weights.beta * adversarial
        + weights.gamma * feature_matching
        + weights.delta * homogeneity
        + weights.perceptual_weight * perceptual
}

/// Weighted homogeneity sum over scalar part values (None = skipped).
pub fn combine_homogeneity(
    weights: &LossWeights,
    values: &IndexMap<Part, Option<f64>>,
) -> Result<f64> {
    let mut acc = 0.0;
    for (part, v) in values {
        if let Some(v) = v {
            acc += weights.omega_of(*part)? * v;
        }
    }
    Ok(acc)
}

/// Per-term values of one loss evaluation, plus the per-critic adversarial
/// losses of the critic update. Serialized as one CSV row per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub pixel: f64,
    pub adv_g: f64,
    pub fm: f64,
    pub perceptual: f64,
    pub homogeneity: f64,
    pub total: f64,
    /// Critic losses, keyed "patch", "skin", ..., "ear".
    pub adv_d: IndexMap<String, f64>,
    /// Per-part generator-side values; None = part skipped (empty mask).
    pub parts: IndexMap<String, Option<PartBreakdown>>,
}

impl LossReport {
    pub fn is_finite(&self) -> std::result::Result<(), String> {
        let named = [
            ("pixel", self.pixel),
            ("adv_g", self.adv_g),
            ("fm", self.fm),
            ("perceptual", self.perceptual),
            ("homogeneity", self.homogeneity),
            ("total", self.total),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(name.to_string());
            }
        }
        for (name, v) in &self.adv_d {
            if !v.is_finite() {
                return Err(format!("adv_d.{name}"));
            }
        }
        Ok(())
    }

    /// total must equal the weighted component sum to 1e-6 relative.
    pub fn check_consistency(&self, weights: &LossWeights) -> bool {
        let expect = combine_total(
            weights,
            self.pixel,
            self.adv_g,
            self.fm,
            self.homogeneity,
            self.perceptual,
        );
        let denom = expect.abs().max(self.total.abs()).max(1e-12);
        ((expect - self.total) / denom).abs() < 1e-6
    }

    pub fn csv_header() -> String {
        let mut cols = vec![
            "step".to_string(),
            "pixel".into(),
            "adv_g".into(),
            "fm".into(),
            "perceptual".into(),
            "homogeneity".into(),
            "total".into(),
            "adv_d_patch".into(),
        ];
        for p in Part::parts() {
            cols.push(format!("adv_d_{}", p.name()));
        }
        for p in Part::parts() {
            cols.push(format!("part_{}", p.name()));
            cols.push(format!("part_{}_skipped", p.name()));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            format!("{}", self.pixel),
            format!("{}", self.adv_g),
            format!("{}", self.fm),
            format!("{}", self.perceptual),
            format!("{}", self.homogeneity),
            format!("{}", self.total),
            format!("{}", self.adv_d.get("patch").copied().unwrap_or(f64::NAN)),
        ];
        for p in Part::parts() {
            cols.push(format!(
                "{}",
                self.adv_d.get(p.name()).copied().unwrap_or(f64::NAN)
            ));
        }
        for p in Part::parts() {
            match self.parts.get(p.name()) {
                Some(Some(b)) => {
                    cols.push(format!("{}", b.total));
                    cols.push("0".into());
                }
                _ => {
                    cols.push("0".into());
                    cols.push("1".into());
                }
            }
        }
        cols.join(",")
    }
}

/// A critic that always answers with the same logit; used to pin loss values
/// in tests (logit 0 means probability one half everywhere).
pub struct ConstantCritic {
    pub logit: f64,
}

impl<F: Real> Critic<F> for ConstantCritic {
    fn forward_graph(
        &self,
        g: &mut Graph<F>,
        image: NodeId,
        _mode: BindMode,
    ) -> Result<crate::discriminators::DiscOutput> {
        let b = g.value(image).shape()[0];
        let logits = g.constant(ndarray::ArrayD::from_elem(
            ndarray::IxDyn(&[b, 1]),
            F::of_f64(self.logit),
        ));
        Ok(crate::discriminators::DiscOutput {
            logits,
            features: vec![],
        })
    }

    fn label(&self) -> String {
        "constant".to_string()
    }
}
