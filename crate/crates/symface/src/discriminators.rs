//! The patch critic (grid of local real/fake logits) and the semantic critic
//! (one global logit per masked-out face part). Both share the same strided
//! convolution trunk; the six per-part critics share architecture but never
//! parameters.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BindMode, Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::toyfaces::Part;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDiscConfig {
    pub layers: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for PatchDiscConfig {
    fn default() -> Self {
        PatchDiscConfig {
            layers: 4,
            base_channels: 32,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDiscConfig {
    pub layers: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for SemanticDiscConfig {
    fn default() -> Self {
        SemanticDiscConfig {
            layers: 4,
            base_channels: 32,
            leaky_slope: 0.2,
        }
    }
}

/// Logits plus the post-activation feature maps of each strided block,
/// shallow to deep.
pub struct DiscOutput {
    pub logits: NodeId,
    pub features: Vec<NodeId>,
}

/// Anything that judges an image batch inside a graph. Stubbed in loss
/// tests, implemented by the two critics here.
pub trait Critic<F: Real> {
    fn forward_graph(&self, g: &mut Graph<F>, image: NodeId, mode: BindMode)
        -> Result<DiscOutput>;
    fn label(&self) -> String;
}

fn trunk_channels(base: usize, layers: usize) -> Vec<usize> {
    (0..layers).map(|i| base << i.min(3)).collect()
}

fn init_trunk<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Initializer,
    prefix: &str,
    layers: usize,
    base: usize,
) -> Result<usize> {
    let mut cin = 3usize;
    for (i, cout) in trunk_channels(base, layers).into_iter().enumerate() {
        store.insert(
            format!("{prefix}.conv{i}.w"),
            init.kaiming_conv(&[cout, cin, 4, 4]),
        )?;
        store.insert(format!("{prefix}.conv{i}.b"), init.zeros(&[cout]))?;
        cin = cout;
    }
    Ok(cin)
}

fn trunk_forward<F: Real>(
    g: &mut Graph<F>,
    image: NodeId,
    bind: &crate::params::Binding,
    prefix: &str,
    layers: usize,
    slope: F,
) -> Result<Vec<NodeId>> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "critic input must be [B,3,H,W], got {shape:?}"
        )));
    }
    if shape[2] < (1 << layers) || shape[3] < (1 << layers) {
        return Err(Error::Shape(format!(
            "input {}x{} too small for {layers} stride-2 layers",
            shape[2], shape[3]
        )));
    }
    let mut x = image;
    let mut features = Vec::with_capacity(layers);
    for i in 0..layers {
        let conv = g.conv2d(x, bind.id(&format!("{prefix}.conv{i}.w")), 2, 1)?;
        let conv = g.add_chan_bias(conv, bind.id(&format!("{prefix}.conv{i}.b")))?;
        x = g.leaky_relu(conv, slope);
        features.push(x);
    }
    Ok(features)
}

/// Convolutional critic emitting a (H/2^L, W/2^L) grid of logits.
pub struct PatchDisc<F: Real> {
    pub config: PatchDiscConfig,
    pub params: ParamStore<F>,
    prefix: String,
}

impl<F: Real> PatchDisc<F> {
    pub fn new(config: PatchDiscConfig, seed: u64) -> Result<Self> {
        let prefix = "disc.patch".to_string();
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let last = init_trunk(
            &mut params,
            &mut init,
            &prefix,
            config.layers,
            config.base_channels,
        )?;
        params.insert(format!("{prefix}.head.w"), init.kaiming_conv(&[1, last, 3, 3]))?;
        params.insert(format!("{prefix}.head.b"), init.zeros(&[1]))?;
        Ok(PatchDisc {
            config,
            params,
            prefix,
        })
    }

    pub fn from_params(config: PatchDiscConfig, params: ParamStore<F>) -> Self {
        PatchDisc {
            config,
            params,
            prefix: "disc.patch".to_string(),
        }
    }
}

impl<F: Real> Critic<F> for PatchDisc<F> {
    fn forward_graph(
        &self,
        g: &mut Graph<F>,
        image: NodeId,
        mode: BindMode,
    ) -> Result<DiscOutput> {
        let bind = self.params.bind(g, mode);
        let slope = F::of_f64(self.config.leaky_slope);
        let features = trunk_forward(g, image, &bind, &self.prefix, self.config.layers, slope)?;
        let deepest = *features.last().expect("trunk has layers");
        let logits = g.conv2d(deepest, bind.id(&format!("{}.head.w", self.prefix)), 1, 1)?;
        let logits = g.add_chan_bias(logits, bind.id(&format!("{}.head.b", self.prefix)))?;
        Ok(DiscOutput { logits, features })
    }

    fn label(&self) -> String {
        "patch".to_string()
    }
}

/// Critic with a single global logit per image, used per face part.
pub struct SemanticDisc<F: Real> {
    pub config: SemanticDiscConfig,
    pub params: ParamStore<F>,
    pub part: Part,
    prefix: String,
}

impl<F: Real> SemanticDisc<F> {
    pub fn new(config: SemanticDiscConfig, part: Part, seed: u64) -> Result<Self> {
        let prefix = format!("disc.part.{}", part.name());
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let last = init_trunk(
            &mut params,
            &mut init,
            &prefix,
            config.layers,
            config.base_channels,
        )?;
        params.insert(
            format!("{prefix}.head.w"),
            init.trunc_normal(&[last, 1], 0.02),
        )?;
        params.insert(format!("{prefix}.head.b"), init.zeros(&[1]))?;
        Ok(SemanticDisc {
            config,
            params,
            part,
            prefix,
        })
    }

    pub fn from_params(config: SemanticDiscConfig, part: Part, params: ParamStore<F>) -> Self {
        let prefix = format!("disc.part.{}", part.name());
        SemanticDisc {
            config,
            params,
            part,
            prefix,
        }
    }
}

impl<F: Real> Critic<F> for SemanticDisc<F> {
    fn forward_graph(
        &self,
        g: &mut Graph<F>,
        image: NodeId,
        mode: BindMode,
    ) -> Result<DiscOutput> {
        let bind = self.params.bind(g, mode);
        let slope = F::of_f64(self.config.leaky_slope);
        let features = trunk_forward(g, image, &bind, &self.prefix, self.config.layers, slope)?;
        let deepest = *features.last().expect("trunk has layers");
        let pooled = g.mean_spatial(deepest)?;
        let logits = g.matmul(pooled, bind.id(&format!("{}.head.w", self.prefix)))?;
        let logits = g.add_row_bias(logits, bind.id(&format!("{}.head.b", self.prefix)))?;
        Ok(DiscOutput { logits, features })
    }

    fn label(&self) -> String {
        format!("part.{}", self.part.name())
    }
}

/// Elementwise product of an image batch with a {0,1} mask, broadcast over
/// channels: the part-extraction step in front of a semantic critic.
pub fn extract_part<F: Real>(g: &mut Graph<F>, image: NodeId, mask: NodeId) -> Result<NodeId> {
    let is = g.value(image).shape().to_vec();
    let ms = g.value(mask).shape().to_vec();
    if is != ms {
        return Err(Error::Shape(format!("extract_part image {is:?} vs mask {ms:?}")));
    }
    g.mul(image, mask)
}

/// Lift a {0,1} H x W mask to a [1,3,H,W] constant for in-graph extraction.
pub fn mask_to_channels<F: Real>(g: &mut Graph<F>, mask: &Array2<u8>) -> NodeId {
    let (h, w) = mask.dim();
    let mut arr = ArrayD::<F>::zeros(IxDyn(&[1, 3, h, w]));
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 1 {
                for k in 0..3 {
                    arr[[0, k, r, c]] = F::one();
                }
            }
        }
    }
    g.constant(arr)
}

/// Plain-array part extraction used outside of graphs.
pub fn extract_part_array(image: &Array3<f32>, mask: &Array2<u8>) -> Result<Array3<f32>> {
    let (h, w, ch) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "extract_part image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                for k in 0..ch {
                    out[[r, c, k]] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
