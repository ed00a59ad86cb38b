//! Vision-transformer backbone shared by the digit classifier and the
//! pairwise similarity model.
//!
//! Both models use the same pre-norm encoder stack; they differ only in the
//! number of input channels (one image, or query and reference stacked) and
//! in the head applied to the final CLS token.

mod checkpoint;
mod config;
mod patch;

pub use checkpoint::{Checkpoint, TrainingMeta, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE};
pub use config::{HeadKind, ModelConfig};
pub use patch::{stack_channels, PatchGrid};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::tensor::Tensor;
use config::{PARAMS_PER_LAYER, STEM_PARAMS};

/// Forward passes are evaluated in chunks of at most this many inputs.
pub const INFERENCE_BATCH: usize = 128;

/// Named parameter tensors in the order given by [`ModelConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    /// Truncated-normal weights (±2σ), zero biases, unit LayerNorm gains.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0f32, config.init_std).expect("finite std");
        let limit = 2.0 * config.init_std;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v = normal.sample(rng);
                        if v.abs() <= limit {
                            break v;
                        }
                    })
                    .collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { names, tensors })
    }

    /// Checks that `named` holds exactly the parameters `config` requires.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.param_shapes();
        let mut by_name: std::collections::HashMap<String, Tensor> = Default::default();
        for (name, t) in named {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
        }
        let mut names = Vec::with_capacity(expected.len());
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape. With `track` set the leaves collect
    /// gradients.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(track)))
            .collect()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, outputs]` head values: logits for the classifier, raw logits
    /// (pre-sigmoid) for the similarity head.
    pub head: Var,
    /// One attention node per encoder layer; see [`Graph::attention_weights`].
    pub attention: Vec<Var>,
}

/// One pre-norm encoder block: `x ← x + MHA(LN(x))`, `x ← x + MLP(LN(x))`.
///
/// `layer` holds the block's parameters in [`ModelConfig::param_shapes`]
/// order. Returns the block output and the attention node.
pub fn encoder_block(g: &mut Graph, config: &ModelConfig, layer: &[Var], x: Var) -> Result<(Var, Var)> {
    let [ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = layer
    else {
        return Err(Error::Argument(format!(
            "encoder block expects {PARAMS_PER_LAYER} parameters, got {}",
            layer.len()
        )));
    };
    let h = g.layer_norm(x, *ln1_g, *ln1_b, config.ln_eps)?;
    let qkv = g.linear(h, *qkv_w, Some(*qkv_b))?;
    let attn = g.attention(qkv, config.num_heads)?;
    let proj = g.linear(attn, *proj_w, Some(*proj_b))?;
    let x = g.add(x, proj)?;
    let h = g.layer_norm(x, *ln2_g, *ln2_b, config.ln_eps)?;
    let h = g.linear(h, *fc1_w, Some(*fc1_b))?;
    let h = g.gelu(h);
    let h = g.linear(h, *fc2_w, Some(*fc2_b))?;
    Ok((g.add(x, h)?, attn))
}

/// Full forward pass from pre-cut patches `[batch, grid_n², patch_dim]`.
pub fn forward_patches(g: &mut Graph, config: &ModelConfig, params: &[Var], patches: Var) -> Result<Forward> {
    let expected = config.param_shapes().len();
    if params.len() != expected {
        return Err(Error::Argument(format!(
            "forward expects {expected} parameters, got {}",
            params.len()
        )));
    }
    let tokens = g.linear(patches, params[0], Some(params[1]))?;
    let mut x = g.embed_tokens(tokens, params[2], params[3])?;
    let mut attention = Vec::with_capacity(config.num_layers);
    for layer in params[STEM_PARAMS..].chunks_exact(PARAMS_PER_LAYER).take(config.num_layers) {
        let (y, a) = encoder_block(g, config, layer, x)?;
        x = y;
        attention.push(a);
    }
    let tail = &params[STEM_PARAMS + PARAMS_PER_LAYER * config.num_layers..];
    let x = g.layer_norm(x, tail[0], tail[1], config.ln_eps)?;
    let cls = g.select_token(x, 0)?;
    let head = g.linear(cls, tail[2], Some(tail[3]))?;
    Ok(Forward { head, attention })
}

/// A configured transformer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Result of running the model on a batch without gradient tracking.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Head outputs, `outputs` values per input. Similarity scores are
    /// already passed through the sigmoid.
    pub outputs: Vec<Vec<f32>>,
    pub traces: Option<Vec<AttentionTrace>>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = Params::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            side: self.config.image_side,
            channels: self.config.channels_in,
            grid_n: self.config.grid_n,
        }
    }

    fn expect_head(&self, head: HeadKind) -> Result<()> {
        if self.config.head != head {
            return Err(Error::Config(format!(
                "model has a {:?} head, operation needs {:?}",
                self.config.head, head
            )));
        }
        Ok(())
    }

    /// Cuts channel-last images into a `[batch, grid_n², patch_dim]` tensor.
    pub fn patch_batch<I: AsRef<[f32]>>(&self, images: &[I]) -> Result<Tensor> {
        let grid = self.grid();
        let per = grid.image_len();
        let mut data = vec![0.0; images.len() * per];
        for (img, dst) in images.iter().zip(data.chunks_exact_mut(per)) {
            grid.patchify_into(img.as_ref(), dst)?;
        }
        Tensor::new(
            vec![images.len(), grid.num_patches(), grid.patch_len()],
            data,
        )
    }

    /// Runs the model on pre-cut patches, chunking large batches.
    pub fn infer_patches(&self, patches: &Tensor, with_trace: bool) -> Result<Inference> {
        let s = patches.shape();
        let m = self.config.num_patches();
        let pd = self.config.patch_dim();
        if s.len() != 3 || s[1] != m || s[2] != pd {
            return Err(Error::shape("infer_patches", s, &[m, pd]));
        }
        let per = m * pd;
        let mut outputs = Vec::with_capacity(s[0]);
        let mut traces = with_trace.then(Vec::new);
        for chunk in patches.data().chunks(INFERENCE_BATCH * per) {
            let b = chunk.len() / per;
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let x = g.constant(Tensor::from_parts(vec![b, m, pd], chunk.to_vec()));
            let fwd = forward_patches(&mut g, &self.config, &vars, x)?;
            let k = self.config.head.outputs();
            for row in g.value(fwd.head).data().chunks_exact(k) {
                outputs.push(match self.config.head {
                    HeadKind::Classifier10 => row.to_vec(),
                    HeadKind::Similarity1 => row.iter().map(|&z| sigmoid(z)).collect(),
                });
            }
            if let Some(traces) = traces.as_mut() {
                traces.extend(self.collect_traces(&g, &fwd, b));
            }
        }
        Ok(Inference { outputs, traces })
    }

    fn collect_traces(&self, g: &Graph, fwd: &Forward, batch: usize) -> Vec<AttentionTrace> {
        let heads = self.config.num_heads;
        let t = self.config.num_tokens();
        let per = heads * t * t;
        (0..batch)
            .map(|b| {
                let layers = fwd
                    .attention
                    .iter()
                    .map(|&a| {
                        let w = g.attention_weights(a).expect("attention node");
                        w[b * per..(b + 1) * per].to_vec()
                    })
                    .collect();
                AttentionTrace::new(heads, t, layers).expect("trace dimensions follow config")
            })
            .collect()
    }

    pub fn infer<I: AsRef<[f32]>>(&self, images: &[I], with_trace: bool) -> Result<Inference> {
        let patches = self.patch_batch(images)?;
        self.infer_patches(&patches, with_trace)
    }

    /// Digit logits and attention trace for one 28×28 image.
    pub fn vit_forward(&self, image: &[f32]) -> Result<(Vec<f32>, AttentionTrace)> {
        self.expect_head(HeadKind::Classifier10)?;
        let mut r = self.infer(&[image], true)?;
        let trace = r.traces.take().and_then(|mut t| t.pop()).expect("trace requested");
        Ok((r.outputs.remove(0), trace))
    }

    /// Logits for many images (no traces).
    pub fn classify_batch<I: AsRef<[f32]>>(&self, images: &[I]) -> Result<Vec<Vec<f32>>> {
        self.expect_head(HeadKind::Classifier10)?;
        Ok(self.infer(images, false)?.outputs)
    }

    /// Same-class probability for `(query, reference)`, with the query in
    /// channel 0.
    pub fn cevit_score(&self, query: &[f32], reference: &[f32]) -> Result<(f32, AttentionTrace)> {
        self.expect_head(HeadKind::Similarity1)?;
        let input = stack_channels(query, reference)?;
        let mut r = self.infer(&[input], true)?;
        let trace = r.traces.take().and_then(|mut t| t.pop()).expect("trace requested");
        Ok((r.outputs[0][0], trace))
    }

    /// Scores one query against many references.
    pub fn score_pairs<I: AsRef<[f32]>>(&self, query: &[f32], references: &[I]) -> Result<Vec<f32>> {
        self.expect_head(HeadKind::Similarity1)?;
        let inputs = references
            .iter()
            .map(|r| stack_channels(query, r.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.infer(&inputs, false)?.outputs.into_iter().map(|o| o[0]).collect())
    }

    /// Scores many references against one query in both channel orders.
    pub fn score_pairs_symmetric<I: AsRef<[f32]>>(&self, query: &[f32], references: &[I]) -> Result<Vec<f32>> {
        let fwd = self.score_pairs(query, references)?;
        let inputs = references
            .iter()
            .map(|r| stack_channels(r.as_ref(), query))
            .collect::<Result<Vec<_>>>()?;
        let rev = self.infer(&inputs, false)?.outputs;
        Ok(fwd.iter().zip(rev).map(|(a, b)| 0.5 * (a + b[0])).collect())
    }

    /// Names and shapes of every encoder-stack parameter.
    pub fn encoder_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}
