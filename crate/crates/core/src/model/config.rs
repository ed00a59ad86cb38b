use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// Ten logits, one per digit.
    #[serde(rename = "classifier10")]
    Classifier10,
    /// One logit squashed by a sigmoid into a same-class probability.
    #[serde(rename = "similarity1")]
    Similarity1,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classifier10 => 10,
            HeadKind::Similarity1 => 1,
        }
    }
}

/// Architecture hyperparameters. Parameter shapes are a pure function of this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub channels_in: usize,
    pub grid_n: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_layers: usize,
    pub head: HeadKind,
    pub ln_eps: f32,
    pub init_std: f32,
}

impl ModelConfig {
    /// Baseline digit classifier over single-channel 28×28 images.
    pub fn vit() -> Self {
        Self {
            image_side: 28,
            channels_in: 1,
            grid_n: 7,
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            num_layers: 6,
            head: HeadKind::Classifier10,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Pairwise similarity model: query and reference stacked as two channels.
    pub fn cevit() -> Self {
        Self {
            channels_in: 2,
            head: HeadKind::Similarity1,
            ..Self::vit()
        }
    }

    pub fn patch_side(&self) -> usize {
        self.image_side / self.grid_n
    }

    /// Number of image tokens, `grid_n²`.
    pub fn num_patches(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Image tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_side() * self.patch_side() * self.channels_in
    }

    pub fn image_len(&self) -> usize {
        self.image_side * self.image_side * self.channels_in
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_n == 0 || self.image_side % self.grid_n != 0 {
            return fail(format!(
                "grid_n {} does not divide image_side {}",
                self.grid_n, self.image_side
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.channels_in == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 {
            return fail("channels_in, embed_dim and mlp_hidden must be positive".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        for i in 0..self.num_layers {
            let p = |s: &str| format!("encoder.{i}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, self.mlp_hidden]),
                (p("mlp.fc1.bias"), vec![self.mlp_hidden]),
                (p("mlp.fc2.weight"), vec![self.mlp_hidden, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("final_norm.gamma".to_string(), vec![d]),
            ("final_norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.head.outputs()]),
            ("head.bias".to_string(), vec![self.head.outputs()]),
        ]);
        out
    }
}

/// Number of parameters each encoder layer contributes to [`ModelConfig::param_shapes`].
pub(crate) const PARAMS_PER_LAYER: usize = 12;
/// Parameters ahead of the first encoder layer.
pub(crate) const STEM_PARAMS: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        for cfg in [ModelConfig::vit(), ModelConfig::cevit()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.patch_side(), 4);
            assert_eq!(cfg.num_patches(), 49);
            assert_eq!(cfg.num_tokens(), 50);
            assert_eq!(
                cfg.param_shapes().len(),
                STEM_PARAMS + PARAMS_PER_LAYER * cfg.num_layers + 4
            );
        }
        assert_eq!(ModelConfig::cevit().patch_dim(), 32);
        assert_eq!(ModelConfig::vit().patch_dim(), 16);
    }

    #[test]
    fn desk_model_is_small() {
        let n: usize = ModelConfig::cevit()
            .param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert!(n < 1_000_000, "{n}");
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::vit();
        c.grid_n = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::vit();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::vit();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn head_serializes_by_name() {
        assert_eq!(
            serde_json::to_string(&HeadKind::Similarity1).unwrap(),
            "\"similarity1\""
        );
    }
}
