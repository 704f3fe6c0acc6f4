use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    SmallCnn,
    SmallCnnResidual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Identity,
}

/// Projection head: hidden MLP followed by the L2 bottleneck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorSpec {
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    pub out_dim: usize,
    pub use_weight_norm: bool,
    pub use_first_linear: bool,
    pub use_feature_norm: bool,
    /// Replaces GELU between hidden layers with the identity.
    pub linear_hidden: bool,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec {
            hidden_dims: vec![256, 256],
            bottleneck_dim: 32,
            out_dim: 4096,
            use_weight_norm: true,
            use_first_linear: true,
            use_feature_norm: true,
            linear_hidden: false,
        }
    }
}

/// Architecture of an encoder + head model.
///
/// For `mlp` encoders `encoder_widths` are the hidden widths and a final
/// linear layer maps to `embed_dim`. For the CNN encoders they are the
/// channel counts of the conv blocks and the last one must equal
/// `embed_dim` (the embedding is the global average of the last block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub encoder_widths: Vec<usize>,
    pub embed_dim: usize,
    pub norm: NormKind,
    pub projector: ProjectorSpec,
    /// Per-sample input shape: `[d]` for vectors, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// When set, the head is a linear classifier with this many classes
    /// instead of the projector.
    pub classes: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderKind::SmallCnn,
            encoder_widths: vec![16, 32, 64],
            embed_dim: 64,
            norm: NormKind::Batch,
            projector: ProjectorSpec::default(),
            input_shape: vec![1, 8, 8],
            classes: None,
        }
    }
}

impl ModelSpec {
    /// Default MLP encoder `d → 256 → 128 → 64`.
    pub fn mlp(input_dim: usize) -> Self {
        ModelSpec {
            encoder: EncoderKind::Mlp,
            encoder_widths: vec![256, 128],
            embed_dim: 64,
            input_shape: vec![input_dim],
            ..ModelSpec::default()
        }
    }

    /// Default three-block CNN over `[C, H, W]` images.
    pub fn small_cnn(input_shape: [usize; 3]) -> Self {
        ModelSpec {
            input_shape: input_shape.to_vec(),
            ..ModelSpec::default()
        }
    }

    /// Same encoder with a `classes`-way linear head.
    pub fn classifier(&self, classes: usize) -> Self {
        ModelSpec {
            classes: Some(classes),
            ..self.clone()
        }
    }

    /// Same encoder with the projection head.
    pub fn with_projector(&self) -> Self {
        ModelSpec {
            classes: None,
            ..self.clone()
        }
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be non-empty and positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        match self.encoder {
            EncoderKind::Mlp => {
                if self.input_shape.is_empty() || self.input_numel() == 0 {
                    return bad("mlp input_shape must be non-empty".into());
                }
            }
            EncoderKind::SmallCnn | EncoderKind::SmallCnnResidual => {
                if self.input_shape.len() != 3 {
                    return bad(format!("cnn input_shape must be [C, H, W], got {:?}", self.input_shape));
                }
                if self.encoder_widths.last() != Some(&self.embed_dim) {
                    return bad("cnn embed_dim must equal the last encoder width".into());
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for _ in &self.encoder_widths {
                    if h < 2 || w < 2 {
                        return bad(format!(
                            "input {:?} too small for {} pooled blocks",
                            self.input_shape,
                            self.encoder_widths.len()
                        ));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
        }
        if let Some(k) = self.classes {
            if k < 2 {
                return bad("classifier needs at least two classes".into());
            }
        } else {
            let p = &self.projector;
            if p.out_dim == 0 || (p.use_first_linear && p.bottleneck_dim == 0) {
                return bad("projector dimensions must be positive".into());
            }
            if p.hidden_dims.contains(&0) {
                return bad("projector hidden dims must be positive".into());
            }
        }
        Ok(())
    }

    /// True when the bottleneck is not narrower than the output, which is
    /// allowed (for output-dimension sweeps) but unusual.
    pub fn bottleneck_flagged(&self) -> bool {
        self.projector.use_first_linear && self.projector.bottleneck_dim >= self.projector.out_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let s = ModelSpec::default();
        s.validate().unwrap();
        assert_eq!(s.projector.hidden_dims.len(), 2);
        assert!(s.projector.bottleneck_dim < s.projector.out_dim);
        assert!(!s.bottleneck_flagged());
        ModelSpec::mlp(10).validate().unwrap();
    }

    #[test]
    fn cnn_needs_room_to_pool() {
        let s = ModelSpec::small_cnn([1, 4, 4]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn flags_wide_bottleneck() {
        let mut s = ModelSpec::default();
        s.projector.out_dim = s.projector.bottleneck_dim;
        assert!(s.bottleneck_flagged());
        s.validate().unwrap();
    }
}
