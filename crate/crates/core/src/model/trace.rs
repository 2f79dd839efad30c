//! Layer-by-layer layout trace: (name, input shape, output shape, param count)
//! rows matching the model's structured layout table, including the hierarchy
//! summary rows.

use crate::scalar::Scalar;

use super::{ConvKind, DiRecNetV2, HeadMode};

/// One row of the layout table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    /// Indentation level in the table (0 = model root).
    pub depth: usize,
    pub name: String,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Directly owned trainable parameters; `None` renders as `--`.
    pub param_count: Option<usize>,
}

impl TraceRow {
    /// Hierarchy rows summarize a subtree rather than a single executed layer.
    pub fn is_summary(&self) -> bool {
        matches!(
            self.name.as_str(),
            "DiRecNetV2" | "DiRecNet Feature Extractor" | "Transformer Encoder Blocks" | "Classifier Head"
        ) || self.name.starts_with("TransformerEncoderBlock")
    }
}

/// Ordered rows of one replayed or symbolically derived forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub rows: Vec<TraceRow>,
}

impl ShapeTrace {
    /// Rows that correspond to executed layers (no hierarchy summaries).
    pub fn leaf_rows(&self) -> Vec<&TraceRow> {
        self.rows.iter().filter(|r| !r.is_summary()).collect()
    }

    /// Render as an aligned text table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<52} {:<22} {:<22} {:>10}\n",
            "Layer", "Input Shape", "Output Shape", "Param #"
        ));
        for row in &self.rows {
            let indent = "    ".repeat(row.depth);
            let params = row
                .param_count
                .map(group_thousands)
                .unwrap_or_else(|| "--".into());
            out.push_str(&format!(
                "{:<52} {:<22} {:<22} {:>10}\n",
                format!("{}{}", indent, row.name),
                shape_str(&row.input_shape),
                shape_str(&row.output_shape),
                params
            ));
        }
        out
    }
}

fn shape_str(dims: &[usize]) -> String {
    let inner: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl<T: Scalar> DiRecNetV2<T> {
    /// The full layout table for a given batch size, derived symbolically
    /// from the configuration and the parameter registry. Replaying a real
    /// forward pass produces exactly the non-summary rows of this trace.
    pub fn shape_trace(&self, batch: usize) -> ShapeTrace {
        let cfg = self.config();
        let mut rows = Vec::new();
        let input = vec![batch, cfg.input_channels, cfg.input_height, cfg.input_width];
        let (gh, gw) = cfg.token_grid();
        let tokens = cfg.token_count();
        let d = cfg.embed_dim;
        let classes = cfg.num_classes;

        let top_level =
            self.params().count_prefix("cls_token") + self.params().count_prefix("pos_embedding");
        rows.push(TraceRow {
            depth: 0,
            name: "DiRecNetV2".into(),
            input_shape: input.clone(),
            output_shape: vec![batch, classes],
            param_count: Some(top_level),
        });
        rows.push(TraceRow {
            depth: 1,
            name: "DiRecNet Feature Extractor".into(),
            input_shape: input.clone(),
            output_shape: vec![batch, gh * gw, d],
            param_count: None,
        });

        let (mut c, mut h, mut w) = (cfg.input_channels, cfg.input_height, cfg.input_width);
        for (si, stage) in cfg.extractor.iter().enumerate() {
            for (li, kind) in stage.convs.iter().enumerate() {
                let (name, out_c) = match kind {
                    ConvKind::Standard { out_channels, .. } => ("Conv2d", *out_channels),
                    ConvKind::Depthwise => ("DepthwiseConv2d", c),
                    ConvKind::Pointwise { out_channels } => ("PointwiseConv2d", *out_channels),
                };
                rows.push(TraceRow {
                    depth: 2,
                    name: name.into(),
                    input_shape: vec![batch, c, h, w],
                    output_shape: vec![batch, out_c, h, w],
                    param_count: Some(
                        self.params()
                            .count_prefix(&format!("extractor.stage{}.layer{}.", si + 1, li + 1)),
                    ),
                });
                c = out_c;
            }
            rows.push(TraceRow {
                depth: 2,
                name: "BatchNorm2d".into(),
                input_shape: vec![batch, c, h, w],
                output_shape: vec![batch, c, h, w],
                param_count: Some(
                    self.params()
                        .count_prefix(&format!("extractor.stage{}.bn.", si + 1)),
                ),
            });
            rows.push(TraceRow {
                depth: 2,
                name: "MaxPool2d".into(),
                input_shape: vec![batch, c, h, w],
                output_shape: vec![batch, c, h / 2, w / 2],
                param_count: None,
            });
            h /= 2;
            w /= 2;
        }

        rows.push(TraceRow {
            depth: 2,
            name: "Flatten".into(),
            input_shape: vec![batch, d, gh, gw],
            output_shape: vec![batch, tokens, d],
            param_count: None,
        });
        rows.push(TraceRow {
            depth: 1,
            name: "Dropout".into(),
            input_shape: vec![batch, tokens, d],
            output_shape: vec![batch, tokens, d],
            param_count: None,
        });
        rows.push(TraceRow {
            depth: 1,
            name: "Transformer Encoder Blocks".into(),
            input_shape: vec![batch, tokens, d],
            output_shape: vec![batch, tokens, d],
            param_count: None,
        });
        for bi in 0..cfg.num_encoder_blocks {
            rows.push(TraceRow {
                depth: 2,
                name: format!("TransformerEncoderBlock ({})", bi + 1),
                input_shape: vec![batch, tokens, d],
                output_shape: vec![batch, tokens, d],
                param_count: None,
            });
            rows.push(TraceRow {
                depth: 3,
                name: "MultiheadSelfAttentionBlock".into(),
                input_shape: vec![batch, tokens, d],
                output_shape: vec![batch, tokens, d],
                param_count: Some(self.params().count_prefix(&format!("encoder.{}.attn.", bi))),
            });
            rows.push(TraceRow {
                depth: 3,
                name: "MLPBlock".into(),
                input_shape: vec![batch, tokens, d],
                output_shape: vec![batch, tokens, d],
                param_count: Some(self.params().count_prefix(&format!("encoder.{}.mlp.", bi))),
            });
        }

        rows.push(TraceRow {
            depth: 1,
            name: "Classifier Head".into(),
            input_shape: vec![batch, tokens, d],
            output_shape: vec![batch, classes],
            param_count: None,
        });
        rows.push(TraceRow {
            depth: 2,
            name: "LayerNorm".into(),
            input_shape: vec![batch, d],
            output_shape: vec![batch, d],
            param_count: Some(self.params().count_prefix("head.norm.")),
        });
        rows.push(TraceRow {
            depth: 2,
            name: "Dropout".into(),
            input_shape: vec![batch, d],
            output_shape: vec![batch, d],
            param_count: None,
        });
        rows.push(TraceRow {
            depth: 2,
            name: "Linear".into(),
            input_shape: vec![batch, d],
            output_shape: vec![batch, classes],
            param_count: Some(self.params().count_prefix("head.fc.")),
        });
        rows.push(TraceRow {
            depth: 2,
            name: match cfg.head_mode {
                HeadMode::Single => "Softmax",
                HeadMode::Multi => "Sigmoid",
            }
            .into(),
            input_shape: vec![batch, classes],
            output_shape: vec![batch, classes],
            param_count: None,
        });

        ShapeTrace { rows }
    }
}
