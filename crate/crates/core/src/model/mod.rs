//! The DiRecNetV2 computation graph: a four-stage convolutional feature
//! extractor feeding pre-norm transformer encoder blocks through a CLS-token
//! classifier head, with exact per-layer parameter accountability.

mod checkpoint;
mod trace;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use trace::{ShapeTrace, TraceRow};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{BatchNormState, Tape, ValueId};
use crate::tensor::Tensor;

/// Classifier head output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Softmax over classes; rows sum to 1.
    Single,
    /// Independent sigmoid per class.
    Multi,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Single => "single",
            HeadMode::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(HeadMode::Single),
            "multi" => Some(HeadMode::Multi),
            _ => None,
        }
    }
}

/// Forward/eval switch. Train mode uses batch statistics and active dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One convolution inside an extractor stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConvKind {
    Standard { kernel: usize, out_channels: usize },
    Depthwise,
    Pointwise { out_channels: usize },
}

/// A block of convolutions followed by batch norm and 2x2 max pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorStage {
    pub convs: Vec<ConvKind>,
}

/// Hyperparameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_blocks: usize,
    pub num_classes: usize,
    pub mlp_dim: usize,
    pub head_mode: HeadMode,
    pub dropout_embed: f64,
    pub dropout_head: f64,
    pub dropout_block: f64,
    pub layer_norm_eps: f64,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    pub extractor: Vec<ExtractorStage>,
}

impl ModelConfig {
    /// The published architecture: 224x224x3 input, embedding 192, 12 heads,
    /// two encoder blocks, four classes.
    pub fn default_with_head(head_mode: HeadMode) -> Self {
        use ConvKind::*;
        ModelConfig {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            embed_dim: 192,
            num_heads: 12,
            num_encoder_blocks: 2,
            num_classes: 4,
            mlp_dim: 192,
            head_mode,
            dropout_embed: 0.5,
            dropout_head: 0.5,
            dropout_block: 0.0,
            layer_norm_eps: 1e-6,
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            extractor: vec![
                ExtractorStage {
                    convs: vec![
                        Standard { kernel: 7, out_channels: 16 },
                        Standard { kernel: 5, out_channels: 16 },
                    ],
                },
                ExtractorStage {
                    convs: vec![
                        Standard { kernel: 3, out_channels: 32 },
                        Standard { kernel: 3, out_channels: 64 },
                    ],
                },
                ExtractorStage {
                    convs: vec![
                        Depthwise,
                        Pointwise { out_channels: 128 },
                        Depthwise,
                        Pointwise { out_channels: 256 },
                    ],
                },
                ExtractorStage {
                    convs: vec![
                        Depthwise,
                        Pointwise { out_channels: 512 },
                        Depthwise,
                        Pointwise { out_channels: 192 },
                    ],
                },
            ],
        }
    }

    /// A miniature topology of the same layer types, used for end-to-end
    /// gradient checks at small extents.
    pub fn reduced(head_mode: HeadMode) -> Self {
        use ConvKind::*;
        ModelConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            embed_dim: 8,
            num_heads: 2,
            num_encoder_blocks: 1,
            num_classes: 3,
            mlp_dim: 8,
            head_mode,
            dropout_embed: 0.0,
            dropout_head: 0.0,
            dropout_block: 0.0,
            layer_norm_eps: 1e-6,
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            extractor: vec![
                ExtractorStage {
                    convs: vec![Standard { kernel: 3, out_channels: 4 }],
                },
                ExtractorStage {
                    convs: vec![Depthwise, Pointwise { out_channels: 8 }],
                },
            ],
        }
    }

    /// Spatial extent of the token grid after all pooling stages.
    pub fn token_grid(&self) -> (usize, usize) {
        let div = 1usize << self.extractor.len();
        (self.input_height / div, self.input_width / div)
    }

    /// Sequence length including the CLS token.
    pub fn token_count(&self) -> usize {
        let (gh, gw) = self.token_grid();
        gh * gw + 1
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(TensorError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        let div = 1usize << self.extractor.len();
        if !self.input_height.is_multiple_of(div) || !self.input_width.is_multiple_of(div) {
            return Err(TensorError::Config(format!(
                "input {}x{} not divisible by pooling factor {}",
                self.input_height, self.input_width, div
            )));
        }
        let mut c = self.input_channels;
        for stage in &self.extractor {
            for conv in &stage.convs {
                c = match conv {
                    ConvKind::Standard { out_channels, .. } => *out_channels,
                    ConvKind::Depthwise => c,
                    ConvKind::Pointwise { out_channels } => *out_channels,
                };
            }
        }
        if c != self.embed_dim {
            return Err(TensorError::Config(format!(
                "extractor ends at {} channels but embed_dim is {}",
                c, self.embed_dim
            )));
        }
        if self.num_classes == 0 || self.num_encoder_blocks == 0 {
            return Err(TensorError::Config(
                "num_classes and num_encoder_blocks must be positive".into(),
            ));
        }
        for rate in [self.dropout_embed, self.dropout_head, self.dropout_block] {
            if !(0.0..1.0).contains(&rate) {
                return Err(TensorError::Config(format!("dropout rate {} out of [0,1)", rate)));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct LayerPlan {
    kind: ConvKind,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug)]
struct StagePlan {
    layers: Vec<LayerPlan>,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    channels: usize,
}

/// Tape values of one attention block's projections (all carry bias).
#[derive(Debug)]
pub struct AttentionParamIds {
    pub q_weight: ValueId,
    pub q_bias: ValueId,
    pub k_weight: ValueId,
    pub k_bias: ValueId,
    pub v_weight: ValueId,
    pub v_bias: ValueId,
    pub out_weight: ValueId,
    pub out_bias: ValueId,
}

#[derive(Debug)]
struct BlockPlan {
    attn_norm_gamma: ParamId,
    attn_norm_beta: ParamId,
    q_weight: ParamId,
    q_bias: ParamId,
    k_weight: ParamId,
    k_bias: ParamId,
    v_weight: ParamId,
    v_bias: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    mlp_norm_gamma: ParamId,
    mlp_norm_beta: ParamId,
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

#[derive(Debug)]
struct HeadPlan {
    norm_gamma: ParamId,
    norm_beta: ParamId,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

/// The instantiated model: parameters, batch-norm running state, mode flag.
#[derive(Debug)]
pub struct DiRecNetV2<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    bn_states: Vec<BatchNormState<T>>,
    mode: Mode,
    stages: Vec<StagePlan>,
    cls_token: ParamId,
    pos_embedding: ParamId,
    blocks: Vec<BlockPlan>,
    head: HeadPlan,
    seed: u64,
}

/// Mapping from model parameters to their leaf values on a tape.
#[derive(Debug)]
pub struct TapeBindings {
    entries: Vec<(ParamId, ValueId)>,
}

impl TapeBindings {
    pub fn value_of(&self, id: ParamId) -> ValueId {
        self.entries[id.0].1
    }

    pub fn entries(&self) -> &[(ParamId, ValueId)] {
        &self.entries
    }
}

fn uniform_init<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("sized buffer")
}

fn normal_init<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    // Box-Muller, one fresh pair of uniforms per element.
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("sized buffer")
}

impl<T: Scalar> DiRecNetV2<T> {
    /// Instantiate the model with seed-controlled initialization:
    /// fan-in-scaled uniform for convolutions and linears, zero biases,
    /// N(0, 0.02) for the CLS token and positional embedding.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut bn_states = Vec::new();
        let mut stages = Vec::new();

        let mut c = config.input_channels;
        for (si, stage) in config.extractor.iter().enumerate() {
            let mut layers = Vec::new();
            for (li, kind) in stage.convs.iter().enumerate() {
                let prefix = format!("extractor.stage{}.layer{}", si + 1, li + 1);
                let (weight, bias, out_c) = match kind {
                    ConvKind::Standard { kernel, out_channels } => {
                        let w = params.add(
                            format!("{}.weight", prefix),
                            uniform_init(
                                &[*out_channels, c, *kernel, *kernel],
                                c * kernel * kernel,
                                &mut rng,
                            ),
                        );
                        let b = params.add(format!("{}.bias", prefix), Tensor::zeros(&[*out_channels]));
                        (w, b, *out_channels)
                    }
                    ConvKind::Depthwise => {
                        let w = params.add(
                            format!("{}.weight", prefix),
                            uniform_init(&[c, 1, 3, 3], 9, &mut rng),
                        );
                        let b = params.add(format!("{}.bias", prefix), Tensor::zeros(&[c]));
                        (w, b, c)
                    }
                    ConvKind::Pointwise { out_channels } => {
                        let w = params.add(
                            format!("{}.weight", prefix),
                            uniform_init(&[*out_channels, c, 1, 1], c, &mut rng),
                        );
                        let b = params.add(format!("{}.bias", prefix), Tensor::zeros(&[*out_channels]));
                        (w, b, *out_channels)
                    }
                };
                c = out_c;
                layers.push(LayerPlan {
                    kind: kind.clone(),
                    weight,
                    bias,
                });
            }
            let bn_gamma = params.add(
                format!("extractor.stage{}.bn.gamma", si + 1),
                Tensor::full(&[c], T::one()),
            );
            let bn_beta = params.add(
                format!("extractor.stage{}.bn.beta", si + 1),
                Tensor::zeros(&[c]),
            );
            bn_states.push(BatchNormState::new(
                c,
                config.batch_norm_eps,
                config.batch_norm_momentum,
            ));
            stages.push(StagePlan {
                layers,
                bn_gamma,
                bn_beta,
                channels: c,
            });
        }

        let tokens = config.token_count();
        let cls_token = params.add("cls_token", normal_init(&[1, 1, config.embed_dim], 0.02, &mut rng));
        let pos_embedding = params.add(
            "pos_embedding",
            normal_init(&[1, tokens, config.embed_dim], 0.02, &mut rng),
        );

        let d = config.embed_dim;
        let mut blocks = Vec::new();
        for bi in 0..config.num_encoder_blocks {
            let prefix = format!("encoder.{}", bi);
            let attn_norm_gamma =
                params.add(format!("{}.attn.norm.gamma", prefix), Tensor::full(&[d], T::one()));
            let attn_norm_beta = params.add(format!("{}.attn.norm.beta", prefix), Tensor::zeros(&[d]));
            let proj = |params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str| {
                let w = params.add(
                    format!("{}.attn.{}.weight", prefix, name),
                    uniform_init(&[d, d], d, rng),
                );
                let b = params.add(format!("{}.attn.{}.bias", prefix, name), Tensor::zeros(&[d]));
                (w, b)
            };
            let (q_weight, q_bias) = proj(&mut params, &mut rng, "q");
            let (k_weight, k_bias) = proj(&mut params, &mut rng, "k");
            let (v_weight, v_bias) = proj(&mut params, &mut rng, "v");
            let (out_weight, out_bias) = proj(&mut params, &mut rng, "out");
            let mlp_norm_gamma =
                params.add(format!("{}.mlp.norm.gamma", prefix), Tensor::full(&[d], T::one()));
            let mlp_norm_beta = params.add(format!("{}.mlp.norm.beta", prefix), Tensor::zeros(&[d]));
            let fc1_weight = params.add(
                format!("{}.mlp.fc1.weight", prefix),
                uniform_init(&[config.mlp_dim, d], d, &mut rng),
            );
            let fc1_bias = params.add(format!("{}.mlp.fc1.bias", prefix), Tensor::zeros(&[config.mlp_dim]));
            let fc2_weight = params.add(
                format!("{}.mlp.fc2.weight", prefix),
                uniform_init(&[d, config.mlp_dim], config.mlp_dim, &mut rng),
            );
            let fc2_bias = params.add(format!("{}.mlp.fc2.bias", prefix), Tensor::zeros(&[d]));
            blocks.push(BlockPlan {
                attn_norm_gamma,
                attn_norm_beta,
                q_weight,
                q_bias,
                k_weight,
                k_bias,
                v_weight,
                v_bias,
                out_weight,
                out_bias,
                mlp_norm_gamma,
                mlp_norm_beta,
                fc1_weight,
                fc1_bias,
                fc2_weight,
                fc2_bias,
            });
        }

        let head = HeadPlan {
            norm_gamma: params.add("head.norm.gamma", Tensor::full(&[d], T::one())),
            norm_beta: params.add("head.norm.beta", Tensor::zeros(&[d])),
            fc_weight: params.add(
                "head.fc.weight",
                uniform_init(&[config.num_classes, d], d, &mut rng),
            ),
            fc_bias: params.add("head.fc.bias", Tensor::zeros(&[config.num_classes])),
        };

        Ok(DiRecNetV2 {
            config,
            params,
            bn_states,
            mode: Mode::Train,
            stages,
            cls_token,
            pos_embedding,
            blocks,
            head,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn_states
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Total trainable element count.
    pub fn total_params(&self) -> usize {
        self.params.total_count()
    }

    /// Insert every parameter as a tape leaf.
    pub fn bind_params(&self, tape: &mut Tape<T>, requires_grad: bool) -> TapeBindings {
        let entries = (0..self.params.len())
            .map(|i| {
                let id = ParamId(i);
                let leaf = tape.leaf(self.params.get(id).value.clone(), requires_grad);
                (id, leaf)
            })
            .collect();
        TapeBindings { entries }
    }

    /// Accumulate the tape gradients of every bound parameter into the
    /// parameter store.
    pub fn accumulate_grads(
        &mut self,
        grads: &mut crate::tape::Gradients<T>,
        bindings: &TapeBindings,
    ) -> Result<(), TensorError> {
        for (pid, vid) in &bindings.entries {
            match grads.take(*vid) {
                Some(g) => self.params.accumulate_grad(*pid, &g),
                None => {
                    return Err(TensorError::MissingGradient(
                        self.params.get(*pid).name.clone(),
                    ))
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<(), TensorError> {
        let d = images.dims();
        let expect = [
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ];
        if d.len() != 4 || d[1] != expect[0] || d[2] != expect[1] || d[3] != expect[2] {
            return Err(TensorError::ShapeMismatch {
                context: "model input (no implicit resize)".into(),
                expected: format!("[N, {}, {}, {}]", expect[0], expect[1], expect[2]),
                got: format!("{:?}", d),
            });
        }
        Ok(())
    }

    /// Full forward pass on an existing tape; returns the probability output.
    /// Dropout draws come from `rng`; batch-norm behavior follows the model
    /// mode. When `trace` is given, every layout-table leaf row is recorded.
    pub fn forward_on_tape<R: Rng>(
        &mut self,
        tape: &mut Tape<T>,
        bindings: &TapeBindings,
        images: ValueId,
        rng: &mut R,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<ValueId, TensorError> {
        self.check_input(tape.value(images))?;
        let train = self.mode == Mode::Train;

        fn record<T: Scalar>(
            tape: &Tape<T>,
            trace: &mut Option<&mut Vec<TraceRow>>,
            depth: usize,
            name: &str,
            input: ValueId,
            output: ValueId,
            count: Option<usize>,
        ) {
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(TraceRow {
                    depth,
                    name: name.to_string(),
                    input_shape: tape.value(input).dims().to_vec(),
                    output_shape: tape.value(output).dims().to_vec(),
                    param_count: count,
                });
            }
        }

        // Feature extractor stages: convs with ReLU after each, then BN, pool.
        let mut x = images;
        for (si, stage) in self.stages.iter().enumerate() {
            for (li, layer) in stage.layers.iter().enumerate() {
                let w = bindings.value_of(layer.weight);
                let b = bindings.value_of(layer.bias);
                let before = x;
                let (name, y) = match &layer.kind {
                    ConvKind::Standard { kernel, .. } => {
                        ("Conv2d", tape.conv2d(x, w, b, 1, (kernel - 1) / 2)?)
                    }
                    ConvKind::Depthwise => ("DepthwiseConv2d", tape.depthwise_conv2d(x, w, b)?),
                    ConvKind::Pointwise { .. } => {
                        ("PointwiseConv2d", tape.pointwise_conv2d(x, w, b)?)
                    }
                };
                record(
                    tape,
                    &mut trace,
                    2,
                    name,
                    before,
                    y,
                    Some(self.params.count_prefix(&self.layer_param_prefix(si, li))),
                );
                x = tape.relu(y)?;
            }
            let before = x;
            let bn = tape.batch_norm2d(
                x,
                bindings.value_of(stage.bn_gamma),
                bindings.value_of(stage.bn_beta),
                &mut self.bn_states[si],
                train,
            )?;
            record(
                tape,
                &mut trace,
                2,
                "BatchNorm2d",
                before,
                bn,
                Some(self.params.count_prefix(&format!("extractor.stage{}.bn.", si + 1))),
            );
            let pooled = tape.max_pool2d(bn)?;
            record(tape, &mut trace, 2, "MaxPool2d", bn, pooled, None);
            x = pooled;
        }
        let features = x;

        // Tokenize: row-major flatten of the grid, CLS prepend, positional add.
        let tokens = tokenize(
            tape,
            features,
            bindings.value_of(self.cls_token),
            bindings.value_of(self.pos_embedding),
        )?;
        record(tape, &mut trace, 2, "Flatten", features, tokens, None);

        let dropped = tape.dropout(tokens, self.config.dropout_embed, train, rng)?;
        record(tape, &mut trace, 1, "Dropout", tokens, dropped, None);
        let mut x = dropped;

        for (bi, block) in self.blocks.iter().enumerate() {
            let block_input = x;
            let norm1 = tape.layer_norm(
                x,
                bindings.value_of(block.attn_norm_gamma),
                bindings.value_of(block.attn_norm_beta),
                self.config.layer_norm_eps,
            )?;
            let attn = multi_head_self_attention(
                tape,
                norm1,
                &AttentionParamIds {
                    q_weight: bindings.value_of(block.q_weight),
                    q_bias: bindings.value_of(block.q_bias),
                    k_weight: bindings.value_of(block.k_weight),
                    k_bias: bindings.value_of(block.k_bias),
                    v_weight: bindings.value_of(block.v_weight),
                    v_bias: bindings.value_of(block.v_bias),
                    out_weight: bindings.value_of(block.out_weight),
                    out_bias: bindings.value_of(block.out_bias),
                },
                self.config.num_heads,
            )?;
            let attn = tape.dropout(attn, self.config.dropout_block, train, rng)?;
            let after_attn = tape.add(block_input, attn)?;
            record(
                tape,
                &mut trace,
                3,
                "MultiheadSelfAttentionBlock",
                block_input,
                after_attn,
                Some(self.params.count_prefix(&format!("encoder.{}.attn.", bi))),
            );

            let norm2 = tape.layer_norm(
                after_attn,
                bindings.value_of(block.mlp_norm_gamma),
                bindings.value_of(block.mlp_norm_beta),
                self.config.layer_norm_eps,
            )?;
            let h = tape.linear(
                norm2,
                bindings.value_of(block.fc1_weight),
                bindings.value_of(block.fc1_bias),
            )?;
            let h = tape.gelu(h)?;
            let h = tape.linear(
                h,
                bindings.value_of(block.fc2_weight),
                bindings.value_of(block.fc2_bias),
            )?;
            let h = tape.dropout(h, self.config.dropout_block, train, rng)?;
            let after_mlp = tape.add(after_attn, h)?;
            record(
                tape,
                &mut trace,
                3,
                "MLPBlock",
                after_attn,
                after_mlp,
                Some(self.params.count_prefix(&format!("encoder.{}.mlp.", bi))),
            );
            x = after_mlp;
        }

        // Classifier head over the CLS token.
        let cls = tape.slice_token0(x)?;
        let normed = tape.layer_norm(
            cls,
            bindings.value_of(self.head.norm_gamma),
            bindings.value_of(self.head.norm_beta),
            self.config.layer_norm_eps,
        )?;
        record(
            tape,
            &mut trace,
            2,
            "LayerNorm",
            cls,
            normed,
            Some(self.params.count_prefix("head.norm.")),
        );
        let dropped = tape.dropout(normed, self.config.dropout_head, train, rng)?;
        record(tape, &mut trace, 2, "Dropout", normed, dropped, None);
        let logits = tape.linear(
            dropped,
            bindings.value_of(self.head.fc_weight),
            bindings.value_of(self.head.fc_bias),
        )?;
        record(
            tape,
            &mut trace,
            2,
            "Linear",
            dropped,
            logits,
            Some(self.params.count_prefix("head.fc.")),
        );
        let probs = match self.config.head_mode {
            HeadMode::Single => tape.softmax(logits)?,
            HeadMode::Multi => tape.sigmoid(logits)?,
        };
        record(
            tape,
            &mut trace,
            2,
            match self.config.head_mode {
                HeadMode::Single => "Softmax",
                HeadMode::Multi => "Sigmoid",
            },
            logits,
            probs,
            None,
        );
        Ok(probs)
    }

    /// Probability output `[N, num_classes]` for a batch under the current
    /// mode, without gradient bookkeeping.
    pub fn classify(&mut self, images: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let bindings = self.bind_params(&mut tape, false);
        let images_id = tape.leaf(images.clone(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let probs = self.forward_on_tape(&mut tape, &bindings, images_id, &mut rng, None)?;
        Ok(tape.value(probs).clone())
    }

    /// Extractor output `[N, embed_dim, grid_h, grid_w]` under the current mode.
    pub fn forward_features(&mut self, images: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_input(images)?;
        let train = self.mode == Mode::Train;
        let mut tape = Tape::new();
        let bindings = self.bind_params(&mut tape, false);
        let mut x = tape.leaf(images.clone(), false);
        for (si, stage) in self.stages.iter().enumerate() {
            for layer in &stage.layers {
                let w = bindings.value_of(layer.weight);
                let b = bindings.value_of(layer.bias);
                let y = match &layer.kind {
                    ConvKind::Standard { kernel, .. } => tape.conv2d(x, w, b, 1, (kernel - 1) / 2)?,
                    ConvKind::Depthwise => tape.depthwise_conv2d(x, w, b)?,
                    ConvKind::Pointwise { .. } => tape.pointwise_conv2d(x, w, b)?,
                };
                x = tape.relu(y)?;
            }
            let bn = tape.batch_norm2d(
                x,
                bindings.value_of(stage.bn_gamma),
                bindings.value_of(stage.bn_beta),
                &mut self.bn_states[si],
                train,
            )?;
            x = tape.max_pool2d(bn)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Per-stage output channel counts.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    fn layer_param_prefix(&self, stage: usize, layer: usize) -> String {
        format!("extractor.stage{}.layer{}.", stage + 1, layer + 1)
    }
}

/// Flatten a feature map `[N, D, gh, gw]` into row-major spatial tokens,
/// prepend the CLS token, and add the positional embedding.
pub fn tokenize<T: Scalar>(
    tape: &mut Tape<T>,
    features: ValueId,
    cls_token: ValueId,
    pos_embedding: ValueId,
) -> Result<ValueId, TensorError> {
    let dims = tape.value(features).dims().to_vec();
    if dims.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "tokenize".into(),
            expected: "[N, D, gh, gw]".into(),
            got: format!("{:?}", dims),
        });
    }
    let (n, d, gh, gw) = (dims[0], dims[1], dims[2], dims[3]);
    let flat = tape.reshape(features, &[n, d, gh * gw])?;
    let tokens = tape.permute(flat, &[0, 2, 1])?; // [N, gh*gw, D]
    let with_cls = tape.concat_token(cls_token, tokens)?;
    tape.add_broadcast(with_cls, pos_embedding)
}

/// Scaled dot-product attention over `heads` splits of the embedding, with
/// biased Q/K/V/output projections. Per-row attention weights sum to 1.
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    p: &AttentionParamIds,
    heads: usize,
) -> Result<ValueId, TensorError> {
    let dims = tape.value(x).dims().to_vec();
    if dims.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            context: "multi_head_self_attention".into(),
            expected: "[N, T, D]".into(),
            got: format!("{:?}", dims),
        });
    }
    let (n, t, d) = (dims[0], dims[1], dims[2]);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Config(format!(
            "embedding dim {} not divisible into {} heads",
            d, heads
        )));
    }
    let head_dim = d / heads;

    let split = |tape: &mut Tape<T>, v: ValueId| -> Result<ValueId, TensorError> {
        let r = tape.reshape(v, &[n, t, heads, head_dim])?;
        tape.permute(r, &[0, 2, 1, 3]) // [N, H, T, head_dim]
    };

    let q = tape.linear(x, p.q_weight, p.q_bias)?;
    let k = tape.linear(x, p.k_weight, p.k_bias)?;
    let v = tape.linear(x, p.v_weight, p.v_bias)?;
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    let scores = tape.batched_matmul(qh, kh, true)?; // [N, H, T, T]
    let scaled = tape.mul_scalar(scores, 1.0 / (head_dim as f64).sqrt())?;
    let weights = tape.softmax(scaled)?;
    let ctx = tape.batched_matmul(weights, vh, false)?; // [N, H, T, head_dim]
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, &[n, t, d])?;
    tape.linear(flat, p.out_weight, p.out_bias)
}

/// Parameter values for one standalone encoder block.
#[derive(Debug)]
pub struct EncoderBlockParamIds {
    pub attn_norm_gamma: ValueId,
    pub attn_norm_beta: ValueId,
    pub attn: AttentionParamIds,
    pub mlp_norm_gamma: ValueId,
    pub mlp_norm_beta: ValueId,
    pub fc1_weight: ValueId,
    pub fc1_bias: ValueId,
    pub fc2_weight: ValueId,
    pub fc2_bias: ValueId,
}

/// Pre-norm transformer block: `x + MHSA(LN(x))` then `x + MLP(LN(x))`,
/// with a GELU between the two affine maps of the MLP.
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    p: &EncoderBlockParamIds,
    heads: usize,
    layer_norm_eps: f64,
) -> Result<ValueId, TensorError> {
    let norm1 = tape.layer_norm(x, p.attn_norm_gamma, p.attn_norm_beta, layer_norm_eps)?;
    let attn = multi_head_self_attention(tape, norm1, &p.attn, heads)?;
    let x = tape.add(x, attn)?;
    let norm2 = tape.layer_norm(x, p.mlp_norm_gamma, p.mlp_norm_beta, layer_norm_eps)?;
    let h = tape.linear(norm2, p.fc1_weight, p.fc1_bias)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, p.fc2_weight, p.fc2_bias)?;
    tape.add(x, h)
}
