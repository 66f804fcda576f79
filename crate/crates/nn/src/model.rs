//! The sequence classifier: a time-distributed separable-convolution
//! backbone shared across frames, a bidirectional LSTM over the per-frame
//! feature sequence, and a softmax head.
//!
//! The backbone is a MobileNet-v1-style stack: a strided 3x3 stem, then
//! depthwise 3x3 + pointwise 1x1 blocks with BN + ReLU after every
//! convolution, global average pool to a D-dimensional feature. The same
//! parameters apply to every frame; only the LSTM sees time.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, LstmWeights, NodeId};
use crate::init;
use crate::tensor::{ParamSet, Tensor};

/// Fraction of the previous running statistic kept per BN update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("input shape {got:?} does not match config (frames {frames}, {size}x{size}x3)")]
    InputShape {
        got: Vec<usize>,
        frames: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SepBlock {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<SepBlock>,
    pub width_multiplier: f64,
    /// Must equal the (scaled) channel count of the last block.
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            input_size: 56,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![
                SepBlock { channels: 16, stride: 1 },
                SepBlock { channels: 32, stride: 2 },
                SepBlock { channels: 64, stride: 2 },
                SepBlock { channels: 64, stride: 1 },
            ],
            width_multiplier: 1.0,
            feature_dim: 64,
        }
    }

    pub fn paper() -> Self {
        let mut blocks = vec![
            SepBlock { channels: 64, stride: 1 },
            SepBlock { channels: 128, stride: 2 },
            SepBlock { channels: 128, stride: 1 },
            SepBlock { channels: 256, stride: 2 },
            SepBlock { channels: 256, stride: 1 },
            SepBlock { channels: 512, stride: 2 },
        ];
        blocks.extend(std::iter::repeat_n(SepBlock { channels: 512, stride: 1 }, 5));
        blocks.push(SepBlock { channels: 1024, stride: 2 });
        blocks.push(SepBlock { channels: 1024, stride: 1 });
        Self {
            input_size: 224,
            stem_channels: 32,
            stem_stride: 2,
            blocks,
            width_multiplier: 1.0,
            feature_dim: 1024,
        }
    }

    fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.blocks.is_empty() {
            return Err(ModelError::BadConfig("backbone needs blocks".into()));
        }
        if self.input_size == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return Err(ModelError::BadConfig("zero backbone dimension".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(ModelError::BadConfig("zero block dimension".into()));
        }
        let last = self.scaled(self.blocks.last().unwrap().channels);
        if last != self.feature_dim {
            return Err(ModelError::BadConfig(format!(
                "feature_dim {} but last block has {} channels",
                self.feature_dim, last
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub lstm_units: usize,
    pub lstm_dropout: f64,
    pub classes: usize,
    pub frames: usize,
    pub bidirectional: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            lstm_units: 32,
            lstm_dropout: 0.25,
            classes: 2,
            frames: 10,
            bidirectional: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            lstm_units: 256,
            lstm_dropout: 0.25,
            classes: 2,
            frames: 10,
            bidirectional: true,
        }
    }

    /// Smallest config that still exercises every layer type; used by
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                input_size: 8,
                stem_channels: 4,
                stem_stride: 2,
                blocks: vec![SepBlock { channels: 8, stride: 2 }],
                width_multiplier: 1.0,
                feature_dim: 8,
            },
            lstm_units: 4,
            lstm_dropout: 0.25,
            classes: 2,
            frames: 3,
            bidirectional: true,
        }
    }

    /// Output width of the sequence summary fed to the head.
    pub fn summary_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.lstm_units
        } else {
            self.lstm_units
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(ModelError::BadConfig("need at least 2 classes".into()));
        }
        if self.frames < 2 {
            return Err(ModelError::BadConfig("need at least 2 frames".into()));
        }
        if self.lstm_units == 0 {
            return Err(ModelError::BadConfig("zero LSTM units".into()));
        }
        if !(0.0..1.0).contains(&self.lstm_dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.lstm_dropout
            )));
        }
        Ok(())
    }
}

/// Handles to the interesting nodes of one forward pass.
pub struct ForwardNodes {
    /// (B*T, D) per-frame features.
    pub features: NodeId,
    /// (B, 2U) bidirectional summary (or (B, U) unidirectional).
    pub summary: NodeId,
    /// (B, classes) logits.
    pub logits: NodeId,
    /// (B, classes) softmax probabilities.
    pub probs: NodeId,
}

/// Batch statistics captured by one train-mode forward, keyed by BN prefix.
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Parameter nodes bound into one graph.
pub struct BoundModel {
    pub nodes: BTreeMap<String, NodeId>,
}

impl BoundModel {
    fn id(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    fn lstm(&self, prefix: &str) -> LstmWeights {
        LstmWeights {
            w: self.id(&format!("{prefix}.w")),
            r: self.id(&format!("{prefix}.r")),
            b: self.id(&format!("{prefix}.b")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// BN running statistics ("<prefix>.mean" / "<prefix>.var").
    pub buffers: ParamSet,
}

impl Model {
    /// Initialize parameters: He-normal convolutions, fan-in uniform LSTM
    /// kernels with forget bias 1, zero head (a fresh model predicts 0.5).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let bb = &config.backbone;

        let add_bn = |params: &mut ParamSet, buffers: &mut ParamSet, prefix: &str, c: usize| {
            params.insert(&format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0));
            params.insert(&format!("{prefix}.beta"), Tensor::zeros(&[c]));
            buffers.insert(&format!("{prefix}.mean"), Tensor::zeros(&[c]));
            buffers.insert(&format!("{prefix}.var"), Tensor::filled(&[c], 1.0));
        };

        let stem_out = bb.scaled(bb.stem_channels);
        params.insert(
            "stem.conv.w",
            init::he_normal(&[stem_out, 3, 3, 3], 3 * 9, &mut rng),
        );
        add_bn(&mut params, &mut buffers, "stem.bn", stem_out);

        let mut channels = stem_out;
        for (i, block) in bb.blocks.iter().enumerate() {
            let out = bb.scaled(block.channels);
            params.insert(
                &format!("block{i}.dw.w"),
                init::he_normal(&[channels, 3, 3], 9, &mut rng),
            );
            add_bn(&mut params, &mut buffers, &format!("block{i}.dw_bn"), channels);
            params.insert(
                &format!("block{i}.pw.w"),
                init::he_normal(&[out, channels], channels, &mut rng),
            );
            add_bn(&mut params, &mut buffers, &format!("block{i}.pw_bn"), out);
            channels = out;
        }

        let feature_dim = bb.feature_dim;
        let units = config.lstm_units;
        let directions: &[&str] = if config.bidirectional {
            &["lstm.fwd", "lstm.bwd"]
        } else {
            &["lstm.fwd"]
        };
        for dir in directions {
            params.insert(
                &format!("{dir}.w"),
                init::uniform_fan_in(&[feature_dim, 4 * units], feature_dim, &mut rng),
            );
            params.insert(
                &format!("{dir}.r"),
                init::uniform_fan_in(&[units, 4 * units], units, &mut rng),
            );
            let mut bias = Tensor::zeros(&[4 * units]);
            for i in units..2 * units {
                bias.data_mut()[i] = 1.0; // forget gate opens at init
            }
            params.insert(&format!("{dir}.b"), bias);
        }

        params.insert("head.w", Tensor::zeros(&[config.summary_dim(), config.classes]));
        params.insert("head.b", Tensor::zeros(&[config.classes]));

        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Insert every parameter into the graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundModel {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            nodes.insert(name.clone(), graph.param(tensor.clone()));
        }
        BoundModel { nodes }
    }

    /// Shape check for a stacked input (B*T, 3, S, S).
    pub fn check_input(&self, input: &Tensor, batch: usize) -> Result<(), ModelError> {
        let s = self.config.backbone.input_size;
        let t = self.config.frames;
        let want = [batch * t, 3, s, s];
        if input.shape() != want {
            return Err(ModelError::InputShape {
                got: input.shape().to_vec(),
                frames: t,
                size: s,
            });
        }
        Ok(())
    }

    /// Run the full network on a stacked batch (B*T, 3, S, S) where sample
    /// b's frame t sits at row b*T + t. Train mode applies batch-stat BN
    /// and dropout (the rng is required then) and returns the BN batch
    /// statistics for running-average updates.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundModel,
        input: Tensor,
        batch: usize,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardNodes, Vec<BnUpdate>), ModelError> {
        self.check_input(&input, batch)?;
        let t_steps = self.config.frames;
        let mut bn_updates = Vec::new();
        let mut x = graph.input(input);

        let bn = |graph: &mut Graph,
                      x: NodeId,
                      prefix: &str,
                      updates: &mut Vec<BnUpdate>|
         -> Result<NodeId, ModelError> {
            let gamma = bound.id(&format!("{prefix}.gamma"));
            let beta = bound.id(&format!("{prefix}.beta"));
            if train {
                let (y, mean, var) = graph.batch_norm_train(x, gamma, beta)?;
                updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            } else {
                let mean = self.buffers.get(&format!("{prefix}.mean"));
                let var = self.buffers.get(&format!("{prefix}.var"));
                Ok(graph.batch_norm_eval(x, gamma, beta, mean, var)?)
            }
        };

        // stem
        x = graph.conv2d(x, bound.id("stem.conv.w"), self.config.backbone.stem_stride)?;
        x = bn(graph, x, "stem.bn", &mut bn_updates)?;
        x = graph.relu(x);

        // depthwise-separable blocks
        for (i, block) in self.config.backbone.blocks.iter().enumerate() {
            x = graph.depthwise_conv2d(x, bound.id(&format!("block{i}.dw.w")), block.stride)?;
            x = bn(graph, x, &format!("block{i}.dw_bn"), &mut bn_updates)?;
            x = graph.relu(x);
            x = graph.pointwise_conv2d(x, bound.id(&format!("block{i}.pw.w")))?;
            x = bn(graph, x, &format!("block{i}.pw_bn"), &mut bn_updates)?;
            x = graph.relu(x);
        }

        let features = graph.global_avg_pool(x)?;

        // (B*T, D) -> T nodes of (B, D)
        let mut steps = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_steps + t).collect();
            steps.push(graph.gather_rows(features, &rows)?);
        }

        let units = self.config.lstm_units;
        let mut summary = if self.config.bidirectional {
            let fwd = bound.lstm("lstm.fwd");
            let bwd = bound.lstm("lstm.bwd");
            graph.bidirectional_lstm(&steps, &fwd, &bwd, units)?
        } else {
            let fwd = bound.lstm("lstm.fwd");
            graph.lstm_last_hidden(&steps, &fwd, units, false)?
        };

        if train && self.config.lstm_dropout > 0.0 {
            let rng = rng
                .as_deref_mut()
                .expect("train-mode forward needs an rng for dropout");
            summary = graph.dropout(summary, self.config.lstm_dropout, rng)?;
        }

        let logits = graph.dense(summary, bound.id("head.w"), bound.id("head.b"))?;
        let probs = graph.softmax(logits)?;
        Ok((
            ForwardNodes {
                features,
                summary,
                logits,
                probs,
            },
            bn_updates,
        ))
    }

    /// Fold one forward's batch statistics into the running BN buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (suffix, fresh) in [("mean", &u.mean), ("var", &u.var)] {
                let buf = self.buffers.get_mut(&format!("{}.{suffix}", u.prefix));
                for (old, new) in buf.data_mut().iter_mut().zip(fresh.data()) {
                    *old = BN_MOMENTUM * *old + (1.0 - BN_MOMENTUM) * new;
                }
            }
        }
    }

    /// Spoofness of a single sequence (T, 3, S, S): the softmax probability
    /// of the spoof class, eval mode.
    pub fn predict(&self, sequence: &Tensor) -> Result<f64, ModelError> {
        let s = self.config.backbone.input_size;
        let t = self.config.frames;
        if sequence.shape() != [t, 3, s, s] {
            return Err(ModelError::InputShape {
                got: sequence.shape().to_vec(),
                frames: t,
                size: s,
            });
        }
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let (nodes, _) = self.forward(&mut graph, &bound, sequence.clone(), 1, false, None)?;
        Ok(graph.value(nodes.probs).data()[1])
    }
}

/// Reorder one sequence from (T, H, W, 3) to the backbone's (T, 3, H, W).
pub fn nchw_from_thwc(frames: usize, height: usize, width: usize, data: &[f64]) -> Tensor {
    assert_eq!(data.len(), frames * height * width * 3);
    let mut out = vec![0.0; data.len()];
    let plane = height * width;
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    out[((t * 3 + c) * plane) + y * width + x] =
                        data[((t * height + y) * width + x) * 3 + c];
                }
            }
        }
    }
    Tensor::from_vec(&[frames, 3, height, width], out)
}
