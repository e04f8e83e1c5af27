use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{BatchStats, BnMode, Conv1dSpec, Graph, LayerParams, Tensor, Var};
use crate::sampling::SampledVector;
use crate::scalar::Scalar;

use super::{ArchConfig, EmbeddingVector, ModelError};

/// Bookkeeping carried with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epochs_seen: usize,
    pub best_mrr: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

/// 1-D ResNet embedder: parameters in build order plus the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub layers: Vec<LayerParams<T>>,
    pub meta: TrainingMeta,
}

/// One residual basic block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub stage: usize,
    pub index: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub projection: bool,
}

pub(crate) fn block_specs(arch: &ArchConfig) -> Result<Vec<BlockSpec>, ModelError> {
    let channels = arch.stage_channels()?;
    let mut in_ch = arch.stem_width()?;
    let mut out = Vec::new();
    for (s, (&ch, &count)) in channels.iter().zip(&arch.block_counts).enumerate() {
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            out.push(BlockSpec {
                stage: s + 1,
                index: b,
                in_ch,
                out_ch: ch,
                stride,
                projection: stride != 1 || in_ch != ch,
            });
            in_ch = ch;
        }
    }
    Ok(out)
}

const STEM: Conv1dSpec = Conv1dSpec {
    stride: 2,
    padding: 3,
};

fn conv_layer<T: Scalar>(name: String, out_ch: usize, in_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> LayerParams<T> {
    let fan_in = (in_ch * kernel) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..out_ch * in_ch * kernel)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    LayerParams::new(name).with(
        "weight",
        Tensor::new(vec![out_ch, in_ch, kernel], data).expect("shape"),
    )
}

fn bn_layer<T: Scalar>(name: String, ch: usize) -> LayerParams<T> {
    LayerParams::new(name)
        .with("gamma", Tensor::full(&[ch], T::one()))
        .with("beta", Tensor::zeros(&[ch]))
        .with("running_mean", Tensor::zeros(&[ch]))
        .with("running_var", Tensor::full(&[ch], T::one()))
}

/// Builds a freshly initialized model. Conv weights are drawn from
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, the fully connected layer from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_model<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<Model<T>, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = arch.stem_width()?;
    let mut layers = vec![
        conv_layer("stem.conv".into(), stem, 1, 7, &mut rng),
        bn_layer("stem.bn".into(), stem),
    ];
    let blocks = block_specs(arch)?;
    for b in &blocks {
        let p = format!("layer{}.{}", b.stage, b.index);
        layers.push(conv_layer(format!("{p}.conv1"), b.out_ch, b.in_ch, 3, &mut rng));
        layers.push(bn_layer(format!("{p}.bn1"), b.out_ch));
        layers.push(conv_layer(format!("{p}.conv2"), b.out_ch, b.out_ch, 3, &mut rng));
        layers.push(bn_layer(format!("{p}.bn2"), b.out_ch));
        if b.projection {
            layers.push(conv_layer(format!("{p}.downsample.conv"), b.out_ch, b.in_ch, 1, &mut rng));
            layers.push(bn_layer(format!("{p}.downsample.bn"), b.out_ch));
        }
    }
    let feat = blocks.last().map(|b| b.out_ch).unwrap_or(stem);
    let bound = 1.0 / (feat as f64).sqrt();
    let w = (0..arch.k * feat)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    let bias = (0..arch.k)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    layers.push(
        LayerParams::new("fc")
            .with("weight", Tensor::new(vec![arch.k, feat], w).expect("shape"))
            .with("bias", Tensor::new(vec![arch.k], bias).expect("shape")),
    );
    Ok(Model {
        arch: arch.clone(),
        layers,
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

/// Leaf handles of the trainable arrays created by one forward pass, in a
/// stable order: `(layer index, array key, var)`.
pub struct ForwardPass<T> {
    pub output: Var,
    pub params: Vec<(usize, String, Var)>,
    /// Batch statistics per batch-norm layer index (train mode only).
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

const TRAINABLE: [&str; 4] = ["weight", "bias", "gamma", "beta"];

struct Cursor<'a, T> {
    model: &'a Model<T>,
    graph: &'a mut Graph<T>,
    mode: BnMode,
    next: usize,
    params: Vec<(usize, String, Var)>,
    bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Cursor<'_, T> {
    fn take(&mut self, suffix: &str) -> Result<(usize, Vec<Var>), ModelError> {
        let idx = self.next;
        let layer = self
            .model
            .layers
            .get(idx)
            .filter(|l| l.name.rsplit('.').next().is_some_and(|last| last.starts_with(suffix)))
            .ok_or_else(|| ModelError::InvalidFormat(format!("expected a {suffix} layer at {idx}")))?;
        self.next += 1;
        let mut vars = Vec::new();
        for (key, t) in &layer.arrays {
            if TRAINABLE.contains(&key.as_str()) {
                let v = self.graph.leaf(t.clone());
                self.params.push((idx, key.clone(), v));
                vars.push(v);
            }
        }
        Ok((idx, vars))
    }

    fn conv(&mut self, x: Var, spec: Conv1dSpec) -> Result<Var, ModelError> {
        let (_, vars) = self.take("conv")?;
        Ok(self.graph.conv1d(x, vars[0], None, spec)?)
    }

    fn bn(&mut self, x: Var) -> Result<Var, ModelError> {
        let (idx, vars) = self.take("bn")?;
        let eps = T::of(self.model.arch.bn_eps);
        match self.mode {
            BnMode::Train => {
                let (out, stats) = self.graph.batch_norm_train(x, vars[0], vars[1], eps)?;
                self.bn_stats.push((idx, stats));
                Ok(out)
            }
            BnMode::Eval => {
                let layer = &self.model.layers[idx];
                let rm = layer.get("running_mean").expect("bn layer");
                let rv = layer.get("running_var").expect("bn layer");
                Ok(self.graph.batch_norm_eval(x, vars[0], vars[1], rm, rv, eps)?)
            }
        }
    }

    fn block(&mut self, x: Var, b: &BlockSpec) -> Result<Var, ModelError> {
        let spec1 = Conv1dSpec {
            stride: b.stride,
            padding: 1,
        };
        let unit = Conv1dSpec {
            stride: 1,
            padding: 1,
        };
        let y = self.conv(x, spec1)?;
        let y = self.bn(y)?;
        let y = self.graph.relu(y);
        let y = self.conv(y, unit)?;
        let y = self.bn(y)?;
        let shortcut = if b.projection {
            let s = self.conv(
                x,
                Conv1dSpec {
                    stride: b.stride,
                    padding: 0,
                },
            )?;
            self.bn(s)?
        } else {
            x
        };
        let sum = self.graph.add(y, shortcut)?;
        Ok(self.graph.relu(sum))
    }
}

impl<T: Scalar> Model<T> {
    /// Records the forward pass of `input: [batch, 1, h]` on `graph`.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        input: Var,
        mode: BnMode,
    ) -> Result<ForwardPass<T>, ModelError> {
        let shape = graph.value(input).shape().to_vec();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.arch.h {
            return Err(ModelError::WidthMismatch {
                expected: self.arch.h,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let blocks = block_specs(&self.arch)?;
        let mut c = Cursor {
            model: self,
            graph,
            mode,
            next: 0,
            params: Vec::new(),
            bn_stats: Vec::new(),
        };
        let x = c.conv(input, STEM)?;
        let x = c.bn(x)?;
        let x = c.graph.relu(x);
        let mut x = c.graph.max_pool1d(x, 3, 2, 1)?;
        for b in &blocks {
            x = c.block(x, b)?;
        }
        let pooled = c.graph.global_avg_pool1d(x)?;
        let (_, fc) = c.take("fc")?;
        let output = c.graph.linear(pooled, fc[0], fc[1])?;
        Ok(ForwardPass {
            output,
            params: c.params,
            bn_stats: c.bn_stats,
        })
    }

    /// Runs only the blocks of `stage` (1-based) in eval mode on a
    /// `[batch, ch, length]` feature map.
    pub fn forward_stage(&self, stage: usize, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let blocks = block_specs(&self.arch)?;
        let mut graph = Graph::new();
        let mut x = graph.leaf(input.clone());
        let start = self
            .layers
            .iter()
            .position(|l| l.name.starts_with(&format!("layer{stage}.")))
            .ok_or_else(|| ModelError::InvalidArch(format!("no stage {stage}")))?;
        let mut c = Cursor {
            model: self,
            graph: &mut graph,
            mode: BnMode::Eval,
            next: start,
            params: Vec::new(),
            bn_stats: Vec::new(),
        };
        for b in blocks.iter().filter(|b| b.stage == stage) {
            x = c.block(x, b)?;
        }
        Ok(graph.value(x).clone())
    }

    /// Eval-mode forward of a batch of inputs.
    pub fn embed_batch(&self, inputs: &[SampledVector<T>]) -> Result<Vec<EmbeddingVector<T>>, ModelError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let h = self.arch.h;
        let mut data = Vec::with_capacity(inputs.len() * h);
        for x in inputs {
            if x.width() != h {
                return Err(ModelError::WidthMismatch {
                    expected: h,
                    got: x.width(),
                });
            }
            data.extend_from_slice(x.values());
        }
        let mut graph = Graph::new();
        let input = graph.leaf(Tensor::new(vec![inputs.len(), 1, h], data)?);
        let pass = self.forward(&mut graph, input, BnMode::Eval)?;
        Ok(graph
            .value(pass.output)
            .rows()
            .map(|r| EmbeddingVector::new(r.to_vec()))
            .collect())
    }

    pub fn embed(&self, input: &SampledVector<T>) -> Result<EmbeddingVector<T>, ModelError> {
        Ok(self
            .embed_batch(std::slice::from_ref(input))?
            .pop()
            .expect("one output"))
    }

    pub fn param_mut(&mut self, layer: usize, key: &str) -> &mut Tensor<T> {
        self.layers[layer].get_mut(key).expect("known parameter")
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.arrays)
            .filter(|(k, _)| TRAINABLE.contains(&k.as_str()))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::of(self.arch.bn_momentum);
        for (idx, s) in stats {
            crate::nn::update_running_stats(&mut self.layers[*idx], s, m);
        }
    }
}
