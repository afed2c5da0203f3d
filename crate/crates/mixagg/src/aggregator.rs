//! The feature-map aggregator: a cascade of residual row-mixing MLP blocks
//! over flattened feature maps, followed by depth-wise and row-wise
//! projections and L2 normalization.
//!
//! Two forward paths exist: plain value functions for inference and a graph
//! path for training. Both call the same kernels in the same order, so
//! their outputs are bit-identical. Average and generalized-mean pooling
//! are included as baselines, along with exact parameter accounting and a
//! graymap export of the first mixing layer's weights.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, NodeId, Scalar, Tensor};

/// Row-normalization epsilon used by every mixer block.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floor applied to activations before the generalized-mean exponent,
/// keeping the p-th root away from its singularity at zero.
pub const GEM_CLAMP_FLOOR: f64 = 1e-6;

// ── Configuration ───────────────────────────────────────────────────

/// Architecture hyperparameters. `num_blocks == 0` degrades the mixer
/// stack to the identity, leaving only the projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct MixVprConfig {
    /// Input channel count c.
    pub channels: usize,
    /// Spatial height h.
    pub height: usize,
    /// Spatial width w.
    pub width: usize,
    /// Mixer depth L.
    pub num_blocks: usize,
    /// Hidden width of each block's MLP as a fraction of n = h·w.
    pub mlp_ratio: f64,
    /// Depth projection size d (channels after the head).
    pub out_channels: usize,
    /// Row projection size r (spatial size after the head).
    pub out_rows: usize,
}

impl Default for MixVprConfig {
    fn default() -> Self {
        MixVprConfig {
            channels: 1024,
            height: 20,
            width: 20,
            num_blocks: 4,
            mlp_ratio: 1.0,
            out_channels: 1024,
            out_rows: 4,
        }
    }
}

impl MixVprConfig {
    /// Flattened spatial size n = h·w.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// MLP hidden width, `round(mlp_ratio · n)`.
    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.spatial() as f64).round() as usize
    }

    /// Final descriptor length d·r.
    pub fn descriptor_dim(&self) -> usize {
        self.out_channels * self.out_rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Param(format!(
                "channels/height/width must be >= 1, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if self.out_channels == 0 || self.out_rows == 0 {
            return Err(Error::Param(format!(
                "projection sizes must be >= 1, got d={} r={}",
                self.out_channels, self.out_rows
            )));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::Param(format!(
                "mlp_ratio must be positive and finite, got {}",
                self.mlp_ratio
            )));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::Param(format!(
                "mlp_ratio {} with n={} gives an empty hidden layer",
                self.mlp_ratio,
                self.spatial()
            )));
        }
        Ok(())
    }

    /// Serializes as flat `key=value` lines (keys `c,h,w,L,mlp_ratio,d,r`),
    /// the config record stored inside checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "c={}\nh={}\nw={}\nL={}\nmlp_ratio={}\nd={}\nr={}\n",
            self.channels,
            self.height,
            self.width,
            self.num_blocks,
            self.mlp_ratio,
            self.out_channels,
            self.out_rows
        )
    }

    /// Parses the [`MixVprConfig::to_text`] format. Absent keys keep their
    /// defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = MixVprConfig::default();
        for (lineno, key, value) in parse_flat_kv(text)? {
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("expected a non-negative integer for {key}, got {v:?}"),
                })
            };
            match key.as_str() {
                "c" => cfg.channels = parse_usize(&value)?,
                "h" => cfg.height = parse_usize(&value)?,
                "w" => cfg.width = parse_usize(&value)?,
                "L" => cfg.num_blocks = parse_usize(&value)?,
                "d" => cfg.out_channels = parse_usize(&value)?,
                "r" => cfg.out_rows = parse_usize(&value)?,
                "mlp_ratio" => {
                    cfg.mlp_ratio = value.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("expected a real for mlp_ratio, got {value:?}"),
                    })?
                }
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown model config key {other:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits flat `key=value` text into (line number, key, value) triples.
/// Blank lines and `#` comments are skipped; anything else without `=` is
/// a parse error.
pub(crate) fn parse_flat_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((idx + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

// ── Parameters ──────────────────────────────────────────────────────

/// One mixer block: row-normalization affine plus the two MLP layers.
/// `w1` is `[hidden × n]`, `w2` is `[n × hidden]`; both applied as
/// `x · Wᵀ` on rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerBlockParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// The projection head: depth-wise `w_d: [d × c]` and row-wise
/// `w_r: [r × n]` affine maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T: Scalar = f32> {
    pub w_d: Tensor<T>,
    pub b_d: Tensor<T>,
    pub w_r: Tensor<T>,
    pub b_r: Tensor<T>,
}

/// Full parameter set plus the config that shaped it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixVprParams<T: Scalar = f32> {
    pub config: MixVprConfig,
    pub blocks: Vec<MixerBlockParams<T>>,
    pub head: ProjectionParams<T>,
}

impl MixVprParams<f32> {
    /// Fresh parameters: weights and biases uniform in ±√(1/fan_in), drawn
    /// from a seeded generator in a fixed order (per block: w1, b1, w2, b2;
    /// then head w_d, b_d, w_r, b_r); gamma = 1, beta = 0.
    pub fn init(config: &MixVprConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.spatial();
        let hidden = config.hidden_dim();
        let (c, d, r) = (config.channels, config.out_channels, config.out_rows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |dims: Vec<usize>, fan_in: usize| -> Tensor<f32> {
            let bound = (1.0 / fan_in as f64).sqrt();
            let numel = dims.iter().product();
            let data = (0..numel)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            Tensor::new(dims, data).expect("dims match generated data")
        };
        let blocks = (0..config.num_blocks)
            .map(|_| MixerBlockParams {
                gamma: Tensor::filled(vec![n], 1.0),
                beta: Tensor::zeros(vec![n]),
                w1: draw(vec![hidden, n], n),
                b1: draw(vec![hidden], n),
                w2: draw(vec![n, hidden], hidden),
                b2: draw(vec![n], hidden),
            })
            .collect();
        let head = ProjectionParams {
            w_d: draw(vec![d, c], c),
            b_d: draw(vec![d], c),
            w_r: draw(vec![r, n], n),
            b_r: draw(vec![r], n),
        };
        Ok(MixVprParams {
            config: config.clone(),
            blocks,
            head,
        })
    }

    /// Rebuilds params from named tensors (checkpoint loading). Every
    /// expected name must be present with exactly the right dims; extras
    /// and absences are errors naming the tensor.
    pub fn assemble(config: MixVprConfig, entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::BTreeMap<String, Tensor<f32>> = entries.into_iter().collect();
        let mut take = |name: String, dims: &[usize]| -> Result<Tensor<f32>> {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
            if t.dims() != dims {
                return Err(Error::shape(
                    "checkpoint load",
                    format!("tensor {name:?} has dims {:?}, config implies {:?}", t.dims(), dims),
                ));
            }
            Ok(t)
        };
        let n = config.spatial();
        let hidden = config.hidden_dim();
        let (c, d, r) = (config.channels, config.out_channels, config.out_rows);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            blocks.push(MixerBlockParams {
                gamma: take(format!("block{i}.gamma"), &[n])?,
                beta: take(format!("block{i}.beta"), &[n])?,
                w1: take(format!("block{i}.w1"), &[hidden, n])?,
                b1: take(format!("block{i}.b1"), &[hidden])?,
                w2: take(format!("block{i}.w2"), &[n, hidden])?,
                b2: take(format!("block{i}.b2"), &[n])?,
            });
        }
        let head = ProjectionParams {
            w_d: take("head.w_d".into(), &[d, c])?,
            b_d: take("head.b_d".into(), &[d])?,
            w_r: take("head.w_r".into(), &[r, n])?,
            b_r: take("head.b_r".into(), &[r])?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!(
                "checkpoint has unexpected tensor {extra:?}"
            )));
        }
        Ok(MixVprParams { config, blocks, head })
    }
}

impl<T: Scalar> MixVprParams<T> {
    /// Every parameter tensor with its canonical name, in the fixed order
    /// `block{i}.{gamma,beta,w1,b1,w2,b2}` then `head.{w_d,b_d,w_r,b_r}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(6 * self.blocks.len() + 4);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.gamma"), &b.gamma));
            out.push((format!("block{i}.beta"), &b.beta));
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.b1"), &b.b1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.b2"), &b.b2));
        }
        out.push(("head.w_d".into(), &self.head.w_d));
        out.push(("head.b_d".into(), &self.head.b_d));
        out.push(("head.w_r".into(), &self.head.w_r));
        out.push(("head.b_r".into(), &self.head.b_r));
        out
    }

    /// Independent parameter tally: walks every tensor and sums elements.
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Element-wise conversion of every tensor (f32 ↔ f64).
    pub fn cast<U: Scalar>(&self) -> MixVprParams<U> {
        MixVprParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| MixerBlockParams {
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            head: ProjectionParams {
                w_d: self.head.w_d.cast(),
                b_d: self.head.b_d.cast(),
                w_r: self.head.w_r.cast(),
                b_r: self.head.b_r.cast(),
            },
        }
    }
}

// ── Parameter accounting ────────────────────────────────────────────

/// Parameters per mixer block from the closed form
/// `2n·hidden + hidden + n + 2n` (two MLP layers with biases plus the
/// normalization affine).
pub fn per_block_params(config: &MixVprConfig) -> usize {
    let n = config.spatial();
    let hidden = config.hidden_dim();
    2 * n * hidden + hidden + n + 2 * n
}

/// Exact total parameter count:
/// `L·per_block + (d·c + d) + (r·n + r)`.
pub fn count_params(config: &MixVprConfig) -> usize {
    let n = config.spatial();
    let head = config.out_channels * config.channels
        + config.out_channels
        + config.out_rows * n
        + config.out_rows;
    config.num_blocks * per_block_params(config) + head
}

// ── Value-path forward ──────────────────────────────────────────────

/// Reshapes feature maps `[c × h × w]` into row-major flattened rows
/// `[c × n]`, n = h·w. Row i is channel i's grid read row by row.
pub fn flatten_maps<T: Scalar>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    match maps.dims() {
        [c, h, w] => maps.reshape(vec![*c, h * w]),
        other => Err(Error::shape(
            "flatten_maps",
            format!("expected rank-3 feature maps, got dims {:?}", other),
        )),
    }
}

/// One residual mixing block: `x + W₂·relu(W₁·norm(x) + b₁) + b₂`, applied
/// row-wise with weights shared across rows. Output dims equal input dims.
pub fn feature_mixer_block<T: Scalar>(x: &Tensor<T>, block: &MixerBlockParams<T>) -> Result<Tensor<T>> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let normed = tensor::layer_norm(x, &block.gamma, &block.beta, eps)?;
    let w1t = tensor::transpose(&block.w1)?;
    let h = tensor::relu(&tensor::add_bias_rows(&tensor::matmul(&normed, &w1t)?, &block.b1)?);
    let w2t = tensor::transpose(&block.w2)?;
    let mlp = tensor::add_bias_rows(&tensor::matmul(&h, &w2t)?, &block.b2)?;
    tensor::add(x, &mlp)
}

/// Applies the whole block cascade. An empty slice is the identity.
pub fn mixer_stack<T: Scalar>(x: &Tensor<T>, blocks: &[MixerBlockParams<T>]) -> Result<Tensor<T>> {
    let mut z = x.clone();
    for block in blocks {
        z = feature_mixer_block(&z, block)?;
    }
    Ok(z)
}

/// Depth-wise then row-wise projection: `Z[c×n]` → `Z'[d×n]` → `O[d×r]`.
/// Each map is a plain affine on the transposed operand.
pub fn projection_head<T: Scalar>(z: &Tensor<T>, head: &ProjectionParams<T>) -> Result<Tensor<T>> {
    let (c, n) = z.dims2("projection_head")?;
    let (d, wc) = head.w_d.dims2("projection_head")?;
    if wc != c {
        return Err(Error::shape(
            "projection_head",
            format!("channel axis: depth weights expect c={wc}, input has c={c}"),
        ));
    }
    let (r, wn) = head.w_r.dims2("projection_head")?;
    if wn != n {
        return Err(Error::shape(
            "projection_head",
            format!("row axis: row weights expect n={wn}, input has n={n}"),
        ));
    }
    let _ = (d, r);
    let zt = tensor::transpose(z)?; // [n × c]
    let wdt = tensor::transpose(&head.w_d)?;
    let a = tensor::add_bias_rows(&tensor::matmul(&zt, &wdt)?, &head.b_d)?; // [n × d]
    let zp = tensor::transpose(&a)?; // [d × n]
    let wrt = tensor::transpose(&head.w_r)?;
    tensor::add_bias_rows(&tensor::matmul(&zp, &wrt)?, &head.b_r) // [d × r]
}

/// Full pipeline: flatten → mixer stack → projection head → flatten →
/// L2 normalize. Returns the unit-norm descriptor of length d·r.
pub fn aggregate<T: Scalar>(params: &MixVprParams<T>, maps: &Tensor<T>) -> Result<Tensor<T>> {
    let x = flatten_maps(maps)?;
    let expected = [params.config.channels, params.config.spatial()];
    if x.dims() != expected {
        return Err(Error::shape(
            "aggregate",
            format!("flattened maps are {:?}, config implies {:?}", x.dims(), expected),
        ));
    }
    let z = mixer_stack(&x, &params.blocks)?;
    let o = projection_head(&z, &params.head)?;
    let flat = o.reshape(vec![o.numel()])?;
    tensor::l2_normalize(&flat)
}

// ── Pooling baselines ───────────────────────────────────────────────

/// Per-channel mean over the spatial grid, L2-normalized: the standard
/// global-average baseline. Returns a `[c]` descriptor.
pub fn avg_pool<T: Scalar>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    let x = flatten_maps(maps)?;
    let (c, n) = x.dims2("avg_pool")?;
    let ones = Tensor::filled(vec![n, 1], T::ONE);
    let mean = tensor::scale(&tensor::matmul(&x, &ones)?, T::ONE / T::from_f64(n as f64));
    tensor::l2_normalize(&mean.reshape(vec![c])?)
}

/// Generalized-mean pooling: per channel `(mean(xᵖ))^{1/p}` on activations
/// floored at [`GEM_CLAMP_FLOOR`], then L2 normalization. `p = 1` reduces
/// to [`avg_pool`] on positive inputs; large `p` approaches per-channel
/// max. Computed through the exp/ln decomposition so the value path and
/// the differentiable graph path agree bit-for-bit.
pub fn gem_pool<T: Scalar>(maps: &Tensor<T>, p: T) -> Result<Tensor<T>> {
    if !(p >= T::ONE) {
        return Err(Error::Param(format!("generalized-mean exponent must be >= 1, got {p}")));
    }
    let x = flatten_maps(maps)?;
    let (c, n) = x.dims2("gem_pool")?;
    let clamped = tensor::clamp_min(&x, T::from_f64(GEM_CLAMP_FLOOR));
    let powed = tensor::exp(&tensor::scale(&tensor::ln(&clamped)?, p))?;
    let ones = Tensor::filled(vec![n, 1], T::ONE);
    let mean = tensor::scale(&tensor::matmul(&powed, &ones)?, T::ONE / T::from_f64(n as f64));
    let root = tensor::exp(&tensor::scale(&tensor::ln(&mean)?, T::ONE / p))?;
    tensor::l2_normalize(&root.reshape(vec![c])?)
}

/// Graph-path generalized mean, differentiable in both the maps and the
/// exponent node `p` (a `[1]` leaf). Mirrors [`gem_pool`] op for op.
pub fn gem_pool_graph<T: Scalar>(g: &mut Graph<T>, maps: NodeId, p: NodeId) -> Result<NodeId> {
    if !(g.value(p).scalar_value()? >= T::ONE) {
        return Err(Error::Param(format!(
            "generalized-mean exponent must be >= 1, got {}",
            g.value(p).scalar_value()?
        )));
    }
    let dims = g.value(maps).dims().to_vec();
    let (c, n) = match dims.as_slice() {
        [c, h, w] => (*c, h * w),
        other => {
            return Err(Error::shape(
                "gem_pool",
                format!("expected rank-3 feature maps, got dims {:?}", other),
            ))
        }
    };
    let x = g.reshape(maps, vec![c, n])?;
    let clamped = g.clamp_min(x, T::from_f64(GEM_CLAMP_FLOOR));
    let lx = g.ln(clamped)?;
    let plx = g.mul_scalar(lx, p)?;
    let powed = g.exp(plx)?;
    let ones = g.leaf(Tensor::filled(vec![n, 1], T::ONE));
    let summed = g.matmul(powed, ones)?;
    let mean = g.scale(summed, T::ONE / T::from_f64(n as f64));
    let lm = g.ln(mean)?;
    let pinv = g.recip(p)?;
    let lmp = g.mul_scalar(lm, pinv)?;
    let root = g.exp(lmp)?;
    let flat = g.reshape(root, vec![c])?;
    g.l2_normalize(flat)
}

// ── Graph-path forward ──────────────────────────────────────────────

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape handles for the projection head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub w_d: NodeId,
    pub b_d: NodeId,
    pub w_r: NodeId,
    pub b_r: NodeId,
}

/// Tape handles for the whole parameter set, in [`MixVprParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub blocks: Vec<BlockNodes>,
    pub head: HeadNodes,
}

impl ModelNodes {
    /// Groups a flat id list (canonical tensor order, `6L + 4` entries)
    /// into block/head handles. Used when the leaves were created by an
    /// external harness.
    pub fn from_param_ids(num_blocks: usize, ids: &[NodeId]) -> Result<Self> {
        let expected = 6 * num_blocks + 4;
        if ids.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter ids for {num_blocks} blocks, got {}",
                ids.len()
            )));
        }
        let blocks = (0..num_blocks)
            .map(|i| BlockNodes {
                gamma: ids[6 * i],
                beta: ids[6 * i + 1],
                w1: ids[6 * i + 2],
                b1: ids[6 * i + 3],
                w2: ids[6 * i + 4],
                b2: ids[6 * i + 5],
            })
            .collect();
        let head = HeadNodes {
            w_d: ids[expected - 4],
            b_d: ids[expected - 3],
            w_r: ids[expected - 2],
            b_r: ids[expected - 1],
        };
        Ok(ModelNodes { blocks, head })
    }
}

/// Puts every parameter tensor on the tape as a leaf, returning the
/// handles. Leaf order matches [`MixVprParams::named_tensors`].
pub fn register_params<T: Scalar>(g: &mut Graph<T>, params: &MixVprParams<T>) -> ModelNodes {
    let blocks = params
        .blocks
        .iter()
        .map(|b| BlockNodes {
            gamma: g.leaf(b.gamma.clone()),
            beta: g.leaf(b.beta.clone()),
            w1: g.leaf(b.w1.clone()),
            b1: g.leaf(b.b1.clone()),
            w2: g.leaf(b.w2.clone()),
            b2: g.leaf(b.b2.clone()),
        })
        .collect();
    let head = HeadNodes {
        w_d: g.leaf(params.head.w_d.clone()),
        b_d: g.leaf(params.head.b_d.clone()),
        w_r: g.leaf(params.head.w_r.clone()),
        b_r: g.leaf(params.head.b_r.clone()),
    };
    ModelNodes { blocks, head }
}

/// Graph twin of [`feature_mixer_block`].
pub fn feature_mixer_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    block: &BlockNodes,
) -> Result<NodeId> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let normed = g.layer_norm(x, block.gamma, block.beta, eps)?;
    let w1t = g.transpose(block.w1)?;
    let lin1 = g.matmul(normed, w1t)?;
    let biased1 = g.add_bias_rows(lin1, block.b1)?;
    let h = g.relu(biased1);
    let w2t = g.transpose(block.w2)?;
    let lin2 = g.matmul(h, w2t)?;
    let mlp = g.add_bias_rows(lin2, block.b2)?;
    g.add(x, mlp)
}

/// Graph twin of [`projection_head`].
pub fn projection_head_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    head: &HeadNodes,
) -> Result<NodeId> {
    let zt = g.transpose(z)?;
    let wdt = g.transpose(head.w_d)?;
    let lin_d = g.matmul(zt, wdt)?;
    let a = g.add_bias_rows(lin_d, head.b_d)?;
    let zp = g.transpose(a)?;
    let wrt = g.transpose(head.w_r)?;
    let lin_r = g.matmul(zp, wrt)?;
    g.add_bias_rows(lin_r, head.b_r)
}

/// Graph twin of [`aggregate`]; `x` is an already-flattened `[c × n]`
/// node. Returns the unit-norm `[d·r]` descriptor node.
pub fn aggregate_graph<T: Scalar>(g: &mut Graph<T>, nodes: &ModelNodes, x: NodeId) -> Result<NodeId> {
    let mut z = x;
    let blocks = nodes.blocks.clone();
    for block in &blocks {
        z = feature_mixer_block_graph(g, z, block)?;
    }
    let o = projection_head_graph(g, z, &nodes.head)?;
    let numel = g.value(o).numel();
    let flat = g.reshape(o, vec![numel])?;
    g.l2_normalize(flat)
}

// ── First-layer weight export ───────────────────────────────────────

/// Writes each row of the first block's `w1` as a binary graymap
/// (`neuron_<idx>.pgm`), reshaped to h×w and min-max scaled to 0..255.
/// A constant row renders as uniform mid-gray (deviation zero). `limit`
/// caps how many rows are written; default is all of them.
pub fn export_first_layer_weights(
    params: &MixVprParams<f32>,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let first = params.blocks.first().ok_or_else(|| {
        Error::Contract("weight export needs at least one mixer block".into())
    })?;
    let (h, w) = (params.config.height, params.config.width);
    let (rows, n) = first.w1.dims2("export_first_layer_weights")?;
    debug_assert_eq!(n, h * w);
    let count = limit.unwrap_or(rows).min(rows);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(count);
    for idx in 0..count {
        let row = first.w1.row(idx);
        let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut bytes = Vec::with_capacity(row.len());
        if hi > lo {
            let scale = 255.0 / (hi - lo);
            bytes.extend(row.iter().map(|&v| ((v - lo) * scale).round() as u8));
        } else {
            bytes.resize(row.len(), 128u8);
        }
        let mut file = format!("P5\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&bytes);
        let path = out_dir.join(format!("neuron_{idx}.pgm"));
        fs::write(&path, file)?;
        written.push(path);
    }
    Ok(written)
}
