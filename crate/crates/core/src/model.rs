//! Image transforms, backbone, per-branch classifier heads and projectors,
//! and the checkpoint container.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::linalg;
use crate::mospool::PoolConfig;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

/// Number of views produced per image: 2 scales × 4 rotations.
pub const TRANSFORMS: usize = 8;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const PROJECTOR_EPS: f64 = 1e-12;

// ---- image processing ---------------------------------------------------------

/// Augmented batch: `8L` images ordered image-major, joint labels
/// `class * 8 + transform`.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub transform_ids: Vec<usize>,
}

pub fn joint_label(class: usize, transform: usize) -> usize {
    class * TRANSFORMS + transform
}

/// `(class, transform)` of a joint label.
pub fn split_label(label: usize) -> (usize, usize) {
    (label / TRANSFORMS, label % TRANSFORMS)
}

/// Expands each image into eight views: transform `t` uses scale `t / 4`
/// (0 = original, 1 = 2:3 center crop resized back) and a counter-clockwise
/// rotation of `90° · (t % 4)`.
pub fn augment(batch: &Tensor, labels: &[usize]) -> Result<AugmentedBatch> {
    let [l, c, h, w] = batch.shape()[..] else {
        return dim_err(format!("augment expects L×C×H×W, got {:?}", batch.shape()));
    };
    if labels.len() != l {
        return dim_err(format!("{} labels for {l} images", labels.len()));
    }
    if h != w {
        return dim_err(format!("rotations need square images, got {h}×{w}"));
    }
    let plane = c * h * w;
    let mut images = Vec::with_capacity(TRANSFORMS * l * plane);
    let mut out_labels = Vec::with_capacity(TRANSFORMS * l);
    let mut ids = Vec::with_capacity(TRANSFORMS * l);
    for (i, &label) in labels.iter().enumerate() {
        let img = &batch.data()[i * plane..(i + 1) * plane];
        let rescaled = aspect_rescale(img, c, h, w)?;
        for t in 0..TRANSFORMS {
            let src = if t < 4 { img } else { &rescaled[..] };
            images.extend(rotate90(src, c, h, t % 4));
            out_labels.push(joint_label(label, t));
            ids.push(t);
        }
    }
    Ok(AugmentedBatch {
        images: Tensor::with_dtype(&[TRANSFORMS * l, c, h, w], images, batch.dtype())?,
        labels: out_labels,
        transform_ids: ids,
    })
}

/// Rotates each `n×n` channel plane counter-clockwise by `90° · quarter_turns`.
pub fn rotate90(img: &[f64], c: usize, n: usize, quarter_turns: usize) -> Vec<f64> {
    let mut cur = img.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for ch in 0..c {
            let p = &cur[ch * n * n..(ch + 1) * n * n];
            let q = &mut next[ch * n * n..(ch + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    q[y * n + x] = p[x * n + (n - 1 - y)];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Center-crops to a 2:3 (width:height) region and resizes back to `h×w`
/// with bilinear interpolation (half-pixel centers, edge clamping).
pub fn aspect_rescale(img: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let (cw, ch_) = if 3 * w >= 2 * h {
        (((2 * h) as f64 / 3.0).round() as usize, h)
    } else {
        (w, ((3 * w) as f64 / 2.0).round() as usize)
    };
    if cw < 2 || ch_ < 2 {
        return dim_err(format!("image {h}×{w} too small for a 2:3 crop"));
    }
    let x0 = (w - cw) / 2;
    let y0 = (h - ch_) / 2;
    let sample = |plane: &[f64], sy: f64, sx: f64| -> f64 {
        let sy = sy.clamp(0.0, (ch_ - 1) as f64);
        let sx = sx.clamp(0.0, (cw - 1) as f64);
        let (y_lo, x_lo) = (sy.floor() as usize, sx.floor() as usize);
        let (y_hi, x_hi) = ((y_lo + 1).min(ch_ - 1), (x_lo + 1).min(cw - 1));
        let (fy, fx) = (sy - y_lo as f64, sx - x_lo as f64);
        let at = |y: usize, x: usize| plane[(y0 + y) * w + x0 + x];
        (1.0 - fy) * ((1.0 - fx) * at(y_lo, x_lo) + fx * at(y_lo, x_hi))
            + fy * ((1.0 - fx) * at(y_hi, x_lo) + fx * at(y_hi, x_hi))
    };
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = (y as f64 + 0.5) * ch_ as f64 / h as f64 - 0.5;
            for x in 0..w {
                let sx = (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out.push(sample(plane, sy, sx));
            }
        }
    }
    Ok(out)
}

// ---- configuration ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockSpec>,
    /// `[C, H, W]` of the input images.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: [16, 32, 64, 64]
                .iter()
                .enumerate()
                .map(|(i, &c)| BlockSpec {
                    out_channels: c,
                    pool: i < 3,
                })
                .collect(),
            input_shape: [3, 32, 32],
            normalization: Normalization::None,
            residual: false,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.input_shape[0], |b| b.out_channels)
    }

    /// `(H', W')` of the final feature map.
    pub fn output_spatial(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for b in &self.blocks {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.blocks.is_empty() {
            p.push("backbone.blocks must not be empty".into());
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            p.push("backbone.blocks: out_channels must be positive".into());
        }
        if self.input_shape.contains(&0) {
            p.push("backbone.input_shape extents must be positive".into());
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.pool {
                if h < 2 || w < 2 {
                    p.push(format!("backbone block {i}: cannot pool a {h}×{w} map"));
                    break;
                }
                h /= 2;
                w /= 2;
            }
        }
        if h < 2 || w < 2 {
            p.push(format!("backbone output {h}×{w} is below the 2×2 minimum"));
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of base classes `C_b`; heads predict `8·C_b` joint labels.
    pub num_base_classes: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default)]
    pub pool: PoolConfig,
}

fn default_proj_dim() -> usize {
    64
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_base_classes: usize) -> Self {
        ModelConfig {
            backbone,
            num_base_classes,
            proj_dim: default_proj_dim(),
            pool: PoolConfig::default(),
        }
    }

    pub fn num_outputs(&self) -> usize {
        TRANSFORMS * self.num_base_classes
    }

    /// Width of branch `order`'s pooled feature: `d` or `d²`.
    pub fn branch_dim(&self, order: usize) -> usize {
        let d = self.backbone.feature_dim();
        if order == 1 {
            d
        } else {
            d * d
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.backbone.problems();
        if self.num_base_classes == 0 {
            p.push("model.num_base_classes must be positive".into());
        }
        if self.proj_dim == 0 {
            p.push("model.proj_dim must be positive".into());
        }
        if let Err(e) = self.pool.validate() {
            p.push(e.to_string());
        }
        p
    }
}

// ---- parameters ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    /// Trainable, weight-decayed.
    Param,
    /// Running normalization statistics.
    Buffer,
    /// Optimizer state.
    Velocity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// Graph handles for one forward pass.
pub struct ForwardGraph {
    /// One leaf per entry of `Model::params`, same order.
    pub params: Vec<Var>,
    /// `N×d×H'×W'` backbone output.
    pub features: Var,
    /// Batch statistics per normalized block, for running-stat updates.
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
}

impl Model {
    /// Fresh parameters: He-style uniform fan-in scaling for weights, zero
    /// biases, unit normalization scales.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let bb = &config.backbone;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut push = |name: String, value: Tensor| params.push(NamedTensor { name, value });
        let mut c_in = bb.input_shape[0];
        for (i, b) in bb.blocks.iter().enumerate() {
            let c = b.out_channels;
            push(format!("block{i}.kernel"), he_uniform(rng, &[c, c_in, 3, 3], c_in * 9)?);
            push(format!("block{i}.bias"), Tensor::zeros(&[c]));
            if bb.normalization == Normalization::PerChannel {
                push(format!("block{i}.gamma"), Tensor::ones(&[c]));
                push(format!("block{i}.beta"), Tensor::zeros(&[c]));
                buffers.push(NamedTensor {
                    name: format!("block{i}.running_mean"),
                    value: Tensor::zeros(&[c]),
                });
                buffers.push(NamedTensor {
                    name: format!("block{i}.running_var"),
                    value: Tensor::ones(&[c]),
                });
            }
            if bb.residual && c != c_in {
                push(format!("block{i}.shortcut"), he_uniform(rng, &[c, c_in, 1, 1], c_in)?);
            }
            c_in = c;
        }
        let k = config.num_outputs();
        for o in 1..=3 {
            let dim = config.branch_dim(o);
            push(format!("head{o}.W"), he_uniform(rng, &[dim, k], dim)?);
        }
        for o in 1..=3 {
            let dim = config.branch_dim(o);
            push(format!("proj{o}.U"), he_uniform(rng, &[dim, config.proj_dim], dim)?);
        }
        Ok(Model {
            config,
            params,
            buffers,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Builds the backbone on `images` (`N×C×H×W`). In training mode the
    /// normalization layers use batch statistics; otherwise the stored
    /// running statistics.
    pub fn build_backbone(&self, g: &mut Graph, images: Var, train: bool) -> Result<ForwardGraph> {
        let shape = g.value(images).shape().to_vec();
        let [_, c, h, w] = shape[..] else {
            return dim_err(format!("backbone expects N×C×H×W, got {shape:?}"));
        };
        if [c, h, w] != self.config.backbone.input_shape {
            return dim_err(format!(
                "backbone configured for {:?}, got images {:?}",
                self.config.backbone.input_shape,
                [c, h, w]
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        let get = |name: &str| -> Result<Var> {
            self.param_index(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let bb = &self.config.backbone;
        let mut x = images;
        let mut batch_stats = Vec::new();
        for (i, b) in bb.blocks.iter().enumerate() {
            let input = x;
            let conv = g.conv2d(x, get(&format!("block{i}.kernel"))?, Conv2dSpec::default())?;
            let mut y = g.add_channel_bias(conv, get(&format!("block{i}.bias"))?)?;
            if bb.normalization == Normalization::PerChannel {
                let gamma = get(&format!("block{i}.gamma"))?;
                let beta = get(&format!("block{i}.beta"))?;
                let out = if train {
                    let r = g.batch_norm(y, gamma, beta, BN_EPS, None)?;
                    batch_stats.push((i, r.batch_mean, r.batch_var));
                    r.out
                } else {
                    let mean = self
                        .buffer(&format!("block{i}.running_mean"))
                        .ok_or_else(|| Error::Format(format!("missing block{i}.running_mean")))?;
                    let var = self
                        .buffer(&format!("block{i}.running_var"))
                        .ok_or_else(|| Error::Format(format!("missing block{i}.running_var")))?;
                    g.batch_norm(y, gamma, beta, BN_EPS, Some((mean.data(), var.data())))?.out
                };
                y = out;
            }
            if bb.residual {
                let shortcut = match self.param_index(&format!("block{i}.shortcut")) {
                    Some(k) => g.conv2d(input, vars[k], Conv2dSpec { stride: 1, padding: 0 })?,
                    None => input,
                };
                y = g.add(y, shortcut)?;
            }
            x = g.relu(y)?;
            if b.pool {
                x = g.maxpool2(x)?;
            }
        }
        Ok(ForwardGraph {
            params: vars,
            features: x,
            batch_stats,
        })
    }

    /// Folds batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (block, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("block{block}.{suffix}");
                let buf = self
                    .buffers
                    .iter_mut()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Format(format!("missing buffer {name}")))?;
                let updated = buf
                    .value
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                    .collect();
                buf.value = Tensor::new(buf.value.shape(), updated)?;
            }
        }
        Ok(())
    }

    /// Inference-mode backbone output for `N×C×H×W` images.
    pub fn backbone_forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fg = self.build_backbone(&mut g, x, false)?;
        Ok(g.value(fg.features).clone())
    }

    /// Pooled `N×dim_o` features of the three branches (inference mode).
    pub fn pooled_features(&self, images: &Tensor) -> Result<[Tensor; 3]> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fg = self.build_backbone(&mut g, x, false)?;
        let mut out = Vec::with_capacity(3);
        for order in 1..=3u8 {
            let z = g.pool(fg.features, order, self.config.pool)?;
            out.push(g.value(z).clone());
        }
        Ok(out.try_into().expect("three branches"))
    }
}

// ---- heads --------------------------------------------------------------------------

/// Softmax probabilities of `zᵀW` for a `dim` vector or `B×dim` batch.
pub fn head_forward(w: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (dim, k) = w.as_matrix("head weights")?;
    let rows = batch_rows(z, dim, "head_forward")?;
    let logits = linalg::matmul(rows, dim, k, z.data(), w.data());
    let probs = crate::graph::softmax_rows(rows, k, &logits);
    let shape: Vec<usize> = if z.rank() == 1 { vec![k] } else { vec![rows, k] };
    Tensor::with_dtype(&shape, probs, z.dtype().promote(w.dtype()))
}

/// L2-normalized projection `zᵀU / ‖zᵀU‖`. Errors when the projection has
/// zero norm; the training graph instead divides by `max(‖·‖, 1e-12)`.
pub fn projector_forward(u: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (dim, p) = u.as_matrix("projector weights")?;
    let rows = batch_rows(z, dim, "projector_forward")?;
    let mut v = linalg::matmul(rows, dim, p, z.data(), u.data());
    for (i, row) in v.chunks_exact_mut(p).enumerate() {
        let n = linalg::dot(row, row).sqrt();
        if n <= PROJECTOR_EPS {
            return Err(Error::Numeric(format!("projection of row {i} has zero norm")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    let shape: Vec<usize> = if z.rank() == 1 { vec![p] } else { vec![rows, p] };
    Tensor::with_dtype(&shape, v, z.dtype().promote(u.dtype()))
}

pub(crate) fn projector_eps() -> f64 {
    PROJECTOR_EPS
}

fn batch_rows(z: &Tensor, dim: usize, what: &str) -> Result<usize> {
    match z.shape()[..] {
        [d] if d == dim => Ok(1),
        [b, d] if d == dim => Ok(b),
        _ => dim_err(format!("{what}: input {:?} does not match width {dim}", z.shape())),
    }
}

// ---- checkpoints ----------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "mostat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Training configuration that produced the checkpoint, if any.
    #[serde(default)]
    pub train_config: serde_json::Value,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus optimizer state. On disk: one line of JSON header, a
/// newline, then every tensor in header order using the tensor wire format.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub velocity: Vec<NamedTensor>,
    pub seed: u64,
    pub epoch: usize,
    pub train_config: serde_json::Value,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let entry = |t: &NamedTensor, kind| TensorEntry {
            name: t.name.clone(),
            kind,
            dtype: t.value.dtype(),
            shape: t.value.shape().to_vec(),
        };
        let mut tensors: Vec<TensorEntry> =
            self.model.params.iter().map(|t| entry(t, TensorKind::Param)).collect();
        tensors.extend(self.model.buffers.iter().map(|t| entry(t, TensorKind::Buffer)));
        tensors.extend(self.velocity.iter().map(|t| entry(t, TensorKind::Velocity)));
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_string(&self.header())?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for t in self
            .model
            .params
            .iter()
            .chain(&self.model.buffers)
            .chain(&self.velocity)
        {
            t.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: R) -> Result<Checkpoint> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut velocity = Vec::new();
        for entry in &header.tensors {
            let value = Tensor::read_from(&mut reader)?;
            if value.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, header says {:?}",
                    entry.name,
                    value.shape(),
                    entry.shape
                )));
            }
            let nt = NamedTensor {
                name: entry.name.clone(),
                value,
            };
            match entry.kind {
                TensorKind::Param => params.push(nt),
                TensorKind::Buffer => buffers.push(nt),
                TensorKind::Velocity => velocity.push(nt),
            }
        }
        let model = Model {
            config: header.config,
            params,
            buffers,
        };
        model.check_layout()?;
        Ok(Checkpoint {
            model,
            velocity,
            seed: header.seed,
            epoch: header.epoch,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read_from(fs::File::open(path)?)
    }
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Model {
    /// Checks that parameter names and shapes agree with the config.
    pub fn check_layout(&self) -> Result<()> {
        let reference = Model::init(self.config.clone(), &mut Rng::new(0))?;
        let names = |v: &[NamedTensor]| -> Vec<(String, Vec<usize>)> {
            v.iter().map(|t| (t.name.clone(), t.value.shape().to_vec())).collect()
        };
        if names(&reference.params) != names(&self.params) || names(&reference.buffers) != names(&self.buffers) {
            return Err(Error::Format(
                "checkpoint parameters do not match its model configuration".into(),
            ));
        }
        Ok(())
    }
}
