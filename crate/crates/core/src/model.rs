//! The embedding network: a miniature dilated residual backbone followed by
//! regional generalized-mean pooling, a bias-free projection, and L2
//! normalization.
//!
//! An image flows through a stride-2 stem convolution and four residual
//! groups. Later groups raise their dilation instead of striding, so the
//! final feature map keeps twice the resolution of a conventionally strided
//! stack while using exactly the same parameters. A deterministic multi-scale
//! grid of regions is pooled from that map; each region is pooled to a
//! per-channel vector, projected to the embedding dimension, normalized,
//! summed across regions, and normalized once more.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BlockNodes, ConvNodes, ConvParams, ResidualBlockParams, GEM_P_INIT};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvSpec, Tensor};

/// Axis-aligned window on a feature map: `x`/`y` is the top-left corner,
/// `w`/`h` the extent in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Checkpoint file magic.
const CHECKPOINT_MAGIC: [u8; 4] = *b"DRCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the network's structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square input image in pixels.
    pub input_size: usize,
    /// Channels produced by the stem convolution.
    pub stem_channels: usize,
    /// Output channels of each residual group.
    pub group_channels: Vec<usize>,
    /// Residual blocks per group.
    pub blocks_per_group: usize,
    /// Dilation applied by every block of each group. Must be all ones, or
    /// ones followed by a doubling tail (2, 4, 8, ...) that runs to the last
    /// group.
    pub group_dilations: Vec<usize>,
    /// Stride of each group's first block (1 or 2).
    pub group_strides: Vec<usize>,
    /// Length of the final embedding.
    pub embedding_dim: usize,
    /// Number of scale levels in the pooling region grid.
    pub region_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            stem_channels: 8,
            group_channels: vec![8, 16, 32, 64],
            blocks_per_group: 1,
            group_dilations: vec![1, 1, 2, 4],
            group_strides: vec![1, 2, 1, 1],
            embedding_dim: 64,
            region_levels: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if self.stem_channels == 0 || self.embedding_dim == 0 || self.blocks_per_group == 0 {
            return Err(Error::Config(
                "stem_channels, embedding_dim and blocks_per_group must be positive".into(),
            ));
        }
        if self.region_levels == 0 {
            return Err(Error::Config("region_levels must be positive".into()));
        }
        if self.group_channels.is_empty() {
            return Err(Error::Config(
                "at least one residual group is required".into(),
            ));
        }
        if self.group_channels.len() != self.group_dilations.len()
            || self.group_channels.len() != self.group_strides.len()
        {
            return Err(Error::Config(format!(
                "group lists must agree in length: {} channels, {} dilations, {} strides",
                self.group_channels.len(),
                self.group_dilations.len(),
                self.group_strides.len()
            )));
        }
        if self.group_channels.contains(&0) {
            return Err(Error::Config(
                "group channel counts must be positive".into(),
            ));
        }
        if self.group_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!(
                "group strides must be 1 or 2, got {:?}",
                self.group_strides
            )));
        }
        self.validate_dilation_schedule()?;
        // Walking the stride chain also catches inputs too small to survive
        // every convolution.
        self.feature_map_side()?;
        Ok(())
    }

    /// The dilation schedule is either all ones (conventional striding) or
    /// ones followed by a doubling tail — 2, 4, 8, ... — that reaches the
    /// last group. Arbitrary mixtures are rejected because the padding and
    /// counterpart bookkeeping below assume this shape.
    fn validate_dilation_schedule(&self) -> Result<()> {
        let d = &self.group_dilations;
        let tail_start = match d.iter().position(|&v| v != 1) {
            None => return Ok(()),
            Some(i) => i,
        };
        let mut expected = 2;
        for (i, &v) in d.iter().enumerate().skip(tail_start) {
            if v != expected {
                return Err(Error::Config(format!(
                    "dilation schedule {d:?} must be all ones or end in a doubling tail (2, 4, ...); group {i} breaks it"
                )));
            }
            expected *= 2;
        }
        Ok(())
    }

    fn stem_spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(3, self.stem_channels, 3, 2, 1, 1)
    }

    /// Side length of the final feature map, obtained by walking the stem
    /// and every block's convolution geometry.
    pub fn feature_map_side(&self) -> Result<usize> {
        let (mut side, _) = self
            .stem_spec()?
            .output_hw(self.input_size, self.input_size)?;
        let mut in_channels = self.stem_channels;
        for g in 0..self.group_channels.len() {
            for b in 0..self.blocks_per_group {
                let stride = if b == 0 { self.group_strides[g] } else { 1 };
                let spec = ConvSpec::new(
                    in_channels,
                    self.group_channels[g],
                    3,
                    stride,
                    self.group_dilations[g],
                    self.group_dilations[g],
                )?;
                let (next, _) = spec.output_hw(side, side)?;
                side = next;
                in_channels = self.group_channels[g];
            }
        }
        Ok(side)
    }

    /// The conventionally strided twin of this config: the dilation tail is
    /// folded back into a single extra stride-2 at the group where dilation
    /// first rises, halving the final feature map. Parameter counts are
    /// untouched because stride and dilation never enter a kernel's shape.
    pub fn stride_matched_counterpart(&self) -> ModelConfig {
        let mut twin = self.clone();
        if let Some(entry) = self.group_dilations.iter().position(|&d| d == 2) {
            twin.group_strides[entry] = 2;
        }
        for d in &mut twin.group_dilations {
            *d = 1;
        }
        twin
    }
}

/// The network's trainable state.
#[derive(Debug, Clone)]
pub struct MiniDrn {
    pub config: ModelConfig,
    pub stem: ConvParams,
    pub groups: Vec<Vec<ResidualBlockParams>>,
    /// Shared pooling exponent, shape `[1]`.
    pub gem_p: Tensor,
    /// Projection from pooled channels to the embedding, `[channels, dim]`.
    pub fc_weight: Tensor,
}

/// One image's embedding, unit length unless `zero_norm` is set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingVector {
    pub id: String,
    pub values: Vec<f64>,
    /// True when the network produced an (effectively) zero vector that
    /// could not be normalized; such embeddings are kept but worth counting.
    pub zero_norm: bool,
}

/// A recorded forward pass ready for backprop: parameter nodes appear in the
/// same order as [`MiniDrn::visit_params`].
pub struct EmbedGraph {
    pub tape: Tape,
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
}

impl MiniDrn {
    /// Builds a freshly initialized network. The same seed always produces
    /// bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::he_init(config.stem_channels, 3, 3, &mut rng);
        let mut groups = Vec::with_capacity(config.group_channels.len());
        let mut in_channels = config.stem_channels;
        for g in 0..config.group_channels.len() {
            let mut blocks = Vec::with_capacity(config.blocks_per_group);
            for b in 0..config.blocks_per_group {
                let stride = if b == 0 { config.group_strides[g] } else { 1 };
                blocks.push(ResidualBlockParams::he_init(
                    in_channels,
                    config.group_channels[g],
                    stride,
                    config.group_dilations[g],
                    &mut rng,
                ));
                in_channels = config.group_channels[g];
            }
            groups.push(blocks);
        }
        let gem_p = Tensor::scalar(GEM_P_INIT);
        let channels = *config.group_channels.last().expect("validated non-empty");
        // The projection feeds straight into L2 normalization, which absorbs
        // any global scale; 1/sqrt(fan_in) keeps coordinates O(1).
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("finite std dev");
        let fc_data = (0..channels * config.embedding_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let fc_weight = Tensor::new(vec![channels, config.embedding_dim], fc_data)?;
        Ok(MiniDrn {
            config,
            stem,
            groups,
            gem_p,
            fc_weight,
        })
    }

    /// Same structure as [`MiniDrn::build`] but all parameters zero; used as
    /// the target when streaming a checkpoint back in.
    fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = MiniDrn::build(config, 0)?;
        model.visit_params_mut(&mut |_, t| t.data_mut().fill(0.0));
        Ok(model)
    }

    /// Calls `f` with every trainable tensor, in the fixed declaration order
    /// used by the optimizer, the checkpoint format, and recorded tapes.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("stem.weight", &self.stem.weight);
        f("stem.bias", &self.stem.bias);
        for (g, blocks) in self.groups.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                f(
                    &format!("group{g}.block{b}.conv1.weight"),
                    &block.conv1.weight,
                );
                f(&format!("group{g}.block{b}.conv1.bias"), &block.conv1.bias);
                f(
                    &format!("group{g}.block{b}.conv2.weight"),
                    &block.conv2.weight,
                );
                f(&format!("group{g}.block{b}.conv2.bias"), &block.conv2.bias);
                if let Some(proj) = &block.proj {
                    f(&format!("group{g}.block{b}.proj.weight"), &proj.weight);
                    f(&format!("group{g}.block{b}.proj.bias"), &proj.bias);
                }
            }
        }
        f("gem.p", &self.gem_p);
        f("fc.weight", &self.fc_weight);
    }

    /// Mutable twin of [`MiniDrn::visit_params`]; the visit order is
    /// identical.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("stem.weight", &mut self.stem.weight);
        f("stem.bias", &mut self.stem.bias);
        for (g, blocks) in self.groups.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                f(
                    &format!("group{g}.block{b}.conv1.weight"),
                    &mut block.conv1.weight,
                );
                f(
                    &format!("group{g}.block{b}.conv1.bias"),
                    &mut block.conv1.bias,
                );
                f(
                    &format!("group{g}.block{b}.conv2.weight"),
                    &mut block.conv2.weight,
                );
                f(
                    &format!("group{g}.block{b}.conv2.bias"),
                    &mut block.conv2.bias,
                );
                if let Some(proj) = &mut block.proj {
                    f(&format!("group{g}.block{b}.proj.weight"), &mut proj.weight);
                    f(&format!("group{g}.block{b}.proj.bias"), &mut proj.bias);
                }
            }
        }
        f("gem.p", &mut self.gem_p);
        f("fc.weight", &mut self.fc_weight);
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t| count += t.len());
        count
    }

    /// Copies all parameters into one flat vector (visit order).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, t| flat.extend_from_slice(t.data()));
        flat
    }

    /// Overwrites all parameters from a flat vector laid out like
    /// [`MiniDrn::flatten_params`].
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |_, t| {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        match image.shape() {
            [3, h, w] if *h == s && *w == s => Tensor::new(vec![1, 3, s, s], image.data().to_vec()),
            [1, 3, h, w] if *h == s && *w == s => Ok(image.clone()),
            other => Err(Error::Shape(format!(
                "expected a [3, {s}, {s}] image, got shape {other:?}"
            ))),
        }
    }

    /// Records the full embedding forward pass for one image onto a fresh
    /// tape, returning the graph so the caller can backprop through it.
    pub fn embed_graph(&self, image: &Tensor) -> Result<EmbedGraph> {
        let image = self.check_image(image)?;
        let mut tape = Tape::new();
        let mut param_nodes = Vec::new();

        // Push parameters in visit order so gradient readout can line up
        // with visit_params without any name matching.
        let stem = ConvNodes {
            weight: push_param(&mut tape, &mut param_nodes, &self.stem.weight),
            bias: push_param(&mut tape, &mut param_nodes, &self.stem.bias),
        };
        let mut group_nodes = Vec::new();
        for blocks in &self.groups {
            let mut block_nodes = Vec::new();
            for block in blocks {
                block_nodes.push(BlockNodes {
                    conv1: ConvNodes {
                        weight: push_param(&mut tape, &mut param_nodes, &block.conv1.weight),
                        bias: push_param(&mut tape, &mut param_nodes, &block.conv1.bias),
                    },
                    conv2: ConvNodes {
                        weight: push_param(&mut tape, &mut param_nodes, &block.conv2.weight),
                        bias: push_param(&mut tape, &mut param_nodes, &block.conv2.bias),
                    },
                    proj: block.proj.as_ref().map(|p| ConvNodes {
                        weight: push_param(&mut tape, &mut param_nodes, &p.weight),
                        bias: push_param(&mut tape, &mut param_nodes, &p.bias),
                    }),
                });
            }
            group_nodes.push(block_nodes);
        }
        let gem_p = push_param(&mut tape, &mut param_nodes, &self.gem_p);
        let fc = push_param(&mut tape, &mut param_nodes, &self.fc_weight);

        let img = tape.leaf(image);
        let stem_out = tape.conv2d(img, stem.weight, stem.bias, self.config.stem_spec()?)?;
        let mut x = tape.relu(stem_out);
        for (blocks, nodes) in self.groups.iter().zip(&group_nodes) {
            for (block, block_nodes) in blocks.iter().zip(nodes) {
                x = layers::residual_block(&mut tape, x, block, block_nodes)?;
            }
        }

        let map_shape = tape.value(x).shape();
        let (hf, wf) = (map_shape[2], map_shape[3]);
        let regions = generate_regions(hf, wf, self.config.region_levels)?;
        let mut region_vecs = Vec::with_capacity(regions.len());
        for region in regions {
            let pooled = tape.gem_pool(x, gem_p, region)?;
            let projected = tape.matvec(fc, pooled)?;
            region_vecs.push(tape.l2_normalize(projected)?);
        }
        let summed = tape.sum_vecs(&region_vecs)?;
        let output = tape.l2_normalize(summed)?;
        Ok(EmbedGraph {
            tape,
            output,
            param_nodes,
        })
    }

    /// Embeds one image (single view).
    pub fn embed(&self, image: &Tensor, id: &str) -> Result<EmbeddingVector> {
        let graph = self.embed_graph(image)?;
        let values = graph.tape.value(graph.output).data().to_vec();
        Ok(finish_embedding(id, values))
    }

    /// Embeds the four corner crops and the center crop of a larger image,
    /// averages the five embeddings, and renormalizes.
    pub fn five_crop_embed(&self, image: &Tensor, id: &str) -> Result<EmbeddingVector> {
        let crops = crate::data::five_crops(image, self.config.input_size)?;
        let mut mean = vec![0.0; self.config.embedding_dim];
        for crop in &crops {
            let one = self.embed(crop, id)?;
            for (m, v) in mean.iter_mut().zip(&one.values) {
                *m += v / crops.len() as f64;
            }
        }
        let values = layers::l2_normalize(&Tensor::from_vec(mean))?.into_data();
        Ok(finish_embedding(id, values))
    }

    /// Serializes config and parameters. The layout is: magic `DRCK`,
    /// version (u32 LE), config JSON length (u32 LE), config JSON, then every
    /// parameter tensor's raw f64 little-endian values in visit order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(&CHECKPOINT_MAGIC)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config)?;
        file.write_all(&(config.len() as u32).to_le_bytes())?;
        file.write_all(&config)?;
        let mut io_err = None;
        self.visit_params(&mut |_, t| {
            if io_err.is_some() {
                return;
            }
            for v in t.data() {
                if let Err(e) = file.write_all(&v.to_le_bytes()) {
                    io_err = Some(e);
                    return;
                }
            }
        });
        match io_err {
            Some(e) => Err(e.into()),
            None => {
                file.flush()?;
                Ok(())
            }
        }
    }

    /// Reads a checkpoint produced by [`MiniDrn::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut file, &mut magic, &mut offset, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(
                format!("bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
                0,
            ));
        }
        let mut word = [0u8; 4];
        read_exact_at(&mut file, &mut word, &mut offset, "checkpoint version")?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                format!("unsupported checkpoint version {version}"),
                4,
            ));
        }
        read_exact_at(&mut file, &mut word, &mut offset, "config length")?;
        let config_len = u32::from_le_bytes(word) as usize;
        let mut config_bytes = vec![0u8; config_len];
        read_exact_at(&mut file, &mut config_bytes, &mut offset, "config JSON")?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::parse(format!("config JSON: {e}"), 12))?;
        config.validate()?;

        let mut model = MiniDrn::zeroed(config)?;
        let mut stream_err: Option<Error> = None;
        model.visit_params_mut(&mut |name, t| {
            if stream_err.is_some() {
                return;
            }
            let mut buf = [0u8; 8];
            for v in t.data_mut() {
                match read_exact_at(&mut file, &mut buf, &mut offset, name) {
                    Ok(()) => *v = f64::from_le_bytes(buf),
                    Err(e) => {
                        stream_err = Some(e);
                        return;
                    }
                }
            }
        });
        if let Some(e) = stream_err {
            return Err(e);
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::parse(
                "trailing bytes after the last parameter",
                offset,
            ));
        }
        Ok(model)
    }
}

fn push_param(tape: &mut Tape, nodes: &mut Vec<NodeId>, value: &Tensor) -> NodeId {
    let id = tape.param(value.clone());
    nodes.push(id);
    id
}

fn finish_embedding(id: &str, values: Vec<f64>) -> EmbeddingVector {
    let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    EmbeddingVector {
        id: id.to_string(),
        values,
        zero_norm: norm < 0.5,
    }
}

fn read_exact_at(
    reader: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    match reader.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::parse(
            format!("unexpected end of file while reading {what}"),
            *offset,
        )),
        Err(e) => Err(e.into()),
    }
}

/// Deterministic multi-scale grid of square pooling windows.
///
/// At scale level `l` (1-based) the window side is
/// `floor(2 * min(h, w) / (l + 1))`. Along each axis the windows are placed
/// uniformly, using the smallest count whose consecutive windows overlap by
/// at least 40% of the side. Results are ordered scale-major then row-major,
/// and exact duplicates (possible on tiny maps) are dropped.
pub fn generate_regions(h: usize, w: usize, levels: usize) -> Result<Vec<RegionRect>> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(
            "cannot pool regions from an empty feature map".into(),
        ));
    }
    if levels == 0 {
        return Err(Error::Config("region_levels must be positive".into()));
    }
    let mut regions: Vec<RegionRect> = Vec::new();
    for level in 1..=levels {
        let side = 2 * h.min(w) / (level + 1);
        if side == 0 {
            continue;
        }
        let ys = axis_positions(h, side);
        let xs = axis_positions(w, side);
        for &y in &ys {
            for &x in &xs {
                let rect = RegionRect {
                    x,
                    y,
                    w: side,
                    h: side,
                };
                if !regions.contains(&rect) {
                    regions.push(rect);
                }
            }
        }
    }
    debug_assert!(!regions.is_empty());
    Ok(regions)
}

/// Uniform window positions along one axis: the smallest count that keeps
/// consecutive windows overlapping by at least 40% of `side` (step at most
/// 0.6 * side), spread evenly over the full extent. Positions are whole
/// cells, so the effective bound is the largest integer step within that
/// limit; windows of side 1 cannot overlap at integer positions, so the
/// step never drops below one cell.
fn axis_positions(length: usize, side: usize) -> Vec<usize> {
    let span = length - side;
    if span == 0 {
        return vec![0];
    }
    let max_step = (0.6 * side as f64).max(1.0);
    let step = (max_step.floor() as usize).max(1);
    let count = 1 + span.div_ceil(step);
    // The ideal real-valued step is at most `step`; rounding keeps every
    // consecutive integer step at or below it as well.
    (0..count)
        .map(|i| ((i as f64) * (span as f64) / ((count - 1) as f64)).round() as usize)
        .collect()
}
