//! Functional and energy simulation of the crossbar architecture.
//!
//! Weights live in crossbar arrays as complementary resistive cell pairs
//! (agreement between the ±1 input and the stored weight reads as the
//! low-resistance state). A layer's unrolled weight matrix is tiled onto
//! 256×256 arrays by one of two strategies: `KernelUnroll` places each
//! kernel as one column segment; `KxKSplit` slices a conv kernel into K·K
//! sub-arrays of shape C_in × C_out and packs them onto arrays by vertical
//! stacking. Column currents are digitized by ADCs, partial sums are merged
//! by the adder-accumulator, the scale memory applies the (possibly
//! dropped) scale row, and sign activations are comparator operations.
//!
//! With ADC resolution of at least ⌈log2(rows+1)⌉ bits the pipeline is
//! bit-exact against the packed XNOR/popcount reference.
//!
//! Energy is an exact dot product of operation counts with per-component
//! energies (defaults from the architecture's circuit characterization, in
//! picojoules per operation). The unit an energy row refers to is
//! configurable where the accounting granularity is ambiguous: memory
//! decode/sense is counted per array read plus, by default, per buffered
//! activation element.

use crate::dropout::{effective_scale, DropoutConfig, DropoutMask, ScaleVector};
use crate::error::{Error, Result};
use crate::model::{
    conv_patch_values, ConvGeometry, ForwardMode, Layer, Model,
};
use crate::norm::batchnorm_forward;
use crate::packed::PackedBinaryTensor;
use crate::tensor::RealTensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ROWS: usize = 256;
pub const DEFAULT_COLS: usize = 256;
/// Calibration point: 0.401 mm² for a ten-array configuration.
pub const AREA_PER_CROSSBAR_MM2: f64 = 0.0401;

/// Per-operation energies in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEnergiesPj {
    pub memory_decode_sense: f64,
    pub rng: f64,
    pub averaging: f64,
    pub adder_accumulator: f64,
    pub comparator: f64,
    pub crossbar_read: f64,
}

impl Default for ComponentEnergiesPj {
    fn default() -> Self {
        Self {
            memory_decode_sense: 4.76,
            rng: 3.80,
            averaging: 18.42,
            adder_accumulator: 0.12,
            comparator: 0.01,
            crossbar_read: 0.65,
        }
    }
}

impl ComponentEnergiesPj {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.memory_decode_sense,
            self.rng,
            self.averaging,
            self.adder_accumulator,
            self.comparator,
            self.crossbar_read,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "component energies must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// What one `memory_decode_sense` count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryOpUnit {
    /// One count per crossbar array read.
    ArrayReadsOnly,
    /// Array reads plus one count per activation element written to the
    /// inter-layer buffer.
    ArrayReadsPlusBuffers,
}

impl Default for MemoryOpUnit {
    fn default() -> Self {
        MemoryOpUnit::ArrayReadsPlusBuffers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    pub adc_bits: u32,
    pub energies_pj: ComponentEnergiesPj,
    pub memory_op_unit: MemoryOpUnit,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            rows: DEFAULT_ROWS,
            cols: DEFAULT_COLS,
            adc_bits: lossless_adc_bits(DEFAULT_ROWS),
            energies_pj: ComponentEnergiesPj::default(),
            memory_op_unit: MemoryOpUnit::default(),
        }
    }
}

impl CrossbarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.adc_bits == 0 || self.adc_bits > 32 {
            return Err(Error::InvalidArgument(
                "crossbar needs positive rows/cols and 1..=32 ADC bits".to_string(),
            ));
        }
        self.energies_pj.validate()
    }
}

/// Smallest ADC resolution that keeps column counts exact: ⌈log2(rows+1)⌉.
pub fn lossless_adc_bits(rows: usize) -> u32 {
    let mut bits = 0u32;
    while (1u64 << bits) - 1 < rows as u64 {
        bits += 1;
    }
    bits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingStrategy {
    #[serde(rename = "kernel-unroll")]
    KernelUnroll,
    #[serde(rename = "kxk-split")]
    KxKSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Lrs,
    Hrs,
}

/// One weight bit as a complementary cell pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplementaryCell {
    pub main: CellState,
    pub complement: CellState,
}

/// Encodes a ±1 weight into its complementary pair: +1 stores LRS on the
/// main cell, −1 on the complement.
pub fn xnor_encode(weight_plus_one: bool) -> ComplementaryCell {
    if weight_plus_one {
        ComplementaryCell {
            main: CellState::Lrs,
            complement: CellState::Hrs,
        }
    } else {
        ComplementaryCell {
            main: CellState::Hrs,
            complement: CellState::Lrs,
        }
    }
}

impl ComplementaryCell {
    /// The input's (0,1)/(1,0) line pair selects one of the two cells; the
    /// selected cell's state is the effective resistance.
    pub fn effective(&self, input_plus_one: bool) -> CellState {
        if input_plus_one {
            self.main
        } else {
            self.complement
        }
    }
}

/// One rectangular region of a layer's unrolled weight matrix placed on a
/// physical array.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Tile {
    /// Plan-local crossbar index the tile lives on.
    pub crossbar: usize,
    /// Row offset on the physical array.
    pub array_row: usize,
    /// Covered rows of the logical matrix.
    pub src_rows: (usize, usize),
    /// Covered columns of the logical matrix.
    pub src_cols: (usize, usize),
}

impl Tile {
    pub fn rows(&self) -> usize {
        self.src_rows.1 - self.src_rows.0
    }
    pub fn cols(&self) -> usize {
        self.src_cols.1 - self.src_cols.0
    }
}

/// Logical shape of a layer to be mapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LayerShape {
    Conv {
        kernel: usize,
        c_in: usize,
        c_out: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerShape {
    /// Unrolled matrix dimensions: rows = fan-in, cols = output channels.
    pub fn matrix(&self) -> (usize, usize) {
        match self {
            LayerShape::Conv {
                kernel,
                c_in,
                c_out,
            } => (kernel * kernel * c_in, *c_out),
            LayerShape::Linear {
                in_features,
                out_features,
            } => (*in_features, *out_features),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CrossbarPlan {
    pub shape: LayerShape,
    pub strategy: MappingStrategy,
    pub tiles: Vec<Tile>,
    pub num_crossbars: usize,
    /// Mapped cells over total cells of the used arrays.
    pub utilization: f64,
}

/// Maps a layer onto crossbar arrays.
///
/// `KernelUnroll`: the unrolled matrix is chopped into `rows × cols` chunks,
/// one array per chunk. `KxKSplit` (convs): each of the K·K kernel tap
/// sub-matrices (C_in × C_out) is chunked the same way, and chunks are then
/// packed onto arrays by vertical stacking without splitting a chunk across
/// arrays.
pub fn map_layer(
    shape: LayerShape,
    strategy: MappingStrategy,
    cfg: &CrossbarConfig,
) -> Result<CrossbarPlan> {
    cfg.validate()?;
    let (m_rows, m_cols) = shape.matrix();
    if m_rows == 0 || m_cols == 0 {
        return Err(Error::InvalidArgument(
            "cannot map a zero-sized layer".to_string(),
        ));
    }
    let mut tiles = Vec::new();
    let mut num_crossbars = 0usize;

    match (strategy, shape) {
        (MappingStrategy::KernelUnroll, _)
        | (MappingStrategy::KxKSplit, LayerShape::Linear { .. }) => {
            // Row/col chunks, one array per chunk.
            for r0 in (0..m_rows).step_by(cfg.rows) {
                let r1 = (r0 + cfg.rows).min(m_rows);
                for c0 in (0..m_cols).step_by(cfg.cols) {
                    let c1 = (c0 + cfg.cols).min(m_cols);
                    tiles.push(Tile {
                        crossbar: num_crossbars,
                        array_row: 0,
                        src_rows: (r0, r1),
                        src_cols: (c0, c1),
                    });
                    num_crossbars += 1;
                }
            }
        }
        (
            MappingStrategy::KxKSplit,
            LayerShape::Conv {
                kernel,
                c_in,
                c_out,
            },
        ) => {
            // Chunks of each kernel-tap sub-matrix, stacked vertically.
            // Chunks never straddle arrays; a fresh column strip means a
            // fresh array (vertical packing only).
            let mut cur_fill = cfg.rows; // forces a new array at first chunk
            for tap in 0..kernel * kernel {
                let base = tap * c_in;
                for r0 in (0..c_in).step_by(cfg.rows) {
                    let r1 = (r0 + cfg.rows).min(c_in);
                    let h = r1 - r0;
                    for c0 in (0..c_out).step_by(cfg.cols) {
                        let c1 = (c0 + cfg.cols).min(c_out);
                        let (crossbar, array_row) = if c0 == 0 && cur_fill + h <= cfg.rows {
                            let at = cur_fill;
                            cur_fill += h;
                            (num_crossbars - 1, at)
                        } else {
                            num_crossbars += 1;
                            cur_fill = if c0 == 0 { h } else { cfg.rows };
                            (num_crossbars - 1, 0)
                        };
                        tiles.push(Tile {
                            crossbar,
                            array_row,
                            src_rows: (base + r0, base + r1),
                            src_cols: (c0, c1),
                        });
                    }
                }
            }
        }
    }

    let mapped: usize = tiles.iter().map(|t| t.rows() * t.cols()).sum();
    debug_assert_eq!(mapped, m_rows * m_cols);
    let utilization = mapped as f64 / (num_crossbars * cfg.rows * cfg.cols) as f64;
    Ok(CrossbarPlan {
        shape,
        strategy,
        tiles,
        num_crossbars,
        utilization,
    })
}

/// A mapped binary layer: plan plus the complementary-cell contents of the
/// unrolled weight matrix (row-major).
pub struct MappedLayer {
    pub plan: CrossbarPlan,
    cells: Vec<ComplementaryCell>,
    rows: usize,
    cols: usize,
}

impl MappedLayer {
    /// `bits` is the execution-layout weight matrix (rows = fan-in taps,
    /// cols = output channels) flattened row-major.
    pub fn new(plan: CrossbarPlan, bits: &PackedBinaryTensor) -> Result<Self> {
        let (rows, cols) = plan.shape.matrix();
        if bits.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} weight bits for a {}x{} matrix",
                bits.len(),
                rows,
                cols
            )));
        }
        let cells = (0..bits.len()).map(|i| xnor_encode(bits.get_bit(i))).collect();
        Ok(Self {
            plan,
            cells,
            rows,
            cols,
        })
    }

    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// ADC conversion of one column count over a tile's achievable range
/// [0, tile_rows]. Exact whenever 2^bits − 1 >= tile_rows (thresholds then
/// resolve unit steps); otherwise uniform over the range.
pub fn adc_quantize(count: usize, tile_rows: usize, adc_bits: u32) -> f64 {
    let levels = (1u64 << adc_bits) - 1;
    if levels >= tile_rows as u64 {
        count as f64
    } else {
        let step = tile_rows as f64 / levels as f64;
        (count as f64 / step).round() * step
    }
}

/// Simulates the crossbar matrix-vector products for a batch of ±1 input
/// vectors (`inputs` is `[n, fan_in]` with ±1 entries). Per tile, the
/// column current is the count of cells reading LRS; the ADC digitizes it,
/// digital logic converts to a ±1 sum, and the accumulator merges partial
/// sums across tiles. Returns `[n, c_out]`.
pub fn simulate_mvm(
    mapped: &MappedLayer,
    inputs: &RealTensor,
    adc_bits: u32,
) -> Result<RealTensor> {
    let [n, fan_in] = *inputs.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "mvm inputs must be [n, fan_in], got {:?}",
            inputs.shape()
        )));
    };
    if fan_in != mapped.rows {
        return Err(Error::ShapeMismatch(format!(
            "input length {} vs mapped matrix rows {}",
            fan_in, mapped.rows
        )));
    }
    let cols = mapped.cols;
    let mut out = vec![0.0; n * cols];
    for v in 0..n {
        let x = &inputs.data()[v * fan_in..(v + 1) * fan_in];
        for tile in &mapped.plan.tiles {
            let th = tile.rows();
            for col in tile.src_cols.0..tile.src_cols.1 {
                let mut lrs_count = 0usize;
                for row in tile.src_rows.0..tile.src_rows.1 {
                    let cell = mapped.cells[row * cols + col];
                    if cell.effective(x[row] >= 0.0) == CellState::Lrs {
                        lrs_count += 1;
                    }
                }
                let digitized = adc_quantize(lrs_count, th, adc_bits);
                // ±1 partial sum: agreements minus disagreements.
                out[v * cols + col] += 2.0 * digitized - th as f64;
            }
        }
    }
    RealTensor::new(vec![n, cols], out)
}

/// The scale-memory stage: a row of the scale SRAM multiplies the
/// accumulated sums when the dropout module fires, and is bypassed
/// otherwise (the multiplexer path). Matches
/// [`crate::dropout::apply_scale`] exactly for the Unitary variant.
pub fn apply_scale_memory(
    sums: &RealTensor,
    scale_row: &[f64],
    mask: &DropoutMask,
) -> Result<RealTensor> {
    let c = sums.channels();
    if scale_row.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "scale row has {} entries for {} channels",
            scale_row.len(),
            c
        )));
    }
    if !mask.d {
        return Ok(sums.clone());
    }
    let data = sums
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * scale_row[i % c])
        .collect();
    RealTensor::new(sums.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub crossbar_read: u64,
    pub memory_decode_sense: u64,
    pub rng: u64,
    pub adder_accumulator: u64,
    pub comparator: u64,
    pub averaging: u64,
}

impl ComponentCounts {
    pub fn merge(&mut self, other: &ComponentCounts) {
        self.crossbar_read += other.crossbar_read;
        self.memory_decode_sense += other.memory_decode_sense;
        self.rng += other.rng;
        self.adder_accumulator += other.adder_accumulator;
        self.comparator += other.comparator;
        self.averaging += other.averaging;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub counts: ComponentCounts,
    pub images: u64,
    pub passes_per_image: u64,
    pub energy_total_j: f64,
    pub energy_per_image_j: f64,
    pub energy_per_pass_j: f64,
    /// Mask sampling time: one 15 ns SET/RESET cycle per RNG draw.
    pub latency_total_s: f64,
}

impl EnergyLedger {
    pub fn from_counts(
        counts: ComponentCounts,
        images: u64,
        passes_per_image: u64,
        energies: &ComponentEnergiesPj,
    ) -> Self {
        let total_pj = energy_dot(&counts, energies);
        let energy_total_j = total_pj * 1e-12;
        Self {
            counts,
            images,
            passes_per_image,
            energy_total_j,
            energy_per_image_j: energy_total_j / images.max(1) as f64,
            energy_per_pass_j: energy_total_j / (images.max(1) * passes_per_image.max(1)) as f64,
            latency_total_s: counts.rng as f64 * crate::mtj::SAMPLE_LATENCY_S,
        }
    }
}

/// Σ counts × unit energies, in picojoules. The accounting identity the
/// ledger is held to.
pub fn energy_dot(counts: &ComponentCounts, e: &ComponentEnergiesPj) -> f64 {
    counts.crossbar_read as f64 * e.crossbar_read
        + counts.memory_decode_sense as f64 * e.memory_decode_sense
        + counts.rng as f64 * e.rng
        + counts.adder_accumulator as f64 * e.adder_accumulator
        + counts.comparator as f64 * e.comparator
        + counts.averaging as f64 * e.averaging
}

/// A whole model mapped onto arrays.
pub struct ModelPlan {
    /// One mapped layer per binary layer, in model order.
    pub layers: Vec<MappedLayer>,
    pub total_crossbars: usize,
    pub utilization: f64,
    pub area_mm2: f64,
}

pub fn map_model(
    model: &Model,
    strategy: MappingStrategy,
    cfg: &CrossbarConfig,
) -> Result<ModelPlan> {
    let mut layers = Vec::new();
    let mut total = 0usize;
    let mut mapped_cells = 0usize;
    for layer in &model.layers {
        let (shape, bits) = match layer {
            Layer::BinaryConv(c) => (
                LayerShape::Conv {
                    kernel: c.kernel,
                    c_in: c.c_in,
                    c_out: c.c_out,
                },
                &c.bits,
            ),
            Layer::BinaryLinear(l) => (
                LayerShape::Linear {
                    in_features: l.in_features,
                    out_features: l.out_features,
                },
                &l.bits,
            ),
            _ => continue,
        };
        let plan = map_layer(shape, strategy, cfg)?;
        total += plan.num_crossbars;
        let (r, c) = shape.matrix();
        mapped_cells += r * c;
        let flat = match layer {
            // Conv execution layout already runs (tap, c_out) row-major.
            Layer::BinaryConv(_) => bits.clone().reshape(vec![r, c])?,
            // Linear bits are stored row-per-output; the array wants
            // rows = fan-in, so transpose.
            _ => {
                let transposed =
                    (0..r * c).map(|i| bits.get_bit((i % c) * r + i / c));
                PackedBinaryTensor::from_bits(vec![r, c], transposed)?
            }
        };
        layers.push(MappedLayer::new(plan, &flat)?);
    }
    Ok(ModelPlan {
        layers,
        total_crossbars: total,
        utilization: mapped_cells as f64 / (total * cfg.rows * cfg.cols) as f64,
        area_mm2: total as f64 * AREA_PER_CROSSBAR_MM2,
    })
}

/// Full inference on the crossbar architecture. Mirrors
/// [`Model::forward_eval`] but routes every binary layer through
/// [`simulate_mvm`]; batch norm, sign (comparators), pooling and softmax
/// stay digital. With lossless ADCs the logits are bit-identical to the
/// reference path.
pub fn cim_forward(
    model: &Model,
    plan: &ModelPlan,
    cfg: &CrossbarConfig,
    x: &RealTensor,
    masks: &[DropoutMask],
    dropout_cfg: &DropoutConfig,
) -> Result<RealTensor> {
    let mut cur = x.clone();
    let mut outputs: Vec<RealTensor> = Vec::with_capacity(model.layers.len());
    let mut bin_idx = 0usize;
    let mut mask_idx = 0usize;
    for layer in &model.layers {
        cur = match layer {
            Layer::BinaryConv(c) => {
                let mapped = &plan.layers[bin_idx];
                bin_idx += 1;
                let mask = &masks[mask_idx];
                mask_idx += 1;
                let geo = conv_geometry_for(c, &cur)?;
                let patches = conv_patch_values(&cur, &geo, ForwardMode::Binary);
                let mut sums = simulate_mvm(mapped, &patches, cfg.adc_bits)?;
                add_bias(&mut sums, &c.bias);
                let scaled = scale_stage(&sums, &c.scale, mask, dropout_cfg)?;
                scaled.reshape(vec![geo.n, geo.oh, geo.ow, c.c_out])?
            }
            Layer::BinaryLinear(l) => {
                let mapped = &plan.layers[bin_idx];
                bin_idx += 1;
                let mask = &masks[mask_idx];
                mask_idx += 1;
                let signed = sign_tensor(&cur);
                let mut sums = simulate_mvm(mapped, &signed, cfg.adc_bits)?;
                add_bias(&mut sums, &l.bias);
                scale_stage(&sums, &l.scale, mask, dropout_cfg)?
            }
            Layer::BatchNorm(p) => {
                let mut p = p.clone();
                batchnorm_forward(&cur, &mut p, false)?.0
            }
            Layer::Sign => sign_tensor(&cur),
            Layer::MaxPool(p) => crate::model::pool_max(&cur, p)?,
            Layer::AvgPool(p) => crate::model::pool_avg(&cur, p)?,
            Layer::Flatten => {
                let n = cur.shape()[0];
                let rest: usize = cur.shape()[1..].iter().product();
                cur.reshape(vec![n, rest])?
            }
            Layer::ResidualAdd { from } => {
                let prev = &outputs[*from];
                let data = cur
                    .data()
                    .iter()
                    .zip(prev.data())
                    .map(|(a, b)| a + b)
                    .collect();
                RealTensor::new(cur.shape().to_vec(), data)?
            }
        };
        outputs.push(cur.clone());
    }
    Ok(cur)
}

/// Scale-memory application matching the reference forward's arithmetic for
/// every dropout variant (Unitary bypass is the hardware mux; Average and
/// Random substitute a scalar).
fn scale_stage(
    sums: &RealTensor,
    scale: &ScaleVector,
    mask: &DropoutMask,
    cfg: &DropoutConfig,
) -> Result<RealTensor> {
    let eff = effective_scale(scale, mask, cfg);
    let c = sums.channels();
    let data: Vec<f64> = match &eff {
        crate::dropout::EffectiveScale::Bypass => sums.data().to_vec(),
        crate::dropout::EffectiveScale::Scalar(s) => sums.data().iter().map(|v| v * s).collect(),
        crate::dropout::EffectiveScale::PerChannel(a) => sums
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * a[i % c])
            .collect(),
    };
    RealTensor::new(sums.shape().to_vec(), data)
}

fn sign_tensor(t: &RealTensor) -> RealTensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    RealTensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn add_bias(sums: &mut RealTensor, bias: &[f64]) {
    let c = bias.len();
    for (i, v) in sums.data_mut().iter_mut().enumerate() {
        *v += bias[i % c];
    }
}

fn conv_geometry_for(c: &crate::model::ConvLayer, x: &RealTensor) -> Result<ConvGeometry> {
    let [n, h, w, ci] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv input must be [n,h,w,c], got {:?}",
            x.shape()
        )));
    };
    if ci != c.c_in {
        return Err(Error::ShapeMismatch("conv channel mismatch".to_string()));
    }
    let oh = crate::packed::conv_out_dim(h, c.kernel, c.stride, c.padding)?;
    let ow = crate::packed::conv_out_dim(w, c.kernel, c.stride, c.padding)?;
    Ok(ConvGeometry {
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
        c_in: c.c_in,
        oh,
        ow,
        h,
        w,
        n,
    })
}

/// Operation counts for one Bayesian inference of one image (T passes),
/// from the plan and the model's layer shapes.
///
/// Counting rules (also written into reports):
/// * crossbar_read: per used array, per input application, per pass;
/// * memory_decode_sense: per crossbar read, plus (default unit) one per
///   element written to an inter-stage pipeline buffer per pass: sign
///   outputs, pooled maps, residual saves, and the final layer's outputs.
///   Batch-norm streams into the comparator and raw sums stay in the
///   accumulator registers, so neither is buffered separately;
/// * rng: one per binary layer per pass (the single dropout module
///   resampled for each layer);
/// * adder_accumulator: per cross-tile partial-sum merge, per bias add,
///   and per residual-add element;
/// * comparator: per sign evaluation and per max-pool comparison;
/// * averaging: once per Bayesian inference.
pub fn energy_rollup(
    plan: &ModelPlan,
    model: &Model,
    t_passes: u64,
    cfg: &CrossbarConfig,
) -> Result<EnergyLedger> {
    cfg.validate()?;
    let shapes = model.output_shapes()?;
    let mut per_pass = ComponentCounts::default();
    let mut bin_idx = 0usize;
    let last = model.layers.len() - 1;
    for (li, (layer, out_shape)) in model.layers.iter().zip(&shapes).enumerate() {
        match layer {
            Layer::BinaryConv(_) | Layer::BinaryLinear(_) => {
                let mapped = &plan.layers[bin_idx];
                bin_idx += 1;
                let positions = match layer {
                    Layer::BinaryConv(_) => (out_shape[0] * out_shape[1]) as u64,
                    _ => 1u64,
                };
                let reads = positions * mapped.plan.num_crossbars as u64;
                per_pass.crossbar_read += reads;
                per_pass.memory_decode_sense += reads;
                per_pass.rng += 1;
                // partial sums beyond the first per output column
                let partials: u64 = mapped
                    .plan
                    .tiles
                    .iter()
                    .map(|t| t.cols() as u64)
                    .sum::<u64>()
                    - mapped.matrix_dims().1 as u64;
                let out_elems: u64 = out_shape.iter().product::<usize>() as u64;
                // cross-tile merges per input application, plus one bias
                // add per output element
                per_pass.adder_accumulator += positions * partials + out_elems;
            }
            Layer::Sign => {
                per_pass.comparator += out_shape.iter().product::<usize>() as u64;
            }
            Layer::MaxPool(p) => {
                let out_elems: u64 = out_shape.iter().product::<usize>() as u64;
                per_pass.comparator += out_elems * (p.size * p.size - 1) as u64;
            }
            Layer::ResidualAdd { .. } => {
                per_pass.adder_accumulator += out_shape.iter().product::<usize>() as u64;
            }
            _ => {}
        }
        // Pipeline-register writes: sign bits, pooled maps, residual saves,
        // and whatever the last layer emits.
        let buffered = li == last
            || matches!(
                layer,
                Layer::Sign | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::ResidualAdd { .. }
            );
        if cfg.memory_op_unit == MemoryOpUnit::ArrayReadsPlusBuffers && buffered {
            per_pass.memory_decode_sense += out_shape.iter().product::<usize>() as u64;
        }
    }

    let mut counts = ComponentCounts::default();
    for _ in 0..t_passes {
        counts.merge(&per_pass);
    }
    counts.averaging += 1;
    Ok(EnergyLedger::from_counts(
        counts,
        1,
        t_passes,
        &cfg.energies_pj,
    ))
}

/// Ledger for a whole evaluation run: per-image counts scaled to `images`.
pub fn energy_rollup_batch(
    plan: &ModelPlan,
    model: &Model,
    images: u64,
    t_passes: u64,
    cfg: &CrossbarConfig,
) -> Result<EnergyLedger> {
    let one = energy_rollup(plan, model, t_passes, cfg)?;
    let mut counts = ComponentCounts::default();
    for _ in 0..images {
        counts.merge(&one.counts);
    }
    Ok(EnergyLedger::from_counts(
        counts,
        images,
        t_passes,
        &cfg.energies_pj,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{DropoutConfig, DropoutVariant};
    use crate::model::{LayerSpec, Model, ModelSpec};
    use crate::packed::xnor_popcount_matmul;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn xnor_encode_truth_table() {
        // (input, weight) agreement reads LRS, disagreement HRS.
        let cases = [
            (true, true, CellState::Lrs),
            (false, false, CellState::Lrs),
            (true, false, CellState::Hrs),
            (false, true, CellState::Hrs),
        ];
        for (input, weight, want) in cases {
            let cell = xnor_encode(weight);
            assert_eq!(cell.effective(input), want, "input {input} weight {weight}");
        }
    }

    #[test]
    fn lossless_bits_for_256_rows_is_9() {
        assert_eq!(lossless_adc_bits(256), 9);
        assert_eq!(lossless_adc_bits(255), 8);
        assert_eq!(lossless_adc_bits(1), 1);
    }

    fn cfg() -> CrossbarConfig {
        CrossbarConfig::default()
    }

    #[test]
    fn unroll_3x3x64x64_needs_three_arrays() {
        let plan = map_layer(
            LayerShape::Conv {
                kernel: 3,
                c_in: 64,
                c_out: 64,
            },
            MappingStrategy::KernelUnroll,
            &cfg(),
        )
        .unwrap();
        // column height 576 -> ceil(576/256) = 3 row chunks, 1 col chunk
        assert_eq!(plan.num_crossbars, 3);
        assert_eq!(plan.tiles.len(), 3);
    }

    #[test]
    fn linear_256x256_fills_one_array() {
        let plan = map_layer(
            LayerShape::Linear {
                in_features: 256,
                out_features: 256,
            },
            MappingStrategy::KernelUnroll,
            &cfg(),
        )
        .unwrap();
        assert_eq!(plan.num_crossbars, 1);
        assert_eq!(plan.utilization, 1.0);
    }

    #[test]
    fn kxk_split_packs_subarrays() {
        let plan = map_layer(
            LayerShape::Conv {
                kernel: 3,
                c_in: 64,
                c_out: 64,
            },
            MappingStrategy::KxKSplit,
            &cfg(),
        )
        .unwrap();
        // 9 sub-arrays of 64x64 stacked 4-per-array: ceil(9*64/256) = 3
        assert_eq!(plan.tiles.len(), 9);
        assert_eq!(plan.num_crossbars, 3);
    }

    #[test]
    fn tiles_cover_matrix_exactly_and_never_overlap() {
        for strategy in [MappingStrategy::KernelUnroll, MappingStrategy::KxKSplit] {
            for shape in [
                LayerShape::Conv {
                    kernel: 5,
                    c_in: 37,
                    c_out: 300,
                },
                LayerShape::Conv {
                    kernel: 3,
                    c_in: 300,
                    c_out: 10,
                },
                LayerShape::Linear {
                    in_features: 777,
                    out_features: 300,
                },
            ] {
                let plan = map_layer(shape, strategy, &cfg()).unwrap();
                let (r, c) = shape.matrix();
                let mut cover = vec![0u8; r * c];
                for t in &plan.tiles {
                    assert!(t.rows() <= 256 && t.cols() <= 256);
                    for row in t.src_rows.0..t.src_rows.1 {
                        for col in t.src_cols.0..t.src_cols.1 {
                            cover[row * c + col] += 1;
                        }
                    }
                }
                assert!(cover.iter().all(|&v| v == 1), "{shape:?} {strategy:?}");
                // no two tiles overlap on one array
                for (i, a) in plan.tiles.iter().enumerate() {
                    for b in plan.tiles.iter().skip(i + 1) {
                        if a.crossbar == b.crossbar {
                            let a_rows = a.array_row..a.array_row + a.rows();
                            let b_rows = b.array_row..b.array_row + b.rows();
                            let disjoint_rows = a_rows.end <= b_rows.start
                                || b_rows.end <= a_rows.start;
                            let disjoint_cols = a.src_cols.1 <= b.src_cols.0
                                || b.src_cols.1 <= a.src_cols.0;
                            assert!(
                                disjoint_rows || disjoint_cols,
                                "tiles {a:?} and {b:?} overlap"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn crossbar_count_monotone_in_layer_dims() {
        for strategy in [MappingStrategy::KernelUnroll, MappingStrategy::KxKSplit] {
            let count = |k, ci, co| {
                map_layer(
                    LayerShape::Conv {
                        kernel: k,
                        c_in: ci,
                        c_out: co,
                    },
                    strategy,
                    &cfg(),
                )
                .unwrap()
                .num_crossbars
            };
            let base = count(3, 64, 64);
            assert!(count(5, 64, 64) >= base);
            assert!(count(3, 128, 64) >= base);
            assert!(count(3, 64, 128) >= base);
        }
    }

    #[test]
    fn zero_sized_layer_errors() {
        assert!(map_layer(
            LayerShape::Linear {
                in_features: 0,
                out_features: 4
            },
            MappingStrategy::KernelUnroll,
            &cfg()
        )
        .is_err());
    }

    fn random_bits(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn mvm_lossless_matches_packed_reference() {
        let mut rng = StdRng::seed_from_u64(13);
        for strategy in [MappingStrategy::KernelUnroll, MappingStrategy::KxKSplit] {
            let shape = LayerShape::Conv {
                kernel: 3,
                c_in: 40, // 360 rows: forces multiple tiles
                c_out: 20,
            };
            let (r, c) = shape.matrix();
            let wv = random_bits(&mut rng, r * c);
            let bits = PackedBinaryTensor::from_signs(vec![r, c], &wv).unwrap();
            let plan = map_layer(shape, strategy, &cfg()).unwrap();
            let mapped = MappedLayer::new(plan, &bits).unwrap();

            let xv = random_bits(&mut rng, 5 * r);
            let x = RealTensor::new(vec![5, r], xv.clone()).unwrap();
            let got = simulate_mvm(&mapped, &x, cfg().adc_bits).unwrap();

            let px = PackedBinaryTensor::from_signs(vec![5, r], &xv).unwrap();
            let want = {
                // reference computes x [5,r] * w [r,c]
                let w = PackedBinaryTensor::from_signs(vec![r, c], &wv).unwrap();
                xnor_popcount_matmul(&px, &w).unwrap()
            };
            assert_eq!(got.data(), want.data(), "{strategy:?}");
        }
    }

    #[test]
    fn one_bit_adc_collapses_to_tile_sign() {
        let shape = LayerShape::Linear {
            in_features: 8,
            out_features: 1,
        };
        let bits =
            PackedBinaryTensor::from_signs(vec![8, 1], &vec![1.0; 8]).unwrap();
        let plan = map_layer(shape, MappingStrategy::KernelUnroll, &cfg()).unwrap();
        let mapped = MappedLayer::new(plan, &bits).unwrap();
        // 6 agreements, 2 disagreements: exact sum 4; with 1-bit ADC the
        // count quantizes to 0 or 8 -> output ±8.
        let x = RealTensor::new(
            vec![1, 8],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0],
        )
        .unwrap();
        let exact = simulate_mvm(&mapped, &x, 9).unwrap();
        assert_eq!(exact.data(), &[4.0]);
        let coarse = simulate_mvm(&mapped, &x, 1).unwrap();
        assert_eq!(coarse.data(), &[8.0]);
    }

    #[test]
    fn single_tile_column_of_agreements_reads_full_count() {
        let shape = LayerShape::Linear {
            in_features: 256,
            out_features: 1,
        };
        let bits = PackedBinaryTensor::from_signs(vec![256, 1], &vec![1.0; 256]).unwrap();
        let plan = map_layer(shape, MappingStrategy::KernelUnroll, &cfg()).unwrap();
        let mapped = MappedLayer::new(plan, &bits).unwrap();
        let x = RealTensor::new(vec![1, 256], vec![1.0; 256]).unwrap();
        let out = simulate_mvm(&mapped, &x, 9).unwrap();
        assert_eq!(out.data(), &[256.0]);
    }

    #[test]
    fn scale_memory_matches_apply_scale() {
        let mut rng = StdRng::seed_from_u64(4);
        let sums = RealTensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-20.0..20.0)).collect(),
        )
        .unwrap();
        let alpha = ScaleVector {
            alpha: vec![0.5, 1.5, 2.0, 0.1],
        };
        let cfg_d = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5]).unwrap();
        for d in [true, false] {
            let mask = DropoutMask {
                d,
                random_value: None,
            };
            let got = apply_scale_memory(&sums, &alpha.alpha, &mask).unwrap();
            let want = crate::dropout::apply_scale(&sums, &alpha, &mask, &cfg_d).unwrap();
            assert_eq!(got.data(), want.data());
        }
    }

    #[test]
    fn scale_memory_identity_and_doubling() {
        let sums = RealTensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap();
        let bypass = apply_scale_memory(
            &sums,
            &[2.0, 2.0],
            &DropoutMask {
                d: false,
                random_value: None,
            },
        )
        .unwrap();
        assert_eq!(bypass.data(), sums.data());
        let scaled = apply_scale_memory(&sums, &[2.0, 2.0], &DropoutMask::keep()).unwrap();
        assert_eq!(scaled.data(), &[6.0, -8.0]);
    }

    fn small_model() -> (Model, DropoutConfig) {
        let spec = ModelSpec {
            input: vec![6, 6, 2],
            layers: vec![
                LayerSpec::BinaryConv {
                    c_out: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::MaxPool {
                    size: 2,
                    stride: None,
                },
                LayerSpec::Flatten,
                LayerSpec::BinaryLinear { out_features: 5 },
                LayerSpec::BatchNorm,
                LayerSpec::Sign,
                LayerSpec::BinaryLinear { out_features: 3 },
            ],
        };
        let model = Model::build(&spec, 21).unwrap();
        let cfg = DropoutConfig::new(DropoutVariant::Unitary, vec![0.5, 0.5, 0.5]).unwrap();
        (model, cfg)
    }

    #[test]
    fn cim_forward_bit_identical_to_reference() {
        let (model, dcfg) = small_model();
        let ccfg = cfg();
        for strategy in [MappingStrategy::KernelUnroll, MappingStrategy::KxKSplit] {
            let plan = map_model(&model, strategy, &ccfg).unwrap();
            let mut rng = StdRng::seed_from_u64(77);
            for trial in 0..10 {
                let x = RealTensor::new(
                    vec![2, 6, 6, 2],
                    (0..144).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                // random masks incl. dropped layers
                let masks: Vec<DropoutMask> = (0..3)
                    .map(|_| DropoutMask {
                        d: rng.random::<bool>(),
                        random_value: None,
                    })
                    .collect();
                let want = model.forward_eval(&x, &masks, &dcfg).unwrap();
                let got = cim_forward(&model, &plan, &ccfg, &x, &masks, &dcfg).unwrap();
                assert_eq!(got.data(), want.data(), "{strategy:?} trial {trial}");
            }
        }
    }

    #[test]
    fn rollup_counts_rng_per_layer_per_pass() {
        let (model, _) = small_model();
        let ccfg = cfg();
        let plan = map_model(&model, MappingStrategy::KernelUnroll, &ccfg).unwrap();
        let ledger = energy_rollup(&plan, &model, 10, &ccfg).unwrap();
        assert_eq!(ledger.counts.rng, 3 * 10);
        // 5-layer model, T = 10: 50 RNG draws = 190 pJ at 3.8 pJ each
        let five_layer_rng: f64 = 50.0 * 3.80;
        assert!((five_layer_rng - 190.0).abs() < 1e-12);
    }

    #[test]
    fn single_crossbar_read_unit_energy() {
        let counts = ComponentCounts {
            crossbar_read: 1,
            ..Default::default()
        };
        let e = ComponentEnergiesPj::default();
        assert!((energy_dot(&counts, &e) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn ledger_latency_is_rng_times_15ns() {
        let (model, _) = small_model();
        let ccfg = cfg();
        let plan = map_model(&model, MappingStrategy::KernelUnroll, &ccfg).unwrap();
        let ledger = energy_rollup(&plan, &model, 4, &ccfg).unwrap();
        assert!((ledger.latency_total_s - ledger.counts.rng as f64 * 15e-9).abs() < 1e-20);
    }

    proptest! {
        /// The accounting identity: ledger total equals the manual
        /// Σ counts × units recomputation exactly.
        #[test]
        fn accounting_identity(
            reads in 0u64..10_000,
            mems in 0u64..10_000,
            rngs in 0u64..1_000,
            adds in 0u64..10_000,
            cmps in 0u64..10_000,
            avgs in 0u64..10,
        ) {
            let counts = ComponentCounts {
                crossbar_read: reads,
                memory_decode_sense: mems,
                rng: rngs,
                adder_accumulator: adds,
                comparator: cmps,
                averaging: avgs,
            };
            let e = ComponentEnergiesPj::default();
            let ledger = EnergyLedger::from_counts(counts, 1, 1, &e);
            let manual = reads as f64 * 0.65
                + mems as f64 * 4.76
                + rngs as f64 * 3.80
                + adds as f64 * 0.12
                + cmps as f64 * 0.01
                + avgs as f64 * 18.42;
            prop_assert_eq!(ledger.energy_total_j, manual * 1e-12);
        }
    }
}
