//! The spatial cross-SSM layer and the bidirectional BEV self-attention
//! block.
//!
//! Forward pass of the cross layer, per camera and per traversal order:
//! flatten the camera's feature map, project queries and values through one
//! shared masked input projection, interleave the hit-query copies into the
//! value stream (position-aware merge, or append/prepend baselines), run the
//! bidirectional masked scan, gate the extracted query outputs with the
//! queries' z-branch, and index-add every copy back into its BEV cell.
//! Accumulated rows are optionally averaged by hit count, projected back to
//! model width and fused with the residual through dropout + layer norm.
//!
//! Configuration axes mirror the ablation grid: merge before/after the
//! depthwise convolution, extract before/after the gate, any combination of
//! zeroed query/value projection slices, four normalization modes, three
//! insertion modes, and any set of traversal orders.
//!
//! Token layout produced by the input projection (one weight, masked per
//! token kind):
//!
//! ```text
//!   [ z: αD | x: αD | B_fwd: NG | C_fwd: NG | B_bwd: NG | C_bwd: NG | dt_fwd: H | dt_bwd: H ]
//! ```
//!
//! Queries use z/x/B/C (dt zeroed unless the dt_Q ablation disables the
//! mask); values use x/B/C/dt with z masked. The depthwise causal
//! convolution covers the x and B/C channels; dt passes through untouched.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::consts::TOL;
use crate::error::{Error, Result};
use crate::geometry::ReferencePointSet;
use crate::merge::{build_merged, index_offset, refpoints_to_1d, MergedSequence};
use crate::rng::CounterRng;
use crate::ssm::{scan_recurrent, ScanState, SSMDims, SSMParams, SequenceBatch};
use crate::traversal::{flatten_permutation, TraversalOrder};
use crate::xqssm::{masked_scan, MaskedScanOptions, XQSSMInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOrder {
    BeforeConv,
    AfterConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractOrder {
    BeforeGate,
    AfterGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Average,
    Rmsnorm,
    Both,
    Neither,
}

impl NormMode {
    pub fn averages(self) -> bool {
        matches!(self, NormMode::Average | NormMode::Both)
    }

    pub fn rms_normalizes(self) -> bool {
        matches!(self, NormMode::Rmsnorm | NormMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    Project,
    Append,
    Prepend,
}

/// Every knob of the cross layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub dims: SSMDims,
    pub merge_order: MergeOrder,
    pub extract_order: ExtractOrder,
    #[serde(rename = "zero_BQ")]
    pub zero_bq: bool,
    #[serde(rename = "zero_CV")]
    pub zero_cv: bool,
    #[serde(rename = "zero_dtQ")]
    pub zero_dtq: bool,
    pub norm_mode: NormMode,
    pub traversals: Vec<TraversalOrder>,
    pub insertion_mode: InsertionMode,
    pub conv_width: usize,
    pub dropout: f64,
}

impl LayerConfig {
    /// The best-performing configuration of the ablation grid: merge after
    /// the convolution, extract before the gate, all query/value zero flags
    /// on, average + RMS normalization, snake traversal.
    pub fn default_for(dims: SSMDims) -> LayerConfig {
        LayerConfig {
            dims,
            merge_order: MergeOrder::AfterConv,
            extract_order: ExtractOrder::BeforeGate,
            zero_bq: true,
            zero_cv: true,
            zero_dtq: true,
            norm_mode: NormMode::Both,
            traversals: vec![TraversalOrder::RowSnake],
            insertion_mode: InsertionMode::Project,
            conv_width: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.traversals.is_empty() {
            return Err(Error::InvalidSpec("at least one traversal required".into()));
        }
        if self.conv_width < 1 {
            return Err(Error::InvalidSpec("conv_width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidSpec(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Channel ranges inside the shared input projection output.
#[derive(Debug, Clone, Copy)]
pub struct SliceLayout {
    pub alpha_d: usize,
    pub ng: usize,
    pub heads: usize,
}

impl SliceLayout {
    pub fn from_dims(dims: &SSMDims) -> SliceLayout {
        SliceLayout {
            alpha_d: dims.inner_dim(),
            ng: dims.bc_width(),
            heads: dims.heads,
        }
    }

    /// Width of the input projection output: 2αD + 4NG + 2H.
    pub fn in_proj_width(&self) -> usize {
        2 * self.alpha_d + 4 * self.ng + 2 * self.heads
    }

    /// Width of a merged stream token (no z): αD + 4NG + 2H.
    pub fn token_width(&self) -> usize {
        self.alpha_d + 4 * self.ng + 2 * self.heads
    }

    /// Channels covered by the depthwise convolution: x plus all B/C slices.
    pub fn conv_channels(&self) -> usize {
        self.alpha_d + 4 * self.ng
    }

    pub fn z(&self) -> Range<usize> {
        0..self.alpha_d
    }

    pub fn x(&self) -> Range<usize> {
        self.alpha_d..2 * self.alpha_d
    }

    fn bc_start(&self) -> usize {
        2 * self.alpha_d
    }

    pub fn b_fwd(&self) -> Range<usize> {
        self.bc_start()..self.bc_start() + self.ng
    }

    pub fn c_fwd(&self) -> Range<usize> {
        self.bc_start() + self.ng..self.bc_start() + 2 * self.ng
    }

    pub fn b_bwd(&self) -> Range<usize> {
        self.bc_start() + 2 * self.ng..self.bc_start() + 3 * self.ng
    }

    pub fn c_bwd(&self) -> Range<usize> {
        self.bc_start() + 3 * self.ng..self.bc_start() + 4 * self.ng
    }

    pub fn dt_fwd(&self) -> Range<usize> {
        let base = self.bc_start() + 4 * self.ng;
        base..base + self.heads
    }

    pub fn dt_bwd(&self) -> Range<usize> {
        let base = self.bc_start() + 4 * self.ng + self.heads;
        base..base + self.heads
    }

    /// Shift a projection range into merged-token coordinates (drop z).
    pub fn in_token(&self, r: Range<usize>) -> Range<usize> {
        r.start - self.alpha_d..r.end - self.alpha_d
    }
}

/// Weights of one cross layer (also reused by the self-attention block).
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// (2αD + 4NG + 2H) × D
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    /// Depthwise causal kernels: (αD + 4NG) × conv_width, taps ordered
    /// oldest to newest.
    pub conv: Array2<f64>,
    /// D × αD
    pub w_out: Array2<f64>,
    /// αD gains inside the gated RMS normalization.
    pub rms_gain: Array1<f64>,
    /// Residual-normalization gain/bias, D each.
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
    pub ssm_fwd: SSMParams,
    pub ssm_bwd: SSMParams,
}

impl LayerParams {
    pub fn seeded(dims: &SSMDims, conv_width: usize, rng: &mut CounterRng) -> LayerParams {
        let layout = SliceLayout::from_dims(dims);
        let d = dims.model_dim;
        let alpha_d = dims.inner_dim();
        let in_scale = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (alpha_d as f64).sqrt();
        let mut w_rng = rng.substream("w_in");
        let w_in =
            Array2::from_shape_fn((layout.in_proj_width(), d), |_| w_rng.normal() * in_scale);
        let mut b_rng = rng.substream("b_in");
        let b_in = Array1::from_shape_fn(layout.in_proj_width(), |_| b_rng.normal() * 0.02);
        let mut c_rng = rng.substream("conv");
        let conv_scale = 1.0 / (conv_width as f64).sqrt();
        let conv = Array2::from_shape_fn((layout.conv_channels(), conv_width), |_| {
            c_rng.uniform(-conv_scale, conv_scale)
        });
        let mut o_rng = rng.substream("w_out");
        let w_out = Array2::from_shape_fn((d, alpha_d), |_| o_rng.normal() * out_scale);
        let mut f_rng = rng.substream("ssm_fwd");
        let mut b2_rng = rng.substream("ssm_bwd");
        LayerParams {
            w_in,
            b_in,
            conv,
            w_out,
            rms_gain: Array1::ones(alpha_d),
            norm_gain: Array1::ones(d),
            norm_bias: Array1::zeros(d),
            ssm_fwd: SSMParams::seeded(dims.heads, &mut f_rng),
            ssm_bwd: SSMParams::seeded(dims.heads, &mut b2_rng),
        }
    }

    pub fn validate(&self, dims: &SSMDims, conv_width: usize) -> Result<()> {
        let layout = SliceLayout::from_dims(dims);
        if self.w_in.dim() != (layout.in_proj_width(), dims.model_dim) {
            return Err(Error::shape(
                "w_in",
                format!("{:?}", (layout.in_proj_width(), dims.model_dim)),
                format!("{:?}", self.w_in.dim()),
            ));
        }
        if self.b_in.len() != layout.in_proj_width()
            || self.conv.dim() != (layout.conv_channels(), conv_width)
            || self.w_out.dim() != (dims.model_dim, dims.inner_dim())
            || self.rms_gain.len() != dims.inner_dim()
            || self.norm_gain.len() != dims.model_dim
            || self.norm_bias.len() != dims.model_dim
        {
            return Err(Error::shape("layer params", "consistent widths", "mismatch"));
        }
        self.ssm_fwd.validate()?;
        self.ssm_bwd.validate()?;
        Ok(())
    }
}

fn check_finite(stage: &'static str, values: &Array2<f64>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { stage });
    }
    Ok(())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Row-wise RMS normalization scaled by a gain vector.
fn rms_norm_rows(rows: &mut Array2<f64>, gain: &Array1<f64>) {
    for mut row in rows.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + TOL.rms_eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * inv * g;
        }
    }
}

/// Row-wise layer normalization with gain and bias.
fn layer_norm_rows(rows: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = rows.clone();
    for mut row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (var + TOL.rms_eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.iter()).zip(bias.iter()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// The gate applied to extracted scan outputs: y ⊙ silu(z), RMS-normalized
/// and gained when the config's norm mode asks for it.
fn gate_rows(y: &mut Array2<f64>, z: &Array2<f64>, rms: bool, gain: &Array1<f64>) {
    debug_assert_eq!(y.dim(), z.dim());
    for (mut row, zrow) in y.rows_mut().into_iter().zip(z.rows()) {
        for (v, zv) in row.iter_mut().zip(zrow.iter()) {
            *v *= silu(*zv);
        }
    }
    if rms {
        rms_norm_rows(y, gain);
    }
}

/// Depthwise causal convolution over the first `conv.nrows()` channels of
/// the stream, left zero padding; remaining channels pass through.
fn depthwise_causal_conv(stream: &mut Array2<f64>, conv: &Array2<f64>) {
    let width = conv.ncols();
    if width == 1 {
        for c in 0..conv.nrows() {
            let k = conv[[c, 0]];
            for t in 0..stream.nrows() {
                stream[[t, c]] *= k;
            }
        }
        return;
    }
    let l = stream.nrows();
    for c in 0..conv.nrows() {
        let col: Vec<f64> = (0..l).map(|t| stream[[t, c]]).collect();
        for t in 0..l {
            let mut acc = 0.0;
            for k in 0..width {
                // Tap k reads position t - (width-1) + k.
                let idx = t as i64 - (width as i64 - 1) + k as i64;
                if idx >= 0 {
                    acc += conv[[c, k]] * col[idx as usize];
                }
            }
            stream[[t, c]] = acc;
        }
    }
}

/// Masked input projection: one shared weight, token kind decides which
/// slices are kept. Returns the query z branch, the query x/B/C block and
/// the value x/B/C/dt block, with the configured zero flags applied.
pub fn project_inputs(
    q: &Array2<f64>,
    v: &Array2<f64>,
    params: &LayerParams,
    config: &LayerConfig,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    config.validate()?;
    params.validate(&config.dims, config.conv_width)?;
    let layout = SliceLayout::from_dims(&config.dims);
    let d = config.dims.model_dim;
    if q.ncols() != d || v.ncols() != d {
        return Err(Error::shape("project_inputs", d, q.ncols().max(v.ncols())));
    }
    let q_full = apply_in_proj(q, params);
    let v_full = apply_in_proj(v, params);

    let q_z = q_full.slice(s![.., layout.z()]).to_owned();
    let mut q_xbc = q_full
        .slice(s![.., layout.x().start..layout.dt_fwd().start])
        .to_owned();
    if config.zero_bq {
        let off = layout.alpha_d; // ranges relative to x start
        q_xbc
            .slice_mut(s![.., off..off + layout.ng])
            .fill(0.0);
        q_xbc
            .slice_mut(s![.., off + 2 * layout.ng..off + 3 * layout.ng])
            .fill(0.0);
    }
    let mut v_xbcdt = v_full
        .slice(s![.., layout.x().start..layout.in_proj_width()])
        .to_owned();
    if config.zero_cv {
        let off = layout.alpha_d;
        v_xbcdt
            .slice_mut(s![.., off + layout.ng..off + 2 * layout.ng])
            .fill(0.0);
        v_xbcdt
            .slice_mut(s![.., off + 3 * layout.ng..off + 4 * layout.ng])
            .fill(0.0);
    }
    Ok((q_z, q_xbc, v_xbcdt))
}

fn apply_in_proj(tokens: &Array2<f64>, params: &LayerParams) -> Array2<f64> {
    tokens.dot(&params.w_in.t()) + &params.b_in
}

/// Merged stream for one (camera, traversal) pass plus metadata the layer
/// needs to put outputs back.
struct CameraStream {
    merged: MergedSequence,
    /// BEV query id per copy, original hit order.
    extract_ids: Vec<usize>,
}

/// Hits of one camera in row-major (query, pillar) order.
fn camera_hits(refs: &ReferencePointSet, cam: usize) -> (Vec<usize>, Vec<(f64, f64)>) {
    let hits = &refs.hits[cam];
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for q in 0..hits.nrows() {
        for k in 0..hits.ncols() {
            if hits[[q, k]] {
                ids.push(q);
                points.push((refs.uv[cam][[q, k, 0]], refs.uv[cam][[q, k, 1]]));
            }
        }
    }
    (ids, points)
}

#[allow(clippy::too_many_arguments)]
fn build_camera_stream(
    layout: &SliceLayout,
    v_xbcdt: &Array2<f64>,
    q_tokens: &Array2<f64>,
    points: &[(f64, f64)],
    extract_ids: &[usize],
    h_f: usize,
    w_f: usize,
    order: &TraversalOrder,
    config: &LayerConfig,
    conv: &Array2<f64>,
) -> Result<CameraStream> {
    let perm = flatten_permutation(h_f, w_f, order)?;
    let v_count = v_xbcdt.nrows();
    let m_count = q_tokens.nrows();
    // Reorder value rows into traversal order.
    let mut values = v_xbcdt.select(Axis(0), perm.inverse_slice());

    let positions: Vec<usize> = match config.insertion_mode {
        InsertionMode::Project => {
            let r_1d = refpoints_to_1d(points, h_f, w_f, &perm)?;
            index_offset(&r_1d, v_count)?
        }
        InsertionMode::Append => (v_count..v_count + m_count).collect(),
        InsertionMode::Prepend => (0..m_count).collect(),
    };

    let merged = match config.merge_order {
        MergeOrder::BeforeConv => {
            let mut merged = build_merged(values.view(), q_tokens.view(), &positions, extract_ids)?;
            depthwise_causal_conv(&mut merged.stream, conv);
            merged
        }
        MergeOrder::AfterConv => {
            depthwise_causal_conv(&mut values, conv);
            build_merged(values.view(), q_tokens.view(), &positions, extract_ids)?
        }
    };
    let _ = layout;
    Ok(CameraStream {
        merged,
        extract_ids: extract_ids.to_vec(),
    })
}

fn stream_to_scan_input(layout: &SliceLayout, merged: &MergedSequence) -> XQSSMInput {
    let st = &merged.stream;
    let x = st.slice(s![.., layout.in_token(layout.x())]).to_owned();
    let b_f = st.slice(s![.., layout.in_token(layout.b_fwd())]).to_owned();
    let c_f = st.slice(s![.., layout.in_token(layout.c_fwd())]).to_owned();
    let b_b = st.slice(s![.., layout.in_token(layout.b_bwd())]).to_owned();
    let c_b = st.slice(s![.., layout.in_token(layout.c_bwd())]).to_owned();
    let dt_f = st.slice(s![.., layout.in_token(layout.dt_fwd())]).to_owned();
    let dt_b = st.slice(s![.., layout.in_token(layout.dt_bwd())]).to_owned();
    XQSSMInput::from_forward_slices(&x, &b_f, &c_f, &dt_f, &b_b, &c_b, &dt_b, merged.s_mask.clone())
}

/// Deterministic dropout mask stream; only active when the configured rate
/// is nonzero.
fn apply_dropout(update: &mut Array2<f64>, rate: f64) {
    if rate <= 0.0 {
        return;
    }
    let mut rng = CounterRng::new(0x5EED_D80F);
    let keep = 1.0 - rate;
    for v in update.iter_mut() {
        if rng.next_f64() < rate {
            *v = 0.0;
        } else {
            *v /= keep;
        }
    }
}

/// Full cross-layer forward pass.
///
/// `feature_maps` holds one H_f×W_f×D map per camera; `refs` must come from
/// the same rig and BEV grid as `q` (one row per BEV query).
pub fn spatial_cross_mamba_forward(
    q: &Array2<f64>,
    feature_maps: &[Array3<f64>],
    refs: &ReferencePointSet,
    params: &LayerParams,
    config: &LayerConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    params.validate(&config.dims, config.conv_width)?;
    let dims = &config.dims;
    let layout = SliceLayout::from_dims(dims);
    if refs.num_cameras() != feature_maps.len() {
        return Err(Error::Contract(format!(
            "{} cameras in refs but {} feature maps",
            refs.num_cameras(),
            feature_maps.len()
        )));
    }
    if refs.num_queries() != q.nrows() {
        return Err(Error::Contract(format!(
            "{} queries in refs but {} query rows",
            refs.num_queries(),
            q.nrows()
        )));
    }

    // Shared projection for queries, once.
    let q_full = apply_in_proj(q, params);
    check_finite("project_queries", &q_full)?;
    let q_z = q_full.slice(s![.., layout.z()]).to_owned();
    let mut q_xbc = q_full
        .slice(s![.., layout.x().start..layout.dt_fwd().start])
        .to_owned();
    if config.zero_bq {
        let off = layout.alpha_d;
        q_xbc.slice_mut(s![.., off..off + layout.ng]).fill(0.0);
        q_xbc
            .slice_mut(s![.., off + 2 * layout.ng..off + 3 * layout.ng])
            .fill(0.0);
    }
    // dt slice for queries: zeros under the default mask, projected when the
    // dt_Q ablation turns the mask off.
    let q_dt: Array2<f64> = if config.zero_dtq {
        Array2::zeros((q.nrows(), 2 * layout.heads))
    } else {
        q_full
            .slice(s![.., layout.dt_fwd().start..layout.in_proj_width()])
            .to_owned()
    };
    // Query token rows in merged-stream layout: [x|B|C|dt].
    let q_tokens_all =
        ndarray::concatenate(Axis(1), &[q_xbc.view(), q_dt.view()]).expect("widths add up");

    let scan_opts = MaskedScanOptions {
        pin_query_dt: config.zero_dtq,
        emit_all: matches!(config.extract_order, ExtractOrder::AfterGate),
    };

    let mut q_y = Array2::zeros((q.nrows(), dims.inner_dim()));

    for (cam, map) in feature_maps.iter().enumerate() {
        let (h_f, w_f, d) = map.dim();
        if d != dims.model_dim {
            return Err(Error::shape("feature map depth", dims.model_dim, d));
        }
        let flat = map
            .to_shape((h_f * w_f, d))
            .map_err(|_| Error::shape("feature map", "contiguous", "non-contiguous"))?
            .to_owned();
        let v_full = apply_in_proj(&flat, params);
        check_finite("project_values", &v_full)?;
        let mut v_xbcdt = v_full
            .slice(s![.., layout.x().start..layout.in_proj_width()])
            .to_owned();
        if config.zero_cv {
            let off = layout.alpha_d;
            v_xbcdt
                .slice_mut(s![.., off + layout.ng..off + 2 * layout.ng])
                .fill(0.0);
            v_xbcdt
                .slice_mut(s![.., off + 3 * layout.ng..off + 4 * layout.ng])
                .fill(0.0);
        }

        let (ids, points) = camera_hits(refs, cam);
        if ids.is_empty() {
            continue;
        }
        let q_tokens = q_tokens_all.select(Axis(0), &ids);

        for order in &config.traversals {
            let stream = build_camera_stream(
                &layout, &v_xbcdt, &q_tokens, &points, &ids, h_f, w_f, order, config,
                &params.conv,
            )?;
            check_finite("conv", &stream.merged.stream)?;
            let scan_in = stream_to_scan_input(&layout, &stream.merged);
            let y = masked_scan(dims, &scan_in, &params.ssm_fwd, &params.ssm_bwd, scan_opts)?;
            check_finite("scan", &y)?;

            // Per-copy gated outputs, in the copies' original hit order.
            let m_count = stream.extract_ids.len();
            let mut copy_rows = Array2::zeros((m_count, dims.inner_dim()));
            match config.extract_order {
                ExtractOrder::BeforeGate => {
                    // Scan emitted query rows in stream-occurrence order.
                    let mut occ: Vec<usize> = (0..m_count).collect();
                    occ.sort_by_key(|&i| stream.merged.insert_positions[i]);
                    for (row, &copy) in occ.iter().enumerate() {
                        copy_rows.row_mut(copy).assign(&y.row(row));
                    }
                    let z = q_z.select(Axis(0), &stream.extract_ids);
                    gate_rows(
                        &mut copy_rows,
                        &z,
                        config.norm_mode.rms_normalizes(),
                        &params.rms_gain,
                    );
                }
                ExtractOrder::AfterGate => {
                    // Scan emitted the whole stream; gate it (value rows get
                    // z = 0) then pick the query rows.
                    let mut z_stream = Array2::zeros((stream.merged.len(), dims.inner_dim()));
                    for (copy, &pos) in stream.merged.insert_positions.iter().enumerate() {
                        z_stream
                            .row_mut(pos)
                            .assign(&q_z.row(stream.extract_ids[copy]));
                    }
                    let mut gated = y;
                    gate_rows(
                        &mut gated,
                        &z_stream,
                        config.norm_mode.rms_normalizes(),
                        &params.rms_gain,
                    );
                    for (copy, &pos) in stream.merged.insert_positions.iter().enumerate() {
                        copy_rows.row_mut(copy).assign(&gated.row(pos));
                    }
                }
            }
            check_finite("gate", &copy_rows)?;

            // Accumulate copies into their BEV cells.
            for (copy, &qid) in stream.extract_ids.iter().enumerate() {
                let mut row = q_y.row_mut(qid);
                row += &copy_rows.row(copy);
            }
        }
    }
    check_finite("accumulate", &q_y)?;

    // Hit-count averaging (count never below 1).
    if config.norm_mode.averages() {
        let counts = refs.hits_per_query();
        for (qid, &count) in counts.iter().enumerate() {
            let c = (count.max(1)) as f64;
            let mut row = q_y.row_mut(qid);
            row /= c;
        }
    }

    let mut update = q_y.dot(&params.w_out.t());
    apply_dropout(&mut update, config.dropout);
    let out = layer_norm_rows(&(q + &update), &params.norm_gain, &params.norm_bias);
    check_finite("residual", &out)?;
    Ok(out)
}

/// Append/prepend insertion baselines: query copies after (or before) the
/// flattened features, with the mask and extract bookkeeping built the same
/// way as the position-aware merge.
pub fn insertion_baselines(
    values_flat: &Array2<f64>,
    query_tokens: &Array2<f64>,
    extract_ids: &[usize],
    mode: InsertionMode,
) -> Result<MergedSequence> {
    let v_count = values_flat.nrows();
    let m_count = query_tokens.nrows();
    let positions: Vec<usize> = match mode {
        InsertionMode::Append => (v_count..v_count + m_count).collect(),
        InsertionMode::Prepend => (0..m_count).collect(),
        InsertionMode::Project => {
            return Err(Error::Contract(
                "insertion_baselines requires append or prepend".into(),
            ))
        }
    };
    build_merged(values_flat.view(), query_tokens.view(), &positions, extract_ids)
}

/// Bidirectional self-attention block over the BEV grid: pre-norm, shared
/// input projection, depthwise causal convolution, quasiseparable
/// bidirectional scan (shifted directions, skip diagonal), gated RMS, output
/// projection, residual. With `w_out = 0` the block is exactly the identity.
pub fn hydra_self_attention(
    grid: &Array3<f64>,
    params: &LayerParams,
    dims: &SSMDims,
    conv_width: usize,
) -> Result<Array3<f64>> {
    dims.validate()?;
    params.validate(dims, conv_width)?;
    let (h_bev, w_bev, d) = grid.dim();
    if d != dims.model_dim {
        return Err(Error::shape("hydra grid depth", dims.model_dim, d));
    }
    let layout = SliceLayout::from_dims(dims);
    let tokens = grid
        .to_shape((h_bev * w_bev, d))
        .map_err(|_| Error::shape("hydra grid", "contiguous", "non-contiguous"))?
        .to_owned();

    let normed = layer_norm_rows(&tokens, &params.norm_gain, &params.norm_bias);
    let full = apply_in_proj(&normed, params);
    check_finite("hydra_project", &full)?;

    let z = full.slice(s![.., layout.z()]).to_owned();
    let mut xbcdt = full
        .slice(s![.., layout.x().start..layout.in_proj_width()])
        .to_owned();
    depthwise_causal_conv(&mut xbcdt, &params.conv);
    check_finite("hydra_conv", &xbcdt)?;

    let l = tokens.nrows();
    let take = |r: Range<usize>| xbcdt.slice(s![.., layout.in_token(r)]).to_owned();
    let seq_fwd = SequenceBatch {
        x: take(layout.x()),
        b_in: take(layout.b_fwd()),
        c_in: take(layout.c_fwd()),
        dt: take(layout.dt_fwd()),
    };
    let seq_bwd = SequenceBatch {
        x: take(layout.x()),
        b_in: take(layout.b_bwd()),
        c_in: take(layout.c_bwd()),
        dt: take(layout.dt_bwd()),
    };

    // Quasiseparable combination with per-direction projections: shifted
    // causal scans plus the skip diagonal (mean of the two skip vectors).
    let zero = ScanState::zeros(dims);
    let (y_f, _) = scan_recurrent(dims, &seq_fwd, &params.ssm_fwd.without_skip(), &zero)?;
    let (y_b, _) = scan_recurrent(
        dims,
        &seq_bwd.reversed(),
        &params.ssm_bwd.without_skip(),
        &zero,
    )?;
    let shift = |y: &Array2<f64>| {
        let mut out = Array2::zeros(y.raw_dim());
        if y.nrows() > 1 {
            out.slice_mut(s![1.., ..]).assign(&y.slice(s![..-1, ..]));
        }
        out
    };
    let mut y = shift(&y_f) + shift(&y_b).slice(s![..;-1, ..]).to_owned();
    for head in 0..dims.heads {
        let skip = 0.5 * (params.ssm_fwd.skip_d[head] + params.ssm_bwd.skip_d[head]);
        for p in 0..dims.head_dim {
            let ch = head * dims.head_dim + p;
            for t in 0..l {
                y[[t, ch]] += skip * seq_fwd.x[[t, ch]];
            }
        }
    }
    check_finite("hydra_scan", &y)?;

    gate_rows(&mut y, &z, true, &params.rms_gain);
    let update = y.dot(&params.w_out.t());
    let out_tokens = tokens + update;
    check_finite("hydra_residual", &out_tokens)?;
    Ok(out_tokens
        .to_shape((h_bev, w_bev, d))
        .expect("same element count")
        .to_owned())
}
