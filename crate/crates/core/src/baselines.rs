//! Reference cross-attention implementations and analytic complexity
//! estimators.
//!
//! Three module families are modeled, matching the scaling study driven by
//! the CLI `flops` subcommand:
//!
//! * dot-product cross attention — quadratic in Q·V;
//! * final-state SSM readout (`y_i = C_i h_T`) — the naive linear-attention
//!   adaptation whose fidelity requires a state as large as the sequence;
//! * deformable attention — sparse bilinear sampling around reference
//!   points.
//!
//! FLOP conventions: one multiply-add counts as 2 FLOPs in the dense
//! estimators; the cross-scan total reuses [`xqssm_flops`]'s operation
//! counts. Only ratios between configurations are meaningful across
//! families.

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{scan_recurrent, ScanState, SSMDims, SSMParams, SequenceBatch};
use crate::xqssm::xqssm_flops;

/// Row-wise softmax attention weights softmax(Q·Kᵀ/√D); exposed so tests can
/// assert row-stochasticity directly.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape("attention_weights", q.ncols(), k.ncols()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(scores)
}

/// Single-head dot-product cross attention: softmax(QKᵀ/√D)·V.
pub fn dot_product_xattn(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::shape("dot_product_xattn", k.nrows(), v.nrows()));
    }
    Ok(attention_weights(q, k)?.dot(v))
}

/// Naive SSM cross attention: run the scan over all value tokens, keep only
/// the final state, and read `y_i = C_i h_T` for each query-derived C row
/// (per head, groups expanded as in the scan).
pub fn naive_mamba_xattn(
    dims: &SSMDims,
    values: &SequenceBatch,
    params: &SSMParams,
    c_rows: &Array2<f64>,
) -> Result<Array2<f64>> {
    if c_rows.ncols() != dims.bc_width() {
        return Err(Error::shape("naive_mamba_xattn", dims.bc_width(), c_rows.ncols()));
    }
    let (_, fin) = scan_recurrent(dims, values, params, &ScanState::zeros(dims))?;
    let (heads, p_dim, n_dim) = (dims.heads, dims.head_dim, dims.state_dim);
    let hpg = dims.heads_per_group();
    let mut y = Array2::zeros((c_rows.nrows(), dims.inner_dim()));
    for (i, c) in c_rows.rows().into_iter().enumerate() {
        for head in 0..heads {
            let g = head / hpg;
            for p in 0..p_dim {
                let mut acc = 0.0;
                for n in 0..n_dim {
                    acc += c[g * n_dim + n] * fin.h[[head, p, n]];
                }
                y[[i, head * p_dim + p]] = acc;
            }
        }
    }
    Ok(y)
}

/// Bilinear sample of a H×W×D map at continuous pixel coordinates
/// (px, py); out-of-bounds taps read zero.
fn bilinear_sample(map: &Array3<f64>, px: f64, py: f64, out: &mut [f64], weight: f64) {
    let (h, w, d) = map.dim();
    debug_assert_eq!(out.len(), d);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let taps = [
        (y0 as i64, x0 as i64, (1.0 - fy) * (1.0 - fx)),
        (y0 as i64, x0 as i64 + 1, (1.0 - fy) * fx),
        (y0 as i64 + 1, x0 as i64, fy * (1.0 - fx)),
        (y0 as i64 + 1, x0 as i64 + 1, fy * fx),
    ];
    for (r, c, tw) in taps {
        if tw == 0.0 || r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            continue;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o += weight * tw * map[[r as usize, c as usize, k]];
        }
    }
}

/// Deformable cross attention over one feature map: for each query, sample
/// the map at `ref + offset` (all in normalized coordinates; pixel centers
/// sit at `((c+½)/W, (r+½)/H)`) and take the weighted sum. Each query's
/// weights must sum to 1 over its reference points and offsets.
pub fn deformable_xattn(
    value_map: &Array3<f64>,
    refs: &Array2<f64>,
    offsets: &Array4<f64>,
    weights: &Array3<f64>,
) -> Result<Array2<f64>> {
    let (h_f, w_f, d) = value_map.dim();
    let q_count = refs.nrows();
    let (qo, p_ref, r_off, two) = offsets.dim();
    if refs.ncols() != 2 || two != 2 {
        return Err(Error::shape("deformable_xattn refs", 2, refs.ncols().max(two)));
    }
    if qo != q_count || weights.dim() != (q_count, p_ref, r_off) {
        return Err(Error::shape(
            "deformable_xattn weights",
            format!("({q_count}, {p_ref}, {r_off})"),
            format!("{:?}", weights.dim()),
        ));
    }
    for (q, row) in weights.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "weights of query {q} sum to {sum}, expected 1"
            )));
        }
    }
    let mut out = Array2::zeros((q_count, d));
    for q in 0..q_count {
        let mut acc = vec![0.0f64; d];
        for p in 0..p_ref {
            for r in 0..r_off {
                let u = refs[[q, 0]] + offsets[[q, p, r, 0]];
                let v = refs[[q, 1]] + offsets[[q, p, r, 1]];
                let px = u * w_f as f64 - 0.5;
                let py = v * h_f as f64 - 0.5;
                bilinear_sample(value_map, px, py, &mut acc, weights[[q, p, r]]);
            }
        }
        out.row_mut(q).assign(&ArrayView1::from(&acc));
    }
    Ok(out)
}

/// Sizes a scaling scenario is evaluated at.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    /// BEV grid side sizes; Q = bev_h·bev_w.
    pub bev_h: usize,
    pub bev_w: usize,
    /// Source image size in pixels.
    pub img_w: usize,
    pub img_h: usize,
    /// Feature stride: value tokens per camera = ⌊img_w/s⌋·⌊img_h/s⌋.
    pub feature_stride: usize,
    pub num_cameras: usize,
    /// Pillar points per query; the analytic merge count is M = Z·Q.
    pub pillar_points: usize,
    pub dims: SSMDims,
    /// Deformable: reference points per query.
    pub ref_points: usize,
    /// Deformable: sampling offsets per reference point.
    pub offsets_per_ref: usize,
    /// Deformable: attention heads (M_h; renamed from the usual head-count
    /// symbol to avoid clashing with the merge count M).
    pub attn_heads: usize,
}

impl ComplexityConfig {
    pub fn queries(&self) -> u64 {
        (self.bev_h * self.bev_w) as u64
    }

    /// Value tokens across all cameras.
    pub fn value_tokens(&self) -> u64 {
        let per_cam = (self.img_w / self.feature_stride) * (self.img_h / self.feature_stride);
        (per_cam * self.num_cameras) as u64
    }

    /// Analytic merge count: every pillar point of every query hits exactly
    /// one camera.
    pub fn merged_queries(&self) -> u64 {
        self.pillar_points as u64 * self.queries()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.bev_h * self.bev_w == 0
            || self.img_w * self.img_h == 0
            || self.feature_stride == 0
            || self.num_cameras == 0
            || self.pillar_points == 0
            || self.ref_points == 0
            || self.offsets_per_ref == 0
            || self.attn_heads == 0
        {
            return Err(Error::InvalidSpec(
                "complexity config sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One module family's analytic totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuleEstimate {
    pub module: String,
    pub flops: u64,
    pub params: u64,
    pub est_memory_bytes: u64,
}

/// Config echo plus per-module estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub q: u64,
    pub v: u64,
    pub m: u64,
    pub model_dim: usize,
    pub state_dim: usize,
    pub heads: usize,
    pub ref_points: usize,
    pub offsets_per_ref: usize,
    pub modules: Vec<ModuleEstimate>,
}

impl ComplexityReport {
    pub fn module(&self, name: &str) -> Option<&ModuleEstimate> {
        self.modules.iter().find(|m| m.module == name)
    }

    /// CSV rows `module,Q,V,params,flops,est_memory_bytes`.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for m in &self.modules {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.module, self.q, self.v, m.params, m.flops, m.est_memory_bytes
            ));
        }
        out
    }

    pub const CSV_HEADER: &'static str = "module,Q,V,params,flops,est_memory_bytes";
}

const BYTES_F32: u64 = 4;

/// Analytic FLOP/parameter/memory estimates for the three cross-attention
/// families at one configuration.
///
/// Dot product: projections 4D²(Q+V) plus attention 4QVD + 3QV; attention
/// matrix memory ∝ Q·V. Deformable:
/// 2QD² + min(HWD², QPRD²) + 5QPRD + 3Q·M_h·PRD. Cross-scan: the
/// [`xqssm_flops`] total plus in/out projections; memory linear in (V+M).
pub fn complexity_report(config: &ComplexityConfig) -> Result<ComplexityReport> {
    config.validate()?;
    let q = config.queries();
    let v = config.value_tokens();
    let m = config.merged_queries();
    let d = config.dims.model_dim as u64;
    let n = config.dims.state_dim as u64;
    let h = config.dims.heads as u64;
    let g = config.dims.groups as u64;
    let alpha_d = config.dims.inner_dim() as u64;
    let p_ref = config.ref_points as u64;
    let r_off = config.offsets_per_ref as u64;
    let m_h = config.attn_heads as u64;

    // Dot product cross attention.
    let dot_flops = 4 * d * d * (q + v) + 4 * q * v * d + 3 * q * v;
    let dot_params = 4 * d * d + 4 * d;
    let dot_memory = (q * v + (q + v) * d) * BYTES_F32;

    // Cross quasiseparable scan (in/out projections + scan totals).
    let in_width = 2 * alpha_d + 4 * n * g + 2 * h;
    let xq_proj =
        2 * v * d * (alpha_d + 4 * n * g + 2 * h) + 2 * q * d * in_width + 2 * q * alpha_d * d;
    let xq_flops = xq_proj + xqssm_flops(v, m, h, n, alpha_d).total;
    let xq_params = d * in_width + in_width + alpha_d * d + alpha_d + h * 3;
    let xq_memory =
        ((v + m) * (alpha_d + 4 * n * g + 2 * h) + 2 * alpha_d * n) * BYTES_F32;

    // Deformable attention (Q plays the query-count role in the formula).
    let hw = v;
    let deform_flops = 2 * q * d * d
        + (hw * d * d).min(q * p_ref * r_off * d * d)
        + 5 * q * p_ref * r_off * d
        + 3 * q * m_h * p_ref * r_off * d;
    let deform_params = 2 * d * d + d * m_h * p_ref * r_off * 3 + 2 * d;
    let deform_memory = (v * d + q * (p_ref * r_off * 3 + d)) * BYTES_F32;

    Ok(ComplexityReport {
        q,
        v,
        m,
        model_dim: config.dims.model_dim,
        state_dim: config.dims.state_dim,
        heads: config.dims.heads,
        ref_points: config.ref_points,
        offsets_per_ref: config.offsets_per_ref,
        modules: vec![
            ModuleEstimate {
                module: "dot_product".into(),
                flops: dot_flops,
                params: dot_params,
                est_memory_bytes: dot_memory,
            },
            ModuleEstimate {
                module: "xqssm".into(),
                flops: xq_flops,
                params: xq_params,
                est_memory_bytes: xq_memory,
            },
            ModuleEstimate {
                module: "deformable".into(),
                flops: deform_flops,
                params: deform_params,
                est_memory_bytes: deform_memory,
            },
        ],
    })
}

/// The three (BEV scale, image size) rows of the scaling study, with the
/// module geometry the estimators assume (D=256, α=4, N=32, H=8, stride 32,
/// 6 cameras, Z=4, 4 reference points × 8 offsets, 8 heads).
pub fn scaling_study_configs() -> Vec<ComplexityConfig> {
    [
        (50usize, 800usize, 450usize),
        (100, 1280, 720),
        (200, 1600, 900),
    ]
    .into_iter()
    .map(|(bev, img_w, img_h)| ComplexityConfig {
        bev_h: bev,
        bev_w: bev,
        img_w,
        img_h,
        feature_stride: 32,
        num_cameras: 6,
        pillar_points: 4,
        dims: SSMDims::new(256, 4.0, 8, 128, 32, 1).expect("static dims"),
        ref_points: 4,
        offsets_per_ref: 8,
        attn_heads: 8,
    })
    .collect()
}

/// Reference GFLOPs for the scaling study rows; columns are
/// (dot product, cross-scan, deformable). Used to check estimator ratios.
pub const SCALING_REFERENCE_GFLOPS: [[f64; 3]; 3] = [
    [23.9, 3.7, 3.3],
    [228.8, 14.0, 12.8],
    [1432.5, 51.0, 49.5],
];
