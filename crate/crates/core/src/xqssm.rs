//! Cross quasiseparable state-space scan.
//!
//! A merged stream interleaves image-feature tokens (s_mask = true) with
//! query tokens. Per direction, feature tokens update the hidden state
//! exactly like a causal selective scan; query tokens read `y = C·h` with a
//! discretization step pinned to exactly 0, so
//!
//! ```text
//!   h_t = exp(0·A) h_{t-1} + 0·B_t x_t = h_{t-1}
//! ```
//!
//! and the state is bit-identical across every query token. The pin happens
//! at the Δ level (softplus is bypassed), because softplus(dt_bias) alone
//! would never be zero. Forward and backward scans run over the same tokens
//! in opposite orders with independent parameters and projection slices; the
//! two readouts for the same query copy are summed, forward first.
//!
//! ## Counted operations
//!
//! [`xqssm_recurrent_instrumented`] counts work in multiply-accumulate
//! equivalents, incremented by the branch each token actually executes:
//!
//! * per-head decay evaluation (softplus, multiply, exp) — 1 op;
//! * per-head input-gain row `Δ·B` — N ops;
//! * one fused state-element update `h ← dA·h + (ΔB)x` — 1 op, `αD·N` per
//!   feature token per direction;
//! * one readout MAC `C·h` — 1 op, `αD·N` per query token per direction.
//!
//! Direction-combination additions and downstream index-adds are pure adds
//! and are not counted. Feature tokens therefore cost
//! `H(N+1) + αD·N` per direction, exactly the analytic per-feature term of
//! [`xqssm_flops`]; see the analytic model's docs for how the per-query
//! readout compares.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::ssm::{softplus, SSMDims, SSMParams};

/// Directional token stream for the cross-scan. Direction 0 is the merged
/// (forward) token order; direction 1 holds the same tokens in reversed
/// order with that direction's own projection slices. `s_mask` is stored in
/// forward order and read reversed by direction 1.
#[derive(Debug, Clone)]
pub struct XQSSMInput {
    /// 2 × L × (α·D); both directions carry the same signal, reversed in [1].
    pub x: Array3<f64>,
    /// 2 × L × (N·G)
    pub b_in: Array3<f64>,
    /// 2 × L × (N·G)
    pub c_in: Array3<f64>,
    /// 2 × L × H (raw dt, pre-softplus; ignored at query tokens)
    pub dt: Array3<f64>,
    /// Forward-order mask; true = image-feature token.
    pub s_mask: Vec<bool>,
}

impl XQSSMInput {
    /// Build the two-direction input from forward-order slices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_forward_slices(
        x: &Array2<f64>,
        b_fwd: &Array2<f64>,
        c_fwd: &Array2<f64>,
        dt_fwd: &Array2<f64>,
        b_bwd: &Array2<f64>,
        c_bwd: &Array2<f64>,
        dt_bwd: &Array2<f64>,
        s_mask: Vec<bool>,
    ) -> XQSSMInput {
        let rev = |a: &Array2<f64>| a.slice(ndarray::s![..;-1, ..]).to_owned();
        let stack2 = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::stack(Axis(0), &[a.view(), b.view()]).expect("equal shapes")
        };
        XQSSMInput {
            x: stack2(x, &rev(x)),
            b_in: stack2(b_fwd, &rev(b_bwd)),
            c_in: stack2(c_fwd, &rev(c_bwd)),
            dt: stack2(dt_fwd, &rev(dt_bwd)),
            s_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.s_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_mask.is_empty()
    }

    pub fn num_queries(&self) -> usize {
        self.s_mask.iter().filter(|&&m| !m).count()
    }

    pub fn num_values(&self) -> usize {
        self.len() - self.num_queries()
    }

    pub fn validate(&self, dims: &SSMDims) -> Result<()> {
        let l = self.len();
        let checks = [
            ("x", self.x.dim(), (2, l, dims.inner_dim())),
            ("b_in", self.b_in.dim(), (2, l, dims.bc_width())),
            ("c_in", self.c_in.dim(), (2, l, dims.bc_width())),
            ("dt", self.dt.dim(), (2, l, dims.heads)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(name, format!("{want:?}"), format!("{got:?}")));
            }
        }
        Ok(())
    }

    /// Mask as seen by a direction's scan order.
    fn mask_at(&self, direction: usize, j: usize) -> bool {
        if direction == 0 {
            self.s_mask[j]
        } else {
            self.s_mask[self.len() - 1 - j]
        }
    }

    /// Forward-stream query index of the k-th query encountered by a
    /// direction's scan.
    fn query_slot(&self, direction: usize, k: usize, num_queries: usize) -> usize {
        if direction == 0 {
            k
        } else {
            num_queries - 1 - k
        }
    }
}

/// Work and memory accounting for one instrumented run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XqssmRunStats {
    /// Multiply-accumulate equivalents, counted per executed token branch
    /// with the convention in the module docs.
    pub counted_macs: u64,
    /// Auxiliary f64 elements allocated by the scan (hidden state + gain
    /// scratch); independent of the stream length.
    pub aux_elements: usize,
}

/// Optional state probes captured at query tokens: (direction, forward-order
/// position, state before, state after).
pub type QueryStateProbe = (usize, usize, Array3<f64>, Array3<f64>);

/// Behavior switches for [`masked_scan`].
#[derive(Debug, Clone, Copy)]
pub struct MaskedScanOptions {
    /// Pin Δ to exactly 0 at query rows so they leave the state untouched
    /// (the cross-scan law). When false, query rows update state through the
    /// ordinary softplus path like feature tokens.
    pub pin_query_dt: bool,
    /// Emit an output row for every stream position (indexed by forward
    /// position) instead of only the query rows.
    pub emit_all: bool,
}

struct ScanOutcome {
    y: Array2<f64>,
    stats: XqssmRunStats,
    probes: Vec<QueryStateProbe>,
}

fn scan_both_directions(
    dims: &SSMDims,
    input: &XQSSMInput,
    params: [&SSMParams; 2],
    opts: MaskedScanOptions,
    probe_states: bool,
) -> Result<ScanOutcome> {
    dims.validate()?;
    input.validate(dims)?;
    for p in params {
        p.validate()?;
        if p.a_log.len() != dims.heads {
            return Err(Error::shape("xqssm params", dims.heads, p.a_log.len()));
        }
    }
    let l = input.len();
    let m_count = input.num_queries();
    let (heads, p_dim, n_dim) = (dims.heads, dims.head_dim, dims.state_dim);
    let alpha_d = dims.inner_dim();
    let hpg = dims.heads_per_group();

    let out_rows = if opts.emit_all { l } else { m_count };
    let mut y = Array2::zeros((out_rows, alpha_d));
    let mut state = Array3::<f64>::zeros((heads, p_dim, n_dim));
    let mut gain = vec![0.0f64; n_dim];
    let mut stats = XqssmRunStats {
        counted_macs: 0,
        aux_elements: heads * p_dim * n_dim + n_dim,
    };
    let mut probes = Vec::new();

    let update_macs = (heads * (n_dim + 1) + alpha_d * n_dim) as u64;
    let readout_macs = (alpha_d * n_dim) as u64;

    for dir in 0..2 {
        state.fill(0.0);
        let a = params[dir].a();
        let mut encountered = 0usize;
        for j in 0..l {
            let is_value = input.mask_at(dir, j);
            let updates_state = is_value || !opts.pin_query_dt;
            let before = if probe_states && !is_value {
                Some(state.clone())
            } else {
                None
            };
            if updates_state {
                for head in 0..heads {
                    let g = head / hpg;
                    let delta = softplus(input.dt[[dir, j, head]] + params[dir].dt_bias[head]);
                    let dec = (delta * a[head]).exp();
                    for (n, gn) in gain.iter_mut().enumerate() {
                        *gn = delta * input.b_in[[dir, j, g * n_dim + n]];
                    }
                    for p in 0..p_dim {
                        let xv = input.x[[dir, j, head * p_dim + p]];
                        for n in 0..n_dim {
                            state[[head, p, n]] = dec * state[[head, p, n]] + gain[n] * xv;
                        }
                    }
                }
                stats.counted_macs += update_macs;
            }
            let emits = opts.emit_all || !is_value;
            if emits {
                let slot = if opts.emit_all {
                    if dir == 0 {
                        j
                    } else {
                        l - 1 - j
                    }
                } else {
                    input.query_slot(dir, encountered, m_count)
                };
                for head in 0..heads {
                    let g = head / hpg;
                    for p in 0..p_dim {
                        let mut acc = 0.0;
                        for n in 0..n_dim {
                            acc += input.c_in[[dir, j, g * n_dim + n]] * state[[head, p, n]];
                        }
                        y[[slot, head * p_dim + p]] += acc;
                    }
                }
                stats.counted_macs += readout_macs;
            }
            if !is_value {
                encountered += 1;
                if let Some(before) = before {
                    let fwd_pos = if dir == 0 { j } else { l - 1 - j };
                    probes.push((dir, fwd_pos, before, state.clone()));
                }
            }
        }
    }
    Ok(ScanOutcome { y, stats, probes })
}

/// Generalized masked bidirectional scan used by the layer's ablation paths;
/// with `pin_query_dt = true, emit_all = false` this is exactly
/// [`xqssm_recurrent`].
pub fn masked_scan(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
    opts: MaskedScanOptions,
) -> Result<Array2<f64>> {
    Ok(scan_both_directions(dims, input, [fwd, bwd], opts, false)?.y)
}

const CROSS_SCAN_OPTS: MaskedScanOptions = MaskedScanOptions {
    pin_query_dt: true,
    emit_all: false,
};

/// Sequential cross-scan: outputs one row per query copy, ordered by the
/// copies' occurrence in the forward stream, each the sum of the forward and
/// backward readouts.
pub fn xqssm_recurrent(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
) -> Result<Array2<f64>> {
    Ok(scan_both_directions(dims, input, [fwd, bwd], CROSS_SCAN_OPTS, false)?.y)
}

/// [`xqssm_recurrent`] plus the operation counter and allocation accounting.
pub fn xqssm_recurrent_instrumented(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
) -> Result<(Array2<f64>, XqssmRunStats)> {
    let out = scan_both_directions(dims, input, [fwd, bwd], CROSS_SCAN_OPTS, false)?;
    Ok((out.y, out.stats))
}

/// [`xqssm_recurrent`] capturing the hidden state immediately before and
/// after every query token, for checking the dt=0 state-invariance law.
pub fn xqssm_recurrent_with_state_probes(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
) -> Result<(Array2<f64>, Vec<QueryStateProbe>)> {
    let out = scan_both_directions(dims, input, [fwd, bwd], CROSS_SCAN_OPTS, true)?;
    Ok((out.y, out.probes))
}

/// Log-space products over feature-token decays, with underflowed zeros
/// tracked so windows containing a zero decay come out exactly 0.
struct FeatureDecayPrefix {
    cum_log: Vec<f64>,
    zeros: Vec<usize>,
}

impl FeatureDecayPrefix {
    fn new() -> Self {
        FeatureDecayPrefix {
            cum_log: vec![0.0],
            zeros: vec![0],
        }
    }

    fn push(&mut self, da: f64) {
        let last_log = *self.cum_log.last().unwrap();
        let last_zeros = *self.zeros.last().unwrap();
        self.cum_log.push(last_log + if da > 0.0 { da.ln() } else { 0.0 });
        self.zeros.push(last_zeros + usize::from(da == 0.0));
    }

    /// Product of decays pushed in (from, to] (1-based push counts).
    fn product(&self, from: usize, to: usize) -> f64 {
        if self.zeros[to] > self.zeros[from] {
            0.0
        } else {
            (self.cum_log[to] - self.cum_log[from]).exp()
        }
    }
}

/// Matrix-mixer dual of the cross-scan: per direction and head, materialize
/// the M×V mixer `mix[q, v] = Δ_v (C_q·B_v) ∏ dA` over feature tokens between
/// v and q, apply it to the feature signals, and sum directions. Query rows
/// contribute no decay (Δ pinned to 0 makes their factor exp(0) = 1).
pub fn xqssm_parallel(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
) -> Result<Array2<f64>> {
    dims.validate()?;
    input.validate(dims)?;
    let l = input.len();
    let m_count = input.num_queries();
    let v_count = input.num_values();
    let (heads, p_dim, n_dim) = (dims.heads, dims.head_dim, dims.state_dim);
    let hpg = dims.heads_per_group();
    let params = [fwd, bwd];
    let mut y = Array2::zeros((m_count, dims.inner_dim()));

    for dir in 0..2 {
        let a = params[dir].a();
        // Direction-order positions of feature and query tokens.
        let mut value_pos = Vec::with_capacity(v_count);
        let mut query_pos = Vec::with_capacity(m_count);
        for j in 0..l {
            if input.mask_at(dir, j) {
                value_pos.push(j);
            } else {
                query_pos.push(j);
            }
        }
        for head in 0..heads {
            let g = head / hpg;
            let mut decays = FeatureDecayPrefix::new();
            let mut delta_v = Vec::with_capacity(v_count);
            for &j in &value_pos {
                let delta = softplus(input.dt[[dir, j, head]] + params[dir].dt_bias[head]);
                decays.push((delta * a[head]).exp());
                delta_v.push(delta);
            }
            // values_before[k] = how many feature tokens precede query k.
            let mut mixer = Array2::zeros((m_count, v_count));
            for (k, &jq) in query_pos.iter().enumerate() {
                let before = value_pos.partition_point(|&jv| jv < jq);
                let slot = input.query_slot(dir, k, m_count);
                for vi in 0..before {
                    let jv = value_pos[vi];
                    let mut cb = 0.0;
                    for n in 0..n_dim {
                        cb += input.c_in[[dir, jq, g * n_dim + n]]
                            * input.b_in[[dir, jv, g * n_dim + n]];
                    }
                    // Decays of feature tokens strictly after v, up to q.
                    mixer[[slot, vi]] = cb * delta_v[vi] * decays.product(vi + 1, before);
                }
            }
            for slot in 0..m_count {
                for p in 0..p_dim {
                    let ch = head * p_dim + p;
                    let mut acc = 0.0;
                    for (vi, &jv) in value_pos.iter().enumerate() {
                        let w = mixer[[slot, vi]];
                        if w != 0.0 {
                            acc += w * input.x[[dir, jv, ch]];
                        }
                    }
                    y[[slot, ch]] += acc;
                }
            }
        }
    }
    Ok(y)
}

/// Analytic operation counts for the cross-scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XqssmFlops {
    /// Cost of one query readout: αD(N+H+1).
    pub per_query: u64,
    /// Cost of one feature token across both directions: 2H(N+1) + 2αDN.
    pub per_feature: u64,
    /// 2V(H(N+1)+αDN) + MαD(N+H+1).
    pub total: u64,
    /// What a query would cost if it also updated state like a feature
    /// token: 2H(N+1) + αD(3N+H+1).
    pub per_query_unoptimized: u64,
}

/// Operation-count model for a merged stream of V feature tokens and M query
/// copies.
pub fn xqssm_flops(v: u64, m: u64, heads: u64, state: u64, alpha_d: u64) -> XqssmFlops {
    let per_query = alpha_d * (state + heads + 1);
    let per_feature = 2 * heads * (state + 1) + 2 * alpha_d * state;
    let total = 2 * v * (heads * (state + 1) + alpha_d * state) + m * per_query;
    let per_query_unoptimized = 2 * heads * (state + 1) + alpha_d * (3 * state + heads + 1);
    XqssmFlops {
        per_query,
        per_feature,
        total,
        per_query_unoptimized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn scalar_dims() -> SSMDims {
        SSMDims::new(1, 1.0, 1, 1, 1, 1).unwrap()
    }

    fn const_params(heads: usize, a_log: f64, dt_bias: f64) -> SSMParams {
        SSMParams::new(
            Array1::from_elem(heads, a_log),
            Array1::from_elem(heads, dt_bias),
            Array1::zeros(heads),
        )
        .unwrap()
    }

    fn random_input(dims: &SSMDims, l: usize, m: usize, seed: u64) -> XQSSMInput {
        let mut rng = CounterRng::new(seed);
        let fill = |rows: usize, cols: usize, r: &mut CounterRng| {
            Array2::from_shape_fn((rows, cols), |_| r.normal())
        };
        let mut s_mask = vec![true; l];
        let mut placed = 0;
        while placed < m.min(l) {
            let slot = rng.below(l);
            if s_mask[slot] {
                s_mask[slot] = false;
                placed += 1;
            }
        }
        XQSSMInput::from_forward_slices(
            &fill(l, dims.inner_dim(), &mut rng),
            &fill(l, dims.bc_width(), &mut rng),
            &fill(l, dims.bc_width(), &mut rng),
            &fill(l, dims.heads, &mut rng),
            &fill(l, dims.bc_width(), &mut rng),
            &fill(l, dims.bc_width(), &mut rng),
            &fill(l, dims.heads, &mut rng),
            s_mask,
        )
    }

    #[test]
    fn hand_recurrence_forward_contribution() {
        // Two feature tokens drive h to 1.5 (dA=0.5, Δ·B·x=1 each), then a
        // trailing query with C=1 reads 1.5 forward; backward sees the query
        // first, so its contribution is zero.
        let dims = scalar_dims();
        let params = const_params(1, 0.0, 0.0);
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        let x = Array2::from_shape_vec((3, 1), vec![inv_ln2, inv_ln2, 0.0]).unwrap();
        let ones = Array2::ones((3, 1));
        let zeros = Array2::zeros((3, 1));
        let input = XQSSMInput::from_forward_slices(
            &x,
            &ones,
            &ones,
            &zeros,
            &ones,
            &ones,
            &zeros,
            vec![true, true, false],
        );
        let y = xqssm_recurrent(&dims, &input, &params, &params).unwrap();
        assert_eq!(y.dim(), (1, 1));
        assert_abs_diff_eq!(y[[0, 0]], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn leading_query_reads_zero_forward() {
        let dims = scalar_dims();
        let params = const_params(1, 0.0, 0.0);
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        let x = Array2::from_shape_vec((3, 1), vec![0.0, inv_ln2, inv_ln2]).unwrap();
        let ones = Array2::ones((3, 1));
        let zeros = Array2::zeros((3, 1));
        // Zero backward C isolates the forward readout.
        let input = XQSSMInput::from_forward_slices(
            &x,
            &ones,
            &ones,
            &zeros,
            &ones,
            &zeros,
            &zeros,
            vec![false, true, true],
        );
        let y = xqssm_recurrent(&dims, &input, &params, &params).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
    }

    #[test]
    fn all_query_stream_outputs_zero() {
        let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
        let input = random_input(&dims, 6, 6, 7);
        let mut rng = CounterRng::new(8);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let y = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
        assert_eq!(y.dim(), (6, dims.inner_dim()));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_query_set_gives_empty_output() {
        let dims = scalar_dims();
        let params = const_params(1, 0.0, 0.0);
        let input = random_input(&dims, 5, 0, 9);
        let y = xqssm_recurrent(&dims, &input, &params, &params).unwrap();
        assert_eq!(y.dim(), (0, 1));
        let y = xqssm_parallel(&dims, &input, &params, &params).unwrap();
        assert_eq!(y.dim(), (0, 1));
    }

    #[test]
    fn query_token_signal_is_ignored() {
        // Query rows' x and dt never enter the computation.
        let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
        let mut rng = CounterRng::new(10);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let input = random_input(&dims, 24, 5, 11);
        let y = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
        let mut tampered = input.clone();
        let l = input.len();
        for dir in 0..2 {
            for j in 0..l {
                if !tampered.mask_at(dir, j) {
                    for ch in 0..dims.inner_dim() {
                        tampered.x[[dir, j, ch]] = 1e6;
                    }
                    for h in 0..dims.heads {
                        tampered.dt[[dir, j, h]] = -1e3;
                    }
                }
            }
        }
        let y2 = xqssm_recurrent(&dims, &tampered, &fwd, &bwd).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn state_bit_identical_across_queries() {
        let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
        let mut rng = CounterRng::new(13);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let input = random_input(&dims, 32, 8, 15);
        let (_, probes) = xqssm_recurrent_with_state_probes(&dims, &input, &fwd, &bwd).unwrap();
        assert_eq!(probes.len(), 16); // 8 queries × 2 directions
        for (_, _, before, after) in probes {
            assert_eq!(before, after);
        }
    }

    #[test]
    fn causality_per_direction() {
        // Perturbing a feature token after a query (forward order) leaves
        // the forward contribution unchanged; isolate it with zero backward C.
        let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
        let mut rng = CounterRng::new(17);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let mut input = random_input(&dims, 20, 4, 19);
        for j in 0..20 {
            for n in 0..dims.bc_width() {
                input.c_in[[1, j, n]] = 0.0;
            }
        }
        let y = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
        // Find the last query and perturb a feature token after it.
        let last_q = (0..20).rev().find(|&j| !input.s_mask[j]).unwrap();
        if let Some(after) = (last_q + 1..20).find(|&j| input.s_mask[j]) {
            let mut tampered = input.clone();
            for ch in 0..dims.inner_dim() {
                tampered.x[[0, after, ch]] += 3.5;
                // Direction 1 stores reversed rows.
                tampered.x[[1, 19 - after, ch]] += 3.5;
            }
            let y2 = xqssm_recurrent(&dims, &tampered, &fwd, &bwd).unwrap();
            assert_eq!(y, y2);
        }
    }

    #[test]
    fn parallel_matches_recurrent() {
        let dims = SSMDims::new(8, 2.0, 4, 4, 5, 2).unwrap();
        for seed in 0..8u64 {
            let mut rng = CounterRng::new(100 + seed);
            let fwd = SSMParams::seeded(dims.heads, &mut rng);
            let bwd = SSMParams::seeded(dims.heads, &mut rng);
            let input = random_input(&dims, 48, 8, 200 + seed);
            let y_rec = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
            let y_par = xqssm_parallel(&dims, &input, &fwd, &bwd).unwrap();
            let max_err = (&y_rec - &y_par).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-10, "seed {seed}: {max_err}");
        }
    }

    #[test]
    fn aux_allocation_constant_in_stream_length() {
        let dims = SSMDims::default_test();
        let mut rng = CounterRng::new(23);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let mut sizes = Vec::new();
        for l in [64usize, 256, 1024] {
            let input = random_input(&dims, l, 8, l as u64);
            let (_, stats) = xqssm_recurrent_instrumented(&dims, &input, &fwd, &bwd).unwrap();
            sizes.push(stats.aux_elements);
        }
        assert_eq!(sizes[0], sizes[1]);
        assert_eq!(sizes[1], sizes[2]);
        assert_eq!(
            sizes[0],
            dims.heads * dims.head_dim * dims.state_dim + dims.state_dim
        );
    }

    #[test]
    fn flops_formula_examples() {
        let f = xqssm_flops(10, 3, 2, 4, 8);
        assert_eq!(f.total, 1008);
        assert_eq!(f.per_query, 8 * (4 + 2 + 1));
        assert_eq!(f.per_feature, 2 * 2 * 5 + 2 * 8 * 4);
        assert_eq!(f.per_query_unoptimized, 2 * 2 * 5 + 8 * (3 * 4 + 2 + 1));

        let value_only = xqssm_flops(10, 0, 2, 4, 8);
        assert_eq!(value_only.total, 2 * 10 * (2 * 5 + 8 * 4));
        let query_only = xqssm_flops(0, 3, 2, 4, 8);
        assert_eq!(query_only.total, 3 * 8 * 7);
    }

    #[test]
    fn counter_matches_formula_in_value_dominated_regime() {
        let dims = SSMDims::default_test();
        let mut rng = CounterRng::new(29);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let (v, m) = (400usize, 40usize);
        let input = random_input(&dims, v + m, m, 31);
        let (_, stats) = xqssm_recurrent_instrumented(&dims, &input, &fwd, &bwd).unwrap();
        let analytic = xqssm_flops(
            v as u64,
            m as u64,
            dims.heads as u64,
            dims.state_dim as u64,
            dims.inner_dim() as u64,
        );
        let rel = (stats.counted_macs as f64 - analytic.total as f64).abs() / analytic.total as f64;
        assert!(rel < 0.05, "relative gap {rel}");
    }
}
