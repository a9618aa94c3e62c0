//! Runtime invariant suite behind the CLI `verify` subcommand.
//!
//! Each entry exercises one documented invariant on seeded instances and
//! reports the instance count and worst error. The suite never panics on a
//! violated invariant; failures are report content and the CLI turns them
//! into a nonzero exit status.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    attention_weights, complexity_report, deformable_xattn, dot_product_xattn, naive_mamba_xattn,
    scaling_study_configs, ComplexityConfig, SCALING_REFERENCE_GFLOPS,
};
use crate::consts::TOL;
use crate::geometry::{
    bev_cell_centers, lift_and_project, ring_rig, BEVGridSpec, Extent, ReferencePointSet,
};
use crate::layer::{
    spatial_cross_mamba_forward, ExtractOrder, InsertionMode, LayerConfig, LayerParams,
    MergeOrder, NormMode,
};
use crate::merge::{build_merged, index_offset};
use crate::rng::CounterRng;
use crate::scene::{evenly_spaced, gen_scene, parse_scene_json, SceneSpec};
use crate::ssm::{
    hydra_bidirectional, scan_matrix_mixer, scan_recurrent, softplus, ScanState, SSMDims,
    SSMParams, SequenceBatch,
};
use crate::traversal::{flatten_permutation, TraversalOrder};
use crate::xqssm::{
    xqssm_flops, xqssm_parallel, xqssm_recurrent, xqssm_recurrent_instrumented,
    xqssm_recurrent_with_state_probes, XQSSMInput,
};

pub mod oracles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl VerifyLevel {
    fn pick(self, fast: usize, full: usize) -> usize {
        match self {
            VerifyLevel::Fast => fast,
            VerifyLevel::Full => full,
        }
    }
}

/// One invariant's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantResult {
    pub id: String,
    pub instances: usize,
    pub max_error: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub results: Vec<InvariantResult>,
    pub all_passed: bool,
}

struct Check {
    id: &'static str,
    instances: usize,
    max_error: f64,
    tolerance: f64,
    failed: bool,
    detail: Option<String>,
}

impl Check {
    fn new(id: &'static str, tolerance: f64) -> Check {
        Check {
            id,
            instances: 0,
            max_error: 0.0,
            tolerance,
            failed: false,
            detail: None,
        }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        if err.is_nan() {
            self.failed = true;
            self.detail.get_or_insert_with(|| "NaN error".into());
        }
        self.max_error = self.max_error.max(err);
    }

    fn require(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.instances += 1;
        if !ok {
            self.failed = true;
            if self.detail.is_none() {
                self.detail = Some(detail());
            }
        }
    }

    fn finish(self) -> InvariantResult {
        let passed = !self.failed && self.max_error <= self.tolerance;
        InvariantResult {
            id: self.id.to_string(),
            instances: self.instances,
            max_error: self.max_error,
            passed,
            detail: self.detail,
        }
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn random_batch(dims: &SSMDims, l: usize, seed: u64) -> SequenceBatch {
    let mut rng = CounterRng::new(seed);
    let fill = |rows: usize, cols: usize, r: &mut CounterRng| {
        Array2::from_shape_fn((rows, cols), |_| r.normal())
    };
    SequenceBatch {
        x: fill(l, dims.inner_dim(), &mut rng),
        b_in: fill(l, dims.bc_width(), &mut rng),
        c_in: fill(l, dims.bc_width(), &mut rng),
        dt: fill(l, dims.heads, &mut rng),
    }
}

pub fn random_scan_input(dims: &SSMDims, l: usize, m: usize, seed: u64) -> XQSSMInput {
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

// ───────────────────────── ssm checks ─────────────────────────

fn check_scan_duality(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("ssm.scan_duality", TOL.scan_duality_f64);
    let count = level.pick(40, 200);
    for i in 0..count {
        let seed = 1000 + i as u64;
        let mut rng = CounterRng::new(seed);
        let heads = 1 + rng.below(8);
        let state = 1 + rng.below(64);
        let head_dim = 1 + rng.below(4);
        let dims = SSMDims::new(heads * head_dim, 1.0, heads, head_dim, state, 1).unwrap();
        let l = 1 + rng.below(128);
        let params = SSMParams::seeded(dims.heads, &mut rng);
        let seq = random_batch(&dims, l, seed ^ 0x5a5a);
        let (y_rec, _) = scan_recurrent(&dims, &seq, &params, &ScanState::zeros(&dims)).unwrap();
        let y_mix = scan_matrix_mixer(&dims, &seq, &params).unwrap();
        check.record(max_abs_diff(&y_rec, &y_mix));
    }
    check.finish()
}

fn check_scan_duality_f32(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("ssm.scan_duality_f32", TOL.scan_duality_f32_rel as f64);
    for i in 0..level.pick(10, 40) {
        let seed = 4000 + i as u64;
        let rel = oracles::scan_duality_rel_err_f32(seed);
        check.record(rel as f64);
    }
    check.finish()
}

fn check_decay_range() -> InvariantResult {
    let mut check = Check::new("ssm.decay_range", 0.0);
    let mut rng = CounterRng::new(77);
    for _ in 0..500 {
        let a = -rng.uniform(-3.0, 3.0f64).exp();
        let d1 = softplus(rng.uniform(-6.0, 6.0));
        let d2 = d1 + rng.uniform(0.0, 3.0);
        let da1 = (d1 * a).exp();
        let da2 = (d2 * a).exp();
        check.require(da1 > 0.0 && da1 <= 1.0, || format!("dA {da1} out of (0,1]"));
        check.require(da2 <= da1, || "decay not monotone in Δ".into());
    }
    check.finish()
}

fn check_chaining() -> InvariantResult {
    let mut check = Check::new("ssm.chaining", 0.0);
    let dims = SSMDims::default_test();
    for i in 0..10u64 {
        let params = SSMParams::seeded(dims.heads, &mut CounterRng::new(200 + i));
        let s1 = random_batch(&dims, 9, 300 + i);
        let s2 = random_batch(&dims, 7, 400 + i);
        let zero = ScanState::zeros(&dims);
        let (y_all, fin_all) = scan_recurrent(&dims, &s1.concat(&s2), &params, &zero).unwrap();
        let (y1, mid) = scan_recurrent(&dims, &s1, &params, &zero).unwrap();
        let (y2, fin2) = scan_recurrent(&dims, &s2, &params, &mid).unwrap();
        let exact = y_all.slice(s![..9, ..]) == y1
            && y_all.slice(s![9.., ..]) == y2
            && fin_all.h == fin2.h;
        check.require(exact, || "chained scan differs from joint scan".into());
    }
    check.finish()
}

fn check_hydra_symmetries(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("ssm.hydra", TOL.hydra_oracle);
    let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
    for i in 0..level.pick(5, 20) {
        let mut rng = CounterRng::new(500 + i as u64);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let seq = random_batch(&dims, 12, 600 + i as u64);
        let y = hydra_bidirectional(&dims, &seq, &fwd, &bwd).unwrap();
        let swapped = hydra_bidirectional(&dims, &seq.reversed(), &bwd, &fwd).unwrap();
        check.require(swapped.slice(s![..;-1, ..]) == y, || {
            "reverse/swap symmetry violated".into()
        });
        // Zeroing C reduces to the skip diagonal.
        let mut no_c = seq.clone();
        no_c.c_in.fill(0.0);
        let y0 = hydra_bidirectional(&dims, &no_c, &fwd, &bwd).unwrap();
        let mut expect = no_c.x.clone();
        for head in 0..dims.heads {
            let d = 0.5 * (fwd.skip_d[head] + bwd.skip_d[head]);
            for p in 0..dims.head_dim {
                let ch = head * dims.head_dim + p;
                for t in 0..12 {
                    expect[[t, ch]] *= d;
                }
            }
        }
        check.record(max_abs_diff(&y0, &expect));
    }
    check.finish()
}

// ─────────────────────── geometry checks ───────────────────────

/// Per-seed rig produced for the hit-share study: the standard six-camera
/// ring at a seeded yaw with the BEV grid masked to an inscribed disc.
pub struct RigHitStats {
    pub per_camera: Vec<usize>,
    pub disc_queries: usize,
    pub pillar_points: usize,
    pub multi_hit_points: usize,
    pub expected_per_camera: f64,
}

pub fn disjoint_rig_hit_stats(seed: u64) -> RigHitStats {
    let mut rng = CounterRng::new(seed).substream("rig");
    let yaw0 = rng.uniform(0.0, std::f64::consts::TAU);
    let height = rng.uniform(0.9, 1.1);
    let cams = ring_rig(6, yaw0, height, 60.0, 120.0, 800, 450);
    let spec = BEVGridSpec {
        h_bev: 50,
        w_bev: 50,
        extent: Extent {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -50.0,
            y_max: 50.0,
        },
        pillar_z: evenly_spaced(-1.0, 3.0, 4),
    };
    let centers = bev_cell_centers(&spec).unwrap();
    let radius = 45.0;
    let in_disc: Vec<bool> = (0..centers.nrows())
        .map(|q| centers[[q, 0]].hypot(centers[[q, 1]]) <= radius)
        .collect();
    let disc_queries = in_disc.iter().filter(|&&b| b).count();

    let refs = ReferencePointSet::build(&spec, &cams).unwrap();
    let z = spec.num_pillar_points();
    let mut per_camera = vec![0usize; cams.len()];
    let mut multi_hit_points = 0usize;
    for q in 0..centers.nrows() {
        if !in_disc[q] {
            continue;
        }
        for k in 0..z {
            let mut cams_hit = 0;
            for (c, hits) in refs.hits.iter().enumerate() {
                if hits[[q, k]] {
                    per_camera[c] += 1;
                    cams_hit += 1;
                }
            }
            if cams_hit > 1 {
                multi_hit_points += 1;
            }
        }
    }
    RigHitStats {
        per_camera,
        disc_queries,
        pillar_points: z,
        multi_hit_points,
        expected_per_camera: (z * disc_queries) as f64 / cams.len() as f64,
    }
}

fn check_geometry_hits(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("geom.hit_shares", 0.10);
    for seed in 0..level.pick(3, 10) as u64 {
        let stats = disjoint_rig_hit_stats(seed);
        check.require(stats.multi_hit_points == 0, || {
            format!("{} points hit more than one camera", stats.multi_hit_points)
        });
        for &m in &stats.per_camera {
            let rel = (m as f64 - stats.expected_per_camera).abs() / stats.expected_per_camera;
            check.record(rel);
        }
    }
    check.finish()
}

fn check_geometry_unit_square() -> InvariantResult {
    let mut check = Check::new("geom.hits_in_unit_square", 0.0);
    let spec = BEVGridSpec {
        h_bev: 12,
        w_bev: 12,
        extent: Extent {
            x_min: -30.0,
            x_max: 30.0,
            y_min: -30.0,
            y_max: 30.0,
        },
        pillar_z: evenly_spaced(-1.0, 3.0, 3),
    };
    let cams = ring_rig(6, 0.11, 1.0, 60.0, 120.0, 640, 480);
    let refs = ReferencePointSet::build(&spec, &cams).unwrap();
    for c in 0..refs.num_cameras() {
        let qz = spec.num_queries() * spec.num_pillar_points();
        check.require(refs.m_per_camera[c] <= qz, || "M exceeds QZ".into());
        for q in 0..refs.num_queries() {
            for k in 0..refs.num_pillar_points() {
                if refs.hits[c][[q, k]] {
                    let (u, v) = (refs.uv[c][[q, k, 0]], refs.uv[c][[q, k, 1]]);
                    check.require((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v), || {
                        format!("hit outside unit square: ({u}, {v})")
                    });
                }
            }
        }
    }
    check.finish()
}

fn check_geometry_scaling() -> InvariantResult {
    let mut check = Check::new("geom.pixel_scale_invariance", 1e-9);
    let spec = BEVGridSpec {
        h_bev: 6,
        w_bev: 6,
        extent: Extent {
            x_min: -20.0,
            x_max: 20.0,
            y_min: -20.0,
            y_max: 20.0,
        },
        pillar_z: vec![0.0, 1.5],
    };
    let centers = bev_cell_centers(&spec).unwrap();
    for i in 0..5u64 {
        let mut rng = CounterRng::new(900 + i);
        let cam = crate::geometry::CameraModel::from_fov(
            [0.0, 0.0, rng.uniform(0.8, 1.4)],
            rng.uniform(0.0, std::f64::consts::TAU),
            rng.uniform(50.0, 90.0),
            rng.uniform(40.0, 110.0),
            640,
            480,
        );
        let mut scaled = cam.clone();
        for col in 0..4 {
            scaled.proj[0][col] *= 3.0;
            scaled.proj[1][col] *= 1.5;
        }
        scaled.img_w *= 3;
        scaled.img_h = (scaled.img_h as f64 * 1.5) as usize;
        let a = lift_and_project(&centers, &spec, &cam).unwrap();
        let b = lift_and_project(&centers, &spec, &scaled).unwrap();
        for q in 0..centers.nrows() {
            for k in 0..2 {
                if a.valid[[q, k]] {
                    check.record((a.uv[[q, k, 0]] - b.uv[[q, k, 0]]).abs());
                    check.record((a.uv[[q, k, 1]] - b.uv[[q, k, 1]]).abs());
                }
            }
        }
    }
    check.finish()
}

// ─────────────────────── traversal checks ───────────────────────

fn check_traversal() -> InvariantResult {
    let mut check = Check::new("trav.bijection_and_inverse", 0.0);
    let orders = [
        TraversalOrder::RowMajor,
        TraversalOrder::ColumnMajor,
        TraversalOrder::RowSnake,
        TraversalOrder::ColumnSnake,
        TraversalOrder::Patch {
            h_p: 2,
            w_p: 3,
            inner: Box::new(TraversalOrder::RowSnake),
            outer: Box::new(TraversalOrder::ColumnMajor),
        },
    ];
    for order in &orders {
        for (rows, cols) in [(2usize, 3usize), (4, 6), (6, 6), (8, 3)] {
            if let TraversalOrder::Patch { h_p, w_p, .. } = order {
                if rows % h_p != 0 || cols % w_p != 0 {
                    continue;
                }
            }
            let p = flatten_permutation(rows, cols, order).unwrap();
            let mut seen = p.forward_slice().to_vec();
            seen.sort_unstable();
            check.require(seen == (0..rows * cols).collect::<Vec<_>>(), || {
                format!("{order:?} not bijective on {rows}x{cols}")
            });
            for idx in 0..rows * cols {
                check.require(
                    p.apply_inverse(p.apply(idx).unwrap()).unwrap() == idx,
                    || "inverse does not recover identity".into(),
                );
            }
        }
    }
    // Snake agrees with row-major on even rows.
    let rm = flatten_permutation(5, 7, &TraversalOrder::RowMajor).unwrap();
    let sn = flatten_permutation(5, 7, &TraversalOrder::RowSnake).unwrap();
    for h in (0..5).step_by(2) {
        for w in 0..7 {
            check.require(
                rm.apply(h * 7 + w).unwrap() == sn.apply(h * 7 + w).unwrap(),
                || "snake differs from row-major on an even row".into(),
            );
        }
    }
    check.finish()
}

// ───────────────────────── merge checks ─────────────────────────

fn check_merge_oracle(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("merge.naive_equivalence", 0.0);
    let instances = level.pick(200, 1000);
    for i in 0..instances {
        let mut rng = CounterRng::new(3000 + i as u64);
        let v_count = 1 + rng.below(64);
        let m_count = rng.below(33);
        let r_1d: Vec<usize> = (0..m_count).map(|_| rng.below(v_count)).collect();
        let values = Array2::from_shape_fn((v_count, 1), |(r, _)| r as f64);
        let queries = Array2::from_shape_fn((m_count, 1), |(r, _)| -(r as f64) - 1.0);
        let ids: Vec<usize> = (0..m_count).collect();
        let positions = index_offset(&r_1d, v_count).unwrap();
        let merged = build_merged(values.view(), queries.view(), &positions, &ids).unwrap();
        let (oracle_tokens, oracle_mask) = oracles::naive_insertion(v_count, &r_1d);
        let got: Vec<isize> = merged
            .stream
            .column(0)
            .iter()
            .map(|&v| v as isize)
            .collect();
        check.require(got == oracle_tokens && merged.s_mask == oracle_mask, || {
            format!("instance {i} diverged from naive insertion")
        });
        // Round trip recovers values exactly.
        check.require(merged.value_rows() == values, || "round trip failed".into());
        // Positions strictly increasing in stable sorted order.
        let mut order: Vec<usize> = (0..m_count).collect();
        order.sort_by_key(|&k| (r_1d[k], k));
        let increasing = order
            .windows(2)
            .all(|w| positions[w[0]] < positions[w[1]]);
        check.require(increasing, || "positions not strictly increasing".into());
    }
    check.finish()
}

// ───────────────────────── xqssm checks ─────────────────────────

fn check_xqssm_state_invariance(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("xqssm.state_invariance", 0.0);
    let dims = SSMDims::new(8, 2.0, 4, 4, 6, 2).unwrap();
    for i in 0..level.pick(20, 100) as u64 {
        let mut rng = CounterRng::new(5000 + i);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let input = random_scan_input(&dims, 24, 6, 6000 + i);
        let (_, probes) =
            xqssm_recurrent_with_state_probes(&dims, &input, &fwd, &bwd).unwrap();
        check.require(probes.len() == 12, || "missing probes".into());
        for (_, _, before, after) in probes {
            check.require(before == after, || "state changed across a query".into());
        }
    }
    check.finish()
}

fn check_xqssm_causality(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("xqssm.causality", 0.0);
    let dims = SSMDims::new(4, 2.0, 2, 4, 3, 1).unwrap();
    for i in 0..level.pick(10, 40) as u64 {
        let mut rng = CounterRng::new(6500 + i);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let mut input = random_scan_input(&dims, 18, 4, 7000 + i);
        // Isolate the forward direction.
        for j in 0..18 {
            for n in 0..dims.bc_width() {
                input.c_in[[1, j, n]] = 0.0;
            }
        }
        let y = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
        let last_q = (0..18).rev().find(|&j| !input.s_mask[j]).unwrap();
        if let Some(after) = (last_q + 1..18).find(|&j| input.s_mask[j]) {
            let mut tampered = input.clone();
            for ch in 0..dims.inner_dim() {
                tampered.x[[0, after, ch]] += 2.0;
                tampered.x[[1, 17 - after, ch]] += 2.0;
            }
            let y2 = xqssm_recurrent(&dims, &tampered, &fwd, &bwd).unwrap();
            check.require(y == y2, || "future token leaked into a query".into());
        } else {
            check.require(true, || unreachable!());
        }
    }
    check.finish()
}

fn check_xqssm_oracles(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("xqssm.oracle_equivalence", TOL.xqssm_oracle);
    let dims = SSMDims::new(8, 2.0, 4, 4, 5, 1).unwrap();
    for i in 0..level.pick(25, 100) as u64 {
        let mut rng = CounterRng::new(8000 + i);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let l = 16 + (i as usize % 32);
        let input = random_scan_input(&dims, l, 4 + (i as usize % 5), 9000 + i);
        let y = xqssm_recurrent(&dims, &input, &fwd, &bwd).unwrap();
        let y_generic = oracles::pinned_generic_scan(&dims, &input, &fwd, &bwd);
        check.record(max_abs_diff(&y, &y_generic));
        let y_par = xqssm_parallel(&dims, &input, &fwd, &bwd).unwrap();
        check.record(max_abs_diff(&y, &y_par));
    }
    check.finish()
}

fn check_xqssm_counter(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("xqssm.counter_vs_formula", TOL.flop_counter_rel);
    let configs = counter_sweep_configs(level.pick(6, 20));
    for (i, (v, m, dims)) in configs.into_iter().enumerate() {
        let mut rng = CounterRng::new(9500 + i as u64);
        let fwd = SSMParams::seeded(dims.heads, &mut rng);
        let bwd = SSMParams::seeded(dims.heads, &mut rng);
        let input = random_scan_input(&dims, v + m, m, 9600 + i as u64);
        let (_, stats) = xqssm_recurrent_instrumented(&dims, &input, &fwd, &bwd).unwrap();
        let analytic = xqssm_flops(
            v as u64,
            m as u64,
            dims.heads as u64,
            dims.state_dim as u64,
            dims.inner_dim() as u64,
        );
        let rel =
            (stats.counted_macs as f64 - analytic.total as f64).abs() / analytic.total as f64;
        check.record(rel);
    }
    check.finish()
}

/// The (V, M, dims) sweep used for counter-versus-formula checks: V spans
/// 10²..10⁴ geometrically with M at the merge regime's ratio M ≈ V/10
/// (clamped to [1, 10³]), endpoints pinned so M covers its span too.
pub fn counter_sweep_configs(count: usize) -> Vec<(usize, usize, SSMDims)> {
    let dims_pool = [
        SSMDims::new(32, 4.0, 8, 16, 32, 1).unwrap(),
        SSMDims::new(32, 4.0, 8, 16, 16, 1).unwrap(),
        SSMDims::new(32, 4.0, 8, 16, 64, 2).unwrap(),
        SSMDims::new(16, 4.0, 4, 16, 32, 1).unwrap(),
    ];
    let mut configs = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / (count.max(2) - 1) as f64;
        let v = (100.0f64 * 100.0f64.powf(t)).round() as usize;
        let m = if i == 0 {
            1
        } else {
            (v / 10).clamp(1, 1000)
        };
        configs.push((v, m, dims_pool[i % dims_pool.len()]));
    }
    configs
}

fn check_xqssm_memory() -> InvariantResult {
    let mut check = Check::new("xqssm.constant_aux_memory", 0.0);
    let dims = SSMDims::default_test();
    let mut rng = CounterRng::new(9900);
    let fwd = SSMParams::seeded(dims.heads, &mut rng);
    let bwd = SSMParams::seeded(dims.heads, &mut rng);
    let mut sizes = Vec::new();
    for l in [64usize, 256, 1024] {
        let input = random_scan_input(&dims, l, 8, 9950 + l as u64);
        let (_, stats) = xqssm_recurrent_instrumented(&dims, &input, &fwd, &bwd).unwrap();
        sizes.push(stats.aux_elements);
    }
    check.require(sizes[0] == sizes[1] && sizes[1] == sizes[2], || {
        format!("aux sizes vary with stream length: {sizes:?}")
    });
    check.finish()
}

// ───────────────────────── layer checks ─────────────────────────

fn layer_fixture(
    seed: u64,
) -> (
    SSMDims,
    LayerParams,
    Array2<f64>,
    Vec<Array3<f64>>,
    ReferencePointSet,
) {
    let dims = SSMDims::new(16, 2.0, 4, 8, 8, 1).unwrap();
    let mut rng = CounterRng::new(seed);
    let params = LayerParams::seeded(&dims, 4, &mut rng.substream("params"));
    let mut q_rng = rng.substream("queries");
    let q = Array2::from_shape_fn((6, dims.model_dim), |_| q_rng.normal());
    let mut v_rng = rng.substream("values");
    let maps = vec![Array3::from_shape_fn((4, 6, dims.model_dim), |_| v_rng.normal())];
    let mut uv = Array3::from_elem((6, 2, 2), f64::NAN);
    let mut hits = Array2::from_elem((6, 2), false);
    for (q_id, z, u, v) in [
        (0usize, 0usize, 0.21, 0.33),
        (2, 0, 0.55, 0.48),
        (2, 1, 0.83, 0.62),
        (4, 0, 0.97, 0.9),
    ] {
        uv[[q_id, z, 0]] = u;
        uv[[q_id, z, 1]] = v;
        hits[[q_id, z]] = true;
    }
    let refs = ReferencePointSet {
        uv: vec![uv],
        hits: vec![hits],
        m_per_camera: vec![4],
    };
    (dims, params, q, maps, refs)
}

fn check_layer_invariants() -> InvariantResult {
    let mut check = Check::new("layer.residual_and_zero_hit", 0.0);
    let (dims, params, q, maps, refs) = layer_fixture(41);
    let config = LayerConfig::default_for(dims);

    let mut zeroed = params.clone();
    zeroed.w_out.fill(0.0);
    let out = spatial_cross_mamba_forward(&q, &maps, &refs, &zeroed, &config).unwrap();
    let plain = spatial_cross_mamba_forward(
        &q,
        &[Array3::zeros(maps[0].dim())],
        &refs,
        &zeroed,
        &config,
    )
    .unwrap();
    check.require(out == plain, || "residual depends on features with w_out = 0".into());

    // Zero-hit independence: queries 1, 3, 5 have no hits.
    let mut maps_b = maps.clone();
    maps_b[0][[1, 1, 1]] += 9.0;
    let a = spatial_cross_mamba_forward(&q, &maps, &refs, &params, &config).unwrap();
    let b = spatial_cross_mamba_forward(&q, &maps_b, &refs, &params, &config).unwrap();
    for qid in [1usize, 3, 5] {
        check.require(a.row(qid) == b.row(qid), || {
            format!("zero-hit query {qid} changed")
        });
    }
    check.finish()
}

fn check_layer_duplication() -> InvariantResult {
    let mut check = Check::new("layer.duplication_invariance", TOL.duplication_invariance);
    let (dims, params, q, maps, _) = layer_fixture(43);
    let mut config = LayerConfig::default_for(dims);
    config.norm_mode = NormMode::Average;
    let single = {
        let mut uv = Array3::from_elem((6, 2, 2), f64::NAN);
        let mut hits = Array2::from_elem((6, 2), false);
        uv[[2, 0, 0]] = 0.4;
        uv[[2, 0, 1]] = 0.7;
        hits[[2, 0]] = true;
        ReferencePointSet {
            uv: vec![uv],
            hits: vec![hits],
            m_per_camera: vec![1],
        }
    };
    let doubled = {
        let mut uv = Array3::from_elem((6, 2, 2), f64::NAN);
        let mut hits = Array2::from_elem((6, 2), false);
        for z in 0..2 {
            uv[[2, z, 0]] = 0.4;
            uv[[2, z, 1]] = 0.7;
            hits[[2, z]] = true;
        }
        ReferencePointSet {
            uv: vec![uv],
            hits: vec![hits],
            m_per_camera: vec![2],
        }
    };
    let y1 = spatial_cross_mamba_forward(&q, &maps, &single, &params, &config).unwrap();
    let y2 = spatial_cross_mamba_forward(&q, &maps, &doubled, &params, &config).unwrap();
    check.record(max_abs_diff(&y1, &y2));
    check.finish()
}

fn check_layer_config_grid() -> InvariantResult {
    let mut check = Check::new("layer.config_grid_finite", 0.0);
    let (dims, params, q, maps, refs) = layer_fixture(47);
    for merge in [MergeOrder::BeforeConv, MergeOrder::AfterConv] {
        for extract in [ExtractOrder::BeforeGate, ExtractOrder::AfterGate] {
            for norm in [
                NormMode::Average,
                NormMode::Rmsnorm,
                NormMode::Both,
                NormMode::Neither,
            ] {
                for insertion in [
                    InsertionMode::Project,
                    InsertionMode::Append,
                    InsertionMode::Prepend,
                ] {
                    for flags in 0..8u8 {
                        let mut config = LayerConfig::default_for(dims);
                        config.merge_order = merge;
                        config.extract_order = extract;
                        config.norm_mode = norm;
                        config.insertion_mode = insertion;
                        config.zero_bq = flags & 1 != 0;
                        config.zero_cv = flags & 2 != 0;
                        config.zero_dtq = flags & 4 != 0;
                        match spatial_cross_mamba_forward(&q, &maps, &refs, &params, &config) {
                            Ok(out) => check.require(
                                out.iter().all(|v| v.is_finite()),
                                || "non-finite layer output".into(),
                            ),
                            Err(e) => check.require(false, || format!("layer failed: {e}")),
                        }
                    }
                }
            }
        }
    }
    check.finish()
}

// ─────────────────────── baseline checks ───────────────────────

fn check_baselines(level: VerifyLevel) -> InvariantResult {
    let mut check = Check::new("base.reference_attentions", TOL.xqssm_oracle);
    let mut rng = CounterRng::new(777);
    for _ in 0..level.pick(5, 20) {
        let q = Array2::from_shape_fn((4, 8), |_| rng.normal());
        let k = Array2::from_shape_fn((6, 8), |_| rng.normal());
        let attn = attention_weights(&q, &k).unwrap();
        for row in attn.rows() {
            check.record((row.iter().sum::<f64>() - 1.0).abs());
        }
        let v = Array2::from_shape_fn((6, 8), |_| rng.normal());
        let out = dot_product_xattn(&q, &k, &v).unwrap();
        check.require(out.iter().all(|x| x.is_finite()), || "non-finite".into());
    }
    // Final-state readout with N = T and basis B is an exact weighted sum.
    let t = 5;
    let dims = SSMDims::new(2, 1.0, 1, 2, t, 1).unwrap();
    let params = SSMParams::new(
        Array1::from_elem(1, -745.0),
        Array1::from_elem(1, 0.541_324_854_612_918_1),
        Array1::zeros(1),
    )
    .unwrap();
    let x = Array2::from_shape_fn((t, 2), |_| rng.normal());
    let mut b_in = Array2::zeros((t, t));
    for i in 0..t {
        b_in[[i, i]] = 1.0;
    }
    let values = SequenceBatch {
        x: x.clone(),
        b_in,
        c_in: Array2::zeros((t, t)),
        dt: Array2::zeros((t, 1)),
    };
    let c_rows = Array2::from_shape_fn((3, t), |_| rng.normal());
    let y = naive_mamba_xattn(&dims, &values, &params, &c_rows).unwrap();
    let delta = softplus(0.541_324_854_612_918_1);
    for i in 0..3 {
        for p in 0..2 {
            let mut acc = 0.0;
            for n in 0..t {
                acc += c_rows[[i, n]] * delta * x[[n, p]];
            }
            check.require(y[[i, p]] == acc, || "final-state memory not exact".into());
        }
    }
    // Deformable vs its dense oracle.
    let map = Array3::from_shape_fn((8, 8, 3), |_| rng.normal());
    let refs = Array2::from_shape_fn((5, 2), |_| rng.uniform(0.0, 1.0));
    let offsets = ndarray::Array4::from_shape_fn((5, 2, 2, 2), |_| rng.uniform(-0.15, 0.15));
    let mut weights = Array3::from_shape_fn((5, 2, 2), |_| rng.uniform(0.1, 1.0));
    for mut row in weights.axis_iter_mut(Axis(0)) {
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|w| w / sum);
    }
    let out = deformable_xattn(&map, &refs, &offsets, &weights).unwrap();
    for q in 0..5 {
        for ch in 0..3 {
            let mut expect = 0.0;
            for p in 0..2 {
                for r in 0..2 {
                    let px = (refs[[q, 0]] + offsets[[q, p, r, 0]]) * 8.0 - 0.5;
                    let py = (refs[[q, 1]] + offsets[[q, p, r, 1]]) * 8.0 - 0.5;
                    expect +=
                        weights[[q, p, r]] * oracles::dense_bilinear(&map, px, py, ch);
                }
            }
            check.record((out[[q, ch]] - expect).abs());
        }
    }
    check.finish()
}

fn check_estimators() -> InvariantResult {
    let mut check = Check::new("base.estimator_scaling", TOL.scaling_ratio_rel);
    let configs = scaling_study_configs();
    let reports: Vec<_> = configs
        .iter()
        .map(|c| complexity_report(c).unwrap())
        .collect();
    for (fam_idx, fam) in ["dot_product", "xqssm", "deformable"].iter().enumerate() {
        let base = reports[0].module(fam).unwrap().flops as f64;
        for row in 1..3 {
            let est_ratio = reports[row].module(fam).unwrap().flops as f64 / base;
            let ref_ratio =
                SCALING_REFERENCE_GFLOPS[row][fam_idx] / SCALING_REFERENCE_GFLOPS[0][fam_idx];
            check.record((est_ratio - ref_ratio).abs() / ref_ratio);
        }
    }
    // Monotonicity in every size parameter (deformable's HW term is weakly
    // monotone once the query-side min binds).
    let base = configs[0].clone();
    let grow = |mutate: &dyn Fn(&mut ComplexityConfig)| {
        let mut c = base.clone();
        mutate(&mut c);
        complexity_report(&c).unwrap()
    };
    let r0 = complexity_report(&base).unwrap();
    for (name, mutate) in [
        ("bev", &(|c: &mut ComplexityConfig| c.bev_h *= 2) as &dyn Fn(&mut ComplexityConfig)),
        ("img", &|c: &mut ComplexityConfig| c.img_w *= 2),
        ("state", &|c: &mut ComplexityConfig| c.dims.state_dim *= 2),
        ("refs", &|c: &mut ComplexityConfig| c.ref_points *= 2),
    ] {
        let r1 = grow(mutate);
        for fam in ["dot_product", "xqssm", "deformable"] {
            let f0 = r0.module(fam).unwrap().flops;
            let f1 = r1.module(fam).unwrap().flops;
            let relevant = match (fam, name) {
                ("dot_product", "state") | ("dot_product", "refs") => false,
                ("xqssm", "refs") => false,
                ("deformable", "state") => false,
                _ => true,
            };
            if relevant {
                let strict = !(fam == "deformable" && name == "img");
                check.require(if strict { f1 > f0 } else { f1 >= f0 }, || {
                    format!("{fam} not monotone in {name}")
                });
            }
        }
    }
    // Quadratic/linear divergence.
    let mut v4 = base.clone();
    v4.feature_stride = 8;
    let mut v6 = v4.clone();
    v6.img_w *= 10;
    v6.img_h *= 10;
    let ratio = |c: &ComplexityConfig| {
        let r = complexity_report(c).unwrap();
        r.module("dot_product").unwrap().flops as f64 / r.module("xqssm").unwrap().flops as f64
    };
    check.require(ratio(&v6) > ratio(&v4), || {
        "dot-product/scan ratio did not grow with V".into()
    });
    check.finish()
}

// ─────────────────────── harness checks ───────────────────────

fn check_harness_determinism() -> InvariantResult {
    let mut check = Check::new("harness.determinism", 0.0);
    let base = std::env::temp_dir().join(format!("xbev-verify-{}", std::process::id()));
    let run = || -> crate::error::Result<(Vec<u8>, Vec<u8>)> {
        let spec = SceneSpec::smoke(2024);
        let scene_dir = base.join("scene");
        gen_scene(&spec, &scene_dir)?;
        let config = LayerConfig::default_for(SSMDims::new(16, 2.0, 4, 8, 8, 1).unwrap());
        let out1 = base.join("out1");
        let out2 = base.join("out2");
        crate::pipeline::run_pipeline(&scene_dir, &config, 5, &out1)?;
        crate::pipeline::run_pipeline(&scene_dir, &config, 5, &out2)?;
        Ok((
            std::fs::read(out1.join(crate::pipeline::OUTPUT_GRID_FILE))?,
            std::fs::read(out2.join(crate::pipeline::OUTPUT_GRID_FILE))?,
        ))
    };
    match run() {
        Ok((a, b)) => check.require(a == b, || "pipeline outputs differ across runs".into()),
        Err(e) => check.require(false, || format!("pipeline failed: {e}")),
    }
    let _ = std::fs::remove_dir_all(&base);
    // Scene JSON round trip.
    let spec = SceneSpec::standard(3);
    let json = serde_json::to_string(&spec).unwrap();
    match parse_scene_json(&json) {
        Ok(back) => check.require(back == spec, || "scene JSON round trip changed".into()),
        Err(e) => check.require(false, || format!("scene JSON reparse failed: {e}")),
    }
    check.finish()
}

/// Run every invariant at the chosen level.
pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    let results = vec![
        check_scan_duality(level),
        check_scan_duality_f32(level),
        check_decay_range(),
        check_chaining(),
        check_hydra_symmetries(level),
        check_geometry_unit_square(),
        check_geometry_scaling(),
        check_geometry_hits(level),
        check_traversal(),
        check_merge_oracle(level),
        check_xqssm_state_invariance(level),
        check_xqssm_causality(level),
        check_xqssm_oracles(level),
        check_xqssm_counter(level),
        check_xqssm_memory(),
        check_layer_invariants(),
        check_layer_duplication(),
        check_layer_config_grid(),
        check_baselines(level),
        check_estimators(),
        check_harness_determinism(),
    ];
    let all_passed = results.iter().all(|r| r.passed);
    VerifyReport {
        level,
        results,
        all_passed,
    }
}
