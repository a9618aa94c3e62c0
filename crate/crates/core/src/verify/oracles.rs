//! Independent reference implementations the invariant suite and the
//! acceptance tests check the kernels against. These deliberately take
//! different code paths from the production kernels.

use ndarray::Array2;

use crate::rng::CounterRng;
use crate::ssm::{scan_recurrent, ScanState, SSMDims, SSMParams, SequenceBatch};
use crate::xqssm::XQSSMInput;

/// Naive quadratic merge: insert query copies one at a time, ascending by
/// (reference index, original order), each immediately before the value
/// token it targets. Tokens are tagged: value i = +i, query j = -(j+1).
pub fn naive_insertion(v_count: usize, r_1d: &[usize]) -> (Vec<isize>, Vec<bool>) {
    let mut tokens: Vec<isize> = (0..v_count as isize).collect();
    let mut order: Vec<usize> = (0..r_1d.len()).collect();
    order.sort_by_key(|&i| (r_1d[i], i));
    for &qi in &order {
        let target = r_1d[qi] as isize;
        let pos = tokens
            .iter()
            .position(|&t| t == target)
            .expect("value token present");
        tokens.insert(pos, -(qi as isize) - 1);
    }
    let mask = tokens.iter().map(|&t| t >= 0).collect();
    (tokens, mask)
}

/// Cross-scan oracle: the ordinary full scan over the merged stream with Δ
/// pinned to zero at query rows, restricted to query-row outputs.
///
/// The pin goes through the public scan path by setting query-row dt to a
/// value so low that softplus underflows to exactly 0 (Δ = 0, decay = 1,
/// gain = 0), and the skip vector is zeroed because the cross-scan readout
/// carries no skip term. Each direction runs as an independent generic scan;
/// query outputs are summed into forward-stream order.
pub fn pinned_generic_scan(
    dims: &SSMDims,
    input: &XQSSMInput,
    fwd: &SSMParams,
    bwd: &SSMParams,
) -> Array2<f64> {
    let l = input.len();
    let m_count = input.num_queries();
    let mut y = Array2::zeros((m_count, dims.inner_dim()));
    let params = [fwd, bwd];
    const PINNED_DT: f64 = -1.0e4;

    for dir in 0..2 {
        let mask: Vec<bool> = (0..l)
            .map(|j| {
                if dir == 0 {
                    input.s_mask[j]
                } else {
                    input.s_mask[l - 1 - j]
                }
            })
            .collect();
        let mut dt = Array2::zeros((l, dims.heads));
        for j in 0..l {
            for h in 0..dims.heads {
                dt[[j, h]] = if mask[j] {
                    input.dt[[dir, j, h]]
                } else {
                    PINNED_DT
                };
            }
        }
        let seq = SequenceBatch {
            x: input.x.index_axis(ndarray::Axis(0), dir).to_owned(),
            b_in: input.b_in.index_axis(ndarray::Axis(0), dir).to_owned(),
            c_in: input.c_in.index_axis(ndarray::Axis(0), dir).to_owned(),
            dt,
        };
        let no_skip = params[dir].without_skip();
        let (full, _) = scan_recurrent(dims, &seq, &no_skip, &ScanState::zeros(dims))
            .expect("oracle scan");
        let mut encountered = 0usize;
        for j in 0..l {
            if !mask[j] {
                let slot = if dir == 0 {
                    encountered
                } else {
                    m_count - 1 - encountered
                };
                for ch in 0..dims.inner_dim() {
                    y[[slot, ch]] += full[[j, ch]];
                }
                encountered += 1;
            }
        }
    }
    y
}

/// Dense hat-function bilinear interpolation at continuous pixel
/// coordinates: a sum over every pixel weighted by the product of 1D hats.
pub fn dense_bilinear(map: &ndarray::Array3<f64>, px: f64, py: f64, channel: usize) -> f64 {
    let (h, w, _) = map.dim();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let wx = (1.0 - (px - c as f64).abs()).max(0.0);
            let wy = (1.0 - (py - r as f64).abs()).max(0.0);
            if wx > 0.0 && wy > 0.0 {
                acc += wx * wy * map[[r, c, channel]];
            }
        }
    }
    acc
}

/// Single-precision duality check: a self-contained f32 recurrent scan and
/// mixer pair on one seeded instance. Returns the worst relative error.
pub fn scan_duality_rel_err_f32(seed: u64) -> f32 {
    let mut rng = CounterRng::new(seed);
    let heads = 2usize;
    let p_dim = 2usize;
    let n_dim = 4usize;
    let l = 8 + rng.below(88);
    let alpha_d = heads * p_dim;

    let mut f = |_: ()| rng.normal() as f32;
    let x: Vec<f32> = (0..l * alpha_d).map(|_| f(())).collect();
    let b: Vec<f32> = (0..l * n_dim).map(|_| f(())).collect();
    let c: Vec<f32> = (0..l * n_dim).map(|_| f(())).collect();
    let dt_raw: Vec<f32> = (0..l * heads).map(|_| f(())).collect();
    let a: Vec<f32> = (0..heads).map(|_| -(rng.uniform(0.0, 16f64.ln()).exp() as f32)).collect();
    let skip: Vec<f32> = (0..heads).map(|_| f(())).collect();

    let softplus32 = |v: f32| v.max(0.0) + (-v.abs()).exp().ln_1p();

    // Recurrent path.
    let mut y_rec = vec![0.0f32; l * alpha_d];
    let mut state = vec![0.0f32; heads * p_dim * n_dim];
    for t in 0..l {
        for head in 0..heads {
            let delta = softplus32(dt_raw[t * heads + head]);
            let dec = (delta * a[head]).exp();
            for p in 0..p_dim {
                let ch = head * p_dim + p;
                let xv = x[t * alpha_d + ch];
                let mut acc = 0.0f32;
                for n in 0..n_dim {
                    let idx = (head * p_dim + p) * n_dim + n;
                    state[idx] = dec * state[idx] + delta * b[t * n_dim + n] * xv;
                    acc += c[t * n_dim + n] * state[idx];
                }
                y_rec[t * alpha_d + ch] = acc + skip[head] * xv;
            }
        }
    }

    // Mixer path.
    let mut y_mix = vec![0.0f32; l * alpha_d];
    for head in 0..heads {
        let da: Vec<f32> = (0..l)
            .map(|t| (softplus32(dt_raw[t * heads + head]) * a[head]).exp())
            .collect();
        for i in 0..l {
            let mut prod = 1.0f32;
            for j in (0..=i).rev() {
                if j < i {
                    prod *= da[j + 1];
                }
                let mut cb = 0.0f32;
                for n in 0..n_dim {
                    cb += c[i * n_dim + n] * b[j * n_dim + n];
                }
                let m_ij = cb * softplus32(dt_raw[j * heads + head]) * prod;
                for p in 0..p_dim {
                    let ch = head * p_dim + p;
                    y_mix[i * alpha_d + ch] += m_ij * x[j * alpha_d + ch];
                }
            }
            for p in 0..p_dim {
                let ch = head * p_dim + p;
                y_mix[i * alpha_d + ch] += skip[head] * x[i * alpha_d + ch];
            }
        }
    }

    let scale = y_rec
        .iter()
        .fold(1.0f32, |m, v| m.max(v.abs()));
    y_rec
        .iter()
        .zip(&y_mix)
        .fold(0.0f32, |m, (r, x)| m.max((r - x).abs()))
        / scale
}
