//! BEV grid construction, pillar lifting, camera projection and hit masks.
//!
//! Each BEV cell center (x, y) is lifted to a pillar of Z heights and pushed
//! through every camera's 4×4 projection matrix. Projections that land inside
//! the image (normalized coordinates in the closed square [0,1]²) and in
//! front of the camera are "hits"; the hit set drives the position-aware
//! merge. Grid enumeration is row-major with x along columns, so cell (i, j)
//! has index `i·W + j` and center `(x_min + (j+½)Δx, y_min + (i+½)Δy)`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::consts::TOL;
use crate::error::{Error, Result};

/// Rectangular BEV extent in ego meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// BEV grid geometry plus the pillar heights sampled per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BEVGridSpec {
    pub h_bev: usize,
    pub w_bev: usize,
    pub extent: Extent,
    /// Strictly increasing pillar heights (meters).
    pub pillar_z: Vec<f64>,
}

impl BEVGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h_bev < 1 || self.w_bev < 1 {
            return Err(Error::InvalidSpec("BEV grid must be at least 1x1".into()));
        }
        if !(self.extent.x_min < self.extent.x_max) || !(self.extent.y_min < self.extent.y_max) {
            return Err(Error::InvalidSpec(format!(
                "degenerate extent {:?}",
                self.extent
            )));
        }
        if self.pillar_z.is_empty() {
            return Err(Error::InvalidSpec("pillar_z must be nonempty".into()));
        }
        if self.pillar_z.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(
                "pillar_z must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.h_bev * self.w_bev
    }

    pub fn num_pillar_points(&self) -> usize {
        self.pillar_z.len()
    }
}

/// One camera: a 4×4 matrix mapping homogeneous ego points to homogeneous
/// image coordinates (pixel u, pixel v, ·, w), plus the image size used to
/// normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub proj: [[f64; 4]; 4],
    pub img_w: usize,
    pub img_h: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.img_w < 1 || self.img_h < 1 {
            return Err(Error::InvalidSpec("image size must be >= 1".into()));
        }
        if self.proj.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite projection matrix".into()));
        }
        Ok(())
    }

    /// Pinhole camera at `position` looking along `yaw` (radians, in the
    /// ground plane), image x right, image y down. The last matrix row holds
    /// camera depth so `w > 0` means "in front".
    pub fn pinhole(
        position: [f64; 3],
        yaw: f64,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        img_w: usize,
        img_h: usize,
    ) -> CameraModel {
        let fwd = [yaw.cos(), yaw.sin(), 0.0];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = [0.0, 0.0, -1.0];
        let row = |a: [f64; 3], s: f64, b: [f64; 3], t: f64| {
            let dir = [
                s * a[0] + t * b[0],
                s * a[1] + t * b[1],
                s * a[2] + t * b[2],
            ];
            let trans = -(dir[0] * position[0] + dir[1] * position[1] + dir[2] * position[2]);
            [dir[0], dir[1], dir[2], trans]
        };
        let proj = [
            row(right, fx, fwd, cx),
            row(down, fy, fwd, cy),
            row(fwd, 1.0, [0.0; 3], 0.0),
            row(fwd, 1.0, [0.0; 3], 0.0),
        ];
        CameraModel {
            proj,
            img_w,
            img_h,
        }
    }

    /// Pinhole camera with symmetric horizontal/vertical fields of view
    /// (degrees) and the principal point at the image center.
    pub fn from_fov(
        position: [f64; 3],
        yaw: f64,
        hfov_deg: f64,
        vfov_deg: f64,
        img_w: usize,
        img_h: usize,
    ) -> CameraModel {
        let fx = img_w as f64 / (2.0 * (hfov_deg.to_radians() / 2.0).tan());
        let fy = img_h as f64 / (2.0 * (vfov_deg.to_radians() / 2.0).tan());
        CameraModel::pinhole(
            position,
            yaw,
            fx,
            fy,
            img_w as f64 / 2.0,
            img_h as f64 / 2.0,
            img_w,
            img_h,
        )
    }
}

/// A ring of `count` cameras at equal yaw steps starting from `yaw0`, all at
/// `[0, 0, height]`. With `hfov_deg = 360/count` the fields of view tile the
/// full circle with disjoint interiors.
pub fn ring_rig(
    count: usize,
    yaw0: f64,
    height: f64,
    hfov_deg: f64,
    vfov_deg: f64,
    img_w: usize,
    img_h: usize,
) -> Vec<CameraModel> {
    (0..count)
        .map(|i| {
            let yaw = yaw0 + std::f64::consts::TAU * i as f64 / count as f64;
            CameraModel::from_fov([0.0, 0.0, height], yaw, hfov_deg, vfov_deg, img_w, img_h)
        })
        .collect()
}

/// Row-major cell centers, Q×2 columns (x, y).
pub fn bev_cell_centers(spec: &BEVGridSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let dx = (spec.extent.x_max - spec.extent.x_min) / spec.w_bev as f64;
    let dy = (spec.extent.y_max - spec.extent.y_min) / spec.h_bev as f64;
    let mut centers = Array2::zeros((spec.num_queries(), 2));
    for i in 0..spec.h_bev {
        for j in 0..spec.w_bev {
            let q = i * spec.w_bev + j;
            centers[[q, 0]] = spec.extent.x_min + (j as f64 + 0.5) * dx;
            centers[[q, 1]] = spec.extent.y_min + (i as f64 + 0.5) * dy;
        }
    }
    Ok(centers)
}

/// Projection of every (center, pillar height) pair onto one camera.
/// Invalid points (w ≤ ε, i.e. behind or on the camera plane) carry NaN
/// coordinates and a false flag.
#[derive(Debug, Clone)]
pub struct ProjectedPoints {
    /// Q × Z × 2 normalized (u, v).
    pub uv: Array3<f64>,
    /// Q × Z, true when the point is in front of the camera.
    pub valid: Array2<bool>,
}

/// Lift cell centers to pillars and project onto a camera.
pub fn lift_and_project(
    centers: &Array2<f64>,
    spec: &BEVGridSpec,
    cam: &CameraModel,
) -> Result<ProjectedPoints> {
    spec.validate()?;
    cam.validate()?;
    if centers.ncols() != 2 {
        return Err(Error::shape("lift_and_project", "Qx2", format!("{:?}", centers.dim())));
    }
    let q_count = centers.nrows();
    let z_count = spec.num_pillar_points();
    let mut uv = Array3::from_elem((q_count, z_count, 2), f64::NAN);
    let mut valid = Array2::from_elem((q_count, z_count), false);
    for q in 0..q_count {
        let (x, y) = (centers[[q, 0]], centers[[q, 1]]);
        for (k, &z) in spec.pillar_z.iter().enumerate() {
            let p = [x, y, z, 1.0];
            let mut h = [0.0f64; 4];
            for (r, h_r) in h.iter_mut().enumerate() {
                *h_r = cam.proj[r][0] * p[0]
                    + cam.proj[r][1] * p[1]
                    + cam.proj[r][2] * p[2]
                    + cam.proj[r][3];
            }
            if h[3] > TOL.projection_w_eps {
                uv[[q, k, 0]] = h[0] / h[3] / cam.img_w as f64;
                uv[[q, k, 1]] = h[1] / h[3] / cam.img_h as f64;
                valid[[q, k]] = true;
            }
        }
    }
    Ok(ProjectedPoints { uv, valid })
}

/// Hit mask: valid and inside the closed unit square. Returns the mask and
/// the hit count M.
pub fn compute_hits(points: &ProjectedPoints) -> (Array2<bool>, usize) {
    let mut hits = Array2::from_elem(points.valid.raw_dim(), false);
    let mut m = 0usize;
    for q in 0..points.valid.nrows() {
        for k in 0..points.valid.ncols() {
            let u = points.uv[[q, k, 0]];
            let v = points.uv[[q, k, 1]];
            let hit = points.valid[[q, k]] && (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
            hits[[q, k]] = hit;
            m += usize::from(hit);
        }
    }
    (hits, m)
}

/// Reference points for a full rig: per-camera normalized coordinates, hit
/// masks and hit counts.
#[derive(Debug, Clone)]
pub struct ReferencePointSet {
    /// Per camera: Q × Z × 2 normalized coordinates (NaN when invalid).
    pub uv: Vec<Array3<f64>>,
    /// Per camera: Q × Z hit mask b.
    pub hits: Vec<Array2<bool>>,
    /// Per camera hit count M.
    pub m_per_camera: Vec<usize>,
}

impl ReferencePointSet {
    pub fn build(spec: &BEVGridSpec, cameras: &[CameraModel]) -> Result<ReferencePointSet> {
        if cameras.is_empty() {
            return Err(Error::InvalidSpec("at least one camera required".into()));
        }
        let centers = bev_cell_centers(spec)?;
        let mut uv = Vec::with_capacity(cameras.len());
        let mut hits = Vec::with_capacity(cameras.len());
        let mut m_per_camera = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let projected = lift_and_project(&centers, spec, cam)?;
            let (b, m) = compute_hits(&projected);
            uv.push(projected.uv);
            hits.push(b);
            m_per_camera.push(m);
        }
        Ok(ReferencePointSet {
            uv,
            hits,
            m_per_camera,
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.hits.len()
    }

    pub fn num_queries(&self) -> usize {
        self.hits.first().map_or(0, |h| h.nrows())
    }

    pub fn num_pillar_points(&self) -> usize {
        self.hits.first().map_or(0, |h| h.ncols())
    }

    /// Hits per query summed over cameras and pillar points.
    pub fn hits_per_query(&self) -> Vec<usize> {
        let q_count = self.num_queries();
        let mut counts = vec![0usize; q_count];
        for cam_hits in &self.hits {
            for q in 0..q_count {
                for k in 0..cam_hits.ncols() {
                    counts[q] += usize::from(cam_hits[[q, k]]);
                }
            }
        }
        counts
    }

    pub fn total_hits(&self) -> usize {
        self.m_per_camera.iter().sum()
    }

    /// How many cameras hit each (query, pillar) point.
    pub fn cameras_hit_per_point(&self) -> Array2<usize> {
        let mut counts = Array2::zeros((self.num_queries(), self.num_pillar_points()));
        for cam_hits in &self.hits {
            for q in 0..counts.nrows() {
                for k in 0..counts.ncols() {
                    counts[[q, k]] += usize::from(cam_hits[[q, k]]);
                }
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square_spec(h: usize, w: usize, half: f64, pillar_z: Vec<f64>) -> BEVGridSpec {
        BEVGridSpec {
            h_bev: h,
            w_bev: w,
            extent: Extent {
                x_min: -half,
                x_max: half,
                y_min: -half,
                y_max: half,
            },
            pillar_z,
        }
    }

    #[test]
    fn single_cell_center_is_midpoint() {
        let spec = square_spec(1, 1, 1.0, vec![0.0]);
        let centers = bev_cell_centers(&spec).unwrap();
        assert_eq!(centers.dim(), (1, 2));
        assert_abs_diff_eq!(centers[[0, 0]], 0.0);
        assert_abs_diff_eq!(centers[[0, 1]], 0.0);
    }

    #[test]
    fn two_by_two_centers() {
        let spec = BEVGridSpec {
            h_bev: 2,
            w_bev: 2,
            extent: Extent {
                x_min: 0.0,
                x_max: 2.0,
                y_min: 0.0,
                y_max: 2.0,
            },
            pillar_z: vec![0.0],
        };
        let centers = bev_cell_centers(&spec).unwrap();
        let rows: Vec<(f64, f64)> = (0..4).map(|q| (centers[[q, 0]], centers[[q, 1]])).collect();
        assert_eq!(rows, vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]);
    }

    #[test]
    fn fifty_grid_has_2500_queries() {
        let spec = square_spec(50, 50, 50.0, vec![0.0]);
        assert_eq!(bev_cell_centers(&spec).unwrap().nrows(), 2500);
    }

    #[test]
    fn degenerate_extent_rejected() {
        let mut spec = square_spec(2, 2, 1.0, vec![0.0]);
        spec.extent.x_max = spec.extent.x_min;
        assert!(matches!(bev_cell_centers(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn optical_axis_projects_to_image_center() {
        let cam = CameraModel::from_fov([0.0, 0.0, 1.0], 0.0, 60.0, 60.0, 640, 480);
        let spec = square_spec(1, 1, 1.0, vec![1.0]); // pillar at camera height
        // Center (0,0) lifted to (0,0,1): exactly on the optical axis.
        let centers = bev_cell_centers(&spec).unwrap();
        // Move the single center forward along +x.
        let mut centers = centers;
        centers[[0, 0]] = 5.0;
        let p = lift_and_project(&centers, &spec, &cam).unwrap();
        assert!(p.valid[[0, 0]]);
        assert_abs_diff_eq!(p.uv[[0, 0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.uv[[0, 0, 1]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = CameraModel::from_fov([0.0, 0.0, 1.0], 0.0, 60.0, 60.0, 640, 480);
        let spec = square_spec(1, 1, 1.0, vec![0.0]);
        let mut centers = bev_cell_centers(&spec).unwrap();
        centers[[0, 0]] = -3.0; // behind a camera looking along +x
        let p = lift_and_project(&centers, &spec, &cam).unwrap();
        assert!(!p.valid[[0, 0]]);
        assert!(p.uv[[0, 0, 0]].is_nan());
        let (hits, m) = compute_hits(&p);
        assert!(!hits[[0, 0]]);
        assert_eq!(m, 0);
    }

    #[test]
    fn pillar_shares_u_and_v_is_monotone_in_z() {
        let cam = CameraModel::from_fov([0.0, 0.0, 1.0], 0.0, 90.0, 90.0, 800, 800);
        let spec = square_spec(1, 1, 1.0, vec![-1.0, 0.0, 1.0, 2.5]);
        let mut centers = bev_cell_centers(&spec).unwrap();
        centers[[0, 0]] = 6.0;
        centers[[0, 1]] = 1.0;
        let p = lift_and_project(&centers, &spec, &cam).unwrap();
        let u0 = p.uv[[0, 0, 0]];
        for k in 0..4 {
            assert!(p.valid[[0, k]]);
            assert_abs_diff_eq!(p.uv[[0, k, 0]], u0, epsilon = 1e-12);
        }
        for k in 1..4 {
            // Higher pillar points appear higher in the image (smaller v).
            assert!(p.uv[[0, k, 1]] < p.uv[[0, k - 1, 1]]);
        }
    }

    #[test]
    fn hit_boundary_is_inclusive() {
        let points = ProjectedPoints {
            uv: Array3::from_shape_vec(
                (3, 1, 2),
                vec![0.5, 0.5, 1.0, 1.0, 1.2, 0.5],
            )
            .unwrap(),
            valid: Array2::from_elem((3, 1), true),
        };
        let (hits, m) = compute_hits(&points);
        assert!(hits[[0, 0]]);
        assert!(hits[[1, 0]], "u=v=1.0 counts as a hit");
        assert!(!hits[[2, 0]]);
        assert_eq!(m, 2);
    }

    #[test]
    fn hits_imply_unit_square() {
        let spec = square_spec(16, 16, 40.0, vec![-1.0, 0.0, 1.5, 3.0]);
        let cams = ring_rig(6, 0.3, 1.0, 60.0, 120.0, 640, 480);
        let refs = ReferencePointSet::build(&spec, &cams).unwrap();
        for c in 0..refs.num_cameras() {
            for q in 0..refs.num_queries() {
                for k in 0..refs.num_pillar_points() {
                    if refs.hits[c][[q, k]] {
                        let (u, v) = (refs.uv[c][[q, k, 0]], refs.uv[c][[q, k, 1]]);
                        assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
                    }
                }
            }
        }
        assert!(refs.total_hits() > 0);
    }

    #[test]
    fn disjoint_fov_ring_hits_each_point_at_most_once() {
        let spec = square_spec(16, 16, 40.0, vec![-1.0, 0.0, 1.5, 3.0]);
        let cams = ring_rig(6, 0.17, 1.0, 60.0, 120.0, 640, 480);
        let refs = ReferencePointSet::build(&spec, &cams).unwrap();
        let per_point = refs.cameras_hit_per_point();
        assert!(per_point.iter().all(|&c| c <= 1));
        // M per camera bounded by Q·Z.
        let qz = spec.num_queries() * spec.num_pillar_points();
        assert!(refs.m_per_camera.iter().all(|&m| m <= qz));
    }

    #[test]
    fn consistent_pixel_scaling_preserves_normalized_uv() {
        let cam = CameraModel::from_fov([0.0, 0.0, 1.2], 0.4, 70.0, 50.0, 640, 480);
        let mut scaled = cam.clone();
        for col in 0..4 {
            scaled.proj[0][col] *= 2.0;
            scaled.proj[1][col] *= 3.0;
        }
        scaled.img_w = 1280;
        scaled.img_h = 1440;
        let spec = square_spec(4, 4, 20.0, vec![0.0, 1.0]);
        let centers = bev_cell_centers(&spec).unwrap();
        let a = lift_and_project(&centers, &spec, &cam).unwrap();
        let b = lift_and_project(&centers, &spec, &scaled).unwrap();
        for q in 0..centers.nrows() {
            for k in 0..2 {
                assert_eq!(a.valid[[q, k]], b.valid[[q, k]]);
                if a.valid[[q, k]] {
                    assert_abs_diff_eq!(a.uv[[q, k, 0]], b.uv[[q, k, 0]], epsilon = 1e-9);
                    assert_abs_diff_eq!(a.uv[[q, k, 1]], b.uv[[q, k, 1]], epsilon = 1e-9);
                }
            }
        }
    }
}
