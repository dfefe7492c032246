//! Depth, point-cloud and camera-trajectory metrics.
//!
//! Conventions: δ1 uses a ratio threshold of 1.25; Chamfer distance is the
//! mean of accuracy and completeness with unsquared Euclidean distances;
//! trajectory errors are computed on camera-to-world poses after a
//! similarity alignment of the camera centers.

use nalgebra::{Matrix3, RealField, Vector3};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::toyworld::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {what} has {got}, expected {want}")]
    Length {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("ground-truth depth at index {index} is not positive")]
    NonPositiveDepth { index: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate configuration: covariance rank {rank} < {required}")]
    Degenerate { rank: usize, required: usize },
    #[error("need at least {want} entries, got {got}")]
    TooFew { want: usize, got: usize },
}

pub const DELTA1_THRESHOLD: f64 = 1.25;

fn lit<T: RealField + Copy>(x: f64) -> T {
    nalgebra::convert(x)
}

/// A finite, non-empty set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: RealField + Copy> {
    points: Vec<Vector3<T>>,
}

impl<T: RealField + Copy> PointCloud<T> {
    pub fn new(points: Vec<Vector3<T>>) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::Empty("point cloud"));
        }
        if points.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(EvalError::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

impl PointCloud<f64> {
    /// Stacks the rows of `n×3` tensors into one cloud.
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<Self, EvalError> {
        let mut points = Vec::new();
        for t in tensors {
            let shape = t.shape();
            if shape.len() != 2 || shape[1] != 3 {
                return Err(EvalError::Length {
                    what: "point row width",
                    want: 3,
                    got: shape.last().copied().unwrap_or(0),
                });
            }
            points.extend(t.data().chunks_exact(3).map(|r| Vector3::new(r[0], r[1], r[2])));
        }
        Self::new(points)
    }
}

/// Returns `(absrel, δ1)` for a depth map against a strictly positive ground truth.
pub fn absrel_delta1<T: RealField + Copy>(pred: &[T], gt: &[T], threshold: T) -> Result<(T, T), EvalError> {
    if gt.is_empty() {
        return Err(EvalError::Empty("depth map"));
    }
    if pred.len() != gt.len() {
        return Err(EvalError::Length {
            what: "predicted depth",
            want: gt.len(),
            got: pred.len(),
        });
    }
    if let Some(index) = gt.iter().position(|&g| !(g > T::zero())) {
        return Err(EvalError::NonPositiveDepth { index });
    }
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(EvalError::NonFinite("predicted depth"));
    }
    let mut rel = T::zero();
    let mut hits = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        rel += (p - g).abs() / g;
        let ratio = (p / g).max(g / p);
        if ratio < threshold {
            hits += 1;
        }
    }
    let n: T = lit(gt.len() as f64);
    Ok((rel / n, lit::<T>(hits as f64) / n))
}

/// `y ≈ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform<T: RealField + Copy> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: RealField + Copy> SimilarityTransform<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x * self.scale + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment<T: RealField + Copy> {
    pub transform: SimilarityTransform<T>,
    /// Root-mean-square distance between aligned source and target.
    pub rms_residual: T,
}

/// Least-squares similarity (or rigid, when `with_scale` is false) mapping
/// `source` onto `target`. Requires a cross-covariance of rank at least 2.
pub fn umeyama_align<T: RealField + Copy>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    with_scale: bool,
) -> Result<Alignment<T>, EvalError> {
    umeyama_with_rank(source.points(), target.points(), with_scale, 2)
}

fn umeyama_with_rank<T: RealField + Copy>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    with_scale: bool,
    min_rank: usize,
) -> Result<Alignment<T>, EvalError> {
    if source.len() != target.len() {
        return Err(EvalError::Length {
            what: "target cloud",
            want: source.len(),
            got: target.len(),
        });
    }
    let need = min_rank + 1;
    if source.len() < need {
        return Err(EvalError::TooFew {
            want: need,
            got: source.len(),
        });
    }
    let n: T = lit(source.len() as f64);
    let mu_x = source.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mu_y = target.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::<T>::zeros();
    let mut var_x = T::zero();
    for (x, y) in source.iter().zip(target) {
        let dx = x - mu_x;
        let dy = y - mu_y;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let sv = svd.singular_values;
    let top = sv.max();
    let tol = top * lit(1e-10);
    let rank = if top > T::zero() { sv.iter().filter(|&&s| s > tol).count() } else { 0 };
    if rank < min_rank {
        return Err(EvalError::Degenerate {
            rank,
            required: min_rank,
        });
    }

    let mut signs = Vector3::new(T::one(), T::one(), T::one());
    if (u.determinant() * v_t.determinant()) < T::zero() {
        // Flip the axis of the smallest singular value.
        let smallest = sv.imin();
        signs[smallest] = -T::one();
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        sv.component_mul(&signs).sum() / var_x
    } else {
        T::one()
    };
    let translation = mu_y - rotation * mu_x * scale;
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    let sq = source
        .iter()
        .zip(target)
        .fold(T::zero(), |a, (x, y)| a + (transform.apply(x) - y).norm_squared());
    Ok(Alignment {
        transform,
        rms_residual: (sq / n).sqrt(),
    })
}

fn sq_dist<T: RealField + Copy>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min sampling starting from `start`. Ties go to the lowest index.
/// Returns every index when `count ≥ n`.
pub fn farthest_point_sampling<T: RealField + Copy>(cloud: &PointCloud<T>, count: usize, start: usize) -> Vec<usize> {
    let pts = cloud.points();
    let n = pts.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let start = start % n;
    let mut picked = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut nearest: Vec<T> = pts.iter().map(|p| sq_dist(p, &pts[start])).collect();
    picked.push(start);
    taken[start] = true;
    while picked.len() < count {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if !(nearest[i] > nearest[b]) => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("unselected point remains");
        picked.push(b);
        taken[b] = true;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &pts[b]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    picked
}

/// Static 3D tree for exact nearest-neighbor queries.
pub struct KdTree<'a, T: RealField + Copy> {
    points: &'a [Vector3<T>],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a, T: RealField + Copy> KdTree<'a, T> {
    pub fn new(points: &'a [Vector3<T>]) -> Self {
        let mut tree = Self {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis]
                .partial_cmp(&pts[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let point = idx[mid];
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut hi[1..], depth + 1);
        self.nodes.push(KdNode {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_sq(&self, q: &Vector3<T>) -> Option<T> {
        let mut best: Option<T> = None;
        if let Some(r) = self.root {
            self.search(r, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &Vector3<T>, best: &mut Option<T>) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d = sq_dist(q, p);
        if best.is_none_or(|b| d < b) {
            *best = Some(d);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if best.is_none_or(|b| diff * diff < b) {
                self.search(c, q, best);
            }
        }
    }
}

fn mean_nearest<T: RealField + Copy>(from: &[Vector3<T>], to: &[Vector3<T>]) -> T {
    let tree = KdTree::new(to);
    let sum = from
        .iter()
        .map(|p| tree.nearest_sq(p).expect("non-empty cloud").sqrt())
        .fold(T::zero(), |a, d| a + d);
    sum / lit(from.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudDistances<T> {
    pub accuracy: T,
    pub completeness: T,
    pub chamfer: T,
}

/// Accuracy (pred → gt), completeness (gt → pred) and their mean.
pub fn chamfer_acc_comp<T: RealField + Copy>(pred: &PointCloud<T>, gt: &PointCloud<T>) -> CloudDistances<T> {
    let accuracy = mean_nearest(pred.points(), gt.points());
    let completeness = mean_nearest(gt.points(), pred.points());
    CloudDistances {
        accuracy,
        completeness,
        chamfer: (accuracy + completeness) / lit(2.0),
    }
}

/// Camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T: RealField + Copy> {
    pub rotation: Matrix3<T>,
    pub center: Vector3<T>,
}

impl From<&Pose> for CameraPose<f64> {
    fn from(p: &Pose) -> Self {
        Self {
            rotation: p.rotation.transpose(),
            center: p.center(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryErrors<T> {
    pub ate: T,
    pub rte: T,
    /// Degrees.
    pub rre: T,
}

fn rotation_angle<T: RealField + Copy>(r: &Matrix3<T>) -> T {
    let sin2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    sin2.atan2(r.trace() - T::one())
}

/// ATE over aligned centers, RTE and RRE over consecutive pairs.
///
/// Centers are similarity-aligned onto the ground truth first. Collinear
/// trajectories are accepted: the leftover rotational freedom does not
/// change any of the three errors.
pub fn ate_rte_rre<T: RealField + Copy>(
    pred: &[CameraPose<T>],
    gt: &[CameraPose<T>],
) -> Result<TrajectoryErrors<T>, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length {
            what: "predicted trajectory",
            want: gt.len(),
            got: pred.len(),
        });
    }
    if gt.len() < 2 {
        return Err(EvalError::TooFew { want: 2, got: gt.len() });
    }
    let src: Vec<_> = pred.iter().map(|p| p.center).collect();
    let dst: Vec<_> = gt.iter().map(|p| p.center).collect();
    let spread = |v: &[Vector3<T>]| v.iter().any(|c| (c - v[0]).norm_squared() > T::zero());
    let transform = if spread(&src) && spread(&dst) {
        umeyama_with_rank(&src, &dst, true, 1)?.transform
    } else {
        // Static cameras: translation-only alignment.
        let n: T = lit(src.len() as f64);
        let mu_x = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
        let mu_y = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
        SimilarityTransform {
            translation: mu_y - mu_x,
            ..SimilarityTransform::identity()
        }
    };
    let aligned: Vec<CameraPose<T>> = pred
        .iter()
        .map(|p| CameraPose {
            rotation: transform.rotation * p.rotation,
            center: transform.apply(&p.center),
        })
        .collect();

    let n: T = lit(gt.len() as f64);
    let ate_sq = aligned
        .iter()
        .zip(gt)
        .fold(T::zero(), |a, (p, g)| a + (p.center - g.center).norm_squared());

    let mut rte_sq = T::zero();
    let mut rre = T::zero();
    for i in 0..gt.len() - 1 {
        let rel = |a: &CameraPose<T>, b: &CameraPose<T>| {
            let rt = a.rotation.transpose();
            (rt * b.rotation, rt * (b.center - a.center))
        };
        let (rp, tp) = rel(&aligned[i], &aligned[i + 1]);
        let (rg, tg) = rel(&gt[i], &gt[i + 1]);
        let err_rot = rg.transpose() * rp;
        let err_trans = rg.transpose() * (tp - tg);
        rte_sq += err_trans.norm_squared();
        rre += rotation_angle(&err_rot);
    }
    let pairs: T = lit((gt.len() - 1) as f64);
    Ok(TrajectoryErrors {
        ate: (ate_sq / n).sqrt(),
        rte: (rte_sq / pairs).sqrt(),
        rre: rre / pairs * lit(180.0) / T::pi(),
    })
}
