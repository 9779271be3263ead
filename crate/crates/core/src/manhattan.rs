//! Camera-to-Manhattan rotation by mean shift of scene directions on the
//! unit sphere.
//!
//! Plane normals and 3D line directions are unsigned directions; every
//! computation here treats `v` and `-v` as the same sample.

use crate::features::{LineSegment, PlaneObservation};
use crate::geometry::{nearest_rotation, rotation_distance, ManhattanFrame};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Weight per plane inlier pixel.
pub const PLANE_WEIGHT_PER_INLIER: f64 = 1e-3;
/// Weight per meter of 3D line length.
pub const LINE_WEIGHT_PER_METER: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManhattanError {
    #[error("directions support only {supported} Manhattan axes")]
    InsufficientDirections { supported: usize },
    #[error("mean shift did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("no frame among the first {frames} produced a Manhattan frame")]
    InitializationFailed { frames: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionSource {
    PlaneNormal,
    VanishingDirection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionSample {
    /// Unit vector in the camera frame.
    pub direction: Vector3<f64>,
    pub source: DirectionSource,
    pub weight: f64,
}

impl DirectionSample {
    /// Normalizes `direction`; `None` for a zero vector or non-positive weight.
    pub fn new(direction: Vector3<f64>, source: DirectionSource, weight: f64) -> Option<Self> {
        let direction = direction.try_normalize(1e-12)?;
        (weight > 0.0 && weight.is_finite()).then_some(Self {
            direction,
            source,
            weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftParams {
    /// Gaussian kernel width on tangent-plane distance (radians).
    pub bandwidth: f64,
    /// Samples farther than this from an axis do not vote for it (radians).
    pub cone: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the per-iteration rotation update (radians).
    pub tolerance: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            bandwidth: 10f64.to_radians(),
            cone: 30f64.to_radians(),
            max_iterations: 20,
            tolerance: 0.05f64.to_radians(),
        }
    }
}

/// Result of one mean-shift run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MWEstimate {
    /// Camera <- Manhattan rotation; column `k` is Manhattan axis `k` seen
    /// from the camera.
    pub rotation: Matrix3<f64>,
    /// Samples inside each axis cone at the last iteration.
    pub support: [usize; 3],
    pub converged: bool,
    pub iterations: usize,
}

impl MWEstimate {
    pub fn into_converged(self) -> Result<Self, ManhattanError> {
        if self.converged {
            Ok(self)
        } else {
            Err(ManhattanError::NoConvergence {
                iterations: self.iterations,
            })
        }
    }

    pub fn supported_axes(&self) -> usize {
        self.support.iter().filter(|&&s| s > 0).count()
    }
}

/// Plane normals weighted by inlier count and line directions weighted by
/// 3D length. Lines without a 3D fit are skipped.
pub fn collect_directions(planes: &[PlaneObservation], lines: &[LineSegment]) -> Vec<DirectionSample> {
    let planes = planes.iter().filter_map(|p| {
        DirectionSample::new(
            p.plane.normal,
            DirectionSource::PlaneNormal,
            p.inlier_points.len() as f64 * PLANE_WEIGHT_PER_INLIER,
        )
    });
    let lines = lines.iter().filter_map(|l| {
        let dir = l.direction_3d?;
        DirectionSample::new(
            dir,
            DirectionSource::VanishingDirection,
            l.length_3d()? * LINE_WEIGHT_PER_METER,
        )
    });
    planes.chain(lines).collect()
}

/// Whether two samples are farther apart than `cone` (sign-invariant).
fn spans_two_directions(samples: &[DirectionSample], cone: f64) -> bool {
    let c = cone.cos();
    samples
        .iter()
        .enumerate()
        .any(|(i, a)| samples[i + 1..].iter().any(|b| a.direction.dot(&b.direction).abs() < c))
}

/// Tangent-plane mean shift of one axis. Returns the shifted axis, the
/// number of samples in its cone and their total kernel weight; `None` when
/// the cone is empty.
fn shift_axis(
    axis: &Vector3<f64>,
    samples: &[DirectionSample],
    params: &MeanShiftParams,
) -> Option<(Vector3<f64>, usize, f64)> {
    let cos_cone = params.cone.cos();
    let inv_two_h2 = 1.0 / (2.0 * params.bandwidth * params.bandwidth);
    let mut sum = Vector3::zeros();
    let mut total = 0.0;
    let mut count = 0;
    for s in samples {
        let dot = s.direction.dot(axis);
        if dot.abs() < cos_cone {
            continue;
        }
        let v = s.direction * dot.signum();
        let c = dot.abs().min(1.0);
        let theta = c.acos();
        // Log map at `axis`: tangent direction scaled to the geodesic angle.
        let perp = v - axis * c;
        let norm = perp.norm();
        let tangent = if norm > 1e-15 {
            perp * (theta / norm)
        } else {
            Vector3::zeros()
        };
        let w = s.weight * (-theta * theta * inv_two_h2).exp();
        sum += tangent * w;
        total += w;
        count += 1;
    }
    if count == 0 || total <= 0.0 {
        return None;
    }
    let m = sum / total;
    let len = m.norm();
    let shifted = if len > 1e-15 {
        axis * len.cos() + m * (len.sin() / len)
    } else {
        *axis
    };
    Some((shifted.normalize(), count, total))
}

/// Mean shift of the three Manhattan axes starting from `seed`.
///
/// Each iteration shifts every supported axis toward the kernel-weighted
/// mean of the samples in its cone, then projects the shifted triad back to
/// the nearest rotation with each axis weighted by its kernel mass. Running
/// out of iterations is not an error: the estimate is returned with
/// `converged = false`.
pub fn mean_shift_rotation(
    samples: &[DirectionSample],
    seed: &Matrix3<f64>,
    params: &MeanShiftParams,
) -> Result<MWEstimate, ManhattanError> {
    if !spans_two_directions(samples, params.cone) {
        return Err(ManhattanError::InsufficientDirections {
            supported: usize::from(!samples.is_empty()),
        });
    }
    let mut rotation = *seed;
    let mut support = [0; 3];
    for iteration in 1..=params.max_iterations {
        let mut shifted = Matrix3::zeros();
        for k in 0..3 {
            let axis: Vector3<f64> = rotation.column(k).into();
            match shift_axis(&axis, samples, params) {
                // Columns weighted by kernel mass: weighted orthogonal
                // Procrustes, so weakly supported axes barely move strong ones.
                Some((a, n, mass)) => {
                    shifted.set_column(k, &(a * mass));
                    support[k] = n;
                }
                None => support[k] = 0,
            }
        }
        let supported = support.iter().filter(|&&s| s > 0).count();
        if supported < 2 {
            return Err(ManhattanError::InsufficientDirections { supported });
        }
        let next = nearest_rotation(&shifted);
        let update = rotation_distance(&rotation, &next);
        rotation = next;
        if update < params.tolerance {
            return Ok(MWEstimate {
                rotation,
                support,
                converged: true,
                iterations: iteration,
            });
        }
    }
    Ok(MWEstimate {
        rotation,
        support,
        converged: false,
        iterations: params.max_iterations,
    })
}

/// Seed triad from the samples alone: the heaviest direction, the heaviest
/// direction roughly orthogonal to it, and their cross product.
pub fn seed_from_samples(samples: &[DirectionSample]) -> Option<Matrix3<f64>> {
    fn heaviest<'a>(it: impl Iterator<Item = &'a DirectionSample>) -> Option<&'a DirectionSample> {
        it.fold(None, |best: Option<&DirectionSample>, s| match best {
            Some(b) if b.weight >= s.weight => Some(b),
            _ => Some(s),
        })
    }
    let a = heaviest(samples.iter())?.direction;
    let b = heaviest(samples.iter().filter(|s| s.direction.dot(&a).abs() < 0.5))?.direction;
    let b = (b - a * a.dot(&b)).normalize();
    Some(Matrix3::from_columns(&[a, b, a.cross(&b)]))
}

/// The column relabeling (signed permutation with determinant +1) of `r`
/// closest to the identity.
pub fn canonical_labeling(r: &Matrix3<f64>) -> Matrix3<f64> {
    const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best = *r;
    let mut best_trace = f64::NEG_INFINITY;
    for perm in PERMUTATIONS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for k in 0..3 {
                let s = if signs & (1 << k) != 0 { -1.0 } else { 1.0 };
                m.set_column(k, &(r.column(perm[k]) * s));
            }
            if m.determinant() <= 0.0 {
                continue;
            }
            let trace = m.trace();
            if trace > best_trace + 1e-12 {
                best_trace = trace;
                best = m;
            }
        }
    }
    best
}

/// Manhattan frame from a single frame's directions: seeds from the samples,
/// runs mean shift to convergence, relabels the axes canonically and makes
/// this camera the world frame.
pub fn initialize_from_samples(
    samples: &[DirectionSample],
    params: &MeanShiftParams,
) -> Result<(ManhattanFrame, MWEstimate), ManhattanError> {
    let seed = seed_from_samples(samples).ok_or(ManhattanError::InsufficientDirections {
        supported: usize::from(!samples.is_empty()),
    })?;
    let mut estimate = mean_shift_rotation(samples, &seed, params)?.into_converged()?;
    let labeled = canonical_labeling(&estimate.rotation);
    // Carry the support counts along with their relabeled axes.
    let mut support = [0; 3];
    for k in 0..3 {
        let col = labeled.column(k);
        let src = (0..3)
            .max_by(|&i, &j| {
                let di = col.dot(&estimate.rotation.column(i)).abs();
                let dj = col.dot(&estimate.rotation.column(j)).abs();
                di.total_cmp(&dj)
            })
            .expect("three axes");
        support[k] = estimate.support[src];
    }
    estimate.rotation = labeled;
    estimate.support = support;
    let frame = ManhattanFrame::new(labeled.transpose()).expect("mean shift output is a rotation");
    Ok((frame, estimate))
}

/// Tries the frames in order and initializes from the first one that
/// yields a converged estimate. Returns the index of that frame.
pub fn initialize_manhattan<'a, I>(
    frames: I,
    params: &MeanShiftParams,
) -> Result<(usize, ManhattanFrame, MWEstimate), ManhattanError>
where
    I: IntoIterator<Item = &'a [DirectionSample]>,
{
    let mut tried = 0;
    for (i, samples) in frames.into_iter().enumerate() {
        tried += 1;
        if let Ok((frame, estimate)) = initialize_from_samples(samples, params) {
            return Ok((i, frame, estimate));
        }
    }
    Err(ManhattanError::InitializationFailed { frames: tried })
}

/// Per-frame tracking step: mean shift seeded at `predicted` (camera <-
/// Manhattan). When mean shift fails or does not converge the prediction is
/// returned unchanged with `converged = false`.
pub fn track_manhattan_rotation(
    samples: &[DirectionSample],
    predicted: &Matrix3<f64>,
    params: &MeanShiftParams,
) -> MWEstimate {
    match mean_shift_rotation(samples, predicted, params) {
        Ok(est) if est.converged => est,
        Ok(est) => MWEstimate {
            rotation: *predicted,
            support: est.support,
            converged: false,
            iterations: est.iterations,
        },
        Err(_) => MWEstimate {
            rotation: *predicted,
            support: [0; 3],
            converged: false,
            iterations: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, rot_x, rot_y, rot_z};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_samples(r: &Matrix3<f64>, axes: &[usize]) -> Vec<DirectionSample> {
        axes.iter()
            .map(|&k| DirectionSample::new(r.column(k).into(), DirectionSource::PlaneNormal, 1.0).unwrap())
            .collect()
    }

    fn noisy_samples(r: &Matrix3<f64>, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<DirectionSample> {
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|i| {
                let axis: Vector3<f64> = r.column(i % 3).into();
                let tilt = crate::geometry::any_orthogonal(&axis);
                let spin = exp_so3(&(axis * rng.random_range(0.0..std::f64::consts::TAU)));
                let perturb = exp_so3(&(spin * tilt * rng.sample(normal)));
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                DirectionSample::new(perturb * axis * sign, DirectionSource::PlaneNormal, 1.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn exact_samples_are_a_fixed_point() {
        let r = rot_z(0.3) * rot_x(-0.2);
        let est = mean_shift_rotation(&axis_samples(&r, &[0, 1, 2]), &r, &MeanShiftParams::default()).unwrap();
        assert!(est.converged);
        assert_eq!(est.iterations, 1);
        assert!(rotation_distance(&est.rotation, &r) < 1e-12);
        assert_eq!(est.support, [1, 1, 1]);
    }

    #[test]
    fn single_axis_is_insufficient() {
        let r = Matrix3::identity();
        let samples = axis_samples(&r, &[2, 2]);
        assert!(matches!(
            mean_shift_rotation(&samples, &r, &MeanShiftParams::default()),
            Err(ManhattanError::InsufficientDirections { .. })
        ));
        assert!(!track_manhattan_rotation(&samples, &r, &MeanShiftParams::default()).converged);
    }

    #[test]
    fn noisy_axes_recovered_from_perturbed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rot_y(0.7) * rot_z(-1.1);
        let samples = noisy_samples(&r, 300, 5f64.to_radians(), &mut rng);
        let seed = exp_so3(&Vector3::new(0.15, -0.1, 0.12)) * r;
        let est = mean_shift_rotation(&samples, &seed, &MeanShiftParams::default()).unwrap();
        assert!(est.converged);
        assert!(rotation_distance(&est.rotation, &r).to_degrees() < 1.0);
    }

    #[test]
    fn two_axes_determine_the_third() {
        let r = rot_x(0.4) * rot_z(0.2);
        let samples = axis_samples(&r, &[0, 1, 0, 1]);
        let est = mean_shift_rotation(
            &samples,
            &(exp_so3(&Vector3::new(0.05, 0.0, 0.05)) * r),
            &MeanShiftParams::default(),
        )
        .unwrap();
        assert_eq!(est.support[2], 0);
        assert!(rotation_distance(&est.rotation, &r) < 1e-3f64.to_radians());
    }

    #[test]
    fn collect_weights() {
        let line = LineSegment {
            endpoints_3d: Some((Vector3::zeros(), Vector3::new(0.0, 2.0, 0.0))),
            direction_3d: Some(Vector3::y()),
            ..LineSegment::new(nalgebra::Vector2::zeros(), nalgebra::Vector2::new(1.0, 0.0))
        };
        let unfitted = LineSegment::new(nalgebra::Vector2::zeros(), nalgebra::Vector2::new(1.0, 0.0));
        let s = collect_directions(&[], &[line, unfitted]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].weight, 2.0);
        assert!(collect_directions(&[], &[]).is_empty());
    }

    #[test]
    fn initialization_relabels_toward_identity() {
        let r_cm = rot_z(20f64.to_radians());
        // Columns shuffled and negated: the labeling must undo it.
        let shuffled = Matrix3::from_columns(&[r_cm.column(1).into(), -r_cm.column(0), r_cm.column(2).into()]);
        let samples = axis_samples(&shuffled, &[0, 1, 2]);
        let (frame, est) = initialize_from_samples(&samples, &MeanShiftParams::default()).unwrap();
        assert!(rotation_distance(&est.rotation, &r_cm) < 1e-9);
        assert!(rotation_distance(&frame.r_mw, &rot_z(-20f64.to_radians())) < 1e-9);
    }

    #[test]
    fn initialization_fails_without_structure() {
        let lone = axis_samples(&Matrix3::identity(), &[0]);
        let frames: Vec<&[DirectionSample]> = vec![&lone; 5];
        assert_eq!(
            initialize_manhattan(frames, &MeanShiftParams::default()).unwrap_err(),
            ManhattanError::InitializationFailed { frames: 5 }
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sign_flips_do_not_change_the_estimate(seed in 0u64..1000, flips in proptest::collection::vec(any::<bool>(), 60)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = exp_so3(&Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            let samples = noisy_samples(&r, 60, 3f64.to_radians(), &mut rng);
            let flipped: Vec<_> = samples
                .iter()
                .zip(&flips)
                .map(|(s, &f)| DirectionSample { direction: if f { -s.direction } else { s.direction }, ..*s })
                .collect();
            let p = MeanShiftParams::default();
            let a = mean_shift_rotation(&samples, &r, &p).unwrap();
            let b = mean_shift_rotation(&flipped, &r, &p).unwrap();
            prop_assert!(rotation_distance(&a.rotation, &b.rotation) < 1e-9);
        }

        #[test]
        fn estimate_is_rotation_equivariant(seed in 0u64..1000, q in proptest::array::uniform3(-3.0f64..3.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rot_z(0.4) * rot_x(0.1);
            let samples = noisy_samples(&r, 60, 3f64.to_radians(), &mut rng);
            let q = exp_so3(&Vector3::from(q));
            let rotated: Vec<_> = samples.iter().map(|s| DirectionSample { direction: q * s.direction, ..*s }).collect();
            let p = MeanShiftParams::default();
            let a = mean_shift_rotation(&samples, &r, &p).unwrap();
            let b = mean_shift_rotation(&rotated, &(q * r), &p).unwrap();
            prop_assert!(rotation_distance(&(q * a.rotation), &b.rotation) < 1e-6);
            prop_assert!(crate::geometry::orthonormality_error(&b.rotation) < 1e-9);
        }
    }
}
