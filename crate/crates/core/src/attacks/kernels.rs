//! Optimizer kernels shared by training and the attack engines.

use crate::rng::DeterministicRng;
use crate::tensor::TensorF;

/// Adaptive-moment estimation state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_betas(len: usize, beta1: f32, beta2: f32) -> Self {
        Self { beta1, beta2, ..Self::new(len) }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Warm-up and cosine-decay learning rate.
///
/// Ramps linearly from 0 to `base` over the first `warmup_frac` of the
/// budget, holds, then cosine-decays to 0 over the tail that starts at
/// `decay_start_frac` of the budget.
pub fn lr_schedule(t: usize, total: usize, base: f32, warmup_frac: f32, decay_start_frac: f32) -> f32 {
    assert!(t < total, "step {t} out of budget {total}");
    let warm_end = ((total as f32 * warmup_frac).round() as usize).max(1);
    let decay_start = ((total as f32 * decay_start_frac).floor() as usize).max(warm_end);
    if t < warm_end {
        return base * t as f32 / warm_end as f32;
    }
    if t < decay_start || decay_start >= total {
        return base;
    }
    let progress = (t - decay_start) as f32 / (total - decay_start) as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Gradient step on latents followed by per-sample rescaling to the
/// sqrt(k) sphere where standard-normal vectors concentrate.
///
/// `z` is [B, k]. A sample that lands exactly on zero is re-randomized
/// from the provided stream.
pub fn spherical_step(z: &TensorF, grad: &TensorF, lr: f32, rng: &mut DeterministicRng) -> TensorF {
    assert_eq!(z.shape(), grad.shape());
    let (b, k) = (z.shape()[0], z.shape()[1]);
    let target = (k as f64).sqrt();
    let mut out = vec![0.0_f32; b * k];
    for s in 0..b {
        let row = &mut out[s * k..(s + 1) * k];
        for i in 0..k {
            row[i] = z.data()[s * k + i] - lr * grad.data()[s * k + i];
        }
        let mut norm = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            log::warn!("spherical step hit the zero vector; re-randomizing sample {s}");
            for v in row.iter_mut() {
                *v = rng.normal_f32();
            }
            norm = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        }
        let scale = (target / norm) as f32;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    TensorF::new(z.shape().to_vec(), out).unwrap()
}

/// Euclidean projection of `v` onto the l1 ball of radius `r` centered at
/// `center`, by sort-based soft thresholding.
pub fn project_l1_ball(v: &TensorF, center: &TensorF, r: f64) -> TensorF {
    assert_eq!(v.shape(), center.shape());
    assert!(r > 0.0, "radius must be positive");
    let w: Vec<f64> =
        v.data().iter().zip(center.data()).map(|(a, c)| (*a as f64) - (*c as f64)).collect();
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    if l1 <= r {
        return v.clone();
    }
    let mut mags: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0_f64;
    let mut theta = 0.0_f64;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - r) / (j as f64 + 1.0);
        if u > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    let data: Vec<f32> = w
        .iter()
        .zip(center.data())
        .map(|(wi, c)| {
            let shrunk = (wi.abs() - theta).max(0.0) * wi.signum();
            (*c as f64 + shrunk) as f32
        })
        .collect();
    TensorF::new(v.shape().to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0_f32, -2.0, 0.5];
        let orig = p.clone();
        for _ in 0..50 {
            st.step(&mut p, &[0.0, 0.0, 0.0], 0.1);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0_f32, 0.0];
        st.step(&mut p, &[3.0, -0.7], 0.05);
        // bias-corrected first step is lr * g/|g| up to eps
        assert!((p[0] + 0.05).abs() < 1e-6, "got {}", p[0]);
        assert!((p[1] - 0.05).abs() < 1e-6, "got {}", p[1]);
    }

    // Scalar reference implementation followed for 100 steps.
    #[test]
    fn adam_matches_scalar_reference() {
        let mut st = AdamState::new(1);
        let mut p = vec![1.3_f32];

        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut p_ref = 1.3_f64;
        let (b1, b2, eps, lr) = (0.9_f64, 0.999_f64, 1e-8_f64, 0.01_f64);
        let mut rng = DeterministicRng::new(RngSeed(2));
        for t in 1..=100 {
            let g = rng.standard_normal();
            st.step(&mut p, &[g as f32], lr as f32);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p_ref -= lr * mhat / (vhat.sqrt() + eps);
            assert!((p[0] as f64 - p_ref).abs() < 1e-6, "step {t}: {} vs {p_ref}", p[0]);
        }
    }

    #[test]
    fn schedule_hits_the_documented_endpoints() {
        let (total, base) = (1000, 0.1_f32);
        assert_eq!(lr_schedule(0, total, base, 0.05, 0.25), 0.0);
        assert!((lr_schedule(50, total, base, 0.05, 0.25) - base).abs() < 1e-7);
        assert!((lr_schedule(249, total, base, 0.05, 0.25) - base).abs() < 1e-7);
        let tail = lr_schedule(total - 1, total, base, 0.05, 0.25);
        assert!(tail < 1e-3 * base, "tail lr {tail}");
        // cosine midpoint of the decay window sits at base/2
        let mid = lr_schedule(250 + 375, total, base, 0.05, 0.25);
        assert!((mid - base * 0.5).abs() < 1e-3);
    }

    #[test]
    fn spherical_step_keeps_sample_norms() {
        let mut rng = DeterministicRng::new(RngSeed(3));
        let k = 16;
        let z = TensorF::new(vec![3, k], (0..3 * k).map(|_| rng.normal_f32()).collect()).unwrap();
        let g = TensorF::new(vec![3, k], (0..3 * k).map(|_| rng.normal_f32()).collect()).unwrap();
        let out = spherical_step(&z, &g, 0.1, &mut rng);
        for s in 0..3 {
            let norm: f64 = out.data()[s * k..(s + 1) * k]
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 4.0).abs() < 1e-5, "sample {s} norm {norm}");
        }
    }

    #[test]
    fn spherical_step_with_zero_gradient_renormalizes() {
        let mut rng = DeterministicRng::new(RngSeed(4));
        let z = TensorF::new(vec![1, 4], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let g = TensorF::zeros(&[1, 4]);
        let out = spherical_step(&z, &g, 0.1, &mut rng);
        assert_eq!(out.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    // Analytic optimum: minimizing ||z - z0||^2 over the sphere is z0 itself
    // when z0 already lies on it.
    #[test]
    fn spherical_descent_reaches_on_sphere_target() {
        let k = 9;
        let mut rng = DeterministicRng::new(RngSeed(5));
        let mut z0: Vec<f32> = (0..k).map(|_| rng.normal_f32()).collect();
        let norm: f64 = z0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let target = (k as f64).sqrt();
        for v in z0.iter_mut() {
            *v = (*v as f64 * target / norm) as f32;
        }
        let z0 = TensorF::new(vec![1, k], z0).unwrap();
        let mut z = TensorF::new(vec![1, k], (0..k).map(|_| rng.normal_f32()).collect()).unwrap();
        for _ in 0..500 {
            let grad = z.sub(&z0).unwrap().scale(2.0);
            z = spherical_step(&z, &grad, 0.05, &mut rng);
        }
        let err: f64 = z.sub(&z0).unwrap().norm_l2();
        assert!(err < 1e-2, "distance to optimum {err}");
    }

    #[test]
    fn l1_projection_returns_interior_points_unchanged() {
        let v = TensorF::from_vec(vec![0.2, -0.3, 0.1]);
        let c = TensorF::zeros(&[3]);
        let out = project_l1_ball(&v, &c, 1.0);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn l1_projection_matches_hand_solved_cases() {
        let c = TensorF::zeros(&[2]);
        let p1 = project_l1_ball(&TensorF::from_vec(vec![3.0, 0.0]), &c, 1.0);
        assert!((p1.data()[0] - 1.0).abs() < 1e-6 && p1.data()[1].abs() < 1e-6);
        let p2 = project_l1_ball(&TensorF::from_vec(vec![1.0, 1.0]), &c, 1.0);
        assert!((p2.data()[0] - 0.5).abs() < 1e-6 && (p2.data()[1] - 0.5).abs() < 1e-6);
    }

    /// Dense grid search oracle over the 2-D l1 ball.
    fn grid_search_projection(v: [f64; 2], center: [f64; 2], r: f64, step: f64) -> [f64; 2] {
        let mut best = center;
        let mut best_d = f64::MAX;
        let steps = (2.0 * r / step).ceil() as i64;
        for i in 0..=steps {
            let x = center[0] - r + i as f64 * step;
            let rem = r - (x - center[0]).abs();
            if rem < 0.0 {
                continue;
            }
            let jmax = (2.0 * rem / step).ceil() as i64;
            for j in 0..=jmax {
                // clamp so the scan never leaves the feasible set
                let y = (center[1] - rem + j as f64 * step).min(center[1] + rem);
                let d = (x - v[0]).powi(2) + (y - v[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = [x, y];
                }
            }
        }
        best
    }

    #[test]
    fn l1_projection_matches_grid_search_oracle() {
        let mut rng = DeterministicRng::new(RngSeed(6));
        for trial in 0..200 {
            let r = 0.2 + 0.8 * rng.uniform();
            let v = [4.0 * (rng.uniform() - 0.5), 4.0 * (rng.uniform() - 0.5)];
            let c = [rng.uniform() - 0.5, rng.uniform() - 0.5];
            let vt = TensorF::from_vec(vec![v[0] as f32, v[1] as f32]);
            let ct = TensorF::from_vec(vec![c[0] as f32, c[1] as f32]);
            let ours = project_l1_ball(&vt, &ct, r);
            let oracle = grid_search_projection(v, c, r, 1e-3);
            let d = ((ours.data()[0] as f64 - oracle[0]).powi(2)
                + (ours.data()[1] as f64 - oracle[1]).powi(2))
            .sqrt();
            assert!(d < 2e-3, "trial {trial}: grid oracle disagrees by {d}");
        }
    }

    #[test]
    fn l1_projection_membership_and_idempotence_high_dim() {
        let mut rng = DeterministicRng::new(RngSeed(7));
        for _ in 0..100 {
            let n = 100;
            let v = TensorF::new(vec![n], (0..n).map(|_| 3.0 * rng.normal_f32()).collect()).unwrap();
            let c = TensorF::new(vec![n], (0..n).map(|_| rng.normal_f32()).collect()).unwrap();
            let r = 1.0 + 9.0 * rng.uniform();
            let p = project_l1_ball(&v, &c, r);
            let l1: f64 = p.sub(&c).unwrap().norm_l1();
            assert!(l1 <= r + 1e-4, "left the ball: {l1} > {r}");
            let pp = project_l1_ball(&p, &c, r);
            for (a, b) in p.data().iter().zip(pp.data()) {
                assert!((a - b).abs() < 1e-6, "projection not idempotent");
            }
        }
    }
}
