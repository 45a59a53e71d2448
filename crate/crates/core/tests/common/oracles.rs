//! Slow, literal reference implementations.

use dualteach::crf::CrfParams;
use dualteach::losses::PairwiseKernelConfig;
use ndarray::{Array2, Array3};

/// Pairwise energy written straight from its definition: every ordered pair
/// of distinct pixels inside the window, averaged over pixels.
pub fn structural_energy(p: &Array3<f64>, image: &Array3<f64>, cfg: &PairwiseKernelConfig) -> f64 {
    let (c, h, w) = p.dim();
    let r = cfg.radius as i64;
    let mut total = 0.0;
    for yi in 0..h as i64 {
        for xi in 0..w as i64 {
            for yj in 0..h as i64 {
                for xj in 0..w as i64 {
                    if (yi, xi) == (yj, xj) || (yi - yj).abs() > r || (xi - xj).abs() > r {
                        continue;
                    }
                    let (a, b) = ((yi as usize, xi as usize), (yj as usize, xj as usize));
                    let dist2 = (((yi - yj).pow(2) + (xi - xj).pow(2)) as f64) * cfg.pixel_spacing.powi(2);
                    let color2: f64 = (0..3).map(|k| (image[[k, a.0, a.1]] - image[[k, b.0, b.1]]).powi(2)).sum();
                    let weight = (-dist2 / (2.0 * cfg.sigma_d.powi(2))).exp() * (-color2 / (2.0 * cfg.sigma_i.powi(2))).exp();
                    let disagreement: f64 = (0..c).map(|k| p[[k, a.0, a.1]] * (1.0 - p[[k, b.0, b.1]])).sum();
                    total += weight * disagreement;
                }
            }
        }
    }
    total / (h * w) as f64
}

/// Naive dense mean-field in the textbook energy form: unary `-ln U`, Potts
/// compatibility, `Q_i(l) ∝ exp(-ψ_u(l) - Σ_{l'} μ(l,l') Σ_{j≠i} k(i,j) Q_j(l'))`.
pub fn dense_crf(unary: &Array3<f64>, image: &Array3<f64>, p: &CrfParams) -> Array3<f64> {
    let (l, h, w) = unary.dim();
    let n = h * w;
    let pos = |i: usize| (((i / w) as f64) * p.pixel_spacing, ((i % w) as f64) * p.pixel_spacing);
    let col = |i: usize| [0, 1, 2].map(|k| image[[k, i / w, i % w]]);
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ((yi, xi), (yj, xj)) = (pos(i), pos(j));
            let (ci, cj) = (col(i), col(j));
            let f_app: f64 = ((yi - yj) / p.theta_alpha).powi(2)
                + ((xi - xj) / p.theta_alpha).powi(2)
                + (0..3).map(|c| ((ci[c] - cj[c]) / p.theta_beta).powi(2)).sum::<f64>();
            let f_smooth = ((yi - yj) / p.theta_gamma).powi(2) + ((xi - xj) / p.theta_gamma).powi(2);
            k[[i, j]] = p.w_appearance * (-0.5 * f_app).exp() + p.w_smoothness * (-0.5 * f_smooth).exp();
        }
    }
    let psi = |i: usize, c: usize| -unary[[c, i / w, i % w]].ln();
    let mut q = Array2::from_shape_fn((n, l), |(i, c)| unary[[c, i / w, i % w]]);
    for _ in 0..p.n_iters {
        let mut next = Array2::zeros((n, l));
        for i in 0..n {
            let mut e = vec![0.0; l];
            for (c, e_c) in e.iter_mut().enumerate() {
                let mut pairwise = 0.0;
                for cp in 0..l {
                    if cp == c {
                        continue;
                    }
                    for j in 0..n {
                        pairwise += p.compat * k[[i, j]] * q[[j, cp]];
                    }
                }
                *e_c = psi(i, c) + pairwise;
            }
            let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
            let z: f64 = e.iter().map(|v| (lo - v).exp()).sum();
            for c in 0..l {
                next[[i, c]] = (lo - e[c]).exp() / z;
            }
        }
        q = next;
    }
    Array3::from_shape_fn((l, h, w), |(c, y, x)| q[[y * w + x, c]])
}

/// mIoU from per-pixel membership counts, classes with an empty union left
/// out.
pub fn miou(pred: &[Array2<u8>], gt: &[Array2<u8>], classes: usize, ignore: u8) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, g) in pred.iter().zip(gt) {
            for (&pv, &gv) in p.iter().zip(g.iter()) {
                if gv == ignore {
                    continue;
                }
                if pv == c && gv == c {
                    inter += 1;
                }
                if pv == c || gv == c {
                    union += 1;
                }
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    sum / present as f64
}
