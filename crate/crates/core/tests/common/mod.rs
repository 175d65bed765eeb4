//! Scalar reference implementations and fixtures shared by the integration
//! tests. Nothing here calls into the library's loss code.

#![allow(dead_code)]

use echo_contrast::embedding::{EmbeddingBatch, Role, Temperature, ViewLabelBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(r: &mut impl Rng, b: usize, d: usize) -> Mat {
    (0..b)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn batch(rows: &Mat, role: Role) -> EmbeddingBatch {
    EmbeddingBatch::from_rows(rows, role).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn unit(rows: &Mat) -> Mat {
    rows.iter()
        .map(|r| {
            let n = dot(r, r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// `tau * <a_i, b_j>` by explicit loops.
pub fn sim(a: &Mat, b: &Mat, tau: f64) -> Mat {
    let mut s = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            s[i][j] = tau * dot(&a[i], &b[j]);
        }
    }
    s
}

pub fn transpose(s: &Mat) -> Mat {
    let mut t = vec![vec![0.0; s.len()]; s[0].len()];
    for i in 0..s.len() {
        for j in 0..s[0].len() {
            t[j][i] = s[i][j];
        }
    }
    t
}

/// Mean over rows of `-log softmax(row)[i]`.
pub fn ce_diag(s: &Mat) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut z = 0.0;
        for j in 0..b {
            z += s[i][j].exp();
        }
        total += -(s[i][i].exp() / z).ln();
    }
    total / b as f64
}

pub fn clip_oracle(s_it: &Mat) -> f64 {
    0.5 * (ce_diag(s_it) + ce_diag(&transpose(s_it)))
}

/// Same-view positives, diagonal excluded from both numerator and
/// denominator. `s` holds the unmasked image-image similarities.
pub fn view_oracle(s: &Mat, views: &[u32]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for k in 0..b {
            if k != i {
                denom += s[i][k].exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..b {
            if j != i && views[j] == views[i] {
                sum += -(s[i][j].exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / b as f64
}

/// BCE with target 0 on `tau * <t_i, n_i>`.
pub fn neg_oracle(t: &Mat, n: &Mat, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        let u = tau * dot(&t[i], &n[i]);
        let p = 1.0 / (1.0 + (-u).exp());
        total += -(1.0 - p).ln();
    }
    total / t.len() as f64
}

/// A loss problem in raw (unnormalised) coordinates.
#[derive(Clone, Debug)]
pub struct Problem {
    pub image: Mat,
    pub text: Mat,
    pub negated: Mat,
    pub views: Vec<u32>,
    pub log_tau: f64,
    pub lambda_view: f64,
    pub lambda_neg: f64,
}

impl Problem {
    pub fn random(seed: u64, max_b: usize, max_d: usize) -> Self {
        let mut r = rng(seed);
        let b = r.random_range(2..=max_b);
        let d = r.random_range(2..=max_d);
        let n_views = r.random_range(1..=b as u32);
        Self {
            image: random_rows(&mut r, b, d),
            text: random_rows(&mut r, b, d),
            negated: random_rows(&mut r, b, d),
            views: (0..b).map(|_| r.random_range(0..n_views)).collect(),
            log_tau: r.random_range(0.0..3.0),
            lambda_view: r.random_range(0.0..1.0),
            lambda_neg: r.random_range(0.0..1.0),
        }
    }

    pub fn tau(&self) -> Temperature {
        Temperature::from_log(self.log_tau)
    }

    pub fn view_labels(&self) -> ViewLabelBatch {
        ViewLabelBatch::new(self.views.clone())
    }

    /// Total objective evaluated entirely by the scalar oracles.
    pub fn oracle_total(&self) -> f64 {
        let tau = self.log_tau.exp();
        let (zi, zt, zn) = (unit(&self.image), unit(&self.text), unit(&self.negated));
        clip_oracle(&sim(&zi, &zt, tau))
            + self.lambda_view * view_oracle(&sim(&zi, &zi, tau), &self.views)
            + self.lambda_neg * neg_oracle(&zt, &zn, tau)
    }
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
