//! Dense-matrix forms of the grid Laplacian and of the KL divergence.

use diffreg::grid::GridShape;
use diffreg::model::PosteriorParams;

/// `D − A` built from coordinate adjacency (neighbors at L1 distance 1).
pub fn dense_laplacian(s: &GridShape) -> Vec<Vec<f64>> {
    let n = s.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ci, cj) = (s.coords(i), s.coords(j));
            let dist: usize = ci.iter().zip(&cj).map(|(a, b)| a.abs_diff(*b)).sum();
            if dist == 1 {
                l[i][j] = -1.0;
                l[i][i] += 1.0;
            }
        }
    }
    l
}

/// `zᵀ M z`.
pub fn quad(m: &[Vec<f64>], z: &[f64]) -> f64 {
    (0..z.len())
        .map(|i| z[i] * (0..z.len()).map(|j| m[i][j] * z[j]).sum::<f64>())
        .sum()
}

/// Terms of `½[tr(λDΣ) − log|Σ| + μᵀ(λL)μ]` and `tr(λLΣ)`, from dense
/// matrices and an explicit diagonal `Σ`.
pub struct DenseKl {
    pub trace_d: f64,
    pub trace_l: f64,
    pub logdet: f64,
    pub smooth: f64,
}

impl DenseKl {
    pub fn new(post: &PosteriorParams, lambda: f64) -> Self {
        let s = post.shape();
        let l = dense_laplacian(s);
        let n = s.len();
        let mut out = DenseKl {
            trace_d: 0.0,
            trace_l: 0.0,
            logdet: 0.0,
            smooth: 0.0,
        };
        for a in 0..s.ndim() {
            let lv = post.log_var.component(a);
            let sigma: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i == j { lv[i].exp() } else { 0.0 })
                        .collect()
                })
                .collect();
            for i in 0..n {
                // diagonal entries of λDΣ and λLΣ as full row-by-column products
                let d_sigma: f64 = (0..n)
                    .map(|k| if k == i { lambda * l[i][i] } else { 0.0 } * sigma[k][i])
                    .sum();
                let l_sigma: f64 = (0..n).map(|k| lambda * l[i][k] * sigma[k][i]).sum();
                out.trace_d += d_sigma;
                out.trace_l += l_sigma;
                out.logdet += sigma[i][i].ln();
            }
            out.smooth += lambda * quad(&l, post.mu.component(a));
        }
        out
    }

    pub fn value(&self) -> f64 {
        0.5 * (self.trace_d - self.logdet + self.smooth)
    }
}
