//! Dense row-major helpers for the small matrices in the hybrid layers.

/// `out = W x + b` for a `rows × cols` row-major `w`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(w.len(), b.len() * cols);
    b.iter()
        .zip(w.chunks_exact(cols))
        .map(|(bi, row)| bi + dot(row, x))
        .collect()
}

/// `Wᵀ v` for a `rows × cols` row-major `w` (`v` has length `rows`).
pub fn matvec_t(w: &[f64], v: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (vi, row) in v.iter().zip(w.chunks_exact(cols)) {
        if *vi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(row) {
            *o += vi * wij;
        }
    }
    out
}

/// `G += u vᵀ` into a row-major `u.len() × v.len()` matrix.
pub fn add_outer(g: &mut [f64], u: &[f64], v: &[f64]) {
    for (ui, row) in u.iter().zip(g.chunks_exact_mut(v.len())) {
        if *ui == 0.0 {
            continue;
        }
        for (gij, vj) in row.iter_mut().zip(v) {
            *gij += ui * vj;
        }
    }
}

pub fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_transpose() {
        // [[1,2],[3,4]]
        let w = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(affine(&w, &[0.5, -0.5], &[1.0, 1.0]), vec![3.5, 6.5]);
        assert_eq!(matvec_t(&w, &[1.0, 1.0], 2), vec![4.0, 6.0]);
        let mut g = vec![0.0; 4];
        add_outer(&mut g, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(g, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
