//! Small dense least squares via Householder QR.

/// Solves `min ||A x - y||` for a tall matrix with `N` columns.
///
/// Returns `None` when `A` is rank deficient (a diagonal of `R` collapses
/// relative to the largest one).
pub(crate) fn solve<const N: usize>(rows: &[[f64; N]], y: &[f64]) -> Option<([f64; N], f64)> {
    let m = rows.len();
    if m < N || y.len() != m {
        return None;
    }
    let mut a: Vec<[f64; N]> = rows.to_vec();
    let mut b = y.to_vec();

    // Column scaling keeps the rank test meaningful when columns differ in magnitude.
    let mut scale = [1.0f64; N];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        *s = norm;
        for r in a.iter_mut() {
            r[j] /= norm;
        }
    }

    let mut diag = [0.0f64; N];
    for k in 0..N {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..N {
                let dot: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[i][j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                b[i] -= f * v[i - k];
            }
        }
        diag[k] = a[k][k];
    }

    let max_diag = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    if diag.iter().any(|d| d.abs() <= 1e-10 * max_diag) {
        return None;
    }

    let mut x = [0.0f64; N];
    for k in (0..N).rev() {
        let mut s = b[k];
        for j in k + 1..N {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    for j in 0..N {
        x[j] /= scale[j];
    }

    let rss = rows
        .iter()
        .zip(y)
        .map(|(r, &yi)| {
            let pred: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
            (pred - yi).powi(2)
        })
        .sum();
    Some((x, rss))
}
