//! Small numeric helpers shared across modules.

/// Sums values in ascending order so the result does not depend on the
/// order they were supplied in. Used for every sum over clusters, which
/// makes fits exactly equivariant under cluster relabelling.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Componentwise [`canonical_sum`] over a list of fixed-size vectors.
pub fn canonical_sum_vec<const N: usize>(terms: &[[f64; N]]) -> [f64; N] {
    let mut buf = Vec::with_capacity(terms.len());
    std::array::from_fn(|p| {
        buf.clear();
        buf.extend(terms.iter().map(|t| t[p]));
        canonical_sum(&mut buf)
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Sample standard deviation (`n - 1` denominator); zero for a single value.
pub fn sample_std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of already sorted values, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}
