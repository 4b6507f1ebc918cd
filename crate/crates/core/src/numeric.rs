//! Compensated reductions over `f32` weight buffers.
//!
//! Every reduction runs in `f64` with a fixed blocked-pairwise tree: leaves
//! of `BLOCK` elements are summed with eight independent accumulators and the
//! leaf sums are combined pairwise. The tree depends only on the slice length,
//! so results are bit-identical regardless of thread count.

const BLOCK: usize = 512;

/// Pairwise sum of `f64` values.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Blocked pairwise reduction over a slice: leaves of at most `BLOCK`
/// elements go to `leaf`, leaf sums are combined pairwise.
fn blocked<F: Fn(&[f32]) -> f64>(x: &[f32], leaf: &F) -> f64 {
    if x.len() <= BLOCK {
        return leaf(x);
    }
    let mid = x.len() / 2;
    blocked(&x[..mid], leaf) + blocked(&x[mid..], leaf)
}

#[inline]
fn fold8(acc: [f64; 8], tail: f64) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Eight-lane sum of `f(v)` over one leaf.
#[inline]
fn lanes8<F: Fn(f32) -> f64>(x: &[f32], f: F) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = x.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().fold(0.0, |t, &v| t + f(v));
    for c in chunks {
        for (slot, &v) in acc.iter_mut().zip(c) {
            *slot += f(v);
        }
    }
    fold8(acc, tail)
}

/// Eight-lane sum of `f(a, b)` over one leaf of paired entries.
#[inline]
fn lanes8_pair<F: Fn(f32, f32) -> f64>(a: &[f32], b: &[f32], f: F) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(0.0, |t, (&x, &y)| t + f(x, y));
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f(x[l], y[l]);
        }
    }
    fold8(acc, tail)
}

/// Blocked reduction over two equal-length slices. Leaves are aligned by
/// splitting an index range, so the tree matches the single-slice one.
fn blocked_pair<F: Fn(f32, f32) -> f64>(a: &[f32], b: &[f32], f: &F) -> f64 {
    if a.len() <= BLOCK {
        return lanes8_pair(a, b, f);
    }
    let mid = a.len() / 2;
    blocked_pair(&a[..mid], &b[..mid], f) + blocked_pair(&a[mid..], &b[mid..], f)
}

pub fn sum(x: &[f32]) -> f64 {
    blocked(x, &|leaf| lanes8(leaf, |v| v as f64))
}

pub fn sum_sq(x: &[f32]) -> f64 {
    blocked(x, &|leaf| {
        lanes8(leaf, |v| {
            let v = v as f64;
            v * v
        })
    })
}

/// `sum((a - b)^2)` with the difference formed in `f64`.
pub fn sum_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    blocked_pair(a, b, &|x, y| {
        let d = x as f64 - y as f64;
        d * d
    })
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    blocked_pair(a, b, &|x, y| x as f64 * y as f64)
}

/// Central moments of a sample, normalized by `n` (population moments).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralMoments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl CentralMoments {
    /// Two-pass computation: the mean first, then centered powers.
    pub fn of(x: &[f32]) -> Self {
        let n = x.len();
        if n == 0 {
            return CentralMoments {
                n,
                mean: f64::NAN,
                m2: f64::NAN,
                m3: f64::NAN,
                m4: f64::NAN,
            };
        }
        let mean = sum(x) / n as f64;
        let centered = |p: u32| {
            blocked(x, &|leaf| {
                lanes8(leaf, |v| {
                    let d = v as f64 - mean;
                    match p {
                        2 => d * d,
                        3 => d * d * d,
                        _ => {
                            let d2 = d * d;
                            d2 * d2
                        }
                    }
                })
            }) / n as f64
        };
        CentralMoments {
            n,
            mean,
            m2: centered(2),
            m3: centered(3),
            m4: centered(4),
        }
    }

    pub fn kurtosis(&self) -> f64 {
        self.m4 / (self.m2 * self.m2)
    }

    pub fn skewness(&self) -> f64 {
        self.m3 / self.m2.powf(1.5)
    }
}
