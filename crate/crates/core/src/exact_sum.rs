//! Correctly rounded floating-point summation.
//!
//! The result is the exact real sum of the inputs rounded once to the
//! nearest `f64` (ties to even), so it does not depend on input order.
//! Sample embeddings use this so that permuting feature columns leaves
//! them bit-identical.

/// Shewchuk's non-overlapping partials with a half-even final rounding.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut special = 0.0;
    let mut has_special = false;
    for v in values {
        if !v.is_finite() {
            special += v;
            has_special = true;
            continue;
        }
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if has_special {
        return special;
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact oracle: values restricted to |x| in [2^-20, 2^20] are integer
    /// multiples of 2^-72, so their sum is exact in i128 and one
    /// int-to-float conversion performs the single rounding.
    fn fixed_point_sum(values: &[f64]) -> f64 {
        let scale = 2f64.powi(72);
        let total: i128 = values.iter().map(|v| (v * scale) as i128).sum();
        (total as f64) / scale
    }

    #[test]
    fn classic_cancellation() {
        assert_eq!(exact_sum([1e16, 1.0, -1e16]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
    }

    #[test]
    fn non_finite_propagates() {
        assert!(exact_sum([1.0, f64::NAN]).is_nan());
        assert_eq!(exact_sum([1.0, f64::INFINITY]), f64::INFINITY);
    }

    fn bounded() -> impl Strategy<Value = f64> {
        (any::<bool>(), -20i32..20, 0u64..(1u64 << 52)).prop_map(|(neg, e, m)| {
            let v = (1.0 + m as f64 / (1u64 << 52) as f64) * 2f64.powi(e);
            if neg {
                -v
            } else {
                v
            }
        })
    }

    proptest! {
        #[test]
        fn matches_fixed_point_oracle(values in prop::collection::vec(bounded(), 1..24)) {
            prop_assert_eq!(exact_sum(values.iter().copied()).to_bits(), fixed_point_sum(&values).to_bits());
        }

        #[test]
        fn order_independent(values in prop::collection::vec(-1e3f64..1e3, 1..24), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(exact_sum(values).to_bits(), exact_sum(shuffled).to_bits());
        }
    }
}
