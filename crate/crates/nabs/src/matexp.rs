use ndarray::Array2;

/// Matrix exponential by scaling-and-squaring with a Taylor kernel.
///
/// The matrices seen here are tiny (at most 2n x 2n with n <= 8) and, for
/// growth-bound use, nonnegative with modest norm, so the plain Taylor kernel
/// after halving to norm <= 0.5 is accurate to near machine precision.
pub fn expm(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");

    let norm = inf_norm(a);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = a.mapv(|v| v / f64::powi(2.0, squarings as i32));

    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=40 {
        term = term.dot(&b) / k as f64;
        result += &term;
        if inf_norm(&term) < 1e-300 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

fn inf_norm(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_for_zero_matrix() {
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(expm(&z), Array2::<f64>::eye(3));
    }

    #[test]
    fn diagonal_matrix_exponentiates_entrywise() {
        let a = array![[1.0, 0.0], [0.0, -2.0]];
        let e = expm(&a);
        assert!((e[[0, 0]] - 1f64.exp()).abs() < 1e-14);
        assert!((e[[1, 1]] - (-2f64).exp()).abs() < 1e-14);
        assert!(e[[0, 1]].abs() < 1e-15 && e[[1, 0]].abs() < 1e-15);
    }

    #[test]
    fn nilpotent_matrix_truncates_exactly() {
        let a = array![[0.0, 3.0], [0.0, 0.0]];
        let e = expm(&a);
        assert_eq!(e, array![[1.0, 3.0], [0.0, 1.0]]);
    }

    #[test]
    fn rotation_generator_gives_cos_sin() {
        let th = 0.7f64;
        let a = array![[0.0, -th], [th, 0.0]];
        let e = expm(&a);
        assert!((e[[0, 0]] - th.cos()).abs() < 1e-14);
        assert!((e[[1, 0]] - th.sin()).abs() < 1e-14);
    }

    /// Oracle: long-product approximation exp(A) ~ (I + A/m)^m for large m,
    /// on a matrix big enough in norm to force squaring steps.
    #[test]
    fn matches_limit_definition() {
        let a = array![[0.9, 1.7, 0.0], [0.2, 0.0, 2.1], [0.0, 0.3, 0.5]];
        let m = 1 << 22;
        let step = a.mapv(|v| v / m as f64) + Array2::<f64>::eye(3);
        let mut approx = Array2::<f64>::eye(3);
        let mut pow = step;
        let mut k = m;
        while k > 0 {
            if k & 1 == 1 {
                approx = approx.dot(&pow);
            }
            pow = pow.dot(&pow);
            k >>= 1;
        }
        let e = expm(&a);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (e[[i, j]] - approx[[i, j]]).abs() < 1e-5,
                    "entry ({i},{j}): {} vs {}",
                    e[[i, j]],
                    approx[[i, j]]
                );
            }
        }
    }
}
