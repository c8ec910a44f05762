//! Small dense matrix kernels backing the convolution and FC layers.
//! Row-major everywhere; loop orders keep the innermost stride unit-length.

/// c[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v += a_it * b_v;
            }
        }
    }
}

/// c[m x p] += a[m x n] * b^T where b is [p x n]
pub fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * p..(i + 1) * p];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            c_row[j] += acc;
        }
    }
}

/// c[k x n] += a^T * b, where a is [m x k] and b is [m x n]
pub fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (j, &a_ij) in a_row.iter().enumerate() {
            if a_ij == 0.0 {
                continue;
            }
            let c_row = &mut c[j * n..(j + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v += a_ij * b_v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut c0 = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c0, m, k, n);

        // a * (b^T)^T via matmul_abt_acc with bt[n x k]
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        matmul_abt_acc(&a, &bt, &mut c1, m, k, n);

        // (a^T)^T * b via matmul_atb_acc with at[k x m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_atb_acc(&at, &b, &mut c2, k, m, n);

        for i in 0..m * n {
            assert!((c0[i] - c1[i]).abs() < 1e-12);
            assert!((c0[i] - c2[i]).abs() < 1e-12);
        }
    }
}
