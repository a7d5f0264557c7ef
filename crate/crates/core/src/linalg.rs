//! Dense row-major kernels.
//!
//! The products skip exact zeros of the left operand. Bag-of-words feature
//! matrices are mostly zeros, which makes the first layer far cheaper than a
//! blocked dense GEMM would be; hidden layers are small enough not to care.
//! Accumulation order is fixed (ascending inner index), so every kernel is
//! bit-reproducible.

use ndarray::Array2;

/// `a · b`
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows(), "matmul inner dimension");
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (av, bv) = (
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    let mut out = vec![0.0; n * m];
    if m > 0 {
        for (i, dst) in out.chunks_exact_mut(m).enumerate() {
            for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (d, &bpj) in dst.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *d += aip * bpj;
                }
            }
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.nrows();
    assert_eq!(k, b.ncols(), "matmul_nt inner dimension");
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (av, bv) = (
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &av[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &bv[j * k..(j + 1) * k];
            out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(n, b.nrows(), "matmul_tn inner dimension");
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (av, bv) = (
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let br = &bv[i * m..(i + 1) * m];
        for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, &b) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *d += aip * b;
            }
        }
    }
    Array2::from_shape_vec((k, m), out).expect("shape")
}

/// Row-wise log-softmax, stabilized by subtracting the row maximum.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
