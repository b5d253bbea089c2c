//! Strided matrix product on top of `matrixmultiply`.

/// Strided view of a row-major or transposed matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// `rows × cols` row-major matrix.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major `cols × rows` matrix, viewed as `rows × cols`.
    pub fn tr(data: &'a [f64], stored_cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: stored_cols as isize,
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with `c` row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(max_offset(m, k, a.rs, a.cs) < a.data.len());
    assert!(max_offset(k, n, b.rs, b.cs) < b.data.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}
