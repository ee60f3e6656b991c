/// Row-major matrix view: `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`, `out` row-major.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |v: View<'_>, r: usize, c: usize| (r - 1) * v.rs + (c - 1) * v.cs;
    assert!(last(a, m, k) < a.data.len(), "gemm: lhs too short");
    assert!(last(b, k, n) < b.data.len(), "gemm: rhs too short");
    assert!(m * n <= out.len(), "gemm: output too short");
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the three slices, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
