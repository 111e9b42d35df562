use super::Element;

/// Dense matrix product over row-major buffers.
///
/// `a` is logically `m×k` (stored `k×m` when `trans_a`), `b` is logically
/// `k×n` (stored `n×k` when `trans_b`). With `accumulate` the product is
/// added into `c` instead of overwriting it.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every address reached by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided view into a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub transposed: bool,
}

impl View {
    pub fn sub(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            row_stride,
            transposed: false,
        }
    }

    pub fn t(mut self) -> Self {
        self.transposed = !self.transposed;
        std::mem::swap(&mut self.rows, &mut self.cols);
        self
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.row_stride as isize)
        } else {
            (self.row_stride as isize, 1)
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        let (rs, cs) = self.strides();
        self.offset + (self.rows - 1) * rs as usize + (self.cols - 1) * cs as usize
    }
}

/// `c[cv] (+)= scale * a[av] · b[bv]` on strided sub-matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<T: Element>(
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    c: &mut [T],
    cv: View,
    scale: T,
    accumulate: bool,
) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.max_index() < a.len() || av.cols == 0);
    assert!(bv.max_index() < b.len() || bv.rows == 0);
    assert!(cv.max_index() < c.len());
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    let (rsc, csc) = cv.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every view was bounds-checked against its buffer above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            scale,
            a.as_ptr().add(av.offset),
            rsa,
            csa,
            b.as_ptr().add(bv.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(cv.offset),
            rsc,
            csc,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU constants in `T`.
#[derive(Clone, Copy)]
pub(crate) struct Gelu<T> {
    c: T,
    a: T,
    half: T,
    two: T,
    three: T,
}

impl<T: Element> Gelu<T> {
    pub fn new() -> Self {
        Self {
            c: T::from_f64_lossy(GELU_C),
            a: T::from_f64_lossy(GELU_A),
            half: T::from_f64_lossy(0.5),
            two: T::from_f64_lossy(2.0),
            three: T::from_f64_lossy(3.0),
        }
    }

    // tanh through exp.
    #[inline]
    fn tanh_inner(&self, x: T) -> T {
        let u = self.c * (x + self.a * x * x * x);
        T::one() - self.two / ((self.two * u).exp() + T::one())
    }

    #[inline]
    pub fn value(&self, x: T) -> T {
        self.half * x * (T::one() + self.tanh_inner(x))
    }

    #[inline]
    pub fn grad(&self, x: T) -> T {
        let t = self.tanh_inner(x);
        self.half * (T::one() + t)
            + self.half * x * (T::one() - t * t) * self.c * (T::one() + self.three * self.a * x * x)
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn softmax_row_is_stable() {
        let mut r = [1000.0f32, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, [1.0, 0.0]);
    }
}
