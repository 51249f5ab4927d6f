//! Same-size 2-D convolution with zero padding, stride 1 and odd square
//! kernels, on planar `C x H x W` buffers.
//!
//! Weights are laid out `[out][in][ky][kx]`. Each routine lowers the layer to a
//! matrix product over an unfolded `(C k k) x (H W)` patch matrix.

use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

/// Scalar type the network kernels are instantiated for (`f32` or `f64`).
pub trait Real: Float + AddAssign + Sum + Default + Send + Sync + 'static {
    /// `C <- alpha A B + beta C` with arbitrary strides (see `matrixmultiply`).
    ///
    /// # Safety
    /// The strided views must stay inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `m x n` matrix view over a slice, optionally read transposed.
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape and strides after the optional transpose.
    fn view(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c <- a b + beta c` where `c` is row-major.
fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, rsa, csa) = a.view();
    let (kb, n, rsb, csb) = b.view();
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(c.len() >= m * n);
    // SAFETY: both views were bounds-checked against their slices above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn unfolded_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Row and column ranges of output pixels that see an in-bounds input
    /// pixel at offset `(dy, dx)`.
    #[inline]
    fn valid(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.height as isize, self.width as isize);
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        let x0 = (-dx).max(0);
        let x1 = (w - dx).min(w);
        if y0 >= y1 || x0 >= x1 {
            return (0, 0, 0, 0);
        }
        (y0 as usize, y1 as usize, x0 as usize, x1 as usize)
    }

    #[inline]
    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let k = self.kernel;
        let r = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - r, (t % k) as isize - r))
    }
}

/// Unfolds the input: row `(ci, tap)`, column `p` holds the input pixel that
/// tap `tap` reads for output pixel `p` (zero outside the image).
fn im2col<T: Real>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let plane = g.plane();
    let kk = g.kernel * g.kernel;
    let w = g.width;
    let mut cols = vec![T::zero(); g.unfolded_rows() * plane];
    for ci in 0..g.in_channels {
        let src_plane = &input[ci * plane..(ci + 1) * plane];
        for (t, dy, dx) in g.offsets() {
            let row = &mut cols[(ci * kk + t) * plane..(ci * kk + t + 1) * plane];
            let (y0, y1, x0, x1) = g.valid(dy, dx);
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize) * w + (x0 as isize + dx) as usize;
                row[y * w + x0..y * w + x1].copy_from_slice(&src_plane[src..src + (x1 - x0)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters unfolded rows back onto the input planes.
fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], grad_in: &mut [T]) {
    let plane = g.plane();
    let kk = g.kernel * g.kernel;
    let w = g.width;
    for ci in 0..g.in_channels {
        let dst_plane = &mut grad_in[ci * plane..(ci + 1) * plane];
        for (t, dy, dx) in g.offsets() {
            let row = &cols[(ci * kk + t) * plane..(ci * kk + t + 1) * plane];
            let (y0, y1, x0, x1) = g.valid(dy, dx);
            for y in y0..y1 {
                let dst = ((y as isize + dy) as usize) * w + (x0 as isize + dx) as usize;
                for (d, &s) in dst_plane[dst..dst + (x1 - x0)]
                    .iter_mut()
                    .zip(&row[y * w + x0..y * w + x1])
                {
                    *d += s;
                }
            }
        }
    }
}

/// `out = conv(input, weight) + bias`; `bias` may be empty.
pub fn forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let plane = g.plane();
    assert_eq!(input.len(), g.in_channels * plane);
    assert_eq!(out.len(), g.out_channels * plane);
    assert_eq!(weight.len(), g.weight_len());
    for (co, out_plane) in out.chunks_exact_mut(plane).enumerate() {
        let b = bias.get(co).copied().unwrap_or_else(T::zero);
        out_plane.iter_mut().for_each(|v| *v = b);
    }
    let cols = im2col(g, input);
    matmul(
        Mat::new(weight, g.out_channels, g.unfolded_rows()),
        Mat::new(&cols, g.unfolded_rows(), plane),
        T::one(),
        out,
    );
}

/// Accumulates `grad_in += conv^T(grad_out, weight)`.
pub fn backward_input<T: Real>(g: &ConvGeometry, grad_out: &[T], weight: &[T], grad_in: &mut [T]) {
    let plane = g.plane();
    assert_eq!(grad_out.len(), g.out_channels * plane);
    assert_eq!(grad_in.len(), g.in_channels * plane);
    let mut cols = vec![T::zero(); g.unfolded_rows() * plane];
    matmul(
        Mat::new(weight, g.out_channels, g.unfolded_rows()).t(),
        Mat::new(grad_out, g.out_channels, plane),
        T::zero(),
        &mut cols,
    );
    col2im_add(g, &cols, grad_in);
}

/// Accumulates weight and bias gradients; `grad_bias` may be empty.
pub fn backward_params<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let plane = g.plane();
    assert_eq!(grad_out.len(), g.out_channels * plane);
    assert_eq!(grad_weight.len(), g.weight_len());
    for (co, go) in grad_out.chunks_exact(plane).enumerate() {
        if let Some(gb) = grad_bias.get_mut(co) {
            *gb += go.iter().copied().sum::<T>();
        }
    }
    let cols = im2col(g, input);
    matmul(
        Mat::new(grad_out, g.out_channels, plane),
        Mat::new(&cols, g.unfolded_rows(), plane).t(),
        T::one(),
        grad_weight,
    );
}
