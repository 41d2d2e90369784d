//! Raw dense kernels shared by the recorded (tape) path and the tape-free
//! inference path. All loops run in a fixed order so results are
//! reproducible bit for bit.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            // zero rows of b contribute nothing; pruned weights and dead
            // activations make this common
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Geometry of a 2-d cross-correlation over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Returns `None` when the output would have a non-positive dimension
    /// or the stride is zero.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return None;
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if kernel_h > padded_h || kernel_w > padded_w {
            return None;
        }
        Some(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input offset feeding column row `(c, ki, kj)` at output position
    /// `(oh, ow)`, or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<usize> {
        let h = (oh * self.stride + ki).checked_sub(self.padding)?;
        let w = (ow * self.stride + kj).checked_sub(self.padding)?;
        if h >= self.height || w >= self.width {
            return None;
        }
        Some((c * self.height + h) * self.width + w)
    }

    /// Unfolds one sample `[C×H×W]` into columns `[C·kh·kw × H'·W']`.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let positions = self.positions();
        let mut cols = vec![0.0; self.patch_len() * positions];
        let mut row = 0;
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            if let Some(src) = self.source(c, ki, kj, oh, ow) {
                                dst[oh * self.out_w + ow] = input[src];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Folds column gradients back onto one sample, accumulating overlaps.
    pub fn col2im_acc(&self, cols: &[f64], input_grad: &mut [f64]) {
        let positions = self.positions();
        let mut row = 0;
        for c in 0..self.channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            if let Some(dst) = self.source(c, ki, kj, oh, ow) {
                                input_grad[dst] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Batched cross-correlation: `input[N×C×H×W]`, `kernel[F×C×kh×kw]`.
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    batch: usize,
    filters: usize,
    geo: &ConvGeometry,
) -> Vec<f64> {
    let out_len = filters * geo.positions();
    let mut out = vec![0.0; batch * out_len];
    let in_len = geo.input_len();
    for n in 0..batch {
        let cols = geo.im2col(&input[n * in_len..(n + 1) * in_len]);
        matmul_acc(
            kernel,
            &cols,
            filters,
            geo.patch_len(),
            geo.positions(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// 2×2 max pooling with stride 2 over `[N×C×H×W]`; trailing odd rows and
/// columns are dropped. Returns the pooled values and the flat input index
/// of each maximum (first occurrence wins on ties).
pub fn maxpool2x2(input: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}
