//! Dense f64 kernels behind the tape primitives. Everything is row-major.

/// Geometry of a stride-1 2-D convolution over NCHW inputs and OIHW kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.height, self.width]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_height(), self.out_width()]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// `c = op(a) * op(b)` where `a` is stored `[ar, ac]` and `b` is stored `[br, bc]`.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    a: &[f64],
    (ar, ac): (usize, usize),
    trans_a: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    trans_b: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    debug_assert_eq!(k, if trans_b { bc } else { br });
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the slices cover m*k, k*n and m*n elements under the strides
    // computed above, which the debug assertions and callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape that `a` and `b` broadcast to under right-aligned NumPy rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Whether `small` can be broadcast to `big`.
pub fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len()
        && small
            .iter()
            .rev()
            .zip(big.iter().rev())
            .all(|(&s, &b)| s == b || s == 1)
}

/// Strides of `small` laid over the index space of `big` (zero on broadcast axes).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let offset = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= small[i];
    }
    strides
}

/// Visit every index of `big` in row-major order alongside the matching
/// offset into `small`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = big.iter().product();
    if total == 0 {
        return;
    }
    if big.is_empty() {
        f(0, 0);
        return;
    }
    // merge neighbouring axes that step through `small` uniformly, so the
    // inner loop runs as long as possible
    let raw = broadcast_strides(small, big);
    let mut dims: Vec<usize> = vec![1];
    let mut strides: Vec<usize> = vec![0];
    for (&n, &st) in big.iter().zip(&raw).filter(|(&n, _)| n != 1) {
        let last = dims.len() - 1;
        if dims[last] == 1 || strides[last] == st * n {
            dims[last] *= n;
            strides[last] = st;
        } else {
            dims.push(n);
            strides.push(st);
        }
    }
    let big = &dims[..];
    let last = big.len() - 1;
    let inner = big[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; big.len()];
    let mut base = 0usize;
    let mut flat = 0usize;
    loop {
        for j in 0..inner {
            f(flat + j, base + j * inner_stride);
        }
        flat += inner;
        if flat >= total {
            break;
        }
        // advance the odometer on the outer axes
        let mut axis = last;
        loop {
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < big[axis] {
                break;
            }
            base -= strides[axis] * big[axis];
            idx[axis] = 0;
        }
    }
}

pub fn broadcast_to(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let total: usize = dst_shape.iter().product();
    if src.len() == 1 {
        return vec![src[0]; total];
    }
    if src_shape == dst_shape {
        return src.to_vec();
    }
    let mut out = vec![0.0; total];
    for_each_broadcast(src_shape, dst_shape, |o, s| out[o] = src[s]);
    out
}

/// Sum `src` (shaped `src_shape`) down to `dst_shape`; the reverse of [`broadcast_to`].
pub fn sum_to(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    if src_shape == dst_shape {
        return src.to_vec();
    }
    let total: usize = dst_shape.iter().product();
    if total == 1 {
        return vec![src.iter().sum()];
    }
    let mut out = vec![0.0; total];
    for_each_broadcast(dst_shape, src_shape, |s, o| out[o] += src[s]);
    out
}

/// Row-wise softmax over the last axis of a `[rows, cols]` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn softmax_cross_entropy(logits: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let rows = logits.len() / cols;
    let mut total = 0.0;
    for (row, &label) in logits.chunks(cols).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    total / rows as f64
}

/// Flat input indices selected by a 2x2 / stride-2 max-pool over NCHW `x`.
/// Odd trailing rows/columns are dropped. Ties resolve to the first element.
pub fn maxpool2_indices(x: &[f64], shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, vec![n, c, oh, ow])
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if sy < 0 || sy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * g.width..(sy as usize + 1) * g.width];
                    for (xo, v) in line.iter_mut().enumerate() {
                        let sx = xo as isize + kj as isize - g.pad as isize;
                        *v = if sx < 0 || sx >= g.width as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - g.pad as isize;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * g.width..(sy as usize + 1) * g.width];
                    for xo in 0..ow {
                        let sx = xo as isize + kj as isize - g.pad as isize;
                        if sx >= 0 && sx < g.width as isize {
                            drow[sx as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut cols = vec![0.0; patch * plane];
    let in_len = g.in_ch * g.height * g.width;
    for b in 0..g.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        matmul(
            w,
            (g.out_ch, patch),
            false,
            &cols,
            (patch, plane),
            false,
            dst,
            false,
        );
    }
    out
}

/// Gradient of a convolution with respect to its input, given the output gradient `gy`.
pub fn conv2d_back_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let in_len = g.in_ch * g.height * g.width;
    let mut dx = vec![0.0; g.batch * in_len];
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        let gb = &gy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        matmul(
            w,
            (g.out_ch, patch),
            true,
            gb,
            (g.out_ch, plane),
            false,
            &mut cols,
            false,
        );
        col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    dx
}

/// Gradient of a convolution with respect to its kernel, given input `x` and output gradient `gy`.
pub fn conv2d_back_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_height() * g.out_width();
    let patch = g.patch_len();
    let in_len = g.in_ch * g.height * g.width;
    let mut dw = vec![0.0; g.out_ch * patch];
    let mut cols = vec![0.0; patch * plane];
    for b in 0..g.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let gb = &gy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        matmul(
            gb,
            (g.out_ch, plane),
            false,
            &cols,
            (patch, plane),
            true,
            &mut dw,
            true,
        );
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let sy = y as isize + ki as isize - g.pad as isize;
                                    let sx = xo as isize + kj as isize - g.pad as isize;
                                    if sy < 0
                                        || sx < 0
                                        || sy >= g.height as isize
                                        || sx >= g.width as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((b * g.in_ch + c) * g.height + sy as usize)
                                        * g.width
                                        + sx as usize]
                                        * w[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((b * g.out_ch + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * scale)
            .collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 3,
            out_ch: 4,
            height: 5,
            width: 6,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x = seq(2 * 3 * 5 * 6, 0.1);
        let w = seq(4 * 3 * 9, 0.07);
        let fast = conv2d(&x, &w, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoints_are_consistent() {
        // <conv(x, w), gy> == <x, back_input(gy, w)> == <w, back_weight(x, gy)>
        let g = ConvGeom {
            batch: 2,
            in_ch: 2,
            out_ch: 3,
            height: 4,
            width: 4,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x = seq(2 * 2 * 16, 0.13);
        let w = seq(3 * 2 * 9, 0.05);
        let gy = seq(2 * 3 * 16, 0.03);
        let y = conv2d(&x, &w, &g);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let dx = conv2d_back_input(&gy, &w, &g);
        let dw = conv2d_back_weight(&x, &gy, &g);
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let small = [3.0, -1.0, 2.0];
        let big = broadcast_to(&small, &[1, 3], &[2, 3]);
        assert_eq!(big, vec![3.0, -1.0, 2.0, 3.0, -1.0, 2.0]);
        let col = broadcast_to(&[1.0, 2.0], &[2, 1], &[2, 3]);
        assert_eq!(col, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let summed = sum_to(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[3]);
        assert_eq!(summed, vec![5.0, 7.0, 9.0]);
        let rows = sum_to(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[2, 1]);
        assert_eq!(rows, vec![6.0, 15.0]);
        let chan = sum_to(&vec![1.0; 2 * 3 * 2 * 2], &[2, 3, 2, 2], &[1, 3, 1, 1]);
        assert_eq!(chan, vec![8.0; 3]);
    }

    #[test]
    fn broadcast_matches_index_arithmetic() {
        use proptest::prelude::*;
        let dims = proptest::collection::vec((1usize..4, any::<bool>()), 1..5);
        proptest!(|(spec in dims, lead in 0usize..2)| {
            let big: Vec<usize> = spec.iter().map(|d| d.0).collect();
            let small: Vec<usize> = spec.iter().skip(lead.min(spec.len() - 1))
                .map(|&(n, keep)| if keep { n } else { 1 }).collect();
            let src: Vec<f64> = (0..small.iter().product::<usize>()).map(|i| i as f64 * 1.5 + 1.0).collect();
            let got = broadcast_to(&src, &small, &big);
            // oracle: unravel every output index and re-ravel into the source
            let off = big.len() - small.len();
            for (flat, &g) in got.iter().enumerate() {
                let mut rem = flat;
                let mut idx = vec![0; big.len()];
                for d in (0..big.len()).rev() {
                    idx[d] = rem % big[d];
                    rem /= big[d];
                }
                let mut s = 0;
                for d in 0..small.len() {
                    let i = if small[d] == 1 { 0 } else { idx[d + off] };
                    s = s * small[d] + i;
                }
                prop_assert_eq!(g, src[s]);
            }
        });
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 2], &[3]), None);
        assert!(broadcastable(&[], &[2, 2]));
        assert!(!broadcastable(&[2, 2], &[2]));
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, (2, 2), false, &b, (2, 2), false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(&a, (2, 2), true, &b, (2, 2), false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(&a, (2, 2), false, &b, (2, 2), true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let x: Vec<f64> = vec![
            1.0, 5.0, 2.0, 0.0, //
            3.0, 4.0, 9.0, 1.0, //
            0.0, 0.0, 1.0, 1.0, //
            7.0, 0.0, 1.0, 2.0,
        ];
        let (idx, shape) = maxpool2_indices(&x, &[1, 1, 4, 4]);
        assert_eq!(shape, vec![1, 1, 2, 2]);
        let vals: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        assert_eq!(vals, vec![5.0, 9.0, 7.0, 2.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = vec![0.0; 10];
        let ce = softmax_cross_entropy(&logits, 5, &[0, 3]);
        assert!((ce - 5f64.ln()).abs() < 1e-15);
        let s = softmax_rows(&logits, 5);
        assert!(s.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
}
