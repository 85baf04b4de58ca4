//! Raw slice kernels behind the graph operations.
//!
//! All loops run in a fixed order so results are bit-reproducible.

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m,k]`, `b: [n,k]`, `c: [m,n]`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c += aᵀ · b` with `a: [k,m]`, `b: [k,n]`, `c: [m,n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators, combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

/// How out-of-range taps are filled during convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Wrap-around (torus) padding.
    Circular,
}

/// Geometry of a 2D convolution over one image plane.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, or `None` for zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        match self.mode {
            PadMode::Zero => {
                if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                    None
                } else {
                    Some(y as usize * self.w + x as usize)
                }
            }
            PadMode::Circular => {
                let y = y.rem_euclid(self.h as isize) as usize;
                let x = x.rem_euclid(self.w as isize) as usize;
                Some(y * self.w + x)
            }
        }
    }

    /// Precomputed source index per (tap, output pixel); `usize::MAX` marks padding.
    pub fn index_table(&self) -> Vec<usize> {
        let taps = self.kh * self.kw;
        let npix = self.out_h * self.out_w;
        let mut table = vec![usize::MAX; taps * npix];
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let t = ky * self.kw + kx;
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        if let Some(s) = self.source(oy, ox, ky, kx) {
                            table[t * npix + oy * self.out_w + ox] = s;
                        }
                    }
                }
            }
        }
        table
    }
}

/// Unfolds `channels` planes into columns `[channels·taps, out_pixels]`.
pub fn im2col(input: &[f64], channels: usize, geom: &ConvGeom, table: &[usize], cols: &mut [f64]) {
    let plane = geom.h * geom.w;
    let taps = geom.kh * geom.kw;
    let npix = geom.out_h * geom.out_w;
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for t in 0..taps {
            let row = &mut cols[(c * taps + t) * npix..(c * taps + t + 1) * npix];
            let idx = &table[t * npix..(t + 1) * npix];
            for (dst, &s) in row.iter_mut().zip(idx) {
                *dst = if s == usize::MAX { 0.0 } else { src[s] };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the planes.
pub fn col2im(cols: &[f64], channels: usize, geom: &ConvGeom, table: &[usize], out: &mut [f64]) {
    let plane = geom.h * geom.w;
    let taps = geom.kh * geom.kw;
    let npix = geom.out_h * geom.out_w;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for t in 0..taps {
            let row = &cols[(c * taps + t) * npix..(c * taps + t + 1) * npix];
            let idx = &table[t * npix..(t + 1) * npix];
            for (&v, &s) in row.iter().zip(idx) {
                if s != usize::MAX {
                    dst[s] += v;
                }
            }
        }
    }
}

/// Per-axis bilinear taps `(i0, i1, frac)` for half-pixel-centre resampling.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            if in_len == out_len {
                return (o, o, 0.0);
            }
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
