//! Layer kernels with hand-written backward passes.
//!
//! Every backward function accumulates into the gradient tensors it is
//! given, so a parameter used on several paths collects the sum.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Grid, Tensor};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_grid(x: &Grid) -> Grid {
    Grid { h: x.h, w: x.w, c: x.c, data: x.data.iter().map(|&v| silu(v)).collect() }
}

/// Gradient through SiLU given the pre-activation input.
pub fn silu_backward(pre: &Grid, gout: &Grid) -> Grid {
    let data = pre.data.iter().zip(&gout.data).map(|(&x, &g)| g * silu_grad(x)).collect();
    Grid { h: pre.h, w: pre.w, c: pre.c, data }
}

/// Non-overlapping `k x k` patch projection (a stride-`k` convolution).
/// `w` is `[k*k*cin, cout]`, indexed by `(dy*k + dx)*cin + ci`.
pub fn patch_forward(x: &Grid, k: usize, w: &Tensor, b: &Tensor) -> Grid {
    let (cin, cout) = (x.c, b.len());
    debug_assert_eq!(w.len(), k * k * cin * cout);
    let (ho, wo) = (x.h / k, x.w / k);
    let mut y = Grid::zeros(ho, wo, cout);
    for oy in 0..ho {
        for ox in 0..wo {
            let out = &mut y.data[(oy * wo + ox) * cout..][..cout];
            out.copy_from_slice(&b.data);
            for dy in 0..k {
                for dx in 0..k {
                    let src = ((oy * k + dy) * x.w + ox * k + dx) * cin;
                    let xin = &x.data[src..src + cin];
                    for (ci, &v) in xin.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &w.data[((dy * k + dx) * cin + ci) * cout..][..cout];
                        for (o, &wv) in out.iter_mut().zip(row) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn patch_backward(
    x: &Grid,
    k: usize,
    w: &Tensor,
    gout: &Grid,
    gw: &mut Tensor,
    gb: &mut Tensor,
    need_input_grad: bool,
) -> Option<Grid> {
    let (cin, cout) = (x.c, gout.c);
    let mut gx = need_input_grad.then(|| x.zeros_like());
    for oy in 0..gout.h {
        for ox in 0..gout.w {
            let g = &gout.data[(oy * gout.w + ox) * cout..][..cout];
            for (acc, &gv) in gb.data.iter_mut().zip(g) {
                *acc += gv;
            }
            for dy in 0..k {
                for dx in 0..k {
                    let src = ((oy * k + dy) * x.w + ox * k + dx) * cin;
                    for ci in 0..cin {
                        let p = ((dy * k + dx) * cin + ci) * cout;
                        let v = x.data[src + ci];
                        let grow = &mut gw.data[p..p + cout];
                        for (acc, &gv) in grow.iter_mut().zip(g) {
                            *acc += v * gv;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let row = &w.data[p..p + cout];
                            gx.data[src + ci] += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Sub-pixel upsampling: each input cell projects to a `k x k` block of
/// `cout`-channel outputs. `w` is `[cin, k*k*cout]`.
pub fn subpixel_forward(x: &Grid, k: usize, cout: usize, w: &Tensor, b: &Tensor) -> Grid {
    let cin = x.c;
    let kk = k * k * cout;
    debug_assert_eq!(w.len(), cin * kk);
    let (ho, wo) = (x.h * k, x.w * k);
    let mut y = Grid::zeros(ho, wo, cout);
    let mut tmp = vec![0.0; kk];
    for iy in 0..x.h {
        for ix in 0..x.w {
            tmp.copy_from_slice(&b.data);
            for (ci, &v) in x.cell(iy * x.w + ix).iter().enumerate() {
                let row = &w.data[ci * kk..(ci + 1) * kk];
                for (t, &wv) in tmp.iter_mut().zip(row) {
                    *t += v * wv;
                }
            }
            for dy in 0..k {
                for dx in 0..k {
                    let dst = ((iy * k + dy) * wo + ix * k + dx) * cout;
                    y.data[dst..dst + cout].copy_from_slice(&tmp[(dy * k + dx) * cout..][..cout]);
                }
            }
        }
    }
    y
}

pub fn subpixel_backward(
    x: &Grid,
    k: usize,
    w: &Tensor,
    gout: &Grid,
    gw: &mut Tensor,
    gb: &mut Tensor,
    need_input_grad: bool,
) -> Option<Grid> {
    let (cin, cout) = (x.c, gout.c);
    let kk = k * k * cout;
    let mut gx = need_input_grad.then(|| x.zeros_like());
    let mut gt = vec![0.0; kk];
    for iy in 0..x.h {
        for ix in 0..x.w {
            for dy in 0..k {
                for dx in 0..k {
                    let src = ((iy * k + dy) * gout.w + ix * k + dx) * cout;
                    gt[(dy * k + dx) * cout..][..cout].copy_from_slice(&gout.data[src..src + cout]);
                }
            }
            for (acc, &g) in gb.data.iter_mut().zip(&gt) {
                *acc += g;
            }
            let cell = iy * x.w + ix;
            for ci in 0..cin {
                let v = x.data[cell * cin + ci];
                let grow = &mut gw.data[ci * kk..(ci + 1) * kk];
                for (acc, &g) in grow.iter_mut().zip(&gt) {
                    *acc += v * g;
                }
                if let Some(gx) = gx.as_mut() {
                    let row = &w.data[ci * kk..(ci + 1) * kk];
                    gx.data[cell * cin + ci] += row.iter().zip(&gt).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    gx
}

/// Depthwise 3x3 convolution with zero padding. `w` is `[9, c]`.
pub fn dwconv3_forward(x: &Grid, w: &Tensor, b: &Tensor) -> Grid {
    let c = x.c;
    let mut y = Grid::zeros(x.h, x.w, c);
    for i in 0..x.h {
        for j in 0..x.w {
            let out = &mut y.data[(i * x.w + j) * c..][..c];
            out.copy_from_slice(&b.data);
            for (t, (di, dj)) in TAPS.iter().enumerate() {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= x.h as isize || nj >= x.w as isize {
                    continue;
                }
                let src = (ni as usize * x.w + nj as usize) * c;
                let wt = &w.data[t * c..(t + 1) * c];
                for ((o, &xv), &wv) in out.iter_mut().zip(&x.data[src..src + c]).zip(wt) {
                    *o += xv * wv;
                }
            }
        }
    }
    y
}

pub fn dwconv3_backward(x: &Grid, w: &Tensor, gout: &Grid, gw: &mut Tensor, gb: &mut Tensor) -> Grid {
    let c = x.c;
    let mut gx = x.zeros_like();
    for i in 0..x.h {
        for j in 0..x.w {
            let g = &gout.data[(i * x.w + j) * c..][..c];
            for (acc, &gv) in gb.data.iter_mut().zip(g) {
                *acc += gv;
            }
            for (t, (di, dj)) in TAPS.iter().enumerate() {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= x.h as isize || nj >= x.w as isize {
                    continue;
                }
                let src = (ni as usize * x.w + nj as usize) * c;
                for ch in 0..c {
                    gw.data[t * c + ch] += g[ch] * x.data[src + ch];
                    gx.data[src + ch] += g[ch] * w.data[t * c + ch];
                }
            }
        }
    }
    gx
}

const TAPS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

/// `x @ w + b` for a batch of row vectors stored contiguously.
pub fn linear_rows(x: &[f64], rows: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let cin = x.len() / rows;
    let cout = w.len() / cin;
    let mut y = vec![0.0; rows * cout];
    for r in 0..rows {
        let out = &mut y[r * cout..(r + 1) * cout];
        if let Some(b) = b {
            out.copy_from_slice(&b.data);
        }
        for (ci, &v) in x[r * cin..(r + 1) * cin].iter().enumerate() {
            let row = &w.data[ci * cout..(ci + 1) * cout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += v * wv;
            }
        }
    }
    y
}

/// Backward of [`linear_rows`]; returns the input gradient.
pub fn linear_rows_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    gout: &[f64],
    gw: &mut Tensor,
    gb: Option<&mut Tensor>,
) -> Vec<f64> {
    let cin = x.len() / rows;
    let cout = w.len() / cin;
    let mut gx = vec![0.0; x.len()];
    if let Some(gb) = gb {
        for r in 0..rows {
            for (acc, &g) in gb.data.iter_mut().zip(&gout[r * cout..(r + 1) * cout]) {
                *acc += g;
            }
        }
    }
    for r in 0..rows {
        let g = &gout[r * cout..(r + 1) * cout];
        for ci in 0..cin {
            let v = x[r * cin + ci];
            let grow = &mut gw.data[ci * cout..(ci + 1) * cout];
            for (acc, &gv) in grow.iter_mut().zip(g) {
                *acc += v * gv;
            }
            let row = &w.data[ci * cout..(ci + 1) * cout];
            gx[r * cin + ci] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    gx
}
