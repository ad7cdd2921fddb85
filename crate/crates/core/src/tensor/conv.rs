//! 2-D cross-correlation via im2col + GEMM.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x, k) else {
            return None;
        };
        if cin != kcin || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_in(&self) -> usize {
        self.h * self.w
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input item already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let so = g.spatial_out();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.spatial_in()..(c + 1) * g.spatial_in()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * so..(row + 1) * so];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let so = g.spatial_out();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.spatial_in()..(c + 1) * g.spatial_in()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * so..(row + 1) * so];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] = line[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (patch, si, so) = (g.patch(), g.cin * g.spatial_in(), g.spatial_out());
    let mut out = vec![T::zero(); g.n * g.cout * so];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * so] };
    for n in 0..g.n {
        let item = &x[n * si..(n + 1) * si];
        let cols: &[T] = if g.is_pointwise() {
            item
        } else {
            im2col(item, g, &mut cols);
            &cols
        };
        let y = &mut out[n * g.cout * so..(n + 1) * g.cout * so];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(so).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, patch, so, T::one(), w, (patch as isize, 1), cols, (so as isize, 1), beta, y, (so as isize, 1));
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: &ConvGeom, need: (bool, bool, bool)) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let (patch, si, so) = (g.patch(), g.cin * g.spatial_in(), g.spatial_out());
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, chunk) in gout[n * g.cout * so..(n + 1) * g.cout * so].chunks(so).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * so }];
    let mut dcols = vec![T::zero(); if need_x { patch * so } else { 0 }];
    for n in 0..g.n {
        let gy = &gout[n * g.cout * so..(n + 1) * g.cout * so];
        let item = &x[n * si..(n + 1) * si];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                item
            } else {
                im2col(item, g, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                g.cout,
                so,
                patch,
                T::one(),
                gy,
                (so as isize, 1),
                cols,
                (1, so as isize),
                T::one(),
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * si..(n + 1) * si];
            if g.is_pointwise() {
                // dX = W^T * dY written straight into the item
                T::gemm(
                    patch,
                    g.cout,
                    so,
                    T::one(),
                    w,
                    (1, patch as isize),
                    gy,
                    (so as isize, 1),
                    T::zero(),
                    dst,
                    (so as isize, 1),
                );
            } else {
                T::gemm(
                    patch,
                    g.cout,
                    so,
                    T::one(),
                    w,
                    (1, patch as isize),
                    gy,
                    (so as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (so as isize, 1),
                );
                col2im(&dcols, g, dst);
            }
        }
    }
    ConvGrads { x: dx, w: dw, bias: db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn cases() -> Vec<ConvGeom> {
        let mut out = Vec::new();
        for &(cin, cout, k, stride, h, w) in &[
            (1, 3, 3, 1, 5, 4),
            (2, 2, 3, 2, 7, 6),
            (3, 2, 1, 2, 5, 5),
            (9, 4, 3, 1, 4, 6),
            (2, 3, 1, 1, 3, 3),
            (1, 2, 3, 3, 8, 7),
            (2, 1, 3, 1, 1, 1),
        ] {
            let pad = k / 2;
            out.push(ConvGeom::new(&[2, cin, h, w], &[cout, cin, k, k], stride, pad).unwrap());
        }
        out
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for (i, g) in cases().into_iter().enumerate() {
            let x = lcg(i as u64, g.n * g.cin * g.h * g.w);
            let w = lcg(100 + i as u64, g.cout * g.patch());
            let want = naive(&x, &w, &g);
            let got = forward(&x, &w, None, &g);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), "case {i}");
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        for (i, g) in cases().into_iter().enumerate() {
            let x = lcg(i as u64, g.n * g.cin * g.h * g.w);
            let w = lcg(100 + i as u64, g.cout * g.patch());
            let gy = lcg(200 + i as u64, g.n * g.cout * g.spatial_out());
            let grads = backward(&x, &w, &gy, &g, (true, true, true));
            // the map is bilinear, so <conv(x, w), gy> = <x, dx> = <w, dw>
            let y = naive(&x, &w, &g);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &gy);
            assert!((lhs - dot(&x, &grads.x.unwrap())).abs() < 1e-12, "case {i}");
            assert!((lhs - dot(&w, &grads.w.unwrap())).abs() < 1e-12, "case {i}");
            let db = grads.bias.unwrap();
            assert!((db.iter().sum::<f64>() - gy.iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
