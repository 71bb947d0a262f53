//! Raw slice kernels behind the graph operations.

use std::sync::OnceLock;

use super::Element;

/// Thread count for batch-parallel kernels, fixed by `XRES_THREADS` (default 1).
///
/// Work is split into contiguous sample chunks and partial sums are combined
/// in chunk order, so results are bitwise stable for a given setting.
pub fn thread_count() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("XRES_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1)
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
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
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, out) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *out = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn chunk_len(n: usize) -> usize {
    let threads = thread_count().min(n).max(1);
    n.div_ceil(threads)
}

pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let per = chunk_len(g.n);

    let run = |xs: &[T], outs: &mut [T]| {
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for (xn, on) in xs.chunks(in_len).zip(outs.chunks_mut(out_len)) {
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            T::gemm(
                g.cout,
                k,
                p,
                T::one(),
                weight,
                (k as isize, 1),
                cols_ref,
                (p as isize, 1),
                T::zero(),
                on,
                (p as isize, 1),
            );
        }
    };

    if per >= g.n {
        run(x, &mut out);
    } else {
        std::thread::scope(|s| {
            for (xs, outs) in x.chunks(per * in_len).zip(out.chunks_mut(per * out_len)) {
                s.spawn(|| run(xs, outs));
            }
        });
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let per = chunk_len(g.n);
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_len]);

    let run = |xs: &[T], gys: &[T], mut dxs: Option<&mut [T]>| -> Option<Vec<T>> {
        let mut dw = need_dw.then(|| vec![T::zero(); g.cout * k]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcols = if need_dx && !g.is_pointwise() {
            vec![T::zero(); k * p]
        } else {
            Vec::new()
        };
        for (i, (xn, gyn)) in xs.chunks(in_len).zip(gys.chunks(out_len)).enumerate() {
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, &mut cols);
                    &cols
                };
                T::gemm(
                    g.cout,
                    p,
                    k,
                    T::one(),
                    gyn,
                    (p as isize, 1),
                    cols_ref,
                    (1, p as isize),
                    T::one(),
                    dw,
                    (k as isize, 1),
                );
            }
            if let Some(dxs) = dxs.as_deref_mut() {
                let dxn = &mut dxs[i * in_len..(i + 1) * in_len];
                if g.is_pointwise() {
                    T::gemm(
                        k,
                        g.cout,
                        p,
                        T::one(),
                        weight,
                        (1, k as isize),
                        gyn,
                        (p as isize, 1),
                        T::zero(),
                        dxn,
                        (p as isize, 1),
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout,
                        p,
                        T::one(),
                        weight,
                        (1, k as isize),
                        gyn,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (p as isize, 1),
                    );
                    col2im(&dcols, g, dxn);
                }
            }
        }
        dw
    };

    let mut dw_total: Option<Vec<T>> = None;
    if per >= g.n {
        dw_total = run(x, grad_out, dx.as_deref_mut());
    } else {
        let partials: Vec<Option<Vec<T>>> = std::thread::scope(|s| {
            let mut handles = Vec::new();
            let mut dx_chunks: Vec<Option<&mut [T]>> = match dx.as_deref_mut() {
                Some(d) => d.chunks_mut(per * in_len).map(Some).collect(),
                None => (0..g.n.div_ceil(per)).map(|_| None).collect(),
            };
            for ((xs, gys), dxs) in x
                .chunks(per * in_len)
                .zip(grad_out.chunks(per * out_len))
                .zip(dx_chunks.drain(..))
            {
                handles.push(s.spawn(move || run(xs, gys, dxs)));
            }
            handles.into_iter().map(|h| h.join().expect("conv worker")).collect()
        });
        for part in partials.into_iter().flatten() {
            match dw_total.as_mut() {
                None => dw_total = Some(part),
                Some(acc) => acc.iter_mut().zip(part).for_each(|(a, b)| *a = *a + b),
            }
        }
    }
    (dx, dw_total)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling with implicit `-inf` padding. Returns values and flat argmax
/// indices into the input. Ties keep the first window element in scan order.
pub fn maxpool_forward<T: Element>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * g.w + iw as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
