//! Raw loops behind the tape ops. All buffers are row-major `[h, w, c]`;
//! kernels are `[kh, kw, cin, cout]`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvDims {
    /// Yields `(out_pixel, in_pixel, tap)` for every in-bounds kernel tap
    /// under zero "same" padding.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        (0..self.h).flat_map(move |i| {
            (0..self.w).flat_map(move |j| {
                (0..self.kh).flat_map(move |di| {
                    (0..self.kw).filter_map(move |dj| {
                        let ii = i as isize + di as isize - ph;
                        let jj = j as isize + dj as isize - pw;
                        if ii < 0 || jj < 0 || ii >= self.h as isize || jj >= self.w as isize {
                            return None;
                        }
                        let src = ii as usize * self.w + jj as usize;
                        Some((i * self.w + j, src, di * self.kw + dj))
                    })
                })
            })
        })
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut out = vec![0.0; d.h * d.w * cout];
    for px in out.chunks_exact_mut(cout.max(1)) {
        px.copy_from_slice(b);
    }
    for (dst, src, tap) in d.taps() {
        let xin = &x[src * cin..][..cin];
        let kk = &k[tap * cin * cout..][..cin * cout];
        let o = &mut out[dst * cout..][..cout];
        for (ci, &xv) in xin.iter().enumerate() {
            let krow = &kk[ci * cout..][..cout];
            for (acc, &kv) in o.iter_mut().zip(krow) {
                *acc += xv * kv;
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_kernel(d: &ConvDims, x: &[f64], gout: &[f64], gk: &mut [f64]) {
    let (cin, cout) = (d.cin, d.cout);
    for (dst, src, tap) in d.taps() {
        let xin = &x[src * cin..][..cin];
        let go = &gout[dst * cout..][..cout];
        let gkk = &mut gk[tap * cin * cout..][..cin * cout];
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &gv) in gkk[ci * cout..][..cout].iter_mut().zip(go) {
                *g += xv * gv;
            }
        }
    }
}

pub(crate) fn conv2d_backward_input(d: &ConvDims, k: &[f64], gout: &[f64], gx: &mut [f64]) {
    let (cin, cout) = (d.cin, d.cout);
    for (dst, src, tap) in d.taps() {
        let go = &gout[dst * cout..][..cout];
        let kk = &k[tap * cin * cout..][..cin * cout];
        let gin = &mut gx[src * cin..][..cin];
        for (ci, g) in gin.iter_mut().enumerate() {
            let krow = &kk[ci * cout..][..cout];
            let dot: f64 = krow.iter().zip(go).map(|(a, b)| a * b).sum();
            *g += dot;
        }
    }
}

pub(crate) fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
