//! Hand-rolled layers with explicit forward traces and backward passes:
//! strided 1-D convolution over time, gated recurrent direction pairs, and
//! the output affine map. Backward passes return parameter gradients in the
//! same stable order that `params()` exposes.

use crate::scalar::Scalar;
use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Scaled uniform init: U(-a, a) with a = sqrt(6 / (rows + cols)).
pub(crate) fn init_matrix<F: Scalar>(rows: usize, cols: usize, seed: u64) -> Array2<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64_c(rng.random_range(-limit..limit))
    })
}

fn reverse_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.slice(s![..;-1, ..]).to_owned()
}

/// Strided 1-D convolution over the time axis with tanh activation.
/// Output length is ceil(T / stride); edges are zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv1d<F: Scalar> {
    /// One (c_in, c_out) matrix per kernel tap.
    pub w: Vec<Array2<F>>,
    pub b: Array2<F>,
    pub stride: usize,
}

pub(crate) struct ConvTrace<F: Scalar> {
    x: Array2<F>,
    y: Array2<F>,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, seed: u64) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let w = (0..kernel)
            .map(|k| init_matrix(c_in, c_out, seed.wrapping_add(k as u64)))
            .collect();
        Conv1d {
            w,
            b: Array2::zeros((1, c_out)),
            stride,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }

    pub fn forward(&self, x: &Array2<F>) -> (ConvTrace<F>, Array2<F>) {
        let t_in = x.nrows();
        let t_out = self.out_len(t_in);
        let c_out = self.b.ncols();
        let pad = (self.w.len() - 1) / 2;
        let mut y = Array2::zeros((t_out, c_out));
        for j in 0..t_out {
            let mut acc = self.b.clone();
            for (k, wk) in self.w.iter().enumerate() {
                let pos = (j * self.stride + k) as isize - pad as isize;
                if pos < 0 || pos as usize >= t_in {
                    continue;
                }
                let row = x.slice(s![pos as usize..pos as usize + 1, ..]);
                acc = acc + row.dot(wk);
            }
            y.slice_mut(s![j..j + 1, ..]).assign(&acc.mapv(F::tanh));
        }
        (
            ConvTrace { x: x.clone(), y: y.clone() },
            y,
        )
    }

    /// Returns (d_input, [dw_0, ..., dw_{K-1}, db]).
    pub fn backward(&self, trace: &ConvTrace<F>, dy: &Array2<F>) -> (Array2<F>, Vec<Array2<F>>) {
        let t_in = trace.x.nrows();
        let t_out = dy.nrows();
        let pad = (self.w.len() - 1) / 2;
        let dz = dy * &(trace.y.mapv(|v| F::one() - v * v));
        let mut dx = Array2::zeros(trace.x.raw_dim());
        let mut dw: Vec<Array2<F>> = self.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let mut db = Array2::zeros(self.b.raw_dim());
        for j in 0..t_out {
            let dzr = dz.slice(s![j..j + 1, ..]);
            db = db + dzr;
            for (k, wk) in self.w.iter().enumerate() {
                let pos = (j * self.stride + k) as isize - pad as isize;
                if pos < 0 || pos as usize >= t_in {
                    continue;
                }
                let pos = pos as usize;
                let xr = trace.x.slice(s![pos..pos + 1, ..]);
                dw[k] = &dw[k] + &xr.t().dot(&dzr);
                let contrib = dzr.dot(&wk.t());
                let mut slot = dx.slice_mut(s![pos..pos + 1, ..]);
                slot += &contrib;
            }
        }
        dw.push(db);
        (dx, dw)
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        self.w.iter().chain(std::iter::once(&self.b)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        self.w.iter_mut().chain(std::iter::once(&mut self.b)).collect()
    }
}

/// One direction of a gated recurrent layer. Gate order in the fused
/// input projection is [update z, reset r, candidate c].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GruDir<F: Scalar> {
    pub wx: Array2<F>,   // (in, 3h)
    pub whzr: Array2<F>, // (h, 2h)
    pub whc: Array2<F>,  // (h, h)
    pub b: Array2<F>,    // (1, 3h)
}

pub(crate) struct GruDirTrace<F: Scalar> {
    x: Array2<F>,
    z: Array2<F>,
    r: Array2<F>,
    c: Array2<F>,
    /// Hidden states, (T+1, h), row 0 is the zero initial state.
    h: Array2<F>,
}

impl<F: Scalar> GruDir<F> {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        GruDir {
            wx: init_matrix(input, 3 * hidden, seed),
            whzr: init_matrix(hidden, 2 * hidden, seed.wrapping_add(101)),
            whc: init_matrix(hidden, hidden, seed.wrapping_add(202)),
            b: Array2::zeros((1, 3 * hidden)),
        }
    }

    fn hidden(&self) -> usize {
        self.whc.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> (GruDirTrace<F>, Array2<F>) {
        let t_len = x.nrows();
        let h = self.hidden();
        let gx = x.dot(&self.wx) + &self.b;
        let mut zs = Array2::zeros((t_len, h));
        let mut rs = Array2::zeros((t_len, h));
        let mut cs = Array2::zeros((t_len, h));
        let mut hs = Array2::zeros((t_len + 1, h));
        for t in 0..t_len {
            let hprev = hs.slice(s![t..t + 1, ..]).to_owned();
            let zr_pre = gx.slice(s![t..t + 1, ..2 * h]).to_owned() + hprev.dot(&self.whzr);
            let z = zr_pre.slice(s![.., ..h]).mapv(sigmoid);
            let r = zr_pre.slice(s![.., h..]).mapv(sigmoid);
            let c_pre =
                gx.slice(s![t..t + 1, 2 * h..]).to_owned() + (&r * &hprev).dot(&self.whc);
            let c = c_pre.mapv(F::tanh);
            let hnew = (&z * &c) + &(&hprev * &z.mapv(|v| F::one() - v));
            zs.slice_mut(s![t..t + 1, ..]).assign(&z);
            rs.slice_mut(s![t..t + 1, ..]).assign(&r);
            cs.slice_mut(s![t..t + 1, ..]).assign(&c);
            hs.slice_mut(s![t + 1..t + 2, ..]).assign(&hnew);
        }
        let out = hs.slice(s![1.., ..]).to_owned();
        (
            GruDirTrace {
                x: x.clone(),
                z: zs,
                r: rs,
                c: cs,
                h: hs,
            },
            out,
        )
    }

    /// Returns (d_input, [dwx, dwhzr, dwhc, db]).
    pub fn backward(&self, trace: &GruDirTrace<F>, d_out: &Array2<F>) -> (Array2<F>, Vec<Array2<F>>) {
        let t_len = trace.x.nrows();
        let h = self.hidden();
        let mut dgx = Array2::zeros((t_len, 3 * h));
        let mut dwhzr = Array2::zeros(self.whzr.raw_dim());
        let mut dwhc = Array2::zeros(self.whc.raw_dim());
        let mut dh_next: Array2<F> = Array2::zeros((1, h));
        for t in (0..t_len).rev() {
            let dh = d_out.slice(s![t..t + 1, ..]).to_owned() + &dh_next;
            let z = trace.z.slice(s![t..t + 1, ..]);
            let r = trace.r.slice(s![t..t + 1, ..]);
            let c = trace.c.slice(s![t..t + 1, ..]);
            let hprev = trace.h.slice(s![t..t + 1, ..]);
            let dz = &dh * &(&c.to_owned() - &hprev) * &z.mapv(|v| v * (F::one() - v));
            let dc = &dh * &z * &c.mapv(|v| F::one() - v * v);
            let mut dh_prev = &dh * &z.mapv(|v| F::one() - v);
            // candidate path
            dgx.slice_mut(s![t..t + 1, 2 * h..]).assign(&dc);
            let rh = &r.to_owned() * &hprev;
            dwhc = dwhc + rh.t().dot(&dc);
            let drh = dc.dot(&self.whc.t());
            let dr = &drh * &hprev * &r.mapv(|v| v * (F::one() - v));
            dh_prev = dh_prev + &drh * &r;
            // fused z/r path
            let dzr = concatenate(Axis(1), &[dz.view(), dr.view()]).expect("same rows");
            dgx.slice_mut(s![t..t + 1, ..2 * h]).assign(&dzr);
            dwhzr = dwhzr + hprev.to_owned().t().dot(&dzr);
            dh_prev = dh_prev + dzr.dot(&self.whzr.t());
            dh_next = dh_prev;
        }
        let dwx = trace.x.t().dot(&dgx);
        let db = dgx
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        let dx = dgx.dot(&self.wx.t());
        (dx, vec![dwx, dwhzr, dwhc, db])
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        vec![&self.wx, &self.whzr, &self.whc, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        vec![&mut self.wx, &mut self.whzr, &mut self.whc, &mut self.b]
    }
}

/// Bidirectional gated recurrent layer; output is the per-frame
/// concatenation [forward; backward], width 2·hidden.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BiGru<F: Scalar> {
    pub fwd: GruDir<F>,
    pub bwd: GruDir<F>,
}

pub(crate) struct BiGruTrace<F: Scalar> {
    fwd: GruDirTrace<F>,
    bwd: GruDirTrace<F>,
}

impl<F: Scalar> BiGru<F> {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        BiGru {
            fwd: GruDir::new(input, hidden, seed),
            bwd: GruDir::new(input, hidden, seed.wrapping_add(7777)),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (BiGruTrace<F>, Array2<F>) {
        let (ft, fo) = self.fwd.forward(x);
        let x_rev = reverse_rows(x);
        let (bt, bo_rev) = self.bwd.forward(&x_rev);
        let bo = reverse_rows(&bo_rev);
        let out = concatenate(Axis(1), &[fo.view(), bo.view()]).expect("same rows");
        (BiGruTrace { fwd: ft, bwd: bt }, out)
    }

    pub fn backward(&self, trace: &BiGruTrace<F>, d_out: &Array2<F>) -> (Array2<F>, Vec<Array2<F>>) {
        let h = self.fwd.hidden();
        let d_fwd = d_out.slice(s![.., ..h]).to_owned();
        let d_bwd_rev = reverse_rows(&d_out.slice(s![.., h..]).to_owned());
        let (dx_f, gf) = self.fwd.backward(&trace.fwd, &d_fwd);
        let (dx_b_rev, gb) = self.bwd.backward(&trace.bwd, &d_bwd_rev);
        let dx = dx_f + reverse_rows(&dx_b_rev);
        let mut grads = gf;
        grads.extend(gb);
        (dx, grads)
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        let mut p = self.fwd.params();
        p.extend(self.bwd.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut p = self.fwd.params_mut();
        p.extend(self.bwd.params_mut());
        p
    }
}

/// Output projection to logits.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Affine<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array2<F>,
}

pub(crate) struct AffineTrace<F: Scalar> {
    x: Array2<F>,
}

impl<F: Scalar> Affine<F> {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        Affine {
            w: init_matrix(input, output, seed),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (AffineTrace<F>, Array2<F>) {
        let y = x.dot(&self.w) + &self.b;
        (AffineTrace { x: x.clone() }, y)
    }

    pub fn backward(&self, trace: &AffineTrace<F>, dy: &Array2<F>) -> (Array2<F>, Vec<Array2<F>>) {
        let dw = trace.x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dy.dot(&self.w.t());
        (dx, vec![dw, db])
    }

    pub fn params(&self) -> Vec<&Array2<F>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub(crate) struct Trace<F: Scalar> {
    pub convs: Vec<ConvTrace<F>>,
    pub rnns: Vec<BiGruTrace<F>>,
    pub affine: AffineTrace<F>,
}
