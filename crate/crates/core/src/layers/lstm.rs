use crate::numerics::{kernels, Tensor};
use crate::{Error, Result};

/// Standard LSTM cell without peepholes.
///
/// `w` has shape `4H × (I + H)` and acts on `[x; h_prev]`; gate blocks are
/// stacked in the order input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Everything the backward pass needs from one cell step.
#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i; f; o; g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCache {
    /// `tanh(c)` of the step that produced this cache.
    pub fn tanh_cell(&self) -> &[f64] {
        &self.tanh_c
    }
}

pub struct LstmCellGrads {
    pub grad_x: Tensor,
    pub grad_h_prev: Tensor,
    pub grad_c_prev: Tensor,
    pub params: LstmCellParams,
}

impl LstmCellParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let rows = w.rows();
        if w.rank() != 2 || rows % 4 != 0 || rows == 0 || b.rank() != 1 || b.len() != rows {
            return Err(Error::shape(format!(
                "LSTM weight {:?} with bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        if w.cols() < rows / 4 {
            return Err(Error::shape("LSTM weight narrower than hidden size"));
        }
        Ok(LstmCellParams { w, b })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: Tensor::zeros(&[4 * hidden, input + hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w.rows() / 4
    }

    pub fn input_size(&self) -> usize {
        self.w.cols() - self.hidden_size()
    }

    /// Sets every forget-gate bias to `value`.
    pub fn set_forget_bias(&mut self, value: f64) {
        let h = self.hidden_size();
        self.b.data_mut()[h..2 * h].fill(value);
    }

    pub(crate) fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmCache) {
        let hs = self.hidden_size();
        let is = self.input_size();
        debug_assert_eq!(x.len(), is);
        let cols = is + hs;
        let mut z = self.b.data().to_vec();
        for (zr, row) in z.iter_mut().zip(self.w.data().chunks_exact(cols)) {
            *zr += kernels::dot(&row[..is], x) + kernels::dot(&row[is..], h_prev);
        }
        for v in &mut z[..3 * hs] {
            *v = kernels::sigmoid(*v);
        }
        for v in &mut z[3 * hs..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        let mut tanh_c = vec![0.0; hs];
        for k in 0..hs {
            let (i, f, o, g) = (z[k], z[hs + k], z[2 * hs + k], z[3 * hs + k]);
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: z,
            tanh_c,
        };
        (h, c, cache)
    }

    /// Accumulates into `acc`; returns `(∂x, ∂h_prev, ∂c_prev)`.
    pub(crate) fn step_backward(
        &self,
        cache: &LstmCache,
        grad_h: &[f64],
        grad_c: &[f64],
        acc: &mut LstmCellParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden_size();
        let is = self.input_size();
        let z = &cache.gates;
        let mut dz = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for k in 0..hs {
            let (i, f, o, g) = (z[k], z[hs + k], z[2 * hs + k], z[3 * hs + k]);
            let tc = cache.tanh_c[k];
            let dc = grad_c[k] + grad_h[k] * o * (1.0 - tc * tc);
            dz[k] = dc * g * i * (1.0 - i);
            dz[hs + k] = dc * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * hs + k] = grad_h[k] * tc * o * (1.0 - o);
            dz[3 * hs + k] = dc * i * (1.0 - g * g);
            dc_prev[k] = dc * f;
        }
        let cols = is + hs;
        let mut dx = vec![0.0; is];
        let mut dh = vec![0.0; hs];
        for ((&d, row), grow) in dz
            .iter()
            .zip(self.w.data().chunks_exact(cols))
            .zip(acc.w.data_mut().chunks_exact_mut(cols))
        {
            if d == 0.0 {
                continue;
            }
            kernels::axpy(d, &cache.x, &mut grow[..is]);
            kernels::axpy(d, &cache.h_prev, &mut grow[is..]);
            kernels::axpy(d, &row[..is], &mut dx);
            kernels::axpy(d, &row[is..], &mut dh);
        }
        kernels::axpy(1.0, &dz, acc.b.data_mut());
        (dx, dh, dc_prev)
    }

    fn check_step(&self, x: usize, h: usize, c: usize) -> Result<()> {
        if x != self.input_size() || h != self.hidden_size() || c != self.hidden_size() {
            return Err(Error::shape(format!(
                "LSTM cell ({} in, {} hidden) given x={x} h={h} c={c}",
                self.input_size(),
                self.hidden_size()
            )));
        }
        Ok(())
    }
}

/// One cell step: returns `(h, c, cache)` with `h = o ⊙ tanh(c)`.
pub fn lstm_cell_forward(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &LstmCellParams,
) -> Result<(Tensor, Tensor, LstmCache)> {
    p.check_step(x.len(), h_prev.len(), c_prev.len())?;
    let (h, c, cache) = p.step(x.data(), h_prev.data(), c_prev.data());
    let h = Tensor::vector(h).map_err(|_| Error::NonFinite("LSTM hidden state".into()))?;
    let c = Tensor::vector(c).map_err(|_| Error::NonFinite("LSTM cell state".into()))?;
    Ok((h, c, cache))
}

pub fn lstm_cell_backward(
    grad_h: &Tensor,
    grad_c: &Tensor,
    cache: &LstmCache,
    p: &LstmCellParams,
) -> Result<LstmCellGrads> {
    p.check_step(cache.x.len(), cache.h_prev.len(), cache.c_prev.len())
        .map_err(|_| Error::InvalidArgument("LSTM cache does not match these parameters".into()))?;
    p.check_step(cache.x.len(), grad_h.len(), grad_c.len())?;
    let mut acc = LstmCellParams::zeros(p.input_size(), p.hidden_size());
    let (dx, dh, dc) = p.step_backward(cache, grad_h.data(), grad_c.data(), &mut acc);
    Ok(LstmCellGrads {
        grad_x: Tensor::vector(dx)?,
        grad_h_prev: Tensor::vector(dh)?,
        grad_c_prev: Tensor::vector(dc)?,
        params: acc,
    })
}

/// Per-direction step caches of a bi-directional encoder pass.
#[derive(Clone, Debug)]
pub struct BiLstmCache {
    fwd: Vec<LstmCache>,
    /// Indexed by sequence position, not by processing order.
    bwd: Vec<LstmCache>,
}

/// Encodes a `T × E` sequence into `T × 2H` annotations `[→h_i; ←h_i]`.
///
/// Also returns the summary `[→h_T; ←h_T]`: the forward direction's final
/// state next to the backward direction's state at the last position.
pub fn bilstm_encode(
    x: &Tensor,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> Result<(Tensor, Tensor, BiLstmCache)> {
    let t_len = x.rows();
    if x.rank() != 2 || t_len == 0 {
        return Err(Error::Empty("encoder input sequence"));
    }
    if x.cols() != fwd.input_size() || x.cols() != bwd.input_size() {
        return Err(Error::shape("encoder input width differs from cell input size"));
    }
    if fwd.hidden_size() != bwd.hidden_size() {
        return Err(Error::shape("encoder directions differ in hidden size"));
    }
    let hs = fwd.hidden_size();
    let mut ann = Tensor::zeros(&[t_len, 2 * hs]);
    let mut fwd_caches = Vec::with_capacity(t_len);
    let (mut h, mut c) = (vec![0.0; hs], vec![0.0; hs]);
    for t in 0..t_len {
        let (nh, nc, cache) = fwd.step(x.row(t), &h, &c);
        ann.row_mut(t)[..hs].copy_from_slice(&nh);
        fwd_caches.push(cache);
        h = nh;
        c = nc;
    }
    let mut bwd_caches = Vec::with_capacity(t_len);
    let (mut h, mut c) = (vec![0.0; hs], vec![0.0; hs]);
    for t in (0..t_len).rev() {
        let (nh, nc, cache) = bwd.step(x.row(t), &h, &c);
        ann.row_mut(t)[hs..].copy_from_slice(&nh);
        bwd_caches.push(cache);
        h = nh;
        c = nc;
    }
    bwd_caches.reverse();
    ann.check_finite("encoder annotations")?;
    let summary = Tensor::vector(ann.row(t_len - 1).to_vec())?;
    Ok((
        ann,
        summary,
        BiLstmCache {
            fwd: fwd_caches,
            bwd: bwd_caches,
        },
    ))
}

/// Backpropagates through both directions; returns `∂x` (`T × E`).
pub fn bilstm_backward(
    grad_ann: &Tensor,
    grad_summary: &[f64],
    cache: &BiLstmCache,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
    acc_fwd: &mut LstmCellParams,
    acc_bwd: &mut LstmCellParams,
) -> Result<Tensor> {
    let t_len = cache.fwd.len();
    let hs = fwd.hidden_size();
    if grad_ann.rows() != t_len || grad_ann.cols() != 2 * hs || grad_summary.len() != 2 * hs {
        return Err(Error::shape("encoder gradient shape"));
    }
    let mut gx = Tensor::zeros(&[t_len, fwd.input_size()]);
    let mut dh = grad_summary[..hs].to_vec();
    let mut dc = vec![0.0; hs];
    for t in (0..t_len).rev() {
        kernels::axpy(1.0, &grad_ann.row(t)[..hs], &mut dh);
        let (dx, ndh, ndc) = fwd.step_backward(&cache.fwd[t], &dh, &dc, acc_fwd);
        kernels::axpy(1.0, &dx, gx.row_mut(t));
        dh = ndh;
        dc = ndc;
    }
    // the backward direction ran from T-1 down to 0, so its gradient flows upward
    let mut dh = vec![0.0; hs];
    let mut dc = vec![0.0; hs];
    for t in 0..t_len {
        kernels::axpy(1.0, &grad_ann.row(t)[hs..], &mut dh);
        if t == t_len - 1 {
            kernels::axpy(1.0, &grad_summary[hs..], &mut dh);
        }
        let (dx, ndh, ndc) = bwd.step_backward(&cache.bwd[t], &dh, &dc, acc_bwd);
        kernels::axpy(1.0, &dx, gx.row_mut(t));
        dh = ndh;
        dc = ndc;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    fn random_cell(input: usize, hidden: usize, seed: u64) -> LstmCellParams {
        let mut r = rng(seed);
        LstmCellParams::new(
            random_tensor(&[4 * hidden, input + hidden], &mut r, 0.8),
            random_tensor(&[4 * hidden], &mut r, 0.5),
        )
        .unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmCellParams::zeros(3, 2);
        let (h, c, _) = lstm_cell_forward(&Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_cell_by_hand() {
        // rows: input, forget, output, candidate; columns: x, h_prev
        let w = [0.5, -0.3, 0.8, 0.1, -0.6, 0.4, 0.9, -0.2];
        let b = [0.1, 1.0, -0.1, 0.05];
        let p = LstmCellParams::new(
            Tensor::matrix(4, 2, w.to_vec()).unwrap(),
            Tensor::vector(b.to_vec()).unwrap(),
        )
        .unwrap();
        let (x, hp, cp) = (0.7, -0.4, 0.25);
        let i = sigmoid(w[0] * x + w[1] * hp + b[0]);
        let f = sigmoid(w[2] * x + w[3] * hp + b[1]);
        let o = sigmoid(w[4] * x + w[5] * hp + b[2]);
        let g = (w[6] * x + w[7] * hp + b[3]).tanh();
        let c = f * cp + i * g;
        let h = o * c.tanh();
        let (ht, ct, _) = lstm_cell_forward(
            &Tensor::vector(vec![x]).unwrap(),
            &Tensor::vector(vec![hp]).unwrap(),
            &Tensor::vector(vec![cp]).unwrap(),
            &p,
        )
        .unwrap();
        assert!((ht.data()[0] - h).abs() < 1e-12);
        assert!((ct.data()[0] - c).abs() < 1e-12);
    }

    #[test]
    fn hidden_state_is_bounded() {
        let p = random_cell(3, 4, 7);
        let mut r = rng(8);
        for _ in 0..50 {
            let x = random_tensor(&[3], &mut r, 50.0);
            let h = random_tensor(&[4], &mut r, 1.0);
            let c = random_tensor(&[4], &mut r, 20.0);
            let (h, _, cache) = lstm_cell_forward(&x, &h, &c, &p).unwrap();
            assert!(h.data().iter().all(|v| v.abs() <= 1.0));
            assert!(cache.tanh_cell().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn cell_backward_matches_finite_differences() {
        let p = random_cell(3, 4, 1);
        let mut r = rng(2);
        let x = random_tensor(&[3], &mut r, 1.0);
        let h0 = random_tensor(&[4], &mut r, 1.0);
        let c0 = random_tensor(&[4], &mut r, 1.0);
        let gh = random_tensor(&[4], &mut r, 1.0);
        let gc = random_tensor(&[4], &mut r, 1.0);
        let objective = |p: &LstmCellParams, x: &[f64], h: &[f64], c: &[f64]| {
            let (h1, c1, _) = p.step(x, h, c);
            kernels::dot(&h1, gh.data()) + kernels::dot(&c1, gc.data())
        };
        let (_, _, cache) = lstm_cell_forward(&x, &h0, &c0, &p).unwrap();
        let grads = lstm_cell_backward(&gh, &gc, &cache, &p).unwrap();
        let eps = 1e-5;
        let nx = numeric_grad(x.data(), eps, |v| objective(&p, v, h0.data(), c0.data()));
        assert_close_rel(grads.grad_x.data(), &nx, 1e-4, "dx");
        let nh = numeric_grad(h0.data(), eps, |v| objective(&p, x.data(), v, c0.data()));
        assert_close_rel(grads.grad_h_prev.data(), &nh, 1e-4, "dh");
        let nc = numeric_grad(c0.data(), eps, |v| objective(&p, x.data(), h0.data(), v));
        assert_close_rel(grads.grad_c_prev.data(), &nc, 1e-4, "dc");
        let nw = numeric_grad(p.w.data(), eps, |w| {
            let mut q = p.clone();
            q.w.data_mut().copy_from_slice(w);
            objective(&q, x.data(), h0.data(), c0.data())
        });
        assert_close_rel(grads.params.w.data(), &nw, 1e-4, "dW");
        let nb = numeric_grad(p.b.data(), eps, |b| {
            let mut q = p.clone();
            q.b.data_mut().copy_from_slice(b);
            objective(&q, x.data(), h0.data(), c0.data())
        });
        assert_close_rel(grads.params.b.data(), &nb, 1e-4, "db");

        let zero = lstm_cell_backward(&Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &cache, &p).unwrap();
        assert!(zero.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(zero.params.w.data().iter().all(|&v| v == 0.0));

        let doubled = lstm_cell_backward(&gh.scale(2.0), &gc.scale(2.0), &cache, &p).unwrap();
        for (a, b) in doubled.grad_x.data().iter().zip(grads.grad_x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let p = random_cell(3, 4, 1);
        let other = random_cell(2, 4, 1);
        let (_, _, cache) = lstm_cell_forward(&Tensor::zeros(&[3]), &Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &p).unwrap();
        assert!(lstm_cell_backward(&Tensor::zeros(&[4]), &Tensor::zeros(&[4]), &cache, &other).is_err());
    }

    #[test]
    fn encoder_shapes_and_single_token() {
        let fwd = random_cell(6, 8, 3);
        let bwd = random_cell(6, 8, 4);
        let mut r = rng(5);
        let x = random_tensor(&[5, 6], &mut r, 1.0);
        let (ann, summary, _) = bilstm_encode(&x, &fwd, &bwd).unwrap();
        assert_eq!(ann.shape(), &[5, 16]);
        assert_eq!(summary.data(), ann.row(4));

        let x1 = random_tensor(&[1, 6], &mut r, 1.0);
        let (ann, _, _) = bilstm_encode(&x1, &fwd, &bwd).unwrap();
        let zero = vec![0.0; 8];
        let (hf, _, _) = fwd.step(x1.row(0), &zero, &zero);
        let (hb, _, _) = bwd.step(x1.row(0), &zero, &zero);
        assert_eq!(&ann.row(0)[..8], hf.as_slice());
        assert_eq!(&ann.row(0)[8..], hb.as_slice());

        assert!(bilstm_encode(&Tensor::zeros(&[0, 6]), &fwd, &bwd).is_err());
    }

    #[test]
    fn encoder_directions_follow_two_pass_oracle() {
        let fwd = random_cell(2, 3, 10);
        let bwd = random_cell(2, 3, 11);
        let mut r = rng(12);
        let x = random_tensor(&[3, 2], &mut r, 1.0);
        let zero = vec![0.0; 3];
        // forward pass left to right
        let (f0, c0, _) = fwd.step(x.row(0), &zero, &zero);
        let (f1, c1, _) = fwd.step(x.row(1), &f0, &c0);
        let (f2, _, _) = fwd.step(x.row(2), &f1, &c1);
        // backward pass right to left
        let (b2, d2, _) = bwd.step(x.row(2), &zero, &zero);
        let (b1, d1, _) = bwd.step(x.row(1), &b2, &d2);
        let (b0, _, _) = bwd.step(x.row(0), &b1, &d1);
        let (ann, _, _) = bilstm_encode(&x, &fwd, &bwd).unwrap();
        for (t, (f, b)) in [(f0, b0), (f1, b1), (f2, b2)].iter().enumerate() {
            assert_eq!(&ann.row(t)[..3], f.as_slice());
            assert_eq!(&ann.row(t)[3..], b.as_slice());
        }
        // reversing the sequence moves the backward states' inputs accordingly
        let rev = Tensor::from_rows(&[x.row(2).to_vec(), x.row(1).to_vec(), x.row(0).to_vec()]).unwrap();
        let (ann_rev, _, _) = bilstm_encode(&rev, &bwd, &fwd).unwrap();
        for t in 0..3 {
            assert_eq!(&ann_rev.row(2 - t)[3..], &ann.row(t)[..3]);
            assert_eq!(&ann_rev.row(2 - t)[..3], &ann.row(t)[3..]);
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let fwd = random_cell(3, 2, 20);
        let bwd = random_cell(3, 2, 21);
        let mut r = rng(22);
        let x = random_tensor(&[4, 3], &mut r, 1.0);
        let ga = random_tensor(&[4, 4], &mut r, 1.0);
        let gs = random_tensor(&[4], &mut r, 1.0);
        let objective = |x: &[f64], fwd: &LstmCellParams, bwd: &LstmCellParams| {
            let xt = Tensor::matrix(4, 3, x.to_vec()).unwrap();
            let (ann, s, _) = bilstm_encode(&xt, fwd, bwd).unwrap();
            kernels::dot(ann.data(), ga.data()) + kernels::dot(s.data(), gs.data())
        };
        let (_, _, cache) = bilstm_encode(&x, &fwd, &bwd).unwrap();
        let mut af = LstmCellParams::zeros(3, 2);
        let mut ab = LstmCellParams::zeros(3, 2);
        let gx = bilstm_backward(&ga, gs.data(), &cache, &fwd, &bwd, &mut af, &mut ab).unwrap();
        let nx = numeric_grad(x.data(), 1e-5, |v| objective(v, &fwd, &bwd));
        assert_close_rel(gx.data(), &nx, 1e-4, "dx");
        let nw = numeric_grad(bwd.w.data(), 1e-5, |w| {
            let mut q = bwd.clone();
            q.w.data_mut().copy_from_slice(w);
            objective(x.data(), &fwd, &q)
        });
        assert_close_rel(ab.w.data(), &nw, 1e-4, "dW_bwd");
        let nw = numeric_grad(fwd.w.data(), 1e-5, |w| {
            let mut q = fwd.clone();
            q.w.data_mut().copy_from_slice(w);
            objective(x.data(), &q, &bwd)
        });
        assert_close_rel(af.w.data(), &nw, 1e-4, "dW_fwd");
    }
}
