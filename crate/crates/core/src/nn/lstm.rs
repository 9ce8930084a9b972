//! LSTM cell and (bi)directional sequence passes with full BPTT.
//!
//! Gate blocks in the 4H-wide projections are ordered input, forget, cell,
//! output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: Tensor2,
    pub wh: Tensor2,
    pub b: Tensor2,
    #[serde(skip)]
    pub dwx: Option<Tensor2>,
    #[serde(skip)]
    pub dwh: Option<Tensor2>,
    #[serde(skip)]
    pub db: Option<Tensor2>,
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            wx: Tensor2::zeros(input, 4 * hidden),
            wh: Tensor2::zeros(hidden, 4 * hidden),
            b: Tensor2::zeros(1, 4 * hidden),
            dwx: None,
            dwh: None,
            db: None,
        }
    }

    /// Glorot-uniform weights, zero bias except 1.0 on the forget gate.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let lx = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let lh = (6.0 / (5 * hidden) as f64).sqrt();
        let wx = Tensor2::from_fn(input, 4 * hidden, |_, _| rng.random_range(-lx..lx));
        let wh = Tensor2::from_fn(hidden, 4 * hidden, |_, _| rng.random_range(-lh..lh));
        let b = Tensor2::from_fn(
            1,
            4 * hidden,
            |_, c| if (hidden..2 * hidden).contains(&c) { 1.0 } else { 0.0 },
        );
        Lstm {
            wx,
            wh,
            b,
            dwx: None,
            dwh: None,
            db: None,
        }
    }

    pub fn input_size(&self) -> usize {
        self.wx.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.wh.rows()
    }

    fn check(&self, op: &'static str) -> Result<()> {
        let h = self.hidden_size();
        if self.wh.cols() != 4 * h || self.wx.cols() != 4 * h || self.b.shape() != (1, 4 * h) {
            return Err(Error::shape(op, "inconsistent LSTM parameter shapes"));
        }
        Ok(())
    }

    fn accumulate(&mut self, dwx: Tensor2, dwh: Tensor2, db: Vec<f64>) -> Result<()> {
        match &mut self.dwx {
            Some(a) => a.add_assign(&dwx)?,
            None => self.dwx = Some(dwx),
        }
        match &mut self.dwh {
            Some(a) => a.add_assign(&dwh)?,
            None => self.dwh = Some(dwh),
        }
        let acc = self.db.get_or_insert_with(|| Tensor2::zeros(1, db.len()));
        acc.data_mut().iter_mut().zip(&db).for_each(|(a, v)| *a += v);
        Ok(())
    }
}

impl Parameterized for Lstm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        let (i, h) = (self.input_size(), self.hidden_size());
        let g = self.dwx.get_or_insert_with(|| Tensor2::zeros(i, 4 * h));
        f(self.wx.data_mut(), g.data());
        let g = self.dwh.get_or_insert_with(|| Tensor2::zeros(h, 4 * h));
        f(self.wh.data_mut(), g.data());
        let g = self.db.get_or_insert_with(|| Tensor2::zeros(1, 4 * h));
        f(self.b.data_mut(), g.data());
    }

    fn zero_grad(&mut self) {
        self.dwx = None;
        self.dwh = None;
        self.db = None;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies gate nonlinearities to a 4H pre-activation row in place.
fn activate(z: &mut [f64], h: usize) {
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * h..3 * h).contains(&k) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
}

/// Saved state of a single cell step.
#[derive(Debug, Clone)]
pub struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
}

/// One LSTM step. Returns `(h, c, cache)`.
pub fn lstm_cell_fwd(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &Lstm) -> Result<(Vec<f64>, Vec<f64>, CellCache)> {
    p.check("lstm_cell_fwd")?;
    let h = p.hidden_size();
    if x.len() != p.input_size() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::shape(
            "lstm_cell_fwd",
            format!(
                "x {}, h {}, c {} for input {} hidden {h}",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                p.input_size()
            ),
        ));
    }
    let xt = Tensor2::new(1, x.len(), x.to_vec())?;
    let ht = Tensor2::new(1, h, h_prev.to_vec())?;
    let mut z = matmul(&xt, &p.wx)?;
    z.add_assign(&matmul(&ht, &p.wh)?)?;
    z.add_assign(&p.b)?;
    let mut gates = z.into_data();
    activate(&mut gates, h);
    let (c, hn) = combine(&gates, c_prev, h);
    let cache = CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c: c.clone(),
    };
    Ok((hn, c, cache))
}

fn combine(gates: &[f64], c_prev: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; h];
    let mut hn = vec![0.0; h];
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c[j] = f * c_prev[j] + i * g;
        hn[j] = o * c[j].tanh();
    }
    (c, hn)
}

/// Gate pre-activation gradient for one step; `dc` is updated to the
/// gradient flowing into the previous cell state.
fn step_grad(dh: &[f64], dc: &mut [f64], gates: &[f64], c: &[f64], c_prev: &[f64], h: usize) -> Vec<f64> {
    let mut dz = vec![0.0; 4 * h];
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        let tc = c[j].tanh();
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dz[j] = dct * g * i * (1.0 - i);
        dz[h + j] = dct * c_prev[j] * f * (1.0 - f);
        dz[2 * h + j] = dct * i * (1.0 - g * g);
        dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
        dc[j] = dct * f;
    }
    dz
}

/// Backward through one step. Accumulates parameter gradients and returns
/// `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_bwd(
    dh: &[f64],
    dc: &[f64],
    cache: &CellCache,
    p: &mut Lstm,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let h = p.hidden_size();
    if dh.len() != h || dc.len() != h {
        return Err(Error::shape(
            "lstm_cell_bwd",
            format!("dh {}, dc {} for hidden {h}", dh.len(), dc.len()),
        ));
    }
    let mut dc_prev = dc.to_vec();
    let dz = step_grad(dh, &mut dc_prev, &cache.gates, &cache.c, &cache.c_prev, h);
    let dzt = Tensor2::new(1, 4 * h, dz.clone())?;
    let xt = Tensor2::new(1, cache.x.len(), cache.x.clone())?;
    let ht = Tensor2::new(1, h, cache.h_prev.clone())?;
    p.accumulate(matmul_tn(&xt, &dzt)?, matmul_tn(&ht, &dzt)?, dz)?;
    let dx = matmul_nt(&dzt, &p.wx)?.into_data();
    let dh_prev = matmul_nt(&dzt, &p.wh)?.into_data();
    Ok((dx, dh_prev, dc_prev))
}

/// Saved state of a unidirectional pass over a sequence.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Tensor2,
    /// Row t holds h_{t-1} (row 0 is the zero initial state).
    h_prev: Tensor2,
    gates: Tensor2,
    /// Row t holds c_t.
    c: Tensor2,
}

/// Runs the LSTM from zero state over `x` (T x input); returns T x H hidden states.
pub fn lstm_fwd(x: &Tensor2, p: &Lstm) -> Result<(Tensor2, LstmCache)> {
    p.check("lstm_fwd")?;
    let (t_len, h) = (x.rows(), p.hidden_size());
    if x.cols() != p.input_size() {
        return Err(Error::shape(
            "lstm_fwd",
            format!("input width {} vs {}", x.cols(), p.input_size()),
        ));
    }
    if t_len == 0 {
        return Err(Error::shape("lstm_fwd", "empty sequence"));
    }
    let mut gates = matmul(x, &p.wx)?;
    let mut hs = Tensor2::zeros(t_len, h);
    let mut h_prev = Tensor2::zeros(t_len, h);
    let mut c = Tensor2::zeros(t_len, h);
    let mut h_cur = vec![0.0; h];
    let mut c_cur = vec![0.0; h];
    let (wh, b) = (p.wh.data(), p.b.data());
    for t in 0..t_len {
        h_prev.row_mut(t).copy_from_slice(&h_cur);
        let z = gates.row_mut(t);
        for (zk, bk) in z.iter_mut().zip(b) {
            *zk += bk;
        }
        for (j, &hj) in h_cur.iter().enumerate() {
            if hj != 0.0 {
                for (zk, w) in z.iter_mut().zip(&wh[j * 4 * h..(j + 1) * 4 * h]) {
                    *zk += hj * w;
                }
            }
        }
        activate(z, h);
        let (cn, hn) = combine(z, &c_cur, h);
        c.row_mut(t).copy_from_slice(&cn);
        hs.row_mut(t).copy_from_slice(&hn);
        c_cur = cn;
        h_cur = hn;
    }
    Ok((
        hs,
        LstmCache {
            x: x.clone(),
            h_prev,
            gates,
            c,
        },
    ))
}

/// Full BPTT given `dh` (T x H, gradient of the loss w.r.t. every hidden
/// state). Accumulates parameter gradients and returns dX.
pub fn lstm_bwd(dh: &Tensor2, cache: &LstmCache, p: &mut Lstm) -> Result<Tensor2> {
    let (t_len, h) = (cache.x.rows(), p.hidden_size());
    if dh.shape() != (t_len, h) {
        return Err(Error::shape(
            "lstm_bwd",
            format!("dh {:?} vs {:?}", dh.shape(), (t_len, h)),
        ));
    }
    let mut dz = Tensor2::zeros(t_len, 4 * h);
    let mut dh_next = vec![0.0; h];
    let mut dc = vec![0.0; h];
    let zero = vec![0.0; h];
    let wh = p.wh.data().to_vec();
    for t in (0..t_len).rev() {
        let dh_t: Vec<f64> = dh.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let c_prev = if t == 0 { &zero[..] } else { cache.c.row(t - 1) };
        let dzt = step_grad(&dh_t, &mut dc, cache.gates.row(t), cache.c.row(t), c_prev, h);
        for (j, dn) in dh_next.iter_mut().enumerate() {
            *dn = wh[j * 4 * h..(j + 1) * 4 * h]
                .iter()
                .zip(&dzt)
                .map(|(w, g)| w * g)
                .sum();
        }
        dz.row_mut(t).copy_from_slice(&dzt);
    }
    let mut db = vec![0.0; 4 * h];
    for t in 0..t_len {
        db.iter_mut().zip(dz.row(t)).for_each(|(a, v)| *a += v);
    }
    p.accumulate(matmul_tn(&cache.x, &dz)?, matmul_tn(&cache.h_prev, &dz)?, db)?;
    matmul_nt(&dz, &p.wx)
}

fn reverse_rows(x: &Tensor2) -> Tensor2 {
    let idx: Vec<usize> = (0..x.rows()).rev().collect();
    x.gather_rows(&idx)
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    forward: LstmCache,
    backward: LstmCache,
}

/// Bidirectional pass: row t is `[forward h_t, backward h_t]` (T x 2H).
pub fn bilstm_fwd(x: &Tensor2, fwd: &Lstm, bwd: &Lstm) -> Result<(Tensor2, BiLstmCache)> {
    if fwd.hidden_size() != bwd.hidden_size() || fwd.input_size() != bwd.input_size() {
        return Err(Error::shape("bilstm_fwd", "forward and backward LSTMs differ in shape"));
    }
    let (hf, cf) = lstm_fwd(x, fwd)?;
    let (hb_rev, cb) = lstm_fwd(&reverse_rows(x), bwd)?;
    let out = hf.hcat(&reverse_rows(&hb_rev))?;
    Ok((
        out,
        BiLstmCache {
            forward: cf,
            backward: cb,
        },
    ))
}

pub fn bilstm_bwd(dy: &Tensor2, cache: &BiLstmCache, fwd: &mut Lstm, bwd: &mut Lstm) -> Result<Tensor2> {
    let h = fwd.hidden_size();
    if dy.cols() != 2 * h {
        return Err(Error::shape(
            "bilstm_bwd",
            format!("dy width {} vs {}", dy.cols(), 2 * h),
        ));
    }
    let mut dx = lstm_bwd(&dy.col_slice(0, h), &cache.forward, fwd)?;
    let dx_rev = lstm_bwd(&reverse_rows(&dy.col_slice(h, 2 * h)), &cache.backward, bwd)?;
    dx.add_assign(&reverse_rows(&dx_rev))?;
    Ok(dx)
}
