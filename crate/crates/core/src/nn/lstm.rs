//! LSTM cell (Hochreiter & Schmidhuber, with forget gate) and stacked
//! sequence layers with backpropagation through time.
//!
//! Gate parameters are packed by rows in the order input, forget, cell
//! candidate, output: `w_input` is `[4h × in]`, `w_hidden` is `[4h × h]` and
//! `bias` is `[4h]`. Row block `k` of each holds `W_k`, `U_k` and `b_k`.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::{check_len, fill_uniform, gemm, glorot_limit, Params, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<S = f32> {
    input_dim: usize,
    hidden_dim: usize,
    w_input: Tensor<S>,
    w_hidden: Tensor<S>,
    bias: Tensor<S>,
}

/// Values recorded by a sequence forward pass, time-major (`[step][batch][..]`).
#[derive(Debug, Clone)]
pub struct LstmTrace<S> {
    steps: usize,
    batch: usize,
    input: Vec<S>,
    gates: Vec<S>,
    cells: Vec<S>,
    hidden: Vec<S>,
}

impl<S: Scalar> LstmTrace<S> {
    pub fn hidden(&self) -> &[S] {
        &self.hidden
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<S: Scalar> LstmLayer<S> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmLayer {
            input_dim,
            hidden_dim,
            w_input: Tensor::zeros(&[4 * hidden_dim, input_dim]),
            w_hidden: Tensor::zeros(&[4 * hidden_dim, hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Glorot-uniform per gate block, zero biases.
    pub fn glorot(input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        let mut layer = Self::zeros(input_dim, hidden_dim);
        fill_uniform(&mut layer.w_input, glorot_limit(input_dim, hidden_dim), rng);
        fill_uniform(&mut layer.w_hidden, glorot_limit(hidden_dim, hidden_dim), rng);
        layer
    }

    pub fn from_parts(w_input: Tensor<S>, w_hidden: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let h4 = bias.len();
        let bad = || Error::ShapeMismatch { expected: vec![h4], actual: w_input.shape().to_vec() };
        if !h4.is_multiple_of(4) || h4 == 0 {
            return Err(bad());
        }
        let h = h4 / 4;
        if w_input.shape().len() != 2 || w_input.shape()[0] != h4 || w_hidden.shape() != [h4, h] {
            return Err(bad());
        }
        Ok(LstmLayer { input_dim: w_input.shape()[1], hidden_dim: h, w_input, w_hidden, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn w_input(&self) -> &Tensor<S> {
        &self.w_input
    }

    pub fn w_hidden(&self) -> &Tensor<S> {
        &self.w_hidden
    }

    pub fn bias(&self) -> &Tensor<S> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<S> {
        &mut self.bias
    }

    /// Row block of `w_input` belonging to one gate (`[h × in]`).
    pub fn gate_input_weights(&self, gate: Gate) -> &[S] {
        let n = self.hidden_dim * self.input_dim;
        &self.w_input.data()[gate as usize * n..(gate as usize + 1) * n]
    }

    /// Row block of `w_hidden` belonging to one gate (`[h × h]`).
    pub fn gate_hidden_weights(&self, gate: Gate) -> &[S] {
        let n = self.hidden_dim * self.hidden_dim;
        &self.w_hidden.data()[gate as usize * n..(gate as usize + 1) * n]
    }

    pub fn gate_bias(&self, gate: Gate) -> &[S] {
        let h = self.hidden_dim;
        &self.bias.data()[gate as usize * h..(gate as usize + 1) * h]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim)
    }

    pub fn cast<T: Scalar>(&self) -> LstmLayer<T> {
        LstmLayer {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_input: self.w_input.cast(),
            w_hidden: self.w_hidden.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Turns pre-activations into gate values in place and advances the cell.
    fn activate(&self, pre: &mut [S], c_prev: Option<&[S]>, c: &mut [S], h: &mut [S], batch: usize) {
        let hd = self.hidden_dim;
        for b in 0..batch {
            let g = &mut pre[b * 4 * hd..(b + 1) * 4 * hd];
            g[..2 * hd].iter_mut().for_each(|v| *v = v.fast_sigmoid());
            g[2 * hd..3 * hd].iter_mut().for_each(|v| *v = v.fast_tanh());
            g[3 * hd..].iter_mut().for_each(|v| *v = v.fast_sigmoid());
            let (ig, rest) = g.split_at(hd);
            let (fg, rest) = rest.split_at(hd);
            let (cg, og) = rest.split_at(hd);
            let cb = &mut c[b * hd..(b + 1) * hd];
            let hb = &mut h[b * hd..(b + 1) * hd];
            match c_prev {
                Some(cp) => {
                    let cp = &cp[b * hd..(b + 1) * hd];
                    for j in 0..hd {
                        cb[j] = fg[j] * cp[j] + ig[j] * cg[j];
                    }
                }
                None => {
                    for j in 0..hd {
                        cb[j] = ig[j] * cg[j];
                    }
                }
            }
            for j in 0..hd {
                hb[j] = og[j] * cb[j].fast_tanh();
            }
        }
    }

    fn broadcast_bias(&self, rows: usize) -> Vec<S> {
        let mut pre = Vec::with_capacity(rows * 4 * self.hidden_dim);
        for _ in 0..rows {
            pre.extend_from_slice(self.bias.data());
        }
        pre
    }

    /// One step for a batch with explicit recurrent state.
    pub fn step_batch(&self, x: &[S], h: &[S], c: &[S], batch: usize) -> (Vec<S>, Vec<S>) {
        let hd = self.hidden_dim;
        let mut pre = self.broadcast_bias(batch);
        gemm(batch, self.input_dim, 4 * hd, S::one(), x, false, self.w_input.data(), true, S::one(), &mut pre);
        gemm(batch, hd, 4 * hd, S::one(), h, false, self.w_hidden.data(), true, S::one(), &mut pre);
        let mut c_next = vec![S::zero(); batch * hd];
        let mut h_next = vec![S::zero(); batch * hd];
        self.activate(&mut pre, Some(c), &mut c_next, &mut h_next, batch);
        (h_next, c_next)
    }

    /// Runs the layer over `steps` time steps from zero state. `input` is
    /// time-major `[steps][batch][input_dim]`.
    pub fn forward_sequence(&self, input: Vec<S>, steps: usize, batch: usize) -> LstmTrace<S> {
        let hd = self.hidden_dim;
        assert_eq!(input.len(), steps * batch * self.input_dim, "lstm input length");
        let rows = steps * batch;
        let mut gates = self.broadcast_bias(rows);
        gemm(rows, self.input_dim, 4 * hd, S::one(), &input, false, self.w_input.data(), true, S::one(), &mut gates);
        let mut cells = vec![S::zero(); rows * hd];
        let mut hidden = vec![S::zero(); rows * hd];
        let sh = batch * hd;
        let sg = batch * 4 * hd;
        for t in 0..steps {
            let (h_done, h_rest) = hidden.split_at_mut(t * sh);
            let (c_done, c_rest) = cells.split_at_mut(t * sh);
            let pre = &mut gates[t * sg..(t + 1) * sg];
            let c_prev = if t > 0 {
                let h_prev = &h_done[(t - 1) * sh..];
                gemm(batch, hd, 4 * hd, S::one(), h_prev, false, self.w_hidden.data(), true, S::one(), pre);
                Some(&c_done[(t - 1) * sh..])
            } else {
                None
            };
            self.activate(pre, c_prev, &mut c_rest[..sh], &mut h_rest[..sh], batch);
        }
        LstmTrace { steps, batch, input, gates, cells, hidden }
    }

    /// Backpropagation through time. `d_hidden` is dL/dh_t for every step
    /// (time-major). Accumulates into `grad`; returns dL/dinput when `want_dx`.
    pub fn backward(
        &self,
        trace: Option<&LstmTrace<S>>,
        d_hidden: &[S],
        grad: &mut LstmLayer<S>,
        want_dx: bool,
    ) -> Result<Option<Vec<S>>> {
        let tr = trace.ok_or(Error::NoForwardRecorded)?;
        let (steps, batch, hd) = (tr.steps, tr.batch, self.hidden_dim);
        check_len(steps * batch * hd, d_hidden.len())?;
        let sh = batch * hd;
        let sg = batch * 4 * hd;
        let one = S::one();
        let mut d_pre = vec![S::zero(); steps * sg];
        let mut dh_next = vec![S::zero(); sh];
        let mut dc_next = vec![S::zero(); sh];
        for t in (0..steps).rev() {
            let gates = &tr.gates[t * sg..(t + 1) * sg];
            let cells = &tr.cells[t * sh..(t + 1) * sh];
            let dpre = &mut d_pre[t * sg..(t + 1) * sg];
            for b in 0..batch {
                for j in 0..hd {
                    let k = b * hd + j;
                    let gb = b * 4 * hd;
                    let (ig, fg, cg, og) = (gates[gb + j], gates[gb + hd + j], gates[gb + 2 * hd + j], gates[gb + 3 * hd + j]);
                    let c_prev = if t > 0 { tr.cells[(t - 1) * sh + k] } else { S::zero() };
                    let tc = cells[k].fast_tanh();
                    let dh = d_hidden[t * sh + k] + dh_next[k];
                    let d_o = dh * tc;
                    let dc = dc_next[k] + dh * og * (one - tc * tc);
                    dc_next[k] = dc * fg;
                    dpre[gb + j] = dc * cg * ig * (one - ig);
                    dpre[gb + hd + j] = dc * c_prev * fg * (one - fg);
                    dpre[gb + 2 * hd + j] = dc * ig * (one - cg * cg);
                    dpre[gb + 3 * hd + j] = d_o * og * (one - og);
                }
            }
            if t > 0 {
                gemm(batch, 4 * hd, hd, one, dpre, false, self.w_hidden.data(), false, S::zero(), &mut dh_next);
            }
        }
        let rows = steps * batch;
        gemm(4 * hd, rows, self.input_dim, one, &d_pre, true, &tr.input, false, one, grad.w_input.data_mut());
        if steps > 1 {
            gemm(
                4 * hd,
                (steps - 1) * batch,
                hd,
                one,
                &d_pre[sg..],
                true,
                &tr.hidden[..(steps - 1) * sh],
                false,
                one,
                grad.w_hidden.data_mut(),
            );
        }
        let db = grad.bias.data_mut();
        for row in d_pre.chunks_exact(4 * hd) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok(want_dx.then(|| {
            let mut dx = vec![S::zero(); rows * self.input_dim];
            gemm(rows, 4 * hd, self.input_dim, one, &d_pre, false, self.w_input.data(), false, S::zero(), &mut dx);
            dx
        }))
    }
}

impl<S: Scalar> Params<S> for LstmLayer<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("w_input".into(), &self.w_input),
            ("w_hidden".into(), &self.w_hidden),
            ("bias".into(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

/// Single LSTM step `(h', c')` from `(x, h, c)` with shape validation.
pub fn lstm_step<S: Scalar>(
    layer: &LstmLayer<S>,
    x: &Tensor<S>,
    h: &Tensor<S>,
    c: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    for (t, n) in [(x, layer.input_dim), (h, layer.hidden_dim), (c, layer.hidden_dim)] {
        if t.shape() != [n] {
            return Err(Error::ShapeMismatch { expected: vec![n], actual: t.shape().to_vec() });
        }
    }
    let (h2, c2) = layer.step_batch(x.data(), h.data(), c.data(), 1);
    Ok((Tensor::vector(h2), Tensor::vector(c2)))
}

/// Stack of LSTM layers; layer `l + 1` reads the hidden states of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack<S = f32> {
    layers: Vec<LstmLayer<S>>,
}

#[derive(Debug, Clone)]
pub struct LstmStackTrace<S> {
    layers: Vec<LstmTrace<S>>,
}

impl<S: Scalar> LstmStackTrace<S> {
    /// Hidden states of the top layer, time-major.
    pub fn top_hidden(&self) -> &[S] {
        self.layers.last().map(|t| t.hidden()).unwrap_or(&[])
    }
}

impl<S: Scalar> LstmStack<S> {
    pub fn glorot(input_dim: usize, hidden_dim: usize, depth: usize, rng: &mut SeededRng) -> Self {
        let layers = (0..depth)
            .map(|l| LstmLayer::glorot(if l == 0 { input_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        LstmStack { layers }
    }

    pub fn new(layers: Vec<LstmLayer<S>>) -> Result<Self> {
        for pair in layers.windows(2) {
            check_len(pair[0].hidden_dim(), pair[1].input_dim())?;
        }
        Ok(LstmStack { layers })
    }

    pub fn layers(&self) -> &[LstmLayer<S>] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LstmLayer::input_dim)
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, LstmLayer::hidden_dim)
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack { layers: self.layers.iter().map(LstmLayer::zeros_like).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> LstmStack<T> {
        LstmStack { layers: self.layers.iter().map(LstmLayer::cast).collect() }
    }

    pub fn forward(&self, input: Vec<S>, steps: usize, batch: usize) -> LstmStackTrace<S> {
        let mut traces: Vec<LstmTrace<S>> = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for layer in &self.layers {
            let tr = layer.forward_sequence(cur, steps, batch);
            cur = tr.hidden.clone();
            traces.push(tr);
        }
        LstmStackTrace { layers: traces }
    }

    pub fn backward(
        &self,
        trace: Option<&LstmStackTrace<S>>,
        d_top: &[S],
        grad: &mut LstmStack<S>,
        want_dx: bool,
    ) -> Result<Option<Vec<S>>> {
        let trace = trace.ok_or(Error::NoForwardRecorded)?;
        if trace.layers.len() != self.layers.len() {
            return Err(Error::NoForwardRecorded);
        }
        let mut upstream = d_top.to_vec();
        for l in (0..self.layers.len()).rev() {
            let need = want_dx || l > 0;
            match self.layers[l].backward(Some(&trace.layers[l]), &upstream, &mut grad.layers[l], need)? {
                Some(dx) => upstream = dx,
                None => return Ok(None),
            }
        }
        Ok(want_dx.then_some(upstream))
    }
}

impl<S: Scalar> Params<S> for LstmStack<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_tensors().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_keep_state_zero() {
        let layer: LstmLayer<f64> = LstmLayer::zeros(3, 2);
        let x = Tensor::vector(vec![0.7, -1.2, 3.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        let (h, c) = lstm_step(&layer, &x, &z, &z).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut layer: LstmLayer<f64> = LstmLayer::zeros(1, 1);
        layer.bias_mut().data_mut()[Gate::Forget as usize] = 20.0;
        let x = Tensor::vector(vec![0.5]);
        let h = Tensor::vector(vec![0.0]);
        let c = Tensor::vector(vec![1.0]);
        let (_, c2) = lstm_step(&layer, &x, &h, &c).unwrap();
        assert!((c2.data()[0] - 1.0).abs() < 1e-6, "{}", c2.data()[0]);
    }

    #[test]
    fn hidden_stays_in_open_interval() {
        let mut rng = crate::rng::new_rng(1);
        let mut layer: LstmLayer<f64> = LstmLayer::glorot(4, 3, &mut rng);
        for v in layer.bias_mut().data_mut() {
            *v = 5.0;
        }
        let mut h = Tensor::vector(vec![0.0; 3]);
        let mut c = Tensor::vector(vec![0.0; 3]);
        for step in 0..50 {
            let x = Tensor::vector((0..4).map(|i| ((step * 4 + i) as f64).sin() * 10.0).collect());
            let (h2, c2) = lstm_step(&layer, &x, &h, &c).unwrap();
            assert!(h2.data().iter().all(|v| v.abs() < 1.0));
            h = h2;
            c = c2;
        }
    }

    #[test]
    fn sequence_matches_repeated_steps() {
        let mut rng = crate::rng::new_rng(2);
        let layer: LstmLayer<f64> = LstmLayer::glorot(3, 4, &mut rng);
        let steps = 5;
        let batch = 2;
        let xs: Vec<f64> = (0..steps * batch * 3).map(|_| rng.normal()).collect();
        let trace = layer.forward_sequence(xs.clone(), steps, batch);
        let mut h = vec![0.0; batch * 4];
        let mut c = vec![0.0; batch * 4];
        for t in 0..steps {
            let (h2, c2) = layer.step_batch(&xs[t * batch * 3..(t + 1) * batch * 3], &h, &c, batch);
            h = h2;
            c = c2;
            let got = &trace.hidden()[t * batch * 4..(t + 1) * batch * 4];
            for (a, b) in got.iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_blocks_partition_parameters() {
        let layer: LstmLayer<f32> = LstmLayer::zeros(64, 128);
        assert_eq!(layer.gate_input_weights(Gate::Output).len(), 128 * 64);
        assert_eq!(layer.gate_hidden_weights(Gate::Cell).len(), 128 * 128);
        assert_eq!(layer.gate_bias(Gate::Forget).len(), 128);
        assert_eq!(layer.param_count(), 4 * (128 * 64 + 128 * 128 + 128));
    }

    #[test]
    fn shape_errors() {
        let layer: LstmLayer<f64> = LstmLayer::zeros(3, 2);
        let bad = Tensor::vector(vec![0.0; 2]);
        let z = Tensor::vector(vec![0.0; 2]);
        assert!(matches!(lstm_step(&layer, &bad, &z, &z), Err(Error::ShapeMismatch { .. })));
        let mut g = layer.zeros_like();
        assert!(matches!(layer.backward(None, &[], &mut g, false), Err(Error::NoForwardRecorded)));
    }
}
