//! The path filter: operation embeddings, a bidirectional LSTM encoder and a
//! two-layer classifier head producing `phi(a)`, the probability that a path
//! is weak.
//!
//! All parameters live in one flat `Vec<f64>` described by a [`Layout`];
//! gradients and Adam moments share that layout. Weight matrices are stored
//! input-major (`w[k * cols + j]` maps input `k` to output `j`). Every sample
//! of a batch is computed independently and in a fixed order, so a batch of
//! one and the same row of a larger batch agree bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Architecture, SearchSpace};

const PHI_MIN: f64 = f64::MIN_POSITIVE;
const PHI_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDims {
    pub layers: usize,
    pub ops: usize,
    pub hidden: usize,
}

impl FilterDims {
    pub fn for_space(space: &SearchSpace, hidden: usize) -> Self {
        FilterDims {
            layers: space.num_layers(),
            ops: space.max_ops(),
            hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    /// Dense weight matrices; the only kind subject to weight decay.
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmLayout {
    wx: Segment,
    wh: Segment,
    b: Segment,
}

/// Offsets of every parameter tensor in the flat vector.
#[derive(Clone, Debug)]
pub struct Layout {
    dims: FilterDims,
    embed: Segment,
    fwd: LstmLayout,
    bwd: LstmLayout,
    proj_f: Segment,
    proj_b: Segment,
    head_w1: Segment,
    head_b1: Segment,
    head_w2: Segment,
    head_b2: Segment,
    total: usize,
}

impl Layout {
    fn new(dims: FilterDims) -> Self {
        let h = dims.hidden;
        let mut off = 0;
        let mut seg = |name, len, kind| {
            let s = Segment {
                name,
                offset: off,
                len,
                kind,
            };
            off += len;
            s
        };
        let embed = seg("embed", dims.layers * dims.ops * h, ParamKind::Embedding);
        let fwd = LstmLayout {
            wx: seg("fwd.wx", h * 4 * h, ParamKind::Weight),
            wh: seg("fwd.wh", h * 4 * h, ParamKind::Weight),
            b: seg("fwd.b", 4 * h, ParamKind::Bias),
        };
        let bwd = LstmLayout {
            wx: seg("bwd.wx", h * 4 * h, ParamKind::Weight),
            wh: seg("bwd.wh", h * 4 * h, ParamKind::Weight),
            b: seg("bwd.b", 4 * h, ParamKind::Bias),
        };
        let proj_f = seg("proj_f", h * h, ParamKind::Weight);
        let proj_b = seg("proj_b", h * h, ParamKind::Weight);
        let head_w1 = seg("head.w1", h * h, ParamKind::Weight);
        let head_b1 = seg("head.b1", h, ParamKind::Bias);
        let head_w2 = seg("head.w2", h, ParamKind::Weight);
        let head_b2 = seg("head.b2", 1, ParamKind::Bias);
        Layout {
            dims,
            embed,
            fwd,
            bwd,
            proj_f,
            proj_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            total: off,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        vec![
            self.embed,
            self.fwd.wx,
            self.fwd.wh,
            self.fwd.b,
            self.bwd.wx,
            self.bwd.wh,
            self.bwd.b,
            self.proj_f,
            self.proj_b,
            self.head_w1,
            self.head_b1,
            self.head_w2,
            self.head_b2,
        ]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn embed_offset(&self, layer: usize, op: usize) -> usize {
        self.embed.offset + (layer * self.dims.ops + op) * self.dims.hidden
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y += a * x`
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out += x . W` for input-major `w` with `cols` outputs.
#[inline]
fn vec_mat_acc(out: &mut [f64], x: &[f64], w: &[f64], cols: usize) {
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            axpy(out, xk, &w[k * cols..(k + 1) * cols]);
        }
    }
}

/// `out[k] += W[k, :] . dz`
#[inline]
fn mat_vec_acc(out: &mut [f64], w: &[f64], cols: usize, dz: &[f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o += dot(&w[k * cols..(k + 1) * cols], dz);
    }
}

/// `dw[k, :] += x[k] * dz`
#[inline]
fn outer_acc(dw: &mut [f64], x: &[f64], dz: &[f64]) {
    let cols = dz.len();
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            axpy(&mut dw[k * cols..(k + 1) * cols], xk, dz);
        }
    }
}

/// One filter input: a path, or two paths mixed in embedding space.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Path(&'a Architecture),
    /// `gamma * A(pos) + (1 - gamma) * A(unl)`
    Mixed {
        pos: &'a Architecture,
        unl: &'a Architecture,
        gamma: f64,
    },
}

/// Cached LSTM step.
#[derive(Clone, Debug)]
struct Step {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates [i, f, g, o].
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug)]
struct SampleTape {
    /// Embedded sequence, `layers x hidden`.
    seq: Vec<f64>,
    /// Forward-direction steps in time order.
    fwd: Vec<Step>,
    /// Backward-direction steps in processing order (time L-1 down to 0).
    bwd: Vec<Step>,
    h_fwd: Vec<f64>,
    h_bwd: Vec<f64>,
    feat: Vec<f64>,
    pre1: Vec<f64>,
    relu1: Vec<f64>,
    /// Unclamped sigmoid of the logit.
    sig: f64,
}

/// Activations recorded by [`FilterNet::forward_tape`] for one batch.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<TapeInput>,
    samples: Vec<SampleTape>,
    phi: Vec<f64>,
}

#[derive(Clone, Debug)]
enum TapeInput {
    Path(Vec<usize>),
    Mixed {
        pos: Vec<usize>,
        unl: Vec<usize>,
        gamma: f64,
    },
}

impl Tape {
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Gradient vector with the same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }
}

/// Scores architectures with a weak-path probability.
pub trait PathScorer {
    fn score(&self, batch: &[Architecture]) -> Result<Vec<f64>>;

    fn score_one(&self, a: &Architecture) -> Result<f64> {
        Ok(self.score(std::slice::from_ref(a))?[0])
    }
}

#[derive(Clone, Debug)]
pub struct FilterNet {
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

impl PartialEq for FilterNet {
    fn eq(&self, other: &Self) -> bool {
        self.layout.dims == other.layout.dims && self.params == other.params
    }
}

impl FilterNet {
    /// Embeddings uniform on [-0.1, 0.1]; weights uniform on
    /// [-1/sqrt(H), 1/sqrt(H)]; biases zero except the forget gates (1.0).
    pub fn new(dims: FilterDims, seed: u64) -> Result<Self> {
        if dims.layers == 0 || dims.ops == 0 || dims.hidden == 0 {
            return Err(Error::Shape(format!("degenerate filter dims {dims:?}")));
        }
        let layout = Layout::new(dims);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dims.hidden as f64).sqrt();
        for seg in layout.segments() {
            let slice = &mut params[seg.range()];
            match seg.kind {
                ParamKind::Embedding => {
                    slice
                        .iter_mut()
                        .for_each(|p| *p = rng.random_range(-0.1..=0.1));
                }
                ParamKind::Weight => {
                    slice
                        .iter_mut()
                        .for_each(|p| *p = rng.random_range(-bound..=bound));
                }
                ParamKind::Bias => {}
            }
        }
        let h = dims.hidden;
        for lstm in [layout.fwd, layout.bwd] {
            params[lstm.b.offset + h..lstm.b.offset + 2 * h].fill(1.0);
        }
        Ok(FilterNet {
            layout,
            params,
            seed,
        })
    }

    pub fn for_space(space: &SearchSpace, hidden: usize, seed: u64) -> Result<Self> {
        FilterNet::new(FilterDims::for_space(space, hidden), seed)
    }

    pub fn dims(&self) -> FilterDims {
        self.layout.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(vec![0.0; self.layout.total])
    }

    /// Current embedding of `op` in `layer`.
    pub fn embedding_of(&self, layer: usize, op: usize) -> Result<&[f64]> {
        let d = self.layout.dims;
        if layer >= d.layers || op >= d.ops {
            return Err(Error::Shape(format!(
                "embedding ({layer},{op}) outside {}x{}",
                d.layers, d.ops
            )));
        }
        let off = self.layout.embed_offset(layer, op);
        Ok(&self.params[off..off + d.hidden])
    }

    fn check_arch(&self, a: &Architecture) -> Result<()> {
        let d = self.layout.dims;
        if a.len() != d.layers {
            return Err(Error::Shape(format!(
                "architecture length {} != {} layers",
                a.len(),
                d.layers
            )));
        }
        if let Some(&op) = a.ops().iter().find(|&&op| op >= d.ops) {
            return Err(Error::Shape(format!("op index {op} >= {}", d.ops)));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[Architecture]) -> Result<Vec<f64>> {
        for a in batch {
            self.check_arch(a)?;
        }
        Ok(batch
            .iter()
            .map(|a| self.run_sample(&self.embed(&Input::Path(a))).0)
            .collect())
    }

    /// `phi` of the sequence `gamma * A(pos) + (1 - gamma) * A(unl)`.
    pub fn forward_mixed(&self, pos: &Architecture, unl: &Architecture, gamma: f64) -> Result<f64> {
        self.check_input(&Input::Mixed { pos, unl, gamma })?;
        Ok(self.run_sample(&self.embed(&Input::Mixed { pos, unl, gamma })).0)
    }

    fn check_input(&self, input: &Input) -> Result<()> {
        match input {
            Input::Path(a) => self.check_arch(a),
            Input::Mixed { pos, unl, gamma } => {
                if !(0.0..=1.0).contains(gamma) {
                    return Err(Error::Domain(format!("mix weight {gamma} outside [0,1]")));
                }
                self.check_arch(pos)?;
                self.check_arch(unl)
            }
        }
    }

    /// Forward pass that records the activations needed by [`Self::backward`].
    pub fn forward_tape(&self, inputs: &[Input]) -> Result<Tape> {
        for input in inputs {
            self.check_input(input)?;
        }
        let mut samples = Vec::with_capacity(inputs.len());
        let mut phi = Vec::with_capacity(inputs.len());
        let mut tape_inputs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (p, tape) = self.run_sample(&self.embed(input));
            phi.push(p);
            samples.push(tape);
            tape_inputs.push(match input {
                Input::Path(a) => TapeInput::Path(a.ops().to_vec()),
                Input::Mixed { pos, unl, gamma } => TapeInput::Mixed {
                    pos: pos.ops().to_vec(),
                    unl: unl.ops().to_vec(),
                    gamma: *gamma,
                },
            });
        }
        Ok(Tape {
            inputs: tape_inputs,
            samples,
            phi,
        })
    }

    fn embed(&self, input: &Input) -> Vec<f64> {
        let d = self.layout.dims;
        let h = d.hidden;
        let mut seq = vec![0.0; d.layers * h];
        match input {
            Input::Path(a) => {
                for (t, &op) in a.ops().iter().enumerate() {
                    let off = self.layout.embed_offset(t, op);
                    seq[t * h..(t + 1) * h].copy_from_slice(&self.params[off..off + h]);
                }
            }
            Input::Mixed { pos, unl, gamma } => {
                for t in 0..d.layers {
                    let ep = self.layout.embed_offset(t, pos.ops()[t]);
                    let eu = self.layout.embed_offset(t, unl.ops()[t]);
                    for k in 0..h {
                        seq[t * h + k] =
                            gamma * self.params[ep + k] + (1.0 - gamma) * self.params[eu + k];
                    }
                }
            }
        }
        seq
    }

    fn lstm_step(&self, lstm: &LstmLayout, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Step, Vec<f64>, Vec<f64>) {
        let hd = self.layout.dims.hidden;
        let p = &self.params;
        let mut z = p[lstm.b.range()].to_vec();
        vec_mat_acc(&mut z, x, &p[lstm.wx.range()], 4 * hd);
        vec_mat_acc(&mut z, h_prev, &p[lstm.wh.range()], 4 * hd);
        let mut gates = z;
        for (j, g) in gates.iter_mut().enumerate() {
            *g = if (2 * hd..3 * hd).contains(&j) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        (
            Step {
                h_prev: h_prev.to_vec(),
                c_prev: c_prev.to_vec(),
                gates,
                tanh_c,
            },
            h,
            c,
        )
    }

    fn run_sample(&self, seq: &[f64]) -> (f64, SampleTape) {
        let d = self.layout.dims;
        let hd = d.hidden;
        let p = &self.params;

        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut fwd = Vec::with_capacity(d.layers);
        for t in 0..d.layers {
            let (step, h2, c2) = self.lstm_step(&self.layout.fwd, &seq[t * hd..(t + 1) * hd], &h, &c);
            fwd.push(step);
            h = h2;
            c = c2;
        }
        let h_fwd = h;

        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut bwd = Vec::with_capacity(d.layers);
        for t in (0..d.layers).rev() {
            let (step, h2, c2) = self.lstm_step(&self.layout.bwd, &seq[t * hd..(t + 1) * hd], &h, &c);
            bwd.push(step);
            h = h2;
            c = c2;
        }
        let h_bwd = h;

        let mut feat = vec![0.0; hd];
        vec_mat_acc(&mut feat, &h_fwd, &p[self.layout.proj_f.range()], hd);
        vec_mat_acc(&mut feat, &h_bwd, &p[self.layout.proj_b.range()], hd);

        let mut pre1 = p[self.layout.head_b1.range()].to_vec();
        vec_mat_acc(&mut pre1, &feat, &p[self.layout.head_w1.range()], hd);
        let relu1: Vec<f64> = pre1.iter().map(|&x| x.max(0.0)).collect();
        let logit = p[self.layout.head_b2.offset] + dot(&relu1, &p[self.layout.head_w2.range()]);
        let sig = sigmoid(logit);
        (
            sig.clamp(PHI_MIN, PHI_MAX),
            SampleTape {
                seq: seq.to_vec(),
                fwd,
                bwd,
                h_fwd,
                h_bwd,
                feat,
                pre1,
                relu1,
                sig,
            },
        )
    }

    /// Gradients of `sum_i dphi[i] * phi_i` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, dphi: &[f64]) -> Result<Gradients> {
        if tape.samples.is_empty() {
            return Err(Error::NoForwardCache);
        }
        if dphi.len() != tape.samples.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for a tape of {}",
                dphi.len(),
                tape.samples.len()
            )));
        }
        let mut grads = self.zero_grads();
        for ((s, input), &dp) in tape.samples.iter().zip(&tape.inputs).zip(dphi) {
            if dp != 0.0 {
                self.backward_sample(s, input, dp, &mut grads.0);
            }
        }
        Ok(grads)
    }

    fn backward_sample(&self, s: &SampleTape, input: &TapeInput, dphi: f64, g: &mut [f64]) {
        let lay = &self.layout;
        let d = lay.dims;
        let hd = d.hidden;
        let p = &self.params;

        let dlogit = dphi * s.sig * (1.0 - s.sig);
        g[lay.head_b2.offset] += dlogit;
        axpy(&mut g[lay.head_w2.range()], dlogit, &s.relu1);
        let mut dpre1: Vec<f64> = p[lay.head_w2.range()]
            .iter()
            .zip(&s.pre1)
            .map(|(&w, &z)| if z > 0.0 { dlogit * w } else { 0.0 })
            .collect();
        axpy(&mut g[lay.head_b1.range()], 1.0, &dpre1);
        outer_acc(&mut g[lay.head_w1.range()], &s.feat, &dpre1);
        let mut dfeat = vec![0.0; hd];
        mat_vec_acc(&mut dfeat, &p[lay.head_w1.range()], hd, &dpre1);
        dpre1.clear();

        outer_acc(&mut g[lay.proj_f.range()], &s.h_fwd, &dfeat);
        outer_acc(&mut g[lay.proj_b.range()], &s.h_bwd, &dfeat);
        let mut dh_fwd = vec![0.0; hd];
        mat_vec_acc(&mut dh_fwd, &p[lay.proj_f.range()], hd, &dfeat);
        let mut dh_bwd = vec![0.0; hd];
        mat_vec_acc(&mut dh_bwd, &p[lay.proj_b.range()], hd, &dfeat);

        let mut dseq = vec![0.0; d.layers * hd];
        let fwd_times: Vec<usize> = (0..d.layers).collect();
        let bwd_times: Vec<usize> = (0..d.layers).rev().collect();
        self.lstm_backward(&lay.fwd, &s.fwd, &fwd_times, &s.seq, dh_fwd, &mut dseq, g);
        self.lstm_backward(&lay.bwd, &s.bwd, &bwd_times, &s.seq, dh_bwd, &mut dseq, g);

        for t in 0..d.layers {
            let dx = &dseq[t * hd..(t + 1) * hd];
            match input {
                TapeInput::Path(ops) => {
                    let off = lay.embed_offset(t, ops[t]);
                    axpy(&mut g[off..off + hd], 1.0, dx);
                }
                TapeInput::Mixed { pos, unl, gamma } => {
                    if *gamma != 0.0 {
                        let off = lay.embed_offset(t, pos[t]);
                        axpy(&mut g[off..off + hd], *gamma, dx);
                    }
                    if *gamma != 1.0 {
                        let off = lay.embed_offset(t, unl[t]);
                        axpy(&mut g[off..off + hd], 1.0 - gamma, dx);
                    }
                }
            }
        }
    }

    /// Backpropagation through time for one direction. `steps[n]` was
    /// processed `n`-th and consumed input time `times[n]`.
    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        lstm: &LstmLayout,
        steps: &[Step],
        times: &[usize],
        seq: &[f64],
        mut dh: Vec<f64>,
        dseq: &mut [f64],
        g: &mut [f64],
    ) {
        let hd = self.layout.dims.hidden;
        let p = &self.params;
        let mut dc = vec![0.0; hd];
        let mut dz = vec![0.0; 4 * hd];
        for (step, &t) in steps.iter().zip(times).rev() {
            let gt = &step.gates;
            for k in 0..hd {
                let (i, f, gg, o) = (gt[k], gt[hd + k], gt[2 * hd + k], gt[3 * hd + k]);
                let tc = step.tanh_c[k];
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
                dz[k] = dck * gg * i * (1.0 - i);
                dz[hd + k] = dck * step.c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dck * i * (1.0 - gg * gg);
                dz[3 * hd + k] = d_o * o * (1.0 - o);
                dc[k] = dck * f;
            }
            axpy(&mut g[lstm.b.range()], 1.0, &dz);
            let x = &seq[t * hd..(t + 1) * hd];
            outer_acc(&mut g[lstm.wx.range()], x, &dz);
            outer_acc(&mut g[lstm.wh.range()], &step.h_prev, &dz);
            mat_vec_acc(&mut dseq[t * hd..(t + 1) * hd], &p[lstm.wx.range()], 4 * hd, &dz);
            dh.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_acc(&mut dh, &p[lstm.wh.range()], 4 * hd, &dz);
        }
    }

    /// Applies one Adam update with `grads`.
    pub fn adam_step(&mut self, adam: &mut AdamState, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.params.len() || adam.m.len() != self.params.len() {
            return Err(Error::Shape("gradient / moment size mismatch".into()));
        }
        adam.step += 1;
        let cfg = adam.config;
        let bc1 = 1.0 - cfg.beta1.powi(adam.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(adam.step as i32);
        for seg in self.layout.segments() {
            let decay = if seg.kind == ParamKind::Weight {
                cfg.weight_decay
            } else {
                0.0
            };
            for i in seg.range() {
                let gi = grads.0[i];
                adam.m[i] = cfg.beta1 * adam.m[i] + (1.0 - cfg.beta1) * gi;
                adam.v[i] = cfg.beta2 * adam.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = adam.m[i] / bc1;
                let v_hat = adam.v[i] / bc2;
                self.params[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * self.params[i]);
            }
        }
        Ok(())
    }

    pub fn new_adam(&self, config: AdamConfig) -> AdamState {
        AdamState::new(config, self.layout.total)
    }

    /// Weak-path decision: `phi(a) > threshold`.
    pub fn is_weak(&self, a: &Architecture, threshold: f64) -> Result<bool> {
        Ok(self.forward(std::slice::from_ref(a))?[0] > threshold)
    }
}

impl PathScorer for FilterNet {
    fn score(&self, batch: &[Architecture]) -> Result<Vec<f64>> {
        self.forward(batch)
    }
}

/// Precomputed scores for every architecture of a small space, by rank.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    space: SearchSpace,
    scores: Vec<f64>,
}

impl ScoreTable {
    pub fn build<S: PathScorer + ?Sized>(scorer: &S, space: &SearchSpace) -> Result<Self> {
        let all = space.enumerate()?;
        let scores = scorer.score(&all)?;
        Ok(ScoreTable {
            space: space.clone(),
            scores,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

impl PathScorer for ScoreTable {
    fn score(&self, batch: &[Architecture]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|a| {
                self.space.check(a, false)?;
                Ok(self.scores[self.space.rank_u64(a).unwrap() as usize])
            })
            .collect()
    }
}

/// Same score for every path.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl PathScorer for ConstantScorer {
    fn score(&self, batch: &[Architecture]) -> Result<Vec<f64>> {
        Ok(vec![self.0; batch.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, dense weights only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

const CHECKPOINT_FORMAT: &str = "pathshrink-filter";

/// Serialized filter parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCheckpoint {
    pub format: String,
    pub version: u32,
    pub dims: FilterDims,
    pub seed: u64,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
}

impl FilterCheckpoint {
    pub fn new(net: &FilterNet, adam: Option<&AdamState>) -> Self {
        FilterCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            dims: net.dims(),
            seed: net.seed,
            params: net.params.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn restore(&self) -> Result<(FilterNet, Option<AdamState>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        let layout = Layout::new(self.dims);
        if self.params.len() != layout.total {
            return Err(Error::Format(format!(
                "checkpoint has {} params, dims need {}",
                self.params.len(),
                layout.total
            )));
        }
        if let Some(a) = &self.adam {
            if a.m.len() != layout.total || a.v.len() != layout.total {
                return Err(Error::Format("adam moments do not match params".into()));
            }
        }
        Ok((
            FilterNet {
                layout,
                params: self.params.clone(),
                seed: self.seed,
            },
            self.adam.clone(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
