//! Small dense layers with hand-written backward passes.
//!
//! Every trainable model keeps its parameters in one flat `Vec<f64>`; layers
//! hold offsets into it. Backward passes accumulate into a gradient vector of
//! the same layout, which keeps the optimizer and checkpoint code oblivious to
//! the architecture.

use std::ops::Range;

use libm::erf;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::freqfeat::{FrequencySpectrum, MagnitudeScale};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let seg = Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len(),
        };
        let r = seg.range();
        self.segments.push(seg);
        r
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Glorot-uniform for matrices and kernels, zeros for biases.
    pub fn init(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut params = vec![0.0; self.len()];
        for seg in &self.segments {
            if seg.shape.len() < 2 {
                continue;
            }
            let receptive: usize = seg.shape[2..].iter().product();
            let fan_in = seg.shape[1] * receptive;
            let fan_out = seg.shape[0] * receptive;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[seg.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        params
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smallest distance a reported probability keeps from 0 and 1.
pub const PROB_EPS: f64 = 1e-12;

/// Sigmoid kept strictly inside `(0, 1)`.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy on a logit, computed stably.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Binary cross-entropy on probabilities, clamped to `[eps, 1 - eps]`.
pub fn bce(prob: f64, target: f64, eps: f64) -> f64 {
    let p = prob.clamp(eps, 1.0 - eps);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, input: usize, output: usize) -> Linear {
        let weight = layout.alloc(format!("{name}.weight"), &[output, input]);
        let bias = layout.alloc(format!("{name}.bias"), &[output]);
        Linear {
            input,
            output,
            weight,
            bias,
        }
    }

    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.output, self.input), &p[self.weight.clone()]).expect("layout")
    }

    fn b<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.bias.clone()])
    }

    pub fn weight_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.output, self.input), &mut p[self.weight.clone()]).expect("layout")
    }

    pub fn bias_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.bias.clone()])
    }

    /// Parameter range covering weight and bias.
    pub fn param_range(&self) -> Range<usize> {
        self.weight.start.min(self.bias.start)..self.weight.end.max(self.bias.end)
    }

    /// `x: [n, input] -> [n, output]`.
    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w(p).t()) + self.b(p)
    }

    pub fn forward_vec(&self, p: &[f64], x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w(p).dot(&x) + self.b(p)
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward(&self, p: &[f64], x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, g: &mut [f64]) -> Array2<f64> {
        {
            let mut gw =
                ArrayViewMut2::from_shape((self.output, self.input), &mut g[self.weight.clone()]).expect("layout");
            gw += &dy.t().dot(&x);
        }
        {
            let mut gb = ArrayViewMut1::from(&mut g[self.bias.clone()]);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w(p))
    }

    pub fn backward_vec(
        &self,
        p: &[f64],
        x: ArrayView1<'_, f64>,
        dy: ArrayView1<'_, f64>,
        g: &mut [f64],
    ) -> Array1<f64> {
        let x2 = x.insert_axis(Axis(0));
        let dy2 = dy.insert_axis(Axis(0));
        self.backward(p, x2, dy2, g).row(0).to_owned()
    }
}

/// Two-layer MLP head: `Linear -> GELU -> Dropout -> Linear`, one logit out.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array1<f64>,
    pre: Array1<f64>,
    mask: Option<Array1<f64>>,
    act: Array1<f64>,
}

impl ClassificationHead {
    pub fn new(layout: &mut ParamLayout, input: usize, hidden: usize, dropout: f64) -> ClassificationHead {
        ClassificationHead {
            hidden: Linear::new(layout, "head.hidden", input, hidden),
            out: Linear::new(layout, "head.out", hidden, 1),
            dropout,
        }
    }

    pub fn param_range(&self) -> Range<usize> {
        let a = self.hidden.param_range();
        let b = self.out.param_range();
        a.start.min(b.start)..a.end.max(b.end)
    }

    /// Returns the logit. Dropout is active only when `rng` is supplied.
    pub fn forward(&self, p: &[f64], x: ArrayView1<'_, f64>, rng: Option<&mut dyn RngCore>) -> (f64, HeadCache) {
        let pre = self.hidden.forward_vec(p, x);
        let mut act = pre.mapv(gelu);
        let mask = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let m = Array1::from_shape_fn(act.len(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                act *= &m;
                Some(m)
            }
            _ => None,
        };
        let logit = self.out.forward_vec(p, act.view())[0];
        (
            logit,
            HeadCache {
                input: x.to_owned(),
                pre,
                mask,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &HeadCache, dlogit: f64, g: &mut [f64]) -> Array1<f64> {
        let dy = Array1::from_elem(1, dlogit);
        let mut dact = self.out.backward_vec(p, cache.act.view(), dy.view(), g);
        if let Some(m) = &cache.mask {
            dact *= m;
        }
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        self.hidden.backward_vec(p, cache.input.view(), dpre.view(), g)
    }
}

/// Magnitude/phase encoder: `conv(kxk, same padding) -> GELU -> [avg-pool, max-pool] -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub channels: usize,
    pub kernel: usize,
    pub rows: usize,
    pub cols: usize,
    pub scale: MagnitudeScale,
    /// Pooling cells per axis `(rows, cols)`.
    pub grid: (usize, usize),
    kernel_w: Range<usize>,
    kernel_b: Range<usize>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pooled: Array1<f64>,
    argmax: Vec<(usize, usize)>,
}

impl ConvEncoder {
    pub const IN_CHANNELS: usize = 2;

    pub fn new(
        layout: &mut ParamLayout,
        rows: usize,
        cols: usize,
        channels: usize,
        kernel: usize,
        pool_grid: usize,
        out_dim: usize,
        scale: MagnitudeScale,
    ) -> ConvEncoder {
        let grid = (pool_grid.clamp(1, rows.max(1)), pool_grid.clamp(1, cols.max(1)));
        let kernel_w = layout.alloc("encoder.conv.weight", &[channels, Self::IN_CHANNELS, kernel, kernel]);
        let kernel_b = layout.alloc("encoder.conv.bias", &[channels]);
        let proj = Linear::new(layout, "encoder.proj", 2 * channels * grid.0 * grid.1, out_dim);
        ConvEncoder {
            channels,
            kernel,
            rows,
            cols,
            scale,
            grid,
            kernel_w,
            kernel_b,
            proj,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.output
    }

    fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Half-open row and column bounds of pooling cell `cell`.
    fn cell_bounds(&self, cell: usize) -> (Range<usize>, Range<usize>) {
        let (gr, gc) = self.grid;
        let (i, j) = (cell / gc, cell % gc);
        (
            i * self.rows / gr..(i + 1) * self.rows / gr,
            j * self.cols / gc..(j + 1) * self.cols / gc,
        )
    }

    fn kidx(&self, co: usize, ci: usize, dr: usize, dc: usize) -> usize {
        self.kernel_w.start + ((co * Self::IN_CHANNELS + ci) * self.kernel + dr) * self.kernel + dc
    }

    pub fn forward(&self, p: &[f64], spectrum: &FrequencySpectrum) -> (Array1<f64>, ConvCache) {
        let input = vec![
            standardize(spectrum.compressed_magnitude(self.scale)),
            standardize(spectrum.phase.clone()),
        ];
        let (h, w) = (self.rows, self.cols);
        let half = (self.kernel / 2) as isize;
        let mut pre = Vec::with_capacity(self.channels);
        let mut pooled = Array1::zeros(2 * self.channels * self.cells());
        let mut argmax = Vec::with_capacity(self.channels * self.cells());
        for co in 0..self.channels {
            let mut map = Array2::from_elem((h, w), p[self.kernel_b.start + co]);
            let dst = map.as_slice_mut().expect("standard layout");
            for (ci, plane) in input.iter().enumerate() {
                let src = plane.as_slice().expect("standard layout");
                for dr in 0..self.kernel {
                    for dc in 0..self.kernel {
                        let wgt = p[self.kidx(co, ci, dr, dc)];
                        let (rr, cr) = shifted_ranges(h, w, dr as isize - half, dc as isize - half);
                        let oc = dc as isize - half;
                        for r in rr {
                            let sr = (r as isize + dr as isize - half) as usize;
                            let out = &mut dst[r * w + cr.start..r * w + cr.end];
                            let s0 = (cr.start as isize + oc) as usize;
                            let inp = &src[sr * w + s0..sr * w + s0 + cr.len()];
                            out.iter_mut().zip(inp).for_each(|(o, i)| *o += wgt * i);
                        }
                    }
                }
            }
            let act = map.mapv(gelu);
            for cell in 0..self.cells() {
                let (rs, cs) = self.cell_bounds(cell);
                let n = (rs.len() * cs.len()) as f64;
                let mut sum = 0.0;
                let mut best = (f64::NEG_INFINITY, (0, 0));
                for r in rs {
                    for c in cs.clone() {
                        let a = act[[r, c]];
                        sum += a;
                        if a > best.0 {
                            best = (a, (r, c));
                        }
                    }
                }
                pooled[co * self.cells() + cell] = sum / n;
                pooled[(self.channels + co) * self.cells() + cell] = best.0;
                argmax.push(best.1);
            }
            pre.push(map);
        }
        let out = self.proj.forward_vec(p, pooled.view());
        (
            out,
            ConvCache {
                input,
                pre,
                pooled,
                argmax,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &ConvCache, dout: ArrayView1<'_, f64>, g: &mut [f64]) {
        let dpooled = self.proj.backward_vec(p, cache.pooled.view(), dout, g);
        let (h, w) = (self.rows, self.cols);
        let half = (self.kernel / 2) as isize;
        for co in 0..self.channels {
            let pre = &cache.pre[co];
            let mut dpre = Array2::<f64>::zeros((h, w));
            for cell in 0..self.cells() {
                let (rs, cs) = self.cell_bounds(cell);
                let davg = dpooled[co * self.cells() + cell] / (rs.len() * cs.len()) as f64;
                for r in rs {
                    for c in cs.clone() {
                        dpre[[r, c]] += davg;
                    }
                }
                let (ar, ac) = cache.argmax[co * self.cells() + cell];
                dpre[[ar, ac]] += dpooled[(self.channels + co) * self.cells() + cell];
            }
            dpre.zip_mut_with(pre, |d: &mut f64, &v: &f64| *d *= gelu_grad(v));

            g[self.kernel_b.start + co] += dpre.sum();
            let dsl = dpre.as_slice().expect("standard layout");
            for (ci, plane) in cache.input.iter().enumerate() {
                let src = plane.as_slice().expect("standard layout");
                for dr in 0..self.kernel {
                    for dc in 0..self.kernel {
                        let (rr, cr) = shifted_ranges(h, w, dr as isize - half, dc as isize - half);
                        let oc = dc as isize - half;
                        let mut acc = 0.0;
                        for r in rr {
                            let sr = (r as isize + dr as isize - half) as usize;
                            let d = &dsl[r * w + cr.start..r * w + cr.end];
                            let s0 = (cr.start as isize + oc) as usize;
                            let inp = &src[sr * w + s0..sr * w + s0 + cr.len()];
                            acc += d.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
                        }
                        g[self.kidx(co, ci, dr, dc)] += acc;
                    }
                }
            }
        }
    }
}

/// Zero mean, unit variance; constant planes become zero.
fn standardize(mut x: Array2<f64>) -> Array2<f64> {
    let mean = x.mean().unwrap_or(0.0);
    let sd = x.std(0.0);
    let inv = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
    x.mapv_inplace(|v| (v - mean) * inv);
    x
}

/// Output rows and columns whose input under offset `(or, oc)` lies inside the plane.
fn shifted_ranges(h: usize, w: usize, or: isize, oc: isize) -> (Range<usize>, Range<usize>) {
    let r_lo = (-or).max(0) as usize;
    let r_hi = (h as isize - or).min(h as isize).max(0) as usize;
    let c_lo = (-oc).max(0) as usize;
    let c_hi = (w as isize - oc).min(w as isize).max(0) as usize;
    (r_lo..r_hi.max(r_lo), c_lo..c_hi.max(c_lo))
}

/// Multi-head self-attention over a `[P, D]` token matrix with scaled
/// dot-product scores and an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl AttentionCache {
    /// Row-stochastic attention weights of one head.
    pub fn weights(&self, head: usize) -> &Array2<f64> {
        &self.weights[head]
    }
}

impl SelfAttention {
    pub fn new(layout: &mut ParamLayout, dim: usize, heads: usize) -> SelfAttention {
        SelfAttention {
            dim,
            heads,
            query: Linear::new(layout, "attn.query", dim, dim),
            key: Linear::new(layout, "attn.key", dim, dim),
            value: Linear::new(layout, "attn.value", dim, dim),
            output: Linear::new(layout, "attn.output", dim, dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(p, x);
        let k = self.key.forward(p, x);
        let v = self.value.forward(p, x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let tokens = x.nrows();
        let mut ctx = Array2::zeros((tokens, self.dim));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut a = qh.dot(&kh.t()) * scale;
            for mut row in a.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            ctx.slice_mut(cols).assign(&a.dot(&vh));
            weights.push(a);
        }
        let y = self.output.forward(p, ctx.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                weights,
                ctx,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &AttentionCache, dy: ArrayView2<'_, f64>, g: &mut [f64]) -> Array2<f64> {
        let dctx = self.output.backward(p, cache.ctx.view(), dy, g);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let shape = cache.q.raw_dim();
        let mut dq = Array2::zeros(shape);
        let mut dk = Array2::zeros(shape);
        let mut dv = Array2::zeros(shape);
        for h in 0..self.heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let a = &cache.weights[h];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(&da - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.x.view();
        let mut dx = self.query.backward(p, x, dq.view(), g);
        dx += &self.key.backward(p, x, dk.view(), g);
        dx += &self.value.backward(p, x, dv.view(), g);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(rel_err(fd, gelu_grad(x)) < 1e-7, "{x}");
        }
    }

    #[test]
    fn sigmoid_is_stable_and_exact_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(probability(0.0), 0.5);
        assert!(probability(1e4) < 1.0);
        assert!(probability(-1e4) > 0.0);
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logit(3.0, 0.0) - bce(sigmoid(3.0), 0.0, 1e-15)).abs() < 1e-12);
    }

    #[test]
    fn layout_allocates_contiguously() {
        let mut l = ParamLayout::default();
        let a = l.alloc("a", &[2, 3]);
        let b = l.alloc("b", &[4]);
        assert_eq!(a, 0..6);
        assert_eq!(b, 6..10);
        assert_eq!(l.len(), 10);
        assert_eq!(l.segment("b").unwrap().shape, vec![4]);
    }

    #[test]
    fn identity_attention_over_two_tokens() {
        let mut layout = ParamLayout::default();
        let attn = SelfAttention::new(&mut layout, 2, 1);
        let mut p = vec![0.0; layout.len()];
        for lin in [&attn.query, &attn.key, &attn.value, &attn.output] {
            lin.weight_mut(&mut p).assign(&Array2::eye(2));
        }
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let (y, cache) = attn.forward(&p, x.view());
        // scores = x x^T / sqrt(2), so each row is softmax([1/sqrt2, 0]) up to order
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 - hi;
        let w = cache.weights(0);
        assert!((w[[0, 0]] - hi).abs() < 1e-12 && (w[[0, 1]] - lo).abs() < 1e-12);
        assert!((y[[0, 0]] - hi).abs() < 1e-12 && (y[[0, 1]] - lo).abs() < 1e-12);
        assert!((y[[1, 0]] - lo).abs() < 1e-12 && (y[[1, 1]] - hi).abs() < 1e-12);
    }

    #[test]
    fn linear_and_attention_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let attn = SelfAttention::new(&mut layout, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = layout.init(&mut rng);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let upstream = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let objective = |p: &[f64], x: &Array2<f64>| (attn.forward(p, x.view()).0 * &upstream).sum();

        let (_, cache) = attn.forward(&p, x.view());
        let mut g = vec![0.0; p.len()];
        let dx = attn.backward(&p, &cache, upstream.view(), &mut g);

        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
        for r in 0..3 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() <= 1e-6 + 1e-5 * fd.abs());
            }
        }
    }

    #[test]
    fn conv_encoder_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let enc = ConvEncoder::new(&mut layout, 5, 4, 2, 3, 2, 3, MagnitudeScale::Log1p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = layout.init(&mut rng);
        let img = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        let spec = crate::freqfeat::fft_magnitude_phase(img.view()).unwrap();
        let upstream = array![0.3, -1.2, 0.8];
        let objective = |p: &[f64]| enc.forward(p, &spec).0.dot(&upstream);

        let (_, cache) = enc.forward(&p, &spec);
        let mut g = vec![0.0; p.len()];
        enc.backward(&p, &cache, upstream.view(), &mut g);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut layout = ParamLayout::default();
        let head = ClassificationHead::new(&mut layout, 4, 8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = layout.init(&mut rng);
        let x = array![0.1, 0.2, -0.3, 0.4];
        let (a, _) = head.forward(&p, x.view(), None);
        let (b, _) = head.forward(&p, x.view(), None);
        assert_eq!(a, b);
        let (_, cache) = head.forward(&p, x.view(), Some(&mut rng));
        let mask = cache.mask.unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    }
}
