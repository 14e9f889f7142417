//! A small define-by-run reverse-mode autodiff tape.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. A [`Graph`] lives for one
//! forward/backward pass and is then dropped.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{gemm, Float, Layout, Tensor};

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad })
    }

    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// Registers an operation whose value was computed by the caller.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value: Arc::new(value), parents: parents.iter().map(|p| p.id).collect(), backward, requires_grad })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), T::one()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    x.sigmoid()
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in range.
fn valid_range(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    // need 0 <= ox * stride + offset < input
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let hi = if (input as isize) <= offset { 0 } else { ((input as isize - offset) as usize).div_ceil(stride).min(out) };
    (lo, hi.max(lo))
}

/// Fills `cols` (`rows x cols`) from `x`, a contiguous `[batch, in_ch, h, w]` block.
fn im2col<T: Float>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let n = g.cols();
    let plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let offset = kx as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.w, g.stride, offset);
                let (ylo, yhi) = valid_range(g.out_h, g.h, g.stride, ky as isize - g.pad as isize);
                let start = ((lo * g.stride) as isize + offset) as usize;
                let dy = ky as isize - g.pad as isize;
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane];
                    let image = &mut dst[b * out_plane..(b + 1) * out_plane];
                    if g.stride == 1 && g.out_w == g.w && g.out_h == g.h {
                        // Same-size output: one shifted copy, then clear the
                        // positions that wrapped around or fell off the edge.
                        let shift = dy * g.w as isize + offset;
                        let from = (ylo * g.w) as isize;
                        let to = (yhi * g.w) as isize;
                        let from = from.max(-shift);
                        let to = to.min(plane as isize - shift);
                        image[..from as usize].fill(T::zero());
                        image[to as usize..].fill(T::zero());
                        if to > from {
                            image[from as usize..to as usize].copy_from_slice(&src[(from + shift) as usize..(to + shift) as usize]);
                        }
                        if lo > 0 || hi < g.out_w {
                            for row in image.chunks_exact_mut(g.out_w) {
                                row[..lo].fill(T::zero());
                                row[hi..].fill(T::zero());
                            }
                        }
                        continue;
                    }
                    for (oy, out) in image.chunks_exact_mut(g.out_w).enumerate() {
                        if oy < ylo || oy >= yhi {
                            out.fill(T::zero());
                            continue;
                        }
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let out = &mut out[lo..hi];
                        if g.stride == 1 {
                            out.copy_from_slice(&src_row[start..start + out.len()]);
                        } else {
                            for (o, v) in out.iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `x`, the adjoint of [`im2col`].
fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let n = g.cols();
    let plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let offset = kx as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.w, g.stride, offset);
                let (ylo, yhi) = valid_range(g.out_h, g.h, g.stride, ky as isize - g.pad as isize);
                let start = ((lo * g.stride) as isize + offset) as usize;
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let base = b * out_plane + oy * g.out_w;
                        let from = &src[base + lo..base + hi];
                        for (d, v) in dst_row[start..].iter_mut().step_by(g.stride).zip(from) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Images per im2col chunk, keeping the column buffer around a megabyte.
fn conv_chunk(g: &ConvGeometry) -> usize {
    const TARGET: usize = 1 << 18;
    (TARGET / (g.rows() * g.out_h * g.out_w).max(1)).clamp(1, g.batch.max(1))
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Self {
        let value = self.value();
        self.graph.leaf(value, false)
    }

    pub fn add(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.custom(&[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().map(|v| v * s);
        self.graph.custom(&[self], out, move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: T) -> Self {
        let out = self.value().map(|v| v + s);
        self.graph.custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn silu(self) -> Self {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.graph.custom(&[self], out, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| {
                let s = sigmoid(xv);
                gv * s * (T::one() + xv * (T::one() - s))
            }))]
        })
    }

    pub fn softplus(self) -> Self {
        let x = self.value();
        let out = x.map(softplus);
        self.graph.custom(&[self], out, move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv * sigmoid(xv)))])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph.custom(&[self], out, move |g, _| vec![Some(g.clone().reshape(old.clone()))])
    }

    /// Slice `[start, start + len)` of axis 1.
    pub fn narrow1(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[1], "narrow out of range");
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let width = shape[1] * inner;
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[o * width + start * inner..o * width + (start + len) * inner]);
        }
        self.graph.custom(&[self], Tensor::new(out_shape, out), move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            let d = dx.data_mut();
            for o in 0..outer {
                d[o * width + start * inner..o * width + (start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }

    /// Concatenation along axis 1.
    pub fn concat1(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.shape()[0], outer);
                assert_eq!(v.shape()[2..], first[2..]);
                v.shape()[1] * inner
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total / inner;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.custom(parts, Tensor::new(shape, out), move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for ((w, s), need) in widths.iter().zip(&shapes).zip(needs) {
                if *need {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + w]);
                    }
                    grads.push(Some(Tensor::new(s.clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        })
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(self) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph.custom(&[self], Tensor::new([b, c], out), move |g, _| {
            let mut d = Vec::with_capacity(b * c * hw);
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv * inv).take(hw));
            }
            vec![Some(Tensor::new([b, c, h, w], d))]
        })
    }

    /// Nearest-neighbour resize of the spatial axes.
    pub fn upsample_nearest(self, out_h: usize, out_w: usize) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let ys: Vec<usize> = (0..out_h).map(|y| (y * h / out_h).min(h - 1)).collect();
        let xs: Vec<usize> = (0..out_w).map(|v| (v * w / out_w).min(w - 1)).collect();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in x.data().chunks(h * w) {
            for &sy in &ys {
                for &sx in &xs {
                    out.push(p[sy * w + sx]);
                }
            }
        }
        self.graph.custom(&[self], Tensor::new([b, c, out_h, out_w], out), move |g, _| {
            let mut d = vec![T::zero(); b * c * h * w];
            for (dp, gp) in d.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
                for (oy, &sy) in ys.iter().enumerate() {
                    for (ox, &sx) in xs.iter().enumerate() {
                        dp[sy * w + sx] += gp[oy * out_w + ox];
                    }
                }
            }
            vec![Some(Tensor::new([b, c, h, w], d))]
        })
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of a rank-4 tensor.
    pub fn crop2d(self, y0: usize, x0: usize, ch: usize, cw: usize) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(y0 + ch <= h && x0 + cw <= w, "crop out of range");
        let mut out = Vec::with_capacity(b * c * ch * cw);
        for p in x.data().chunks(h * w) {
            for y in y0..y0 + ch {
                out.extend_from_slice(&p[y * w + x0..y * w + x0 + cw]);
            }
        }
        self.graph.custom(&[self], Tensor::new([b, c, ch, cw], out), move |g, _| {
            let mut d = vec![T::zero(); b * c * h * w];
            for (dp, gp) in d.chunks_mut(h * w).zip(g.data().chunks(ch * cw)) {
                for y in 0..ch {
                    dp[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw].copy_from_slice(&gp[y * cw..(y + 1) * cw]);
                }
            }
            vec![Some(Tensor::new([b, c, h, w], d))]
        })
    }

    /// Gathers rows of the leading axis.
    pub fn index_select0(self, indices: &[usize]) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let row = x.len() / shape[0];
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(x.row(i));
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        self.graph.custom(&[self], Tensor::new(out_shape, out), move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            let d = dx.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                d[i * row..(i + 1) * row].iter_mut().zip(g.row(k)).for_each(|(a, &b)| *a += b);
            }
            vec![Some(dx)]
        })
    }

    pub fn sum_all(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.custom(&[self], Tensor::scalar(x.sum()), move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
    }

    /// `x [B, I] * w[O, I]^T + b`.
    pub fn linear(self, weight: Self, bias: Option<Self>) -> Self {
        let x = self.value();
        let w = weight.value();
        let (batch, fan_in) = x.dims2();
        let (fan_out, w_in) = w.dims2();
        assert_eq!(fan_in, w_in, "linear input width");
        let mut out = vec![T::zero(); batch * fan_out];
        if let Some(b) = bias {
            let bv = b.value();
            for r in out.chunks_mut(fan_out) {
                r.copy_from_slice(bv.data());
            }
        }
        gemm(
            x.data(),
            Layout::row_major(batch, fan_in),
            w.data(),
            Layout::transposed(fan_out, fan_in),
            T::one(),
            &mut out,
            Layout::row_major(batch, fan_out),
        );
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom(&parents, Tensor::new([batch, fan_out], out), move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![T::zero(); batch * fan_in];
                gemm(gd, Layout::row_major(batch, fan_out), w.data(), Layout::row_major(fan_out, fan_in), T::zero(), &mut d, Layout::row_major(batch, fan_in));
                Tensor::new([batch, fan_in], d)
            });
            let dw = needs[1].then(|| {
                let mut d = vec![T::zero(); fan_out * fan_in];
                gemm(gd, Layout::transposed(batch, fan_out), x.data(), Layout::row_major(batch, fan_in), T::zero(), &mut d, Layout::row_major(fan_out, fan_in));
                Tensor::new([fan_out, fan_in], d)
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); fan_out];
                    for r in gd.chunks(fan_out) {
                        d.iter_mut().zip(r).for_each(|(a, &b)| *a += b);
                    }
                    Tensor::new([fan_out], d)
                }));
            }
            grads
        })
    }

    /// Square-kernel 2D convolution with zero padding.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let (batch, in_ch, h, wd) = x.dims4();
        let (out_ch, w_in, k, k2) = w.dims4();
        assert_eq!(in_ch, w_in, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
        let geo = ConvGeometry {
            batch,
            in_ch,
            h,
            w: wd,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, plane) = (geo.rows(), geo.out_h * geo.out_w);
        let chunk = conv_chunk(&geo);
        let in_image = in_ch * h * wd;
        let mut out = vec![T::zero(); batch * out_ch * plane];
        {
            let bias_value = bias.map(|b| b.value());
            let mut cols = vec![T::zero(); rows * chunk * plane];
            let mut y2 = vec![T::zero(); out_ch * chunk * plane];
            for b0 in (0..batch).step_by(chunk) {
                let nb = chunk.min(batch - b0);
                let sub = ConvGeometry { batch: nb, ..geo };
                let n = nb * plane;
                im2col(&x.data()[b0 * in_image..(b0 + nb) * in_image], &sub, &mut cols[..rows * n]);
                gemm(w.data(), Layout::row_major(out_ch, rows), &cols[..rows * n], Layout::row_major(rows, n), T::zero(), &mut y2[..out_ch * n], Layout::row_major(out_ch, n));
                for o in 0..out_ch {
                    let bo = bias_value.as_ref().map_or(T::zero(), |b| b.data()[o]);
                    for b in 0..nb {
                        let src = &y2[o * n + b * plane..o * n + (b + 1) * plane];
                        let at = ((b0 + b) * out_ch + o) * plane;
                        out[at..at + plane].iter_mut().zip(src).for_each(|(d, &s)| *d = s + bo);
                    }
                }
            }
        }
        let out_shape = [batch, out_ch, geo.out_h, geo.out_w];
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.custom(&parents, Tensor::new(out_shape, out), move |g, needs| {
            let mut dx = needs[0].then(|| vec![T::zero(); batch * in_image]);
            let mut dw = needs[1].then(|| vec![T::zero(); out_ch * rows]);
            let mut db = (needs.len() > 2 && needs[2]).then(|| vec![T::zero(); out_ch]);
            let mut cols = vec![T::zero(); rows * chunk * plane];
            let mut g2 = vec![T::zero(); out_ch * chunk * plane];
            for b0 in (0..batch).step_by(chunk) {
                let nb = chunk.min(batch - b0);
                let sub = ConvGeometry { batch: nb, ..geo };
                let n = nb * plane;
                for o in 0..out_ch {
                    for b in 0..nb {
                        let at = ((b0 + b) * out_ch + o) * plane;
                        g2[o * n + b * plane..o * n + (b + 1) * plane].copy_from_slice(&g.data()[at..at + plane]);
                    }
                }
                let g2 = &g2[..out_ch * n];
                if let Some(db) = db.as_mut() {
                    for (d, r) in db.iter_mut().zip(g2.chunks(n)) {
                        *d += r.iter().copied().sum();
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[b0 * in_image..(b0 + nb) * in_image], &sub, &mut cols[..rows * n]);
                    gemm(g2, Layout::row_major(out_ch, n), &cols[..rows * n], Layout::transposed(rows, n), T::one(), dw, Layout::row_major(out_ch, rows));
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut cols[..rows * n];
                    gemm(w.data(), Layout::transposed(out_ch, rows), g2, Layout::row_major(out_ch, n), T::zero(), dcols, Layout::row_major(rows, n));
                    col2im(dcols, &sub, &mut dx[b0 * in_image..(b0 + nb) * in_image]);
                }
            }
            let mut grads = vec![dx.map(|d| Tensor::new([batch, in_ch, h, wd], d)), dw.map(|d| Tensor::new([out_ch, in_ch, k, k], d))];
            if needs.len() > 2 {
                grads.push(db.map(|d| Tensor::new([out_ch], d)));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` around `inputs[which]`, compared against the
    /// tape gradient. `f` must build a scalar from fresh leaves each call.
    fn check(inputs: Vec<Tensor<f64>>, f: impl for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>) {
        let analytic: Vec<Tensor<f64>> = {
            let g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
            let out = f(&vars);
            let grads = g.backward(out);
            vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect()
        };
        let eval = |ins: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&vars).value().data()[0];
            out
        };
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} coord {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = random(&[2, 3, 5, 6], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let probe = random(&[2, 4, (5 + 2 * pad - k) / stride + 1, (6 + 2 * pad - k) / stride + 1], &mut rng);
            check(vec![x, w, b, probe], |v| v[0].conv2d(v[1], Some(v[2]), stride, pad).mul(v[3]).sum_all());
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).value();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += x.data()[(c * 4 + iy as usize) * 4 + ix as usize] * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 2 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_and_pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let b = random(&[5], &mut rng);
        let p = random(&[3, 5], &mut rng);
        check(vec![x, w, b, p], |v| v[0].linear(v[1], Some(v[2])).silu().softplus().mul(v[3]).sum_all());
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 3, 3], &mut rng);
        let y = random(&[2, 2, 3, 3], &mut rng);
        let p = random(&[2, 4, 7, 7], &mut rng);
        check(vec![x, y, p], |v| {
            let cat = Var::concat1(&[v[0], v[1]]);
            let up = cat.narrow1(1, 4).upsample_nearest(7, 7);
            up.mul(v[2]).sum_all()
        });
        let x = random(&[3, 2, 5, 5], &mut rng);
        let q = random(&[4, 2, 2, 3], &mut rng);
        let r = random(&[2, 2], &mut rng);
        check(vec![x, q, r], |v| {
            let rows = v[0].index_select0(&[2, 0, 2, 1]);
            let a = rows.crop2d(1, 2, 2, 3).mul(v[1]).sum_all();
            let pooled = v[0].global_avg_pool().index_select0(&[0, 1]).mul(v[2]).sum_all();
            a.add(pooled).sub(v[0].reshape([3, 50]).scale(0.5).add_scalar(1.0).sum_all())
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Arc::new(Tensor::from_f64([2], &[1.0, 2.0])));
        let y = x.mul(x.detach()).sum_all();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
