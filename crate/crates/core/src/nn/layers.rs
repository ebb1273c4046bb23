//! CHW layers with explicit backward passes.

use std::fmt::Debug;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::Rng;

use super::{normal_init, Parameterized};
use crate::scalar::Scalar;

/// Values a layer saves during `forward` for its `backward`.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    pub tensors: Vec<ArrayD<T>>,
    pub indices: Vec<usize>,
    pub children: Vec<Tape<T>>,
}

/// A differentiable map on a single `C x H x W` activation.
pub trait Layer<T: Scalar>: Parameterized<T> + Debug + Send + Sync {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>);

    /// Returns the gradient with respect to the input and adds parameter
    /// gradients into `grads` (one entry per parameter tensor, in `params()` order).
    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, grads: &mut [Vec<T>]) -> Array3<T>;

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3];

    /// Inference-only forward pass.
    fn infer(&self, x: &Array3<T>) -> Array3<T> {
        self.forward(x).0
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `(C*k*k) x (Ho*Wo)` patch matrix; row index is `(c*k + ki)*k + kj`.
pub(crate) fn im2col<T: Scalar>(x: &Array3<T>, k: usize, stride: usize, pad: usize) -> (Array2<T>, usize, usize) {
    let (c, h, w) = x.dim();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst_row + ox] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((c * k * k, ho * wo), cols).expect("im2col shape"), ho, wo)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<T: Scalar>(
    cols: &Array2<T>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (c, h, w) = shape;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += cs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
}

/// 2-D convolution, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out x (in*k*k)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = normal_init(rng, out_channels * fan_in, (2.0 / fan_in as f64).sqrt());
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Array2::from_shape_vec((out_channels, fan_in), w).expect("conv weight shape"),
            bias: Array1::zeros(out_channels),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            vec![self.out_channels],
        ]
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (cols, ho, wo) = if self.is_pointwise() {
            let flat = x.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).unwrap();
            (flat, h, w)
        } else {
            im2col(x, self.kernel, self.stride, self.pad)
        };
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.out_channels, ho, wo)).unwrap();
        let tape = Tape {
            tensors: vec![cols.into_dyn()],
            indices: vec![c, h, w],
            children: Vec::new(),
        };
        (y, tape)
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, grads: &mut [Vec<T>]) -> Array3<T> {
        let cols = tape.tensors[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (c, h, w) = (tape.indices[0], tape.indices[1], tape.indices[2]);
        let (co, ho, wo) = grad_out.dim();
        let g = grad_out.as_standard_layout();
        let g = g.view().into_shape_with_order((co, ho * wo)).unwrap();
        let dw = g.dot(&cols.t());
        for (a, &b) in grads[0].iter_mut().zip(dw.iter()) {
            *a += b;
        }
        for (a, b) in grads[1].iter_mut().zip(g.sum_axis(Axis(1))) {
            *a += b;
        }
        let dcols = self.weight.t().dot(&g);
        if self.is_pointwise() {
            dcols.into_shape_with_order((c, h, w)).unwrap()
        } else {
            col2im(&dcols, (c, h, w), self.kernel, self.stride, self.pad)
        }
    }

    fn output_shape(&self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        [
            self.out_channels,
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        ]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

impl<T: Scalar> Parameterized<T> for Relu {
    fn params(&self) -> Vec<&[T]> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        Vec::new()
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let y = x.mapv(|v| v.max(T::zero()));
        let tape = Tape {
            tensors: vec![y.clone().into_dyn()],
            ..Default::default()
        };
        (y, tape)
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, _grads: &mut [Vec<T>]) -> Array3<T> {
        let y = &tape.tensors[0];
        let mut g = grad_out.clone();
        for (gv, &yv) in g.iter_mut().zip(y.iter()) {
            if yv <= T::zero() {
                *gv = T::zero();
            }
        }
        g
    }

    fn infer(&self, x: &Array3<T>) -> Array3<T> {
        x.mapv(|v| v.max(T::zero()))
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

/// Max pooling; padded cells never win.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }
}

impl<T: Scalar> Parameterized<T> for MaxPool2d {
    fn params(&self) -> Vec<&[T]> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        Vec::new()
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let (c, h, w) = x.dim();
        let ho = conv_out(h, self.kernel, self.stride, self.pad);
        let wo = conv_out(w, self.kernel, self.stride, self.pad);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ci * h + iy as usize) * w + ix as usize;
                            if best_idx == usize::MAX || xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
        arg.extend([c, h, w]);
        let y = Array3::from_shape_vec((c, ho, wo), out).unwrap();
        (y, Tape { indices: arg, ..Default::default() })
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, _grads: &mut [Vec<T>]) -> Array3<T> {
        let n = tape.indices.len();
        let (c, h, w) = (tape.indices[n - 3], tape.indices[n - 2], tape.indices[n - 1]);
        let mut dx = vec![T::zero(); c * h * w];
        for (&idx, &g) in tape.indices[..n - 3].iter().zip(grad_out.iter()) {
            dx[idx] += g;
        }
        Array3::from_shape_vec((c, h, w), dx).unwrap()
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [
            c,
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        ]
    }
}

/// Per-channel `scale * x + shift`; stands in for a folded batch norm.
#[derive(Debug, Clone)]
pub struct ChannelAffine<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
}

impl<T: Scalar> ChannelAffine<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
        }
    }

    pub fn zeroed(channels: usize) -> Self {
        Self {
            scale: Array1::zeros(channels),
            shift: Array1::zeros(channels),
        }
    }

    fn apply(&self, x: &Array3<T>) -> Array3<T> {
        let mut y = x.clone();
        for (ci, mut plane) in y.outer_iter_mut().enumerate() {
            let (s, b) = (self.scale[ci], self.shift[ci]);
            plane.mapv_inplace(|v| v * s + b);
        }
        y
    }
}

impl<T: Scalar> Parameterized<T> for ChannelAffine<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![self.scale.as_slice().unwrap(), self.shift.as_slice().unwrap()]
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.scale.as_slice_mut().unwrap(), self.shift.as_slice_mut().unwrap()]
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.scale.len()], vec![self.shift.len()]]
    }
}

impl<T: Scalar> Layer<T> for ChannelAffine<T> {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let tape = Tape {
            tensors: vec![x.clone().into_dyn()],
            ..Default::default()
        };
        (self.apply(x), tape)
    }

    fn infer(&self, x: &Array3<T>) -> Array3<T> {
        self.apply(x)
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, grads: &mut [Vec<T>]) -> Array3<T> {
        let x = tape.tensors[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut dx = grad_out.clone();
        for ci in 0..dx.dim().0 {
            let g = grad_out.index_axis(Axis(0), ci);
            let xc = x.index_axis(Axis(0), ci);
            grads[0][ci] += (&g * &xc).sum();
            grads[1][ci] += g.sum();
            let s = self.scale[ci];
            dx.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * s);
        }
        dx
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

/// Two 3x3 convolutions with a residual connection (ResNet basic block).
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub aff1: ChannelAffine<T>,
    pub conv2: Conv2d<T>,
    pub aff2: ChannelAffine<T>,
    pub downsample: Option<(Conv2d<T>, ChannelAffine<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    /// The last affine of the residual branch starts at zero so each block begins as identity.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(rng, in_channels, out_channels, 1, stride, 0),
                ChannelAffine::new(out_channels),
            )
        });
        Self {
            conv1: Conv2d::new(rng, in_channels, out_channels, 3, stride, 1),
            aff1: ChannelAffine::new(out_channels),
            conv2: Conv2d::new(rng, out_channels, out_channels, 3, 1, 1),
            aff2: ChannelAffine::zeroed(out_channels),
            downsample,
        }
    }

    fn parts(&self) -> Vec<&dyn Layer<T>> {
        let mut v: Vec<&dyn Layer<T>> = vec![&self.conv1, &self.aff1, &self.conv2, &self.aff2];
        if let Some((c, a)) = &self.downsample {
            v.push(c);
            v.push(a);
        }
        v
    }
}

impl<T: Scalar> Parameterized<T> for BasicBlock<T> {
    fn params(&self) -> Vec<&[T]> {
        self.parts().into_iter().flat_map(|p| p.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.conv1.params_mut();
        v.extend(self.aff1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.aff2.params_mut());
        if let Some((c, a)) = &mut self.downsample {
            v.extend(c.params_mut());
            v.extend(a.params_mut());
        }
        v
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.parts().into_iter().flat_map(|p| p.param_shapes()).collect()
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let (h1, t1) = self.conv1.forward(x);
        let (h2, t2) = self.aff1.forward(&h1);
        let (h3, t3) = Relu.forward(&h2);
        let (h4, t4) = self.conv2.forward(&h3);
        let (h5, t5) = self.aff2.forward(&h4);
        let mut children = vec![t1, t2, t3, t4, t5];
        let shortcut = match &self.downsample {
            Some((c, a)) => {
                let (s1, ts1) = c.forward(x);
                let (s2, ts2) = a.forward(&s1);
                children.push(ts1);
                children.push(ts2);
                s2
            }
            None => x.clone(),
        };
        let (y, tr) = Relu.forward(&(h5 + &shortcut));
        children.push(tr);
        (y, Tape { children, ..Default::default() })
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, grads: &mut [Vec<T>]) -> Array3<T> {
        let ch = &tape.children;
        let g = Relu.backward(ch.last().unwrap(), grad_out, &mut []);
        let (g_c1, rest) = grads.split_at_mut(2);
        let (g_a1, rest) = rest.split_at_mut(2);
        let (g_c2, rest) = rest.split_at_mut(2);
        let (g_a2, rest) = rest.split_at_mut(2);
        let d = self.aff2.backward(&ch[4], &g, g_a2);
        let d = self.conv2.backward(&ch[3], &d, g_c2);
        let d = Relu.backward(&ch[2], &d, &mut []);
        let d = self.aff1.backward(&ch[1], &d, g_a1);
        let mut dx = self.conv1.backward(&ch[0], &d, g_c1);
        match &self.downsample {
            Some((c, a)) => {
                let (g_dc, g_da) = rest.split_at_mut(2);
                let ds = a.backward(&ch[6], &g, g_da);
                dx += &c.backward(&ch[5], &ds, g_dc);
            }
            None => dx += &g,
        }
        dx
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.conv1.output_shape(input)
    }
}

/// Layers applied in order.
#[derive(Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl<T: Scalar> Parameterized<T> for Sequential<T> {
    fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&self, x: &Array3<T>) -> (Array3<T>, Tape<T>) {
        let mut children = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let (y, t) = l.forward(&h);
            children.push(t);
            h = y;
        }
        (h, Tape { children, ..Default::default() })
    }

    fn infer(&self, x: &Array3<T>) -> Array3<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    fn backward(&self, tape: &Tape<T>, grad_out: &Array3<T>, grads: &mut [Vec<T>]) -> Array3<T> {
        let counts: Vec<usize> = self.layers.iter().map(|l| l.num_param_tensors()).collect();
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let slot = &mut grads[offsets[i]..offsets[i] + counts[i]];
            g = l.backward(&tape.children[i], &g, slot);
        }
        g
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }
}
