//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! The toolkit trains small convolutional and graph networks whose
//! gradients must be checkable against central differences at tight
//! tolerances, so everything runs in `f64` on a classic Wengert tape:
//! each operation appends a node holding its result plus whatever the
//! backward pass needs, and [`Tape::backward`] walks the nodes in
//! reverse, accumulating adjoints.
//!
//! The op set is exactly what the depth-prediction pipeline uses —
//! dense layers, 2D/3D convolutions, bilinear map sampling, per-point
//! camera projection, multi-view feature variance, softmax/expectation
//! heads, and the gather/scatter plumbing that wires point
//! neighborhoods together. Values are [`ndarray::ArrayD`] so the same
//! machinery serves images, volumes, and point batches.
//!
//! Evaluation is eager: building an op computes its value immediately.
//! `backward` may be called on any scalar (0-dimensional) node. Graph
//! structure choices made from *values* (nearest-neighbor indices,
//! argmaxes, clamp decisions) are treated as constants of the
//! surrounding expression, which matches how such networks are trained
//! in practice.

pub mod check;
pub mod conv;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

use nalgebra::{Matrix3, Vector3};

use self::conv::{col2im2d, col2im3d, im2col2d, im2col3d, out_len};

/// Handle to a node on a [`Tape`].
///
/// Plain index wrapper; only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Recorded operation, including any forward-pass byproducts the
/// backward pass reuses.
enum Op {
    /// Input tensor; receives gradient but propagates nothing.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product of same-shaped tensors.
    Mul(Var, Var),
    /// Multiply by a compile-time constant.
    Scale(Var, f64),
    Relu(Var),
    /// Sum of all elements, producing a 0-d scalar.
    SumAll(Var),
    /// Row-major dense layer: `y = x · wᵀ + b` with `x: [M, F]`,
    /// `w: [O, F]`, `b: [O]`.
    Linear { x: Var, w: Var, b: Var },
    /// Same element count, different shape.
    Reshape(Var),
    /// Axis permutation; `axes[i]` names the input axis that becomes
    /// output axis `i`.
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    /// Contiguous sub-range along one axis; the kept length lives in
    /// the node's value shape.
    SliceAxis { x: Var, axis: usize, start: usize },
    /// Select rows (axis 0) by index, duplicates allowed.
    Gather { x: Var, idx: Vec<usize> },
    /// Copy `base`, overwriting the axis-0 slots listed in `idx` (which
    /// must be unique) with the rows of `vals`.
    Scatter { base: Var, vals: Var, idx: Vec<usize> },
    /// `[P, K, C] -> [P, C]` max over the middle axis; `argmax[p, c]`
    /// recorded at forward time routes the gradient.
    MaxMid { x: Var, argmax: Vec<usize> },
    /// `[P, K, C] -> [P, C]` mean over the middle axis.
    MeanMid { x: Var },
    /// Numerically-stable softmax along one axis.
    SoftmaxAxis { x: Var, axis: usize },
    /// Per-row dot product: `x: [N, K]` with `w: [K]` gives `[N]`.
    DotRows { x: Var, w: Var },
    /// Masked L1 distance summed to a scalar; `target` and `mask` are
    /// constants of the graph.
    L1Masked {
        pred: Var,
        target: ArrayD<f64>,
        mask: ArrayD<f64>,
    },
    /// 2D convolution, `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// `b: [Cout]`, zero padding. The im2col matrix is cached.
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: ndarray::Array2<f64>,
    },
    /// 3D convolution, `x: [Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`.
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: ndarray::Array2<f64>,
    },
    /// Nearest-neighbor 2x upsampling of `[C, H, W]` over H and W.
    Upsample2d(Var),
    /// Nearest-neighbor 2x upsampling of `[C, D, H, W]` over D, H, W.
    Upsample3d(Var),
    /// Sample `map: [C, H, W]` at continuous pixel positions
    /// `pix: [P, 2]` (u, v) with bilinear weights and clamp-to-edge
    /// behavior; output `[P, C]`. Positions outside the raster clamp
    /// and receive zero positional gradient.
    BilinearFetch { map: Var, pix: Var },
    /// Population variance across axis 0 of `[N, P, C]`, giving
    /// `[P, C]`.
    VarianceViews(Var),
    /// Stack same-shaped tensors along a new leading axis.
    Stack(Vec<Var>),
    /// Pinhole projection of world points `[P, 3]` through a camera,
    /// producing `[P, 3]` rows of (u, v, camera-frame depth). Rows with
    /// depth <= eps emit (0, 0, depth) and receive zero gradient.
    ProjectPoints {
        pts: Var,
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
    },
    /// `out[p] = origin + depth[p] * ray[p]` for fixed per-point rays:
    /// depths `[P]` to world points `[P, 3]`. Only the rays matter for
    /// the backward pass; the origin is folded into the forward value.
    UnprojectDepths {
        depths: Var,
        rays: ndarray::Array2<f64>,
    },
    /// Per-component affine map along the last axis:
    /// `y[.., c] = x[.., c] * scale[c] + offset[c]`. The offset is
    /// folded into the forward value.
    AffineRows { x: Var, scale: Vec<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradient tape; owns every intermediate value of an expression.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]. Nodes the root does not
/// depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn add_into(slot: &mut Option<ArrayD<f64>>, contribution: ArrayViewD<f64>) {
    match slot {
        Some(acc) => *acc += &contribution,
        // Force standard layout so later reshapes in the reverse pass
        // never see an f-order adjoint.
        None => *slot = Some(contribution.as_standard_layout().to_owned()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dimensional node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.ndim(), 0, "scalar() requires a 0-d node");
        *val.first().unwrap()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a 0-d scalar input.
    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = &self.nodes[a.0].value * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    /// Dense layer `x · wᵀ + b` over row vectors.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        assert_eq!(xs.len(), 2, "linear: x must be [M, F]");
        assert_eq!(ws.len(), 2, "linear: w must be [O, F]");
        assert_eq!(bs.len(), 1, "linear: b must be [O]");
        assert_eq!(xs[1], ws[1], "linear: feature dims differ");
        assert_eq!(ws[0], bs[0], "linear: bias does not match outputs");
        let xm = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let wm = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = xm.dot(&wm.t());
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        for mut row in y.rows_mut() {
            row += &bv;
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_clone(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat: no inputs");
        let views: Vec<_> = xs.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice_axis(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        self.push(value, Op::SliceAxis { x, axis, start })
    }

    /// Select axis-0 rows by index (duplicates allowed; gradients
    /// accumulate).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let n = self.shape(x)[0];
        assert!(
            idx.iter().all(|&i| i < n),
            "gather: index out of range (n = {n})"
        );
        let value = self.nodes[x.0].value.select(Axis(0), idx);
        self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Overwrite the axis-0 rows of `base` listed in `idx` with the
    /// rows of `vals`; all other rows pass through unchanged.
    pub fn scatter(&mut self, base: Var, vals: Var, idx: &[usize]) -> Var {
        let n = self.shape(base)[0];
        assert_eq!(self.shape(vals)[0], idx.len(), "scatter: row count");
        assert_eq!(
            self.shape(base)[1..],
            self.shape(vals)[1..],
            "scatter: trailing dims differ"
        );
        let mut seen = vec![false; n];
        for &i in idx {
            assert!(i < n, "scatter: index out of range");
            assert!(!seen[i], "scatter: duplicate index {i}");
            seen[i] = true;
        }
        let mut value = self.nodes[base.0].value.clone();
        for (row, &i) in idx.iter().enumerate() {
            value
                .index_axis_mut(Axis(0), i)
                .assign(&self.nodes[vals.0].value.index_axis(Axis(0), row));
        }
        self.push(
            value,
            Op::Scatter {
                base,
                vals,
                idx: idx.to_vec(),
            },
        )
    }

    /// Max over the middle axis of `[P, K, C]`, ties resolved toward
    /// the lowest index.
    pub fn max_mid(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "max_mid: expects [P, K, C]");
        let (p, k, c) = (s[0], s[1], s[2]);
        assert!(k > 0, "max_mid: empty middle axis");
        let xv = &self.nodes[x.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[p, c]));
        let mut argmax = vec![0usize; p * c];
        for pi in 0..p {
            for ci in 0..c {
                let mut best = xv[[pi, 0, ci]];
                let mut best_k = 0;
                for ki in 1..k {
                    let v = xv[[pi, ki, ci]];
                    if v > best {
                        best = v;
                        best_k = ki;
                    }
                }
                value[[pi, ci]] = best;
                argmax[pi * c + ci] = best_k;
            }
        }
        self.push(value, Op::MaxMid { x, argmax })
    }

    /// Mean over the middle axis of `[P, K, C]`.
    pub fn mean_mid(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "mean_mid: expects [P, K, C]");
        let k = s[1];
        assert!(k > 0, "mean_mid: empty middle axis");
        let value = self.nodes[x.0].value.mean_axis(Axis(1)).unwrap();
        self.push(value, Op::MeanMid { x })
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxAxis { x, axis })
    }

    /// Row-wise dot product of `x: [N, K]` against a shared vector
    /// `w: [K]`.
    pub fn dot_rows(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 2, "dot_rows: x must be [N, K]");
        assert_eq!(ws, &[xs[1]], "dot_rows: w must be [K]");
        let xm = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let value = xm.dot(&wv).into_dyn();
        self.push(value, Op::DotRows { x, w })
    }

    /// `sum(mask * |pred - target|)` as a 0-d scalar. `target` and
    /// `mask` are plain data, not differentiated.
    pub fn l1_masked(&mut self, pred: Var, target: ArrayD<f64>, mask: ArrayD<f64>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "l1_masked: target shape");
        assert_eq!(self.shape(pred), mask.shape(), "l1_masked: mask shape");
        let p = &self.nodes[pred.0].value;
        let mut total = 0.0;
        ndarray::Zip::from(p).and(&target).and(&mask).for_each(|&pv, &tv, &mv| {
            total += mv * (pv - tv).abs();
        });
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::L1Masked { pred, target, mask },
        )
    }

    /// 2D convolution with square kernel and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: x must be [Cin, H, W]");
        assert_eq!(ws.len(), 4, "conv2d: w must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], xs[0], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias shape");
        let kernel = ws[2];
        let (cout, cin) = (ws[0], ws[1]);
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let cols = im2col2d(&xv, kernel, stride, pad);
        let wm = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((cout, cin * kernel * kernel))
            .unwrap()
            .to_owned();
        let mut y = wm.dot(&cols);
        let bv = &self.nodes[b.0].value;
        for (ci, mut row) in y.rows_mut().into_iter().enumerate() {
            row += bv[[ci]];
        }
        let ho = out_len(xs[1], kernel, stride, pad);
        let wo = out_len(xs[2], kernel, stride, pad);
        let value = y.into_shape_with_order((cout, ho, wo)).unwrap().into_dyn();
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    /// 3D convolution with cubic kernel and zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv3d: x must be [Cin, D, H, W]");
        assert_eq!(ws.len(), 5, "conv3d: w must be [Cout, Cin, k, k, k]");
        assert_eq!(ws[1], xs[0], "conv3d: channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv3d: kernel must be cubic");
        assert_eq!(self.shape(b), &[ws[0]], "conv3d: bias shape");
        let kernel = ws[2];
        let (cout, cin) = (ws[0], ws[1]);
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let cols = im2col3d(&xv, kernel, stride, pad);
        let wm = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((cout, cin * kernel * kernel * kernel))
            .unwrap()
            .to_owned();
        let mut y = wm.dot(&cols);
        let bv = &self.nodes[b.0].value;
        for (ci, mut row) in y.rows_mut().into_iter().enumerate() {
            row += bv[[ci]];
        }
        let do_ = out_len(xs[1], kernel, stride, pad);
        let ho = out_len(xs[2], kernel, stride, pad);
        let wo = out_len(xs[3], kernel, stride, pad);
        let value = y
            .into_shape_with_order((cout, do_, ho, wo))
            .unwrap()
            .into_dyn();
        self.push(
            value,
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Nearest-neighbor 2x upsampling over the trailing two axes of
    /// `[C, H, W]`: `out[c, y, x] = in[c, y / 2, x / 2]`.
    pub fn upsample2x_2d(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "upsample2x_2d: expects [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for y in 0..2 * h {
                for xcol in 0..2 * w {
                    value[[ci, y, xcol]] = xv[[ci, y / 2, xcol / 2]];
                }
            }
        }
        self.push(value, Op::Upsample2d(x))
    }

    /// Nearest-neighbor 2x upsampling over the trailing three axes of
    /// `[C, D, H, W]`.
    pub fn upsample2x_3d(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "upsample2x_3d: expects [C, D, H, W]");
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = &self.nodes[x.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[c, 2 * d, 2 * h, 2 * w]));
        for ci in 0..c {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for xcol in 0..2 * w {
                        value[[ci, z, y, xcol]] = xv[[ci, z / 2, y / 2, xcol / 2]];
                    }
                }
            }
        }
        self.push(value, Op::Upsample3d(x))
    }

    /// Bilinear sampling of a feature map at continuous pixel
    /// positions. Output row `p` holds the `C` channel values sampled
    /// at `(u, v) = (pix[p, 0], pix[p, 1])`. Samples clamp to the edge;
    /// clamped coordinates contribute zero gradient to `pix`.
    pub fn bilinear_fetch(&mut self, map: Var, pix: Var) -> Var {
        let ms = self.shape(map);
        let ps = self.shape(pix);
        assert_eq!(ms.len(), 3, "bilinear_fetch: map must be [C, H, W]");
        assert_eq!(ps.len(), 2, "bilinear_fetch: pix must be [P, 2]");
        assert_eq!(ps[1], 2, "bilinear_fetch: pix rows are (u, v)");
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        assert!(h > 0 && w > 0, "bilinear_fetch: empty map");
        let p = ps[0];
        let mv = &self.nodes[map.0].value;
        let pv = &self.nodes[pix.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[p, c]));
        for pi in 0..p {
            let (x0, y0, fx, fy) = bilinear_cell(pv[[pi, 0]], pv[[pi, 1]], w, h);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                value[[pi, ci]] = (1.0 - fy)
                    * ((1.0 - fx) * mv[[ci, y0, x0]] + fx * mv[[ci, y0, x1]])
                    + fy * ((1.0 - fx) * mv[[ci, y1, x0]] + fx * mv[[ci, y1, x1]]);
            }
        }
        self.push(value, Op::BilinearFetch { map, pix })
    }

    /// Population variance over the view axis of stacked per-view
    /// features `[N, P, C]`, yielding `[P, C]`.
    pub fn variance_views(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "variance_views: expects [N, P, C]");
        let (n, p, c) = (s[0], s[1], s[2]);
        assert!(n > 0, "variance_views: no views");
        let xv = &self.nodes[x.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[p, c]));
        for pi in 0..p {
            for ci in 0..c {
                let mut mean = 0.0;
                for vi in 0..n {
                    mean += xv[[vi, pi, ci]];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for vi in 0..n {
                    let d = xv[[vi, pi, ci]] - mean;
                    var += d * d;
                }
                value[[pi, ci]] = var / n as f64;
            }
        }
        self.push(value, Op::VarianceViews(x))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack: no inputs");
        let views: Vec<_> = xs.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::stack(Axis(0), &views).expect("stack: shape mismatch");
        self.push(value, Op::Stack(xs.to_vec()))
    }

    /// Project world points `[P, 3]` through intrinsics `k` and
    /// extrinsics `(r, t)` to rows of (u, v, camera-frame depth).
    /// Rows whose camera-frame depth is <= 1e-9 produce (0, 0, depth)
    /// and are excluded from the gradient.
    pub fn project_points(
        &mut self,
        pts: Var,
        k: &Matrix3<f64>,
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
    ) -> Var {
        let s = self.shape(pts);
        assert_eq!(s.len(), 2, "project_points: pts must be [P, 3]");
        assert_eq!(s[1], 3, "project_points: pts must be [P, 3]");
        let p = s[0];
        let xv = &self.nodes[pts.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[p, 3]));
        for pi in 0..p {
            let pw = Vector3::new(xv[[pi, 0]], xv[[pi, 1]], xv[[pi, 2]]);
            let pc = r * pw + t;
            value[[pi, 2]] = pc.z;
            if pc.z > PROJECT_MIN_DEPTH {
                value[[pi, 0]] = (k[(0, 0)] * pc.x + k[(0, 1)] * pc.y + k[(0, 2)] * pc.z) / pc.z;
                value[[pi, 1]] = (k[(1, 1)] * pc.y + k[(1, 2)] * pc.z) / pc.z;
            }
        }
        self.push(
            value,
            Op::ProjectPoints {
                pts,
                k: *k,
                r: *r,
                t: *t,
            },
        )
    }

    /// Place points along fixed rays: `out[p] = origin + d[p] * ray[p]`
    /// with depths `[P]`, rays `[P, 3]`, giving `[P, 3]`.
    pub fn unproject_depths(
        &mut self,
        depths: Var,
        rays: ndarray::Array2<f64>,
        origin: Vector3<f64>,
    ) -> Var {
        let s = self.shape(depths);
        assert_eq!(s.len(), 1, "unproject_depths: depths must be [P]");
        assert_eq!(rays.dim(), (s[0], 3), "unproject_depths: rays must be [P, 3]");
        let p = s[0];
        let dv = &self.nodes[depths.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[p, 3]));
        for pi in 0..p {
            for j in 0..3 {
                value[[pi, j]] = origin[j] + dv[[pi]] * rays[(pi, j)];
            }
        }
        self.push(value, Op::UnprojectDepths { depths, rays })
    }

    /// Per-component affine transform along the last axis.
    pub fn affine_rows(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Var {
        let s = self.shape(x);
        let c = *s.last().expect("affine_rows: scalar input");
        assert_eq!(scale.len(), c, "affine_rows: scale length");
        assert_eq!(offset.len(), c, "affine_rows: offset length");
        let mut value = self.nodes[x.0].value.clone();
        for mut lane in value.lanes_mut(Axis(s.len() - 1)) {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = *v * scale[j] + offset[j];
            }
        }
        self.push(
            value,
            Op::AffineRows {
                x,
                scale: scale.to_vec(),
            },
        )
    }

    /// Reverse pass from a 0-d scalar root. Returns one adjoint per
    /// node the root depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Route the adjoint `g` of node `i` into the adjoints of its
    /// inputs.
    fn propagate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.view());
                add_into(&mut grads[b.0], g.view());
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.view());
                let neg = g.mapv(|v| -v);
                add_into(&mut grads[b.0], neg.view());
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                add_into(&mut grads[a.0], da.view());
                add_into(&mut grads[b.0], db.view());
            }
            Op::Scale(a, factor) => {
                let da = g * *factor;
                add_into(&mut grads[a.0], da.view());
            }
            Op::Relu(a) => {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da)
                    .and(&self.nodes[a.0].value)
                    .for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                add_into(&mut grads[a.0], da.view());
            }
            Op::SumAll(a) => {
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g[[]]);
                add_into(&mut grads[a.0], da.view());
            }
            Op::Linear { x, w, b } => {
                let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xm = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let wm = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let dx = gm.dot(&wm).into_dyn();
                let dw = gm.t().dot(&xm).into_dyn();
                let db = gm.sum_axis(Axis(0)).into_dyn();
                add_into(&mut grads[x.0], dx.view());
                add_into(&mut grads[w.0], dw.view());
                add_into(&mut grads[b.0], db.view());
            }
            Op::Reshape(x) => {
                let dx = g
                    .clone()
                    .into_shape_clone(self.nodes[x.0].value.raw_dim())
                    .unwrap();
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (out_axis, &in_axis) in axes.iter().enumerate() {
                    inv[in_axis] = out_axis;
                }
                let dx = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    let part = g.slice_axis(
                        Axis(*axis),
                        Slice::from(start as isize..(start + len) as isize),
                    );
                    add_into(&mut grads[v.0], part);
                    start += len;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                let len = self.nodes[i].value.shape()[*axis];
                dx.slice_axis_mut(
                    Axis(*axis),
                    Slice::from(*start as isize..(*start + len) as isize),
                )
                .assign(g);
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Gather { x, idx } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for (row, &src) in idx.iter().enumerate() {
                    let mut dst = dx.index_axis_mut(Axis(0), src);
                    dst += &g.index_axis(Axis(0), row);
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Scatter { base, vals, idx } => {
                let mut dbase = g.clone();
                let mut dvals = ArrayD::zeros(self.nodes[vals.0].value.raw_dim());
                for (row, &dst) in idx.iter().enumerate() {
                    dvals
                        .index_axis_mut(Axis(0), row)
                        .assign(&g.index_axis(Axis(0), dst));
                    dbase.index_axis_mut(Axis(0), dst).fill(0.0);
                }
                add_into(&mut grads[base.0], dbase.view());
                add_into(&mut grads[vals.0], dvals.view());
            }
            Op::MaxMid { x, argmax } => {
                let s = self.nodes[x.0].value.shape();
                let (p, c) = (s[0], s[2]);
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for pi in 0..p {
                    for ci in 0..c {
                        dx[[pi, argmax[pi * c + ci], ci]] += g[[pi, ci]];
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::MeanMid { x } => {
                let s = self.nodes[x.0].value.shape();
                let (p, k, c) = (s[0], s[1], s[2]);
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for pi in 0..p {
                    for ki in 0..k {
                        for ci in 0..c {
                            dx[[pi, ki, ci]] = g[[pi, ci]] / k as f64;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::SoftmaxAxis { x, axis } => {
                let y = &self.nodes[i].value;
                let mut dx = ArrayD::zeros(y.raw_dim());
                ndarray::Zip::from(dx.lanes_mut(Axis(*axis)))
                    .and(y.lanes(Axis(*axis)))
                    .and(g.lanes(Axis(*axis)))
                    .for_each(|mut dlane, ylane, glane| {
                        let dot: f64 = ylane
                            .iter()
                            .zip(glane.iter())
                            .map(|(&yv, &gv)| yv * gv)
                            .sum();
                        for ((dv, &yv), &gv) in
                            dlane.iter_mut().zip(ylane.iter()).zip(glane.iter())
                        {
                            *dv = yv * (gv - dot);
                        }
                    });
                add_into(&mut grads[x.0], dx.view());
            }
            Op::DotRows { x, w } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, k) = (xs[0], xs[1]);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dw = ArrayD::zeros(wv.raw_dim());
                for ni in 0..n {
                    let gn = g[[ni]];
                    for ki in 0..k {
                        dx[[ni, ki]] = gn * wv[[ki]];
                        dw[[ki]] += gn * xv[[ni, ki]];
                    }
                }
                add_into(&mut grads[x.0], dx.view());
                add_into(&mut grads[w.0], dw.view());
            }
            Op::L1Masked { pred, target, mask } => {
                let gs = g[[]];
                let pv = &self.nodes[pred.0].value;
                let mut dp = ArrayD::zeros(pv.raw_dim());
                ndarray::Zip::from(&mut dp)
                    .and(pv)
                    .and(target)
                    .and(mask)
                    .for_each(|dv, &p, &t, &m| {
                        *dv = gs * m * (p - t).signum() * if p == t { 0.0 } else { 1.0 };
                    });
                add_into(&mut grads[pred.0], dp.view());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cout, cin, kernel) = (ws[0], ws[1], ws[2]);
                let ys = self.nodes[i].value.shape();
                let spatial = ys[1] * ys[2];
                let gm = g
                    .to_shape((cout, spatial))
                    .unwrap()
                    .to_owned();
                let wm = self.nodes[w.0]
                    .value
                    .to_shape((cout, cin * kernel * kernel))
                    .unwrap()
                    .to_owned();
                let dw = gm
                    .dot(&cols.t())
                    .into_shape_clone((cout, cin, kernel, kernel))
                    .unwrap()
                    .into_dyn();
                let db = gm.sum_axis(Axis(1)).into_dyn();
                let dcols = wm.t().dot(&gm);
                let xs = self.nodes[x.0].value.shape();
                let dx = col2im2d(&dcols, (xs[0], xs[1], xs[2]), kernel, *stride, *pad).into_dyn();
                add_into(&mut grads[x.0], dx.view());
                add_into(&mut grads[w.0], dw.view());
                add_into(&mut grads[b.0], db.view());
            }
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cout, cin, kernel) = (ws[0], ws[1], ws[2]);
                let ys = self.nodes[i].value.shape();
                let spatial = ys[1] * ys[2] * ys[3];
                let gm = g
                    .to_shape((cout, spatial))
                    .unwrap()
                    .to_owned();
                let wm = self.nodes[w.0]
                    .value
                    .to_shape((cout, cin * kernel * kernel * kernel))
                    .unwrap()
                    .to_owned();
                let dw = gm
                    .dot(&cols.t())
                    .into_shape_clone((cout, cin, kernel, kernel, kernel))
                    .unwrap()
                    .into_dyn();
                let db = gm.sum_axis(Axis(1)).into_dyn();
                let dcols = wm.t().dot(&gm);
                let xs = self.nodes[x.0].value.shape();
                let dx = col2im3d(&dcols, (xs[0], xs[1], xs[2], xs[3]), kernel, *stride, *pad)
                    .into_dyn();
                add_into(&mut grads[x.0], dx.view());
                add_into(&mut grads[w.0], dw.view());
                add_into(&mut grads[b.0], db.view());
            }
            Op::Upsample2d(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xcol in 0..2 * w {
                            dx[[ci, y / 2, xcol / 2]] += g[[ci, y, xcol]];
                        }
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Upsample3d(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                for ci in 0..c {
                    for z in 0..2 * d {
                        for y in 0..2 * h {
                            for xcol in 0..2 * w {
                                dx[[ci, z / 2, y / 2, xcol / 2]] += g[[ci, z, y, xcol]];
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::BilinearFetch { map, pix } => {
                let ms = self.nodes[map.0].value.shape();
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let mv = &self.nodes[map.0].value;
                let pv = &self.nodes[pix.0].value;
                let p = pv.shape()[0];
                let mut dmap = ArrayD::zeros(mv.raw_dim());
                let mut dpix = ArrayD::zeros(pv.raw_dim());
                for pi in 0..p {
                    let u = pv[[pi, 0]];
                    let v = pv[[pi, 1]];
                    let (x0, y0, fx, fy) = bilinear_cell(u, v, w, h);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let u_live = u > 0.0 && u < (w - 1) as f64 && w > 1;
                    let v_live = v > 0.0 && v < (h - 1) as f64 && h > 1;
                    for ci in 0..c {
                        let gv = g[[pi, ci]];
                        dmap[[ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                        dmap[[ci, y0, x1]] += gv * (1.0 - fy) * fx;
                        dmap[[ci, y1, x0]] += gv * fy * (1.0 - fx);
                        dmap[[ci, y1, x1]] += gv * fy * fx;
                        if u_live {
                            dpix[[pi, 0]] += gv
                                * ((1.0 - fy) * (mv[[ci, y0, x1]] - mv[[ci, y0, x0]])
                                    + fy * (mv[[ci, y1, x1]] - mv[[ci, y1, x0]]));
                        }
                        if v_live {
                            dpix[[pi, 1]] += gv
                                * ((1.0 - fx) * (mv[[ci, y1, x0]] - mv[[ci, y0, x0]])
                                    + fx * (mv[[ci, y1, x1]] - mv[[ci, y0, x1]]));
                        }
                    }
                }
                add_into(&mut grads[map.0], dmap.view());
                add_into(&mut grads[pix.0], dpix.view());
            }
            Op::VarianceViews(x) => {
                let s = self.nodes[x.0].value.shape();
                let (n, p, c) = (s[0], s[1], s[2]);
                let xv = &self.nodes[x.0].value;
                let mut dx = ArrayD::zeros(xv.raw_dim());
                for pi in 0..p {
                    for ci in 0..c {
                        let mut mean = 0.0;
                        for vi in 0..n {
                            mean += xv[[vi, pi, ci]];
                        }
                        mean /= n as f64;
                        let gv = g[[pi, ci]];
                        for vi in 0..n {
                            dx[[vi, pi, ci]] = gv * 2.0 * (xv[[vi, pi, ci]] - mean) / n as f64;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
            Op::Stack(xs) => {
                for (row, v) in xs.iter().enumerate() {
                    add_into(&mut grads[v.0], g.index_axis(Axis(0), row));
                }
            }
            Op::ProjectPoints { pts, k, r, t } => {
                let xv = &self.nodes[pts.0].value;
                let p = xv.shape()[0];
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let out = &self.nodes[i].value;
                for pi in 0..p {
                    let pw = Vector3::new(xv[[pi, 0]], xv[[pi, 1]], xv[[pi, 2]]);
                    let pc = r * pw + t;
                    if pc.z <= PROJECT_MIN_DEPTH {
                        continue;
                    }
                    let u = out[[pi, 0]];
                    let v = out[[pi, 1]];
                    // Jacobian of (u, v, z) with respect to the
                    // camera-frame point, rows chained through r below.
                    let du = Vector3::new(
                        k[(0, 0)] / pc.z,
                        k[(0, 1)] / pc.z,
                        -(u - k[(0, 2)]) / pc.z,
                    );
                    let dv = Vector3::new(0.0, k[(1, 1)] / pc.z, -(v - k[(1, 2)]) / pc.z);
                    let dz = Vector3::new(0.0, 0.0, 1.0);
                    let gcam = g[[pi, 0]] * du + g[[pi, 1]] * dv + g[[pi, 2]] * dz;
                    let gworld = r.transpose() * gcam;
                    for j in 0..3 {
                        dx[[pi, j]] += gworld[j];
                    }
                }
                add_into(&mut grads[pts.0], dx.view());
            }
            Op::UnprojectDepths { depths, rays } => {
                let p = rays.dim().0;
                let mut dd = ArrayD::zeros(self.nodes[depths.0].value.raw_dim());
                for pi in 0..p {
                    let mut acc = 0.0;
                    for j in 0..3 {
                        acc += g[[pi, j]] * rays[(pi, j)];
                    }
                    dd[[pi]] = acc;
                }
                add_into(&mut grads[depths.0], dd.view());
            }
            Op::AffineRows { x, scale } => {
                let mut dx = g.clone();
                let last = dx.ndim() - 1;
                for mut lane in dx.lanes_mut(Axis(last)) {
                    for (j, v) in lane.iter_mut().enumerate() {
                        *v *= scale[j];
                    }
                }
                add_into(&mut grads[x.0], dx.view());
            }
        }
    }
}

/// Depth below which projected points are treated as behind the camera.
/// Camera-frame depth below which `project_points` treats a point as
/// behind the camera: its row degenerates to `(0, 0, z)` and is
/// excluded from the gradient. Consumers gating on projection validity
/// should test against the same threshold.
pub const PROJECT_MIN_DEPTH: f64 = 1e-9;

/// Shared clamp-to-edge cell lookup for bilinear sampling: returns the
/// top-left corner of the interpolation cell and the fractional
/// offsets.
fn bilinear_cell(u: f64, v: f64, w: usize, h: usize) -> (usize, usize, f64, f64) {
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let x0 = (uc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (vc.floor() as usize).min(h.saturating_sub(2));
    (x0, y0, uc - x0 as f64, vc - y0 as f64)
}
