//! Minimal CNN training engine: forward, backward, momentum SGD and
//! evaluation. Supplies the task loss and accuracy measurements the
//! compression experiments are built on.
//!
//! Training is deterministic for a fixed seed: batches are accumulated
//! over fixed-size sample chunks whose partial gradients are reduced in
//! chunk order, so results do not depend on thread scheduling.

pub mod ops;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::linalg::{Matrix, Tensor4};
pub use ops::conv_output_dims;

/// Samples per gradient-accumulation chunk. Fixed (not tied to the thread
/// count) so training results are machine-independent.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        s: usize,
        c: usize,
        m: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    SoftmaxXent,
}

/// Channels x height x width of an activation volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn resolve_shape(cur: Shape3, spec: &LayerSpec) -> Result<Shape3> {
    match *spec {
        LayerSpec::Conv {
            s,
            c,
            m,
            stride,
            padding,
        } => {
            ensure!(s >= 1 && m >= 1 && stride >= 1, "bad conv dims");
            ensure!(
                c == cur.c,
                "conv expects {c} input channels, previous layer provides {}",
                cur.c
            );
            if padding == Padding::Valid {
                ensure!(
                    cur.h >= s && cur.w >= s,
                    "valid conv window {s} exceeds input {}x{}",
                    cur.h,
                    cur.w
                );
            }
            let (oh, ow, _, _) =
                ops::conv_output_dims(cur.h, cur.w, s, stride, padding == Padding::Same);
            Ok(Shape3 { c: m, h: oh, w: ow })
        }
        LayerSpec::MaxPool { window, stride } => {
            ensure!(window >= 1 && stride >= 1, "bad pool dims");
            ensure!(
                cur.h >= window && cur.w >= window,
                "pool window {window} exceeds input {}x{}",
                cur.h,
                cur.w
            );
            let (oh, ow, _, _) = ops::conv_output_dims(cur.h, cur.w, window, stride, false);
            Ok(Shape3 { c: cur.c, h: oh, w: ow })
        }
        LayerSpec::Relu => Ok(cur),
        LayerSpec::FullyConnected { in_dim, out_dim } => {
            ensure!(out_dim >= 1, "fc needs out_dim >= 1");
            ensure!(
                in_dim == cur.len(),
                "fc expects {in_dim} inputs, previous layer provides {}",
                cur.len()
            );
            Ok(Shape3 {
                c: out_dim,
                h: 1,
                w: 1,
            })
        }
        LayerSpec::SoftmaxXent => {
            ensure!(cur.len() >= 2, "softmax-xent needs at least two classes");
            Ok(cur)
        }
    }
}

/// A validated layer chain with every intermediate shape resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    specs: Vec<LayerSpec>,
    shapes: Vec<Shape3>,
}

impl Graph {
    pub fn new(input: Shape3, specs: Vec<LayerSpec>) -> Result<Self> {
        ensure!(!specs.is_empty(), "layer chain is empty");
        ensure!(input.len() >= 1, "empty input shape");
        let mut shapes = vec![input];
        for (i, spec) in specs.iter().enumerate() {
            if matches!(spec, LayerSpec::SoftmaxXent) {
                ensure!(
                    i == specs.len() - 1,
                    "softmax-xent must be the final layer"
                );
            }
            let next = resolve_shape(shapes[i], spec)?;
            shapes.push(next);
        }
        ensure!(
            matches!(specs.last(), Some(LayerSpec::SoftmaxXent)),
            "layer chain must end with softmax-xent"
        );
        Ok(Self { specs, shapes })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> Shape3 {
        self.shapes[0]
    }

    /// Input shape of layer `i`.
    pub fn shape_in(&self, i: usize) -> Shape3 {
        self.shapes[i]
    }

    /// Output shape of layer `i`.
    pub fn shape_out(&self, i: usize) -> Shape3 {
        self.shapes[i + 1]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Graph-layer indices of the convolutional layers, in order.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// The LeNet-5 shaped model used by the desk-scale experiments. The first
/// conv uses same-padding so a 28x28 input flattens to 400 features in
/// front of the classic 120/84 fully-connected stack.
pub fn lenet(input: Shape3, classes: usize) -> Result<Graph> {
    let mut specs = vec![
        LayerSpec::Conv {
            s: 5,
            c: input.c,
            m: 6,
            stride: 1,
            padding: Padding::Same,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::Conv {
            s: 5,
            c: 6,
            m: 16,
            stride: 1,
            padding: Padding::Valid,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
    ];
    let mut cur = input;
    for spec in &specs {
        cur = resolve_shape(cur, spec)?;
    }
    specs.extend([
        LayerSpec::FullyConnected {
            in_dim: cur.len(),
            out_dim: 120,
        },
        LayerSpec::Relu,
        LayerSpec::FullyConnected {
            in_dim: 120,
            out_dim: 84,
        },
        LayerSpec::Relu,
        LayerSpec::FullyConnected {
            in_dim: 84,
            out_dim: classes,
        },
        LayerSpec::SoftmaxXent,
    ]);
    Graph::new(input, specs)
}

/// Parameters of one layer; `Stateless` for layers without weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamLayer {
    Conv { w: Tensor4, b: Vec<f64> },
    Fc { w: Matrix, b: Vec<f64> },
    Stateless,
}

/// All learnable parameters plus their graph. `version` increments on
/// every SGD step and invalidates outstanding forward caches.
#[derive(Debug, Clone)]
pub struct ModelParams {
    graph: Graph,
    layers: Vec<ParamLayer>,
    version: u64,
}

impl ModelParams {
    /// He-style fan-in scaled Gaussian initialization, deterministic in
    /// the seed. Biases start at zero.
    pub fn init(graph: Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(graph.len());
        for spec in graph.specs() {
            layers.push(match *spec {
                LayerSpec::Conv { s, c, m, .. } => {
                    let fan_in = (s * s * c) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    let data: Vec<f64> =
                        (0..s * s * c * m).map(|_| dist.sample(&mut rng)).collect();
                    ParamLayer::Conv {
                        w: Tensor4::new(s, s, c, m, data).unwrap(),
                        b: vec![0.0; m],
                    }
                }
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    let dist = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
                    let data: Vec<f64> =
                        (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect();
                    ParamLayer::Fc {
                        w: Matrix::new(out_dim, in_dim, data).unwrap(),
                        b: vec![0.0; out_dim],
                    }
                }
                _ => ParamLayer::Stateless,
            });
        }
        Self {
            graph,
            layers,
            version: 0,
        }
    }

    /// Assemble a model from existing parameter layers, validating that
    /// they match the graph's layer chain.
    pub fn from_parts(graph: Graph, layers: Vec<ParamLayer>) -> Result<Self> {
        ensure!(
            layers.len() == graph.len(),
            "expected {} parameter layers, got {}",
            graph.len(),
            layers.len()
        );
        for (i, (spec, layer)) in graph.specs().iter().zip(&layers).enumerate() {
            match (spec, layer) {
                (&LayerSpec::Conv { s, c, m, .. }, ParamLayer::Conv { w, b }) => {
                    ensure!(
                        w.dims() == (s, s, c, m) && b.len() == m,
                        "conv parameter shape mismatch at layer {i}"
                    );
                }
                (&LayerSpec::FullyConnected { in_dim, out_dim }, ParamLayer::Fc { w, b }) => {
                    ensure!(
                        w.rows() == out_dim && w.cols() == in_dim && b.len() == out_dim,
                        "fc parameter shape mismatch at layer {i}"
                    );
                }
                (
                    LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::SoftmaxXent,
                    ParamLayer::Stateless,
                ) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "parameter kind does not match layer spec at layer {i}"
                    )))
                }
            }
        }
        Ok(Self {
            graph,
            layers,
            version: 0,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn layers(&self) -> &[ParamLayer] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                ParamLayer::Conv { w, b } => w.len() + b.len(),
                ParamLayer::Fc { w, b } => w.rows() * w.cols() + b.len(),
                ParamLayer::Stateless => 0,
            })
            .sum()
    }

    /// Weight tensor of the `conv_idx`-th convolutional layer.
    pub fn conv_weight(&self, conv_idx: usize) -> Result<&Tensor4> {
        let indices = self.graph.conv_layer_indices();
        let li = *indices.get(conv_idx).ok_or_else(|| {
            Error::Contract(format!(
                "conv layer {conv_idx} out of range ({} conv layers)",
                indices.len()
            ))
        })?;
        match &self.layers[li] {
            ParamLayer::Conv { w, .. } => Ok(w),
            _ => unreachable!("conv index resolved to non-conv layer"),
        }
    }

    /// Zero-filled gradient (or velocity) buffers shaped like the params.
    pub fn zero_grads(&self) -> Gradients {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                ParamLayer::Conv { w, b } => {
                    let (s1, s2, c, m) = w.dims();
                    ParamLayer::Conv {
                        w: Tensor4::zeros(s1, s2, c, m),
                        b: vec![0.0; b.len()],
                    }
                }
                ParamLayer::Fc { w, b } => ParamLayer::Fc {
                    w: Matrix::zeros(w.rows(), w.cols()),
                    b: vec![0.0; b.len()],
                },
                ParamLayer::Stateless => ParamLayer::Stateless,
            })
            .collect();
        Gradients { layers }
    }
}

/// Per-parameter gradients, shaped exactly like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<ParamLayer>,
}


/// A batch of samples in `n x (c*h*w)` contiguous layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    pub shape: Shape3,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Batch {
        let sz = ds.shape.len();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend(ds.image(i).iter().map(|&v| v as f64));
        }
        Batch {
            n: indices.len(),
            shape: ds.shape,
            data,
        }
    }
}

/// Activations recorded by [`forward`] for a later [`backward`] call.
/// Tied to the model version that produced it.
pub struct ForwardCache {
    model_version: u64,
    n: usize,
    /// `acts[i]` is the input of layer `i`; `acts[len]` holds the softmax
    /// probabilities.
    acts: Vec<Vec<f64>>,
    /// For each max-pool layer, the argmax input index per output cell.
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn par_layer<F>(in_sz: usize, out_sz: usize, input: &[f64], out: &mut [f64], f: F)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    out.par_chunks_mut(out_sz)
        .zip(input.par_chunks(in_sz))
        .with_min_len(GRAD_CHUNK)
        .for_each(|(o, i)| f(i, o));
}

/// Run the network on a batch; returns per-sample logits (inputs of the
/// softmax-xent layer) and the cache backward needs.
pub fn forward(model: &ModelParams, batch: &Batch) -> Result<(Matrix, ForwardCache)> {
    let graph = &model.graph;
    ensure!(
        batch.shape == graph.input_shape(),
        "batch shape {:?} does not match model input {:?}",
        batch.shape,
        graph.input_shape()
    );
    ensure!(batch.n >= 1, "empty batch");
    let n = batch.n;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(graph.len() + 1);
    acts.push(batch.data.clone());
    let mut argmax: Vec<Option<Vec<usize>>> = vec![None; graph.len()];

    for (li, spec) in graph.specs().iter().enumerate() {
        let in_shape = graph.shape_in(li);
        let out_shape = graph.shape_out(li);
        let (in_sz, out_sz) = (in_shape.len(), out_shape.len());
        let mut out = vec![0.0; n * out_sz];
        let input = acts.last().unwrap();
        match (spec, &model.layers[li]) {
            (&LayerSpec::Conv { s, stride, padding, .. }, ParamLayer::Conv { w, b }) => {
                let (oh, ow, pt, pl) = ops::conv_output_dims(
                    in_shape.h,
                    in_shape.w,
                    s,
                    stride,
                    padding == Padding::Same,
                );
                par_layer(in_sz, out_sz, input, &mut out, |i, o| {
                    ops::conv_forward(i, in_shape.h, in_shape.w, w, b, stride, pt, pl, o, oh, ow);
                });
            }
            (&LayerSpec::MaxPool { window, stride }, _) => {
                let (oh, ow, _, _) =
                    ops::conv_output_dims(in_shape.h, in_shape.w, window, stride, false);
                let mut am = vec![0usize; n * out_sz];
                out.par_chunks_mut(out_sz)
                    .zip(am.par_chunks_mut(out_sz))
                    .zip(input.par_chunks(in_sz))
                    .for_each(|((o, a), i)| {
                        ops::maxpool_forward(
                            i, in_shape.c, in_shape.h, in_shape.w, window, stride, o, oh, ow, a,
                        );
                    });
                argmax[li] = Some(am);
            }
            (LayerSpec::Relu, _) => {
                par_layer(in_sz, out_sz, input, &mut out, |i, o| {
                    ops::relu_forward(i, o);
                });
            }
            (LayerSpec::FullyConnected { .. }, ParamLayer::Fc { w, b }) => {
                par_layer(in_sz, out_sz, input, &mut out, |i, o| {
                    ops::fc_forward(i, w, b, o);
                });
            }
            (LayerSpec::SoftmaxXent, _) => {
                par_layer(in_sz, out_sz, input, &mut out, |i, o| {
                    ops::softmax_row(i, o);
                });
            }
            _ => unreachable!("parameter kind matches spec by construction"),
        }
        acts.push(out);
    }

    let classes = graph.num_classes();
    let logits = Matrix::from_raw(n, classes, acts[graph.len() - 1].clone());
    Ok((
        logits,
        ForwardCache {
            model_version: model.version,
            n,
            acts,
            argmax,
        },
    ))
}

/// Mean cross-entropy of cached softmax probabilities against labels.
pub fn xent_loss(cache: &ForwardCache, labels: &[usize], classes: usize) -> f64 {
    let probs = cache.probs();
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs[i * classes + l].ln();
    }
    loss / labels.len() as f64
}

/// Gradients of the mean cross-entropy loss for a cached forward pass.
/// Fails if the model has stepped since the cache was produced.
pub fn backward(model: &ModelParams, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
    let graph = &model.graph;
    ensure!(
        cache.model_version == model.version,
        "stale forward cache: model version {} vs cache version {}",
        model.version,
        cache.model_version
    );
    ensure!(
        labels.len() == cache.n,
        "label count {} does not match batch size {}",
        labels.len(),
        cache.n
    );
    let classes = graph.num_classes();
    ensure!(
        labels.iter().all(|&l| l < classes),
        "label out of range for {classes} classes"
    );

    let n = cache.n;
    let mut grads = model.zero_grads();

    // Softmax-xent layer: d logits = (p - y) / n.
    let probs = cache.probs();
    let mut d_cur = vec![0.0; n * classes];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for c in 0..classes {
            d_cur[i * classes + c] = probs[i * classes + c] * inv_n;
        }
        d_cur[i * classes + labels[i]] -= inv_n;
    }

    for li in (0..graph.len()).rev() {
        let spec = &graph.specs()[li];
        if matches!(spec, LayerSpec::SoftmaxXent) {
            continue;
        }
        let in_shape = graph.shape_in(li);
        let out_shape = graph.shape_out(li);
        let (in_sz, out_sz) = (in_shape.len(), out_shape.len());
        let input = &cache.acts[li];
        let mut d_prev = vec![0.0; n * in_sz];

        match (spec, &model.layers[li]) {
            (&LayerSpec::Conv { s, stride, padding, .. }, ParamLayer::Conv { w, b }) => {
                let (oh, ow, pt, pl) = ops::conv_output_dims(
                    in_shape.h,
                    in_shape.w,
                    s,
                    stride,
                    padding == Padding::Same,
                );
                let (s1, s2, c, m) = w.dims();
                let partials: Vec<(Tensor4, Vec<f64>)> = d_prev
                    .par_chunks_mut(GRAD_CHUNK * in_sz)
                    .zip(d_cur.par_chunks(GRAD_CHUNK * out_sz))
                    .zip(input.par_chunks(GRAD_CHUNK * in_sz))
                    .map(|((dp, dc), inp)| {
                        let mut dw = Tensor4::zeros(s1, s2, c, m);
                        let mut db = vec![0.0; b.len()];
                        let samples = dc.len() / out_sz;
                        for si in 0..samples {
                            ops::conv_backward(
                                &inp[si * in_sz..(si + 1) * in_sz],
                                in_shape.h,
                                in_shape.w,
                                w,
                                stride,
                                pt,
                                pl,
                                &dc[si * out_sz..(si + 1) * out_sz],
                                oh,
                                ow,
                                &mut dw,
                                &mut db,
                                &mut dp[si * in_sz..(si + 1) * in_sz],
                            );
                        }
                        (dw, db)
                    })
                    .collect();
                if let ParamLayer::Conv { w: gw, b: gb } = &mut grads.layers[li] {
                    for (dw, db) in partials {
                        for (x, y) in gw.data_mut().iter_mut().zip(dw.data()) {
                            *x += y;
                        }
                        for (x, y) in gb.iter_mut().zip(&db) {
                            *x += y;
                        }
                    }
                }
            }
            (LayerSpec::MaxPool { .. }, _) => {
                let am = cache.argmax[li].as_ref().expect("pool argmax cached");
                d_prev
                    .par_chunks_mut(in_sz)
                    .zip(d_cur.par_chunks(out_sz))
                    .zip(am.par_chunks(out_sz))
                    .for_each(|((dp, dc), a)| {
                        ops::maxpool_backward(dc, a, dp);
                    });
            }
            (LayerSpec::Relu, _) => {
                d_prev
                    .par_chunks_mut(in_sz)
                    .zip(d_cur.par_chunks(out_sz))
                    .zip(input.par_chunks(in_sz))
                    .for_each(|((dp, dc), i)| {
                        ops::relu_backward(i, dc, dp);
                    });
            }
            (LayerSpec::FullyConnected { in_dim, out_dim }, ParamLayer::Fc { w, .. }) => {
                let partials: Vec<(Vec<f64>, Vec<f64>)> = d_prev
                    .par_chunks_mut(GRAD_CHUNK * in_sz)
                    .zip(d_cur.par_chunks(GRAD_CHUNK * out_sz))
                    .zip(input.par_chunks(GRAD_CHUNK * in_sz))
                    .map(|((dp, dc), inp)| {
                        let mut dw = vec![0.0; in_dim * out_dim];
                        let mut db = vec![0.0; *out_dim];
                        let samples = dc.len() / out_sz;
                        for si in 0..samples {
                            ops::fc_backward(
                                &inp[si * in_sz..(si + 1) * in_sz],
                                w,
                                &dc[si * out_sz..(si + 1) * out_sz],
                                &mut dw,
                                &mut db,
                                &mut dp[si * in_sz..(si + 1) * in_sz],
                            );
                        }
                        (dw, db)
                    })
                    .collect();
                if let ParamLayer::Fc { w: gw, b: gb } = &mut grads.layers[li] {
                    for (dw, db) in partials {
                        for i in 0..gw.rows() {
                            for j in 0..gw.cols() {
                                gw.set(i, j, gw.at(i, j) + dw[i * gw.cols() + j]);
                            }
                        }
                        for (x, y) in gb.iter_mut().zip(&db) {
                            *x += y;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        d_cur = d_prev;
    }

    Ok(grads)
}

/// Momentum SGD update. `extra` carries additional per-conv-layer weight
/// gradients (the regularizer term), indexed in conv order, added to the
/// task gradient before the momentum update.
pub fn sgd_step(
    model: &mut ModelParams,
    grads: &Gradients,
    extra: Option<&[Option<Tensor4>]>,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    ensure!(
        grads.layers.len() == model.layers.len(),
        "gradient layer count mismatch"
    );
    let conv_indices = model.graph.conv_layer_indices();
    if let Some(extra) = extra {
        ensure!(
            extra.len() == conv_indices.len(),
            "extra gradients cover {} conv layers, model has {}",
            extra.len(),
            conv_indices.len()
        );
    }

    for (li, (param, grad)) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .enumerate()
    {
        let vel = &mut velocity.layers[li];
        match (param, grad, vel) {
            (
                ParamLayer::Conv { w, b },
                ParamLayer::Conv { w: gw, b: gb },
                ParamLayer::Conv { w: vw, b: vb },
            ) => {
                ensure!(w.dims() == gw.dims(), "conv grad shape mismatch at {li}");
                let extra_t = extra.and_then(|e| {
                    let conv_idx = conv_indices.iter().position(|&x| x == li).unwrap();
                    e[conv_idx].as_ref()
                });
                if let Some(et) = extra_t {
                    ensure!(
                        et.dims() == w.dims(),
                        "extra grad shape mismatch at conv layer {li}"
                    );
                }
                for (i, (wv, vv)) in w
                    .data_mut()
                    .iter_mut()
                    .zip(vw.data_mut().iter_mut())
                    .enumerate()
                {
                    let mut g = gw.data()[i];
                    if let Some(et) = extra_t {
                        g += et.data()[i];
                    }
                    *vv = momentum * *vv + g;
                    *wv -= lr * *vv;
                }
                for ((bv, gv), vv) in b.iter_mut().zip(gb).zip(vb) {
                    *vv = momentum * *vv + gv;
                    *bv -= lr * *vv;
                }
            }
            (
                ParamLayer::Fc { w, b },
                ParamLayer::Fc { w: gw, b: gb },
                ParamLayer::Fc { w: vw, b: vb },
            ) => {
                let (rows, cols) = (w.rows(), w.cols());
                ensure!(
                    gw.rows() == rows && gw.cols() == cols,
                    "fc grad shape mismatch at {li}"
                );
                for i in 0..rows {
                    for j in 0..cols {
                        let v = momentum * vw.at(i, j) + gw.at(i, j);
                        vw.set(i, j, v);
                        w.set(i, j, w.at(i, j) - lr * v);
                    }
                }
                for ((bv, gv), vv) in b.iter_mut().zip(gb).zip(vb) {
                    *vv = momentum * *vv + gv;
                    *bv -= lr * *vv;
                }
            }
            (ParamLayer::Stateless, ParamLayer::Stateless, ParamLayer::Stateless) => {}
            _ => {
                return Err(Error::Contract(format!(
                    "parameter/gradient kind mismatch at layer {li}"
                )))
            }
        }
    }
    model.version += 1;
    Ok(())
}

/// Hook adding per-conv-layer gradient terms during training. The hook is
/// told about epoch boundaries (to refresh its internal state) and is
/// queried for extra gradients on every step.
pub trait Regularizer {
    fn epoch_start(&mut self, epoch: usize, model: &ModelParams) -> Result<()>;

    /// Extra weight gradient for the `conv_idx`-th conv layer, already in
    /// the layer's tensor layout. `None` contributes nothing.
    fn conv_weight_grad(&self, conv_idx: usize, weights: &Tensor4) -> Result<Option<Tensor4>>;

    /// Current regularization penalty per conv layer, for the epoch log.
    fn penalties(&self, model: &ModelParams) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Learning-rate step decay: multiply by `lr_decay_factor` every
    /// `lr_decay_every` epochs (0 disables decay).
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 60,
            seed: 42,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0,1)"
        );
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(
            self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0,
            "lr decay factor must lie in (0,1]"
        );
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub penalties: Vec<f64>,
    pub accuracy: f64,
}

impl EpochRecord {
    pub fn render(&self) -> String {
        let mut line = format!(
            "epoch={} loss={:.6} acc={:.4}",
            self.epoch, self.loss, self.accuracy
        );
        for (i, p) in self.penalties.iter().enumerate() {
            line.push_str(&format!(" penalty{i}={p:.6e}"));
        }
        line
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.render());
            out.push('\n');
        }
        out
    }
}

fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

/// Momentum SGD training loop. Deterministic given the seed; per-epoch
/// log lines go to stdout and into the returned log. An optional
/// regularizer hook is refreshed at epoch boundaries and contributes
/// extra conv-layer gradients on every step.
pub fn train(
    model: ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut hook: Option<&mut dyn Regularizer>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    ensure!(!ds.is_empty(), "training dataset is empty");
    ensure!(
        ds.shape == model.graph.input_shape(),
        "dataset shape {:?} does not match model input {:?}",
        ds.shape,
        model.graph.input_shape()
    );
    ensure!(
        ds.num_classes == model.graph.num_classes(),
        "dataset has {} classes, model {}",
        ds.num_classes,
        model.graph.num_classes()
    );

    let mut model = model;
    let mut velocity = model.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let conv_indices = model.graph.conv_layer_indices();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if let Some(h) = hook.as_deref_mut() {
            h.epoch_start(epoch, &model)?;
        }
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(ds, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i] as usize).collect();
            let (logits, cache) = forward(&model, &batch)?;
            let batch_loss = xent_loss(&cache, &labels, model.graph.num_classes());
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += batch_loss * labels.len() as f64;
            correct += count_correct(&logits, &labels);

            let grads = backward(&model, &cache, &labels)?;
            let extra = match hook.as_deref() {
                Some(h) => {
                    let mut per_conv = Vec::with_capacity(conv_indices.len());
                    let mut any = false;
                    for (ci, &li) in conv_indices.iter().enumerate() {
                        let w = match &model.layers[li] {
                            ParamLayer::Conv { w, .. } => w,
                            _ => unreachable!(),
                        };
                        let g = h.conv_weight_grad(ci, w)?;
                        any |= g.is_some();
                        per_conv.push(g);
                    }
                    if any { Some(per_conv) } else { None }
                }
                None => None,
            };
            sgd_step(
                &mut model,
                &grads,
                extra.as_deref(),
                &mut velocity,
                lr,
                cfg.momentum,
            )?;
        }

        let penalties = match hook.as_deref() {
            Some(h) => h.penalties(&model)?,
            None => Vec::new(),
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / ds.len() as f64,
            penalties,
            accuracy: correct as f64 / ds.len() as f64,
        };
        println!("{}", record.render());
        log.records.push(record);
    }
    Ok((model, log))
}

/// Top-1 accuracy over a dataset. Ties resolve to the lowest class index.
pub fn evaluate(model: &ModelParams, ds: &Dataset) -> Result<f64> {
    ensure!(!ds.is_empty(), "evaluation dataset is empty");
    ensure!(
        ds.shape == model.graph.input_shape(),
        "dataset shape {:?} does not match model input {:?}",
        ds.shape,
        model.graph.input_shape()
    );
    let n = ds.len();
    let block = 256usize;
    let blocks: Vec<usize> = (0..n.div_ceil(block)).collect();
    let correct: usize = blocks
        .par_iter()
        .map(|&bi| {
            let lo = bi * block;
            let hi = ((bi + 1) * block).min(n);
            let indices: Vec<usize> = (lo..hi).collect();
            let batch = Batch::gather(ds, &indices);
            let (logits, _) = forward(model, &batch).expect("shapes validated above");
            let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i] as usize).collect();
            count_correct(&logits, &labels)
        })
        .sum();
    Ok(correct as f64 / n as f64)
}
